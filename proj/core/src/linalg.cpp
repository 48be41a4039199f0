#include "icl_lab/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <Eigen/Dense>

namespace icl::linalg {
namespace {

using ColMatrix = Eigen::MatrixXd;

void require_2d(const TensorD& a, const char* what) {
  if (a.rank() != 2) throw ShapeMismatch(std::string(what) + ": expected a 2-D tensor");
  a.require_finite(what);
}

std::vector<std::size_t> descending_order(const std::vector<double>& values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return values[i] > values[j]; });
  return order;
}

// Index of the first coordinate that decides the sign convention.
Eigen::Index sign_pivot(const Eigen::Ref<const Eigen::VectorXd>& v, double tol) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::abs(v[i]) > tol) return i;
  }
  return -1;
}

}  // namespace

TensorD covariance(const TensorD& points, CovarianceDivisor divisor) {
  require_2d(points, "covariance");
  const auto n = points.dim(0);
  if (n < 2) throw DegenerateCloud("covariance needs at least 2 points, got " + std::to_string(n));
  const auto x = points.mat();
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const RowMatrix<double> centered = x.rowwise() - mean;
  const double denom = divisor == CovarianceDivisor::kSampleMinusOne ? double(n - 1) : double(n);
  RowMatrix<double> cov = (centered.transpose() * centered) / denom;
  // Exact symmetry; the product above is symmetric only up to rounding.
  cov = (0.5 * (cov + cov.transpose())).eval();
  return TensorD::from_matrix(cov);
}

double trace(const TensorD& a) {
  require_2d(a, "trace");
  return a.mat().diagonal().sum();
}

void canonical_sign(std::span<double> v, double tol) {
  for (double x : v) {
    if (std::abs(x) > tol) {
      if (x < 0) {
        for (double& y : v) y = -y;
      }
      return;
    }
  }
}

SymEigen sym_eig(const TensorD& input) {
  require_2d(input, "sym_eig");
  const auto d = static_cast<Eigen::Index>(input.dim(0));
  if (input.dim(1) != input.dim(0)) throw ShapeMismatch("sym_eig: matrix is not square");

  ColMatrix a = input.mat();
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
    throw NotSymmetric("sym_eig: input is not symmetric within 1e-10");
  }
  a = 0.5 * (a + a.transpose());

  ColMatrix v = ColMatrix::Identity(d, d);
  const double target = 1e-12 * a.norm();
  auto off_norm = [&] {
    double s = 0.0;
    for (Eigen::Index j = 0; j < d; ++j)
      for (Eigen::Index i = 0; i < d; ++i)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };

  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps && off_norm() > target; ++sweep) {
    for (Eigen::Index p = 0; p < d - 1; ++p) {
      for (Eigen::Index q = p + 1; q < d; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < d; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < d; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < d; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  if (off_norm() > target) throw NumericalFailure("sym_eig: Jacobi sweeps did not converge");

  std::vector<double> diag(d);
  for (Eigen::Index i = 0; i < d; ++i) diag[i] = a(i, i);
  const auto order = descending_order(diag);

  SymEigen out;
  out.eigenvalues.resize(d);
  out.eigenvectors = TensorD(Shape{std::size_t(d), std::size_t(d)});
  auto vec = out.eigenvectors.mat();
  for (Eigen::Index j = 0; j < d; ++j) {
    out.eigenvalues[j] = diag[order[j]];
    Eigen::VectorXd col = v.col(order[j]);
    canonical_sign({col.data(), std::size_t(d)});
    vec.col(j) = col;
  }
  return out;
}

namespace {

// One-sided (Hestenes) Jacobi for m >= n. Returns column-major U (m×n),
// singular values and V (n×n), unsorted.
void hestenes(ColMatrix& u, ColMatrix& v) {
  const Eigen::Index n = u.cols();
  v = ColMatrix::Identity(n, n);
  constexpr int kMaxSweeps = 80;
  constexpr double kTol = 1e-15;
  // Columns this small are roundoff; rotating them against the rest never
  // settles on rank-deficient inputs.
  const double negligible = 1e-30 * u.squaredNorm();
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double alpha = u.col(p).squaredNorm();
        const double beta = u.col(q).squaredNorm();
        const double gamma = u.col(p).dot(u.col(q));
        if (alpha <= negligible || beta <= negligible) continue;
        if (std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (Eigen::Index k = 0; k < u.rows(); ++k) {
          const double up = u(k, p);
          const double uq = u(k, q);
          u(k, p) = c * up - s * uq;
          u(k, q) = s * up + c * uq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vp = v(k, p);
          const double vq = v(k, q);
          v(k, p) = c * vp - s * vq;
          v(k, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) return;
  }
  throw NumericalFailure("svd: one-sided Jacobi did not converge");
}

}  // namespace

Svd svd(const TensorD& a) {
  require_2d(a, "svd");
  const bool wide = a.dim(0) < a.dim(1);
  ColMatrix work = wide ? ColMatrix(a.mat().transpose()) : ColMatrix(a.mat());
  ColMatrix v;
  hestenes(work, v);

  const Eigen::Index m = work.rows();
  const Eigen::Index k = work.cols();
  std::vector<double> sigma(k);
  for (Eigen::Index j = 0; j < k; ++j) sigma[j] = work.col(j).norm();
  const auto order = descending_order(sigma);
  const double smax = k ? sigma[order[0]] : 0.0;

  ColMatrix u_out(m, k);
  ColMatrix v_out(k, k);
  std::vector<double> s_out(k);
  std::vector<Eigen::Index> pending;
  for (Eigen::Index j = 0; j < k; ++j) {
    const auto src = order[j];
    s_out[j] = sigma[src];
    v_out.col(j) = v.col(src);
    if (sigma[src] > 1e-13 * smax && sigma[src] > 0.0) {
      u_out.col(j) = work.col(src) / sigma[src];
    } else {
      pending.push_back(j);
    }
  }
  // Null directions: complete U to an orthonormal set.
  std::vector<bool> filled(k, true);
  for (auto j : pending) filled[j] = false;
  Eigen::Index probe = 0;
  for (auto j : pending) {
    for (; probe < m; ++probe) {
      Eigen::VectorXd e = Eigen::VectorXd::Unit(m, probe);
      for (int pass = 0; pass < 2; ++pass) {
        for (Eigen::Index c = 0; c < k; ++c) {
          if (filled[c]) e -= u_out.col(c).dot(e) * u_out.col(c);
        }
      }
      if (e.norm() > 1e-6) {
        filled[j] = true;
        u_out.col(j) = e.normalized();
        ++probe;
        break;
      }
    }
  }

  for (Eigen::Index j = 0; j < k; ++j) {
    const auto pivot = sign_pivot(v_out.col(j), 1e-12);
    if (pivot >= 0 && v_out(pivot, j) < 0) {
      v_out.col(j) *= -1.0;
      u_out.col(j) *= -1.0;
    }
  }

  Svd out;
  out.s = std::move(s_out);
  if (wide) {
    out.u = TensorD::from_matrix(RowMatrix<double>(v_out));
    out.v = TensorD::from_matrix(RowMatrix<double>(u_out));
  } else {
    out.u = TensorD::from_matrix(RowMatrix<double>(u_out));
    out.v = TensorD::from_matrix(RowMatrix<double>(v_out));
  }
  return out;
}

std::vector<double> singular_values(const TensorD& a) {
  require_2d(a, "singular_values");
  ColMatrix work = a.dim(0) < a.dim(1) ? ColMatrix(a.mat().transpose()) : ColMatrix(a.mat());
  ColMatrix v;
  hestenes(work, v);
  std::vector<double> s(work.cols());
  for (Eigen::Index j = 0; j < work.cols(); ++j) s[j] = work.col(j).norm();
  std::sort(s.begin(), s.end(), std::greater<>());
  return s;
}

double nuclear_norm(const TensorD& a) {
  const auto s = singular_values(a);
  return std::accumulate(s.begin(), s.end(), 0.0);
}

double PcaResult::explained_ratio() const {
  if (total_variance <= 0.0) return 0.0;
  return std::accumulate(explained_variance.begin(), explained_variance.end(), 0.0) / total_variance;
}

PcaResult pca(const TensorD& points, std::size_t r) {
  require_2d(points, "pca");
  const auto d = points.dim(1);
  if (r < 1 || r > d) throw SpecError("pca: rank must be in [1, d]");
  const auto cov = covariance(points);
  const double total = trace(cov);
  if (total < 1e-12) throw DegenerateCloud("pca: total variance below 1e-12");
  const auto eig = sym_eig(cov);

  PcaResult out;
  out.total_variance = total;
  out.components = TensorD(Shape{r, d});
  out.explained_variance.resize(r);
  const auto vec = eig.eigenvectors.mat();
  for (std::size_t i = 0; i < r; ++i) {
    out.explained_variance[i] = std::max(0.0, eig.eigenvalues[i]);
    out.components.mat().row(Eigen::Index(i)) = vec.col(Eigen::Index(i)).transpose();
  }
  const Eigen::RowVectorXd mean = points.mat().colwise().mean();
  out.mean.assign(mean.data(), mean.data() + mean.size());
  return out;
}

TensorD matmul(const TensorD& a, const TensorD& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeMismatch("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  return TensorD::from_matrix(a.mat() * b.mat());
}

TensorD transpose(const TensorD& a) {
  require_2d(a, "transpose");
  return TensorD::from_matrix(a.mat().transpose());
}

double frobenius_norm(const TensorD& a) { return a.mat().norm(); }

}  // namespace icl::linalg
