#include "icl_lab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "icl_lab/linalg.hpp"

namespace icl {

namespace {

constexpr double kMinVariance = 1e-12;

TensorD checked_covariance(const HiddenCloud& cloud, const char* what) {
  cloud.validate();
  auto cov = linalg::covariance(cloud.points);
  if (linalg::trace(cov) < kMinVariance) {
    throw DegenerateCloud(std::string(what) + ": total variance below 1e-12 (layer " + std::to_string(cloud.layer) +
                          ", k=" + std::to_string(cloud.shots) + ")");
  }
  return cov;
}

// Nuclear norm of a PSD matrix through the SVD, cross-checked by its trace.
double psd_nuclear_norm(const TensorD& a) {
  const double nuc = linalg::nuclear_norm(a);
  const double tr = linalg::trace(a);
  if (std::abs(nuc - tr) > 1e-8 * std::max(1.0, std::abs(tr))) {
    throw NumericalFailure("nuclear norm " + std::to_string(nuc) + " disagrees with trace " + std::to_string(tr) +
                           " of a PSD matrix");
  }
  return nuc;
}

}  // namespace

double eccentricity(const HiddenCloud& cloud) {
  const auto cov = checked_covariance(cloud, "eccentricity");
  const auto eig = linalg::sym_eig(cov);
  return std::max(0.0, eig.eigenvalues.front()) / linalg::trace(cov);
}

double covariance_flux(const HiddenCloud& cloud, const TVSFilter& filter, FluxOptions opts) {
  filter.validate();
  if (cloud.layer != filter.layer && !opts.allow_layer_mismatch) {
    throw SpecError("covariance_flux: cloud from layer " + std::to_string(cloud.layer) + " but filter trained at layer " +
                    std::to_string(filter.layer));
  }
  if (std::size_t(filter.d()) != cloud.d()) throw ShapeMismatch("covariance_flux: filter and cloud widths differ");
  const auto cov = checked_covariance(cloud, "covariance_flux");
  // Cov[H·M] = Mᵀ·Cov[H]·M, cheaper than mapping every point.
  const auto m = filter.map_matrix();
  Eigen::MatrixXd mapped = m.mat().transpose() * cov.mat() * m.mat();
  mapped = 0.5 * (mapped + mapped.transpose()).eval();
  return psd_nuclear_norm(TensorD::from_matrix(mapped)) / psd_nuclear_norm(cov);
}

double remaining_cov_ratio(const HiddenCloud& cloud, int r) {
  if (r < 0 || std::size_t(r) > cloud.d()) throw SpecError("remaining_cov_ratio: r must be in [0, d]");
  const auto cov = checked_covariance(cloud, "remaining_cov_ratio");
  const auto eig = linalg::sym_eig(cov);
  double total = 0.0, top = 0.0;
  for (std::size_t i = 0; i < eig.eigenvalues.size(); ++i) {
    const double v = std::max(0.0, eig.eigenvalues[i]);
    total += v;
    if (i < std::size_t(r)) top += v;
  }
  return std::clamp(1.0 - top / total, 0.0, 1.0);
}

std::vector<double> enc_alignment(const TVSFilter& filter, const HiddenCloud& cloud, int m) {
  filter.validate();
  if (m < 1 || std::size_t(m) > cloud.d()) throw SpecError("enc_alignment: m must be in [1, d]");
  if (std::size_t(filter.d()) != cloud.d()) throw ShapeMismatch("enc_alignment: filter and cloud widths differ");
  cloud.validate();
  const auto pcs = linalg::pca(cloud.points, std::size_t(m));
  const auto basis = linalg::svd(filter.w_enc.cast<double>()).u;  // d×r
  const Eigen::MatrixXd coeff = pcs.components.mat() * basis.mat();
  std::vector<double> out(basis.dim(1));
  for (std::size_t j = 0; j < out.size(); ++j) {
    const double norm = basis.mat().col(Eigen::Index(j)).norm();
    out[j] = norm > 0 ? std::min(1.0, coeff.col(Eigen::Index(j)).norm() / norm) : 0.0;
  }
  return out;
}

int effective_rank(const TVSFilter& filter, double rel_tol) {
  const auto s = linalg::singular_values(filter.map_matrix());
  if (s.empty() || s.front() <= 0.0) return 0;
  const double tol = rel_tol * s.front();
  return int(std::count_if(s.begin(), s.end(), [&](double v) { return v > tol; }));
}

PcaProjection pca_projection(const HiddenCloud& cloud, std::vector<int> dims) {
  cloud.validate();
  if (dims.empty()) throw SpecError("pca_projection: no components requested");
  const int top = *std::max_element(dims.begin(), dims.end());
  if (*std::min_element(dims.begin(), dims.end()) < 1 || std::size_t(top) > cloud.d()) {
    throw SpecError("pca_projection: component indices must be in [1, d]");
  }
  const auto pcs = linalg::pca(cloud.points, std::size_t(top));
  const Eigen::Map<const Eigen::RowVectorXd> mean(pcs.mean.data(), Eigen::Index(pcs.mean.size()));
  const Eigen::MatrixXd centered = cloud.points.mat().rowwise() - mean;

  PcaProjection out;
  out.dims = dims;
  out.labels = cloud.labels;
  out.coords = TensorD(Shape{cloud.n(), dims.size()});
  for (std::size_t j = 0; j < dims.size(); ++j) {
    const auto c = Eigen::Index(dims[j] - 1);
    out.coords.mat().col(Eigen::Index(j)) = centered * pcs.components.mat().row(c).transpose();
    out.explained_variance.push_back(pcs.explained_variance[std::size_t(c)]);
  }
  return out;
}

void write_pca_csv(const PcaProjection& proj, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw SpecError("cannot write " + path.string());
  out << "point_id,gold_label";
  for (int d : proj.dims) out << ",pc" << d;
  out << '\n';
  out.precision(17);
  for (std::size_t i = 0; i < proj.coords.dim(0); ++i) {
    out << i << ',' << (i < proj.labels.size() ? proj.labels[i] : "");
    for (std::size_t j = 0; j < proj.coords.dim(1); ++j) out << ',' << proj.coords(i, j);
    out << '\n';
  }
}

}  // namespace icl
