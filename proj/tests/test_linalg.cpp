#include <doctest.h>

#include <cmath>
#include <random>

#include "icl_lab/linalg.hpp"
#include "support.hpp"

using namespace icl;
using namespace icl::linalg;

namespace {

TensorD pts(std::size_t n, std::size_t d, std::initializer_list<double> v) {
  return TensorD(Shape{n, d}, std::vector<double>(v));
}

TensorD random_symmetric(std::size_t d, std::mt19937_64& rng) {
  auto a = test::random_matrix(d, d, rng);
  TensorD s(Shape{d, d});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) s(i, j) = 0.5 * (a(i, j) + a(j, i));
  return s;
}

double rel_frob(const TensorD& a, const TensorD& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += a[i] * a[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

}  // namespace

TEST_CASE("covariance of the symmetric cross is diag(2/3, 2/3)") {
  const auto c = covariance(pts(4, 2, {1, 0, -1, 0, 0, 1, 0, -1}));
  CHECK(c(0, 0) == doctest::Approx(2.0 / 3).epsilon(1e-14));
  CHECK(c(1, 1) == doctest::Approx(2.0 / 3).epsilon(1e-14));
  CHECK(std::abs(c(0, 1)) < 1e-15);
}

TEST_CASE("covariance of identical rows is zero") {
  const auto c = covariance(pts(3, 2, {1.5, -2, 1.5, -2, 1.5, -2}));
  for (double v : c.span()) CHECK(v == 0.0);
}

TEST_CASE("covariance of the three-point cloud matches hand centering") {
  const auto c = covariance(pts(3, 2, {0, 0, 1, 0, 0, 2}));
  CHECK(c(0, 0) == doctest::Approx(1.0 / 3).epsilon(1e-14));
  CHECK(c(0, 1) == doctest::Approx(-1.0 / 3).epsilon(1e-14));
  CHECK(c(1, 0) == doctest::Approx(-1.0 / 3).epsilon(1e-14));
  CHECK(c(1, 1) == doctest::Approx(4.0 / 3).epsilon(1e-14));
}

TEST_CASE("covariance needs two points") {
  CHECK_THROWS_AS(covariance(pts(1, 2, {1, 2})), DegenerateCloud);
}

TEST_CASE("covariance is translation invariant") {
  std::mt19937_64 rng(3);
  auto p = test::random_matrix(20, 5, rng);
  const auto c0 = covariance(p);
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t j = 0; j < 5; ++j) p(i, j) += 100.0 + double(j);
  const auto c1 = covariance(p);
  CHECK(test::max_abs_diff(c0.span(), c1.span()) < 1e-12);
}

TEST_CASE("population divisor rescales covariance but not eigenvalue ratios") {
  std::mt19937_64 rng(4);
  const auto p = test::random_matrix(12, 4, rng);
  const auto a = sym_eig(covariance(p, CovarianceDivisor::kSampleMinusOne));
  const auto b = sym_eig(covariance(p, CovarianceDivisor::kPopulation));
  double ta = 0, tb = 0;
  for (double v : a.eigenvalues) ta += v;
  for (double v : b.eigenvalues) tb += v;
  CHECK(a.eigenvalues[0] / ta == doctest::Approx(b.eigenvalues[0] / tb).epsilon(1e-12));
  CHECK(b.eigenvalues[0] == doctest::Approx(a.eigenvalues[0] * 11.0 / 12.0).epsilon(1e-12));
}

TEST_CASE("sym_eig spec examples") {
  SUBCASE("identity") {
    const auto e = sym_eig(pts(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
    for (double v : e.eigenvalues) CHECK(v == doctest::Approx(1.0));
  }
  SUBCASE("2x2 closed form") {
    const auto e = sym_eig(pts(2, 2, {1.0 / 3, -1.0 / 3, -1.0 / 3, 4.0 / 3}));
    CHECK(e.eigenvalues[0] == doctest::Approx((5 + std::sqrt(13.0)) / 6).epsilon(1e-13));
    CHECK(e.eigenvalues[1] == doctest::Approx((5 - std::sqrt(13.0)) / 6).epsilon(1e-13));
    CHECK(e.eigenvalues[0] == doctest::Approx(1.43426).epsilon(1e-5));
    CHECK(e.eigenvalues[1] == doctest::Approx(0.23241).epsilon(1e-4));
  }
  SUBCASE("diag(5,2,0) gives coordinate eigenvectors") {
    const auto e = sym_eig(pts(3, 3, {5, 0, 0, 0, 2, 0, 0, 0, 0}));
    CHECK(e.eigenvalues == std::vector<double>{5, 2, 0});
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) CHECK(e.eigenvectors(i, j) == doctest::Approx(i == j ? 1.0 : 0.0));
  }
}

TEST_CASE("sym_eig rejects asymmetric input") {
  CHECK_THROWS_AS(sym_eig(pts(2, 2, {1, 2, 2.1, 1})), NotSymmetric);
}

TEST_CASE("sym_eig reconstructs random symmetric matrices") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 1 + std::size_t(trial % 16);
    const auto a = random_symmetric(d, rng);
    const auto e = sym_eig(a);
    TensorD lam(Shape{d, d});
    for (std::size_t i = 0; i < d; ++i) lam(i, i) = e.eigenvalues[i];
    const auto recon = matmul(matmul(e.eigenvectors, lam), transpose(e.eigenvectors));
    CHECK(rel_frob(a, recon) <= 1e-8);
    const auto qtq = matmul(transpose(e.eigenvectors), e.eigenvectors);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(qtq(i, j) - (i == j ? 1.0 : 0.0)) <= 1e-10);
    for (std::size_t i = 0; i + 1 < d; ++i) CHECK(e.eigenvalues[i] >= e.eigenvalues[i + 1]);
  }
}

TEST_CASE("eigenvector signs are canonical and stable") {
  std::mt19937_64 rng(12);
  const auto a = random_symmetric(6, rng);
  const auto e1 = sym_eig(a);
  const auto e2 = sym_eig(a);
  CHECK(e1.eigenvectors == e2.eigenvectors);
  for (std::size_t j = 0; j < 6; ++j) {
    for (std::size_t i = 0; i < 6; ++i) {
      if (std::abs(e1.eigenvectors(i, j)) > 1e-12) {
        CHECK(e1.eigenvectors(i, j) > 0);
        break;
      }
    }
  }
}

TEST_CASE("svd spec examples") {
  CHECK(singular_values(pts(2, 2, {3, 0, 0, 1})) == std::vector<double>{3, 1});
  // u = (2, 0), v = (0, 1): u·vᵀ has one singular value ‖u‖‖v‖ = 2.
  const auto s = singular_values(pts(2, 2, {0, 2, 0, 0}));
  CHECK(s[0] == doctest::Approx(2.0));
  CHECK(std::abs(s[1]) < 1e-14);
}

TEST_CASE("svd reconstructs random rectangular matrices") {
  std::mt19937_64 rng(13);
  for (auto [m, n] : {std::pair{4, 3}, std::pair{3, 4}, std::pair{7, 7}, std::pair{16, 2}, std::pair{1, 5}}) {
    const auto a = test::random_matrix(std::size_t(m), std::size_t(n), rng);
    const auto r = svd(a);
    const auto k = r.s.size();
    TensorD us(Shape{std::size_t(m), k});
    for (std::size_t i = 0; i < std::size_t(m); ++i)
      for (std::size_t j = 0; j < k; ++j) us(i, j) = r.u(i, j) * r.s[j];
    CHECK(rel_frob(a, matmul(us, transpose(r.v))) <= 1e-8);
    for (std::size_t j = 0; j + 1 < k; ++j) CHECK(r.s[j] >= r.s[j + 1]);
    for (double v : r.s) CHECK(v >= 0);
  }
}

TEST_CASE("svd of rank-deficient matrices keeps orthonormal U") {
  std::mt19937_64 rng(14);
  const auto b = test::random_matrix(8, 2, rng);
  const auto a = matmul(b, transpose(b));  // 8×8, rank 2
  const auto r = svd(a);
  const auto utu = matmul(transpose(r.u), r.u);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(utu(i, j) - (i == j ? 1.0 : 0.0)) < 1e-8);
}

TEST_CASE("nuclear norm examples and the PSD trace identity") {
  CHECK(nuclear_norm(pts(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1})) == doctest::Approx(3.0));
  CHECK(nuclear_norm(pts(2, 2, {2.0 / 3, 0, 0, 2.0 / 3})) == doctest::Approx(4.0 / 3));
  std::mt19937_64 rng(15);
  for (int t = 0; t < 20; ++t) {
    const auto c = covariance(test::random_matrix(10, 1 + std::size_t(t % 12), rng));
    const double tr = trace(c);
    CHECK(std::abs(nuclear_norm(c) - tr) <= 1e-8 * std::max(1.0, tr));
  }
}

TEST_CASE("pca spec examples") {
  SUBCASE("collinear points") {
    const auto p = pca(pts(3, 2, {1, 0, 2, 0, -4, 0}), 1);
    CHECK(std::abs(p.components(0, 0)) == doctest::Approx(1.0));
    CHECK(p.explained_ratio() == doctest::Approx(1.0));
  }
  SUBCASE("cross") {
    CHECK(pca(pts(4, 2, {1, 0, -1, 0, 0, 1, 0, -1}), 1).explained_ratio() == doctest::Approx(0.5));
  }
  SUBCASE("three-point cloud") {
    CHECK(pca(pts(3, 2, {0, 0, 1, 0, 0, 2}), 1).explained_ratio() == doctest::Approx(0.86056).epsilon(1e-5));
  }
  SUBCASE("degenerate") { CHECK_THROWS_AS(pca(pts(2, 2, {1, 1, 1, 1}), 1), DegenerateCloud); }
}

TEST_CASE("pca variances equal the top eigenvalues of the covariance") {
  std::mt19937_64 rng(16);
  const auto p = test::random_matrix(30, 6, rng);
  const auto res = pca(p, 6);
  const auto e = sym_eig(covariance(p));
  double total = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(std::abs(res.explained_variance[i] - e.eigenvalues[i]) <= 1e-10);
    total += res.explained_variance[i];
  }
  CHECK(total == doctest::Approx(res.total_variance).epsilon(1e-8));
}
