#pragma once

#include <cstddef>
#include <vector>

#include "icl_lab/tensor.hpp"

namespace icl::linalg {

enum class CovarianceDivisor { kSampleMinusOne, kPopulation };

/// Sample covariance of the rows of an N×d matrix. Every metric built on
/// top of it is a ratio of eigenvalue sums, so the divisor cancels.
TensorD covariance(const TensorD& points,
                   CovarianceDivisor divisor = CovarianceDivisor::kSampleMinusOne);

/// Eigenpairs sorted by descending eigenvalue; eigenvectors are the columns
/// of a d×d orthonormal matrix, each with its first nonzero coordinate
/// positive.
struct SymEigen {
  std::vector<double> eigenvalues;
  TensorD eigenvectors;
};

/// Cyclic Jacobi. Iterates until the off-diagonal Frobenius norm drops
/// below 1e-12 of the input norm.
SymEigen sym_eig(const TensorD& a);

/// Thin SVD of an m×n matrix: U is m×k, V is n×k, k = min(m, n).
struct Svd {
  TensorD u;
  std::vector<double> s;
  TensorD v;
};

Svd svd(const TensorD& a);
std::vector<double> singular_values(const TensorD& a);

/// Sum of singular values.
double nuclear_norm(const TensorD& a);

double trace(const TensorD& a);

struct PcaResult {
  TensorD components;  // r×d, orthonormal rows
  std::vector<double> explained_variance;
  double total_variance = 0.0;
  std::vector<double> mean;

  double explained_ratio() const;
};

PcaResult pca(const TensorD& points, std::size_t r);

/// Flips v so that its first coordinate with |x| > tol is positive.
void canonical_sign(std::span<double> v, double tol = 1e-12);

TensorD matmul(const TensorD& a, const TensorD& b);
TensorD transpose(const TensorD& a);
double frobenius_norm(const TensorD& a);

}  // namespace icl::linalg
