#pragma once

#include <utility>
#include <vector>

#include "icl_lab/model.hpp"

// Hand-written reverse-mode pieces for the toy architecture. Every function
// is a forward/backward pair over row-major matrices in the row-vector
// convention (y = x·W). Backward functions accumulate into weight gradients
// and return input gradients.
namespace icl::grad {

template <class T>
using Mat = RowMatrix<T>;

// y = x·W
template <class T>
Mat<T> matmul_backward(const Mat<T>& x, const Mat<T>& w, const Mat<T>& dy, Mat<T>* dw);

// Row-wise RMSNorm: y = x / sqrt(mean(x^2) + eps) * g.
template <class T>
Mat<T> rmsnorm_forward(const Mat<T>& x, const RowVector<T>& g, double eps, std::vector<T>* rstd);
template <class T>
Mat<T> rmsnorm_backward(const Mat<T>& x, const RowVector<T>& g, const std::vector<T>& rstd, const Mat<T>& dy,
                        RowVector<T>* dg);

template <class T>
Mat<T> gelu_forward(const Mat<T>& u);
template <class T>
Mat<T> gelu_backward(const Mat<T>& u, const Mat<T>& dy);

// Causal row softmax of scores (entries with j > i are masked).
template <class T>
Mat<T> causal_softmax_forward(const Mat<T>& scores);
template <class T>
Mat<T> softmax_backward(const Mat<T>& p, const Mat<T>& dp);

/// -log softmax(z)[target]; writes softmax(z) - onehot into dz when given.
template <class T>
T cross_entropy(const RowVector<T>& z, int target, RowVector<T>* dz);

/// Multi-head causal self-attention on normalized input a (no output
/// projection): returns concatenated head outputs o.
template <class T>
struct AttentionCache {
  Mat<T> q, k, v;
  std::vector<Mat<T>> probs;
};

template <class T>
Mat<T> attention_forward(const Mat<T>& a, const Mat<T>& wq, const Mat<T>& wk, const Mat<T>& wv, int n_heads,
                         AttentionCache<T>* cache);

/// Returns d(a); accumulates into dwq, dwk, dwv.
template <class T>
Mat<T> attention_backward(const Mat<T>& a, const Mat<T>& wq, const Mat<T>& wk, const Mat<T>& wv, int n_heads,
                          const AttentionCache<T>& cache, const Mat<T>& d_o, Mat<T>* dwq, Mat<T>* dwk,
                          Mat<T>* dwv);

// ---------------------------------------------------------------------------
// Whole-model gradient for pretraining.

struct LossTarget {
  int position = 0;      // the position whose logits predict the target
  TokenId target = 0;
};

/// Mean cross-entropy over targets for one sequence; adds d(loss)/d(weights)
/// into grads (which must be shaped like weights).
template <class T>
T model_loss_and_grad(const ModelConfig& cfg, const ModelWeights<T>& weights, std::span<const TokenId> tokens,
                      std::span<const LossTarget> targets, ModelWeights<T>* grads);

// ---------------------------------------------------------------------------
// Filter path. With context blocking, everything above the injection layer
// sees only the filtered last-token vector, so the path is per token.

template <class T>
struct FilterParams {
  Mat<T> w_enc;        // d×r
  RowVector<T> b_enc;  // r
  Mat<T> w_dec;        // r×d
};

template <class T>
FilterParams<T> filter_params(const TVSFilter& f);
template <class T>
FilterParams<T> zeros_like(const FilterParams<T>& p);

/// Logits (B×vocab) of the per-token upper path for a batch of block-`layer`
/// residuals H (B×d) passed through the filter.
template <class T>
Mat<T> filter_path_logits(const ModelConfig& cfg, const ModelWeights<T>& weights, int layer,
                          const FilterParams<T>& filter, const Mat<T>& h);

/// Summed cross-entropy over the batch rows; adds summed gradients into
/// grads. Non-finite loss raises NumericalFailure naming the layer.
template <class T>
T filter_loss_and_grad(const ModelConfig& cfg, const ModelWeights<T>& weights, int layer,
                       const FilterParams<T>& filter, const Mat<T>& h, std::span<const TokenId> targets,
                       FilterParams<T>* grads);

}  // namespace icl::grad
