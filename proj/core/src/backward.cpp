#include "icl_lab/backward.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace icl::grad {

template <class T>
Mat<T> matmul_backward(const Mat<T>& x, const Mat<T>& w, const Mat<T>& dy, Mat<T>* dw) {
  if (dw) dw->noalias() += x.transpose() * dy;
  return dy * w.transpose();
}

template <class T>
Mat<T> rmsnorm_forward(const Mat<T>& x, const RowVector<T>& g, double eps, std::vector<T>* rstd) {
  Mat<T> y(x.rows(), x.cols());
  if (rstd) rstd->resize(std::size_t(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T r = T(1) / std::sqrt(x.row(i).squaredNorm() / T(x.cols()) + T(eps));
    if (rstd) (*rstd)[std::size_t(i)] = r;
    y.row(i) = (x.row(i) * r).cwiseProduct(g);
  }
  return y;
}

template <class T>
Mat<T> rmsnorm_backward(const Mat<T>& x, const RowVector<T>& g, const std::vector<T>& rstd, const Mat<T>& dy,
                        RowVector<T>* dg) {
  const T d = T(x.cols());
  Mat<T> dx(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T r = rstd[std::size_t(i)];
    const RowVector<T> s = dy.row(i).cwiseProduct(g);
    const T dot = s.dot(x.row(i));
    dx.row(i) = r * s - x.row(i) * (r * r * r * dot / d);
    if (dg) *dg += dy.row(i).cwiseProduct(x.row(i)) * r;
  }
  return dx;
}

template <class T>
Mat<T> gelu_forward(const Mat<T>& u) {
  return u.unaryExpr([](T z) { return gelu(z); });
}

template <class T>
Mat<T> gelu_backward(const Mat<T>& u, const Mat<T>& dy) {
  return dy.cwiseProduct(u.unaryExpr([](T z) { return gelu_grad(z); }));
}

template <class T>
Mat<T> causal_softmax_forward(const Mat<T>& scores) {
  Mat<T> p = Mat<T>::Zero(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const Eigen::Index len = std::min<Eigen::Index>(i + 1, scores.cols());
    const T mx = scores.row(i).head(len).maxCoeff();
    T sum = 0;
    for (Eigen::Index j = 0; j < len; ++j) {
      p(i, j) = std::exp(scores(i, j) - mx);
      sum += p(i, j);
    }
    p.row(i).head(len) /= sum;
  }
  return p;
}

template <class T>
Mat<T> softmax_backward(const Mat<T>& p, const Mat<T>& dp) {
  Mat<T> ds(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const T dot = p.row(i).dot(dp.row(i));
    ds.row(i) = p.row(i).cwiseProduct(dp.row(i).array().matrix() - RowVector<T>::Constant(p.cols(), dot));
  }
  return ds;
}

template <class T>
T cross_entropy(const RowVector<T>& z, int target, RowVector<T>* dz) {
  const T mx = z.maxCoeff();
  const RowVector<T> e = (z.array() - mx).exp().matrix();
  const T sum = e.sum();
  const T loss = std::log(sum) - (z[target] - mx);
  if (dz) {
    *dz = e / sum;
    (*dz)[target] -= T(1);
  }
  return loss;
}

template <class T>
Mat<T> attention_forward(const Mat<T>& a, const Mat<T>& wq, const Mat<T>& wk, const Mat<T>& wv, int n_heads,
                         AttentionCache<T>* cache) {
  const Eigen::Index n = a.rows();
  const Eigen::Index d = wq.cols();
  const Eigen::Index dh = d / n_heads;
  const T scale = T(1) / std::sqrt(T(dh));
  AttentionCache<T> local;
  AttentionCache<T>& c = cache ? *cache : local;
  c.q = a * wq;
  c.k = a * wk;
  c.v = a * wv;
  c.probs.resize(std::size_t(n_heads));
  Mat<T> o(n, d);
  for (int h = 0; h < n_heads; ++h) {
    const Mat<T> s = (c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose()) * scale;
    c.probs[std::size_t(h)] = causal_softmax_forward<T>(s);
    o.middleCols(h * dh, dh).noalias() = c.probs[std::size_t(h)] * c.v.middleCols(h * dh, dh);
  }
  return o;
}

template <class T>
Mat<T> attention_backward(const Mat<T>& a, const Mat<T>& wq, const Mat<T>& wk, const Mat<T>& wv, int n_heads,
                          const AttentionCache<T>& c, const Mat<T>& d_o, Mat<T>* dwq, Mat<T>* dwk, Mat<T>* dwv) {
  const Eigen::Index n = a.rows();
  const Eigen::Index d = wq.cols();
  const Eigen::Index dh = d / n_heads;
  const T scale = T(1) / std::sqrt(T(dh));
  Mat<T> dq(n, d), dk(n, d), dv(n, d);
  for (int h = 0; h < n_heads; ++h) {
    const auto& p = c.probs[std::size_t(h)];
    const auto doh = d_o.middleCols(h * dh, dh);
    const Mat<T> dp = doh * c.v.middleCols(h * dh, dh).transpose();
    dv.middleCols(h * dh, dh).noalias() = p.transpose() * doh;
    const Mat<T> ds = softmax_backward<T>(p, dp) * scale;
    dq.middleCols(h * dh, dh).noalias() = ds * c.k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh).noalias() = ds.transpose() * c.q.middleCols(h * dh, dh);
  }
  Mat<T> da = matmul_backward<T>(a, wq, dq, dwq);
  da += matmul_backward<T>(a, wk, dk, dwk);
  da += matmul_backward<T>(a, wv, dv, dwv);
  return da;
}

namespace {

template <class T>
struct LayerCache {
  Mat<T> x_in;
  std::vector<T> rstd_attn;
  Mat<T> a;
  AttentionCache<T> attn;
  Mat<T> o;
  Mat<T> x_mid;
  std::vector<T> rstd_mlp;
  Mat<T> m;
  Mat<T> u;
  Mat<T> act;
};

template <class T>
Eigen::Map<Mat<T>> mut(Tensor<T>& t) {
  return t.mat();
}

template <class T>
RowVector<T> vec(const Tensor<T>& t) {
  return t.mat();
}

}  // namespace

template <class T>
T model_loss_and_grad(const ModelConfig& cfg, const ModelWeights<T>& w, std::span<const TokenId> tokens,
                      std::span<const LossTarget> targets, ModelWeights<T>* grads) {
  const auto n = static_cast<Eigen::Index>(tokens.size());
  if (n == 0 || n > cfg.max_seq) throw SequenceTooLong("model_loss_and_grad: bad sequence length");
  if (targets.empty()) throw SpecError("model_loss_and_grad: no loss targets");
  const Eigen::Index d = cfg.d_model;

  Mat<T> x(n, d);
  {
    const auto tok = w.tok_emb.mat();
    const auto pos = w.pos_emb.mat();
    for (Eigen::Index i = 0; i < n; ++i) x.row(i) = tok.row(tokens[std::size_t(i)]) + pos.row(i);
  }

  std::vector<LayerCache<T>> caches(std::size_t(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& L = w.layers[std::size_t(l)];
    auto& c = caches[std::size_t(l)];
    c.x_in = x;
    c.a = rmsnorm_forward<T>(x, vec(L.attn_norm), cfg.norm_eps, &c.rstd_attn);
    c.o = attention_forward<T>(c.a, L.wq.mat(), L.wk.mat(), L.wv.mat(), cfg.n_heads, &c.attn);
    x.noalias() += c.o * L.wo.mat();
    c.x_mid = x;
    c.m = rmsnorm_forward<T>(x, vec(L.mlp_norm), cfg.norm_eps, &c.rstd_mlp);
    c.u = c.m * L.w_up.mat();
    c.act = gelu_forward<T>(c.u);
    x.noalias() += c.act * L.w_down.mat();
  }

  // Final norm and unembedding only at the rows that carry a loss.
  const auto k = static_cast<Eigen::Index>(targets.size());
  Mat<T> xf(k, d);
  for (Eigen::Index i = 0; i < k; ++i) xf.row(i) = x.row(targets[std::size_t(i)].position);
  std::vector<T> rstd_f;
  const Mat<T> nf = rmsnorm_forward<T>(xf, vec(w.final_norm), cfg.norm_eps, &rstd_f);
  const Mat<T> logits = nf * w.unembed.mat();

  T loss = 0;
  Mat<T> dlogits(k, logits.cols());
  for (Eigen::Index i = 0; i < k; ++i) {
    RowVector<T> dz;
    loss += cross_entropy<T>(logits.row(i), targets[std::size_t(i)].target, grads ? &dz : nullptr);
    if (grads) dlogits.row(i) = dz / T(k);
  }
  loss /= T(k);
  if (!std::isfinite(static_cast<double>(loss))) throw NumericalFailure("pretraining loss is not finite");
  if (!grads) return loss;

  Mat<T> dunembed = Mat<T>::Zero(d, logits.cols());
  const Mat<T> dnf = matmul_backward<T>(nf, w.unembed.mat(), dlogits, &dunembed);
  mut(grads->unembed) += dunembed;
  RowVector<T> dgf = RowVector<T>::Zero(d);
  const Mat<T> dxf = rmsnorm_backward<T>(xf, vec(w.final_norm), rstd_f, dnf, &dgf);
  mut(grads->final_norm) += dgf;

  Mat<T> dx = Mat<T>::Zero(n, d);
  for (Eigen::Index i = 0; i < k; ++i) dx.row(targets[std::size_t(i)].position) += dxf.row(i);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& L = w.layers[std::size_t(l)];
    auto& G = grads->layers[std::size_t(l)];
    const auto& c = caches[std::size_t(l)];

    Mat<T> dw_down = Mat<T>::Zero(L.w_down.dim(0), d);
    const Mat<T> dact = matmul_backward<T>(c.act, L.w_down.mat(), dx, &dw_down);
    mut(G.w_down) += dw_down;
    const Mat<T> du = gelu_backward<T>(c.u, dact);
    Mat<T> dw_up = Mat<T>::Zero(d, L.w_up.dim(1));
    const Mat<T> dm = matmul_backward<T>(c.m, L.w_up.mat(), du, &dw_up);
    mut(G.w_up) += dw_up;
    RowVector<T> dg_mlp = RowVector<T>::Zero(d);
    dx += rmsnorm_backward<T>(c.x_mid, vec(L.mlp_norm), c.rstd_mlp, dm, &dg_mlp);
    mut(G.mlp_norm) += dg_mlp;

    Mat<T> dwo = Mat<T>::Zero(d, d);
    const Mat<T> d_o = matmul_backward<T>(c.o, L.wo.mat(), dx, &dwo);
    mut(G.wo) += dwo;
    Mat<T> dwq = Mat<T>::Zero(d, d), dwk = Mat<T>::Zero(d, d), dwv = Mat<T>::Zero(d, d);
    const Mat<T> da =
        attention_backward<T>(c.a, L.wq.mat(), L.wk.mat(), L.wv.mat(), cfg.n_heads, c.attn, d_o, &dwq, &dwk, &dwv);
    mut(G.wq) += dwq;
    mut(G.wk) += dwk;
    mut(G.wv) += dwv;
    RowVector<T> dg_attn = RowVector<T>::Zero(d);
    dx += rmsnorm_backward<T>(c.x_in, vec(L.attn_norm), c.rstd_attn, da, &dg_attn);
    mut(G.attn_norm) += dg_attn;
  }

  auto dtok = mut(grads->tok_emb);
  auto dpos = mut(grads->pos_emb);
  for (Eigen::Index i = 0; i < n; ++i) {
    dtok.row(tokens[std::size_t(i)]) += dx.row(i);
    dpos.row(i) += dx.row(i);
  }
  return loss;
}

// ---------------------------------------------------------------------------

template <class T>
FilterParams<T> filter_params(const TVSFilter& f) {
  f.validate();
  return {f.w_enc.mat().cast<T>(), f.b_enc.mat().cast<T>(), f.w_dec.mat().cast<T>()};
}

template <class T>
FilterParams<T> zeros_like(const FilterParams<T>& p) {
  return {Mat<T>::Zero(p.w_enc.rows(), p.w_enc.cols()), RowVector<T>::Zero(p.b_enc.size()),
          Mat<T>::Zero(p.w_dec.rows(), p.w_dec.cols())};
}

namespace {

template <class T>
struct UpperCache {
  Mat<T> x_in;
  std::vector<T> rstd_attn;
  Mat<T> a;
  Mat<T> v;
  Mat<T> x_mid;
  std::vector<T> rstd_mlp;
  Mat<T> m;
  Mat<T> u;
  Mat<T> act;
};

// Upper blocks for a batch of independent last-token vectors attending only
// to themselves: softmax over a single key is 1, so attention is a·Wv·Wo.
template <class T>
Mat<T> upper_forward(const ModelConfig& cfg, const ModelWeights<T>& w, int layer, Mat<T> x,
                     std::vector<UpperCache<T>>* caches) {
  for (int l = layer + 1; l < cfg.n_layers; ++l) {
    const auto& L = w.layers[std::size_t(l)];
    UpperCache<T> local;
    UpperCache<T>& c = caches ? caches->emplace_back() : local;
    c.x_in = x;
    c.a = rmsnorm_forward<T>(x, vec(L.attn_norm), cfg.norm_eps, &c.rstd_attn);
    c.v = c.a * L.wv.mat();
    x.noalias() += c.v * L.wo.mat();
    c.x_mid = x;
    c.m = rmsnorm_forward<T>(x, vec(L.mlp_norm), cfg.norm_eps, &c.rstd_mlp);
    c.u = c.m * L.w_up.mat();
    c.act = gelu_forward<T>(c.u);
    x.noalias() += c.act * L.w_down.mat();
  }
  return x;
}

}  // namespace

template <class T>
Mat<T> filter_path_logits(const ModelConfig& cfg, const ModelWeights<T>& w, int layer,
                          const FilterParams<T>& f, const Mat<T>& h) {
  const Mat<T> z = (h * f.w_enc).rowwise() + f.b_enc;
  const Mat<T> x = upper_forward<T>(cfg, w, layer, z * f.w_dec, nullptr);
  return rmsnorm_forward<T>(x, vec(w.final_norm), cfg.norm_eps, nullptr) * w.unembed.mat();
}

template <class T>
T filter_loss_and_grad(const ModelConfig& cfg, const ModelWeights<T>& w, int layer, const FilterParams<T>& f,
                       const Mat<T>& h, std::span<const TokenId> targets, FilterParams<T>* grads) {
  if (std::size_t(h.rows()) != targets.size()) throw SpecError("filter_loss_and_grad: one target per row");
  if (layer < 0 || layer >= cfg.n_layers) throw SpecError("filter_loss_and_grad: layer out of range");
  const Mat<T> z = (h * f.w_enc).rowwise() + f.b_enc;
  const Mat<T> x0 = z * f.w_dec;
  std::vector<UpperCache<T>> caches;
  caches.reserve(std::size_t(cfg.n_layers));
  const Mat<T> xl = upper_forward<T>(cfg, w, layer, x0, &caches);
  std::vector<T> rstd_f;
  const Mat<T> nf = rmsnorm_forward<T>(xl, vec(w.final_norm), cfg.norm_eps, &rstd_f);
  const Mat<T> logits = nf * w.unembed.mat();

  T loss = 0;
  Mat<T> dlogits(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    RowVector<T> dz;
    loss += cross_entropy<T>(logits.row(i), targets[std::size_t(i)], grads ? &dz : nullptr);
    if (grads) dlogits.row(i) = dz;
  }
  if (!std::isfinite(static_cast<double>(loss))) {
    throw NumericalFailure("filter loss is not finite (injection layer " + std::to_string(layer) + ")");
  }
  if (!grads) return loss;

  Mat<T> dx = rmsnorm_backward<T>(xl, vec(w.final_norm), rstd_f, dlogits * w.unembed.mat().transpose(), nullptr);
  for (int l = cfg.n_layers - 1; l > layer; --l) {
    const auto& L = w.layers[std::size_t(l)];
    const auto& c = caches[std::size_t(l - layer - 1)];
    const Mat<T> du = gelu_backward<T>(c.u, dx * L.w_down.mat().transpose());
    dx += rmsnorm_backward<T>(c.x_mid, vec(L.mlp_norm), c.rstd_mlp, du * L.w_up.mat().transpose(), nullptr);
    const Mat<T> dv = dx * L.wo.mat().transpose();
    dx += rmsnorm_backward<T>(c.x_in, vec(L.attn_norm), c.rstd_attn, dv * L.wv.mat().transpose(), nullptr);
  }
  grads->w_dec.noalias() += z.transpose() * dx;
  const Mat<T> dzm = dx * f.w_dec.transpose();
  grads->w_enc.noalias() += h.transpose() * dzm;
  grads->b_enc += dzm.colwise().sum();
  return loss;
}

#define ICL_INSTANTIATE(T)                                                                                      \
  template Mat<T> matmul_backward<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&, Mat<T>*);                     \
  template Mat<T> rmsnorm_forward<T>(const Mat<T>&, const RowVector<T>&, double, std::vector<T>*);              \
  template Mat<T> rmsnorm_backward<T>(const Mat<T>&, const RowVector<T>&, const std::vector<T>&, const Mat<T>&, \
                                      RowVector<T>*);                                                           \
  template Mat<T> gelu_forward<T>(const Mat<T>&);                                                               \
  template Mat<T> gelu_backward<T>(const Mat<T>&, const Mat<T>&);                                               \
  template Mat<T> causal_softmax_forward<T>(const Mat<T>&);                                                     \
  template Mat<T> softmax_backward<T>(const Mat<T>&, const Mat<T>&);                                            \
  template T cross_entropy<T>(const RowVector<T>&, int, RowVector<T>*);                                         \
  template Mat<T> attention_forward<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&, const Mat<T>&, int,         \
                                       AttentionCache<T>*);                                                     \
  template Mat<T> attention_backward<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&, const Mat<T>&, int,        \
                                        const AttentionCache<T>&, const Mat<T>&, Mat<T>*, Mat<T>*, Mat<T>*);    \
  template T model_loss_and_grad<T>(const ModelConfig&, const ModelWeights<T>&, std::span<const TokenId>,       \
                                    std::span<const LossTarget>, ModelWeights<T>*);                             \
  template FilterParams<T> filter_params<T>(const TVSFilter&);                                                  \
  template FilterParams<T> zeros_like<T>(const FilterParams<T>&);                                               \
  template Mat<T> filter_path_logits<T>(const ModelConfig&, const ModelWeights<T>&, int, const FilterParams<T>&, \
                                        const Mat<T>&);                                                         \
  template T filter_loss_and_grad<T>(const ModelConfig&, const ModelWeights<T>&, int, const FilterParams<T>&,   \
                                     const Mat<T>&, std::span<const TokenId>, FilterParams<T>*);

ICL_INSTANTIATE(float)
ICL_INSTANTIATE(double)
#undef ICL_INSTANTIATE

}  // namespace icl::grad
