#include "gradient_suite.hpp"

#include <cmath>

#include "icl_lab/backward.hpp"
#include "support.hpp"

namespace icl::test {

namespace {

using grad::Mat;
using M = Mat<double>;
using V = RowVector<double>;

M random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> n(0, s);
  M m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

std::vector<double> flat(const M& m) { return {m.data(), m.data() + m.size()}; }
std::vector<double> flat(const V& m) { return {m.data(), m.data() + m.size()}; }

M view(std::span<const double> x, Eigen::Index r, Eigen::Index c) {
  return Eigen::Map<const M>(x.data(), r, c);
}

template <class F>
GradCheckReport check(const std::string& name, const std::vector<double>& x, const std::vector<double>& analytic,
                      F&& f) {
  return finite_difference_check(name, f, x, analytic);
}

}  // namespace

std::vector<GradCheckReport> run_gradient_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckReport> out;
  const Eigen::Index n = 6, d = 32, k = 24;

  {  // matmul
    const M x = random_mat(n, d, rng), w = random_mat(d, k, rng), r = random_mat(n, k, rng);
    M dw = M::Zero(d, k);
    const M dx = grad::matmul_backward<double>(x, w, r, &dw);
    out.push_back(check("matmul d/dx", flat(x), flat(dx),
                        [&](std::span<const double> v) { return (view(v, n, d) * w).cwiseProduct(r).sum(); }));
    out.push_back(check("matmul d/dw", flat(w), flat(dw),
                        [&](std::span<const double> v) { return (x * view(v, d, k)).cwiseProduct(r).sum(); }));
  }
  {  // causal softmax
    const M s = random_mat(n, n, rng, 2.0), r = random_mat(n, n, rng);
    const M p = grad::causal_softmax_forward<double>(s);
    const M ds = grad::softmax_backward<double>(p, r);
    out.push_back(check("softmax", flat(s), flat(ds), [&](std::span<const double> v) {
      return grad::causal_softmax_forward<double>(view(v, n, n)).cwiseProduct(r).sum();
    }));
  }
  {  // RMSNorm
    const M x = random_mat(n, d, rng);
    const V g = random_mat(1, d, rng);
    const M r = random_mat(n, d, rng);
    std::vector<double> rstd;
    grad::rmsnorm_forward<double>(x, g, 1e-5, &rstd);
    V dg = V::Zero(d);
    const M dx = grad::rmsnorm_backward<double>(x, g, rstd, r, &dg);
    out.push_back(check("rmsnorm d/dx", flat(x), flat(dx), [&](std::span<const double> v) {
      return grad::rmsnorm_forward<double>(view(v, n, d), g, 1e-5, nullptr).cwiseProduct(r).sum();
    }));
    out.push_back(check("rmsnorm d/dg", flat(g), flat(dg), [&](std::span<const double> v) {
      return grad::rmsnorm_forward<double>(x, view(v, 1, d), 1e-5, nullptr).cwiseProduct(r).sum();
    }));
  }
  {  // GELU
    const M u = random_mat(n, d, rng, 2.0), r = random_mat(n, d, rng);
    const M du = grad::gelu_backward<double>(u, r);
    out.push_back(check("gelu", flat(u), flat(du), [&](std::span<const double> v) {
      return grad::gelu_forward<double>(view(v, n, d)).cwiseProduct(r).sum();
    }));
  }
  {  // cross-entropy
    const V z = random_mat(1, k, rng, 2.0);
    V dz;
    grad::cross_entropy<double>(z, 5, &dz);
    out.push_back(check("cross_entropy", flat(z), flat(dz), [&](std::span<const double> v) {
      return grad::cross_entropy<double>(view(v, 1, k), 5, nullptr);
    }));
  }
  {  // attention
    const int heads = 4;
    const M a = random_mat(n, d, rng), wq = random_mat(d, d, rng, 0.3), wk = random_mat(d, d, rng, 0.3),
            wv = random_mat(d, d, rng, 0.3), r = random_mat(n, d, rng);
    grad::AttentionCache<double> cache;
    grad::attention_forward<double>(a, wq, wk, wv, heads, &cache);
    M dwq = M::Zero(d, d), dwk = M::Zero(d, d), dwv = M::Zero(d, d);
    const M da = grad::attention_backward<double>(a, wq, wk, wv, heads, cache, r, &dwq, &dwk, &dwv);
    auto f = [&](const M& a_, const M& q_, const M& k_, const M& v_) {
      return grad::attention_forward<double>(a_, q_, k_, v_, heads, nullptr).cwiseProduct(r).sum();
    };
    out.push_back(check("attention d/da", flat(a), flat(da),
                        [&](std::span<const double> v) { return f(view(v, n, d), wq, wk, wv); }));
    out.push_back(check("attention d/dwq", flat(wq), flat(dwq),
                        [&](std::span<const double> v) { return f(a, view(v, d, d), wk, wv); }));
    out.push_back(check("attention d/dwk", flat(wk), flat(dwk),
                        [&](std::span<const double> v) { return f(a, wq, view(v, d, d), wv); }));
    out.push_back(check("attention d/dwv", flat(wv), flat(dwv),
                        [&](std::span<const double> v) { return f(a, wq, wk, view(v, d, d)); }));
  }
  {  // whole model, every parameter tensor
    const auto cfg = small_config(16, 2, 2, 12, 10);
    const auto model = random_model(cfg, seed + 1, 5.0);
    auto w = model.weights.cast<double>();
    const auto tokens = random_tokens(8, cfg.vocab_size, rng);
    const std::vector<grad::LossTarget> targets{{2, tokens[3]}, {5, tokens[6]}, {7, 4}};
    auto g = ModelWeights<double>::zeros_like(cfg);
    grad::model_loss_and_grad<double>(cfg, w, tokens, targets, &g);
    std::vector<TensorD*> params;
    std::vector<const TensorD*> grads;
    std::vector<std::string> names;
    w.for_each([&](const std::string& name, TensorD& t) {
      params.push_back(&t);
      names.push_back(name);
    });
    g.for_each([&](const std::string&, const TensorD& t) { grads.push_back(&t); });
    for (std::size_t i = 0; i < params.size(); ++i) {
      TensorD& p = *params[i];
      const std::vector<double> x0 = p.values();
      out.push_back(check("model d/" + names[i], x0, grads[i]->values(), [&](std::span<const double> v) {
        std::copy(v.begin(), v.end(), p.span().begin());
        const double loss = grad::model_loss_and_grad<double>(cfg, w, tokens, targets, nullptr);
        std::copy(x0.begin(), x0.end(), p.span().begin());
        return loss;
      }));
    }
  }
  {  // filter path against the hooked forward with injection and blocking
    const auto cfg = small_config(32, 3, 4, 16, 16);
    const auto model = random_model(cfg, seed + 2, 5.0);
    const auto w = model.weights.cast<double>();
    PromptInstance prompt;
    prompt.tokens = random_tokens(9, cfg.vocab_size, rng);
    prompt.last_index = 8;
    prompt.gold_tokens = {3};
    prompt.gold_label = "t3";
    const int r = 4;
    for (int layer : {0, 1}) {
      std::mt19937_64 frng(seed + 10 + std::uint64_t(layer));
      auto filter = TVSFilter::random(cfg.d_model, r, layer, frng, 1.0 / std::sqrt(double(cfg.d_model)));
      std::normal_distribution<double> nb(0, 0.3);
      for (auto& b : filter.b_enc.span()) b = float(nb(frng));
      const auto g = grad_filter(model, filter, prompt);

      // Oracle loss from the full hooked forward in 64-bit. Filter tensors are
      // stored as f32, so the filtered residual is formed in double here and
      // written in through a zero filter (which keeps context blocking on)
      // plus the perturbation hook.
      auto loss_with = [&](const M& enc, const V& b, const M& dec) {
        const auto res = [&] {
          auto tr = forward<double>(cfg, w, prompt.tokens, TraceSpec::last_residual(layer), {},
                                    LogitPositions::kLast);
          const V h = tr.trace.at(layer, TraceKind::kResidual).mat();
          const V filtered = (h * enc + b) * dec;
          InterventionSpec iv;
          iv.injection = FilterInjection{TVSFilter::zero(cfg.d_model, r, layer), layer, -1};
          iv.perturb = ResidualPerturbation{layer, prompt.last_index, std::vector<double>(filtered.data(), filtered.data() + filtered.size())};
          return forward<double>(cfg, w, prompt.tokens, {}, iv, LogitPositions::kLast);
        }();
        const V z = res.logits.mat();
        return grad::cross_entropy<double>(z, 3, nullptr);
      };
      const M enc = filter.w_enc.mat().cast<double>();
      const V b = filter.b_enc.mat().cast<double>();
      const M dec = filter.w_dec.mat().cast<double>();
      const auto tag = " (layer " + std::to_string(layer) + ")";
      out.push_back(check("filter d/W_enc" + tag, flat(enc), g.d_w_enc.values(),
                          [&](std::span<const double> v) { return loss_with(view(v, d, r), b, dec); }));
      out.push_back(check("filter d/b_enc" + tag, flat(b), g.d_b_enc.values(),
                          [&](std::span<const double> v) { return loss_with(enc, view(v, 1, r), dec); }));
      out.push_back(check("filter d/W_dec" + tag, flat(dec), g.d_w_dec.values(),
                          [&](std::span<const double> v) { return loss_with(enc, b, view(v, r, d)); }));
    }
  }
  return out;
}

}  // namespace icl::test
