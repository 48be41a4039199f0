#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "icl_lab/eval.hpp"
#include "icl_lab/heads.hpp"
#include "support.hpp"

using namespace icl;

namespace {

PromptInstance fake_prompt(int last, std::vector<std::vector<int>> labels) {
  PromptInstance p;
  p.tokens.assign(std::size_t(last + 1), 0);
  p.last_index = last;
  p.label_token_positions = std::move(labels);
  for (const auto& l : p.label_token_positions) p.label_positions.push_back(l.front());
  return p;
}

HeadScanReport report_of(int layer, std::vector<double> flux) {
  HeadScanReport r;
  r.layer = layer;
  r.n_layers = 4;
  for (std::size_t h = 0; h < flux.size(); ++h) {
    HeadScanRow row;
    row.head = {layer, int(h)};
    row.d_flux = flux[h];
    r.rows.push_back(row);
  }
  return r;
}

struct ScanFixture {
  SyntheticWorld world;
  Tokenizer tok;
  ModelBundle model;
  std::vector<PromptInstance> prompts;
};

const ScanFixture& scan_fixture() {
  static const ScanFixture f = [] {
    ScanFixture f;
    auto spec = SyntheticTaskSpec::ambiguous(11);
    spec.item_count = 10;
    f.world = gen_synthetic(spec);
    f.tok = f.world.tokenizer();
    auto cfg = test::small_config(32, 2, 4, f.tok.size(), 64);
    f.model = test::random_model(cfg, 11, 3.0);
    // Head 2 of layer 1 has zero values, so it contributes nothing.
    auto& wv = f.model.weights.layers[1].wv;
    const auto dh = std::size_t(cfg.head_dim());
    for (std::size_t r = 0; r < wv.dim(0); ++r)
      for (std::size_t c = 2 * dh; c < 3 * dh; ++c) wv(r, c) = 0.0f;
    std::mt19937_64 rng(11);
    PromptRequest req{0, Split::kTest, 4, DemoMode::kGold, InstructionMode::kNone, 2};
    f.prompts = make_prompts(f.world, f.tok, req, 12, rng);
    return f;
  }();
  return f;
}

}  // namespace

TEST_CASE("induction score arithmetic") {
  TensorF attn(Shape{2, 5, 5});
  auto at = [&](std::size_t h, std::size_t i, std::size_t j) -> float& { return attn.span()[(h * 5 + i) * 5 + j]; };
  const auto p = fake_prompt(4, {{1}, {3}});
  at(1, 4, 1) = 0.5f;
  at(1, 4, 3) = 0.2f;
  at(1, 4, 4) = 0.3f;
  CHECK(induction_score(attn, p, 1) == doctest::Approx(0.7).epsilon(1e-7));
  CHECK(induction_score(attn, fake_prompt(4, {}), 1) == 0.0);

  for (std::size_t j = 0; j < 5; ++j) at(0, 4, j) = 0.2f;
  const auto multi = fake_prompt(4, {{1, 2}, {3}});
  CHECK(induction_score(attn, multi, 0) == doctest::Approx(3.0 / 5.0).epsilon(1e-7));
  CHECK_THROWS_AS(induction_score(attn, p, 2), InvalidIntervention);
}

TEST_CASE("head scan on a model with a silent head") {
  const auto& f = scan_fixture();
  std::mt19937_64 rng(12);
  const auto filter = TVSFilter::random(32, 8, 1, rng, 0.3);
  const auto rep = head_scan(f.model, 1, f.prompts, filter);
  REQUIRE(rep.rows.size() == 4);
  const auto& silent = rep.rows[2];
  CHECK(std::abs(silent.d_ecc) < 1e-6);
  CHECK(std::abs(silent.d_flux) < 1e-6);
  CHECK(std::abs(silent.d_acc) < 1e-6);
  for (const auto& row : rep.rows) {
    CHECK(row.induction >= 0.0);
    CHECK(row.induction <= 1.0 + 1e-6);
  }
  // The other heads do something.
  CHECK(std::abs(rep.rows[0].d_flux) + std::abs(rep.rows[1].d_flux) > 1e-6);
  CHECK(rep.clean_acc == eval_accuracy(f.model, f.prompts));

  CHECK_THROWS_AS(head_scan(f.model, 0, f.prompts, filter), SpecError);
  CHECK(scan_coverage(std::span(&rep, 1)) == 0.5);
}

TEST_CASE("an ablated head's contribution is exactly what disappears") {
  const auto& f = scan_fixture();
  const auto& p = f.prompts.front();
  const HeadId head{1, 0};
  TraceSpec spec;
  spec.attention_output_layers = {1};
  const auto clean = forward(f.model, p.tokens, spec).trace.at(1, TraceKind::kAttentionOutput);
  InterventionSpec iv;
  iv.ablate = {head};
  const auto ablated = forward(f.model, p.tokens, spec, iv).trace.at(1, TraceKind::kAttentionOutput);
  const auto contrib = head_contribution(f.model, p.tokens, head);
  double worst = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    worst = std::max(worst, std::abs(double(clean.span()[i]) - contrib.span()[i] - ablated.span()[i]));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("identify_dh thresholds") {
  const auto sel = identify_dh(report_of(0, {-0.05, 0.01, -0.02, 0.04}));
  CHECK(sel.dh == std::vector<HeadId>{{0, 0}});
  CHECK(sel.anti_dh == std::vector<HeadId>{{0, 3}});

  const auto none = identify_dh(report_of(0, {-0.034, 0.01, 0.0349}));
  CHECK(none.dh.empty());
  CHECK(none.anti_dh.empty());

  const auto signs = identify_dh(report_of(0, {-0.001, 0.002, -0.3}), 0.0);
  CHECK(signs.dh.size() == 2);
  CHECK(signs.anti_dh.size() == 1);

  auto degenerate = report_of(0, {-0.5});
  degenerate.rows[0].degenerate = true;
  CHECK(identify_dh(degenerate).dh.empty());
}

TEST_CASE("ablation set selection") {
  const std::vector<HeadScanReport> reps{report_of(0, {-0.05, -0.06, 0.0}), report_of(2, {-0.2, 0.3})};
  CHECK(select_ablation_set(std::span(reps.data(), 1)) == std::vector<HeadId>{{0, 1}});
  CHECK(select_ablation_set(reps) == std::vector<HeadId>{{0, 1}, {2, 0}});
  const std::vector<HeadScanReport> quiet{report_of(0, {-0.01, 0.02})};
  CHECK(select_ablation_set(quiet).empty());
}

TEST_CASE("bottom-K overlap") {
  std::vector<double> a(100), b(100);
  for (int i = 0; i < 100; ++i) {
    a[std::size_t(i)] = double(i) / 100.0;
    b[std::size_t(i)] = -double(i) / 100.0;
  }
  const std::vector<HeadScanReport> sa{report_of(0, a)}, sb{report_of(0, b)};
  CHECK(bottom_heads(sa, 0.01).size() == 1);  // 0.01·100 is integral
  CHECK(bottom_heads(sa, 0.015).size() == 2);
  CHECK(bottom_heads(sa, 0.001).size() == 1);
  CHECK(dh_overlap(sa, sa, 0.05) == 5);
  CHECK(dh_overlap(sa, sb, 0.05) == 0);
  CHECK(dh_overlap(sa, sb, 1.0) == 100);
  CHECK(dh_overlap(sa, sb, 0.6) == dh_overlap(sb, sa, 0.6));
  CHECK(dh_overlap(sa, sb, 0.6) == 20);
}

TEST_CASE("matched random controls") {
  std::mt19937_64 rng(13);
  for (const auto& t : matched_random_heads({}, 4, rng, 5)) CHECK(t.empty());

  const std::vector<HeadId> full{{1, 0}, {1, 1}, {1, 2}, {1, 3}};
  for (const auto& t : matched_random_heads(full, 4, rng, 5)) CHECK(t == full);

  const std::vector<HeadId> dh{{0, 1}, {2, 0}, {2, 3}};
  std::map<HeadId, int> hits;
  for (const auto& t : matched_random_heads(dh, 4, rng, 4000)) {
    std::map<int, int> count;
    for (const auto& h : t) {
      ++count[h.layer];
      ++hits[h];
    }
    CHECK(count == std::map<int, int>{{0, 1}, {2, 2}});
  }
  // Uniform over the non-members of each layer: layer 0 draws from three
  // heads, layer 2 has exactly two left.
  CHECK(hits[{0, 1}] == 0);
  for (int h : {0, 2, 3}) CHECK(std::abs(hits[{0, h}] - 4000 / 3) < 150);
  CHECK(hits[{2, 1}] == 4000);
  CHECK(hits[{2, 2}] == 4000);
  CHECK(hits[{2, 0}] + hits[{2, 3}] == 0);
  CHECK_THROWS_AS(matched_random_heads(full, 3, rng, 1), SpecError);
}

TEST_CASE("ablated accuracy with no heads is the clean accuracy") {
  const auto& f = scan_fixture();
  const std::vector<std::pair<std::string, std::vector<PromptInstance>>> configs{{"gold", f.prompts}};
  const auto acc = ablated_accuracy(f.model, {}, configs);
  CHECK(acc.front().second == eval_accuracy(f.model, f.prompts));
}

TEST_CASE("scan reports round-trip through JSONL") {
  std::vector<HeadScanReport> reps{report_of(0, {-0.1, 0.2}), report_of(3, {0.0})};
  reps[0].rows[1].degenerate = true;
  reps[0].rows[1].d_flux = std::nan("");
  reps[1].rows[0].induction = 0.25;
  const auto path = std::filesystem::temp_directory_path() / "icl_lab_scan.jsonl";
  write_scan_jsonl(reps, path);
  const auto back = read_scan_jsonl(path);
  std::filesystem::remove(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].rows[0].d_flux == -0.1);
  CHECK(back[0].rows[1].degenerate);
  CHECK(std::isnan(back[0].rows[1].d_flux));
  CHECK(back[1].rows[0].induction == 0.25);
  CHECK(dh_selection_json(identify_dh(reps)).find("\"theta\": 0.035") != std::string::npos);
}
