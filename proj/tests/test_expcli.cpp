#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <unistd.h>

#include <json.hpp>

#include "icl_lab/eval.hpp"
#include "icl_lab/experiment.hpp"
#include "icl_lab/model_io.hpp"
#include "support.hpp"

using namespace icl;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  fs::path dir;
  fs::path model_path;
  ModelBundle model;
  SyntheticWorld world;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture f;
    f.dir = fs::temp_directory_path() / ("icl_lab_expcli_" + std::to_string(::getpid()));
    fs::create_directories(f.dir);
    auto spec = SyntheticTaskSpec::ambiguous(3);
    spec.item_count = 12;
    f.world = gen_synthetic(spec);
    PretrainConfig pc;
    pc.steps = 40;
    pc.batch = 8;
    pc.seed = 3;
    f.model = pretrain_toy(test::small_config(32, 2, 2, 0, 128), f.world, pc);
    f.model_path = f.dir / "tiny.twb";
    save_model(f.model, f.model_path);
    return f;
  }();
  return f;
}

ExperimentSpec small_spec(ExperimentKind kind, const std::string& out) {
  ExperimentSpec s;
  s.kind = kind;
  s.model = fixture().model_path;
  s.task = "shape";
  s.seed = 11;
  s.out = fixture().dir / out;
  s.n_train = 48;
  s.n_val = 16;
  s.n_queries = 8;
  s.flux_rank = 2;
  s.train.epochs = 1;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("experiment kinds round-trip through their names") {
  for (auto k : {ExperimentKind::kFilterSweep, ExperimentKind::kMetricsVsK, ExperimentKind::kMetricsVsLayer,
                 ExperimentKind::kHeadScan, ExperimentKind::kDhAblation, ExperimentKind::kVerbalization,
                 ExperimentKind::kFactRecall, ExperimentKind::kPcaExport}) {
    CHECK(parse_experiment_kind(to_string(k)) == k);
  }
  CHECK_THROWS_AS(parse_experiment_kind("fig2"), SpecError);
}

TEST_CASE("an empty grid fails before any compute") {
  auto s = small_spec(ExperimentKind::kMetricsVsK, "empty_grid");
  s.model = fixture().dir / "does_not_exist.twb";  // never opened
  s.shots = std::vector<int>{};
  CHECK_THROWS_AS(run(s), SpecError);
  CHECK_FALSE(fs::exists(s.out));
  s.shots.reset();
  s.layers = std::vector<int>{};
  CHECK_THROWS_AS(run(s), SpecError);
  s.layers.reset();
  s.kind = ExperimentKind::kFilterSweep;
  s.ranks = std::vector<int>{};
  CHECK_THROWS_AS(run(s), SpecError);
}

TEST_CASE("grid coordinates outside the model are spec errors") {
  auto s = small_spec(ExperimentKind::kMetricsVsK, "bad_layer");
  s.layers = std::vector<int>{2};
  s.shots = std::vector<int>{0};
  CHECK_THROWS_AS(run(s), SpecError);
  s.layers = std::vector<int>{1};
  s.task = "colour";
  CHECK_THROWS_AS(run(s), SpecError);
}

TEST_CASE("metrics_vs_k emits |layers| x 5 rows per metric, byte-identical on rerun") {
  auto s = small_spec(ExperimentKind::kMetricsVsK, "mvk_a");
  s.layers = std::vector<int>{0, 1};
  const auto a = run(s);
  const auto rows = read_results(a.results);
  int ecc = 0, flux = 0;
  std::set<int> ks;
  for (const auto& r : rows) {
    ecc += r.metric == "eccentricity";
    flux += r.metric == "covariance_flux";
    if (r.metric == "eccentricity") ks.insert(r.key.k);
    CHECK(r.seed == 11);
    CHECK(r.kind == ExperimentKind::kMetricsVsK);
  }
  CHECK(ecc == 2 * 5);
  CHECK(flux == 2 * 5);
  CHECK(ks == std::set<int>{0, 1, 2, 4, 8});
  CHECK_FALSE(fs::exists(s.out / "results.jsonl.partial"));

  s.out = fixture().dir / "mvk_b";
  const auto b = run(s);
  CHECK(slurp(a.results) == slurp(b.results));
  CHECK(!slurp(a.results).empty());

  SUBCASE("rows survive a JSON round trip") {
    for (const auto& line : lines_of(a.results)) CHECK(to_json_line(parse_result_row(line)) == line);
  }

  SUBCASE("resume after interruption neither recomputes nor duplicates") {
    const auto fp = experiment_fingerprint(s);
    s.out = fixture().dir / "mvk_resume";
    fs::create_directories(s.out);
    {
      using nlohmann::json;
      std::ofstream j(s.out / "results.jsonl.partial");
      j << json{{"fingerprint", fp}}.dump() << '\n';
      for (const auto& r : rows) {
        if (r.key.k == 0) j << json{{"unit", "k0/gold"}, {"row", json::parse(to_json_line(r))}}.dump() << '\n';
      }
      j << json{{"unit", "k0/gold"}, {"done", true}}.dump() << '\n';
      // An unfinished unit and a torn line, as left by a kill mid-write.
      j << json{{"unit", "k1/gold"}, {"row", json::parse(to_json_line(rows.back()))}}.dump() << '\n';
      j << "{\"unit\": \"k2/go";
    }
    const auto c = run(s);
    CHECK(c.resumed_units == 1);
    CHECK(c.units == 5);
    CHECK(slurp(c.results) == slurp(a.results));
    CHECK_FALSE(fs::exists(s.out / "results.jsonl.partial"));
  }

  SUBCASE("a journal from a different spec is refused") {
    s.out = fixture().dir / "mvk_foreign";
    fs::create_directories(s.out);
    std::ofstream(s.out / "results.jsonl.partial") << "{\"fingerprint\":\"{}\"}\n";
    CHECK_THROWS_AS(run(s), SpecError);
  }

  SUBCASE("plot data: one CSV per metric with columns k, layer, value") {
    const auto files = emit_plot_data(a.results, "metrics_vs_k", fixture().dir / "plots_mvk");
    REQUIRE(files.size() == 2);
    for (const auto& f : files) {
      const auto ls = lines_of(f);
      REQUIRE(!ls.empty());
      CHECK(ls[0] == "k,layer,value");
      CHECK(ls.size() == 1 + 2 * 5);
    }
    CHECK(files[0].filename() == "eccentricity.csv");
    CHECK(files[1].filename() == "covariance_flux.csv");
  }
}

TEST_CASE("filter_sweep rerun is byte-identical and the filter cache changes nothing") {
  auto s = small_spec(ExperimentKind::kFilterSweep, "sweep_a");
  s.layers = std::vector<int>{1};
  s.ranks = std::vector<int>{1, 2};
  const auto a = run(s);
  s.out = fixture().dir / "sweep_b";
  s.filter_cache = fixture().dir / "fcache";
  const auto b = run(s);
  s.out = fixture().dir / "sweep_c";
  const auto c = run(s);  // served from the cache
  CHECK(slurp(a.results) == slurp(b.results));
  CHECK(slurp(a.results) == slurp(c.results));
  const auto rows = read_results(a.results);
  int acc = 0;
  for (const auto& r : rows) acc += r.metric == "accuracy" && r.key.rank > 0;
  CHECK(acc == 2);
}

TEST_CASE("emit_plot_data: head_scan columns, empty reports and unknown kinds") {
  const auto dir = fixture().dir / "plots_misc";
  fs::create_directories(dir);
  const auto report = dir / "scan.jsonl";
  {
    std::ofstream out(report);
    for (const auto& [metric, v] : std::vector<std::pair<std::string, double>>{
             {"d_flux", -0.1}, {"d_ecc", 0.02}, {"d_acc", -0.5}, {"induction", 0.3}}) {
      ResultRow r;
      r.kind = ExperimentKind::kHeadScan;
      r.key.task = "shape";
      r.key.layer = 1;
      r.key.head = 0;
      r.metric = metric;
      r.value = v;
      out << to_json_line(r) << '\n';
    }
  }
  const auto files = emit_plot_data(report, "head_scan", dir / "scan");
  REQUIRE(files.size() == 1);
  const auto ls = lines_of(files[0]);
  REQUIRE(ls.size() == 2);
  CHECK(ls[0] == "layer,head,d_flux,d_ecc,d_acc,induction");
  CHECK(ls[1] == "1,0,-0.10000000000000001,0.02,-0.5,0.29999999999999999");

  const auto empty = dir / "empty.jsonl";
  std::ofstream(empty).close();
  for (const auto& f : emit_plot_data(empty, "metrics_vs_k", dir / "empty")) {
    const auto e = lines_of(f);
    REQUIRE(e.size() == 1);
    CHECK(e[0] == "k,layer,value");
  }
  CHECK_THROWS_AS(emit_plot_data(empty, "fig3", dir / "unknown"), SpecError);
}

TEST_CASE("eval_accuracy is hard matching of the greedy decode") {
  const auto& f = fixture();
  const auto tok = f.world.tokenizer();
  std::mt19937_64 rng(4);
  PromptRequest req{1, Split::kTest, 2, DemoMode::kGold, InstructionMode::kNone, 1};
  auto prompts = make_prompts(f.world, tok, req, 2, rng);
  REQUIRE(prompts.size() == 2);

  // Make the gold agree or disagree with whatever the model decodes.
  auto decoded = [&](const PromptInstance& p) {
    return greedy_decode(f.model, std::span(p.tokens).first(std::size_t(p.last_index) + 1), 1)[0];
  };
  auto right = prompts[0];
  right.gold_tokens = {decoded(right)};
  auto wrong = prompts[1];
  const auto d = decoded(wrong);
  wrong.gold_tokens = {d == 0 ? 1 : d - 1};

  CHECK(eval_accuracy(f.model, std::vector{right}) == 1.0);
  CHECK(eval_accuracy(f.model, std::vector{wrong}) == 0.0);
  CHECK(eval_accuracy(f.model, std::vector{right, wrong}) == 0.5);
  // A longer gold needs every decoded step to match.
  auto longer = right;
  longer.gold_tokens.push_back(wrong.gold_tokens[0]);
  const auto two = greedy_decode(f.model, std::span(right.tokens).first(std::size_t(right.last_index) + 1), 2);
  CHECK(eval_accuracy(f.model, std::vector{longer}) == (two == longer.gold_tokens ? 1.0 : 0.0));
}
