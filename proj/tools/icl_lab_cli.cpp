// icl-lab: command line surface over the experiment runner.
//
// Exit codes: 0 success, 2 spec errors (bad flags, unreadable inputs,
// violated preconditions), 3 numerical failure, 1 anything unexpected.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "icl_lab/errors.hpp"
#include "icl_lab/experiment.hpp"
#include "icl_lab/model_io.hpp"
#include "icl_lab/tasks.hpp"
#include "icl_lab/train.hpp"

namespace {

using namespace icl;

struct Globals {
  std::string model;
  std::string task;
  std::uint64_t seed = 0;
  std::string out;
  std::vector<int> layers;
  std::vector<int> ranks;
  std::vector<int> shots;
  std::vector<std::string> modes;
  std::string filter_cache;
  int queries = 256;
  int n_train = 2048;
  int n_val = 512;
};

struct PretrainArgs {
  std::string world = "ambiguous";
  int steps = 4000;
  int batch = 16;
  double lr = 1e-3;
  double distractor = 0.25;
  bool quiet = false;
};

struct ExtraArgs {
  bool by_layer = false;
  int flux_rank = 8;
  int flux_filter_layer = -1;
  std::string scan_mode = "gold";
  double theta = 0.05;
  int trials = 10;
  std::string new_labels;
  std::string report;
  std::string figure;
};

ExperimentSpec make_spec(ExperimentKind kind, const CLI::App& app, const Globals& g, const ExtraArgs& x) {
  ExperimentSpec s;
  s.kind = kind;
  if (g.model.empty()) throw SpecError("--model is required");
  if (g.task.empty()) throw SpecError("--task is required");
  if (g.out.empty()) throw SpecError("--out is required");
  s.model = g.model;
  s.task = g.task;
  s.seed = g.seed;
  s.out = g.out;
  // Only flags given on the command line become explicit grids, so an
  // explicitly empty value ("--layers ''") still reaches validate().
  auto given = [&](const char* name) { return app.count(name) > 0; };
  if (given("--layers")) s.layers = g.layers;
  if (given("--ranks")) s.ranks = g.ranks;
  if (given("--shots")) s.shots = g.shots;
  if (given("--mode")) {
    std::vector<DemoMode> m;
    for (const auto& name : g.modes) m.push_back(parse_demo_mode(name));
    s.modes = m;
  }
  s.filter_cache = g.filter_cache;
  s.n_queries = g.queries;
  s.n_train = g.n_train;
  s.n_val = g.n_val;
  s.flux_rank = x.flux_rank;
  s.flux_filter_layer = x.flux_filter_layer;
  s.scan_mode = parse_demo_mode(x.scan_mode);
  s.dh_theta = x.theta;
  s.control_trials = x.trials;
  s.new_labels_task = x.new_labels;
  return s;
}

int run_experiment(const ExperimentSpec& spec) {
  const auto out = run(spec);
  std::printf("%s: %zu rows from %zu units", to_string(spec.kind).c_str(), out.rows, out.units);
  if (out.resumed_units) std::printf(" (%zu resumed)", out.resumed_units);
  std::printf("\n  %s\n  %s\n", out.results.string().c_str(), out.summary.string().c_str());
  return 0;
}

int run_pretrain(const Globals& g, const PretrainArgs& p) {
  if (g.out.empty()) throw SpecError("--out is required (model file)");
  SyntheticTaskSpec ts;
  if (p.world == "ambiguous") {
    ts = SyntheticTaskSpec::ambiguous(g.seed);
  } else if (p.world == "facts") {
    ts = SyntheticTaskSpec::facts(g.seed);
  } else {
    throw SpecError("unknown world '" + p.world + "' (ambiguous, facts)");
  }
  const auto world = gen_synthetic(ts);
  PretrainConfig pc;
  pc.steps = p.steps;
  pc.batch = p.batch;
  pc.learning_rate = p.lr;
  pc.seed = g.seed;
  pc.corpus.distractor_prob = p.distractor;
  if (!p.quiet) {
    pc.on_log = [](int step, double loss) { std::fprintf(stderr, "step %6d  loss %.4f\n", step, loss); };
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto model = pretrain_toy(ModelConfig{}, world, pc);
  save_model(model, g.out);
  std::printf("pretrained %s world (seed %llu, %d steps) in %.1fs -> %s\n", p.world.c_str(),
              static_cast<unsigned long long>(g.seed), p.steps,
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), g.out.c_str());
  for (const auto& t : world.tasks) std::printf("  task %s: %zu labels\n", t.name.c_str(), t.labels.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"icl-lab: task-oriented information removal experiments on toy transformers"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--model", g.model, "Model bundle (.twb)");
  app.add_option("--task", g.task, "Task name within the model's synthetic world");
  app.add_option("--seed", g.seed, "Seed for every random stream");
  app.add_option("--out", g.out, "Output directory (model file for pretrain)");
  app.add_option("--layers", g.layers, "Layer grid, comma separated")->delimiter(',');
  app.add_option("--ranks", g.ranks, "Filter rank grid")->delimiter(',');
  app.add_option("--shots", g.shots, "Demonstration count grid")->delimiter(',');
  app.add_option("--mode", g.modes, "Demonstration modes: gold, random_label, unseen, seen")->delimiter(',');
  app.add_option("--filter-cache", g.filter_cache, "Directory of trained filters reused across runs");
  app.add_option("--queries", g.queries, "Held-out queries per cloud")->check(CLI::PositiveNumber);
  app.add_option("--train-size", g.n_train, "Filter training prompts")->check(CLI::PositiveNumber);
  app.add_option("--val-size", g.n_val, "Filter validation prompts")->check(CLI::PositiveNumber);

  PretrainArgs pa;
  ExtraArgs x;

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain a toy model on a synthetic world");
  pretrain->add_option("--world", pa.world, "ambiguous or facts");
  pretrain->add_option("--steps", pa.steps)->check(CLI::NonNegativeNumber);
  pretrain->add_option("--batch", pa.batch)->check(CLI::PositiveNumber);
  pretrain->add_option("--lr", pa.lr);
  pretrain->add_option("--distractor", pa.distractor, "Probability of a demo showing another task's label");
  pretrain->add_flag("--quiet", pa.quiet);

  auto* train_filter = app.add_subcommand("train-filter", "Filter sweep over layers and ranks");
  auto* transfer = app.add_subcommand("transfer", "Verbalization transfer of trained filters");
  transfer->add_option("--new-labels", x.new_labels, "Task whose labels replace the original ones");
  auto* measure = app.add_subcommand("measure", "Eccentricity and covariance flux against k");
  measure->add_flag("--by-layer", x.by_layer, "Emit the layer-axis view");
  measure->add_option("--flux-rank", x.flux_rank)->check(CLI::PositiveNumber);
  measure->add_option("--flux-filter-layer", x.flux_filter_layer, "Read every layer through this layer's filter");
  auto* scan = app.add_subcommand("scan-heads", "Per-head ablation scan");
  scan->add_option("--flux-rank", x.flux_rank)->check(CLI::PositiveNumber);
  auto* ablate = app.add_subcommand("ablate", "DH-set ablation against matched random controls");
  ablate->add_option("--scan-mode", x.scan_mode, "Demonstration mode of the scan prompts");
  ablate->add_option("--theta", x.theta, "Flux threshold of the ablation set");
  ablate->add_option("--trials", x.trials, "Matched random control trials")->check(CLI::NonNegativeNumber);
  ablate->add_option("--flux-rank", x.flux_rank)->check(CLI::PositiveNumber);
  auto* facts = app.add_subcommand("fact-recall", "Filter cross-entropy on fact tasks");
  auto* pca = app.add_subcommand("export-pca", "PCA coordinates of hidden-state clouds");
  auto* report = app.add_subcommand("report", "Plot-ready CSVs from a results file");
  report->add_option("--report", x.report, "results.jsonl")->required();
  report->add_option("--figure", x.figure, "Experiment kind of the report")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*pretrain) return run_pretrain(g, pa);
    if (*report) {
      if (g.out.empty()) throw SpecError("--out is required");
      for (const auto& p : emit_plot_data(x.report, x.figure, g.out)) std::printf("%s\n", p.string().c_str());
      return 0;
    }
    struct Verb {
      CLI::App* sub;
      ExperimentKind kind;
    };
    const Verb verbs[] = {
        {train_filter, ExperimentKind::kFilterSweep},
        {transfer, ExperimentKind::kVerbalization},
        {measure, x.by_layer ? ExperimentKind::kMetricsVsLayer : ExperimentKind::kMetricsVsK},
        {scan, ExperimentKind::kHeadScan},
        {ablate, ExperimentKind::kDhAblation},
        {facts, ExperimentKind::kFactRecall},
        {pca, ExperimentKind::kPcaExport},
    };
    for (const auto& v : verbs) {
      if (*v.sub) return run_experiment(make_spec(v.kind, app, g, x));
    }
    return 2;
  } catch (const NumericalFailure& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const SpecError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 1;
  }
}
