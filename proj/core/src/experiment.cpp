#include "icl_lab/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>

#include <json.hpp>

#include "icl_lab/eval.hpp"
#include "icl_lab/heads.hpp"
#include "icl_lab/linalg.hpp"
#include "icl_lab/metrics.hpp"
#include "icl_lab/model_io.hpp"
#include "icl_lab/parallel.hpp"
#include "icl_lab/rng.hpp"

namespace icl {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

constexpr std::pair<ExperimentKind, std::string_view> kKindNames[] = {
    {ExperimentKind::kFilterSweep, "filter_sweep"},       {ExperimentKind::kMetricsVsK, "metrics_vs_k"},
    {ExperimentKind::kMetricsVsLayer, "metrics_vs_layer"}, {ExperimentKind::kHeadScan, "head_scan"},
    {ExperimentKind::kDhAblation, "dh_ablation"},         {ExperimentKind::kVerbalization, "verbalization"},
    {ExperimentKind::kFactRecall, "fact_recall"},         {ExperimentKind::kPcaExport, "pca_export"},
};

bool uses_ranks(ExperimentKind k) {
  return k == ExperimentKind::kFilterSweep || k == ExperimentKind::kVerbalization ||
         k == ExperimentKind::kFactRecall;
}

bool uses_shots(ExperimentKind k) { return !uses_ranks(k); }

}  // namespace

std::string to_string(ExperimentKind k) {
  for (const auto& [kind, name] : kKindNames)
    if (kind == k) return std::string(name);
  return "unknown";
}

ExperimentKind parse_experiment_kind(std::string_view s) {
  for (const auto& [kind, name] : kKindNames)
    if (name == s) return kind;
  throw SpecError("unknown experiment kind '" + std::string(s) + "'");
}

std::vector<int> ExperimentSpec::resolved_ranks() const {
  if (ranks) return *ranks;
  switch (kind) {
    case ExperimentKind::kVerbalization: return {2};
    case ExperimentKind::kFactRecall: return {2, 8, 16};
    default: return {1, 2, 4, 8, 16, 64};
  }
}

std::vector<int> ExperimentSpec::resolved_shots() const {
  if (shots) return *shots;
  if (kind == ExperimentKind::kMetricsVsK || kind == ExperimentKind::kMetricsVsLayer) return {0, 1, 2, 4, 8};
  return {8};
}

std::vector<DemoMode> ExperimentSpec::resolved_modes() const {
  if (modes) return *modes;
  if (kind == ExperimentKind::kDhAblation) return {DemoMode::kGold, DemoMode::kSeen, DemoMode::kUnseen};
  return {DemoMode::kGold};
}

void ExperimentSpec::validate() const {
  const auto what = to_string(kind) + ": ";
  if (layers && layers->empty()) throw SpecError(what + "empty layer grid");
  if (uses_ranks(kind)) {
    const auto r = resolved_ranks();
    if (r.empty()) throw SpecError(what + "empty rank grid");
    for (int v : r)
      if (v < 1) throw SpecError(what + "ranks must be positive");
  }
  if (uses_shots(kind)) {
    const auto s = resolved_shots();
    if (s.empty()) throw SpecError(what + "empty shot grid");
    for (int v : s)
      if (v < 0) throw SpecError(what + "shots must be non-negative");
    if (resolved_modes().empty()) throw SpecError(what + "empty mode grid");
  }
  if (model.empty()) throw SpecError(what + "no model path");
  if (task.empty()) throw SpecError(what + "no task");
  if (out.empty()) throw SpecError(what + "no output directory");
  if (n_train < 1 || n_val < 1 || n_queries < 1 || demos_per_query < 1) {
    throw SpecError(what + "prompt counts must be positive");
  }
  if (n_queries * demos_per_query < 2) throw SpecError(what + "clouds need at least 2 points");
  if (flux_rank < 1) throw SpecError(what + "flux rank must be positive");
  if (control_trials < 0 || dh_theta < 0) throw SpecError(what + "negative control count or threshold");
  train.validate();
}

std::string experiment_fingerprint(const ExperimentSpec& spec) {
  ordered_json j;
  j["kind"] = to_string(spec.kind);
  j["model"] = fs::absolute(spec.model).lexically_normal().string();
  j["task"] = spec.task;
  j["layers"] = spec.layers ? json(*spec.layers) : json("all");
  j["ranks"] = spec.resolved_ranks();
  j["shots"] = spec.resolved_shots();
  std::vector<std::string> modes;
  for (auto m : spec.resolved_modes()) modes.push_back(to_string(m));
  j["modes"] = modes;
  j["seed"] = spec.seed;
  j["n_train"] = spec.n_train;
  j["n_val"] = spec.n_val;
  j["n_queries"] = spec.n_queries;
  j["demos_per_query"] = spec.demos_per_query;
  j["flux_rank"] = spec.flux_rank;
  j["flux_filter_layer"] = spec.flux_filter_layer;
  j["train"] = {{"learning_rate", spec.train.learning_rate}, {"beta1", spec.train.beta1},
                {"beta2", spec.train.beta2},                 {"adam_eps", spec.train.adam_eps},
                {"pseudo_batch", spec.train.pseudo_batch},   {"epochs", spec.train.epochs},
                {"init_std", spec.train.init_std},           {"reshuffle", spec.train.reshuffle}};
  j["scan_mode"] = to_string(spec.scan_mode);
  j["dh_theta"] = spec.dh_theta;
  j["control_trials"] = spec.control_trials;
  j["new_labels_task"] = spec.new_labels_task;
  return j.dump();
}

std::string GridKey::describe() const {
  std::string s;
  auto add = [&](const std::string& part) { s += (s.empty() ? "" : " ") + part; };
  if (!task.empty()) add("task=" + task);
  if (layer >= 0) add("layer=" + std::to_string(layer));
  if (rank >= 0) add("r=" + std::to_string(rank));
  if (k >= 0) add("k=" + std::to_string(k));
  if (!mode.empty()) add("mode=" + mode);
  if (head >= 0) add("head=" + std::to_string(head));
  if (!config.empty()) add("config=" + config);
  if (trial >= 0) add("trial=" + std::to_string(trial));
  return s;
}

std::string to_json_line(const ResultRow& row) {
  ordered_json j;
  j["kind"] = to_string(row.kind);
  const auto& k = row.key;
  if (!k.task.empty()) j["task"] = k.task;
  if (k.layer >= 0) j["layer"] = k.layer;
  if (k.rank >= 0) j["rank"] = k.rank;
  if (k.k >= 0) j["k"] = k.k;
  if (!k.mode.empty()) j["mode"] = k.mode;
  if (k.head >= 0) j["head"] = k.head;
  if (!k.config.empty()) j["config"] = k.config;
  if (k.trial >= 0) j["trial"] = k.trial;
  j["metric"] = row.metric;
  j["value"] = std::isfinite(row.value) ? ordered_json(row.value) : ordered_json(nullptr);
  j["seed"] = row.seed;
  return j.dump();
}

ResultRow parse_result_row(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
    ResultRow r;
    r.kind = parse_experiment_kind(j.at("kind").get<std::string>());
    r.key.task = j.value("task", "");
    r.key.layer = j.value("layer", -1);
    r.key.rank = j.value("rank", -1);
    r.key.k = j.value("k", -1);
    r.key.mode = j.value("mode", "");
    r.key.head = j.value("head", -1);
    r.key.config = j.value("config", "");
    r.key.trial = j.value("trial", -1);
    r.metric = j.at("metric").get<std::string>();
    r.value = j.at("value").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("value").get<double>();
    r.seed = j.value("seed", std::uint64_t(0));
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("result row: ") + e.what());
  }
}

std::vector<ResultRow> read_results(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw SpecError("cannot read " + path.string());
  std::vector<ResultRow> rows;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(parse_result_row(line));
  return rows;
}

namespace {

// ---------------------------------------------------------------------------
// Everything an experiment needs, loaded once and memoized.

class Session {
 public:
  explicit Session(const ExperimentSpec& spec) : spec_(spec) {
    model_ = load_model(spec.model);
    if (model_.task_json.empty()) throw SpecError(spec.model.string() + " carries no synthetic world");
    world_ = gen_synthetic(spec_from_json(model_.task_json));
    tok_ = world_.tokenizer();
    if (tok_.vocab() != model_.vocab) throw SpecError("model vocabulary does not match its synthetic world");
    task_ = world_.task_index(spec.task);

    const int n_layers = model_.config.n_layers;
    if (spec.layers) {
      layers_ = *spec.layers;
    } else {
      for (int l = 0; l < n_layers; ++l) layers_.push_back(l);
    }
    for (int l : layers_)
      if (l < 0 || l >= n_layers) throw SpecError("layer " + std::to_string(l) + " out of range");
    if (spec.flux_filter_layer >= n_layers) throw SpecError("flux filter layer out of range");
    const auto ranks = uses_ranks(spec.kind) ? spec.resolved_ranks() : std::vector<int>{spec.flux_rank};
    for (int r : ranks)
      if (r > model_.config.d_model) throw SpecError("rank " + std::to_string(r) + " exceeds d_model");
    for (int k : uses_shots(spec.kind) ? spec.resolved_shots() : std::vector<int>{})
      if (std::size_t(k) > world_.tasks[task_].train.size()) throw SpecError("more shots than train items");

    train_cfg_ = spec.train;
    train_cfg_.seed = spec.seed;
  }

  const ExperimentSpec& spec() const { return spec_; }
  const ModelBundle& model() const { return model_; }
  const SyntheticWorld& world() const { return world_; }
  const Tokenizer& tok() const { return tok_; }
  std::size_t task() const { return task_; }
  const SyntheticTask& task_def() const { return world_.tasks[task_]; }
  const std::vector<int>& layers() const { return layers_; }
  const TrainConfig& train_cfg() const { return train_cfg_; }

  GridKey key() const {
    GridKey k;
    k.task = spec_.task;
    return k;
  }

  /// Zero-shot prompts for filter training (train split) and validation
  /// (test split).
  const std::pair<std::vector<PromptInstance>, std::vector<PromptInstance>>& filter_data() {
    if (!filter_data_) {
      auto rng = substream(spec_.seed, "filter.data", task_);
      PromptRequest req{task_, Split::kTrain, 0, DemoMode::kGold, InstructionMode::kNone, 1};
      auto train = make_prompts(world_, tok_, req, std::size_t(spec_.n_train), rng);
      req.split = Split::kTest;
      auto val = make_prompts(world_, tok_, req, std::size_t(spec_.n_val), rng);
      filter_data_.emplace(std::move(train), std::move(val));
    }
    return *filter_data_;
  }

  const FilterTrainResult& filter(int layer, int rank) {
    const auto key = std::make_pair(layer, rank);
    if (auto it = filters_.find(key); it != filters_.end()) return it->second;
    const auto path = cache_path(layer, rank);
    if (!path.empty() && fs::exists(path) && fs::exists(sidecar(path))) {
      FilterTrainResult r;
      r.filter = load_filter(path);
      std::ifstream in(sidecar(path));
      const auto j = json::parse(in);
      r.val_accuracy = j.at("val_accuracy").get<double>();
      r.val_cross_entropy = j.at("val_cross_entropy").get<double>();
      r.epoch_losses = j.at("epoch_losses").get<std::vector<double>>();
      return filters_.emplace(key, std::move(r)).first->second;
    }
    const auto& [train, val] = filter_data();
    auto r = train_filter(model_, layer, rank, train, val, train_cfg_);
    if (!path.empty()) {
      fs::create_directories(path.parent_path());
      save_filter(r.filter, path);
      json j = {{"val_accuracy", r.val_accuracy},
                {"val_cross_entropy", r.val_cross_entropy},
                {"epoch_losses", r.epoch_losses}};
      std::ofstream(sidecar(path)) << j.dump() << '\n';
    }
    return filters_.emplace(key, std::move(r)).first->second;
  }

  /// n_queries test queries × demos_per_query demonstration sequences.
  /// Independent of the layer, so every layer reads the same prompts.
  const std::vector<PromptInstance>& cloud_prompts(int k, DemoMode mode, std::string_view stream = "cloud.prompts") {
    const auto key = std::make_tuple(std::string(stream), k, mode);
    if (auto it = prompts_.find(key); it != prompts_.end()) return it->second;
    auto rng = substream(spec_.seed, stream, std::uint64_t(k) * 16 + std::uint64_t(mode));
    PromptRequest req{task_, Split::kTest, k, mode, InstructionMode::kNone, spec_.demos_per_query};
    return prompts_.emplace(key, make_prompts(world_, tok_, req, std::size_t(spec_.n_queries), rng)).first->second;
  }

  /// Last-token clouds of every requested layer from one pass per prompt.
  std::map<int, HiddenCloud> clouds(std::span<const PromptInstance> prompts, int k, DemoMode mode,
                                    const InterventionSpec& iv = {}) {
    TraceSpec ts;
    ts.residual_layers = layers_;
    std::vector<std::vector<std::vector<float>>> rows(layers_.size(),
                                                      std::vector<std::vector<float>>(prompts.size()));
    parallel_for(prompts.size(), [&](std::size_t i) {
      const auto res = forward(model_, prompts[i].tokens, ts, iv, LogitPositions::kLast);
      for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& h = res.trace.at(layers_[l], TraceKind::kResidual);
        rows[l][i].assign(h.span().begin(), h.span().end());
      }
    });
    std::map<int, HiddenCloud> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      auto c = HiddenCloud::from_rows(rows[l], layers_[l], k, to_string(mode));
      for (const auto& p : prompts) c.labels.push_back(p.gold_label);
      out.emplace(layers_[l], std::move(c));
    }
    return out;
  }

 private:
  fs::path cache_path(int layer, int rank) const {
    if (spec_.filter_cache.empty()) return {};
    const auto& t = train_cfg_;
    json j = {{"model", model_.checksum()}, {"task", spec_.task},         {"seed", spec_.seed},
              {"n_train", spec_.n_train},   {"n_val", spec_.n_val},       {"lr", t.learning_rate},
              {"beta1", t.beta1},           {"beta2", t.beta2},           {"eps", t.adam_eps},
              {"pb", t.pseudo_batch},       {"epochs", t.epochs},         {"init_std", t.init_std},
              {"reshuffle", t.reshuffle}};
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
    return spec_.filter_cache /
           (spec_.task + "_L" + std::to_string(layer) + "_r" + std::to_string(rank) + "_" + hex + ".tvs");
  }
  static fs::path sidecar(const fs::path& p) { return fs::path(p).replace_extension(".json"); }

  const ExperimentSpec& spec_;
  ModelBundle model_;
  SyntheticWorld world_;
  Tokenizer tok_;
  std::size_t task_ = 0;
  std::vector<int> layers_;
  TrainConfig train_cfg_;
  std::optional<std::pair<std::vector<PromptInstance>, std::vector<PromptInstance>>> filter_data_;
  std::map<std::pair<int, int>, FilterTrainResult> filters_;
  std::map<std::tuple<std::string, int, DemoMode>, std::vector<PromptInstance>> prompts_;
};


struct Unit {
  std::string id;
  std::function<std::vector<ResultRow>(const std::vector<ResultRow>& so_far)> fn;
};

class Builder {
 public:
  explicit Builder(Session& s) : s_(s), spec_(s.spec()) {}

  std::vector<Unit> units() {
    switch (spec_.kind) {
      case ExperimentKind::kFilterSweep: return filter_sweep();
      case ExperimentKind::kMetricsVsK:
      case ExperimentKind::kMetricsVsLayer: return metrics();
      case ExperimentKind::kHeadScan: return head_scan_units();
      case ExperimentKind::kDhAblation: return dh_ablation();
      case ExperimentKind::kVerbalization: return verbalization();
      case ExperimentKind::kFactRecall: return fact_recall();
      case ExperimentKind::kPcaExport: return pca_export();
    }
    return {};
  }

 private:
  ResultRow row(GridKey key, std::string metric, double value) const {
    return {spec_.kind, std::move(key), std::move(metric), value, spec_.seed};
  }

  InterventionSpec inject(const TVSFilter& f) const {
    InterventionSpec iv;
    iv.injection = FilterInjection{f, f.layer, -1};
    return iv;
  }

  std::vector<Unit> filter_sweep() {
    std::vector<Unit> out;
    out.push_back({"zero_shot", [this](const auto&) {
                     return std::vector{row(s_.key(), "zero_shot_accuracy",
                                            eval_accuracy(s_.model(), s_.filter_data().second))};
                   }});
    for (int l : s_.layers()) {
      for (int r : spec_.resolved_ranks()) {
        out.push_back({"L" + std::to_string(l) + "/r" + std::to_string(r), [this, l, r](const auto&) {
                         const auto& f = s_.filter(l, r);
                         auto key = s_.key();
                         key.layer = l;
                         key.rank = r;
                         const auto& val = s_.filter_data().second;
                         const auto cloud = HiddenCloud::from_rows(last_residuals(s_.model(), val, l), l, 0, "gold");
                         return std::vector{row(key, "accuracy", f.val_accuracy),
                                            row(key, "cross_entropy", f.val_cross_entropy),
                                            row(key, "effective_rank", effective_rank(f.filter)),
                                            row(key, "remaining_cov_ratio", remaining_cov_ratio(cloud, r))};
                       }});
      }
    }
    return out;
  }

  std::vector<Unit> metrics() {
    std::vector<Unit> out;
    for (int k : spec_.resolved_shots()) {
      for (DemoMode mode : spec_.resolved_modes()) {
        out.push_back({"k" + std::to_string(k) + "/" + to_string(mode), [this, k, mode](const auto&) {
                         const auto& prompts = s_.cloud_prompts(k, mode);
                         const auto clouds = s_.clouds(prompts, k, mode);
                         std::vector<ResultRow> rows;
                         auto key = s_.key();
                         key.k = k;
                         key.mode = to_string(mode);
                         rows.push_back(row(key, "accuracy", eval_accuracy(s_.model(), prompts)));
                         for (const auto& [l, cloud] : clouds) {
                           const bool fixed = spec_.flux_filter_layer >= 0;
                           const auto& f = s_.filter(fixed ? spec_.flux_filter_layer : l, spec_.flux_rank);
                           key.layer = l;
                           rows.push_back(row(key, "eccentricity", eccentricity(cloud)));
                           rows.push_back(row(key, "covariance_flux",
                                              covariance_flux(cloud, f.filter, {.allow_layer_mismatch = fixed})));
                           rows.push_back(row(key, "remaining_cov_ratio", remaining_cov_ratio(cloud, spec_.flux_rank)));
                         }
                         return rows;
                       }});
      }
    }
    return out;
  }

  std::vector<ResultRow> scan_rows(int layer, int k, DemoMode mode, GridKey key) {
    const auto& prompts = s_.cloud_prompts(k, mode);
    const auto rep = head_scan(s_.model(), layer, prompts, s_.filter(layer, spec_.flux_rank).filter);
    key.layer = layer;
    key.k = k;
    key.mode = to_string(mode);
    std::vector<ResultRow> rows{row(key, "clean_eccentricity", rep.clean_ecc),
                                row(key, "clean_covariance_flux", rep.clean_flux),
                                row(key, "clean_accuracy", rep.clean_acc)};
    for (const auto& r : rep.rows) {
      key.head = r.head.head;
      rows.push_back(row(key, "d_ecc", r.d_ecc));
      rows.push_back(row(key, "d_flux", r.d_flux));
      rows.push_back(row(key, rep.acc_absolute ? "d_acc_absolute" : "d_acc", r.d_acc));
      rows.push_back(row(key, "induction", r.induction));
    }
    return rows;
  }

  std::vector<Unit> head_scan_units() {
    std::vector<Unit> out;
    for (int k : spec_.resolved_shots())
      for (DemoMode mode : spec_.resolved_modes())
        for (int l : s_.layers())
          out.push_back({"L" + std::to_string(l) + "/k" + std::to_string(k) + "/" + to_string(mode),
                         [this, l, k, mode](const auto&) { return scan_rows(l, k, mode, s_.key()); }});
    return out;
  }

  std::vector<Unit> dh_ablation() {
    std::vector<Unit> out;
    const int k = spec_.resolved_shots().front();
    for (int l : s_.layers()) {
      out.push_back({"scan/L" + std::to_string(l), [this, l, k](const auto&) {
                       auto key = s_.key();
                       key.config = "scan";
                       return scan_rows(l, k, spec_.scan_mode, key);
                     }});
    }
    out.push_back({"ablation", [this, k](const std::vector<ResultRow>& so_far) {
                     const auto reports = reports_from_rows(so_far, "scan");
                     const auto dh = select_ablation_set(reports, spec_.dh_theta);
                     auto controls_rng = substream(spec_.seed, "ablation.controls");
                     const auto controls =
                         matched_random_heads(dh, s_.model().config.n_heads, controls_rng, spec_.control_trials);
                     write_dh_set(dh, reports);

                     std::vector<ResultRow> rows;
                     auto key = s_.key();
                     key.k = k;
                     rows.push_back(row(key, "dh_count", double(dh.size())));
                     for (DemoMode mode : spec_.resolved_modes()) {
                       const auto& prompts = s_.cloud_prompts(k, mode, "ablation.prompts");
                       key.mode = to_string(mode);
                       key.config = "clean";
                       rows.push_back(row(key, "accuracy", eval_accuracy(s_.model(), prompts)));
                       InterventionSpec iv;
                       iv.ablate = dh;
                       key.config = "dh";
                       rows.push_back(row(key, "accuracy", eval_accuracy(s_.model(), prompts, iv)));
                       double sum = 0;
                       key.config = "control";
                       for (std::size_t t = 0; t < controls.size(); ++t) {
                         iv.ablate = controls[t];
                         const double acc = eval_accuracy(s_.model(), prompts, iv);
                         sum += acc;
                         key.trial = int(t);
                         rows.push_back(row(key, "accuracy", acc));
                       }
                       key.trial = -1;
                       key.config = "control_mean";
                       if (!controls.empty()) rows.push_back(row(key, "accuracy", sum / double(controls.size())));
                     }
                     return rows;
                   }});
    return out;
  }

  // Heads-module reports rebuilt from scan rows carrying the given config tag.
  std::vector<HeadScanReport> reports_from_rows(const std::vector<ResultRow>& rows, const std::string& config) const {
    std::map<int, HeadScanReport> by_layer;
    std::map<HeadId, HeadScanRow> heads;
    for (const auto& r : rows) {
      if (r.key.config != config || r.key.layer < 0) continue;
      auto& rep = by_layer[r.key.layer];
      rep.layer = r.key.layer;
      rep.n_layers = s_.model().config.n_layers;
      if (r.key.head < 0) {
        if (r.metric == "clean_eccentricity") rep.clean_ecc = r.value;
        if (r.metric == "clean_covariance_flux") rep.clean_flux = r.value;
        if (r.metric == "clean_accuracy") rep.clean_acc = r.value;
        continue;
      }
      auto& h = heads[{r.key.layer, r.key.head}];
      h.head = {r.key.layer, r.key.head};
      if (r.metric == "d_ecc") h.d_ecc = r.value;
      if (r.metric == "d_flux") {
        h.d_flux = r.value;
        h.degenerate = !std::isfinite(r.value);
      }
      if (r.metric == "d_acc" || r.metric == "d_acc_absolute") {
        h.d_acc = r.value;
        rep.acc_absolute = r.metric == "d_acc_absolute";
      }
      if (r.metric == "induction") h.induction = r.value;
    }
    for (auto& [id, h] : heads) by_layer[id.layer].rows.push_back(h);
    std::vector<HeadScanReport> out;
    for (auto& [l, rep] : by_layer) out.push_back(std::move(rep));
    return out;
  }

  void write_dh_set(const std::vector<HeadId>& dh, const std::vector<HeadScanReport>& reports) const {
    auto sel = identify_dh(reports, spec_.dh_theta);
    sel.dh = dh;  // strict < -theta, the ablation rule
    std::ofstream(spec_.out / "dh_set.json") << dh_selection_json(sel) << '\n';
    write_scan_jsonl(reports, spec_.out / "head_scan.jsonl");
  }

  std::vector<Unit> verbalization() {
    std::vector<Unit> out;
    for (int l : s_.layers()) {
      for (int r : spec_.resolved_ranks()) {
        out.push_back({"L" + std::to_string(l) + "/r" + std::to_string(r), [this, l, r](const auto&) {
                         const auto& f = s_.filter(l, r);
                         const auto& [train, val] = relabeled();
                         auto key = s_.key();
                         key.layer = l;
                         key.rank = r;
                         std::vector<ResultRow> rows;
                         auto add = [&](const std::string& part, double v) {
                           key.config = part;
                           rows.push_back(row(key, "accuracy", v));
                         };
                         add("original", f.val_accuracy);
                         add("chance", 1.0 / double(s_.task_def().labels.size()));
                         add("pre_transfer", eval_accuracy(s_.model(), val, inject(f.filter)));
                         const std::pair<const char*, FreezePart> parts[] = {
                             {"both", FreezePart::kNone}, {"dec_only", FreezePart::kEnc}, {"enc_only", FreezePart::kDec}};
                         for (const auto& [name, freeze] : parts) {
                           add(name, finetune_filter_part(s_.model(), f.filter, freeze, train, val, s_.train_cfg())
                                         .val_accuracy);
                         }
                         return rows;
                       }});
      }
    }
    return out;
  }

  /// Filter data with every gold label swapped for the new verbalization.
  const std::pair<std::vector<PromptInstance>, std::vector<PromptInstance>>& relabeled() {
    if (relabeled_) return *relabeled_;
    const auto& task = s_.task_def();
    const SyntheticTask* target = nullptr;
    if (!spec_.new_labels_task.empty()) {
      target = &s_.world().task(spec_.new_labels_task);
    } else {
      for (const auto& t : s_.world().tasks)
        if (t.name != task.name && t.labels.size() == task.labels.size()) {
          target = &t;
          break;
        }
    }
    if (!target || target->name == task.name) throw SpecError("verbalization: no task to borrow new labels from");
    const auto& labels = target->labels;
    if (labels.size() < task.labels.size()) throw SpecError("verbalization: too few new labels");
    std::map<std::string, std::string> map;
    for (std::size_t i = 0; i < task.labels.size(); ++i) map[task.labels[i]] = labels[i];
    auto swap = [&](std::vector<PromptInstance> ps) {
      for (auto& p : ps) {
        p.gold_label = map.at(p.gold_label);
        p.gold_tokens = s_.tok().tokenize(p.gold_label);
      }
      return ps;
    };
    const auto& [train, val] = s_.filter_data();
    relabeled_.emplace(swap(train), swap(val));
    return *relabeled_;
  }

  std::vector<Unit> fact_recall() {
    std::vector<Unit> out;
    out.push_back({"zero_shot", [this](const auto&) {
                     const auto& val = s_.filter_data().second;
                     return std::vector{row(s_.key(), "zero_shot_cross_entropy", eval_cross_entropy(s_.model(), val)),
                                        row(s_.key(), "zero_shot_accuracy", eval_accuracy(s_.model(), val))};
                   }});
    for (int l : s_.layers()) {
      for (int r : spec_.resolved_ranks()) {
        out.push_back({"L" + std::to_string(l) + "/r" + std::to_string(r), [this, l, r](const auto&) {
                         const auto& f = s_.filter(l, r);
                         auto key = s_.key();
                         key.layer = l;
                         key.rank = r;
                         return std::vector{row(key, "cross_entropy", f.val_cross_entropy),
                                            row(key, "accuracy", f.val_accuracy)};
                       }});
      }
    }
    return out;
  }

  std::vector<Unit> pca_export() {
    std::vector<Unit> out;
    for (int k : spec_.resolved_shots()) {
      for (DemoMode mode : spec_.resolved_modes()) {
        out.push_back({"k" + std::to_string(k) + "/" + to_string(mode), [this, k, mode](const auto&) {
                         const auto clouds = s_.clouds(s_.cloud_prompts(k, mode), k, mode);
                         std::vector<ResultRow> rows;
                         auto key = s_.key();
                         key.k = k;
                         key.mode = to_string(mode);
                         for (const auto& [l, cloud] : clouds) {
                           const auto dims = std::min<std::size_t>(3, cloud.d());
                           std::vector<int> pcs;
                           for (std::size_t i = 1; i <= dims; ++i) pcs.push_back(int(i));
                           const auto proj = pca_projection(cloud, pcs);
                           write_pca_csv(proj, spec_.out / ("pca_" + spec_.task + "_L" + std::to_string(l) + "_k" +
                                                            std::to_string(k) + "_" + to_string(mode) + ".csv"));
                           key.layer = l;
                           const double all = linalg::trace(linalg::covariance(cloud.points));
                           for (std::size_t i = 0; i < pcs.size(); ++i) {
                             key.config = "pc" + std::to_string(pcs[i]);
                             rows.push_back(row(key, "explained_variance_ratio", proj.explained_variance[i] / all));
                           }
                           key.config.clear();
                         }
                         return rows;
                       }});
      }
    }
    return out;
  }

  Session& s_;
  const ExperimentSpec& spec_;
  std::optional<std::pair<std::vector<PromptInstance>, std::vector<PromptInstance>>> relabeled_;
};

// ---------------------------------------------------------------------------
// Journal of completed units: a fingerprint line, then {"unit", "row"}
// lines closed by {"unit", "done"}. Rows of an unfinished unit are dropped.

struct Journal {
  std::map<std::string, std::vector<ResultRow>> done;
};

Journal read_journal(const fs::path& path, const std::string& fingerprint) {
  Journal j;
  std::ifstream in(path);
  std::string line;
  if (!std::getline(in, line)) return j;
  json head;
  try {
    head = json::parse(line);
  } catch (const json::exception&) {
    return j;  // torn before the header completed
  }
  if (head.value("fingerprint", "") != fingerprint) {
    throw SpecError(path.string() + " belongs to a different experiment spec; remove it to start over");
  }
  std::map<std::string, std::vector<ResultRow>> pending;
  while (std::getline(in, line)) {
    json e;
    try {
      e = json::parse(line);
    } catch (const json::exception&) {
      break;  // torn final line
    }
    const auto unit = e.at("unit").get<std::string>();
    if (e.contains("done")) {
      j.done[unit] = std::move(pending[unit]);
      pending.erase(unit);
    } else {
      pending[unit].push_back(parse_result_row(e.at("row").dump()));
    }
  }
  return j;
}

[[noreturn]] void rethrow_with_context(const std::string& context) {
  try {
    throw;
  } catch (const NumericalFailure& e) {
    throw NumericalFailure(context + ": " + e.what());
  } catch (const SpecError& e) {
    throw SpecError(context + ": " + e.what());
  }
}

}  // namespace

RunOutput run(const ExperimentSpec& spec) {
  spec.validate();
  const auto started = std::chrono::steady_clock::now();
  fs::create_directories(spec.out);
  RunOutput out;
  out.results = spec.out / "results.jsonl";
  out.summary = spec.out / "summary.json";
  const auto journal_path = spec.out / "results.jsonl.partial";
  const auto fingerprint = experiment_fingerprint(spec);

  Session session(spec);
  Builder builder(session);
  const auto units = builder.units();
  out.units = units.size();

  Journal journal = fs::exists(journal_path) ? read_journal(journal_path, fingerprint) : Journal{};
  {
    // Rewrite the journal with only complete units so torn tails vanish.
    std::ofstream j(journal_path, std::ios::trunc);
    j << json{{"fingerprint", fingerprint}}.dump() << '\n';
    for (const auto& [unit, rows] : journal.done) {
      for (const auto& r : rows) j << json{{"unit", unit}, {"row", json::parse(to_json_line(r))}}.dump() << '\n';
      j << json{{"unit", unit}, {"done", true}}.dump() << '\n';
    }
  }
  std::ofstream jout(journal_path, std::ios::app);

  std::vector<ResultRow> all;
  json timings = json::object();
  for (const auto& unit : units) {
    if (auto it = journal.done.find(unit.id); it != journal.done.end()) {
      all.insert(all.end(), it->second.begin(), it->second.end());
      ++out.resumed_units;
      continue;
    }
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<ResultRow> rows;
    try {
      rows = unit.fn(all);
    } catch (...) {
      rethrow_with_context(to_string(spec.kind) + " [" + unit.id + "]");
    }
    timings[unit.id] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (const auto& r : rows) jout << json{{"unit", unit.id}, {"row", json::parse(to_json_line(r))}}.dump() << '\n';
    jout << json{{"unit", unit.id}, {"done", true}}.dump() << '\n';
    jout.flush();
    all.insert(all.end(), rows.begin(), rows.end());
  }
  jout.close();

  // Canonical order; a grid coordinate and metric appear once.
  std::stable_sort(all.begin(), all.end(), [](const ResultRow& a, const ResultRow& b) {
    return std::tie(a.key, a.metric) < std::tie(b.key, b.metric);
  });
  all.erase(std::unique(all.begin(), all.end(),
                        [](const ResultRow& a, const ResultRow& b) {
                          return a.key == b.key && a.metric == b.metric;
                        }),
            all.end());
  const auto tmp = fs::path(out.results).concat(".tmp");
  {
    std::ofstream f(tmp, std::ios::trunc);
    for (const auto& r : all) f << to_json_line(r) << '\n';
    if (!f) throw SpecError("failed writing " + tmp.string());
  }
  fs::rename(tmp, out.results);
  fs::remove(journal_path);
  out.rows = all.size();

  ordered_json summary;
  summary["kind"] = to_string(spec.kind);
  summary["spec"] = json::parse(fingerprint);
  summary["results"] = out.results.filename().string();
  summary["rows"] = out.rows;
  summary["units"] = out.units;
  summary["resumed_units"] = out.resumed_units;
  summary["workers"] = worker_count();
  summary["wall_clock_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  summary["unit_seconds"] = timings;
  std::ofstream(out.summary) << summary.dump(2) << '\n';
  return out;
}

}  // namespace icl
