#include "icl_lab/heads.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include <json.hpp>

#include "icl_lab/eval.hpp"
#include "icl_lab/metrics.hpp"
#include "icl_lab/parallel.hpp"

namespace icl {

using nlohmann::json;

double induction_score(const TensorF& attention, const PromptInstance& prompt, int head) {
  if (attention.rank() != 3) throw ShapeMismatch("induction_score: attention trace must be heads×T×T");
  if (head < 0 || std::size_t(head) >= attention.dim(0)) throw InvalidIntervention("induction_score: bad head index");
  const auto t = attention.dim(1);
  const auto q = std::size_t(prompt.last_index);
  if (q >= t) throw ShapeMismatch("induction_score: prompt longer than the trace");
  const float* row = attention.data() + (std::size_t(head) * t + q) * t;
  double s = 0.0;
  for (int p : prompt.all_label_token_positions()) s += row[std::size_t(p)];
  return s;
}

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double relative(double ablated, double clean) { return (ablated - clean) / clean; }

struct Probe {
  double ecc = 0.0;
  double flux = 0.0;
};

Probe probe_cloud(const ModelBundle& model, std::span<const PromptInstance> prompts, int layer,
                  const TVSFilter& filter, const InterventionSpec& iv) {
  const auto cloud = HiddenCloud::from_rows(last_residuals(model, prompts, layer, iv), layer, prompts.front().k,
                                            to_string(prompts.front().mode));
  return {eccentricity(cloud), covariance_flux(cloud, filter)};
}

}  // namespace

HeadScanReport head_scan(const ModelBundle& model, int layer, std::span<const PromptInstance> prompts,
                         const TVSFilter& filter) {
  const auto& cfg = model.config;
  if (layer < 0 || layer >= cfg.n_layers) throw InvalidIntervention("head_scan: layer out of range");
  if (prompts.size() < 2) throw DegenerateCloud("head_scan: need at least 2 prompts");
  if (filter.layer != layer) {
    throw SpecError("head_scan: flux filter trained at layer " + std::to_string(filter.layer) + ", scanning " +
                    std::to_string(layer));
  }

  HeadScanReport rep;
  rep.layer = layer;
  rep.n_layers = cfg.n_layers;
  const auto clean = probe_cloud(model, prompts, layer, filter, {});
  rep.clean_ecc = clean.ecc;
  rep.clean_flux = clean.flux;
  rep.clean_acc = eval_accuracy(model, prompts);
  rep.acc_absolute = rep.clean_acc == 0.0;
  if (!(clean.ecc > 0.0) || !(clean.flux > 0.0)) {
    throw NumericalFailure("head_scan: clean eccentricity and flux must be positive (layer " + std::to_string(layer) +
                           ")");
  }

  // Induction scores from the clean run.
  std::vector<std::vector<double>> induction(prompts.size(), std::vector<double>(std::size_t(cfg.n_heads)));
  TraceSpec attn;
  attn.attention_layers = {layer};
  parallel_for(prompts.size(), [&](std::size_t i) {
    const auto res = forward(model, prompts[i].tokens, attn, {}, LogitPositions::kLast);
    const auto& a = res.trace.at(layer, TraceKind::kAttention);
    for (int h = 0; h < cfg.n_heads; ++h) induction[i][std::size_t(h)] = induction_score(a, prompts[i], h);
  });

  for (int h = 0; h < cfg.n_heads; ++h) {
    HeadScanRow row;
    row.head = {layer, h};
    for (const auto& v : induction) row.induction += v[std::size_t(h)];
    row.induction /= double(prompts.size());

    InterventionSpec iv;
    iv.ablate = {row.head};
    const double acc = eval_accuracy(model, prompts, iv);
    row.d_acc = rep.acc_absolute ? acc - rep.clean_acc : relative(acc, rep.clean_acc);
    try {
      const auto p = probe_cloud(model, prompts, layer, filter, iv);
      row.d_ecc = relative(p.ecc, clean.ecc);
      row.d_flux = relative(p.flux, clean.flux);
    } catch (const DegenerateCloud& e) {
      row.degenerate = true;
      row.error = e.what();
      row.d_ecc = row.d_flux = kNaN;
    }
    rep.rows.push_back(row);
  }
  return rep;
}

double scan_coverage(std::span<const HeadScanReport> reports) {
  if (reports.empty()) return 0.0;
  std::set<int> layers;
  for (const auto& r : reports) layers.insert(r.layer);
  return double(layers.size()) / double(reports.front().n_layers);
}

DHSelection identify_dh(std::span<const HeadScanReport> reports, double theta) {
  DHSelection sel;
  sel.theta = theta;
  sel.coverage = scan_coverage(reports);
  for (const auto& rep : reports) {
    sel.layers.push_back(rep.layer);
    for (const auto& row : rep.rows) {
      if (row.degenerate) continue;
      if (row.d_flux <= -theta) {
        sel.dh.push_back(row.head);
      } else if (row.d_flux >= theta) {
        sel.anti_dh.push_back(row.head);
      }
    }
  }
  std::sort(sel.layers.begin(), sel.layers.end());
  std::sort(sel.dh.begin(), sel.dh.end());
  std::sort(sel.anti_dh.begin(), sel.anti_dh.end());
  return sel;
}

std::vector<HeadId> select_ablation_set(std::span<const HeadScanReport> reports, double theta) {
  std::vector<HeadId> out;
  for (const auto& rep : reports)
    for (const auto& row : rep.rows)
      if (!row.degenerate && row.d_flux < -theta) out.push_back(row.head);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<HeadId> bottom_heads(std::span<const HeadScanReport> reports, double k_fraction) {
  if (!(k_fraction > 0.0 && k_fraction <= 1.0)) throw SpecError("bottom-K fraction must be in (0, 1]");
  std::vector<const HeadScanRow*> rows;
  for (const auto& rep : reports)
    for (const auto& row : rep.rows)
      if (!row.degenerate) rows.push_back(&row);
  if (rows.empty()) return {};
  std::sort(rows.begin(), rows.end(), [](const HeadScanRow* a, const HeadScanRow* b) {
    if (a->d_flux != b->d_flux) return a->d_flux < b->d_flux;
    return a->head < b->head;
  });
  // The small slack keeps K·n that is integral up to rounding from bumping up.
  const auto want = std::max<std::size_t>(1, std::size_t(std::ceil(k_fraction * double(rows.size()) - 1e-9)));
  std::vector<HeadId> out;
  for (std::size_t i = 0; i < std::min(want, rows.size()); ++i) out.push_back(rows[i]->head);
  std::sort(out.begin(), out.end());
  return out;
}

int dh_overlap(std::span<const HeadScanReport> a, std::span<const HeadScanReport> b, double k_fraction) {
  const auto da = bottom_heads(a, k_fraction);
  const auto db = bottom_heads(b, k_fraction);
  std::vector<HeadId> both;
  std::set_intersection(da.begin(), da.end(), db.begin(), db.end(), std::back_inserter(both));
  return int(both.size());
}

std::vector<std::vector<HeadId>> matched_random_heads(std::span<const HeadId> heads, int n_heads_per_layer,
                                                      std::mt19937_64& rng, int trials) {
  std::map<int, int> per_layer;
  for (const auto& h : heads) ++per_layer[h.layer];
  for (const auto& [layer, count] : per_layer) {
    if (count > n_heads_per_layer) {
      throw SpecError("matched_random_heads: layer " + std::to_string(layer) + " needs " + std::to_string(count) +
                      " heads but has " + std::to_string(n_heads_per_layer));
    }
  }
  // Draw from the heads outside the set; a layer without enough of them
  // falls back to all of its heads.
  const std::set<HeadId> members(heads.begin(), heads.end());
  std::map<int, std::vector<int>> pools;
  for (const auto& [layer, count] : per_layer) {
    auto& pool = pools[layer];
    for (int h = 0; h < n_heads_per_layer; ++h)
      if (!members.count({layer, h})) pool.push_back(h);
    if (int(pool.size()) < count) {
      pool.resize(static_cast<std::size_t>(n_heads_per_layer));
      std::iota(pool.begin(), pool.end(), 0);
    }
  }
  std::vector<std::vector<HeadId>> out(std::size_t(std::max(0, trials)));
  for (auto& trial : out) {
    for (const auto& [layer, count] : per_layer) {
      auto pool = pools[layer];
      // Partial Fisher–Yates: the first `count` entries are a uniform draw.
      for (int i = 0; i < count; ++i) {
        std::uniform_int_distribution<int> pick(i, int(pool.size()) - 1);
        std::swap(pool[std::size_t(i)], pool[std::size_t(pick(rng))]);
        trial.push_back({layer, pool[std::size_t(i)]});
      }
    }
    std::sort(trial.begin(), trial.end());
  }
  return out;
}

std::vector<std::pair<std::string, double>> ablated_accuracy(
    const ModelBundle& model, std::span<const HeadId> heads,
    std::span<const std::pair<std::string, std::vector<PromptInstance>>> configs) {
  InterventionSpec iv;
  iv.ablate.assign(heads.begin(), heads.end());
  std::vector<std::pair<std::string, double>> out;
  for (const auto& [name, prompts] : configs) out.emplace_back(name, eval_accuracy(model, prompts, iv));
  return out;
}

namespace {

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double from_json_number(const json& j) { return j.is_null() ? kNaN : j.get<double>(); }

}  // namespace

void write_scan_jsonl(std::span<const HeadScanReport> reports, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw SpecError("cannot write " + path.string());
  for (const auto& rep : reports) {
    for (const auto& row : rep.rows) {
      json j = {{"layer", row.head.layer},       {"head", row.head.head},
                {"d_ecc", finite_or_null(row.d_ecc)}, {"d_flux", finite_or_null(row.d_flux)},
                {"d_acc", finite_or_null(row.d_acc)}, {"induction", row.induction}};
      if (rep.acc_absolute) j["d_acc_absolute"] = true;
      if (row.degenerate) j["degenerate"] = row.error;
      out << j.dump() << '\n';
    }
  }
}

std::vector<HeadScanReport> read_scan_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SpecError("cannot read " + path.string());
  std::map<int, HeadScanReport> by_layer;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError("scan report " + path.string() + ": " + e.what());
    }
    HeadScanRow row;
    row.head = {j.at("layer").get<int>(), j.at("head").get<int>()};
    row.d_ecc = from_json_number(j.at("d_ecc"));
    row.d_flux = from_json_number(j.at("d_flux"));
    row.d_acc = from_json_number(j.at("d_acc"));
    row.induction = j.at("induction").get<double>();
    if (j.contains("degenerate")) {
      row.degenerate = true;
      row.error = j["degenerate"].get<std::string>();
    }
    auto& rep = by_layer[row.head.layer];
    rep.layer = row.head.layer;
    rep.acc_absolute = j.value("d_acc_absolute", false);
    rep.rows.push_back(row);
  }
  std::vector<HeadScanReport> out;
  for (auto& [layer, rep] : by_layer) out.push_back(std::move(rep));
  return out;
}

std::string dh_selection_json(const DHSelection& sel) {
  auto heads = [](const std::vector<HeadId>& hs) {
    json a = json::array();
    for (const auto& h : hs) a.push_back({{"layer", h.layer}, {"head", h.head}});
    return a;
  };
  json j = {{"theta", sel.theta},   {"dh", heads(sel.dh)},         {"anti_dh", heads(sel.anti_dh)},
            {"layers", sel.layers}, {"coverage", sel.coverage}};
  return j.dump(2);
}

}  // namespace icl
