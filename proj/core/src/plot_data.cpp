#include <fstream>
#include <map>
#include <set>

#include "icl_lab/experiment.hpp"

namespace icl {

namespace fs = std::filesystem;

namespace {

struct Panel {
  std::string file;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
};

std::string num(double v) {
  if (!std::isfinite(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string num(int v) { return std::to_string(v); }

void write_panel(const Panel& p, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw SpecError("cannot write " + path.string());
  for (std::size_t i = 0; i < p.columns.size(); ++i) out << (i ? "," : "") << p.columns[i];
  out << '\n';
  for (const auto& r : p.rows) {
    for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
    out << '\n';
  }
}

// One panel per metric: x, series, value.
std::vector<Panel> by_metric(const std::vector<ResultRow>& rows, const std::vector<std::string>& metrics,
                             const std::string& x_name, const std::string& series_name, auto x_of, auto series_of) {
  std::set<std::string> modes;
  for (const auto& r : rows)
    if (!r.key.mode.empty()) modes.insert(r.key.mode);
  std::vector<Panel> out;
  for (const auto& metric : metrics) {
    if (modes.size() <= 1) {
      out.push_back({metric + ".csv", {x_name, series_name, "value"}, {}});
    } else {
      for (const auto& m : modes) out.push_back({metric + "_" + m + ".csv", {x_name, series_name, "value"}, {}});
    }
  }
  for (const auto& r : rows) {
    for (auto& p : out) {
      const auto want = modes.size() <= 1 ? r.metric + ".csv" : r.metric + "_" + r.key.mode + ".csv";
      if (p.file == want && r.key.layer >= 0) p.rows.push_back({num(x_of(r.key)), num(series_of(r.key)), num(r.value)});
    }
  }
  return out;
}

}  // namespace

std::vector<fs::path> emit_plot_data(const fs::path& report, std::string_view figure, const fs::path& out_dir) {
  const auto kind = parse_experiment_kind(figure);
  const auto rows = fs::exists(report) && fs::file_size(report) == 0 ? std::vector<ResultRow>{} : read_results(report);
  std::vector<Panel> panels;
  switch (kind) {
    case ExperimentKind::kMetricsVsK:
      panels = by_metric(rows, {"eccentricity", "covariance_flux"}, "k", "layer",
                         [](const GridKey& k) { return k.k; }, [](const GridKey& k) { return k.layer; });
      break;
    case ExperimentKind::kMetricsVsLayer:
      panels = by_metric(rows, {"eccentricity", "covariance_flux"}, "layer", "k",
                         [](const GridKey& k) { return k.layer; }, [](const GridKey& k) { return k.k; });
      break;
    case ExperimentKind::kFilterSweep:
    case ExperimentKind::kFactRecall:
      panels = by_metric(rows,
                         kind == ExperimentKind::kFilterSweep
                             ? std::vector<std::string>{"accuracy", "cross_entropy", "remaining_cov_ratio"}
                             : std::vector<std::string>{"cross_entropy", "accuracy"},
                         "rank", "layer", [](const GridKey& k) { return k.rank; },
                         [](const GridKey& k) { return k.layer; });
      break;
    case ExperimentKind::kHeadScan: {
      Panel p{"head_scan.csv", {"layer", "head", "d_flux", "d_ecc", "d_acc", "induction"}, {}};
      std::map<std::tuple<int, int>, std::map<std::string, double>> heads;
      for (const auto& r : rows)
        if (r.key.head >= 0) heads[{r.key.layer, r.key.head}][r.metric] = r.value;
      auto get = [](const std::map<std::string, double>& m, const std::string& a, const std::string& b = "") {
        if (auto it = m.find(a); it != m.end()) return num(it->second);
        if (auto it = m.find(b); !b.empty() && it != m.end()) return num(it->second);
        return std::string();
      };
      for (const auto& [id, m] : heads) {
        p.rows.push_back({num(std::get<0>(id)), num(std::get<1>(id)), get(m, "d_flux"), get(m, "d_ecc"),
                          get(m, "d_acc", "d_acc_absolute"), get(m, "induction")});
      }
      panels.push_back(std::move(p));
      break;
    }
    case ExperimentKind::kDhAblation: {
      Panel p{"ablation.csv", {"config", "set", "value"}, {}};
      for (const auto& r : rows)
        if (r.metric == "accuracy" && r.key.trial < 0) p.rows.push_back({r.key.mode, r.key.config, num(r.value)});
      panels.push_back(std::move(p));
      break;
    }
    case ExperimentKind::kVerbalization: {
      Panel p{"transfer.csv", {"layer", "rank", "part", "value"}, {}};
      for (const auto& r : rows)
        if (r.metric == "accuracy") p.rows.push_back({num(r.key.layer), num(r.key.rank), r.key.config, num(r.value)});
      panels.push_back(std::move(p));
      break;
    }
    case ExperimentKind::kPcaExport: {
      Panel p{"explained_variance.csv", {"layer", "k", "mode", "component", "value"}, {}};
      for (const auto& r : rows)
        p.rows.push_back({num(r.key.layer), num(r.key.k), r.key.mode, r.key.config, num(r.value)});
      panels.push_back(std::move(p));
      break;
    }
  }
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  for (const auto& p : panels) {
    written.push_back(out_dir / p.file);
    write_panel(p, written.back());
  }
  return written;
}

}  // namespace icl
