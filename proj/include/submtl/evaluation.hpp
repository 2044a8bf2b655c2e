#ifndef SUBMTL_EVALUATION_HPP
#define SUBMTL_EVALUATION_HPP

#include <iomanip>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "submtl/cohort.hpp"
#include "submtl/loss.hpp"
#include "submtl/metrics.hpp"
#include "submtl/model.hpp"
#include "submtl/training.hpp"

namespace submtl {

struct ScatterPoint {
  std::string subject_id;
  Group group = Group::CN;
  double actual = 0.0;
  double predicted = 0.0;

  friend bool operator==(const ScatterPoint&, const ScatterPoint&) = default;
};

/// Per-item, global (composed) and per-group global metrics.
struct MetricsReport {
  std::array<MetricTriple, kNumTasks> per_subscore{};
  MetricTriple global;
  std::map<Group, MetricTriple> per_group;
  std::size_t n_eval = 0;
  std::vector<ScatterPoint> scatter;
};

/// Builds a report from targets and predictions. Groups with no subject
/// are omitted.
inline MetricsReport build_report(std::span<const std::string> ids, std::span<const Group> groups,
                                  std::span<const TaskArray> targets,
                                  std::span<const Prediction> preds) {
  const std::size_t n = ids.size();
  require(n > 0, ErrorKind::data, "evaluate: empty id set");
  require(groups.size() == n && targets.size() == n && preds.size() == n, ErrorKind::data,
          "evaluate: length mismatch");
  MetricsReport rep;
  rep.n_eval = n;
  for (std::size_t j = 0; j < kNumTasks; ++j) {
    std::vector<double> y(n), yh(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = targets[i][j];
      yh[i] = preds[i].y_hat[j];
    }
    rep.per_subscore[j] = metric_triple(y, yh);
  }
  std::vector<double> gy(n), gh(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double x : targets[i]) s += x;
    gy[i] = s;
    gh[i] = compose_global(preds[i]);
    rep.scatter.push_back({ids[i], groups[i], gy[i], gh[i]});
  }
  rep.global = metric_triple(gy, gh);
  for (Group g : {Group::CN, Group::MCI}) {
    std::vector<double> a, b;
    for (std::size_t i = 0; i < n; ++i)
      if (groups[i] == g) {
        a.push_back(gy[i]);
        b.push_back(gh[i]);
      }
    if (!a.empty()) rep.per_group[g] = metric_triple(a, b);
  }
  return rep;
}

template <class T>
MetricsReport evaluate(const ModelParams<T>& p, const Dataset& d, unsigned threads = 1) {
  require(!d.empty(), ErrorKind::data, "evaluate: empty id set");
  const auto preds = predict(p, d, threads);
  return build_report(d.ids, d.groups, d.targets, preds);
}

/// Loads the listed subjects' volumes from disk and evaluates them.
template <class T>
MetricsReport evaluate(const ModelParams<T>& p, const Cohort& c, std::span<const std::string> ids,
                       unsigned threads = 1) {
  require(!ids.empty(), ErrorKind::data, "evaluate: empty id set");
  return evaluate(p, make_dataset(c, ids), threads);
}

// ---------------------------------------------------------------------------
// Report output
// ---------------------------------------------------------------------------

inline constexpr const char* kMetricsHeader = "scope,mae,rmse,r,n";

inline void write_metrics_csv(std::ostream& os, const MetricsReport& r) {
  os << kMetricsHeader << '\n';
  auto row = [&](const std::string& scope, const MetricTriple& m) {
    os << scope << ',' << format_exact(m.mae) << ',' << format_exact(m.rmse) << ','
       << format_exact(m.r) << ',' << m.n << '\n';
  };
  for (std::size_t j = 0; j < kNumTasks; ++j) row("q" + std::to_string(j + 1), r.per_subscore[j]);
  row("global", r.global);
  for (const auto& [g, m] : r.per_group) row(std::string("group:") + to_string(g), m);
}

/// Inverse of write_metrics_csv (scatter points live in their own file).
inline MetricsReport read_metrics_csv(std::istream& is) {
  std::string line;
  require(static_cast<bool>(std::getline(is, line)) && line == kMetricsHeader, ErrorKind::data,
          "metrics CSV: bad header");
  MetricsReport r;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    const std::string where = "metrics CSV line " + std::to_string(lineno);
    require(f.size() == 5, ErrorKind::data, where + ": expected 5 fields");
    MetricTriple m;
    m.mae = parse_double(f[1], where);
    m.rmse = parse_double(f[2], where);
    m.r = parse_optional_double(f[3], where);
    m.n = static_cast<std::size_t>(parse_double(f[4], where));
    const std::string& scope = f[0];
    if (scope == "global") {
      r.global = m;
      r.n_eval = m.n;
    } else if (scope.rfind("group:", 0) == 0) {
      auto g = parse_group(scope.substr(6));
      require(g.has_value(), ErrorKind::data, where + ": unknown group");
      r.per_group[*g] = m;
    } else {
      require(scope.size() >= 2 && scope[0] == 'q', ErrorKind::data, where + ": unknown scope");
      const auto j = static_cast<std::size_t>(parse_double(scope.substr(1), where));
      require(j >= 1 && j <= kNumTasks, ErrorKind::data, where + ": item out of range");
      r.per_subscore[j - 1] = m;
    }
  }
  return r;
}

inline constexpr const char* kScatterHeader = "subject_id,group,actual_global,predicted_global";

inline void write_scatter_csv(std::ostream& os, const MetricsReport& r) {
  os << kScatterHeader << '\n';
  for (const auto& s : r.scatter)
    os << s.subject_id << ',' << to_string(s.group) << ',' << format_exact(s.actual) << ','
       << format_exact(s.predicted) << '\n';
}

inline std::vector<ScatterPoint> read_scatter_csv(std::istream& is) {
  std::string line;
  require(static_cast<bool>(std::getline(is, line)) && line == kScatterHeader, ErrorKind::data,
          "scatter CSV: bad header");
  std::vector<ScatterPoint> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    require(f.size() == 4, ErrorKind::data, "scatter CSV: expected 4 fields");
    auto g = parse_group(f[1]);
    require(g.has_value(), ErrorKind::data, "scatter CSV: unknown group");
    out.push_back({f[0], *g, parse_double(f[2], "scatter CSV"), parse_double(f[3], "scatter CSV")});
  }
  return out;
}

namespace detail {
inline std::string pad(std::string s, std::size_t w) {
  if (s.size() < w) s.insert(0, w - s.size(), ' ');
  return s;
}
inline std::string pad_right(std::string s, std::size_t w) {
  if (s.size() < w) s.append(w - s.size(), ' ');
  return s;
}
}  // namespace detail

inline std::string format_metrics_text(const MetricsReport& r) {
  using detail::pad;
  using detail::pad_right;
  std::ostringstream os;
  os << pad_right("Scope", 12) << pad("MAE", 10) << pad("RMSE", 10) << pad("r", 10) << pad("n", 6)
     << '\n';
  auto row = [&](const std::string& scope, const MetricTriple& m) {
    os << pad_right(scope, 12) << pad(format_fixed4(m.mae), 10) << pad(format_fixed4(m.rmse), 10)
       << pad(format_fixed4(m.r), 10) << pad(std::to_string(m.n), 6) << '\n';
  };
  for (std::size_t j = 0; j < kNumTasks; ++j) row("Q" + std::to_string(j + 1), r.per_subscore[j]);
  row("Global", r.global);
  for (const auto& [g, m] : r.per_group) row(std::string("Global/") + to_string(g), m);
  return os.str();
}

/// Actual vs predicted global score, CN and MCI in different colours.
inline std::string scatter_svg(const std::vector<ScatterPoint>& pts) {
  const double size = 400.0, margin = 40.0;
  double lo = 0.0, hi = 1.0;
  for (const auto& p : pts) {
    lo = std::min({lo, p.actual, p.predicted});
    hi = std::max({hi, p.actual, p.predicted});
  }
  auto sx = [&](double v) { return margin + (v - lo) / (hi - lo) * (size - 2 * margin); };
  auto sy = [&](double v) { return size - margin - (v - lo) / (hi - lo) * (size - 2 * margin); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"400\" height=\"400\" "
        "viewBox=\"0 0 400 400\">\n";
  os << "<rect width=\"400\" height=\"400\" fill=\"white\"/>\n";
  os << "<line x1=\"" << format_fixed4(sx(lo)) << "\" y1=\"" << format_fixed4(sy(lo)) << "\" x2=\""
     << format_fixed4(sx(hi)) << "\" y2=\"" << format_fixed4(sy(hi))
     << "\" stroke=\"#999\" stroke-dasharray=\"4 4\"/>\n";
  os << "<line x1=\"40\" y1=\"360\" x2=\"360\" y2=\"360\" stroke=\"black\"/>\n";
  os << "<line x1=\"40\" y1=\"40\" x2=\"40\" y2=\"360\" stroke=\"black\"/>\n";
  os << "<text x=\"200\" y=\"390\" font-size=\"12\" text-anchor=\"middle\">actual global</text>\n";
  os << "<text x=\"12\" y=\"200\" font-size=\"12\" text-anchor=\"middle\" "
        "transform=\"rotate(-90 12 200)\">predicted global</text>\n";
  os << "<text x=\"40\" y=\"374\" font-size=\"10\">" << format_fixed4(lo) << "</text>\n";
  os << "<text x=\"360\" y=\"374\" font-size=\"10\" text-anchor=\"end\">" << format_fixed4(hi)
     << "</text>\n";
  for (const auto& p : pts)
    os << "<circle cx=\"" << format_fixed4(sx(p.actual)) << "\" cy=\"" << format_fixed4(sy(p.predicted))
       << "\" r=\"3\" fill=\"" << (p.group == Group::CN ? "#1f77b4" : "#d62728")
       << "\" fill-opacity=\"0.7\"/>\n";
  os << "<text x=\"300\" y=\"30\" font-size=\"11\" fill=\"#1f77b4\">CN</text>\n";
  os << "<text x=\"330\" y=\"30\" font-size=\"11\" fill=\"#d62728\">MCI</text>\n";
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Ablation harness and literature reference rows
// ---------------------------------------------------------------------------

inline constexpr const char* kTrainedSource = "trained (synthetic)";
inline constexpr const char* kLiteratureSource = "literature (ADNI, not reproduced)";

/// Published result row, kept only as a labelled reference.
struct ReferenceRow {
  std::optional<Group> group;  ///< empty for the whole-cohort table
  std::string architecture;
  std::optional<double> mae;
  std::optional<double> rmse;
  std::optional<double> r;
};

/// Whole-cohort results for the three weighting presets.
inline const std::vector<ReferenceRow>& literature_ablation_rows() {
  static const std::vector<ReferenceRow> rows = {
      {std::nullopt, "strong", 4.49, 5.29, 0.21},
      {std::nullopt, "moderate", 4.52, 5.16, 0.24},
      {std::nullopt, "uniform", 4.58, 5.28, 0.13},
  };
  return rows;
}

/// Per-group results, including the regional-feature "Dirty Model" baseline
/// (RMSE not published).
inline const std::vector<ReferenceRow>& literature_group_rows() {
  static const std::vector<ReferenceRow> rows = {
      {Group::CN, "strong", 3.94, 4.74, 0.10},
      {Group::CN, "moderate", 4.08, 4.62, 0.30},
      {Group::CN, "dirty-model", 3.18, std::nullopt, 0.08},
      {Group::MCI, "strong", 5.32, 6.02, 0.27},
      {Group::MCI, "moderate", 5.18, 5.87, 0.15},
      {Group::MCI, "dirty-model", 5.06, std::nullopt, 0.37},
  };
  return rows;
}

/// Short description of a weight vector.
inline std::string weights_summary(const WeightConfig& wc) {
  const double hi = wc.w[kEmphasisItems[0]];
  bool pattern = true;
  double lo = -1.0;
  for (std::size_t j = 0; j < kNumTasks; ++j) {
    const bool emph = j == 0 || j == 3 || j == 7;
    if (emph && wc.w[j] != hi) pattern = false;
    if (!emph) {
      if (lo < 0) lo = wc.w[j];
      if (wc.w[j] != lo) pattern = false;
    }
  }
  if (pattern && hi == lo) return "all=" + format_exact(hi);
  if (pattern) return "Q1/Q4/Q8=" + format_exact(hi) + " others=" + format_exact(lo);
  std::string s;
  for (std::size_t j = 0; j < kNumTasks; ++j) s += (j ? " " : "") + format_exact(wc.w[j]);
  return s;
}

struct AblationRow {
  WeightConfig weights;
  MetricTriple global;
  std::map<Group, MetricTriple> per_group;
  TrainHistory history;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<ReferenceRow> reference_rows;        ///< whole-cohort literature rows
  std::vector<ReferenceRow> reference_group_rows;  ///< per-group literature rows
};

/// Trains one model per weight config from the same seed and split and
/// evaluates each on the validation side.
inline AblationResult run_ablation(const Dataset& train_set, const Dataset& val_set,
                                   const ModelConfig& mcfg, const TrainConfig& tcfg,
                                   const std::vector<WeightConfig>& configs,
                                   bool with_references = true,
                                   const std::function<void(const std::string&, const EpochRecord&)>&
                                       on_epoch = {}) {
  require(!configs.empty(), ErrorKind::usage, "ablation needs at least one weight config");
  require(!val_set.empty(), ErrorKind::data, "ablation needs a non-empty validation split");
  AblationResult out;
  for (const auto& wc : configs) {
    TrainConfig t = tcfg;
    t.weights = wc;
    const std::string name = wc.name.empty() ? "custom" : wc.name;
    try {
      EpochCallback cb;
      if (on_epoch) cb = [&](const EpochRecord& r) { on_epoch(name, r); };
      auto res = train(train_set, val_set, mcfg, t, cb);
      const auto rep = evaluate(res.params, val_set, t.threads);
      out.rows.push_back({wc, rep.global, rep.per_group, std::move(res.history)});
    } catch (const Error& e) {
      throw Error(e.kind(), "config '" + name + "': " + e.what());
    }
  }
  if (with_references) {
    out.reference_rows = literature_ablation_rows();
    out.reference_group_rows = literature_group_rows();
  }
  return out;
}

inline constexpr const char* kAblationHeader = "source,name,weights,mae,rmse,r";

inline void write_ablation_csv(std::ostream& os, const AblationResult& a) {
  os << kAblationHeader << '\n';
  for (const auto& r : a.rows)
    os << kTrainedSource << ',' << r.weights.name << ',' << weights_summary(r.weights) << ','
       << format_fixed4(r.global.mae) << ',' << format_fixed4(r.global.rmse) << ','
       << format_fixed4(r.global.r) << '\n';
  for (const auto& r : a.reference_rows)
    os << kLiteratureSource << ',' << r.architecture << ','
       << weights_summary(*preset_by_name(r.architecture)) << ',' << format_fixed4(r.mae) << ','
       << format_fixed4(r.rmse) << ',' << format_fixed4(r.r) << '\n';
}

inline constexpr const char* kSubgroupHeader = "source,group,name,mae,rmse,r,n";

inline void write_subgroup_csv(std::ostream& os, const AblationResult& a) {
  os << kSubgroupHeader << '\n';
  for (Group g : {Group::CN, Group::MCI}) {
    for (const auto& r : a.rows) {
      auto it = r.per_group.find(g);
      if (it == r.per_group.end()) continue;
      os << kTrainedSource << ',' << to_string(g) << ',' << r.weights.name << ','
         << format_fixed4(it->second.mae) << ',' << format_fixed4(it->second.rmse) << ','
         << format_fixed4(it->second.r) << ',' << it->second.n << '\n';
    }
    for (const auto& r : a.reference_group_rows)
      if (r.group == g)
        os << kLiteratureSource << ',' << to_string(g) << ',' << r.architecture << ','
           << format_fixed4(r.mae) << ',' << format_fixed4(r.rmse) << ',' << format_fixed4(r.r)
           << ",\n";
  }
}

inline std::string format_ablation_text(const AblationResult& a) {
  using detail::pad;
  using detail::pad_right;
  std::ostringstream os;
  os << "Global-score results by weighting strategy (validation split)\n";
  os << pad_right("Source", 36) << pad_right("Config", 12) << pad_right("Weights", 32)
     << pad("MAE", 9) << pad("RMSE", 9) << pad("r", 9) << '\n';
  for (const auto& r : a.rows)
    os << pad_right(kTrainedSource, 36) << pad_right(r.weights.name, 12)
       << pad_right(weights_summary(r.weights), 32) << pad(format_fixed4(r.global.mae), 9)
       << pad(format_fixed4(r.global.rmse), 9) << pad(format_fixed4(r.global.r), 9) << '\n';
  for (const auto& r : a.reference_rows)
    os << pad_right(kLiteratureSource, 36) << pad_right(r.architecture, 12)
       << pad_right(weights_summary(*preset_by_name(r.architecture)), 32)
       << pad(format_fixed4(r.mae), 9) << pad(format_fixed4(r.rmse), 9)
       << pad(format_fixed4(r.r), 9) << '\n';
  if (!a.reference_group_rows.empty() || !a.rows.empty()) {
    os << "\nPer-group global-score results\n";
    os << pad_right("Source", 36) << pad_right("Group", 7) << pad_right("Config", 13)
       << pad("MAE", 9) << pad("RMSE", 9) << pad("r", 9) << '\n';
    for (Group g : {Group::CN, Group::MCI}) {
      for (const auto& r : a.rows) {
        auto it = r.per_group.find(g);
        if (it == r.per_group.end()) continue;
        os << pad_right(kTrainedSource, 36) << pad_right(to_string(g), 7)
           << pad_right(r.weights.name, 13) << pad(format_fixed4(it->second.mae), 9)
           << pad(format_fixed4(it->second.rmse), 9) << pad(format_fixed4(it->second.r), 9)
           << '\n';
      }
      for (const auto& r : a.reference_group_rows)
        if (r.group == g)
          os << pad_right(kLiteratureSource, 36) << pad_right(to_string(g), 7)
             << pad_right(r.architecture, 13) << pad(format_fixed4(r.mae), 9)
             << pad(format_fixed4(r.rmse), 9) << pad(format_fixed4(r.r), 9) << '\n';
    }
  }
  return os.str();
}

/// Per-group table (Group, MAE, RMSE, r). Missing groups get a note.
inline std::string subgroup_report(const MetricsReport& r) {
  using detail::pad;
  using detail::pad_right;
  std::ostringstream os;
  os << pad_right("Group", 8) << pad("MAE", 10) << pad("RMSE", 10) << pad("r", 10) << pad("n", 6)
     << '\n';
  std::vector<std::string> absent;
  for (Group g : {Group::CN, Group::MCI}) {
    auto it = r.per_group.find(g);
    if (it == r.per_group.end()) {
      absent.push_back(to_string(g));
      continue;
    }
    const auto& m = it->second;
    os << pad_right(to_string(g), 8) << pad(format_fixed4(m.mae), 10)
       << pad(format_fixed4(m.rmse), 10) << pad(format_fixed4(m.r), 10)
       << pad(std::to_string(m.n), 6) << '\n';
  }
  for (const auto& g : absent) os << g << ": absent\n";
  return os.str();
}

/// Literature per-group rows rendered in the same layout.
inline std::string reference_group_table(const std::vector<ReferenceRow>& rows) {
  using detail::pad;
  using detail::pad_right;
  std::ostringstream os;
  os << "[" << kLiteratureSource << "]\n";
  os << pad_right("Group", 8) << pad_right("Config", 13) << pad("MAE", 10) << pad("RMSE", 10)
     << pad("r", 10) << '\n';
  for (const auto& r : rows)
    os << pad_right(r.group ? to_string(*r.group) : "all", 8) << pad_right(r.architecture, 13)
       << pad(format_fixed4(r.mae), 10) << pad(format_fixed4(r.rmse), 10)
       << pad(format_fixed4(r.r), 10) << '\n';
  return os.str();
}

}  // namespace submtl

#endif  // SUBMTL_EVALUATION_HPP
