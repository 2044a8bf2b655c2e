#ifndef SUBMTL_LOSS_HPP
#define SUBMTL_LOSS_HPP

#include <algorithm>
#include <array>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "submtl/cohort.hpp"
#include "submtl/common.hpp"

namespace submtl {

/// Per-item loss weights. Used as given; never renormalised.
struct WeightConfig {
  TaskArray w{};
  std::string name;

  double sum() const { return compensated_sum(w); }

  friend bool operator==(const WeightConfig&, const WeightConfig&) = default;
};

inline void validate(const WeightConfig& wc) {
  bool any_positive = false;
  for (std::size_t j = 0; j < kNumTasks; ++j) {
    require(std::isfinite(wc.w[j]) && wc.w[j] >= 0.0, ErrorKind::usage,
            "weight w" + std::to_string(j + 1) + " must be finite and >= 0");
    any_positive = any_positive || wc.w[j] > 0.0;
  }
  require(any_positive, ErrorKind::usage, "at least one weight must be positive");
}

/// 0-based indices of the emphasised items Q1, Q4, Q8.
inline constexpr std::array<std::size_t, 3> kEmphasisItems = {0, 3, 7};

namespace detail {
inline WeightConfig emphasis_preset(std::string name, double high, double low) {
  WeightConfig wc;
  wc.name = std::move(name);
  wc.w.fill(low);
  for (auto j : kEmphasisItems) wc.w[j] = high;
  return wc;
}
}  // namespace detail

inline WeightConfig uniform_preset() { return detail::emphasis_preset("uniform", 1.0, 1.0); }
inline WeightConfig moderate_preset() { return detail::emphasis_preset("moderate", 0.160, 0.052); }
inline WeightConfig strong_preset() { return detail::emphasis_preset("strong", 0.320, 0.004); }

inline std::vector<WeightConfig> all_presets() {
  return {strong_preset(), moderate_preset(), uniform_preset()};
}

inline std::optional<WeightConfig> preset_by_name(std::string_view name) {
  if (name == "uniform") return uniform_preset();
  if (name == "moderate") return moderate_preset();
  if (name == "strong") return strong_preset();
  return std::nullopt;
}

/// Share of the total weight carried by Q1, Q4 and Q8.
inline double emphasis_share(const WeightConfig& wc) {
  std::array<double, 3> e{};
  for (std::size_t k = 0; k < 3; ++k) e[k] = wc.w[kEmphasisItems[k]];
  return compensated_sum(e) / wc.sum();
}

inline nlohmann::json to_json(const WeightConfig& wc) {
  nlohmann::json j;
  j["name"] = wc.name;
  j["w"] = std::vector<double>(wc.w.begin(), wc.w.end());
  return j;
}

inline WeightConfig weights_from_json(const nlohmann::json& j) {
  WeightConfig wc;
  try {
    if (j.contains("name") && !j.at("name").is_null()) wc.name = j.at("name").get<std::string>();
    const auto w = j.at("w").get<std::vector<double>>();
    require(w.size() == kNumTasks, ErrorKind::usage,
            "weight config needs exactly 13 entries, got " + std::to_string(w.size()));
    std::copy(w.begin(), w.end(), wc.w.begin());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::usage, std::string("malformed weight config: ") + e.what());
  }
  validate(wc);
  return wc;
}

inline WeightConfig load_weights(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorKind::usage,
          "weight file '" + path.string() + "' not found");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::usage, "weight file '" + path.string() + "': " + e.what());
  }
  return weights_from_json(j);
}

/// Canonical on-disk form: two-space indented JSON plus a trailing newline.
inline std::string weights_file_text(const WeightConfig& wc) { return to_json(wc).dump(2) + "\n"; }

inline void save_weights(const std::filesystem::path& path, const WeightConfig& wc) {
  std::ofstream os(path, std::ios::trunc);
  require(static_cast<bool>(os), ErrorKind::data, "cannot write '" + path.string() + "'");
  os << weights_file_text(wc);
}

/// Resolves a preset name or a path to a weight JSON file.
inline WeightConfig resolve_weights(const std::string& preset_or_path) {
  if (auto p = preset_by_name(preset_or_path)) return *p;
  return load_weights(preset_or_path);
}

// ---------------------------------------------------------------------------
// Weighted multi-task MSE
// ---------------------------------------------------------------------------

/// (1/B) * sum_i w * (y_i - yhat_i)^2 for one item.
inline double weighted_mse_task(std::span<const double> preds, std::span<const double> targets,
                                double w) {
  require(preds.size() == targets.size(), ErrorKind::data, "loss: length mismatch");
  require(!preds.empty(), ErrorKind::data, "loss: empty batch");
  require(w >= 0.0, ErrorKind::usage, "loss: negative weight");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double e = targets[i] - preds[i];
    s += w * (e * e);
  }
  return s / static_cast<double>(preds.size());
}

/// Row-major B x 13 matrices.
struct TaskMatrix {
  std::size_t rows = 0;
  std::vector<double> data;

  TaskMatrix() = default;
  explicit TaskMatrix(std::size_t b) : rows(b), data(b * kNumTasks, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * kNumTasks + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * kNumTasks + j]; }

  std::vector<double> column(std::size_t j) const {
    std::vector<double> c(rows);
    for (std::size_t i = 0; i < rows; ++i) c[i] = (*this)(i, j);
    return c;
  }
};

/// Per-item terms of the total loss, in item order.
inline TaskArray task_losses(const TaskMatrix& preds, const TaskMatrix& targets,
                             const WeightConfig& wc) {
  require(preds.rows == targets.rows, ErrorKind::data, "loss: batch size mismatch");
  require(preds.data.size() == preds.rows * kNumTasks &&
              targets.data.size() == targets.rows * kNumTasks,
          ErrorKind::data, "loss: expected 13 columns");
  TaskArray out{};
  for (std::size_t j = 0; j < kNumTasks; ++j)
    out[j] = weighted_mse_task(preds.column(j), targets.column(j), wc.w[j]);
  return out;
}

/// Sum over items of the weighted per-item MSE.
inline double total_loss(const TaskMatrix& preds, const TaskMatrix& targets,
                         const WeightConfig& wc) {
  const auto terms = task_losses(preds, targets, wc);
  double s = 0.0;
  for (double t : terms) s += t;
  return s;
}

// ---------------------------------------------------------------------------
// Correlation-driven weights
// ---------------------------------------------------------------------------

struct CorrelationTable {
  TaskArray r{};
  std::array<bool, kNumTasks> constant{};  ///< r forced to 0 for a constant item
  TaskArray sd{};                          ///< sample sd of each item
  std::size_t n = 0;
};

struct DerivedWeights {
  CorrelationTable table;
  WeightConfig weights;
  std::vector<std::size_t> selected;  ///< 0-based, ascending
};

/// Item-to-total Pearson correlations. Constant items get r = 0 and are
/// flagged rather than treated as undefined.
inline CorrelationTable correlation_table(std::span<const ScoreVector> scores) {
  require(scores.size() >= 2, ErrorKind::data, "need at least 2 score vectors");
  const std::size_t n = scores.size();
  std::vector<double> global(n);
  for (std::size_t i = 0; i < n; ++i) global[i] = scores[i].global();
  const double gmean = std::accumulate(global.begin(), global.end(), 0.0) / n;
  double gss = 0.0;
  for (double g : global) gss += (g - gmean) * (g - gmean);
  require(gss > 0.0, ErrorKind::data, "global score is constant; correlations undefined");

  CorrelationTable t;
  t.n = n;
  for (std::size_t j = 0; j < kNumTasks; ++j) {
    double m = 0.0;
    for (const auto& s : scores) m += s.q[j];
    m /= n;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double a = scores[i].q[j] - m;
      sxy += a * (global[i] - gmean);
      sxx += a * a;
    }
    t.sd[j] = std::sqrt(sxx / (n - 1));
    if (!(sxx > 0.0)) {
      t.constant[j] = true;
      t.r[j] = 0.0;
    } else {
      t.r[j] = std::clamp(sxy / (std::sqrt(sxx) * std::sqrt(gss)), -1.0, 1.0);
    }
  }
  return t;
}

/// Returns `wc` renamed after the preset it equals exactly, if any.
inline WeightConfig name_if_preset(WeightConfig wc) {
  for (const auto& p : all_presets())
    if (p.w == wc.w) {
      wc.name = p.name;
      return wc;
    }
  return wc;
}

/// High weight for the top_k items by |r| (ties to the lower index), low
/// weight for the rest.
inline DerivedWeights derive_weights(std::span<const ScoreVector> scores, std::size_t top_k,
                                     double high_w, double low_w) {
  require(top_k >= 1 && top_k <= kNumTasks, ErrorKind::usage, "top_k must be in 1..13");
  require(high_w >= 0.0 && low_w >= 0.0, ErrorKind::usage, "weights must be >= 0");
  DerivedWeights out;
  out.table = correlation_table(scores);

  std::array<std::size_t, kNumTasks> order{};
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(out.table.r[a]) > std::abs(out.table.r[b]);
  });
  out.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_k));
  std::sort(out.selected.begin(), out.selected.end());

  out.weights.name = "derived";
  out.weights.w.fill(low_w);
  for (auto j : out.selected) out.weights.w[j] = high_w;
  out.weights = name_if_preset(out.weights);
  validate(out.weights);
  return out;
}

}  // namespace submtl

#endif  // SUBMTL_LOSS_HPP
