#ifndef SUBMTL_TRAINING_HPP
#define SUBMTL_TRAINING_HPP

#include <chrono>
#include <functional>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "submtl/cohort.hpp"
#include "submtl/loss.hpp"
#include "submtl/metrics.hpp"
#include "submtl/model.hpp"
#include "submtl/optim.hpp"
#include "submtl/parallel.hpp"
#include "submtl/synthetic.hpp"

namespace submtl {

// ---------------------------------------------------------------------------
// In-memory dataset: normalised volumes plus targets for a list of subjects.
// ---------------------------------------------------------------------------

struct Dataset {
  std::vector<std::string> ids;
  std::vector<Group> groups;
  std::vector<Volume> volumes;  ///< intensity-normalised
  std::vector<TaskArray> targets;
  std::vector<bool> degenerate;  ///< volume was constant before normalisation

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }

  /// Subset in the given index order.
  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset d;
    for (auto i : idx) {
      d.ids.push_back(ids[i]);
      d.groups.push_back(groups[i]);
      d.volumes.push_back(volumes[i]);
      d.targets.push_back(targets[i]);
      d.degenerate.push_back(degenerate[i]);
    }
    return d;
  }
};

using VolumeProvider = std::function<Volume(const SubjectRecord&)>;

inline Dataset make_dataset(const Cohort& c, std::span<const std::string> ids,
                            const VolumeProvider& provider) {
  Dataset d;
  for (const auto& id : ids) {
    const auto& rec = c.at(id);
    auto nv = normalize_volume(provider(rec));
    d.ids.push_back(id);
    d.groups.push_back(rec.group);
    d.volumes.push_back(std::move(nv.volume));
    d.targets.push_back(rec.scores_m24.q);
    d.degenerate.push_back(nv.degenerate);
  }
  return d;
}

/// Reads volumes from disk through the cohort's manifest paths.
inline Dataset make_dataset(const Cohort& c, std::span<const std::string> ids) {
  return make_dataset(c, ids, [&](const SubjectRecord& r) { return c.load_volume(r); });
}

/// Uses the in-memory volumes of a generated cohort.
inline Dataset make_dataset(const SyntheticCohort& sc, std::span<const std::string> ids) {
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < sc.cohort.size(); ++i) pos[sc.cohort.subjects()[i].subject_id] = i;
  return make_dataset(sc.cohort, ids,
                      [&](const SubjectRecord& r) { return sc.volumes.at(pos.at(r.subject_id)); });
}

// ---------------------------------------------------------------------------
// Gradients of the weighted multi-task objective
// ---------------------------------------------------------------------------

template <class T>
struct GradientResult {
  std::vector<T> grad;
  double loss = 0.0;
  TaskMatrix preds;
};

inline TaskMatrix to_matrix(std::span<const TaskArray> rows) {
  TaskMatrix m(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < kNumTasks; ++j) m(i, j) = rows[i][j];
  return m;
}

/// Exact gradient of total_loss over one batch. Per-sample gradients are
/// reduced in sample order, so the result is independent of `threads`.
template <class T>
GradientResult<T> compute_gradients(const ModelParams<T>& p, std::span<const Volume> volumes,
                                    std::span<const TaskArray> targets, const WeightConfig& wc,
                                    unsigned threads = 1) {
  require(!volumes.empty(), ErrorKind::data, "compute_gradients: empty batch");
  require(volumes.size() == targets.size(), ErrorKind::data,
          "compute_gradients: volume/target count mismatch");
  validate(wc);
  const std::size_t b = volumes.size();
  const T inv_b = T(1) / static_cast<T>(b);

  std::vector<std::vector<T>> per_sample(b);
  std::vector<TaskArray> preds(b);
  parallel_for(b, threads, [&](std::size_t i) {
    ForwardCache<T> cache;
    const auto y = forward_sample(p, volumes[i], cache);
    std::array<T, kNumTasks> dy{};
    for (std::size_t j = 0; j < kNumTasks; ++j) {
      preds[i][j] = static_cast<double>(y[j]);
      dy[j] = T(2) * static_cast<T>(wc.w[j]) * (y[j] - static_cast<T>(targets[i][j])) * inv_b;
    }
    per_sample[i].assign(p.size(), T(0));
    backward_sample(p, cache, dy, std::span<T>(per_sample[i]));
  });

  GradientResult<T> out;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < kNumTasks; ++j)
      require(std::isfinite(preds[i][j]), ErrorKind::numeric,
              "non-finite prediction for sample " + std::to_string(i) + " ('" +
                  volumes[i].subject_id + "'), item q" + std::to_string(j + 1));
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < kNumTasks; ++j) {
      const double e = targets[i][j] - preds[i][j];
      require(std::isfinite(wc.w[j] * e * e), ErrorKind::numeric,
              "non-finite loss term for sample " + std::to_string(i) + " ('" +
                  volumes[i].subject_id + "'), item q" + std::to_string(j + 1));
    }
  out.preds = to_matrix(preds);
  out.loss = total_loss(out.preds, to_matrix(targets), wc);
  require(std::isfinite(out.loss), ErrorKind::numeric, "non-finite loss");

  out.grad = std::move(per_sample[0]);
  for (std::size_t i = 1; i < b; ++i)
    for (std::size_t k = 0; k < out.grad.size(); ++k) out.grad[k] += per_sample[i][k];
  for (const auto& t : p.layout->tensors())
    for (std::size_t k = t.offset; k < t.offset + t.size; ++k)
      require(std::isfinite(static_cast<double>(out.grad[k])), ErrorKind::numeric,
              "non-finite gradient in tensor '" + t.name + "'");
  return out;
}

template <class T>
std::vector<Prediction> predict(const ModelParams<T>& p, const Dataset& d, unsigned threads = 1) {
  if (d.empty()) return {};
  return forward(p, std::span<const Volume>(d.volumes), threads);
}

/// Objective over a whole dataset as one batch (B = N).
inline double dataset_loss(std::span<const Prediction> preds, const Dataset& d,
                           const WeightConfig& wc) {
  TaskMatrix pm(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i)
    for (std::size_t j = 0; j < kNumTasks; ++j) pm(i, j) = preds[i].y_hat[j];
  return total_loss(pm, to_matrix(d.targets), wc);
}

inline std::vector<double> composed_globals(std::span<const Prediction> preds) {
  std::vector<double> g;
  g.reserve(preds.size());
  for (const auto& p : preds) g.push_back(compose_global(p));
  return g;
}

inline std::vector<double> target_globals(const Dataset& d) {
  std::vector<double> g;
  g.reserve(d.size());
  for (const auto& t : d.targets) {
    double s = 0.0;
    for (double x : t) s += x;
    g.push_back(s);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 4;
  AdamConfig adam;
  std::uint64_t seed = 0;  ///< parameter init and shuffle order
  WeightConfig weights = uniform_preset();
  bool shuffle = true;
  unsigned threads = 1;
};

inline void validate(const TrainConfig& c) {
  require(c.epochs >= 1, ErrorKind::usage, "epochs must be >= 1");
  require(c.batch_size >= 1, ErrorKind::usage, "batch_size must be >= 1");
  validate(c.adam);
  validate(c.weights);
}

/// One row of the history CSV.
struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<double> val_mae_global;
  std::optional<double> val_rmse_global;
  std::optional<double> val_r_global;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainHistory {
  EpochRecord initial;               ///< epoch 0: untrained parameters, full-set loss
  std::vector<EpochRecord> epochs;   ///< one per completed epoch
  std::vector<double> epoch_seconds; ///< wall clock, not serialised
  double final_train_loss = 0.0;     ///< full-set loss after the last epoch

  double min_train_loss() const {
    double m = initial.train_loss;
    for (const auto& e : epochs) m = std::min(m, e.train_loss);
    return std::min(m, final_train_loss);
  }
};

template <class T>
EpochRecord evaluate_epoch(const ModelParams<T>& p, const Dataset& train, const Dataset& val,
                           const WeightConfig& wc, std::size_t epoch, unsigned threads,
                           std::optional<double> train_loss) {
  EpochRecord r;
  r.epoch = epoch;
  if (train_loss) {
    r.train_loss = *train_loss;
  } else {
    const auto tp = predict(p, train, threads);
    r.train_loss = dataset_loss(tp, train, wc);
  }
  if (!val.empty()) {
    const auto vp = predict(p, val, threads);
    r.val_loss = dataset_loss(vp, val, wc);
    const auto y = target_globals(val);
    const auto yhat = composed_globals(vp);
    r.val_mae_global = mae(y, yhat);
    r.val_rmse_global = rmse(y, yhat);
    if (val.size() >= 2) r.val_r_global = pearson_r(y, yhat);
  }
  return r;
}

struct TrainResult {
  ModelParams<float> params;
  TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch Adam on the weighted objective. 32-bit arithmetic; the final
/// partial batch is kept and uses its own size in the 1/B factor.
inline TrainResult train(const Dataset& train_set, const Dataset& val_set, const ModelConfig& mcfg,
                         const TrainConfig& tcfg, const EpochCallback& on_epoch = {}) {
  validate(mcfg);
  validate(tcfg);
  require(!train_set.empty(), ErrorKind::data, "training split is empty");

  TrainResult res{init_params<float>(mcfg, tcfg.seed), {}};
  auto& p = res.params;
  AdamState<float> state(p.size());
  res.history.initial =
      evaluate_epoch(p, train_set, val_set, tcfg.weights, 0, tcfg.threads, std::nullopt);

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (tcfg.shuffle) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng = Rng::stream(tcfg.seed, epoch, 0x5e1f);
      rng.shuffle(order.begin(), order.end());
    }
    double weighted_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + tcfg.batch_size);
      std::vector<Volume> vols;
      std::vector<TaskArray> targets;
      for (std::size_t k = start; k < end; ++k) {
        vols.push_back(train_set.volumes[order[k]]);
        targets.push_back(train_set.targets[order[k]]);
      }
      ++step;
      GradientResult<float> g;
      try {
        g = compute_gradients(p, std::span<const Volume>(vols), std::span<const TaskArray>(targets),
                              tcfg.weights, tcfg.threads);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::numeric) throw;
        fail(ErrorKind::numeric, "divergence at epoch " + std::to_string(epoch) + ", step " +
                                     std::to_string(step) + ": " + e.what());
      }
      adam_step(std::span<float>(p.values), std::span<const float>(g.grad), state, tcfg.adam);
      weighted_sum += g.loss * static_cast<double>(end - start);
    }
    const double epoch_loss = weighted_sum / static_cast<double>(order.size());
    require(std::isfinite(epoch_loss), ErrorKind::numeric,
            "divergence at epoch " + std::to_string(epoch));
    auto rec = evaluate_epoch(p, train_set, val_set, tcfg.weights, epoch, tcfg.threads, epoch_loss);
    res.history.epochs.push_back(rec);
    res.history.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    if (on_epoch) on_epoch(rec);
  }
  res.history.final_train_loss =
      dataset_loss(predict(p, train_set, tcfg.threads), train_set, tcfg.weights);
  return res;
}

// ---------------------------------------------------------------------------
// History CSV
// ---------------------------------------------------------------------------

inline constexpr const char* kHistoryHeader =
    "epoch,train_loss,val_loss,val_mae_global,val_rmse_global,val_r_global";

inline void write_history_csv(std::ostream& os, const TrainHistory& h) {
  os << kHistoryHeader << '\n';
  auto row = [&](const EpochRecord& r) {
    os << r.epoch << ',' << format_exact(r.train_loss) << ',' << format_exact(r.val_loss) << ','
       << format_exact(r.val_mae_global) << ',' << format_exact(r.val_rmse_global) << ','
       << format_exact(r.val_r_global) << '\n';
  };
  row(h.initial);
  for (const auto& r : h.epochs) row(r);
}

/// Inverse of write_history_csv (wall-clock times are not stored).
inline TrainHistory read_history_csv(std::istream& is) {
  std::string line;
  require(static_cast<bool>(std::getline(is, line)) && line == kHistoryHeader, ErrorKind::data,
          "history CSV: bad header");
  TrainHistory h;
  bool first = true;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    const std::string where = "history CSV line " + std::to_string(lineno);
    require(f.size() == 6, ErrorKind::data, where + ": expected 6 fields");
    EpochRecord r;
    r.epoch = static_cast<std::size_t>(parse_double(f[0], where));
    r.train_loss = parse_double(f[1], where);
    r.val_loss = parse_optional_double(f[2], where);
    r.val_mae_global = parse_optional_double(f[3], where);
    r.val_rmse_global = parse_optional_double(f[4], where);
    r.val_r_global = parse_optional_double(f[5], where);
    if (first)
      h.initial = r;
    else
      h.epochs.push_back(r);
    first = false;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check (64-bit)
// ---------------------------------------------------------------------------

struct GradcheckOptions {
  double step = 1e-5;
  std::size_t samples_per_tensor = 25;
  std::size_t batch = 2;
  bool perfect_fit = false;  ///< targets set to the model's own predictions
  std::size_t max_params = 10000;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  std::size_t coordinates_checked = 0;
  std::size_t param_count = 0;
};

/// Gradients smaller than this on both sides count as agreeing.
inline constexpr double kGradcheckAbsFloor = 1e-8;

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max(std::abs(analytic), std::abs(numeric));
  if (denom < kGradcheckAbsFloor) return 0.0;
  return std::abs(analytic - numeric) / denom;
}

/// Compares analytic gradients with central differences on a random batch.
/// Every tensor is probed at up to `samples_per_tensor` coordinates (all of
/// them when the tensor is smaller).
inline GradcheckResult gradcheck(const ModelConfig& mcfg, std::uint64_t seed,
                                 const GradcheckOptions& opt = {}) {
  require(opt.step > 0.0 && std::isfinite(opt.step), ErrorKind::usage,
          "gradcheck step must be > 0");
  require(opt.samples_per_tensor >= 1 && opt.batch >= 1, ErrorKind::usage,
          "gradcheck needs >= 1 sample and batch >= 1");
  auto p = init_params<double>(mcfg, seed);
  require(p.size() <= opt.max_params, ErrorKind::usage,
          "gradcheck config has " + std::to_string(p.size()) + " parameters; limit is " +
              std::to_string(opt.max_params));

  Rng rng = Rng::stream(seed, 0, 0x9c4ec);
  std::vector<Volume> vols(opt.batch);
  for (std::size_t i = 0; i < opt.batch; ++i) {
    vols[i].subject_id = "gc" + std::to_string(i);
    vols[i].dims = mcfg.input_dims;
    vols[i].voxels.resize(mcfg.input_dims.voxels());
    for (auto& v : vols[i].voxels) v = static_cast<float>(rng.normal());
  }
  WeightConfig wc;
  wc.name = "gradcheck";
  for (auto& w : wc.w) w = rng.uniform(0.1, 1.0);

  std::vector<TaskArray> targets(opt.batch);
  if (opt.perfect_fit) {
    const auto preds = forward(p, std::span<const Volume>(vols));
    for (std::size_t i = 0; i < opt.batch; ++i) targets[i] = preds[i].y_hat;
  } else {
    for (auto& t : targets)
      for (std::size_t j = 0; j < kNumTasks; ++j) t[j] = rng.uniform(0.0, kDefaultMaxima[j]);
  }

  const std::span<const Volume> vs(vols);
  const std::span<const TaskArray> ts(targets);
  const auto analytic = compute_gradients(p, vs, ts, wc).grad;

  // A sum of squares at exactly zero is at its global minimum: every
  // directional derivative is 0 and the analytic gradient must be exactly 0.
  // Central differences would only show their O(step^2) truncation term.
  bool at_minimum = false;

  auto loss_at = [&]() {
    const auto preds = forward(p, vs);
    TaskMatrix pm(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i)
      for (std::size_t j = 0; j < kNumTasks; ++j) pm(i, j) = preds[i].y_hat[j];
    return total_loss(pm, to_matrix(ts), wc);
  };

  at_minimum = loss_at() == 0.0;

  GradcheckResult res;
  res.param_count = p.size();
  const auto& tensors = p.layout->tensors();
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    const auto& spec = tensors[t];
    std::vector<std::size_t> coords(spec.size);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > opt.samples_per_tensor) {
      Rng pick = Rng::stream(seed, t, 0x91c4);
      pick.shuffle(coords.begin(), coords.end());
      coords.resize(opt.samples_per_tensor);
    }
    for (auto k : coords) {
      const std::size_t idx = spec.offset + k;
      double numeric = 0.0;
      if (!at_minimum) {
        const double orig = p.values[idx];
        p.values[idx] = orig + opt.step;
        const double up = loss_at();
        p.values[idx] = orig - opt.step;
        const double down = loss_at();
        p.values[idx] = orig;
        numeric = (up - down) / (2.0 * opt.step);
      }
      const double err = at_minimum ? (analytic[idx] == 0.0 ? 0.0 : 1.0)
                                    : relative_error(analytic[idx], numeric);
      ++res.coordinates_checked;
      if (res.worst_tensor.empty() || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_tensor = spec.name;
        res.worst_index = k;
      }
    }
  }
  return res;
}

}  // namespace submtl

#endif  // SUBMTL_TRAINING_HPP
