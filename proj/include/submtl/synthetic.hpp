#ifndef SUBMTL_SYNTHETIC_HPP
#define SUBMTL_SYNTHETIC_HPP

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "submtl/cohort.hpp"
#include "submtl/volume.hpp"

namespace submtl {

/// Item-to-global correlation profile used by default for synthetic cohorts.
inline constexpr TaskArray kReferenceItemCorrelations = {
    0.77, 0.13, 0.16, 0.84, 0.20, 0.04, 0.34, 0.70, 0.14, 0.12, 0.19, 0.02, 0.35};

struct SyntheticSpec {
  long long n_cn = 163;
  long long n_mci = 95;
  Dims dims{32, 32, 32};
  std::uint32_t patch_size = 8;
  std::uint64_t seed = 0;
  TaskArray corr_targets = kReferenceItemCorrelations;
  TaskArray maxima = kDefaultMaxima;
  double max_global = 20.0;  ///< inclusion rule, applied to Month-24 totals
};

struct SyntheticCohort {
  Cohort cohort;
  std::vector<Volume> volumes;  ///< same order as cohort.subjects()
};

/// Loadings of the linear-Gaussian score model
///   q_j = mean_j + scale * (latent_j * z + noise_j * e_j)
/// with z, e_j standard normal. Chosen so that corr(q_j, sum_k q_k) equals
/// the target for every item (before clamping), with var(sum) = scale^2.
struct ScoreModel {
  TaskArray latent{};
  TaskArray noise{};
  TaskArray mean{};
  double scale = 4.3;
};

namespace detail {

// noise_j = tau * r_j; latent_j solves the correlation equation for a given
// total latent loading B = sqrt(1 - tau^2 sum r^2); tau is found by bisection
// so that the latent loadings sum to B.
inline ScoreModel calibrate_score_model(const TaskArray& targets, const TaskArray& maxima,
                                        double scale) {
  double r_max = 0.0;
  double r_sq = 0.0;
  for (double r : targets) {
    require(r >= 0.0 && r < 1.0, ErrorKind::usage,
            "correlation targets must lie in [0, 1)");
    r_max = std::max(r_max, r);
    r_sq += r * r;
  }
  require(r_max > 0.0, ErrorKind::usage, "at least one correlation target must be positive");

  auto total_latent = [&](double tau) { return std::sqrt(1.0 - tau * tau * r_sq); };
  auto loadings = [&](double tau, TaskArray& latent) {
    const double b = total_latent(tau);
    double sum = 0.0;
    for (std::size_t j = 0; j < kNumTasks; ++j) {
      const double r = targets[j];
      const double denom = b * b - r * r;
      latent[j] = r * r * tau * (std::sqrt(b * b - r * r * (1.0 - tau * tau)) - b * tau) / denom;
      sum += latent[j];
    }
    return sum - b;
  };

  // Upper bound keeps B > r_max.
  double hi = std::sqrt(std::max(0.0, (1.0 - r_max * r_max) / r_sq)) * (1.0 - 1e-9);
  hi = std::min(hi, 1.0 - 1e-9);
  double lo = 0.0;
  TaskArray latent{};
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (loadings(mid, latent) < 0.0 ? lo : hi) = mid;
  }
  ScoreModel m;
  m.scale = scale;
  const double tau = 0.5 * (lo + hi);
  loadings(tau, m.latent);
  for (std::size_t j = 0; j < kNumTasks; ++j) {
    m.noise[j] = tau * targets[j];
    const double sd = scale * std::hypot(m.latent[j], m.noise[j]);
    m.mean[j] = std::min(maxima[j] / 2.0, 2.0 * sd);
  }
  return m;
}

struct GroupLatent {
  double mean;
  double sd;
};

inline constexpr GroupLatent kCnAtrophy{0.35, 0.15};
inline constexpr GroupLatent kMciAtrophy{0.65, 0.15};

inline void render_volume(Volume& v, double atrophy, Rng& rng) {
  const auto& d = v.dims;
  v.voxels.assign(d.voxels(), 0.0f);
  const double cz = (d.d - 1) / 2.0, cy = (d.h - 1) / 2.0, cx = (d.w - 1) / 2.0;
  const double medial_r = 0.2 * std::min({d.d, d.h, d.w});
  for (std::uint32_t z = 0; z < d.d; ++z)
    for (std::uint32_t y = 0; y < d.h; ++y)
      for (std::uint32_t x = 0; x < d.w; ++x) {
        const double dz = (z - cz) / (0.45 * d.d);
        const double dy = (y - cy) / (0.45 * d.h);
        const double dx = (x - cx) / (0.45 * d.w);
        const double rho = std::sqrt(dz * dz + dy * dy + dx * dx);
        double val = rho < 1.0 ? 1.0 : 0.1;
        // Medial structure, slightly off-centre so the volume is asymmetric.
        const double mz = z - cz, my = y - (cy + 0.1 * d.h), mx = x - cx;
        if (std::sqrt(mz * mz + my * my + mx * mx) < medial_r)
          val *= 1.0 - 0.9 * atrophy;
        val += rng.normal(0.0, 0.05);
        v.at(z, y, x) = static_cast<float>(val);
      }
}

}  // namespace detail

/// Synthetic stand-in for the gated imaging cohort. Each subject gets a
/// latent atrophy value (MCI higher than CN on average) that both darkens a
/// medial region of its volume and drives its Month-24 item scores.
inline SyntheticCohort generate_synthetic_cohort(const SyntheticSpec& spec) {
  require(spec.n_cn >= 0 && spec.n_mci >= 0, ErrorKind::usage,
          "subject counts must be non-negative");
  require(spec.dims.d >= 1 && spec.dims.h >= 1 && spec.dims.w >= 1, ErrorKind::usage,
          "volume dims must be >= 1");
  require(spec.dims.divisible_by(spec.patch_size), ErrorKind::usage,
          "volume dims " + to_string(spec.dims) + " not divisible by patch size " +
              std::to_string(spec.patch_size));

  const auto model = detail::calibrate_score_model(spec.corr_targets, spec.maxima, 4.3);

  // Standardise the atrophy mixture so z has unit variance.
  const double n = static_cast<double>(spec.n_cn + spec.n_mci);
  const double p_cn = n > 0 ? spec.n_cn / n : 0.5;
  const double p_mci = 1.0 - p_cn;
  const auto& cn = detail::kCnAtrophy;
  const auto& mci = detail::kMciAtrophy;
  const double mix_mean = p_cn * cn.mean + p_mci * mci.mean;
  const double mix_var = p_cn * (cn.sd * cn.sd + cn.mean * cn.mean) +
                         p_mci * (mci.sd * mci.sd + mci.mean * mci.mean) -
                         mix_mean * mix_mean;
  const double mix_sd = std::sqrt(mix_var);

  std::vector<SubjectRecord> records;
  std::vector<Volume> volumes;
  const auto total = static_cast<std::size_t>(spec.n_cn + spec.n_mci);
  records.reserve(total);
  volumes.reserve(total);

  for (std::size_t i = 0; i < total; ++i) {
    const bool is_cn = i < static_cast<std::size_t>(spec.n_cn);
    Rng rng = Rng::stream(spec.seed, i, 0xc0407);
    SubjectRecord r;
    char id[32];
    std::snprintf(id, sizeof id, "S%04zu", i + 1);
    r.subject_id = id;
    r.group = is_cn ? Group::CN : Group::MCI;
    r.age = std::round(rng.normal(is_cn ? 76.0 : 75.0, is_cn ? 5.2 : 7.3) * 10.0) / 10.0;
    r.sex = rng.uniform() < (is_cn ? 83.0 / 163.0 : 64.0 / 95.0) ? Sex::M : Sex::F;
    r.volume_path = "volumes/" + r.subject_id + ".vol";
    r.scores_m24.max = spec.maxima;

    const auto& gl = is_cn ? cn : mci;
    double atrophy = 0.0;
    // Rejection sampling enforces the inclusion rule on the total.
    for (int attempt = 0;; ++attempt) {
      atrophy = std::clamp(rng.normal(gl.mean, gl.sd), 0.0, 1.0);
      const double z = mix_sd > 0 ? (atrophy - mix_mean) / mix_sd : 0.0;
      for (std::size_t j = 0; j < kNumTasks; ++j) {
        const double raw = model.mean[j] +
                           model.scale * (model.latent[j] * z + model.noise[j] * rng.normal());
        r.scores_m24.q[j] = std::clamp(raw, 0.0, spec.maxima[j]);
      }
      if (r.scores_m24.global() <= spec.max_global) break;
      require(attempt < 10000, ErrorKind::data,
              "synthetic generator cannot satisfy the global-score limit");
    }

    Volume v;
    v.subject_id = r.subject_id;
    v.dims = spec.dims;
    Rng vol_rng = Rng::stream(spec.seed, i, 0x701);
    detail::render_volume(v, atrophy, vol_rng);

    records.push_back(std::move(r));
    volumes.push_back(std::move(v));
  }
  return {Cohort(std::move(records), Provenance::synthetic, {}, spec.maxima),
          std::move(volumes)};
}

/// Writes `manifest.csv` and `volumes/*.vol` under `dir`. Returns the
/// manifest path.
inline std::filesystem::path write_synthetic_cohort(const std::filesystem::path& dir,
                                                   const SyntheticCohort& sc) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "volumes", ec);
  require(!ec, ErrorKind::data, "cannot create output directory '" + dir.string() + "'");
  for (std::size_t i = 0; i < sc.volumes.size(); ++i)
    write_volume(dir / sc.cohort.subjects()[i].volume_path, sc.volumes[i]);
  const auto manifest = dir / "manifest.csv";
  write_manifest(manifest, sc.cohort);
  return manifest;
}

}  // namespace submtl

#endif  // SUBMTL_SYNTHETIC_HPP
