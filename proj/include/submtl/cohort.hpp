#ifndef SUBMTL_COHORT_HPP
#define SUBMTL_COHORT_HPP

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "submtl/common.hpp"
#include "submtl/volume.hpp"

namespace submtl {

/// Standard ADAS-Cog-13 item maxima in item order Q1..Q13.
inline constexpr TaskArray kDefaultMaxima = {10, 5, 5, 5, 5, 8, 12,
                                             5,  5, 5, 5, 10, 5};

/// Display labels. Items are handled purely by index.
inline constexpr std::array<const char*, kNumTasks> kItemLabels = {
    "Word Recall",
    "Commands",
    "Constructional Praxis",
    "Naming Objects and Fingers",
    "Ideational Praxis",
    "Orientation",
    "Word Recognition",
    "Remembering Test Instructions",
    "Spoken Language Ability",
    "Comprehension of Spoken Language",
    "Word-Finding Difficulty",
    "Delayed Word Recall",
    "Digit Cancellation"};

/// Month-24 item scores. The global score is always recomputed.
struct ScoreVector {
  TaskArray q{};
  TaskArray max = kDefaultMaxima;

  double global() const {
    double s = 0.0;
    for (double x : q) s += x;
    return s;
  }
};

inline void validate(const ScoreVector& s, const std::string& who) {
  for (std::size_t j = 0; j < kNumTasks; ++j) {
    require(s.max[j] > 0.0 && std::isfinite(s.max[j]), ErrorKind::data,
            who + ": maximum for q" + std::to_string(j + 1) + " must be positive");
    require(std::isfinite(s.q[j]) && s.q[j] >= 0.0 && s.q[j] <= s.max[j],
            ErrorKind::data,
            who + ": q" + std::to_string(j + 1) + "=" + format_exact(s.q[j]) +
                " outside [0, " + format_exact(s.max[j]) + "]");
  }
}

enum class Group { CN, MCI };
enum class Sex { M, F };

inline const char* to_string(Group g) { return g == Group::CN ? "CN" : "MCI"; }
inline const char* to_string(Sex s) { return s == Sex::M ? "M" : "F"; }

inline std::optional<Group> parse_group(std::string_view s) {
  if (s == "CN") return Group::CN;
  if (s == "MCI") return Group::MCI;
  return std::nullopt;
}

inline std::optional<Sex> parse_sex(std::string_view s) {
  if (s == "M") return Sex::M;
  if (s == "F") return Sex::F;
  return std::nullopt;
}

struct SubjectRecord {
  std::string subject_id;
  Group group = Group::CN;
  double age = 0.0;
  Sex sex = Sex::M;
  std::string volume_path;  ///< as written in the manifest
  ScoreVector scores_m24;
};

enum class Provenance { synthetic, external };

class Cohort {
 public:
  Cohort() = default;
  Cohort(std::vector<SubjectRecord> subjects, Provenance provenance,
         std::filesystem::path base_dir = {}, TaskArray maxima = kDefaultMaxima)
      : subjects_(std::move(subjects)),
        provenance_(provenance),
        base_dir_(std::move(base_dir)),
        maxima_(maxima) {
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < subjects_.size(); ++i) {
      const auto& s = subjects_[i];
      require(!s.subject_id.empty(), ErrorKind::data, "empty subject_id");
      require(seen.insert(s.subject_id).second, ErrorKind::data,
              "duplicate subject_id '" + s.subject_id + "'");
      index_.emplace(s.subject_id, i);
      validate(s.scores_m24, "subject '" + s.subject_id + "'");
    }
  }

  const std::vector<SubjectRecord>& subjects() const { return subjects_; }
  std::size_t size() const { return subjects_.size(); }
  bool empty() const { return subjects_.empty(); }
  Provenance provenance() const { return provenance_; }
  const TaskArray& maxima() const { return maxima_; }
  const std::filesystem::path& base_dir() const { return base_dir_; }

  const SubjectRecord& at(const std::string& id) const {
    auto it = index_.find(id);
    require(it != index_.end(), ErrorKind::data, "unknown subject_id '" + id + "'");
    return subjects_[it->second];
  }
  bool contains(const std::string& id) const { return index_.count(id) != 0; }

  std::filesystem::path resolve(const SubjectRecord& s) const {
    std::filesystem::path p(s.volume_path);
    return p.is_absolute() ? p : base_dir_ / p;
  }

  Volume load_volume(const SubjectRecord& s) const {
    return read_volume(resolve(s), s.subject_id);
  }

 private:
  std::vector<SubjectRecord> subjects_;
  Provenance provenance_ = Provenance::external;
  std::filesystem::path base_dir_;
  TaskArray maxima_ = kDefaultMaxima;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Score manifest (CSV)
// ---------------------------------------------------------------------------

inline const std::string& manifest_header() {
  static const std::string h = [] {
    std::string s = "subject_id,group,age,sex,volume_path";
    for (std::size_t j = 1; j <= kNumTasks; ++j) s += ",q" + std::to_string(j);
    return s;
  }();
  return h;
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

}  // namespace detail

/// Parses a manifest from a stream. `base_dir` anchors relative volume paths;
/// pass `check_paths = false` to skip the existence check.
inline Cohort parse_manifest(std::istream& is, const std::filesystem::path& base_dir,
                             const std::string& name, bool check_paths = true) {
  TaskArray maxima = kDefaultMaxima;
  bool header_seen = false;
  bool rows_seen = false;
  std::vector<SubjectRecord> rows;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  auto where = [&] { return name + ":" + std::to_string(lineno); };

  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("#maxima,", 0) == 0) {
        require(!rows_seen, ErrorKind::data,
                where() + ": #maxima must precede data rows");
        auto f = detail::split_csv(line);
        require(f.size() == kNumTasks + 1, ErrorKind::data,
                where() + ": #maxima needs 13 values");
        for (std::size_t j = 0; j < kNumTasks; ++j) {
          maxima[j] = parse_double(f[j + 1], where());
          require(maxima[j] > 0.0 && std::isfinite(maxima[j]), ErrorKind::data,
                  where() + ": maxima must be positive");
        }
      }
      continue;
    }
    if (!header_seen) {
      require(line == manifest_header(), ErrorKind::data,
              where() + ": expected header '" + manifest_header() + "'");
      header_seen = true;
      continue;
    }
    rows_seen = true;
    auto f = detail::split_csv(line);
    require(f.size() == 5 + kNumTasks, ErrorKind::data,
            where() + ": expected " + std::to_string(5 + kNumTasks) +
                " fields, got " + std::to_string(f.size()));
    SubjectRecord r;
    r.subject_id = f[0];
    require(!r.subject_id.empty(), ErrorKind::data, where() + ": empty subject_id");
    require(seen.insert(r.subject_id).second, ErrorKind::data,
            where() + ": duplicate subject_id '" + r.subject_id + "'");
    auto g = parse_group(f[1]);
    require(g.has_value(), ErrorKind::data, where() + ": group must be CN or MCI");
    r.group = *g;
    r.age = parse_double(f[2], where());
    require(std::isfinite(r.age), ErrorKind::data, where() + ": age not finite");
    auto sx = parse_sex(f[3]);
    require(sx.has_value(), ErrorKind::data, where() + ": sex must be M or F");
    r.sex = *sx;
    r.volume_path = f[4];
    require(!r.volume_path.empty(), ErrorKind::data, where() + ": empty volume_path");
    r.scores_m24.max = maxima;
    for (std::size_t j = 0; j < kNumTasks; ++j)
      r.scores_m24.q[j] = parse_double(f[5 + j], where());
    validate(r.scores_m24, where());
    if (check_paths) {
      std::filesystem::path p(r.volume_path);
      if (!p.is_absolute()) p = base_dir / p;
      require(std::filesystem::is_regular_file(p), ErrorKind::data,
              where() + ": volume_path '" + r.volume_path + "' does not resolve");
    }
    rows.push_back(std::move(r));
  }
  require(header_seen, ErrorKind::data, name + ": missing header line");
  return Cohort(std::move(rows), Provenance::external, base_dir, maxima);
}

inline Cohort load_cohort(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  require(static_cast<bool>(is), ErrorKind::data,
          "manifest '" + manifest_path.string() + "' not found");
  return parse_manifest(is, manifest_path.parent_path(), manifest_path.string());
}

inline void write_manifest(std::ostream& os, const Cohort& c) {
  os << "#maxima";
  for (double m : c.maxima()) os << ',' << format_exact(m);
  os << '\n' << manifest_header() << '\n';
  for (const auto& s : c.subjects()) {
    os << s.subject_id << ',' << to_string(s.group) << ',' << format_exact(s.age)
       << ',' << to_string(s.sex) << ',' << s.volume_path;
    for (double q : s.scores_m24.q) os << ',' << format_exact(q);
    os << '\n';
  }
}

inline void write_manifest(const std::filesystem::path& path, const Cohort& c) {
  std::ofstream os(path, std::ios::trunc);
  require(static_cast<bool>(os), ErrorKind::data,
          "cannot write manifest '" + path.string() + "'");
  write_manifest(os, c);
}

// ---------------------------------------------------------------------------
// Subject-level split
// ---------------------------------------------------------------------------

struct SplitSpec {
  std::vector<std::string> train_ids;  ///< cohort order
  std::vector<std::string> val_ids;    ///< cohort order
  std::uint64_t seed = 0;
  double ratio = 0.8;

  friend bool operator==(const SplitSpec&, const SplitSpec&) = default;
};

/// Stratified (per group) subject split.
///
/// Each group gets round_half_even(ratio * n_g) training subjects; the rest go
/// to validation. If the per-group counts do not add up to
/// round_half_even(ratio * N), the difference is moved through the groups with
/// the largest rounding residue. Both sides are kept non-empty.
inline SplitSpec subject_split(const Cohort& c, double ratio, std::uint64_t seed,
                               bool stratify = true) {
  require(ratio > 0.0 && ratio < 1.0, ErrorKind::usage,
          "split ratio must be in (0, 1)");
  require(c.size() >= 2, ErrorKind::data, "cohort needs at least 2 subjects to split");

  std::vector<std::vector<std::size_t>> strata;
  if (stratify) {
    std::map<Group, std::vector<std::size_t>> by_group;
    for (std::size_t i = 0; i < c.size(); ++i)
      by_group[c.subjects()[i].group].push_back(i);
    for (auto& [g, idx] : by_group) {
      require(idx.size() >= 2, ErrorKind::data,
              std::string("group ") + to_string(g) +
                  " has fewer than 2 subjects; cannot stratify");
      strata.push_back(std::move(idx));
    }
  } else {
    std::vector<std::size_t> all(c.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    strata.push_back(std::move(all));
  }

  const auto n_total = static_cast<long long>(c.size());
  const long long target =
      std::clamp(round_half_even(ratio * static_cast<double>(n_total)), 1LL, n_total - 1);

  std::vector<long long> take(strata.size());
  long long sum = 0;
  for (std::size_t s = 0; s < strata.size(); ++s) {
    take[s] = round_half_even(ratio * static_cast<double>(strata[s].size()));
    sum += take[s];
  }
  while (sum != target) {
    const int dir = sum < target ? 1 : -1;
    std::size_t best = strata.size();
    double best_res = 0.0;
    for (std::size_t s = 0; s < strata.size(); ++s) {
      const auto n = static_cast<long long>(strata[s].size());
      if (dir > 0 && take[s] >= n) continue;
      if (dir < 0 && take[s] <= 0) continue;
      const double residue = dir * (ratio * static_cast<double>(n) - static_cast<double>(take[s]));
      if (best == strata.size() || residue > best_res) {
        best = s;
        best_res = residue;
      }
    }
    take[best] += dir;
    sum += dir;
  }

  std::vector<bool> in_train(c.size(), false);
  for (std::size_t s = 0; s < strata.size(); ++s) {
    auto idx = strata[s];
    Rng rng = Rng::stream(seed, s, 0x5b117);
    rng.shuffle(idx.begin(), idx.end());
    for (long long k = 0; k < take[s]; ++k) in_train[idx[static_cast<std::size_t>(k)]] = true;
  }

  SplitSpec out;
  out.seed = seed;
  out.ratio = ratio;
  for (std::size_t i = 0; i < c.size(); ++i)
    (in_train[i] ? out.train_ids : out.val_ids).push_back(c.subjects()[i].subject_id);
  return out;
}

/// A split that trains on every subject (no validation side).
inline SplitSpec train_on_all(const Cohort& c) {
  SplitSpec s;
  s.ratio = 1.0;
  for (const auto& r : c.subjects()) s.train_ids.push_back(r.subject_id);
  return s;
}

inline nlohmann::json to_json(const SplitSpec& s) {
  return {{"seed", s.seed}, {"ratio", s.ratio}, {"train_ids", s.train_ids},
          {"val_ids", s.val_ids}};
}

inline SplitSpec split_from_json(const nlohmann::json& j) {
  try {
    SplitSpec s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.ratio = j.at("ratio").get<double>();
    s.train_ids = j.at("train_ids").get<std::vector<std::string>>();
    s.val_ids = j.at("val_ids").get<std::vector<std::string>>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, std::string("malformed split: ") + e.what());
  }
}

/// Checks that `s` partitions exactly the ids of `c`.
inline void check_split(const Cohort& c, const SplitSpec& s) {
  std::unordered_set<std::string> train(s.train_ids.begin(), s.train_ids.end());
  require(train.size() == s.train_ids.size(), ErrorKind::data,
          "split: duplicate id in train set");
  std::unordered_set<std::string> seen = train;
  for (const auto& id : s.val_ids)
    require(seen.insert(id).second, ErrorKind::data,
            "split: id '" + id + "' appears in both train and val");
  require(seen.size() == c.size(), ErrorKind::data,
          "split does not cover the cohort");
  for (const auto& id : seen)
    require(c.contains(id), ErrorKind::data, "split: unknown id '" + id + "'");
}

}  // namespace submtl

#endif  // SUBMTL_COHORT_HPP
