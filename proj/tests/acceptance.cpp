// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Usage: acceptance <path-to-submtl-cli>

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "submtl/submtl.hpp"

namespace fs = std::filesystem;
using namespace submtl;

namespace {

std::string g_cli;
fs::path g_work;
int g_failures = 0;

void report(int id, const std::string& title, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS" : "FAIL") << "  [" << id << "] " << title << ": " << detail
            << std::endl;
  if (!ok) ++g_failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double x, int prec = 3) {
  std::ostringstream os;
  os.precision(prec);
  os << x;
  return os.str();
}

struct Run {
  int code;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = g_cli + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return {-1, "popen failed"};
  std::string out;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

Dataset synthetic_dataset(long long n_cn, long long n_mci, std::uint64_t seed) {
  SyntheticSpec s;
  s.n_cn = n_cn;
  s.n_mci = n_mci;
  s.seed = seed;
  const auto sc = generate_synthetic_cohort(s);
  std::vector<std::string> ids;
  for (const auto& r : sc.cohort.subjects()) ids.push_back(r.subject_id);
  return make_dataset(sc, ids);
}

bool rel_close(double a, double b, double tol) {
  return std::abs(a - b) <= tol * std::max(std::abs(a), std::abs(b));
}

// ---------------------------------------------------------------------------

void gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = gradcheck(ModelConfig::tiny(), 0, GradcheckOptions{});
  const double secs = seconds_since(t0);
  const bool ok = r.param_count <= 10000 && r.max_rel_error < 1e-4 && secs < 60.0;
  report(1, "gradient correctness", ok,
         "params " + std::to_string(r.param_count) + ", coordinates " +
             std::to_string(r.coordinates_checked) + ", max rel error " + fmt(r.max_rel_error) +
             " (limit 1e-4, worst " + r.worst_tensor + "), " + fmt(secs) + " s (limit 60 s)");
}

void loss_algebra() {
  Rng rng(2024);
  double worst_h = 0.0, worst_a = 0.0, worst_u = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t b = 1 + rng.below(16);
    TaskMatrix y(b), yh(b);
    for (auto& x : y.data) x = rng.normal(0.0, 4.0);
    for (auto& x : yh.data) x = rng.normal(0.0, 4.0);
    WeightConfig wc;
    for (auto& w : wc.w) w = rng.uniform(0.0, 2.0);
    const double base = total_loss(yh, y, wc);

    const double c = rng.uniform(0.01, 100.0);
    WeightConfig scaled = wc;
    for (auto& w : scaled.w) w *= c;
    const double hs = total_loss(yh, y, scaled);
    worst_h = std::max(worst_h, std::abs(hs - c * base) / std::abs(c * base));

    double sum = 0.0;
    for (double t : task_losses(yh, y, wc)) sum += t;
    worst_a = std::max(worst_a, std::abs(sum - base) / std::abs(base));

    double plain = 0.0;
    for (std::size_t j = 0; j < kNumTasks; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < b; ++i) m += (yh(i, j) - y(i, j)) * (yh(i, j) - y(i, j));
      plain += m / static_cast<double>(b);
    }
    worst_u = std::max(worst_u,
                       std::abs(total_loss(yh, y, uniform_preset()) - plain) / std::abs(plain));
  }
  const bool ok = worst_h <= 1e-12 && worst_a <= 1e-12 && worst_u <= 1e-12;
  report(2, "loss algebra", ok,
         "1000 triples, worst relative deviation: homogeneity " + fmt(worst_h) + ", additivity " +
             fmt(worst_a) + ", uniform vs sum-MSE " + fmt(worst_u) + " (limit 1e-12)");
}

void preset_fidelity() {
  const double ms = moderate_preset().sum(), ss = strong_preset().sum();
  const double m = 100.0 * emphasis_share(moderate_preset());
  const double s = 100.0 * emphasis_share(strong_preset());
  const double u = 100.0 * emphasis_share(uniform_preset());
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.1f", u);
  const bool ok = ms == 1.0 && ss == 1.0 && std::abs(m - 48.0) < 1e-9 &&
                  std::abs(s - 96.0) < 1e-9 && std::abs(u - 300.0 / 13.0) < 1e-12 &&
                  std::string(buf) == "23.1";
  report(3, "preset fidelity", ok,
         "sums moderate " + fmt(ms, 17) + ", strong " + fmt(ss, 17) + "; Q1+Q4+Q8 shares " +
             fmt(m, 6) + "%, " + fmt(s, 6) + "%, uniform " + buf + "%");
}

void metrics_oracle() {
  Rng rng(77);
  double worst = 0.0, worst_affine = 0.0;
  bool ordered = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(99);
    const double scale = std::pow(10.0, rng.uniform(-1.0, 1.5));
    std::vector<double> y(n), h(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = rng.normal(0.0, scale);
      h[i] = 0.6 * y[i] + rng.normal(0.0, scale);
    }

    long double abs_sum = 0, sq_sum = 0, my = 0, mh = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const long double d = static_cast<long double>(y[i]) - h[i];
      abs_sum += std::fabs(d);
      sq_sum += d * d;
      my += y[i];
      mh += h[i];
    }
    my /= n;
    mh /= n;
    long double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sxy += (y[i] - my) * (h[i] - mh);
      sxx += (y[i] - my) * (y[i] - my);
      syy += (h[i] - mh) * (h[i] - mh);
    }
    const double bf_mae = static_cast<double>(abs_sum / n);
    const double bf_rmse = static_cast<double>(std::sqrt(sq_sum / n));
    const double bf_r = static_cast<double>(sxy / std::sqrt(sxx * syy));

    const double a = mae(y, h), b = rmse(y, h);
    const auto r = pearson_r(y, h);
    if (!r) {
      worst = std::numeric_limits<double>::infinity();
      continue;
    }
    worst = std::max({worst, std::abs(a - bf_mae), std::abs(b - bf_rmse), std::abs(*r - bf_r)});
    ordered = ordered && a <= b;

    const double k = std::pow(10.0, rng.uniform(-1.0, 1.0)), off = rng.uniform(-50.0, 50.0);
    std::vector<double> ya(n), ha(n);
    for (std::size_t i = 0; i < n; ++i) {
      ya[i] = k * y[i] + off;
      ha[i] = k * h[i] - off;
    }
    worst_affine = std::max({worst_affine, std::abs(*pearson_r(ya, h) - *r),
                             std::abs(*pearson_r(y, ha) - *r)});
  }
  const bool ok = worst <= 1e-9 && ordered && worst_affine <= 1e-12;
  report(4, "metrics oracle", ok,
         "1000 vectors, worst deviation from brute force " + fmt(worst) +
             " (limit 1e-9), MAE <= RMSE " + (ordered ? "always" : "VIOLATED") +
             ", affine invariance " + fmt(worst_affine) + " (limit 1e-12)");
}

void head_isolation() {
  const auto d = synthetic_dataset(5, 5, 21);
  const std::set<int> frozen{1, 2, 5, 12};
  WeightConfig wc = moderate_preset();
  for (int j : frozen) wc.w[static_cast<std::size_t>(j)] = 0.0;
  TrainConfig t;
  t.batch_size = 2;
  t.epochs = 10;
  t.seed = 9;
  t.weights = wc;
  const std::size_t steps = t.epochs * ((d.size() + t.batch_size - 1) / t.batch_size);
  const auto res = train(d, Dataset{}, ModelConfig::tiny(), t);
  const auto init = init_params<float>(ModelConfig::tiny(), t.seed);

  std::size_t checked = 0, moved_heads = 0, active_heads = 0;
  bool ok = steps == 50;
  for (const auto& ts : init.layout->tensors()) {
    if (ts.head < 0) continue;
    const bool same = std::memcmp(res.params.values.data() + ts.offset,
                                  init.values.data() + ts.offset, ts.size * sizeof(float)) == 0;
    if (frozen.count(ts.head)) {
      ok = ok && same;
      ++checked;
    } else {
      ++active_heads;
      if (!same) ++moved_heads;
    }
  }
  ok = ok && moved_heads == active_heads;
  report(5, "head isolation", ok,
         std::to_string(steps) + " steps, " + std::to_string(checked) +
             " tensors of zero-weight heads {Q2,Q3,Q6,Q13} bit-identical; " +
             std::to_string(moved_heads) + "/" + std::to_string(active_heads) +
             " tensors of weighted heads moved");
}

void overfit_capacity() {
  const auto d = synthetic_dataset(4, 4, 11);
  TrainConfig t;
  t.epochs = 200;
  t.batch_size = 1;
  t.adam.learning_rate = 1e-3;
  t.seed = 1;
  t.weights = strong_preset();
  t.threads = default_threads();
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = train(d, Dataset{}, ModelConfig::tiny(), t);
  const double secs = seconds_since(t0);
  const double ratio = res.history.final_train_loss / res.history.initial.train_loss;
  const double best = res.history.min_train_loss() / res.history.initial.train_loss;
  const bool ok = d.size() == 8 && ratio < 0.05 && secs < 300.0;
  report(6, "overfit capacity", ok,
         "8 subjects 32^3, tiny model, strong preset, 200 epochs: final/initial loss " +
             fmt(100.0 * ratio) + "% (limit 5%, best epoch " + fmt(100.0 * best) + "%), " +
             fmt(secs) + " s (limit 300 s)");
}

void split_hygiene() {
  SyntheticSpec s;
  s.dims = {8, 8, 8};
  s.seed = 3;
  const auto sc = generate_synthetic_cohort(s);
  const auto& subjects = sc.cohort.subjects();
  std::map<std::string, Group> group_of;
  std::map<Group, long long> group_n;
  for (const auto& r : subjects) {
    group_of[r.subject_id] = r.group;
    ++group_n[r.group];
  }
  bool ok = subjects.size() == 258;
  std::string why;
  for (std::uint64_t seed = 0; seed < 100 && ok; ++seed) {
    const auto sp = subject_split(sc.cohort, 0.8, seed);
    std::set<std::string> tr(sp.train_ids.begin(), sp.train_ids.end());
    std::set<std::string> va(sp.val_ids.begin(), sp.val_ids.end());
    std::set<std::string> all = tr;
    all.insert(va.begin(), va.end());
    std::map<Group, long long> in_train;
    for (const auto& id : sp.train_ids) ++in_train[group_of.at(id)];
    const bool disjoint = all.size() == tr.size() + va.size();
    const bool covers = all.size() == subjects.size() && tr.size() == sp.train_ids.size() &&
                        va.size() == sp.val_ids.size();
    const bool sizes = sp.train_ids.size() == 206 && sp.val_ids.size() == 52;
    bool strat = true;
    for (const auto& [g, n] : group_n)
      strat = strat && in_train[g] == round_half_even(0.8 * static_cast<double>(n));
    if (!(disjoint && covers && sizes && strat)) {
      ok = false;
      why = ", seed " + std::to_string(seed) + " broke " +
            (!disjoint ? "disjointness" : !covers ? "coverage" : !sizes ? "sizes" : "strata");
    }
  }
  report(7, "split hygiene", ok,
         "100 seeds on 258 subjects (CN " + std::to_string(group_n[Group::CN]) + ", MCI " +
             std::to_string(group_n[Group::MCI]) +
             "): disjoint, covering, 206/52, per-group train counts CN " +
             std::to_string(round_half_even(0.8 * group_n[Group::CN])) + " MCI " +
             std::to_string(round_half_even(0.8 * group_n[Group::MCI])) + why);
}

void weight_derivation() {
  const auto dir = g_work / "derive";
  auto r = cli("synth --cn 163 --mci 95 --seed 7 --out " + (dir / "cohort").string());
  if (r.code != 0) {
    report(8, "weight derivation", false, "synth exited " + std::to_string(r.code) + ": " + r.out);
    return;
  }
  const auto out = dir / "derived.json";
  r = cli("derive-weights --manifest " + (dir / "cohort" / "manifest.csv").string() +
          " --top-k 3 --high 0.32 --low 0.004 --out " + out.string());
  if (r.code != 0) {
    report(8, "weight derivation", false,
           "derive-weights exited " + std::to_string(r.code) + ": " + r.out);
    return;
  }
  std::vector<std::string> picked;
  for (const auto& l : lines_of(r.out))
    if (l.size() > 1 && l[0] == 'Q' && l.find('*') != std::string::npos)
      picked.push_back(l.substr(0, l.find(' ')));
  const std::vector<std::string> want{"Q1", "Q4", "Q8"};
  const bool same_bytes = slurp(out) == weights_file_text(strong_preset());
  report(8, "weight derivation", picked == want && same_bytes,
         "cohort 163 CN + 95 MCI, selected {" +
             [&] {
               std::string s;
               for (const auto& p : picked) s += (s.empty() ? "" : ", ") + p;
               return s;
             }() +
             "} (want {Q1, Q4, Q8}), emitted config " +
             (same_bytes ? "byte-identical to" : "DIFFERS from") + " the strong preset");
}

void determinism() {
  const auto dir = g_work / "determinism";
  auto r = cli("synth --cn 6 --mci 4 --seed 5 --out " + (dir / "cohort").string());
  if (r.code != 0) {
    report(9, "determinism", false, "synth exited " + std::to_string(r.code) + ": " + r.out);
    return;
  }
  const std::string flags = "train --manifest " + (dir / "cohort" / "manifest.csv").string() +
                            " --preset strong --epochs 2 --batch-size 4 --seed 13 "
                            "--split-seed 4 --threads 1 --out ";
  const auto a = cli(flags + (dir / "a").string());
  const auto b = cli(flags + (dir / "b").string());
  if (a.code != 0 || b.code != 0) {
    report(9, "determinism", false, "train exited " + std::to_string(a.code) + "/" +
                                        std::to_string(b.code) + ": " + a.out + b.out);
    return;
  }
  std::string detail = "default model, 2 epochs, two runs:";
  bool ok = true;
  for (const char* f : {"history.csv", "checkpoint.json", "checkpoint.json.bin"}) {
    const auto x = slurp(dir / "a" / f), y = slurp(dir / "b" / f);
    const bool same = !x.empty() && x == y;
    ok = ok && same;
    detail += std::string(" ") + f + (same ? " identical" : " DIFFERS") + " (" +
              std::to_string(x.size()) + " B)";
  }
  report(9, "determinism", ok, detail);
}

void ablation_shape() {
  const auto dir = g_work / "ablate";
  auto r = cli("synth --cn 5 --mci 5 --seed 6 --out " + (dir / "cohort").string());
  if (r.code != 0) {
    report(10, "ablation harness shape", false, "synth exited " + std::to_string(r.code));
    return;
  }
  r = cli("ablate --manifest " + (dir / "cohort" / "manifest.csv").string() +
          " --model tiny --epochs 2 --seed 3 --split-seed 2 --out " + (dir / "out").string());
  if (r.code != 0) {
    report(10, "ablation harness shape", false,
           "ablate exited " + std::to_string(r.code) + ": " + r.out);
    return;
  }
  const auto rows = lines_of(slurp(dir / "out" / "ablation.csv"));
  const std::string trained = std::string(kTrainedSource) + ",";
  const std::string lit = std::string(kLiteratureSource) + ",";
  std::vector<std::string> trained_names;
  std::size_t lit_rows = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].rfind(trained, 0) == 0) {
      const auto rest = rows[i].substr(trained.size());
      trained_names.push_back(rest.substr(0, rest.find(',')));
    } else if (rows[i].rfind(lit, 0) == 0) {
      ++lit_rows;
    }
  }
  const std::string table4[] = {
      lit + "strong,Q1/Q4/Q8=0.32 others=0.004,4.4900,5.2900,0.2100",
      lit + "moderate,Q1/Q4/Q8=0.16 others=0.052,4.5200,5.1600,0.2400",
      lit + "uniform,all=1,4.5800,5.2800,0.1300"};
  bool t4 = true;
  for (const auto& want : table4) t4 = t4 && std::find(rows.begin(), rows.end(), want) != rows.end();

  const auto sg = slurp(dir / "out" / "subgroups.csv");
  const std::string table5[] = {
      lit + "CN,strong,3.9400,4.7400,0.1000,",      lit + "CN,moderate,4.0800,4.6200,0.3000,",
      lit + "CN,dirty-model,3.1800,n/a,0.0800,",    lit + "MCI,strong,5.3200,6.0200,0.2700,",
      lit + "MCI,moderate,5.1800,5.8700,0.1500,",   lit + "MCI,dirty-model,5.0600,n/a,0.3700,"};
  bool t5 = true;
  for (const auto& want : table5) t5 = t5 && sg.find(want + "\n") != std::string::npos;

  const bool ok = rows.size() == 7 && rows[0] == kAblationHeader &&
                  trained_names == std::vector<std::string>{"strong", "moderate", "uniform"} &&
                  lit_rows == 3 && t4 && t5;
  report(10, "ablation harness shape", ok,
         std::to_string(trained_names.size()) + " trained rows (strong, moderate, uniform), " +
             std::to_string(lit_rows) + " reference rows labelled '" + kLiteratureSource +
             "' with published values " + (t4 ? "matching" : "MISMATCHED") +
             " (strong 4.4900/5.2900/0.2100), subgroup references " +
             (t5 ? "matching" : "MISMATCHED"));
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <path-to-submtl-cli>\n";
    return 2;
  }
  g_cli = argv[1];
  g_work = fs::temp_directory_path() / "submtl_acceptance";
  fs::remove_all(g_work);
  fs::create_directories(g_work);

  const std::pair<const char*, void (*)()> criteria[] = {
      {"gradient correctness", gradient_correctness},
      {"loss algebra", loss_algebra},
      {"preset fidelity", preset_fidelity},
      {"metrics oracle", metrics_oracle},
      {"head isolation", head_isolation},
      {"overfit capacity", overfit_capacity},
      {"split hygiene", split_hygiene},
      {"weight derivation", weight_derivation},
      {"determinism", determinism},
      {"ablation harness shape", ablation_shape},
  };
  int id = 0;
  for (const auto& [title, fn] : criteria) {
    ++id;
    try {
      fn();
    } catch (const std::exception& e) {
      report(id, title, false, std::string("threw: ") + e.what());
    }
  }
  std::cout << (g_failures == 0 ? "all 10 criteria passed" : std::to_string(g_failures) +
                                                                  " criteria failed")
            << std::endl;
  return g_failures == 0 ? 0 : 1;
}
