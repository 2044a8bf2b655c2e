// submtl: command-line driver for synthetic cohorts, training, evaluation,
// weight ablation, gradient checking and correlation-based weight derivation.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "submtl/submtl.hpp"

namespace fs = std::filesystem;
using namespace submtl;

namespace {

struct ModelOptions {
  std::string preset = "default";
  std::optional<std::uint32_t> patch;
  std::optional<std::size_t> embed_dim;
  std::optional<std::size_t> depth;
  std::optional<std::size_t> heads;
  std::optional<std::size_t> mlp_ratio;
  std::optional<std::size_t> head_hidden;

  void attach(CLI::App* cmd, const std::string& default_preset) {
    preset = default_preset;
    cmd->add_option("--model", preset, "Model preset")
        ->check(CLI::IsMember({"default", "tiny"}))
        ->capture_default_str();
    cmd->add_option("--patch", patch, "Cubic patch edge length");
    cmd->add_option("--embed-dim", embed_dim, "Token width");
    cmd->add_option("--depth", depth, "Number of transformer blocks");
    cmd->add_option("--heads", heads, "Attention heads per block");
    cmd->add_option("--mlp-ratio", mlp_ratio, "MLP hidden width / token width");
    cmd->add_option("--head-hidden", head_hidden, "Hidden width of each task head (0 = affine)");
  }

  ModelConfig resolve(Dims input) const {
    ModelConfig c = preset == "tiny" ? ModelConfig::tiny() : ModelConfig::desk_default();
    if (patch) c.patch_size = *patch;
    if (embed_dim) c.embed_dim = *embed_dim;
    if (depth) c.depth = *depth;
    if (heads) c.n_heads = *heads;
    if (mlp_ratio) c.mlp_ratio = *mlp_ratio;
    if (head_hidden) c.head_hidden = *head_hidden;
    c.input_dims = input;
    validate(c);
    return c;
  }
};

struct TrainOptions {
  std::size_t epochs = 100;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  bool no_shuffle = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--epochs", epochs, "Training epochs")->capture_default_str();
    cmd->add_option("--batch-size", batch_size, "Mini-batch size")->capture_default_str();
    cmd->add_option("--lr", lr, "Adam learning rate")->capture_default_str();
    cmd->add_option("--beta1", beta1)->capture_default_str();
    cmd->add_option("--beta2", beta2)->capture_default_str();
    cmd->add_option("--eps", eps)->capture_default_str();
    cmd->add_option("--seed", seed, "Init and shuffle seed")->required();
    cmd->add_flag("--no-shuffle", no_shuffle, "Keep subject order fixed");
  }

  TrainConfig resolve(unsigned threads) const {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.adam = {lr, beta1, beta2, eps};
    t.seed = seed;
    t.shuffle = !no_shuffle;
    t.threads = threads;
    return t;
  }
};

struct SplitOptions {
  std::string split_path;
  double ratio = 0.8;
  std::optional<std::uint64_t> split_seed;
  bool no_stratify = false;

  void attach(CLI::App* cmd) {
    auto* file = cmd->add_option("--split", split_path, "Existing split JSON");
    auto* seed = cmd->add_option("--split-seed", split_seed, "Seed for a fresh split");
    cmd->add_option("--ratio", ratio, "Training fraction for a fresh split")->capture_default_str();
    cmd->add_flag("--no-stratify", no_stratify, "Split without per-group stratification");
    file->excludes(seed);
  }

  SplitSpec resolve(const Cohort& c) const {
    if (!split_path.empty()) {
      auto s = split_from_json(read_json(split_path));
      check_split(c, s);
      return s;
    }
    require(split_seed.has_value(), ErrorKind::usage, "either --split or --split-seed is required");
    return subject_split(c, ratio, *split_seed, !no_stratify);
  }

  static nlohmann::json read_json(const fs::path& path) {
    std::ifstream is(path);
    require(static_cast<bool>(is), ErrorKind::data, "'" + path.string() + "' not found");
    try {
      nlohmann::json j;
      is >> j;
      return j;
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::data, "'" + path.string() + "': " + e.what());
    }
  }
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec && fs::is_directory(dir), ErrorKind::data,
          "cannot create output directory '" + dir.string() + "'");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::data, "cannot write '" + path.string() + "'");
  os << text;
  require(static_cast<bool>(os), ErrorKind::data, "write to '" + path.string() + "' failed");
}

template <class Fn>
void write_with(const fs::path& path, Fn&& fn) {
  std::ostringstream os;
  fn(os);
  write_text(path, os.str());
}

WeightConfig weights_from_flags(const std::string& preset, const std::string& path) {
  if (!path.empty()) return load_weights(path);
  auto p = preset_by_name(preset);
  require(p.has_value(), ErrorKind::usage, "unknown preset '" + preset + "'");
  return *p;
}

std::string mean_sd(const std::vector<double>& xs) {
  if (xs.empty()) return "n/a";
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  const double sd = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1)) : 0.0;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f +- %.4f", m, sd);
  return buf;
}

/// Per-group counts, sex split, age and global score, one row per group.
std::string cohort_summary(const Cohort& c) {
  std::ostringstream os;
  os << "group  n    sex(M/F)  age                 global (Month 24)\n";
  for (Group g : {Group::CN, Group::MCI}) {
    std::vector<double> ages, globals;
    std::size_t male = 0;
    for (const auto& s : c.subjects()) {
      if (s.group != g) continue;
      ages.push_back(s.age);
      globals.push_back(s.scores_m24.global());
      male += s.sex == Sex::M;
    }
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-6s %-4zu %-9s %-19s %s\n", to_string(g), ages.size(),
                  (std::to_string(male) + "/" + std::to_string(ages.size() - male)).c_str(),
                  mean_sd(ages).c_str(), mean_sd(globals).c_str());
    os << buf;
  }
  return os.str();
}

Dims cohort_dims(const Dataset& d) {
  require(!d.empty(), ErrorKind::data, "no subjects to read volume dimensions from");
  return d.volumes.front().dims;
}

void print_epoch(const std::string& tag, std::size_t total, const EpochRecord& r) {
  std::printf("%sepoch %zu/%zu train_loss=%s", tag.c_str(), r.epoch, total,
              format_fixed4(r.train_loss).c_str());
  if (r.val_loss)
    std::printf(" val_loss=%s val_mae=%s val_rmse=%s val_r=%s", format_fixed4(*r.val_loss).c_str(),
                format_fixed4(r.val_mae_global).c_str(), format_fixed4(r.val_rmse_global).c_str(),
                format_fixed4(r.val_r_global).c_str());
  std::printf("\n");
  std::fflush(stdout);
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    out += ch == '\n' ? ' ' : ch;
  }
  return out + "\"";
}

int report_error(ErrorKind kind, const std::string& msg) {
  std::cerr << "error: kind=" << to_string(kind) << " message=" << quote(msg) << std::endl;
  return static_cast<int>(kind);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weighted multi-task sub-score regression from 3D volumes"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "INI/TOML file with option defaults (flags override)");

  unsigned threads = 0;
  app.add_option("--threads", threads, "Worker threads (0 = auto); 1 is the serial path")
      ->envname("SUBSCORE_MTL_THREADS");
  auto thread_count = [&] { return threads == 0 ? default_threads() : threads; };

  // synth ------------------------------------------------------------------
  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort");
  SyntheticSpec sspec;
  std::vector<std::uint32_t> sdims{32, 32, 32};
  std::vector<double> corr;
  std::string synth_out;
  synth->add_option("--cn", sspec.n_cn, "Number of CN subjects")->capture_default_str();
  synth->add_option("--mci", sspec.n_mci, "Number of MCI subjects")->capture_default_str();
  synth->add_option("--seed", sspec.seed, "Generator seed")->required();
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--dims", sdims, "Volume dims D H W")->expected(3)->capture_default_str();
  synth->add_option("--patch", sspec.patch_size, "Patch size the dims must divide")
      ->capture_default_str();
  synth->add_option("--corr", corr, "13 item-to-global correlation targets")->expected(13);
  synth->add_option("--max-global", sspec.max_global, "Upper bound on the global score")
      ->capture_default_str();

  // split ------------------------------------------------------------------
  auto* split = app.add_subcommand("split", "Write a subject-level train/val split");
  std::string split_manifest, split_out;
  double split_ratio = 0.8;
  std::uint64_t split_seed = 0;
  bool split_no_strat = false;
  split->add_option("--manifest", split_manifest, "Cohort manifest CSV")->required();
  split->add_option("--out", split_out, "Output split JSON")->required();
  split->add_option("--ratio", split_ratio, "Training fraction")->capture_default_str();
  split->add_option("--seed", split_seed, "Split seed")->required();
  split->add_flag("--no-stratify", split_no_strat, "Split without per-group stratification");

  // train ------------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
  std::string train_manifest, train_out, train_preset = "uniform", train_weights;
  ModelOptions train_model;
  TrainOptions train_opts;
  SplitOptions train_split;
  train_cmd->add_option("--manifest", train_manifest, "Cohort manifest CSV")->required();
  train_cmd->add_option("--out", train_out, "Output directory")->required();
  auto* tp = train_cmd->add_option("--preset", train_preset, "uniform | moderate | strong")
                 ->capture_default_str();
  auto* tw = train_cmd->add_option("--weights", train_weights, "Weight config JSON");
  tw->excludes(tp);
  train_model.attach(train_cmd, "default");
  train_opts.attach(train_cmd);
  train_split.attach(train_cmd);

  // eval -------------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_ckpt, eval_manifest, eval_split, eval_out;
  std::string eval_subset = "val";
  std::vector<std::string> eval_formats{"csv", "txt", "svg"};
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint JSON")->required();
  eval->add_option("--manifest", eval_manifest, "Cohort manifest CSV")->required();
  eval->add_option("--split", eval_split, "Split JSON (omit to use every subject)");
  eval->add_option("--subset", eval_subset, "Which side of the split")
      ->check(CLI::IsMember({"val", "train"}))
      ->capture_default_str();
  eval->add_option("--out", eval_out, "Output directory")->required();
  eval->add_option("--format", eval_formats, "Any of csv, txt, svg")->capture_default_str();

  // ablate -----------------------------------------------------------------
  auto* ablate = app.add_subcommand("ablate", "Train strong, moderate and uniform under one seed");
  std::string ablate_manifest, ablate_out;
  ModelOptions ablate_model;
  TrainOptions ablate_opts;
  SplitOptions ablate_split;
  ablate->add_option("--manifest", ablate_manifest, "Cohort manifest CSV")->required();
  ablate->add_option("--out", ablate_out, "Output directory")->required();
  ablate_model.attach(ablate, "default");
  ablate_opts.attach(ablate);
  ablate_split.attach(ablate);

  // gradcheck --------------------------------------------------------------
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check (64-bit)");
  ModelOptions gc_model;
  GradcheckOptions gc_opts;
  std::uint64_t gc_seed = 0;
  std::vector<std::uint32_t> gc_dims{32, 32, 32};
  double gc_tol = 1e-4;
  gc_model.attach(gc, "tiny");
  gc->add_option("--seed", gc_seed, "Seed for params, inputs and targets")->capture_default_str();
  gc->add_option("--dims", gc_dims, "Input dims D H W")->expected(3)->capture_default_str();
  gc->add_option("--step", gc_opts.step, "Central-difference step")->capture_default_str();
  gc->add_option("--samples", gc_opts.samples_per_tensor, "Coordinates probed per tensor")
      ->capture_default_str();
  gc->add_option("--batch", gc_opts.batch, "Random batch size")->capture_default_str();
  gc->add_flag("--perfect-fit", gc_opts.perfect_fit, "Targets equal the predictions");
  gc->add_option("--tolerance", gc_tol, "Maximum accepted relative error")->capture_default_str();

  // derive-weights ---------------------------------------------------------
  auto* dw = app.add_subcommand("derive-weights", "Weights from item-to-global correlations");
  std::string dw_manifest, dw_out, dw_split;
  std::size_t dw_top_k = 3;
  double dw_high = 0.32, dw_low = 0.004;
  dw->add_option("--manifest", dw_manifest, "Cohort manifest CSV")->required();
  dw->add_option("--split", dw_split, "Use only the training side of this split");
  dw->add_option("--top-k", dw_top_k, "Number of emphasised items")->capture_default_str();
  dw->add_option("--high", dw_high, "Weight of the selected items")->capture_default_str();
  dw->add_option("--low", dw_low, "Weight of the other items")->capture_default_str();
  dw->add_option("--out", dw_out, "Write the weight config JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error(ErrorKind::usage, e.what());
  }

  try {
    if (*synth) {
      sspec.dims = {sdims[0], sdims[1], sdims[2]};
      if (!corr.empty()) std::copy(corr.begin(), corr.end(), sspec.corr_targets.begin());
      const auto sc = generate_synthetic_cohort(sspec);
      const auto manifest = write_synthetic_cohort(synth_out, sc);
      if (sc.cohort.empty()) std::cerr << "warning: empty cohort; manifest has no rows\n";
      std::cout << "wrote " << manifest.string() << " (" << sc.cohort.size() << " subjects)\n"
                << cohort_summary(sc.cohort);
      return 0;
    }

    if (*split) {
      const auto c = load_cohort(split_manifest);
      const auto s = subject_split(c, split_ratio, split_seed, !split_no_strat);
      write_text(split_out, to_json(s).dump(2) + "\n");
      std::cout << "train " << s.train_ids.size() << ", val " << s.val_ids.size() << "\n";
      return 0;
    }

    if (*train_cmd) {
      const auto c = load_cohort(train_manifest);
      const auto s = train_split.resolve(c);
      auto tcfg = train_opts.resolve(thread_count());
      tcfg.weights = weights_from_flags(train_preset, train_weights);
      const auto train_set = make_dataset(c, s.train_ids);
      const auto val_set = make_dataset(c, s.val_ids);
      const auto mcfg = train_model.resolve(cohort_dims(train_set));
      ensure_dir(train_out);
      const fs::path out(train_out);
      std::cout << "weights " << (tcfg.weights.name.empty() ? "custom" : tcfg.weights.name) << ": "
                << weights_summary(tcfg.weights) << "\n";
      const auto res = train(train_set, val_set, mcfg, tcfg,
                             [&](const EpochRecord& r) { print_epoch("", tcfg.epochs, r); });
      save_checkpoint(out / "checkpoint.json", res.params);
      write_with(out / "history.csv", [&](std::ostream& os) { write_history_csv(os, res.history); });
      write_text(out / "split.json", to_json(s).dump(2) + "\n");
      save_weights(out / "weights.json", tcfg.weights);
      std::cout << "initial train loss " << format_fixed4(res.history.initial.train_loss)
                << ", final " << format_fixed4(res.history.final_train_loss) << "\n";
      return 0;
    }

    if (*eval) {
      std::set<std::string> formats(eval_formats.begin(), eval_formats.end());
      for (const auto& f : formats)
        require(f == "csv" || f == "txt" || f == "svg", ErrorKind::usage,
                "unknown format '" + f + "'");
      const auto p = load_checkpoint(eval_ckpt);
      const auto c = load_cohort(eval_manifest);
      std::vector<std::string> ids;
      if (eval_split.empty()) {
        for (const auto& r : c.subjects()) ids.push_back(r.subject_id);
      } else {
        const auto s = split_from_json(SplitOptions::read_json(eval_split));
        check_split(c, s);
        ids = eval_subset == "val" ? s.val_ids : s.train_ids;
      }
      const auto rep = evaluate(p, c, ids, thread_count());
      ensure_dir(eval_out);
      const fs::path out(eval_out);
      const auto text = format_metrics_text(rep) + "\n" + subgroup_report(rep);
      if (formats.count("csv")) {
        write_with(out / "metrics.csv", [&](std::ostream& os) { write_metrics_csv(os, rep); });
        write_with(out / "scatter.csv", [&](std::ostream& os) { write_scatter_csv(os, rep); });
      }
      if (formats.count("txt")) write_text(out / "metrics.txt", text);
      if (formats.count("svg")) write_text(out / "scatter.svg", scatter_svg(rep.scatter));
      std::cout << text;
      return 0;
    }

    if (*ablate) {
      const auto c = load_cohort(ablate_manifest);
      const auto s = ablate_split.resolve(c);
      const auto tcfg = ablate_opts.resolve(thread_count());
      const auto train_set = make_dataset(c, s.train_ids);
      const auto val_set = make_dataset(c, s.val_ids);
      const auto mcfg = ablate_model.resolve(cohort_dims(train_set));
      const auto res = run_ablation(
          train_set, val_set, mcfg, tcfg, all_presets(), true,
          [&](const std::string& name, const EpochRecord& r) {
            print_epoch("[" + name + "] ", tcfg.epochs, r);
          });
      ensure_dir(ablate_out);
      const fs::path out(ablate_out);
      write_with(out / "ablation.csv", [&](std::ostream& os) { write_ablation_csv(os, res); });
      write_with(out / "subgroups.csv", [&](std::ostream& os) { write_subgroup_csv(os, res); });
      write_text(out / "split.json", to_json(s).dump(2) + "\n");
      const auto text = format_ablation_text(res);
      write_text(out / "ablation.txt", text);
      std::cout << text;
      return 0;
    }

    if (*gc) {
      const auto mcfg = gc_model.resolve({gc_dims[0], gc_dims[1], gc_dims[2]});
      const auto r = gradcheck(mcfg, gc_seed, gc_opts);
      std::cout << "params " << r.param_count << ", coordinates " << r.coordinates_checked
                << ", max relative error " << format_exact(r.max_rel_error) << " ("
                << r.worst_tensor << "[" << r.worst_index << "])\n";
      if (!(r.max_rel_error <= gc_tol))
        return report_error(ErrorKind::numeric, "gradcheck failed: max relative error " +
                                                    format_exact(r.max_rel_error) + " > " +
                                                    format_exact(gc_tol));
      return 0;
    }

    if (*dw) {
      const auto c = load_cohort(dw_manifest);
      std::vector<ScoreVector> scores;
      if (dw_split.empty()) {
        for (const auto& r : c.subjects()) scores.push_back(r.scores_m24);
      } else {
        const auto s = split_from_json(SplitOptions::read_json(dw_split));
        check_split(c, s);
        for (const auto& id : s.train_ids) scores.push_back(c.at(id).scores_m24);
      }
      const auto d = derive_weights(scores, dw_top_k, dw_high, dw_low);
      std::cout << "item  r        selected\n";
      for (std::size_t j = 0; j < kNumTasks; ++j) {
        const bool sel = std::find(d.selected.begin(), d.selected.end(), j) != d.selected.end();
        char buf[96];
        std::snprintf(buf, sizeof buf, "Q%-4zu %-8s %s%s\n", j + 1,
                      format_fixed4(d.table.r[j]).c_str(), sel ? "*" : "",
                      d.table.constant[j] ? " (constant)" : "");
        std::cout << buf;
      }
      const auto text = weights_file_text(d.weights);
      if (!dw_out.empty()) write_text(dw_out, text);
      std::cout << text;
      return 0;
    }
  } catch (const Error& e) {
    return report_error(e.kind(), e.what());
  } catch (const std::exception& e) {
    return report_error(ErrorKind::data, e.what());
  }
  return 0;
}
