#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "submtl/submtl.hpp"

namespace fs = std::filesystem;
using namespace submtl;

namespace {

struct Run {
  int code;
  std::string out;
};

Run run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + SUBMTL_CLI_PATH + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
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

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "submtl_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    const auto r = run("synth --cn 5 --mci 4 --seed 3 --out " + (dir_ / "cohort").string());
    ASSERT_EQ(r.code, 0) << r.out;
  }
  static std::string manifest() { return (dir_ / "cohort" / "manifest.csv").string(); }
  static fs::path dir_;
};

fs::path Cli::dir_;

}  // namespace

TEST_F(Cli, SynthIsDeterministicAndPrintsSummary) {
  const auto r = run("synth --cn 5 --mci 4 --seed 3 --out " + (dir_ / "again").string());
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("CN     5"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("MCI    4"), std::string::npos);
  EXPECT_EQ(slurp(dir_ / "again" / "manifest.csv"), slurp(manifest()));
  EXPECT_EQ(slurp(dir_ / "again" / "volumes" / "S0007.vol"),
            slurp(dir_ / "cohort" / "volumes" / "S0007.vol"));
}

TEST_F(Cli, EmptySynthWarns) {
  const auto r = run("synth --cn 0 --mci 0 --seed 1 --out " + (dir_ / "empty").string());
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("warning"), std::string::npos);
  EXPECT_EQ(load_cohort(dir_ / "empty" / "manifest.csv").size(), 0u);
}

TEST_F(Cli, ExitCodesAndMachineReadableErrors) {
  EXPECT_EQ(run("--help").code, 0);
  auto r = run("train --manifest " + manifest());
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.out.rfind("error: kind=usage message=\"", 0), 0u) << r.out;

  r = run("split --manifest " + (dir_ / "nope.csv").string() + " --seed 1 --out x.json");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.out.rfind("error: kind=data", 0), 0u) << r.out;

  std::ofstream(dir_ / "w12.json") << R"({"name":"bad","w":[1,1,1,1,1,1,1,1,1,1,1,1]})";
  r = run("train --manifest " + manifest() + " --out " + (dir_ / "t12").string() +
          " --weights " + (dir_ / "w12.json").string() + " --seed 1 --split-seed 1 --model tiny");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("13 entries"), std::string::npos) << r.out;

  r = run("train --manifest " + manifest() + " --out " + (dir_ / "tp").string() +
          " --preset heavy --seed 1 --split-seed 1 --model tiny");
  EXPECT_EQ(r.code, 1);
}

TEST_F(Cli, GradcheckPassesAndFailsWithNumericCode) {
  const auto ok = run("gradcheck --dims 16 16 16 --seed 1");
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_NE(ok.out.find("max relative error"), std::string::npos);
  const auto strict = run("gradcheck --dims 16 16 16 --seed 1 --tolerance 1e-15");
  EXPECT_EQ(strict.code, 3) << strict.out;
  EXPECT_NE(strict.out.find("kind=numeric"), std::string::npos);
}

TEST_F(Cli, TrainEvalPipelineWritesRoundTrippableArtifacts) {
  const auto out = dir_ / "run";
  auto r = run("train --manifest " + manifest() + " --out " + out.string() +
               " --preset moderate --model tiny --epochs 2 --batch-size 2 --seed 4 "
               "--split-seed 9 --threads 1");
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* f : {"checkpoint.json", "checkpoint.json.bin", "history.csv", "split.json",
                        "weights.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  EXPECT_EQ(load_weights(out / "weights.json"), moderate_preset());
  std::ifstream hs(out / "history.csv");
  EXPECT_EQ(read_history_csv(hs).epochs.size(), 2u);

  const auto ev = dir_ / "eval";
  r = run("eval --checkpoint " + (out / "checkpoint.json").string() + " --manifest " + manifest() +
          " --split " + (out / "split.json").string() + " --out " + ev.string());
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream ms(ev / "metrics.csv");
  const auto rep = read_metrics_csv(ms);
  EXPECT_EQ(rep.n_eval, 2u);
  std::ostringstream again;
  write_metrics_csv(again, rep);
  EXPECT_EQ(again.str(), slurp(ev / "metrics.csv"));
  EXPECT_TRUE(fs::exists(ev / "scatter.svg"));
  EXPECT_NE(slurp(ev / "metrics.txt").find("Global"), std::string::npos);

  r = run("eval --checkpoint " + (out / "checkpoint.json").string() + " --manifest " + manifest() +
          " --out " + ev.string() + " --format pdf");
  EXPECT_EQ(r.code, 1);
  r = run("eval --checkpoint " + (dir_ / "none.json").string() + " --manifest " + manifest() +
          " --out " + ev.string());
  EXPECT_EQ(r.code, 2);
}

TEST_F(Cli, ConfigFileSuppliesDefaultsAndFlagsOverride) {
  std::ofstream(dir_ / "exp.ini") << "[train]\nepochs=3\nbatch-size=2\nmodel=tiny\nseed=2\n"
                                     "split-seed=5\npreset=strong\n";
  auto out = dir_ / "cfg";
  auto r = run("--config " + (dir_ / "exp.ini").string() + " train --manifest " + manifest() +
               " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream h1(out / "history.csv");
  EXPECT_EQ(read_history_csv(h1).epochs.size(), 3u);
  EXPECT_EQ(load_weights(out / "weights.json"), strong_preset());

  out = dir_ / "cfg2";
  r = run("--config " + (dir_ / "exp.ini").string() + " train --manifest " + manifest() +
          " --out " + out.string() + " --epochs 1");
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream h2(out / "history.csv");
  EXPECT_EQ(read_history_csv(h2).epochs.size(), 1u);
}

TEST_F(Cli, ThreadsEnvironmentVariableIsAccepted) {
  const auto base = "train --manifest " + manifest() +
                    " --model tiny --epochs 1 --seed 1 --split-seed 1 --out ";
  auto a = run(base + (dir_ / "th1").string(), "SUBSCORE_MTL_THREADS=1");
  auto b = run(base + (dir_ / "th3").string(), "SUBSCORE_MTL_THREADS=3");
  ASSERT_EQ(a.code, 0) << a.out;
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_EQ(slurp(dir_ / "th1" / "checkpoint.json.bin"), slurp(dir_ / "th3" / "checkpoint.json.bin"));
  EXPECT_EQ(run(base + (dir_ / "thx").string(), "SUBSCORE_MTL_THREADS=abc").code, 1);
}

TEST_F(Cli, SplitAndDeriveWeights) {
  auto r = run("split --manifest " + manifest() + " --seed 2 --out " +
               (dir_ / "split.json").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("train 7, val 2"), std::string::npos) << r.out;
  r = run("derive-weights --manifest " + manifest() + " --top-k 2 --high 0.5 --low 0.1 --out " +
          (dir_ / "dw.json").string() + " --split " + (dir_ / "split.json").string());
  ASSERT_EQ(r.code, 0) << r.out;
  const auto w = load_weights(dir_ / "dw.json");
  EXPECT_EQ(std::count(w.w.begin(), w.w.end(), 0.5), 2);
  EXPECT_NE(r.out.find("Q13"), std::string::npos);
}
