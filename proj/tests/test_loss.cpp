#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "submtl/loss.hpp"
#include "submtl/metrics.hpp"

using namespace submtl;

namespace {

TaskMatrix random_matrix(Rng& r, std::size_t b, double sd) {
  TaskMatrix m(b);
  for (auto& x : m.data) x = r.normal(0.0, sd);
  return m;
}

ScoreVector scores(const TaskArray& q) { return {q, kDefaultMaxima}; }

}  // namespace

TEST(WeightedMse, Examples) {
  const std::vector<double> t{0.0, 0.0}, p{1.0, 3.0};
  EXPECT_EQ(weighted_mse_task(p, t, 1.0), 5.0);
  EXPECT_DOUBLE_EQ(weighted_mse_task(p, t, 0.32), 1.6);
  EXPECT_EQ(weighted_mse_task(p, p, 0.7), 0.0);
  EXPECT_EQ(weighted_mse_task(p, t, 0.0), 0.0);
  EXPECT_THROW(weighted_mse_task(p, std::vector<double>{1.0}, 1.0), Error);
  EXPECT_THROW(weighted_mse_task({}, {}, 1.0), Error);
}

TEST(TotalLoss, StrongPresetUnitErrors) {
  TaskMatrix y(1), yh(1);
  for (std::size_t j = 0; j < kNumTasks; ++j) yh(0, j) = 1.0;
  EXPECT_NEAR(total_loss(yh, y, strong_preset()), 1.0, 1e-15);
  EXPECT_EQ(total_loss(y, y, strong_preset()), 0.0);
}

TEST(TotalLoss, AlgebraicProperties) {
  Rng r(10);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 1 + r.below(8);
    const auto y = random_matrix(r, b, 3.0), yh = random_matrix(r, b, 3.0);
    WeightConfig wc;
    for (auto& w : wc.w) w = r.uniform(0.0, 2.0);
    const double base = total_loss(yh, y, wc);

    const double c = r.uniform(0.0, 10.0);
    WeightConfig scaled = wc;
    for (auto& w : scaled.w) w *= c;
    EXPECT_NEAR(total_loss(yh, y, scaled), c * base, 1e-12 * std::max(1.0, c * base));

    const auto terms = task_losses(yh, y, wc);
    double s = 0.0;
    for (double t : terms) s += t;
    EXPECT_EQ(base, s);

    double plain = 0.0;
    for (std::size_t j = 0; j < kNumTasks; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < b; ++i) m += (y(i, j) - yh(i, j)) * (y(i, j) - yh(i, j));
      plain += m / static_cast<double>(b);
    }
    EXPECT_NEAR(total_loss(yh, y, uniform_preset()), plain, 1e-12 * std::max(1.0, plain));
    EXPECT_GE(base, 0.0);
  }
}

TEST(Presets, SumsAndShares) {
  EXPECT_EQ(uniform_preset().sum(), 13.0);
  EXPECT_EQ(moderate_preset().sum(), 1.0);
  EXPECT_EQ(strong_preset().sum(), 1.0);
  EXPECT_NEAR(100.0 * emphasis_share(moderate_preset()), 48.0, 1e-9);
  EXPECT_NEAR(100.0 * emphasis_share(strong_preset()), 96.0, 1e-9);
  EXPECT_NEAR(100.0 * emphasis_share(uniform_preset()), 300.0 / 13.0, 1e-9);
  const auto s = strong_preset();
  for (std::size_t j = 0; j < kNumTasks; ++j)
    EXPECT_EQ(s.w[j], (j == 0 || j == 3 || j == 7) ? 0.32 : 0.004);
}

TEST(Presets, ResolveByNameAndValidation) {
  EXPECT_EQ(preset_by_name("moderate")->w, moderate_preset().w);
  EXPECT_FALSE(preset_by_name("heavy").has_value());
  WeightConfig zero;
  EXPECT_THROW(validate(zero), Error);
  WeightConfig neg = uniform_preset();
  neg.w[2] = -0.1;
  EXPECT_THROW(validate(neg), Error);
}

TEST(WeightJson, RoundTripAndArity) {
  const auto wc = moderate_preset();
  EXPECT_EQ(weights_from_json(to_json(wc)), wc);
  auto j = to_json(wc);
  j["w"].erase(j["w"].size() - 1);
  try {
    weights_from_json(j);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::usage);
    EXPECT_NE(std::string(e.what()).find("12"), std::string::npos);
  }
  const auto path = std::filesystem::temp_directory_path() / "submtl_w.json";
  save_weights(path, strong_preset());
  EXPECT_EQ(resolve_weights(path.string()), strong_preset());
  EXPECT_EQ(resolve_weights("uniform"), uniform_preset());
  EXPECT_THROW(resolve_weights("/nonexistent/w.json"), Error);
}

TEST(Correlation, MatchesPearsonAndFlagsConstants) {
  Rng r(12);
  std::vector<ScoreVector> s;
  for (int i = 0; i < 40; ++i) {
    TaskArray q{};
    for (std::size_t j = 0; j < kNumTasks; ++j) q[j] = r.uniform(0.0, 4.0);
    q[5] = 2.0;  // constant item
    s.push_back(scores(q));
  }
  const auto t = correlation_table(s);
  EXPECT_TRUE(t.constant[5]);
  EXPECT_EQ(t.r[5], 0.0);
  for (std::size_t j = 0; j < kNumTasks; ++j) {
    if (j == 5) continue;
    std::vector<double> a, g;
    for (const auto& v : s) {
      a.push_back(v.q[j]);
      g.push_back(v.global());
    }
    EXPECT_NEAR(t.r[j], *pearson_r(a, g), 1e-12);
  }
}

TEST(DeriveWeights, HalfGlobalItemIsSelected) {
  // q1 is built so that it equals half the global score exactly.
  Rng r(13);
  std::vector<ScoreVector> s;
  for (int i = 0; i < 60; ++i) {
    TaskArray q{};
    double rest = 0.0;
    for (std::size_t j = 1; j < kNumTasks; ++j) {
      q[j] = std::round(r.uniform(0.0, 4.0));
      rest += q[j];
    }
    q[0] = rest;
    s.push_back({q, {60, 5, 5, 5, 5, 8, 12, 5, 5, 5, 5, 10, 5}});
  }
  const auto d = derive_weights(s, 1, 0.9, 0.1);
  ASSERT_EQ(d.selected, std::vector<std::size_t>{0});
  EXPECT_NEAR(d.table.r[0], 1.0, 1e-12);
  EXPECT_EQ(d.weights.w[0], 0.9);
  EXPECT_EQ(d.weights.w[1], 0.1);
}

TEST(DeriveWeights, TopThreeGivesStrongPresetWithName) {
  // Items 1, 4 and 8 carry a shared factor; the rest are small noise.
  Rng r(14);
  std::vector<ScoreVector> s;
  for (int i = 0; i < 100; ++i) {
    const double z = r.uniform(0.0, 4.0);
    TaskArray q{};
    for (std::size_t j = 0; j < kNumTasks; ++j) q[j] = r.uniform(0.0, 0.3);
    q[0] += z;
    q[3] += z;
    q[7] += z;
    s.push_back(scores(q));
  }
  const auto d = derive_weights(s, 3, 0.32, 0.004);
  EXPECT_EQ(d.selected, (std::vector<std::size_t>{0, 3, 7}));
  EXPECT_EQ(d.weights, strong_preset());
  EXPECT_EQ(weights_file_text(d.weights), weights_file_text(strong_preset()));
  const auto other = derive_weights(s, 3, 0.5, 0.1);
  EXPECT_EQ(other.weights.name, "derived");
}

TEST(DeriveWeights, TiesGoToLowerIndex) {
  std::vector<ScoreVector> s;
  for (int i = 0; i < 10; ++i) {
    TaskArray q{};
    q[2] = i % 5;  // identical to q[6]
    q[6] = i % 5;
    q[11] = 0.5 * (i % 2);
    s.push_back(scores(q));
  }
  const auto d = derive_weights(s, 1, 1.0, 0.0);
  EXPECT_EQ(d.table.r[2], d.table.r[6]);
  EXPECT_EQ(d.selected, std::vector<std::size_t>{2});
}

TEST(DeriveWeights, SelectionUsesAbsoluteCorrelation) {
  // q1 falls as the global rises; q6 rises weakly.
  std::vector<ScoreVector> s;
  TaskArray wide;
  wide.fill(40.0);
  for (int i = 0; i < 10; ++i) {
    const double k = i % 5;
    TaskArray q{};
    q[0] = 4 - k;
    q[2] = 3 * k;
    q[5] = 2 * (i % 2);
    s.push_back({q, wide});
  }
  const auto d = derive_weights(s, 2, 1.0, 0.0);
  EXPECT_LT(d.table.r[0], -0.9);
  EXPECT_NEAR(d.table.r[5], 1.0 / 3.0, 1e-12);
  EXPECT_EQ(d.selected, (std::vector<std::size_t>{0, 2}));
}

TEST(DeriveWeights, Preconditions) {
  std::vector<ScoreVector> constant(5, scores(TaskArray{}));
  EXPECT_THROW(derive_weights(constant, 3, 0.32, 0.004), Error);
  std::vector<ScoreVector> one(1, scores(TaskArray{}));
  EXPECT_THROW(derive_weights(one, 3, 0.32, 0.004), Error);
  std::vector<ScoreVector> ok{scores({1}), scores({2})};
  EXPECT_THROW(derive_weights(ok, 0, 0.32, 0.004), Error);
  EXPECT_THROW(derive_weights(ok, 14, 0.32, 0.004), Error);
}
