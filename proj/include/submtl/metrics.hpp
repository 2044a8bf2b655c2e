#ifndef SUBMTL_METRICS_HPP
#define SUBMTL_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>

#include "submtl/common.hpp"

namespace submtl {

namespace detail {
inline void check_pair(std::span<const double> y, std::span<const double> yhat,
                       std::size_t min_n) {
  require(y.size() == yhat.size(), ErrorKind::data, "metric: length mismatch");
  require(y.size() >= min_n, ErrorKind::data,
          "metric: need at least " + std::to_string(min_n) + " values");
}
}  // namespace detail

inline double mae(std::span<const double> y, std::span<const double> yhat) {
  detail::check_pair(y, yhat, 1);
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y[i] - yhat[i]);
  return s / static_cast<double>(y.size());
}

inline double rmse(std::span<const double> y, std::span<const double> yhat) {
  detail::check_pair(y, yhat, 1);
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double e = y[i] - yhat[i];
    s += e * e;
  }
  return std::sqrt(s / static_cast<double>(y.size()));
}

/// Pearson correlation. Empty when either series is constant.
inline std::optional<double> pearson_r(std::span<const double> y,
                                       std::span<const double> yhat) {
  detail::check_pair(y, yhat, 2);
  auto constant = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; });
  };
  if (constant(y) || constant(yhat)) return std::nullopt;
  const auto n = static_cast<double>(y.size());
  double my = 0.0, mh = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    my += y[i];
    mh += yhat[i];
  }
  my /= n;
  mh /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double a = y[i] - my;
    const double b = yhat[i] - mh;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) return std::nullopt;
  const double r = sxy / (std::sqrt(sxx) * std::sqrt(syy));
  return std::clamp(r, -1.0, 1.0);
}

/// MAE, RMSE and r for one series.
struct MetricTriple {
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> r;
  std::size_t n = 0;

  friend bool operator==(const MetricTriple&, const MetricTriple&) = default;
};

inline MetricTriple metric_triple(std::span<const double> y, std::span<const double> yhat) {
  MetricTriple m;
  m.mae = mae(y, yhat);
  m.rmse = rmse(y, yhat);
  m.r = y.size() >= 2 ? pearson_r(y, yhat) : std::nullopt;
  m.n = y.size();
  return m;
}

}  // namespace submtl

#endif  // SUBMTL_METRICS_HPP
