#ifndef SUBMTL_OPTIM_HPP
#define SUBMTL_OPTIM_HPP

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "submtl/common.hpp"

namespace submtl {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline void validate(const AdamConfig& c) {
  require(c.learning_rate > 0.0, ErrorKind::usage, "learning_rate must be > 0");
  require(c.beta1 >= 0.0 && c.beta1 < 1.0, ErrorKind::usage, "beta1 must be in [0, 1)");
  require(c.beta2 >= 0.0 && c.beta2 < 1.0, ErrorKind::usage, "beta2 must be in [0, 1)");
  require(c.epsilon > 0.0, ErrorKind::usage, "epsilon must be > 0");
}

/// First/second moment accumulators mirroring the flat parameter buffer.
template <class T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  std::uint64_t t = 0;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, T(0)), v(n, T(0)) {}
};

/// One bias-corrected Adam update, in place.
template <class T>
void adam_step(std::span<T> params, std::span<const T> grad, AdamState<T>& s,
               const AdamConfig& cfg) {
  require(params.size() == grad.size() && s.m.size() == params.size() &&
              s.v.size() == params.size(),
          ErrorKind::data, "adam_step: shape mismatch");
  s.t += 1;
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(s.t)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(s.t)));
  const T lr = static_cast<T>(cfg.learning_rate);
  const T eps = static_cast<T>(cfg.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grad[i];
    s.m[i] = b1 * s.m[i] + (T(1) - b1) * g;
    s.v[i] = b2 * s.v[i] + (T(1) - b2) * g * g;
    const T m_hat = s.m[i] / c1;
    const T v_hat = s.v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

}  // namespace submtl

#endif  // SUBMTL_OPTIM_HPP
