#ifndef SUBMTL_KERNELS_HPP
#define SUBMTL_KERNELS_HPP

#include <cmath>
#include <cstddef>
#include <span>

// Dense row-major kernels with their reverse-mode counterparts. Weight
// matrices are stored [in, out] so an affine map is y = x W + b.
namespace submtl::kernels {

/// y[m,n] = x[m,k] W[k,n] + b[n]  (b may be empty)
template <class T>
void affine(std::span<const T> x, std::span<const T> w, std::span<const T> b, std::span<T> y,
            std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* yi = y.data() + i * n;
    if (b.empty())
      for (std::size_t c = 0; c < n; ++c) yi[c] = T(0);
    else
      for (std::size_t c = 0; c < n; ++c) yi[c] = b[c];
    const T* xi = x.data() + i * k;
    for (std::size_t r = 0; r < k; ++r) {
      const T a = xi[r];
      const T* wr = w.data() + r * n;
      for (std::size_t c = 0; c < n; ++c) yi[c] += a * wr[c];
    }
  }
}

/// Accumulating backward of `affine`:
///   dx[m,k] += dy W^T   (skipped when dx is empty)
///   dW[k,n] += x^T dy
///   db[n]   += colsum(dy)   (skipped when db is empty)
template <class T>
void affine_backward(std::span<const T> x, std::span<const T> w, std::span<const T> dy,
                     std::span<T> dx, std::span<T> dw, std::span<T> db, std::size_t m,
                     std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* dyi = dy.data() + i * n;
    const T* xi = x.data() + i * k;
    for (std::size_t r = 0; r < k; ++r) {
      const T a = xi[r];
      T* dwr = dw.data() + r * n;
      const T* wr = w.data() + r * n;
      T acc = T(0);
      for (std::size_t c = 0; c < n; ++c) {
        dwr[c] += a * dyi[c];
        acc += dyi[c] * wr[c];
      }
      if (!dx.empty()) dx[i * k + r] += acc;
    }
    if (!db.empty())
      for (std::size_t c = 0; c < n; ++c) db[c] += dyi[c];
  }
}

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise layer normalisation. Stores xhat and 1/sigma for the backward.
template <class T>
void layer_norm(std::span<const T> x, std::span<const T> gamma, std::span<const T> beta,
                std::span<T> y, std::span<T> xhat, std::span<T> rstd, std::size_t rows,
                std::size_t width) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* xi = x.data() + i * width;
    T mean = T(0);
    for (std::size_t c = 0; c < width; ++c) mean += xi[c];
    mean /= static_cast<T>(width);
    T var = T(0);
    for (std::size_t c = 0; c < width; ++c) var += (xi[c] - mean) * (xi[c] - mean);
    var /= static_cast<T>(width);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    rstd[i] = rs;
    for (std::size_t c = 0; c < width; ++c) {
      const T h = (xi[c] - mean) * rs;
      xhat[i * width + c] = h;
      y[i * width + c] = h * gamma[c] + beta[c];
    }
  }
}

/// dx += LN'(dy); dgamma, dbeta accumulate.
template <class T>
void layer_norm_backward(std::span<const T> dy, std::span<const T> xhat, std::span<const T> rstd,
                         std::span<const T> gamma, std::span<T> dx, std::span<T> dgamma,
                         std::span<T> dbeta, std::size_t rows, std::size_t width) {
  const T inv_w = T(1) / static_cast<T>(width);
  for (std::size_t i = 0; i < rows; ++i) {
    const T* dyi = dy.data() + i * width;
    const T* hi = xhat.data() + i * width;
    T sum_dh = T(0);
    T sum_dh_h = T(0);
    for (std::size_t c = 0; c < width; ++c) {
      dgamma[c] += dyi[c] * hi[c];
      dbeta[c] += dyi[c];
      const T dh = dyi[c] * gamma[c];
      sum_dh += dh;
      sum_dh_h += dh * hi[c];
    }
    const T mean_dh = sum_dh * inv_w;
    const T mean_dh_h = sum_dh_h * inv_w;
    for (std::size_t c = 0; c < width; ++c) {
      const T dh = dyi[c] * gamma[c];
      dx[i * width + c] += rstd[i] * (dh - mean_dh - hi[c] * mean_dh_h);
    }
  }
}

/// Exact (erf) GELU.
template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(0.70710678118654752440)));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(0.70710678118654752440)));
  const T pdf = static_cast<T>(0.39894228040143267794) * std::exp(T(-0.5) * x * x);
  return cdf + x * pdf;
}

/// In-place numerically stable softmax over one row.
template <class T>
void softmax_row(std::span<T> row) {
  T mx = row[0];
  for (T v : row) mx = v > mx ? v : mx;
  T sum = T(0);
  for (T& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  const T inv = T(1) / sum;
  for (T& v : row) v *= inv;
}

}  // namespace submtl::kernels

#endif  // SUBMTL_KERNELS_HPP
