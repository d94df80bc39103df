#pragma once

// Building blocks shared by the architectures. Matrices are row-major;
// linear layers store weights as in x out.

#include <cmath>
#include <random>
#include <span>

#include "qoebd/kernels.hpp"
#include "qoebd/tensor.hpp"

namespace qoebd::layers {

inline void linear_forward(const float* x, int rows, int in, const Tensor& w, const Tensor& b,
                           float* y) {
  const int out = w.dim(1);
  for (int r = 0; r < rows; ++r) std::copy(b.data(), b.data() + out, y + static_cast<long>(r) * out);
  kernels::gemm(kernels::Trans::no, kernels::Trans::no, rows, out, in, 1.0f, x, in, w.data(), out,
                1.0f, y, out);
}

// dx is overwritten; dw/db accumulate. Any output may be null.
inline void linear_backward(const float* x, int rows, int in, const Tensor& w, const float* dy,
                            float* dx, float* dw, float* db) {
  const int out = w.dim(1);
  if (dw) {
    kernels::gemm(kernels::Trans::yes, kernels::Trans::no, in, out, rows, 1.0f, x, in, dy, out, 1.0f,
                  dw, out);
  }
  if (db) {
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < out; ++j) db[j] += dy[static_cast<long>(r) * out + j];
  }
  if (dx) {
    kernels::gemm(kernels::Trans::no, kernels::Trans::yes, rows, in, out, 1.0f, dy, out, w.data(),
                  out, 0.0f, dx, in);
  }
}

inline void init_normal(Tensor& t, float stddev, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, stddev);
  for (auto& v : t.vec()) v = dist(rng);
}

inline void relu_inplace(std::span<float> v) {
  for (auto& x : v) x = x > 0.0f ? x : 0.0f;
}

// dv *= (pre > 0)
inline void relu_backward(std::span<const float> pre, std::span<float> dv) {
  for (std::size_t i = 0; i < dv.size(); ++i)
    if (!(pre[i] > 0.0f)) dv[i] = 0.0f;
}

inline float gelu(float x) {
  constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

inline float gelu_grad(float x) {
  constexpr float k = 0.7978845608028654f;
  const float u = k * (x + 0.044715f * x * x * x);
  const float th = std::tanh(u);
  const float du = k * (1.0f + 3.0f * 0.044715f * x * x);
  return 0.5f * (1.0f + th) + 0.5f * x * (1.0f - th * th) * du;
}

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

inline float softplus(float x) { return x > 20.0f ? x : std::log1p(std::exp(x)); }

constexpr float kLayerNormEps = 1e-5f;

// Row-wise layer norm. Saves the normalised rows and inverse std for backward.
inline void layernorm_forward(const float* x, int rows, int d, const Tensor& gamma,
                              const Tensor& beta, float* y, float* xhat, float* inv_std) {
  for (int r = 0; r < rows; ++r) {
    const float* xr = x + static_cast<long>(r) * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xr[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= d;
    const float is = static_cast<float>(1.0 / std::sqrt(var + kLayerNormEps));
    inv_std[r] = is;
    for (int j = 0; j < d; ++j) {
      const float h = static_cast<float>(xr[j] - mean) * is;
      xhat[static_cast<long>(r) * d + j] = h;
      y[static_cast<long>(r) * d + j] = h * gamma[static_cast<std::size_t>(j)] + beta[static_cast<std::size_t>(j)];
    }
  }
}

// dx is overwritten; dgamma/dbeta accumulate (may be null).
inline void layernorm_backward(const float* xhat, const float* inv_std, int rows, int d,
                               const Tensor& gamma, const float* dy, float* dx, float* dgamma,
                               float* dbeta) {
  for (int r = 0; r < rows; ++r) {
    const float* hr = xhat + static_cast<long>(r) * d;
    const float* dyr = dy + static_cast<long>(r) * d;
    double sum_g = 0.0;
    double sum_gh = 0.0;
    for (int j = 0; j < d; ++j) {
      const double g = static_cast<double>(dyr[j]) * gamma[static_cast<std::size_t>(j)];
      sum_g += g;
      sum_gh += g * hr[j];
      if (dgamma) dgamma[j] += dyr[j] * hr[j];
      if (dbeta) dbeta[j] += dyr[j];
    }
    for (int j = 0; j < d; ++j) {
      const double g = static_cast<double>(dyr[j]) * gamma[static_cast<std::size_t>(j)];
      dx[static_cast<long>(r) * d + j] =
          static_cast<float>(inv_std[r] * (g - sum_g / d - hr[j] * sum_gh / d));
    }
  }
}

// In-place numerically stable softmax over each row of length n.
inline void softmax_rows(float* v, int rows, int n) {
  for (int r = 0; r < rows; ++r) {
    float* row = v + static_cast<long>(r) * n;
    float mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    const float inv = static_cast<float>(1.0 / s);
    for (int j = 0; j < n; ++j) row[j] *= inv;
  }
}

inline Tensor nhwc_to_nchw(const Tensor& x) {
  const int b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor out({b, c, h, w});
  for (int n = 0; n < b; ++n)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        for (int ch = 0; ch < c; ++ch)
          out[((static_cast<std::size_t>(n) * c + ch) * h + y) * w + xx] =
              x[((static_cast<std::size_t>(n) * h + y) * w + xx) * c + ch];
  return out;
}

inline Tensor nchw_to_nhwc(const Tensor& x) {
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({b, h, w, c});
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          out[((static_cast<std::size_t>(n) * h + y) * w + xx) * c + ch] =
              x[((static_cast<std::size_t>(n) * c + ch) * h + y) * w + xx];
  return out;
}

}  // namespace qoebd::layers
