#include "qoebd/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cstring>
#include <vector>

namespace qoebd::kernels {

namespace {

std::atomic<bool> g_deterministic{true};

constexpr int kMR = 4;
constexpr int kNR = 32;
constexpr int kKC = 256;
constexpr long kParallelFlops = 1L << 18;

// C[m x n] += A[m x k] * B[k x n], contiguous row-major operands with strides.
void micro_gemm(int m, int n, int k, const float* a, int lda, const float* b, int ldb, float* c,
                int ldc) {
  int i = 0;
  for (; i + kMR <= m; i += kMR) {
    int j = 0;
    for (; j + kNR <= n; j += kNR) {
      float acc[kMR][kNR];
      for (int r = 0; r < kMR; ++r)
        for (int q = 0; q < kNR; ++q) acc[r][q] = c[(i + r) * ldc + j + q];
      for (int p = 0; p < k; ++p) {
        const float* brow = b + static_cast<long>(p) * ldb + j;
        for (int r = 0; r < kMR; ++r) {
          const float av = a[(i + r) * lda + p];
#pragma omp simd
          for (int q = 0; q < kNR; ++q) acc[r][q] += av * brow[q];
        }
      }
      for (int r = 0; r < kMR; ++r)
        for (int q = 0; q < kNR; ++q) c[(i + r) * ldc + j + q] = acc[r][q];
    }
    if (j < n) {
      for (int r = 0; r < kMR; ++r) {
        float* crow = c + (i + r) * ldc;
        for (int p = 0; p < k; ++p) {
          const float av = a[(i + r) * lda + p];
          const float* brow = b + static_cast<long>(p) * ldb;
          for (int q = j; q < n; ++q) crow[q] += av * brow[q];
        }
      }
    }
  }
  for (; i < m; ++i) {
    float* crow = c + i * ldc;
    for (int p = 0; p < k; ++p) {
      const float av = a[i * lda + p];
      const float* brow = b + static_cast<long>(p) * ldb;
#pragma omp simd
      for (int q = 0; q < n; ++q) crow[q] += av * brow[q];
    }
  }
}

void blocked_gemm(int m, int n, int k, const float* a, int lda, const float* b, int ldb, float* c,
                  int ldc) {
  for (int p0 = 0; p0 < k; p0 += kKC) {
    const int kc = std::min(kKC, k - p0);
    micro_gemm(m, n, kc, a + p0, lda, b + static_cast<long>(p0) * ldb, ldb, c, ldc);
  }
}

std::vector<float> transpose_copy(const float* src, int rows, int cols, int ld) {
  std::vector<float> out(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols));
  for (int r = 0; r < rows; ++r)
    for (int q = 0; q < cols; ++q)
      out[static_cast<std::size_t>(q) * rows + r] = src[static_cast<long>(r) * ld + q];
  return out;
}

// col: (C*k*k) x (H*W) patch matrix of one sample, written at column offset
// col_offset inside a matrix whose row stride is col_ld.
void im2col(const ConvGeometry& g, const float* img, float* col, long col_ld, long col_offset) {
  const int pad = g.pad();
  const int hw = g.pixels();
  for (int c = 0; c < g.in_channels; ++c) {
    const float* plane = img + static_cast<long>(c) * hw;
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const long row = (static_cast<long>(c) * g.kernel + ky) * g.kernel + kx;
        float* dst = col + row * col_ld + col_offset;
        for (int y = 0; y < g.height; ++y) {
          int sy = y + ky - pad;
          const bool row_out = sy < 0 || sy >= g.height;
          if (g.padding == Padding::replicate) sy = std::clamp(sy, 0, g.height - 1);
          for (int x = 0; x < g.width; ++x) {
            int sx = x + kx - pad;
            const bool col_out = sx < 0 || sx >= g.width;
            if (g.padding == Padding::zero) {
              dst[y * g.width + x] = (row_out || col_out) ? 0.0f : plane[sy * g.width + sx];
            } else {
              sx = std::clamp(sx, 0, g.width - 1);
              dst[y * g.width + x] = plane[sy * g.width + sx];
            }
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const float* col, long col_ld, long col_offset, float* img) {
  const int pad = g.pad();
  const int hw = g.pixels();
  std::fill(img, img + static_cast<long>(g.in_channels) * hw, 0.0f);
  for (int c = 0; c < g.in_channels; ++c) {
    float* plane = img + static_cast<long>(c) * hw;
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const long row = (static_cast<long>(c) * g.kernel + ky) * g.kernel + kx;
        const float* src = col + row * col_ld + col_offset;
        for (int y = 0; y < g.height; ++y) {
          int sy = y + ky - pad;
          const bool row_out = sy < 0 || sy >= g.height;
          if (g.padding == Padding::zero && row_out) continue;
          sy = std::clamp(sy, 0, g.height - 1);
          for (int x = 0; x < g.width; ++x) {
            int sx = x + kx - pad;
            if (sx < 0 || sx >= g.width) {
              if (g.padding == Padding::zero) continue;
              sx = std::clamp(sx, 0, g.width - 1);
            }
            plane[sy * g.width + sx] += src[y * g.width + x];
          }
        }
      }
    }
  }
}

}  // namespace

void set_deterministic(bool on) { g_deterministic = on; }
bool deterministic() { return g_deterministic; }

void gemm(Trans ta, Trans tb, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
  if (m <= 0 || n <= 0) return;
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<long>(i) * ldc;
    if (beta == 0.0f) {
      std::fill(crow, crow + n, 0.0f);
    } else if (beta != 1.0f) {
      for (int j = 0; j < n; ++j) crow[j] *= beta;
    }
  }
  if (k <= 0 || alpha == 0.0f) return;

  std::vector<float> a_packed;
  std::vector<float> b_packed;
  if (ta == Trans::yes) {
    a_packed = transpose_copy(a, k, m, lda);
    a = a_packed.data();
    lda = k;
  }
  if (tb == Trans::yes) {
    b_packed = transpose_copy(b, n, k, ldb);
    b = b_packed.data();
    ldb = n;
  }
  if (alpha != 1.0f) {
    if (a_packed.empty()) {
      a_packed.resize(static_cast<std::size_t>(m) * static_cast<std::size_t>(k));
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) a_packed[static_cast<std::size_t>(i) * k + p] = a[i * lda + p];
      a = a_packed.data();
      lda = k;
    }
    for (auto& v : a_packed) v *= alpha;
  }

  const long flops = 2L * m * n * k;
  const int threads = flops >= kParallelFlops ? omp_get_max_threads() : 1;
  if (threads == 1) {
    blocked_gemm(m, n, k, a, lda, b, ldb, c, ldc);
    return;
  }
  if (m >= kMR * threads) {
    const int rows_per = ((m + threads - 1) / threads + kMR - 1) / kMR * kMR;
#pragma omp parallel for schedule(static) num_threads(threads)
    for (int i0 = 0; i0 < m; i0 += rows_per) {
      const int rows = std::min(rows_per, m - i0);
      blocked_gemm(rows, n, k, a + static_cast<long>(i0) * lda, lda, b, ldb,
                   c + static_cast<long>(i0) * ldc, ldc);
    }
  } else if (deterministic() || k < n) {
    const int cols_per = ((n + threads - 1) / threads + kNR - 1) / kNR * kNR;
#pragma omp parallel for schedule(static) num_threads(threads)
    for (int j0 = 0; j0 < n; j0 += cols_per) {
      const int cols = std::min(cols_per, n - j0);
      blocked_gemm(m, cols, k, a, lda, b + j0, ldb, c + j0, ldc);
    }
  } else {
    // Split the reduction dimension; partial sums land in arbitrary order.
    const int k_per = (k + threads - 1) / threads;
#pragma omp parallel num_threads(threads)
    {
      const int t = omp_get_thread_num();
      const int p0 = t * k_per;
      const int kc = std::min(k_per, k - p0);
      if (kc > 0) {
        std::vector<float> part(static_cast<std::size_t>(m) * static_cast<std::size_t>(n), 0.0f);
        blocked_gemm(m, n, kc, a + p0, lda, b + static_cast<long>(p0) * ldb, ldb, part.data(), n);
#pragma omp critical
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            c[static_cast<long>(i) * ldc + j] += part[static_cast<std::size_t>(i) * n + j];
      }
    }
  }
}

void conv2d_forward(const ConvGeometry& g, int batch, const float* input, const float* weight,
                    const float* bias, float* output) {
  const long hw = g.pixels();
  const long cols = hw * batch;
  const int patch = g.patch();
  std::vector<float> col(static_cast<std::size_t>(patch) * static_cast<std::size_t>(cols));
#pragma omp parallel for schedule(static)
  for (int b = 0; b < batch; ++b)
    im2col(g, input + static_cast<long>(b) * g.in_channels * hw, col.data(), cols, b * hw);

  std::vector<float> out(static_cast<std::size_t>(g.out_channels) * static_cast<std::size_t>(cols));
  gemm(Trans::no, Trans::no, g.out_channels, static_cast<int>(cols), patch, 1.0f, weight, patch,
       col.data(), static_cast<int>(cols), 0.0f, out.data(), static_cast<int>(cols));

#pragma omp parallel for schedule(static)
  for (int b = 0; b < batch; ++b) {
    for (int oc = 0; oc < g.out_channels; ++oc) {
      const float bv = bias ? bias[oc] : 0.0f;
      const float* src = out.data() + oc * cols + b * hw;
      float* dst = output + (static_cast<long>(b) * g.out_channels + oc) * hw;
      for (long i = 0; i < hw; ++i) dst[i] = src[i] + bv;
    }
  }
}

void conv2d_backward(const ConvGeometry& g, int batch, const float* input, const float* weight,
                     const float* dout, float* dinput, float* dweight, float* dbias) {
  const long hw = g.pixels();
  const long cols = hw * batch;
  const int patch = g.patch();

  // dout rearranged to out_channels x (batch * hw)
  std::vector<float> dmat(static_cast<std::size_t>(g.out_channels) * static_cast<std::size_t>(cols));
#pragma omp parallel for schedule(static)
  for (int b = 0; b < batch; ++b)
    for (int oc = 0; oc < g.out_channels; ++oc)
      std::memcpy(dmat.data() + oc * cols + b * hw,
                  dout + (static_cast<long>(b) * g.out_channels + oc) * hw,
                  sizeof(float) * static_cast<std::size_t>(hw));

  if (dbias) {
    for (int oc = 0; oc < g.out_channels; ++oc) {
      double s = 0.0;
      const float* row = dmat.data() + oc * cols;
      for (long i = 0; i < cols; ++i) s += row[i];
      dbias[oc] += static_cast<float>(s);
    }
  }

  if (dweight) {
    std::vector<float> col(static_cast<std::size_t>(patch) * static_cast<std::size_t>(cols));
#pragma omp parallel for schedule(static)
    for (int b = 0; b < batch; ++b)
      im2col(g, input + static_cast<long>(b) * g.in_channels * hw, col.data(), cols, b * hw);
    gemm(Trans::no, Trans::yes, g.out_channels, patch, static_cast<int>(cols), 1.0f, dmat.data(),
         static_cast<int>(cols), col.data(), static_cast<int>(cols), 1.0f, dweight, patch);
  }

  if (dinput) {
    std::vector<float> dcol(static_cast<std::size_t>(patch) * static_cast<std::size_t>(cols));
    gemm(Trans::yes, Trans::no, patch, static_cast<int>(cols), g.out_channels, 1.0f, weight, patch,
         dmat.data(), static_cast<int>(cols), 0.0f, dcol.data(), static_cast<int>(cols));
#pragma omp parallel for schedule(static)
    for (int b = 0; b < batch; ++b)
      col2im(g, dcol.data(), cols, b * hw, dinput + static_cast<long>(b) * g.in_channels * hw);
  }
}

void maxpool2_forward(int batch, int channels, int height, int width, const float* input,
                      float* output, int* argmax) {
  const int oh = height / 2;
  const int ow = width / 2;
  const long planes = static_cast<long>(batch) * channels;
#pragma omp parallel for schedule(static)
  for (long p = 0; p < planes; ++p) {
    const float* src = input + p * height * width;
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        int best = (2 * y) * width + 2 * x;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int idx = (2 * y + dy) * width + 2 * x + dx;
            if (src[idx] > src[best]) best = idx;
          }
        const long o = p * oh * ow + y * ow + x;
        output[o] = src[best];
        argmax[o] = static_cast<int>(p * height * width + best);
      }
    }
  }
}

void maxpool2_backward(int batch, int channels, int height, int width, const float* dout,
                       const int* argmax, float* dinput) {
  const long in_count = static_cast<long>(batch) * channels * height * width;
  const long out_count = static_cast<long>(batch) * channels * (height / 2) * (width / 2);
  std::fill(dinput, dinput + in_count, 0.0f);
  // 2x2 windows do not overlap, so each input receives at most one write.
#pragma omp parallel for schedule(static)
  for (long o = 0; o < out_count; ++o) dinput[argmax[o]] += dout[o];
}

void upsample2_forward(int batch, int channels, int height, int width, const float* input,
                       float* output) {
  const long planes = static_cast<long>(batch) * channels;
  const int ow = width * 2;
#pragma omp parallel for schedule(static)
  for (long p = 0; p < planes; ++p) {
    const float* src = input + p * height * width;
    float* dst = output + p * height * width * 4;
    for (int y = 0; y < height * 2; ++y)
      for (int x = 0; x < ow; ++x) dst[y * ow + x] = src[(y / 2) * width + x / 2];
  }
}

void upsample2_backward(int batch, int channels, int height, int width, const float* dout,
                        float* dinput) {
  const long planes = static_cast<long>(batch) * channels;
  const int ow = width * 2;
#pragma omp parallel for schedule(static)
  for (long p = 0; p < planes; ++p) {
    const float* src = dout + p * height * width * 4;
    float* dst = dinput + p * height * width;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        dst[y * width + x] = src[(2 * y) * ow + 2 * x] + src[(2 * y) * ow + 2 * x + 1] +
                             src[(2 * y + 1) * ow + 2 * x] + src[(2 * y + 1) * ow + 2 * x + 1];
  }
}

namespace reference {

void gemm(Trans ta, Trans tb, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p) {
        const float av = ta == Trans::no ? a[i * lda + p] : a[p * lda + i];
        const float bv = tb == Trans::no ? b[p * ldb + j] : b[j * ldb + p];
        s += static_cast<double>(av) * bv;
      }
      float& cv = c[i * ldc + j];
      cv = static_cast<float>(alpha * s + (beta == 0.0f ? 0.0 : static_cast<double>(beta) * cv));
    }
  }
}

namespace {

// Source pixel for a tap, or -1 when it falls in zero padding.
long tap_source(const ConvGeometry& g, int y, int x, int ky, int kx) {
  int sy = y + ky - g.pad();
  int sx = x + kx - g.pad();
  if (g.padding == Padding::replicate) {
    sy = std::clamp(sy, 0, g.height - 1);
    sx = std::clamp(sx, 0, g.width - 1);
  } else if (sy < 0 || sy >= g.height || sx < 0 || sx >= g.width) {
    return -1;
  }
  return static_cast<long>(sy) * g.width + sx;
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, int batch, const float* input, const float* weight,
                    const float* bias, float* output) {
  const long hw = g.pixels();
  for (int b = 0; b < batch; ++b)
    for (int oc = 0; oc < g.out_channels; ++oc)
      for (int y = 0; y < g.height; ++y)
        for (int x = 0; x < g.width; ++x) {
          double s = bias ? bias[oc] : 0.0;
          for (int ic = 0; ic < g.in_channels; ++ic)
            for (int ky = 0; ky < g.kernel; ++ky)
              for (int kx = 0; kx < g.kernel; ++kx) {
                const long src = tap_source(g, y, x, ky, kx);
                if (src < 0) continue;
                const float w =
                    weight[((static_cast<long>(oc) * g.in_channels + ic) * g.kernel + ky) * g.kernel + kx];
                s += static_cast<double>(w) * input[(static_cast<long>(b) * g.in_channels + ic) * hw + src];
              }
          output[(static_cast<long>(b) * g.out_channels + oc) * hw + y * g.width + x] =
              static_cast<float>(s);
        }
}

void conv2d_backward(const ConvGeometry& g, int batch, const float* input, const float* weight,
                     const float* dout, float* dinput, float* dweight, float* dbias) {
  const long hw = g.pixels();
  if (dinput) std::fill(dinput, dinput + static_cast<long>(batch) * g.in_channels * hw, 0.0f);
  for (int b = 0; b < batch; ++b)
    for (int oc = 0; oc < g.out_channels; ++oc)
      for (int y = 0; y < g.height; ++y)
        for (int x = 0; x < g.width; ++x) {
          const float d = dout[(static_cast<long>(b) * g.out_channels + oc) * hw + y * g.width + x];
          if (dbias) dbias[oc] += d;
          for (int ic = 0; ic < g.in_channels; ++ic)
            for (int ky = 0; ky < g.kernel; ++ky)
              for (int kx = 0; kx < g.kernel; ++kx) {
                const long src = tap_source(g, y, x, ky, kx);
                if (src < 0) continue;
                const long widx =
                    ((static_cast<long>(oc) * g.in_channels + ic) * g.kernel + ky) * g.kernel + kx;
                const long iidx = (static_cast<long>(b) * g.in_channels + ic) * hw + src;
                if (dweight) dweight[widx] += d * input[iidx];
                if (dinput) dinput[iidx] += d * weight[widx];
              }
        }
}

}  // namespace reference

}  // namespace qoebd::kernels
