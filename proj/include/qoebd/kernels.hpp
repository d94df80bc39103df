#pragma once

// Numeric kernels shared by every model. The fast versions are OpenMP
// parallel; `reference::` holds direct serial loops used by the tests and the
// benchmark as a ground truth.

#include <cstddef>

namespace qoebd::kernels {

enum class Trans { no, yes };

// C = alpha * op(A) * op(B) + beta * C, all row-major.
// op(A) is m x k, op(B) is k x n, C is m x n.
void gemm(Trans ta, Trans tb, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc);

enum class Padding { zero, replicate };

// Stride-1 "same" convolution over NCHW tensors with an odd square kernel.
struct ConvGeometry {
  int in_channels = 0;
  int height = 0;
  int width = 0;
  int out_channels = 0;
  int kernel = 3;
  Padding padding = Padding::zero;

  int pad() const { return kernel / 2; }
  int patch() const { return in_channels * kernel * kernel; }
  int pixels() const { return height * width; }
  std::size_t weight_count() const {
    return static_cast<std::size_t>(out_channels) * static_cast<std::size_t>(patch());
  }
};

// weight: out_channels x (in_channels * kernel * kernel); bias may be null.
void conv2d_forward(const ConvGeometry& g, int batch, const float* input, const float* weight,
                    const float* bias, float* output);

// Any of dinput / dweight / dbias may be null. dweight and dbias accumulate;
// dinput is overwritten.
void conv2d_backward(const ConvGeometry& g, int batch, const float* input, const float* weight,
                     const float* dout, float* dinput, float* dweight, float* dbias);

// 2x2 stride-2 max pooling (odd trailing rows/cols dropped). argmax holds the
// flat input offset of each selected element.
void maxpool2_forward(int batch, int channels, int height, int width, const float* input,
                      float* output, int* argmax);
void maxpool2_backward(int batch, int channels, int height, int width, const float* dout,
                       const int* argmax, float* dinput);

// Nearest-neighbour x2 upsampling.
void upsample2_forward(int batch, int channels, int height, int width, const float* input,
                       float* output);
void upsample2_backward(int batch, int channels, int height, int width, const float* dout,
                        float* dinput);

// Deterministic mode forces fixed-order reductions (the default).
void set_deterministic(bool on);
bool deterministic();

namespace reference {

void gemm(Trans ta, Trans tb, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc);

void conv2d_forward(const ConvGeometry& g, int batch, const float* input, const float* weight,
                    const float* bias, float* output);

void conv2d_backward(const ConvGeometry& g, int batch, const float* input, const float* weight,
                     const float* dout, float* dinput, float* dweight, float* dbias);

}  // namespace reference

}  // namespace qoebd::kernels
