#include <cmath>
#include <random>

#include "layers.hpp"
#include "qoebd/architectures.hpp"
#include "qoebd/error.hpp"

namespace qoebd {

// Tape layout: t[0] input (NCHW); per block i: t[1+3i] conv output, t[2+3i]
// post-ReLU (pruned channels zeroed), t[3+3i] pooled; then z1 and a1.
// ints[i] holds block i's pooling argmax.

CnnSmall::CnnSmall(const ArchDescriptor& arch, ImageShape input, int num_classes, std::uint64_t seed)
    : Model(arch, input, num_classes) {
  if (arch.conv_channels.empty()) throw ConfigError("cnn_small needs at least one conv block");
  const int div = 1 << blocks();
  if (input.height % div != 0 || input.width % div != 0) {
    throw ConfigError("cnn_small input " + std::to_string(input.height) + "x" +
                      std::to_string(input.width) + " not divisible by " + std::to_string(div));
  }
  std::mt19937_64 rng(seed);
  int in_c = input.channels;
  for (int i = 0; i < blocks(); ++i) {
    const int out_c = arch.conv_channels[static_cast<std::size_t>(i)];
    auto& w = add_param("conv" + std::to_string(i) + ".w", {out_c, in_c * 9});
    layers::init_normal(w, std::sqrt(2.0f / static_cast<float>(in_c * 9)), rng);
    add_param("conv" + std::to_string(i) + ".b", {out_c});
    in_c = out_c;
  }
  auto& w1 = add_param("fc1.w", {flat_width(), arch.fc_width});
  layers::init_normal(w1, std::sqrt(2.0f / static_cast<float>(flat_width())), rng);
  add_param("fc1.b", {arch.fc_width});
  auto& w2 = add_param("fc2.w", {arch.fc_width, num_classes});
  layers::init_normal(w2, std::sqrt(1.0f / static_cast<float>(arch.fc_width)), rng);
  add_param("fc2.b", {num_classes});
}

kernels::ConvGeometry CnnSmall::geometry(int block) const {
  kernels::ConvGeometry g;
  g.in_channels = block == 0 ? input_.channels : arch_.conv_channels[static_cast<std::size_t>(block - 1)];
  g.out_channels = arch_.conv_channels[static_cast<std::size_t>(block)];
  g.height = input_.height >> block;
  g.width = input_.width >> block;
  g.kernel = 3;
  g.padding = kernels::Padding::zero;
  return g;
}

int CnnSmall::flat_width() const {
  const int s = blocks();
  return arch_.conv_channels.back() * (input_.height >> s) * (input_.width >> s);
}

Tensor CnnSmall::forward(const Tensor& x, Tape* tape) const {
  const int batch = x.dim(0);
  Tensor cur = layers::nhwc_to_nchw(x);
  Tape local;
  Tape& tp = tape ? *tape : local;
  tp.t.clear();
  tp.ints.clear();
  if (tape) tp.t.push_back(cur);
  for (int i = 0; i < blocks(); ++i) {
    const auto g = geometry(i);
    Tensor pre({batch, g.out_channels, g.height, g.width});
    kernels::conv2d_forward(g, batch, cur.data(), params_[2 * i].data(), params_[2 * i + 1].data(),
                            pre.data());
    Tensor post = pre;
    layers::relu_inplace(post.span());
    if (i == blocks() - 1 && !pruned_.empty()) {
      const std::size_t plane = static_cast<std::size_t>(g.pixels());
      for (int n = 0; n < batch; ++n)
        for (int c = 0; c < g.out_channels; ++c)
          if (is_pruned(c))
            std::fill_n(post.data() + (static_cast<std::size_t>(n) * g.out_channels + c) * plane, plane, 0.0f);
    }
    Tensor pooled({batch, g.out_channels, g.height / 2, g.width / 2});
    std::vector<int> arg(pooled.size());
    kernels::maxpool2_forward(batch, g.out_channels, g.height, g.width, post.data(), pooled.data(),
                              arg.data());
    if (tape) {
      tp.t.push_back(std::move(pre));
      tp.t.push_back(std::move(post));
      tp.t.push_back(pooled);
      tp.ints.push_back(std::move(arg));
    }
    cur = std::move(pooled);
  }
  const int flat = flat_width();
  const int fc = arch_.fc_width;
  const std::size_t base = 2 * static_cast<std::size_t>(blocks());
  Tensor z1({batch, fc});
  layers::linear_forward(cur.data(), batch, flat, params_[base], params_[base + 1], z1.data());
  Tensor a1 = z1;
  layers::relu_inplace(a1.span());
  Tensor logits({batch, num_classes_});
  layers::linear_forward(a1.data(), batch, fc, params_[base + 2], params_[base + 3], logits.data());
  if (tape) {
    tp.t.push_back(std::move(z1));
    tp.t.push_back(std::move(a1));
  }
  return logits;
}

Tensor CnnSmall::backward(const Tape& tape, const Tensor& dlogits, const BackwardRequest& req,
                          std::vector<Tensor>* grads) const {
  const int batch = dlogits.dim(0);
  const int flat = flat_width();
  const int fc = arch_.fc_width;
  const std::size_t base = 2 * static_cast<std::size_t>(blocks());
  const std::size_t tz = 1 + 3 * static_cast<std::size_t>(blocks());
  const Tensor& z1 = tape.t[tz];
  const Tensor& a1 = tape.t[tz + 1];
  const bool pg = req.param_grads && grads;
  auto gptr = [&](std::size_t i) { return pg ? (*grads)[i].data() : nullptr; };

  Tensor da1({batch, fc});
  layers::linear_backward(a1.data(), batch, fc, params_[base + 2], dlogits.data(), da1.data(),
                          gptr(base + 2), gptr(base + 3));
  Tensor dz1 = std::move(da1);
  layers::relu_backward(z1.span(), dz1.span());
  if (req.boost && req.boost->neuron.layer == "fc1") {
    const int u = req.boost->neuron.unit;
    for (int n = 0; n < batch; ++n) dz1[static_cast<std::size_t>(n) * fc + u] *= req.boost->factor;
  }
  const Tensor& pooled_last = tape.t[tz - 1];
  Tensor dcur(pooled_last.shape());
  layers::linear_backward(pooled_last.data(), batch, flat, params_[base], dz1.data(), dcur.data(),
                          gptr(base), gptr(base + 1));

  for (int i = blocks() - 1; i >= 0; --i) {
    const auto g = geometry(i);
    const Tensor& pre = tape.t[1 + 3 * static_cast<std::size_t>(i)];
    Tensor dpost(pre.shape());
    kernels::maxpool2_backward(batch, g.out_channels, g.height, g.width, dcur.data(),
                               tape.ints[static_cast<std::size_t>(i)].data(), dpost.data());
    if (i == blocks() - 1) {
      if (req.feature_grad) {
        for (std::size_t k = 0; k < dpost.size(); ++k) dpost[k] += (*req.feature_grad)[k];
      }
      if (!pruned_.empty()) {
        const std::size_t plane = static_cast<std::size_t>(g.pixels());
        for (int n = 0; n < batch; ++n)
          for (int c = 0; c < g.out_channels; ++c)
            if (is_pruned(c))
              std::fill_n(dpost.data() + (static_cast<std::size_t>(n) * g.out_channels + c) * plane, plane, 0.0f);
      }
    }
    layers::relu_backward(pre.span(), dpost.span());
    const Tensor& in = tape.t[3 * static_cast<std::size_t>(i)];
    const bool need_dx = i > 0 || req.input_grad;
    Tensor dx;
    if (need_dx) dx = Tensor(in.shape());
    if (!pg && !need_dx) break;
    kernels::conv2d_backward(g, batch, in.data(), params_[2 * static_cast<std::size_t>(i)].data(),
                             dpost.data(), need_dx ? dx.data() : nullptr,
                             gptr(2 * static_cast<std::size_t>(i)),
                             gptr(2 * static_cast<std::size_t>(i) + 1));
    dcur = std::move(dx);
  }
  if (!req.input_grad) return {};
  return layers::nchw_to_nhwc(dcur);
}

std::vector<LayerInfo> CnnSmall::probe_layers() const {
  return {{"fc1", arch_.fc_width}, {"fc2", num_classes_}};
}

Tensor CnnSmall::probe(const Tape& tape, const std::string& layer) const {
  const std::size_t tz = 1 + 3 * static_cast<std::size_t>(blocks());
  if (layer == "fc1") return tape.t[tz];
  if (layer == "fc2") {
    const Tensor& a1 = tape.t[tz + 1];
    Tensor out({a1.dim(0), num_classes_});
    const std::size_t base = 2 * static_cast<std::size_t>(blocks());
    layers::linear_forward(a1.data(), a1.dim(0), arch_.fc_width, params_[base + 2], params_[base + 3],
                           out.data());
    return out;
  }
  throw ConfigError("unknown layer '" + layer + "' for cnn_small");
}

Tensor CnnSmall::feature_tap(const Tape& tape) const {
  const Tensor& post = tape.t[2 + 3 * static_cast<std::size_t>(blocks() - 1)];
  Tensor out = post;
  out.reshape({post.dim(0), post.dim(1), post.dim(2) * post.dim(3)});
  return out;
}

std::vector<Tensor> CnnSmall::perceptual_features(const Tape& tape) const {
  std::vector<Tensor> out;
  for (int i = 0; i < blocks(); ++i) {
    Tensor f = tape.t[2 + 3 * static_cast<std::size_t>(i)];
    f.reshape({f.dim(0), f.dim(1), f.dim(2) * f.dim(3)});
    out.push_back(std::move(f));
  }
  return out;
}

LayerInfo CnnSmall::prunable_layer() const {
  return {"conv" + std::to_string(blocks() - 1), arch_.conv_channels.back()};
}

Tensor CnnSmall::prunable_activations(const Tape& tape) const {
  const Tensor& post = tape.t[2 + 3 * static_cast<std::size_t>(blocks() - 1)];
  const int batch = post.dim(0), c = post.dim(1);
  const std::size_t plane = static_cast<std::size_t>(post.dim(2)) * post.dim(3);
  Tensor out({batch, c});
  for (int n = 0; n < batch; ++n)
    for (int ch = 0; ch < c; ++ch) {
      double s = 0.0;
      const float* src = post.data() + (static_cast<std::size_t>(n) * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) s += src[k];
      out[static_cast<std::size_t>(n) * c + ch] = static_cast<float>(s / static_cast<double>(plane));
    }
  return out;
}

}  // namespace qoebd
