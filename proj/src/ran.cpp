#include <algorithm>
#include <cmath>
#include <random>

#include "layers.hpp"
#include "qoebd/attention.hpp"
#include "qoebd/error.hpp"

namespace qoebd {

// Tape layout: t[0] input NCHW, t[1] stem conv, t[2] stem ReLU, t[3] stem pool;
// then kSlots per module; last entry the pooled head features. ints[0] is the
// stem argmax, then per module the mask-branch argmax and the output argmax
// (empty when the module is not followed by a pool).

namespace {

enum Slot : std::size_t { sTrunkPre, sTrunk, sPool, sMaskPre, sUp, sSoft, sH, sOut, kSlots };
constexpr std::size_t kStemSlots = 4;
constexpr std::size_t kModuleParams = 6;

// Softplus keeps the map positive; the floor only guards underflow.
double map_mass(const float* a, int pix) {
  double m = 0.0;
  for (int p = 0; p < pix; ++p) m += a[p];
  return std::max(m, 1e-12);
}

}  // namespace

void combine_attention(std::span<const float> s, std::span<const float> t, std::span<float> h) {
  if (s.size() != t.size() || h.size() != t.size()) throw DataError("attention branch size mismatch");
  for (std::size_t i = 0; i < t.size(); ++i) h[i] = (1.0f + s[i]) * t[i];
}

RanModel::RanModel(const ArchDescriptor& arch, ImageShape input, int num_classes, std::uint64_t seed)
    : Model(arch, input, num_classes) {
  const int l = modules();
  if (l < 2) throw ConfigError("ran needs at least two attention modules");
  if (arch.attention_channels.back() != 1) throw ConfigError("last ran module must have one channel");
  if (arch.stem_channels < 1) throw ConfigError("ran stem channels must be positive");
  for (int c : arch.attention_channels)
    if (c < 1) throw ConfigError("ran channel counts must be positive");
  const int div = 1 << l;
  if (input.height % div != 0 || input.width % div != 0) {
    throw ConfigError("ran input " + std::to_string(input.height) + "x" + std::to_string(input.width) +
                      " not divisible by " + std::to_string(div));
  }
  std::mt19937_64 rng(seed);
  auto conv = [&](const std::string& name, const kernels::ConvGeometry& g, float gain) {
    layers::init_normal(add_param(name + ".w", {g.out_channels, g.patch()}),
                        gain * std::sqrt(2.0f / static_cast<float>(g.patch())), rng);
    add_param(name + ".b", {g.out_channels});
  };
  conv("stem", stem(), 1.0f);
  for (int i = 0; i < l; ++i) {
    const Level lv = level(i);
    const std::string pre = "module" + std::to_string(i) + ".";
    conv(pre + "trunk", lv.trunk, i == l - 1 ? 0.5f : 1.0f);
    conv(pre + "mask", lv.mask, 1.0f);
    conv(pre + "expand", lv.expand, 0.1f);
  }
  const int feat = arch.attention_channels[static_cast<std::size_t>(l - 2)];
  layers::init_normal(add_param("head.w", {feat, num_classes}), std::sqrt(1.0f / static_cast<float>(feat)), rng);
  add_param("head.b", {num_classes});
}

kernels::ConvGeometry RanModel::stem() const {
  kernels::ConvGeometry g;
  g.in_channels = input_.channels;
  g.out_channels = arch_.stem_channels;
  g.height = input_.height;
  g.width = input_.width;
  g.kernel = 3;
  g.padding = kernels::Padding::replicate;
  return g;
}

int RanModel::mask_hidden(int i) const {
  return std::max(arch_.attention_channels[static_cast<std::size_t>(i)], 8);
}

RanModel::Level RanModel::level(int i) const {
  const int l = modules();
  Level lv;
  lv.scale = 1 + std::min(i, l - 2);
  lv.pool_after = i < l - 2;
  const int in_c = i == 0 ? arch_.stem_channels : arch_.attention_channels[static_cast<std::size_t>(i - 1)];
  const int c = arch_.attention_channels[static_cast<std::size_t>(i)];
  lv.trunk = {in_c, input_.height >> lv.scale, input_.width >> lv.scale, c, 3, kernels::Padding::replicate};
  lv.mask = {in_c, input_.height >> (lv.scale + 1), input_.width >> (lv.scale + 1), mask_hidden(i), 3,
             kernels::Padding::replicate};
  lv.expand = {mask_hidden(i), input_.height >> lv.scale, input_.width >> lv.scale, c, 1,
               kernels::Padding::replicate};
  return lv;
}

int RanModel::map_height() const { return input_.height >> level(modules() - 1).scale; }
int RanModel::map_width() const { return input_.width >> level(modules() - 1).scale; }

Tensor RanModel::forward(const Tensor& x, Tape* tape) const {
  const int batch = x.dim(0);
  const int l = modules();
  Tape local;
  Tape& tp = tape ? *tape : local;
  tp.t.clear();
  tp.ints.clear();

  const auto sg = stem();
  Tensor in = layers::nhwc_to_nchw(x);
  Tensor pre({batch, sg.out_channels, sg.height, sg.width});
  kernels::conv2d_forward(sg, batch, in.data(), params_[0].data(), params_[1].data(), pre.data());
  Tensor post = pre;
  layers::relu_inplace(post.span());
  Tensor cur({batch, sg.out_channels, sg.height / 2, sg.width / 2});
  std::vector<int> arg(cur.size());
  kernels::maxpool2_forward(batch, sg.out_channels, sg.height, sg.width, post.data(), cur.data(), arg.data());
  tp.t.push_back(std::move(in));
  tp.t.push_back(std::move(pre));
  tp.t.push_back(std::move(post));
  tp.t.push_back(cur);
  tp.ints.push_back(std::move(arg));

  for (int i = 0; i < l; ++i) {
    const Level lv = level(i);
    const std::size_t pb = 2 + kModuleParams * static_cast<std::size_t>(i);
    const bool last = i == l - 1;
    const auto& tg = lv.trunk;
    const auto& mg = lv.mask;
    const auto& eg = lv.expand;

    Tensor tpre({batch, tg.out_channels, tg.height, tg.width});
    kernels::conv2d_forward(tg, batch, cur.data(), params_[pb].data(), params_[pb + 1].data(), tpre.data());
    Tensor trunk = tpre;
    if (last) {
      for (auto& v : trunk.vec()) v = layers::softplus(v);
    } else {
      layers::relu_inplace(trunk.span());
    }

    Tensor pooled({batch, tg.in_channels, mg.height, mg.width});
    std::vector<int> marg(pooled.size());
    kernels::maxpool2_forward(batch, tg.in_channels, tg.height, tg.width, cur.data(), pooled.data(), marg.data());
    Tensor mpre({batch, mg.out_channels, mg.height, mg.width});
    kernels::conv2d_forward(mg, batch, pooled.data(), params_[pb + 2].data(), params_[pb + 3].data(), mpre.data());
    Tensor mact = mpre;
    layers::relu_inplace(mact.span());
    Tensor up({batch, mg.out_channels, tg.height, tg.width});
    kernels::upsample2_forward(batch, mg.out_channels, mg.height, mg.width, mact.data(), up.data());
    Tensor soft({batch, eg.out_channels, eg.height, eg.width});
    kernels::conv2d_forward(eg, batch, up.data(), params_[pb + 4].data(), params_[pb + 5].data(), soft.data());
    for (auto& v : soft.vec()) v = layers::sigmoid(v);

    Tensor h(trunk.shape());
    combine_attention(soft.span(), trunk.span(), h.span());
    Tensor out;
    std::vector<int> oarg;
    if (lv.pool_after) {
      out = Tensor({batch, tg.out_channels, tg.height / 2, tg.width / 2});
      oarg.resize(out.size());
      kernels::maxpool2_forward(batch, tg.out_channels, tg.height, tg.width, h.data(), out.data(), oarg.data());
    } else {
      out = h;
    }
    tp.t.push_back(std::move(tpre));
    tp.t.push_back(std::move(trunk));
    tp.t.push_back(std::move(pooled));
    tp.t.push_back(std::move(mpre));
    tp.t.push_back(std::move(up));
    tp.t.push_back(std::move(soft));
    tp.t.push_back(std::move(h));
    tp.t.push_back(out);
    tp.ints.push_back(std::move(marg));
    tp.ints.push_back(std::move(oarg));
    cur = std::move(out);
  }

  // Map-weighted average of the penultimate module, normalized by the map
  // mass so that shrinking the map cannot silence the classifier.
  const std::size_t last_base = kStemSlots + kSlots * static_cast<std::size_t>(l - 1);
  const std::size_t prev_base = kStemSlots + kSlots * static_cast<std::size_t>(l - 2);
  const Tensor& amap = tp.t[last_base + sH];
  const Tensor& feat = tp.t[prev_base + sH];
  const int c = feat.dim(1);
  const int pix = feat.dim(2) * feat.dim(3);
  Tensor pooled_feat({batch, c});
  for (int b = 0; b < batch; ++b) {
    const float* a = amap.data() + static_cast<long>(b) * pix;
    const double mass = map_mass(a, pix);
    for (int ch = 0; ch < c; ++ch) {
      if (is_pruned(ch)) continue;
      const float* f = feat.data() + (static_cast<long>(b) * c + ch) * pix;
      double s = 0.0;
      for (int p = 0; p < pix; ++p) s += static_cast<double>(f[p]) * a[p];
      pooled_feat[static_cast<std::size_t>(b) * c + ch] = static_cast<float>(s / mass);
    }
  }
  const std::size_t ph = 2 + kModuleParams * static_cast<std::size_t>(l);
  Tensor logits({batch, num_classes_});
  layers::linear_forward(pooled_feat.data(), batch, c, params_[ph], params_[ph + 1], logits.data());
  tp.t.push_back(std::move(pooled_feat));
  return logits;
}

Tensor RanModel::backward(const Tape& tape, const Tensor& dlogits, const BackwardRequest& req,
                          std::vector<Tensor>* grads) const {
  const int batch = dlogits.dim(0);
  const int l = modules();
  const bool pg = req.param_grads && grads;
  auto gp = [&](std::size_t i) { return pg ? (*grads)[i].data() : nullptr; };
  auto slot = [&](int i, std::size_t s) -> const Tensor& {
    return tape.t[kStemSlots + kSlots * static_cast<std::size_t>(i) + s];
  };

  const std::size_t ph = 2 + kModuleParams * static_cast<std::size_t>(l);
  const Tensor& pooled_feat = tape.t.back();
  const int c = pooled_feat.dim(1);
  Tensor dlog = dlogits;
  if (req.boost && req.boost->neuron.layer == "head") {
    for (int b = 0; b < batch; ++b)
      dlog[static_cast<std::size_t>(b) * num_classes_ + req.boost->neuron.unit] *= req.boost->factor;
  }
  Tensor dpooled({batch, c});
  layers::linear_backward(pooled_feat.data(), batch, c, params_[ph], dlog.data(), dpooled.data(), gp(ph),
                          gp(ph + 1));

  const Tensor& amap = slot(l - 1, sH);
  const Tensor& feat = slot(l - 2, sH);
  const int pix = feat.dim(2) * feat.dim(3);
  Tensor dfeat(feat.shape());
  Tensor damap(amap.shape());
  for (int b = 0; b < batch; ++b) {
    const float* a = amap.data() + static_cast<long>(b) * pix;
    float* da = damap.data() + static_cast<long>(b) * pix;
    const double mass = map_mass(a, pix);
    for (int ch = 0; ch < c; ++ch) {
      if (is_pruned(ch)) continue;
      const float g = static_cast<float>(dpooled[static_cast<std::size_t>(b) * c + ch] / mass);
      const float avg = pooled_feat[static_cast<std::size_t>(b) * c + ch];
      const float* f = feat.data() + (static_cast<long>(b) * c + ch) * pix;
      float* df = dfeat.data() + (static_cast<long>(b) * c + ch) * pix;
      for (int p = 0; p < pix; ++p) {
        df[p] = g * a[p];
        da[p] += g * (f[p] - avg);
      }
    }
  }
  if (req.feature_grad) {
    for (std::size_t k = 0; k < dfeat.size(); ++k) dfeat[k] += (*req.feature_grad)[k];
  }

  // Module backward: returns d(module input) given d(module output H).
  auto module_backward = [&](int i, const Tensor& dh) {
    const Level lv = level(i);
    const std::size_t pb = 2 + kModuleParams * static_cast<std::size_t>(i);
    const bool last = i == l - 1;
    const Tensor& trunk = slot(i, sTrunk);
    const Tensor& soft = slot(i, sSoft);
    const Tensor& in = i == 0 ? tape.t[kStemSlots - 1] : slot(i - 1, sOut);
    Tensor dtrunk(trunk.shape());
    Tensor dsoft(soft.shape());
    for (std::size_t k = 0; k < dh.size(); ++k) {
      dtrunk[k] = dh[k] * (1.0f + soft[k]);
      dsoft[k] = dh[k] * trunk[k] * soft[k] * (1.0f - soft[k]);
    }
    const auto& tg = lv.trunk;
    const auto& mg = lv.mask;
    Tensor dup(slot(i, sUp).shape());
    kernels::conv2d_backward(lv.expand, batch, slot(i, sUp).data(), params_[pb + 4].data(), dsoft.data(),
                             dup.data(), gp(pb + 4), gp(pb + 5));
    Tensor dmask(slot(i, sMaskPre).shape());
    kernels::upsample2_backward(batch, mg.out_channels, mg.height, mg.width, dup.data(), dmask.data());
    layers::relu_backward(slot(i, sMaskPre).span(), dmask.span());
    Tensor dpool(slot(i, sPool).shape());
    kernels::conv2d_backward(mg, batch, slot(i, sPool).data(), params_[pb + 2].data(), dmask.data(),
                             dpool.data(), gp(pb + 2), gp(pb + 3));
    Tensor din(in.shape());
    const std::size_t mi = 1 + 2 * static_cast<std::size_t>(i);
    kernels::maxpool2_backward(batch, tg.in_channels, tg.height, tg.width, dpool.data(), tape.ints[mi].data(),
                               din.data());
    const Tensor& tpre = slot(i, sTrunkPre);
    if (last) {
      for (std::size_t k = 0; k < dtrunk.size(); ++k) dtrunk[k] *= layers::sigmoid(tpre[k]);
    } else {
      layers::relu_backward(tpre.span(), dtrunk.span());
    }
    Tensor dtin(in.shape());
    kernels::conv2d_backward(tg, batch, in.data(), params_[pb].data(), dtrunk.data(), dtin.data(), gp(pb),
                             gp(pb + 1));
    for (std::size_t k = 0; k < din.size(); ++k) din[k] += dtin[k];
    return din;
  };

  // The last two modules share a resolution: the map module reads the
  // penultimate output directly.
  Tensor dcur = module_backward(l - 1, damap);
  for (std::size_t k = 0; k < dcur.size(); ++k) dcur[k] += dfeat[k];
  for (int i = l - 2; i >= 0; --i) {
    const Level lv = level(i);
    Tensor dh;
    if (lv.pool_after) {
      dh = Tensor(slot(i, sH).shape());
      kernels::maxpool2_backward(batch, lv.trunk.out_channels, lv.trunk.height, lv.trunk.width, dcur.data(),
                                 tape.ints[2 + 2 * static_cast<std::size_t>(i)].data(), dh.data());
    } else {
      dh = std::move(dcur);
    }
    dcur = module_backward(i, dh);
  }

  const auto sg = stem();
  Tensor dpost(tape.t[2].shape());
  kernels::maxpool2_backward(batch, sg.out_channels, sg.height, sg.width, dcur.data(), tape.ints[0].data(),
                             dpost.data());
  layers::relu_backward(tape.t[1].span(), dpost.span());
  Tensor dx;
  if (req.input_grad) dx = Tensor(tape.t[0].shape());
  kernels::conv2d_backward(sg, batch, tape.t[0].data(), params_[0].data(), dpost.data(),
                           req.input_grad ? dx.data() : nullptr, gp(0), gp(1));
  if (!req.input_grad) return {};
  return layers::nchw_to_nhwc(dx);
}

std::vector<LayerInfo> RanModel::probe_layers() const { return {{"head", num_classes_}}; }

Tensor RanModel::probe(const Tape& tape, const std::string& layer) const {
  if (layer != "head") throw ConfigError("unknown layer '" + layer + "' for ran");
  const Tensor& f = tape.t.back();
  const std::size_t ph = 2 + kModuleParams * static_cast<std::size_t>(modules());
  Tensor out({f.dim(0), num_classes_});
  layers::linear_forward(f.data(), f.dim(0), f.dim(1), params_[ph], params_[ph + 1], out.data());
  return out;
}

Tensor RanModel::feature_tap(const Tape& tape) const {
  Tensor f = tape.t[kStemSlots + kSlots * static_cast<std::size_t>(modules() - 2) + sH];
  f.reshape({f.dim(0), f.dim(1), f.dim(2) * f.dim(3)});
  return f;
}

std::vector<Tensor> RanModel::perceptual_features(const Tape& tape) const {
  std::vector<Tensor> out;
  for (int i = 0; i < modules(); ++i) {
    Tensor f = tape.t[kStemSlots + kSlots * static_cast<std::size_t>(i) + sH];
    f.reshape({f.dim(0), f.dim(1), f.dim(2) * f.dim(3)});
    out.push_back(std::move(f));
  }
  return out;
}

LayerInfo RanModel::prunable_layer() const {
  return {"module" + std::to_string(modules() - 2), arch_.attention_channels[static_cast<std::size_t>(modules() - 2)]};
}

Tensor RanModel::prunable_activations(const Tape& tape) const {
  const Tensor f = feature_tap(tape);
  const int batch = f.dim(0), c = f.dim(1), pix = f.dim(2);
  Tensor out({batch, c});
  for (int b = 0; b < batch; ++b)
    for (int ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (int p = 0; p < pix; ++p) s += f[(static_cast<std::size_t>(b) * c + ch) * pix + p];
      out[static_cast<std::size_t>(b) * c + ch] = static_cast<float>(s / pix);
    }
  return out;
}

Tensor RanModel::final_map(const Tensor& x) const {
  Tape tape;
  forward(x, &tape);
  Tensor m = tape.t[kStemSlots + kSlots * static_cast<std::size_t>(modules() - 1) + sH];
  m.reshape({m.dim(0), m.dim(2), m.dim(3)});
  return m;
}

}  // namespace qoebd
