#include <cmath>
#include <numeric>
#include <random>

#include "layers.hpp"
#include "qoebd/architectures.hpp"
#include "qoebd/error.hpp"

namespace qoebd {

namespace {

using kernels::Trans;

constexpr std::size_t kBlockParams = 12;
constexpr std::size_t kBlockBase = 4;

// Parameter offsets inside one encoder block.
enum BlockParam : std::size_t {
  kLn1G, kLn1B, kQkvW, kQkvB, kProjW, kProjB, kLn2G, kLn2B, kFc1W, kFc1B, kFc2W, kFc2B
};

// Tape slots per encoder block.
enum BlockSlot : std::size_t {
  sLn1Hat, sLn1Istd, sLn1Out, sQkv, sAttn, sCtx, sMid, sLn2Hat, sLn2Istd, sLn2Out, sMlpPre, sMlpAct,
  sOut, kBlockSlots
};

// Scaled dot-product attention for `batch` sequences of `tokens` rows.
// qkv: (batch*tokens) x 3d; attn: batch x heads x tokens x tokens; ctx:
// (batch*tokens) x d.
void attention_forward(const float* qkv, int batch, int tokens, int d, int heads, float* attn,
                       float* ctx) {
  const int dh = d / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const long tt = static_cast<long>(tokens) * tokens;
#pragma omp parallel for schedule(static) collapse(2)
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const float* q = qkv + static_cast<long>(b) * tokens * 3 * d + h * dh;
      const float* k = q + d;
      const float* v = q + 2 * d;
      float* a = attn + (static_cast<long>(b) * heads + h) * tt;
      kernels::gemm(Trans::no, Trans::yes, tokens, tokens, dh, scale, q, 3 * d, k, 3 * d, 0.0f, a,
                    tokens);
      layers::softmax_rows(a, tokens, tokens);
      kernels::gemm(Trans::no, Trans::no, tokens, dh, tokens, 1.0f, a, tokens, v, 3 * d, 0.0f,
                    ctx + static_cast<long>(b) * tokens * d + h * dh, d);
    }
  }
}

void attention_backward(const float* qkv, const float* attn, const float* dctx, int batch,
                        int tokens, int d, int heads, float* dqkv) {
  const int dh = d / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const long tt = static_cast<long>(tokens) * tokens;
#pragma omp parallel for schedule(static) collapse(2)
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const long row0 = static_cast<long>(b) * tokens;
      const float* q = qkv + row0 * 3 * d + h * dh;
      const float* k = q + d;
      const float* v = q + 2 * d;
      const float* a = attn + (static_cast<long>(b) * heads + h) * tt;
      const float* dc = dctx + row0 * d + h * dh;
      float* dq = dqkv + row0 * 3 * d + h * dh;
      float* dk = dq + d;
      float* dv = dq + 2 * d;
      std::vector<float> ds(static_cast<std::size_t>(tt));
      kernels::gemm(Trans::no, Trans::yes, tokens, tokens, dh, 1.0f, dc, d, v, 3 * d, 0.0f, ds.data(),
                    tokens);
      kernels::gemm(Trans::yes, Trans::no, tokens, dh, tokens, 1.0f, a, tokens, dc, d, 0.0f, dv,
                    3 * d);
      for (int i = 0; i < tokens; ++i) {
        float* dsr = ds.data() + static_cast<long>(i) * tokens;
        const float* ar = a + static_cast<long>(i) * tokens;
        double dot = 0.0;
        for (int j = 0; j < tokens; ++j) dot += static_cast<double>(dsr[j]) * ar[j];
        for (int j = 0; j < tokens; ++j) dsr[j] = ar[j] * (dsr[j] - static_cast<float>(dot));
      }
      kernels::gemm(Trans::no, Trans::no, tokens, dh, tokens, scale, ds.data(), tokens, k, 3 * d,
                    0.0f, dq, 3 * d);
      kernels::gemm(Trans::yes, Trans::no, tokens, dh, tokens, scale, ds.data(), tokens, q, 3 * d,
                    0.0f, dk, 3 * d);
    }
  }
}

}  // namespace

MhsaResult mhsa_forward(const Tensor& tokens, const MhsaWeights& w) {
  if (tokens.rank() != 2) throw ConfigError("mhsa_forward expects a tokens x d matrix");
  const int t = tokens.dim(0);
  const int d = tokens.dim(1);
  if (w.heads < 1 || d % w.heads != 0) throw ConfigError("embedding width not divisible by heads");
  if (w.qkv_w.rank() != 2 || w.qkv_w.dim(0) != d || w.qkv_w.dim(1) != 3 * d ||
      w.qkv_b.size() != static_cast<std::size_t>(3 * d) || w.out_w.rank() != 2 ||
      w.out_w.dim(0) != d || w.out_w.dim(1) != d || w.out_b.size() != static_cast<std::size_t>(d)) {
    throw ConfigError("mhsa weight dimensions do not match token width");
  }
  Tensor qkv({t, 3 * d});
  layers::linear_forward(tokens.data(), t, d, w.qkv_w, w.qkv_b, qkv.data());
  MhsaResult r;
  r.attention = Tensor({w.heads, t, t});
  Tensor ctx({t, d});
  attention_forward(qkv.data(), 1, t, d, w.heads, r.attention.data(), ctx.data());
  r.output = Tensor({t, d});
  layers::linear_forward(ctx.data(), t, d, w.out_w, w.out_b, r.output.data());
  return r;
}

VitLite::VitLite(const ArchDescriptor& arch, ImageShape input, int num_classes, std::uint64_t seed)
    : Model(arch, input, num_classes) {
  if (arch.patch < 1 || input.height % arch.patch != 0 || input.width % arch.patch != 0) {
    throw ConfigError("vit_lite patch size " + std::to_string(arch.patch) + " does not divide input " +
                      std::to_string(input.height) + "x" + std::to_string(input.width));
  }
  if (arch.heads < 1 || arch.embed_dim % arch.heads != 0) {
    throw ConfigError("vit_lite embed_dim must be divisible by heads");
  }
  if (arch.depth < 1) throw ConfigError("vit_lite needs at least one encoder block");
  const int d = arch.embed_dim;
  const int patch_in = arch.patch * arch.patch * input.channels;
  std::mt19937_64 rng(seed);
  layers::init_normal(add_param("patch.w", {patch_in, d}), std::sqrt(1.0f / static_cast<float>(patch_in)), rng);
  add_param("patch.b", {d});
  layers::init_normal(add_param("cls", {d}), 0.02f, rng);
  layers::init_normal(add_param("pos", {patch_count() + 1, d}), 0.02f, rng);
  for (int i = 0; i < arch.depth; ++i) {
    const std::string pre = "block" + std::to_string(i) + ".";
    add_param(pre + "ln1.g", {d}).fill(1.0f);
    add_param(pre + "ln1.b", {d});
    layers::init_normal(add_param(pre + "qkv.w", {d, 3 * d}), std::sqrt(1.0f / static_cast<float>(d)), rng);
    add_param(pre + "qkv.b", {3 * d});
    layers::init_normal(add_param(pre + "proj.w", {d, d}), std::sqrt(0.5f / static_cast<float>(d)), rng);
    add_param(pre + "proj.b", {d});
    add_param(pre + "ln2.g", {d}).fill(1.0f);
    add_param(pre + "ln2.b", {d});
    layers::init_normal(add_param(pre + "fc1.w", {d, arch.mlp_dim}), std::sqrt(2.0f / static_cast<float>(d)), rng);
    add_param(pre + "fc1.b", {arch.mlp_dim});
    layers::init_normal(add_param(pre + "fc2.w", {arch.mlp_dim, d}),
                        std::sqrt(0.5f / static_cast<float>(arch.mlp_dim)), rng);
    add_param(pre + "fc2.b", {d});
  }
  add_param("lnf.g", {d}).fill(1.0f);
  add_param("lnf.b", {d});
  layers::init_normal(add_param("head.w", {d, num_classes}), std::sqrt(1.0f / static_cast<float>(d)), rng);
  add_param("head.b", {num_classes});
}

int VitLite::patch_count() const {
  return (input_.height / arch_.patch) * (input_.width / arch_.patch);
}

int VitLite::p(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<int>(i);
  throw ConfigError("no parameter " + name);
}

MhsaWeights VitLite::attention_weights(int block) const {
  const std::size_t base = kBlockBase + kBlockParams * static_cast<std::size_t>(block);
  MhsaWeights w;
  w.heads = arch_.heads;
  w.qkv_w = params_[base + kQkvW];
  w.qkv_b = params_[base + kQkvB];
  w.out_w = params_[base + kProjW];
  w.out_b = params_[base + kProjB];
  return w;
}

Tensor VitLite::forward(const Tensor& x, Tape* tape) const { return run(x, nullptr, tape); }

Tensor VitLite::forward_patched(const Tensor& x, const PatchOps& ops) const {
  if (ops.source.size() != ops.slot.size()) throw ConfigError("patch ops source/slot size mismatch");
  for (std::size_t j = 0; j < ops.source.size(); ++j) {
    if (ops.source[j] < 0 || ops.source[j] >= patch_count() || ops.slot[j] < 0 ||
        ops.slot[j] >= patch_count())
      throw ConfigError("patch op index out of range");
  }
  return run(x, &ops, nullptr);
}

// Tape layout: t[0] patches, t[1] embedded tokens, then kBlockSlots per block,
// then the final-norm xhat, inverse std and normalised class tokens.
Tensor VitLite::run(const Tensor& x, const PatchOps* ops, Tape* tape) const {
  const int batch = x.dim(0);
  const int pz = arch_.patch;
  const int c = input_.channels;
  const int gw = input_.width / pz;
  const int n = patch_count();
  const int patch_in = pz * pz * c;
  const int d = arch_.embed_dim;
  const int m = arch_.mlp_dim;
  const int heads = arch_.heads;

  Tensor patches({batch * n, patch_in});
  for (int b = 0; b < batch; ++b)
    for (int j = 0; j < n; ++j) {
      const int py = j / gw, px = j % gw;
      float* dst = patches.data() + (static_cast<long>(b) * n + j) * patch_in;
      for (int dy = 0; dy < pz; ++dy)
        for (int dx = 0; dx < pz; ++dx)
          for (int ch = 0; ch < c; ++ch)
            dst[(dy * pz + dx) * c + ch] =
                x[((static_cast<std::size_t>(b) * input_.height + py * pz + dy) * input_.width + px * pz + dx) * c + ch];
    }
  Tensor emb({batch * n, d});
  layers::linear_forward(patches.data(), batch * n, patch_in, params_[0], params_[1], emb.data());

  const int kept = ops ? static_cast<int>(ops->source.size()) : n;
  const int tokens = kept + 1;
  const int rows = batch * tokens;
  Tensor h({rows, d});
  const Tensor& cls = params_[2];
  const Tensor& pos = params_[3];
  for (int b = 0; b < batch; ++b) {
    float* row = h.data() + static_cast<long>(b) * tokens * d;
    for (int k = 0; k < d; ++k) row[k] = cls[static_cast<std::size_t>(k)] + pos[static_cast<std::size_t>(k)];
    for (int j = 0; j < kept; ++j) {
      const int src = ops ? ops->source[static_cast<std::size_t>(j)] : j;
      const int slot = ops ? ops->slot[static_cast<std::size_t>(j)] : j;
      const float* e = emb.data() + (static_cast<long>(b) * n + src) * d;
      const float* pp = pos.data() + static_cast<long>(slot + 1) * d;
      float* dst = row + static_cast<long>(j + 1) * d;
      for (int k = 0; k < d; ++k) dst[k] = e[k] + pp[k];
    }
  }
  if (tape) {
    tape->t.clear();
    tape->ints.clear();
    tape->t.push_back(std::move(patches));
    tape->t.push_back(h);
  }

  for (int i = 0; i < arch_.depth; ++i) {
    const std::size_t pb = kBlockBase + kBlockParams * static_cast<std::size_t>(i);
    Tensor ln1_hat({rows, d}), ln1_istd({rows}), ln1_out({rows, d});
    layers::layernorm_forward(h.data(), rows, d, params_[pb + kLn1G], params_[pb + kLn1B],
                              ln1_out.data(), ln1_hat.data(), ln1_istd.data());
    Tensor qkv({rows, 3 * d});
    layers::linear_forward(ln1_out.data(), rows, d, params_[pb + kQkvW], params_[pb + kQkvB], qkv.data());
    Tensor attn({batch, heads, tokens, tokens});
    Tensor ctx({rows, d});
    attention_forward(qkv.data(), batch, tokens, d, heads, attn.data(), ctx.data());
    Tensor mid({rows, d});
    layers::linear_forward(ctx.data(), rows, d, params_[pb + kProjW], params_[pb + kProjB], mid.data());
    for (std::size_t k = 0; k < mid.size(); ++k) mid[k] += h[k];

    Tensor ln2_hat({rows, d}), ln2_istd({rows}), ln2_out({rows, d});
    layers::layernorm_forward(mid.data(), rows, d, params_[pb + kLn2G], params_[pb + kLn2B],
                              ln2_out.data(), ln2_hat.data(), ln2_istd.data());
    Tensor pre({rows, m});
    layers::linear_forward(ln2_out.data(), rows, d, params_[pb + kFc1W], params_[pb + kFc1B], pre.data());
    Tensor act(pre.shape());
    for (std::size_t k = 0; k < pre.size(); ++k) act[k] = layers::gelu(pre[k]);
    if (i == arch_.depth - 1 && !pruned_.empty()) {
      for (int r = 0; r < rows; ++r)
        for (int u = 0; u < m; ++u)
          if (is_pruned(u)) act[static_cast<std::size_t>(r) * m + u] = 0.0f;
    }
    Tensor out({rows, d});
    layers::linear_forward(act.data(), rows, m, params_[pb + kFc2W], params_[pb + kFc2B], out.data());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += mid[k];

    if (tape) {
      tape->t.push_back(std::move(ln1_hat));
      tape->t.push_back(std::move(ln1_istd));
      tape->t.push_back(std::move(ln1_out));
      tape->t.push_back(std::move(qkv));
      tape->t.push_back(std::move(attn));
      tape->t.push_back(std::move(ctx));
      tape->t.push_back(std::move(mid));
      tape->t.push_back(std::move(ln2_hat));
      tape->t.push_back(std::move(ln2_istd));
      tape->t.push_back(std::move(ln2_out));
      tape->t.push_back(std::move(pre));
      tape->t.push_back(std::move(act));
      tape->t.push_back(out);
    }
    h = std::move(out);
  }

  const std::size_t pf = kBlockBase + kBlockParams * static_cast<std::size_t>(arch_.depth);
  Tensor cls_rows({batch, d});
  for (int b = 0; b < batch; ++b)
    std::copy_n(h.data() + static_cast<long>(b) * tokens * d, d, cls_rows.data() + static_cast<long>(b) * d);
  Tensor lnf_hat({batch, d}), lnf_istd({batch}), lnf_out({batch, d});
  layers::layernorm_forward(cls_rows.data(), batch, d, params_[pf], params_[pf + 1], lnf_out.data(),
                            lnf_hat.data(), lnf_istd.data());
  Tensor logits({batch, num_classes_});
  layers::linear_forward(lnf_out.data(), batch, d, params_[pf + 2], params_[pf + 3], logits.data());
  if (tape) {
    tape->t.push_back(std::move(lnf_hat));
    tape->t.push_back(std::move(lnf_istd));
    tape->t.push_back(std::move(lnf_out));
    tape->ints.push_back({tokens});
  }
  return logits;
}

Tensor VitLite::backward(const Tape& tape, const Tensor& dlogits, const BackwardRequest& req,
                         std::vector<Tensor>* grads) const {
  const int batch = dlogits.dim(0);
  const int pz = arch_.patch;
  const int c = input_.channels;
  const int gw = input_.width / pz;
  const int n = patch_count();
  const int patch_in = pz * pz * c;
  const int d = arch_.embed_dim;
  const int m = arch_.mlp_dim;
  const int heads = arch_.heads;
  const int tokens = tape.ints.back()[0];
  if (tokens != n + 1) throw ConfigError("vit_lite backward needs an unmodified patch sequence");
  const int rows = batch * tokens;
  const bool pg = req.param_grads && grads;
  auto gp = [&](std::size_t i) { return pg ? (*grads)[i].data() : nullptr; };

  const std::size_t pf = kBlockBase + kBlockParams * static_cast<std::size_t>(arch_.depth);
  const std::size_t tf = 2 + kBlockSlots * static_cast<std::size_t>(arch_.depth);

  Tensor dl = dlogits;
  if (req.boost && req.boost->neuron.layer == "head") {
    const int u = req.boost->neuron.unit;
    for (int b = 0; b < batch; ++b) dl[static_cast<std::size_t>(b) * num_classes_ + u] *= req.boost->factor;
  }
  Tensor dlnf({batch, d});
  layers::linear_backward(tape.t[tf + 2].data(), batch, d, params_[pf + 2], dl.data(), dlnf.data(),
                          gp(pf + 2), gp(pf + 3));
  Tensor dcls({batch, d});
  layers::layernorm_backward(tape.t[tf].data(), tape.t[tf + 1].data(), batch, d, params_[pf],
                             dlnf.data(), dcls.data(), gp(pf), gp(pf + 1));
  Tensor dh({rows, d});
  for (int b = 0; b < batch; ++b)
    std::copy_n(dcls.data() + static_cast<long>(b) * d, d, dh.data() + static_cast<long>(b) * tokens * d);
  if (req.feature_grad) {
    const Tensor& fg = *req.feature_grad;  // batch x d x tokens
    for (int b = 0; b < batch; ++b)
      for (int k = 0; k < d; ++k)
        for (int t = 0; t < tokens; ++t)
          dh[(static_cast<std::size_t>(b) * tokens + t) * d + k] +=
              fg[(static_cast<std::size_t>(b) * d + k) * tokens + t];
  }

  for (int i = arch_.depth - 1; i >= 0; --i) {
    const std::size_t pb = kBlockBase + kBlockParams * static_cast<std::size_t>(i);
    const std::size_t tb = 2 + kBlockSlots * static_cast<std::size_t>(i);
    auto slot = [&](std::size_t s) -> const Tensor& { return tape.t[tb + s]; };
    const Tensor& block_in = i == 0 ? tape.t[1] : tape.t[tb - kBlockSlots + sOut];

    // MLP branch: out = mid + fc2(gelu(fc1(ln2(mid))))
    Tensor dact({rows, m});
    layers::linear_backward(slot(sMlpAct).data(), rows, m, params_[pb + kFc2W], dh.data(), dact.data(),
                            gp(pb + kFc2W), gp(pb + kFc2B));
    const Tensor& pre = slot(sMlpPre);
    for (std::size_t k = 0; k < dact.size(); ++k) dact[k] *= layers::gelu_grad(pre[k]);
    if (i == arch_.depth - 1 && !pruned_.empty()) {
      for (int r = 0; r < rows; ++r)
        for (int u = 0; u < m; ++u)
          if (is_pruned(u)) dact[static_cast<std::size_t>(r) * m + u] = 0.0f;
    }
    Tensor dln2({rows, d});
    layers::linear_backward(slot(sLn2Out).data(), rows, d, params_[pb + kFc1W], dact.data(), dln2.data(),
                            gp(pb + kFc1W), gp(pb + kFc1B));
    Tensor dmid({rows, d});
    layers::layernorm_backward(slot(sLn2Hat).data(), slot(sLn2Istd).data(), rows, d, params_[pb + kLn2G],
                               dln2.data(), dmid.data(), gp(pb + kLn2G), gp(pb + kLn2B));
    for (std::size_t k = 0; k < dmid.size(); ++k) dmid[k] += dh[k];

    // Attention branch: mid = in + proj(attn(qkv(ln1(in))))
    Tensor dctx({rows, d});
    layers::linear_backward(slot(sCtx).data(), rows, d, params_[pb + kProjW], dmid.data(), dctx.data(),
                            gp(pb + kProjW), gp(pb + kProjB));
    Tensor dqkv({rows, 3 * d});
    attention_backward(slot(sQkv).data(), slot(sAttn).data(), dctx.data(), batch, tokens, d, heads,
                       dqkv.data());
    Tensor dln1({rows, d});
    layers::linear_backward(slot(sLn1Out).data(), rows, d, params_[pb + kQkvW], dqkv.data(), dln1.data(),
                            gp(pb + kQkvW), gp(pb + kQkvB));
    Tensor din({rows, d});
    layers::layernorm_backward(slot(sLn1Hat).data(), slot(sLn1Istd).data(), rows, d, params_[pb + kLn1G],
                               dln1.data(), din.data(), gp(pb + kLn1G), gp(pb + kLn1B));
    for (std::size_t k = 0; k < din.size(); ++k) din[k] += dmid[k];
    (void)block_in;
    dh = std::move(din);
  }

  // Token assembly: h[b,0] = cls + pos[0]; h[b,1+j] = emb[b,j] + pos[1+j].
  if (pg) {
    float* dcls_p = (*grads)[2].data();
    float* dpos = (*grads)[3].data();
    for (int b = 0; b < batch; ++b)
      for (int t = 0; t < tokens; ++t)
        for (int k = 0; k < d; ++k) {
          const float g = dh[(static_cast<std::size_t>(b) * tokens + t) * d + k];
          dpos[static_cast<std::size_t>(t) * d + k] += g;
          if (t == 0) dcls_p[k] += g;
        }
  }
  if (!pg && !req.input_grad) return {};
  Tensor demb({batch * n, d});
  for (int b = 0; b < batch; ++b)
    std::copy_n(dh.data() + (static_cast<long>(b) * tokens + 1) * d, static_cast<long>(n) * d,
                demb.data() + static_cast<long>(b) * n * d);
  Tensor dpatches;
  if (req.input_grad) dpatches = Tensor({batch * n, patch_in});
  layers::linear_backward(tape.t[0].data(), batch * n, patch_in, params_[0], demb.data(),
                          req.input_grad ? dpatches.data() : nullptr, gp(0), gp(1));
  if (!req.input_grad) return {};
  Tensor dx({batch, input_.height, input_.width, c});
  for (int b = 0; b < batch; ++b)
    for (int j = 0; j < n; ++j) {
      const int py = j / gw, px = j % gw;
      const float* src = dpatches.data() + (static_cast<long>(b) * n + j) * patch_in;
      for (int dy = 0; dy < pz; ++dy)
        for (int dxx = 0; dxx < pz; ++dxx)
          for (int ch = 0; ch < c; ++ch)
            dx[((static_cast<std::size_t>(b) * input_.height + py * pz + dy) * input_.width + px * pz + dxx) * c + ch] =
                src[(dy * pz + dxx) * c + ch];
    }
  return dx;
}

std::vector<LayerInfo> VitLite::probe_layers() const {
  std::vector<LayerInfo> out{{"head", num_classes_}};
  for (int i = 0; i < arch_.depth; ++i) out.push_back({"cls" + std::to_string(i), arch_.embed_dim});
  return out;
}

Tensor VitLite::probe(const Tape& tape, const std::string& layer) const {
  const int d = arch_.embed_dim;
  const std::size_t tf = 2 + kBlockSlots * static_cast<std::size_t>(arch_.depth);
  const int tokens = tape.ints.back()[0];
  if (layer == "head") {
    const Tensor& lnf_out = tape.t[tf + 2];
    const std::size_t pf = kBlockBase + kBlockParams * static_cast<std::size_t>(arch_.depth);
    Tensor out({lnf_out.dim(0), num_classes_});
    layers::linear_forward(lnf_out.data(), lnf_out.dim(0), d, params_[pf + 2], params_[pf + 3], out.data());
    return out;
  }
  if (layer.rfind("cls", 0) == 0) {
    int i = -1;
    try {
      i = std::stoi(layer.substr(3));
    } catch (const std::exception&) {
    }
    if (i >= 0 && i < arch_.depth) {
      const Tensor& out = tape.t[2 + kBlockSlots * static_cast<std::size_t>(i) + sOut];
      const int batch = out.dim(0) / tokens;
      Tensor r({batch, d});
      for (int b = 0; b < batch; ++b)
        std::copy_n(out.data() + static_cast<long>(b) * tokens * d, d, r.data() + static_cast<long>(b) * d);
      return r;
    }
  }
  throw ConfigError("unknown layer '" + layer + "' for vit_lite");
}

Tensor VitLite::feature_tap(const Tape& tape) const {
  return perceptual_features(tape).back();
}

std::vector<Tensor> VitLite::perceptual_features(const Tape& tape) const {
  const int d = arch_.embed_dim;
  const int tokens = tape.ints.back()[0];
  std::vector<Tensor> out;
  for (int i = 0; i < arch_.depth; ++i) {
    const Tensor& h = tape.t[2 + kBlockSlots * static_cast<std::size_t>(i) + sOut];
    const int batch = h.dim(0) / tokens;
    Tensor f({batch, d, tokens});
    for (int b = 0; b < batch; ++b)
      for (int t = 0; t < tokens; ++t)
        for (int k = 0; k < d; ++k)
          f[(static_cast<std::size_t>(b) * d + k) * tokens + t] = h[(static_cast<std::size_t>(b) * tokens + t) * d + k];
    out.push_back(std::move(f));
  }
  return out;
}

LayerInfo VitLite::prunable_layer() const {
  return {"block" + std::to_string(arch_.depth - 1) + ".mlp", arch_.mlp_dim};
}

Tensor VitLite::prunable_activations(const Tape& tape) const {
  const int m = arch_.mlp_dim;
  const int tokens = tape.ints.back()[0];
  const Tensor& act = tape.t[2 + kBlockSlots * static_cast<std::size_t>(arch_.depth - 1) + sMlpAct];
  const int batch = act.dim(0) / tokens;
  Tensor out({batch, m});
  for (int b = 0; b < batch; ++b)
    for (int t = 0; t < tokens; ++t)
      for (int u = 0; u < m; ++u)
        out[static_cast<std::size_t>(b) * m + u] +=
            act[(static_cast<std::size_t>(b) * tokens + t) * m + u] / static_cast<float>(tokens);
  return out;
}

}  // namespace qoebd
