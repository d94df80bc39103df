#include <cmath>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "qoebd/architectures.hpp"
#include "qoebd/attention.hpp"
#include "qoebd/error.hpp"
#include "qoebd/model.hpp"
#include "qoebd/train.hpp"

using namespace qoebd;

namespace {

std::vector<float> flatten(const Model& m) {
  std::vector<float> out;
  for (const auto& p : m.params()) out.insert(out.end(), p.vec().begin(), p.vec().end());
  return out;
}

void unflatten(Model& m, std::span<const float> v) {
  std::size_t off = 0;
  for (auto& p : m.params()) {
    std::copy_n(v.begin() + static_cast<long>(off), p.size(), p.data());
    off += p.size();
  }
}

Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, float lo = 0.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<float> u(lo, hi);
  for (auto& v : t.vec()) v = u(rng);
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

// Checks parameter and input gradients of <r, logits> coordinate by
// coordinate against finite differences. Coordinates whose difference
// quotients reveal a kink are skipped; max_skip bounds how many may be.
void check_model_gradients(Model& model, int batch, std::uint64_t seed, double h = 1e-2,
                           double max_skip = 0.1) {
  std::mt19937_64 rng(seed);
  // Zero biases put some pre-activations exactly on a ReLU kink; jitter them.
  std::uniform_real_distribution<float> jitter(-0.1f, 0.1f);
  for (auto& p : model.params())
    for (auto& v : p.vec()) v += jitter(rng);
  const ImageShape s = model.input_shape();
  const Tensor x = random_tensor({batch, s.height, s.width, s.channels}, rng);
  const Tensor r = random_tensor({batch, model.num_classes()}, rng, -1.0f, 1.0f);

  Tape tape;
  model.forward(x, &tape);
  auto grads = model.zero_grads();
  BackwardRequest req;
  req.param_grads = true;
  req.input_grad = true;
  const Tensor dx = model.backward(tape, r, req, &grads);
  std::vector<float> g;
  for (const auto& t : grads) g.insert(g.end(), t.vec().begin(), t.vec().end());

  const auto base = flatten(model);
  auto f_params = [&](std::span<const float> v) {
    unflatten(model, v);
    return dot(model.forward(x), r);
  };
  const auto pc = testing::check_gradient(f_params, base, g, h);
  unflatten(model, base);
  CHECK(pc.relative < 1e-3);
  CHECK(static_cast<double>(pc.skipped) <= max_skip * static_cast<double>(pc.checked + pc.skipped));

  auto f_input = [&](std::span<const float> v) {
    Tensor xi(x.shape(), std::vector<float>(v.begin(), v.end()));
    return dot(model.forward(xi), r);
  };
  const auto ic = testing::check_gradient(f_input, x.vec(), dx.vec(), h);
  CHECK(ic.relative < 1e-3);
  CHECK(static_cast<double>(ic.skipped) <= max_skip * static_cast<double>(ic.checked + ic.skipped));
}

ArchDescriptor tiny_cnn() {
  ArchDescriptor a;
  a.kind = ArchKind::cnn_small;
  a.conv_channels = {2, 3};
  a.fc_width = 5;
  return a;
}

ArchDescriptor tiny_vit() {
  ArchDescriptor a;
  a.kind = ArchKind::vit_lite;
  a.depth = 1;
  a.heads = 2;
  a.embed_dim = 8;
  a.patch = 4;
  a.mlp_dim = 8;
  return a;
}

ArchDescriptor tiny_ran() {
  ArchDescriptor a;
  a.kind = ArchKind::ran;
  a.attention_channels = {3, 2, 1};
  a.stem_channels = 3;
  return a;
}

}  // namespace

TEST_CASE("cnn_small shape contract and parameter budget") {
  auto m = build_victim(ArchDescriptor{}, 10, {32, 32, 3}, 1);
  std::mt19937_64 rng(3);
  const Tensor logits = m->forward(random_tensor({4, 32, 32, 3}, rng));
  CHECK(logits.shape() == std::vector<int>{4, 10});
  auto tiny = build_victim(tiny_cnn(), 3, {8, 8, 2}, 1);
  CHECK(tiny->param_count() < 1000);
}

TEST_CASE("same seed gives bit-identical initial parameters") {
  for (const auto& arch : {tiny_cnn(), tiny_vit(), tiny_ran()}) {
    auto a = build_victim(arch, 3, {8, 8, 2}, 42);
    auto b = build_victim(arch, 3, {8, 8, 2}, 42);
    auto c = build_victim(arch, 3, {8, 8, 2}, 43);
    CHECK(flatten(*a) == flatten(*b));
    CHECK(flatten(*a) != flatten(*c));
  }
}

TEST_CASE("vit_lite token count and patch divisibility") {
  ArchDescriptor a;
  a.kind = ArchKind::vit_lite;
  auto m = build_victim(a, 10, {224, 224, 3}, 0);
  auto* vit = dynamic_cast<VitLite*>(m.get());
  REQUIRE(vit);
  CHECK(vit->patch_count() + 1 == 197);
  CHECK_THROWS_AS(build_victim(a, 10, {30, 30, 3}, 0), ConfigError);
}

TEST_CASE("cnn_small gradients match finite differences") {
  auto m = build_victim(tiny_cnn(), 3, {8, 8, 2}, 5);
  check_model_gradients(*m, 3, 11);
}

TEST_CASE("vit_lite gradients match finite differences") {
  auto m = build_victim(tiny_vit(), 3, {8, 8, 2}, 5);
  CHECK(m->param_count() < 1000);
  check_model_gradients(*m, 2, 12);
}

TEST_CASE("ran gradients match finite differences") {
  auto m = build_victim(tiny_ran(), 3, {8, 8, 2}, 5);
  CHECK(m->param_count() < 1000);
  // Max-pool switch points are dense in this stack; use a finer step.
  check_model_gradients(*m, 2, 13, 2e-3, 0.25);
}

TEST_CASE("neuron boost scales only the selected unit's path") {
  auto m = build_victim(tiny_cnn(), 3, {8, 8, 2}, 5);
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({2, 8, 8, 2}, rng);
  const Tensor r = random_tensor({2, 3}, rng, -1.0f, 1.0f);
  Tape tape;
  m->forward(x, &tape);
  BackwardRequest plain;
  plain.input_grad = true;
  BackwardRequest unit = plain;
  unit.boost = NeuronBoost{{"fc1", 0}, 1.0f};
  CHECK(m->backward(tape, r, plain, nullptr).vec() == m->backward(tape, r, unit, nullptr).vec());
}

TEST_CASE("mhsa rows are stochastic and match a brute-force oracle") {
  std::mt19937_64 rng(9);
  const int t = 3, d = 4;
  MhsaWeights w;
  w.heads = 2;
  w.qkv_w = random_tensor({d, 3 * d}, rng, -1.0f, 1.0f);
  w.qkv_b = random_tensor({3 * d}, rng, -0.5f, 0.5f);
  w.out_w = random_tensor({d, d}, rng, -1.0f, 1.0f);
  w.out_b = random_tensor({d}, rng, -0.5f, 0.5f);
  const Tensor x = random_tensor({t, d}, rng, -1.0f, 1.0f);
  const MhsaResult r = mhsa_forward(x, w);

  // Oracle in double, element by element.
  const int dh = d / w.heads;
  std::vector<double> qkv(static_cast<std::size_t>(t * 3 * d));
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < 3 * d; ++j) {
      double s = w.qkv_b[static_cast<std::size_t>(j)];
      for (int k = 0; k < d; ++k) s += static_cast<double>(x[static_cast<std::size_t>(i * d + k)]) * w.qkv_w[static_cast<std::size_t>(k * 3 * d + j)];
      qkv[static_cast<std::size_t>(i * 3 * d + j)] = s;
    }
  std::vector<double> ctx(static_cast<std::size_t>(t * d), 0.0);
  for (int h = 0; h < w.heads; ++h)
    for (int i = 0; i < t; ++i) {
      std::vector<double> sc(static_cast<std::size_t>(t));
      double mx = -1e300;
      for (int j = 0; j < t; ++j) {
        double s = 0.0;
        for (int k = 0; k < dh; ++k)
          s += qkv[static_cast<std::size_t>(i * 3 * d + h * dh + k)] * qkv[static_cast<std::size_t>(j * 3 * d + d + h * dh + k)];
        sc[static_cast<std::size_t>(j)] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, sc[static_cast<std::size_t>(j)]);
      }
      double z = 0.0;
      for (auto& v : sc) z += (v = std::exp(v - mx));
      double row_sum = 0.0;
      for (int j = 0; j < t; ++j) {
        const double a = sc[static_cast<std::size_t>(j)] / z;
        CHECK(r.attention[static_cast<std::size_t>((h * t + i) * t + j)] == doctest::Approx(a).epsilon(1e-5));
        row_sum += r.attention[static_cast<std::size_t>((h * t + i) * t + j)];
        for (int k = 0; k < dh; ++k)
          ctx[static_cast<std::size_t>(i * d + h * dh + k)] += a * qkv[static_cast<std::size_t>(j * 3 * d + 2 * d + h * dh + k)];
      }
      CHECK(std::abs(row_sum - 1.0) <= 1e-5);
    }
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < d; ++j) {
      double s = w.out_b[static_cast<std::size_t>(j)];
      for (int k = 0; k < d; ++k) s += ctx[static_cast<std::size_t>(i * d + k)] * w.out_w[static_cast<std::size_t>(k * d + j)];
      CHECK(std::abs(r.output[static_cast<std::size_t>(i * d + j)] - s) <= 1e-5);
    }
}

TEST_CASE("mhsa degenerate cases") {
  std::mt19937_64 rng(4);
  const int d = 4;
  MhsaWeights w;
  w.heads = 2;
  w.qkv_w = random_tensor({d, 3 * d}, rng, -1.0f, 1.0f);
  w.qkv_b = Tensor({3 * d});
  w.out_w = random_tensor({d, d}, rng);
  w.out_b = Tensor({d});
  SUBCASE("single token attends to itself") {
    const MhsaResult r = mhsa_forward(random_tensor({1, d}, rng), w);
    CHECK(r.attention[0] == 1.0f);
    CHECK(r.attention[1] == 1.0f);
  }
  SUBCASE("equal keys give uniform attention") {
    Tensor x({2, d});
    for (int k = 0; k < d; ++k) x[static_cast<std::size_t>(k)] = x[static_cast<std::size_t>(d + k)] = 0.3f * (k + 1);
    const MhsaResult r = mhsa_forward(x, w);
    for (float a : r.attention.vec()) CHECK(a == doctest::Approx(0.5f).epsilon(1e-6));
  }
  SUBCASE("dimension mismatch") {
    MhsaWeights bad = w;
    bad.heads = 3;
    CHECK_THROWS_AS(mhsa_forward(random_tensor({2, d}, rng), bad), ConfigError);
    CHECK_THROWS_AS(mhsa_forward(random_tensor({2, d + 1}, rng), w), ConfigError);
  }
}

TEST_CASE("argmax ties go to the lower index") {
  const float a[] = {0.1f, 0.9f};
  const float b[] = {0.5f, 0.5f};
  CHECK(argmax(a) == 1);
  CHECK(argmax(b) == 0);
}

TEST_CASE("capture_activations is a pure read matching a manual affine map") {
  auto m = build_victim(ArchDescriptor{}, 10, {32, 32, 3}, 8);
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({16, 32, 32, 3}, rng);
  const auto before = flatten(*m);
  const Tensor act = capture_activations(*m, "fc1", x);
  CHECK(flatten(*m) == before);
  CHECK(act.shape() == std::vector<int>{16, 256});
  CHECK_THROWS_AS(capture_activations(*m, "nope", x), ConfigError);

  // fc1 pre-activation recomputed from the pooled conv features.
  Tape tape;
  m->forward(x, &tape);
  const Tensor& pooled = tape.t[12];  // last pooled block (see cnn.cpp layout)
  const auto& w = m->params()[8];
  const auto& b = m->params()[9];
  const int flat = w.dim(0), out = w.dim(1);
  double worst = 0.0;
  for (int n = 0; n < 16; ++n)
    for (int j = 0; j < out; j += 17) {
      double s = b[static_cast<std::size_t>(j)];
      for (int k = 0; k < flat; ++k)
        s += static_cast<double>(pooled[static_cast<std::size_t>(n) * flat + k]) * w[static_cast<std::size_t>(k) * out + j];
      worst = std::max(worst, std::abs(s - act[static_cast<std::size_t>(n) * out + j]));
    }
  CHECK(worst < 1e-4);

  // Zeroed weights leave the bias.
  for (auto& v : m->params()[8].vec()) v = 0.0f;
  for (std::size_t j = 0; j < 256; ++j) m->params()[9][j] = 0.01f * static_cast<float>(j);
  const Tensor zb = capture_activations(*m, "fc1", x);
  for (int n = 0; n < 16; ++n)
    for (int j = 0; j < 256; ++j) CHECK(zb[static_cast<std::size_t>(n) * 256 + j] == m->params()[9][static_cast<std::size_t>(j)]);

  // Duplicated sample, identical rows.
  Tensor dup({8, 32, 32, 3});
  for (int n = 0; n < 8; ++n) std::copy_n(x.data(), 32 * 32 * 3, dup.data() + n * 32 * 32 * 3);
  const Tensor da = capture_activations(*m, "fc1", dup);
  for (int n = 1; n < 8; ++n)
    CHECK(std::equal(da.row(n).begin(), da.row(n).end(), da.row(0).begin()));
}

TEST_CASE("checkpoint round trip") {
  auto m = build_victim(tiny_vit(), 3, {8, 8, 2}, 77);
  const auto dir = std::filesystem::temp_directory_path() / "qoebd_ckpt_test";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir / "model", *m, {{"epoch", 3}});
  nlohmann::json manifest;
  auto back = load_checkpoint(dir / "model", &manifest);
  CHECK(flatten(*back) == flatten(*m));
  CHECK(back->arch() == m->arch());
  CHECK(manifest["epoch"] == 3);
  std::filesystem::remove_all(dir);
}
