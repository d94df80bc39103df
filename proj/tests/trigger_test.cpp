#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "qoebd/error.hpp"
#include "qoebd/attention.hpp"
#include "qoebd/trigger.hpp"
#include "toy_model.hpp"

using namespace qoebd;
namespace fs = std::filesystem;

namespace {

ImageDataset dim_set(ImageShape s, std::size_t n, float hi, int classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, hi);
  ImageDataset ds;
  ds.name = "dim";
  ds.shape = s;
  ds.num_classes = classes;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < s.size(); ++k) ds.pixels.push_back(u(rng));
    ds.labels.push_back(static_cast<int>(i % static_cast<std::size_t>(classes)));
  }
  return ds;
}

std::vector<PixelCoord> corner(ImageShape s, int side) {
  return baseline_mask(s, side, BaselineMaskKind::corner).coords;
}

// Target logit minus every other logit is 10 (sum over the mask - 2.2).
testing::ToyMlp planted(ImageShape s, const std::vector<PixelCoord>& mask, int target, int classes) {
  testing::ToyMlp m(s, 1, classes);
  for (const auto& p : mask) m.w1((p.row * s.width + p.col) * s.channels, 0) = 1.0f;
  m.b1(0) = 10.0f;
  m.w2(0, target) = 10.0f;
  m.b2(target) = -122.0f;
  return m;
}

Tensor batch_of(const ImageDataset& ds, std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return gather_batch(ds, idx, ds.shape);
}

}  // namespace

TEST_CASE("neuron selection: positive count, then mean, then index") {
  // Ten samples; units fire 5, 9 and 9 times.
  Tensor pre({10, 3});
  for (int r = 0; r < 10; ++r) {
    pre[static_cast<std::size_t>(r * 3 + 0)] = r < 5 ? 4.0f : -1.0f;
    pre[static_cast<std::size_t>(r * 3 + 1)] = r < 9 ? 1.0f : -1.0f;
    pre[static_cast<std::size_t>(r * 3 + 2)] = r < 9 ? 1.5f : -1.0f;
  }
  CHECK(select_neuron_from(pre, "fc1") == NeuronHandle{"fc1", 2});
  for (int r = 0; r < 10; ++r) pre[static_cast<std::size_t>(r * 3 + 2)] = pre[static_cast<std::size_t>(r * 3 + 1)];
  CHECK(select_neuron_from(pre, "fc1").unit == 1);

  std::mt19937_64 rng(2);
  std::normal_distribution<float> n;
  Tensor rnd({40, 7});
  for (auto& v : rnd.vec()) v = n(rng);
  const auto pick = select_neuron_from(rnd, "x");
  std::vector<int> order(40);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  Tensor perm({40, 7});
  for (int r = 0; r < 40; ++r)
    for (int u = 0; u < 7; ++u) perm[static_cast<std::size_t>(r * 7 + u)] = rnd[static_cast<std::size_t>(order[static_cast<std::size_t>(r)] * 7 + u)];
  CHECK(select_neuron_from(perm, "x") == pick);
  CHECK_THROWS_AS(select_neuron_from(Tensor({0, 3}), "x"), DataError);
}

TEST_CASE("vit neuron selection uses the head") {
  ArchDescriptor a;
  a.kind = ArchKind::vit_lite;
  a.depth = 1;
  a.heads = 2;
  a.embed_dim = 8;
  a.patch = 4;
  a.mlp_dim = 16;
  const ImageShape s{8, 8, 3};
  const auto m = build_victim(a, 4, s, 1);
  const auto ds = make_synthetic({6, s, 4, 2});
  CHECK(select_neuron(*m, batch_of(ds, 6)).layer == "head");
  CHECK(select_neuron(*m, batch_of(ds, 6), m->key_layer()).layer == "head");
}

TEST_CASE("qoe weights and default theta") {
  CHECK(default_theta("cifar10") == 3.0);
  CHECK(default_theta("CIFAR-100") == 4.0);
  CHECK(default_theta("gtsrb") == 21.0);
  CHECK(default_theta("shapes-surrogate") == 3.0);
  QoEWeights w;
  CHECK_NOTHROW(w.validate());
  w.theta = 0.5;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = {};
  w.lambda = -1;
  CHECK_THROWS_AS(w.validate(), ConfigError);
}

TEST_CASE("qoe loss gradient matches finite differences") {
  const ImageShape s{8, 8, 1};
  testing::ToyMlp m(s, 6, 3);
  std::mt19937_64 rng(7);
  std::normal_distribution<float> n(0.0f, 0.5f);
  for (auto& p : m.params())
    for (auto& v : p.vec()) v = n(rng);
  const auto ds = dim_set(s, 4, 1.0f, 3, 1);
  const Tensor x = batch_of(ds, 4);
  TriggerSpec tr;
  tr.shape = s;
  tr.mask = corner(s, 2);
  tr.values = {0.3f, 0.55f, 0.7f, 0.45f};
  tr.transparency = 0.4f;
  QoEWeights w;
  w.lambda = 0.5;
  w.eta = 0.5;
  const auto l = qoe_loss(m, tr, x, 1, w, std::nullopt);
  CHECK(l.total == doctest::Approx(l.ce + w.lambda * l.linf + w.eta * (1.0 - l.ssim)));
  auto f = [&](std::span<const float> v) {
    TriggerSpec t2 = tr;
    t2.values.assign(v.begin(), v.end());
    return qoe_loss(m, t2, x, 1, w, std::nullopt, {}, false).total;
  };
  const auto r = testing::check_gradient(f, tr.values, l.grad, 1e-3);
  CHECK(r.checked >= 3);
  CHECK(r.relative <= 1e-3);
}

TEST_CASE("gradient boost") {
  const ImageShape s{6, 6, 1};
  const auto ds = dim_set(s, 5, 1.0f, 2, 3);
  const Tensor x = batch_of(ds, 5);
  TriggerSpec tr;
  tr.shape = s;
  tr.mask = corner(s, 2);
  tr.values = {0.2f, 0.4f, 0.6f, 0.8f};
  tr.transparency = 0.0f;
  QoEWeights plain;
  plain.lambda = 0.0;
  plain.eta = 0.0;

  SUBCASE("theta one is the identity") {
    testing::ToyMlp m(s, 4, 2);
    std::mt19937_64 rng(1);
    std::normal_distribution<float> n;
    for (auto& p : m.params())
      for (auto& v : p.vec()) v = n(rng) + 0.2f;
    QoEWeights one = plain;
    one.theta = 1.0;
    CHECK(qoe_loss(m, tr, x, 0, one, NeuronHandle{"hidden", 2}).grad ==
          qoe_loss(m, tr, x, 0, one, std::nullopt).grad);
  }
  SUBCASE("single path scales by exactly theta") {
    testing::ToyMlp m(s, 1, 2);
    for (int i = 0; i < 36; ++i) m.w1(i, 0) = 0.1f * static_cast<float>(i % 5);
    m.b1(0) = 1.0f;
    m.w2(0, 1) = 2.0f;
    QoEWeights boosted = plain;
    boosted.theta = 3.0;
    const auto g1 = qoe_loss(m, tr, x, 0, plain, std::nullopt).grad;
    const auto g3 = qoe_loss(m, tr, x, 0, boosted, NeuronHandle{"hidden", 0}).grad;
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g3[i] == doctest::Approx(3.0 * g1[i]).epsilon(1e-6));
  }
}

TEST_CASE("qoe loss terms") {
  const ImageShape s{8, 8, 1};
  testing::ToyMlp m(s, 2, 2);
  const auto ds = dim_set(s, 3, 1.0f, 2, 5);
  const Tensor x = batch_of(ds, 1);
  TriggerSpec tr;
  tr.shape = s;
  tr.mask = corner(s, 2);
  tr.transparency = 0.0f;
  // Values equal to the clean pixels: nothing moves.
  for (const auto& p : tr.mask) tr.values.push_back(x[static_cast<std::size_t>(p.row * 8 + p.col)]);
  auto l = qoe_loss(m, tr, x, 1, {}, std::nullopt);
  CHECK(l.linf == 0.0);
  CHECK(l.ssim == 1.0);
  CHECK(l.total == doctest::Approx(l.ce));
  // A zero model gives uniform logits: cross-entropy is log(2).
  CHECK(l.ce == doctest::Approx(std::log(2.0)));
  for (auto& v : tr.values) v = 1.0f;
  l = qoe_loss(m, tr, x, 1, {}, std::nullopt);
  CHECK(l.linf > 0.0);
  CHECK(l.ssim < 1.0);
  CHECK(l.total > l.ce);
  CHECK(l.ce >= 0.0);

  TriggerSpec wrong = tr;
  wrong.shape = {4, 4, 1};
  CHECK_THROWS_AS(qoe_loss(m, wrong, x, 1, {}, std::nullopt), ConfigError);
}

TEST_CASE("trigger initialisation averages the target class") {
  const ImageShape s{4, 4, 1};
  const auto ds = dim_set(s, 30, 1.0f, 3, 8);
  const auto mask = corner(s, 2);
  const auto tr = initialize_trigger(mask, s, ds, 2, 0.4f);
  for (std::size_t k = 0; k < mask.size(); ++k) {
    double sum = 0;
    int n = 0;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.labels[i] == 2) {
        sum += ds.image(i)[static_cast<std::size_t>(mask[k].row * 4 + mask[k].col)];
        ++n;
      }
    CHECK(tr.values[k] == doctest::Approx(sum / n).epsilon(1e-5));
  }
  CHECK(tr.side_hint == 2);
  CHECK_THROWS_AS(initialize_trigger(mask, s, ds, 7, 0.4f), DataError);
}

TEST_CASE("optimisation with zero steps returns the initial trigger") {
  const ImageShape s{8, 8, 1};
  const auto mask = corner(s, 2);
  const auto m = planted(s, mask, 1, 2);
  const auto ds = dim_set(s, 40, 0.5f, 2, 3);
  const auto init = initialize_trigger(mask, s, ds, 1, 0.4f);
  TriggerOptConfig cfg;
  cfg.target = 1;
  cfg.steps = 0;
  const auto r = optimize_trigger(m, init, ds, cfg);
  CHECK(r.trigger.values == init.values);
  CHECK(r.loss.empty());
}

TEST_CASE("optimisation recovers a planted backdoor") {
  const ImageShape s{8, 8, 1};
  const auto mask = corner(s, 2);
  const auto m = planted(s, mask, 1, 2);
  // Clean pixels are at most 0.5, so no clean sample reaches the target.
  const auto pool = dim_set(s, 200, 0.5f, 2, 3);
  const auto test = dim_set(s, 300, 0.5f, 2, 4);
  const auto init = initialize_trigger(mask, s, pool, 1, 0.4f);
  CHECK(asr(m, test, init, 1) < 0.05);
  TriggerOptConfig cfg;
  cfg.target = 1;
  cfg.steps = 200;
  cfg.batch = 32;
  cfg.seed = 5;
  const auto r = optimize_trigger(m, init, pool, cfg);
  CHECK(asr(m, test, r.trigger, 1) >= 0.95);
  CHECK(r.neuron == NeuronHandle{"hidden", 0});
  CHECK(r.nonfinite_steps == 0);
  REQUIRE(r.best_loss.size() == r.eval_steps.size());
  for (std::size_t i = 1; i < r.best_loss.size(); ++i) CHECK(r.best_loss[i] <= r.best_loss[i - 1]);
  CHECK(r.best_loss.back() == *std::min_element(r.probe_loss.begin(), r.probe_loss.end()));
  for (float v : r.trigger.values) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }

  const fs::path file = fs::temp_directory_path() / "qoebd_test_loss.csv";
  write_loss_history(file, r);
  std::ifstream in(file);
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,batch_loss,probe_loss,best_loss");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == cfg.steps + 1);
}

TEST_CASE("optimisation rejects bad settings") {
  const ImageShape s{8, 8, 1};
  const auto mask = corner(s, 2);
  const auto m = planted(s, mask, 1, 2);
  const auto pool = dim_set(s, 20, 0.5f, 2, 3);
  const auto init = initialize_trigger(mask, s, pool, 1, 0.4f);
  TriggerOptConfig cfg;
  cfg.target = 1;
  cfg.batch = 0;
  CHECK_THROWS_AS(optimize_trigger(m, init, pool, cfg), ConfigError);
  cfg.batch = 4;
  const auto only_target = subset(pool, indices_with_label(pool, 1));
  CHECK_THROWS_AS(optimize_trigger(m, init, only_target, cfg), DataError);
}
