#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "qoebd/architectures.hpp"
#include "qoebd/attention.hpp"
#include "qoebd/defense.hpp"
#include "qoebd/error.hpp"
#include "qoebd/metrics.hpp"
#include "toy_model.hpp"

using namespace qoebd;
namespace fs = std::filesystem;

namespace {

ImageDataset uniform_set(ImageShape s, std::size_t n, float hi, int classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, hi);
  ImageDataset ds;
  ds.name = "uniform";
  ds.shape = s;
  ds.num_classes = classes;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < s.size(); ++k) ds.pixels.push_back(u(rng));
    ds.labels.push_back(0);
  }
  return ds;
}

TriggerSpec pixel_trigger(ImageShape s, PixelCoord at, float value) {
  TriggerSpec tr;
  tr.shape = s;
  tr.side_hint = 1;
  tr.mask = {at};
  tr.values.assign(static_cast<std::size_t>(s.channels), value);
  return tr;
}

}  // namespace

TEST_CASE("mad anomaly index") {
  const std::vector<double> norms = {10, 11, 12, 13, 1};
  const auto a = mad_anomaly(norms);
  CHECK(a[1] == 0.0);
  CHECK(a[4] == doctest::Approx(10.0 / 1.4826));
  CHECK(mad_flagged(norms) == std::vector<int>{4});

  // Large norms are anomalous but never flagged.
  const std::vector<double> high = {10, 11, 12, 13, 40};
  CHECK(mad_anomaly(high)[4] > 2.0);
  CHECK(mad_flagged(high).empty());

  std::vector<double> scaled;
  for (double n : norms) scaled.push_back(n * 37.5);
  const auto b = mad_anomaly(scaled);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(a[i]));

  const std::vector<double> flat = {3, 3, 3, 3};
  for (double v : mad_anomaly(flat)) CHECK(v == 0.0);
  CHECK_THROWS_AS(mad_anomaly(std::vector<double>{1, 2}), ConfigError);
}

TEST_CASE("percentile and ks statistic") {
  CHECK(percentile({4, 1, 3, 2}, 0.5) == doctest::Approx(2.5));
  CHECK(percentile({4, 1, 3, 2}, 0.0) == 1.0);
  CHECK(percentile({4, 1, 3, 2}, 1.0) == 4.0);
  CHECK_THROWS_AS(percentile({}, 0.5), DataError);
  const std::vector<double> a = {1, 2, 3}, b = {4, 5, 6}, c = {1.5, 2.5, 3.5};
  CHECK(ks_statistic(a, a) == 0.0);
  CHECK(ks_statistic(a, b) == 1.0);
  CHECK(ks_statistic(a, c) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("strip on a constant model gives maximal entropy") {
  const ImageShape s{4, 4, 1};
  testing::ToyMlp m(s, 1, 4);
  const auto ds = uniform_set(s, 10, 1.0f, 4, 1);
  const auto tr = pixel_trigger(s, {0, 0}, 1.0f);
  StripConfig cfg;
  cfg.copies = 5;
  const auto r = strip_analyze(m, ds, ds, cfg, &tr);
  for (double e : r.clean_entropy) CHECK(e == doctest::Approx(2.0));
  for (double e : r.triggered_entropy) CHECK(e == doctest::Approx(2.0));
  CHECK(r.detection_rate == 0.0);
  CHECK(r.overlap == doctest::Approx(1.0));
  CHECK(r.edges.size() == 21);
  CHECK_THROWS_AS(strip_entropies(m, ds, ds, 11, nullptr, 0), ConfigError);
}

TEST_CASE("strip entropy matches a hand computation") {
  // Logit of class 1 minus class 0 is 4 x[0]; one overlay image.
  const ImageShape s{2, 2, 1};
  testing::ToyMlp m(s, 1, 2);
  m.w1(0, 0) = 1.0f;
  m.w2(0, 1) = 4.0f;
  ImageDataset samples = uniform_set(s, 3, 1.0f, 2, 4);
  ImageDataset pool = uniform_set(s, 1, 1.0f, 2, 5);
  const auto got = strip_entropies(m, samples, pool, 1, nullptr, 0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double z = 4.0 * 0.5 * (samples.image(i)[0] + pool.image(0)[0]);
    const double p1 = 1.0 / (1.0 + std::exp(-z)), p0 = 1.0 - p1;
    CHECK(got[i] == doctest::Approx(-(p0 * std::log2(p0) + p1 * std::log2(p1))).epsilon(1e-5));
  }
  // Entropy stays in [0, log2 C] even for saturated logits.
  m.w2(0, 1) = 1e4f;
  for (double e : strip_entropies(m, samples, pool, 1, nullptr, 0)) {
    CHECK(e >= 0.0);
    CHECK(e <= 1.0);
  }
  StripConfig cfg;
  cfg.copies = 1;
  const auto rep = to_report(strip_analyze(m, samples, pool, cfg, nullptr));
  CHECK(rep.name == "strip");
  CHECK(rep.body.contains("clean_mean"));
  CHECK(rep.tables.size() == 2);
}

TEST_CASE("pruning removes a dormant backdoor unit first") {
  const ImageShape s{4, 4, 1};
  testing::ToyMlp m(s, 3, 3);
  // u0 fires only when the last pixel exceeds 0.9 and drives class 2.
  m.w1(15, 0) = 1.0f;
  m.b1(0) = -0.9f;
  m.w2(0, 2) = 200.0f;
  // u1 = x0 votes class 1, u2 = 1 - x0 votes class 0.
  m.w1(0, 1) = 1.0f;
  m.w2(1, 1) = 1.0f;
  m.w1(0, 2) = -1.0f;
  m.b1(2) = 1.0f;
  m.w2(2, 0) = 1.0f;
  auto val = uniform_set(s, 400, 0.8f, 3, 6);
  for (std::size_t i = 0; i < val.size(); ++i) val.labels[i] = val.image(i)[0] > 0.5f ? 1 : 0;
  const auto tr = pixel_trigger(s, {3, 3}, 1.0f);
  REQUIRE(asr(m, val, tr, 2) == 1.0);
  REQUIRE(cda(m, val) == 1.0);

  const auto rep = prune_sweep(m, val, tr, 2, 0.7);
  CHECK(rep.layer == "hidden");
  CHECK(rep.order == std::vector<int>{0, 1, 2});
  REQUIRE(rep.curve.size() >= 2);
  CHECK(rep.curve[0].pruned == 0);
  CHECK(rep.curve[0].asr == 1.0);
  CHECK(rep.curve[0].cda == 1.0);
  CHECK(rep.curve[1].asr == 0.0);
  CHECK(rep.curve[1].cda == 1.0);
  REQUIRE(rep.crossing);
  CHECK(rep.crossing->pruned == 2);
  CHECK(rep.crossing->cda < 0.7);
  // The original model is untouched.
  CHECK(asr(m, val, tr, 2) == 1.0);
  CHECK_THROWS_AS(prune_sweep(m, val, tr, 2, 1.5), ConfigError);
  CHECK(to_report(rep).tables.at(0).first == "prune_curve.csv");
}

TEST_CASE("reversing a label the model always predicts needs no mask") {
  const ImageShape s{6, 6, 1};
  testing::ToyMlp m(s, 1, 3);
  m.b2(1) = 8.0f;
  const auto val = uniform_set(s, 32, 1.0f, 3, 2);
  NcConfig cfg;
  cfg.steps = 200;
  cfg.batch = 8;
  cfg.l1 = 1e-2;
  const auto r = reverse_trigger(m, 1, val, cfg);
  CHECK(r.l1_norm < 1.0);
  CHECK(r.attack_rate == 1.0);
}

TEST_CASE("neural cleanse finds a planted square") {
  const ImageShape s{8, 8, 1};
  testing::ToyMlp m(s, 2, 3);
  const auto square = baseline_mask(s, 2, BaselineMaskKind::corner).coords;
  for (const auto& p : square) m.w1(p.row * 8 + p.col, 0) = 1.0f;
  m.b1(0) = 10.0f;
  m.w2(0, 2) = 10.0f;
  m.b2(2) = -122.0f;
  for (int i = 0; i < 64; ++i) m.w1(i, 1) = 1.0f;
  m.w2(1, 1) = 0.5f;
  m.b2(1) = -24.0f;
  const auto val = uniform_set(s, 64, 0.5f, 3, 9);
  NcConfig cfg;
  cfg.steps = 300;
  cfg.batch = 16;
  const auto target = reverse_trigger(m, 2, val, cfg);
  const auto other = reverse_trigger(m, 1, val, cfg);
  CHECK(target.attack_rate >= 0.9);
  CHECK(target.l1_norm < other.l1_norm);
  std::vector<int> idx(64);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) { return target.mask[static_cast<std::size_t>(a)] > target.mask[static_cast<std::size_t>(b)]; });
  int inter = 0;
  for (int k = 0; k < 4; ++k)
    for (const auto& p : square) inter += idx[static_cast<std::size_t>(k)] == p.row * 8 + p.col;
  const double iou = inter / (8.0 - inter);
  CHECK(iou >= 0.3);
}

TEST_CASE("attention alignment") {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> n;
  Tensor a({2, 3, 5}), b({2, 3, 5});
  for (auto& v : a.vec()) v = n(rng);
  for (auto& v : b.vec()) v = n(rng);
  Tensor g;
  CHECK(attention_alignment(a, a, 5000.0, &g) == 0.0);
  for (float v : g.vec()) CHECK(v == 0.0f);

  const auto maps = attention_maps_of(a);
  for (int s = 0; s < 2; ++s) {
    double norm = 0;
    for (int q = 0; q < 5; ++q) norm += maps[static_cast<std::size_t>(s * 5 + q)] * maps[static_cast<std::size_t>(s * 5 + q)];
    CHECK(norm == doctest::Approx(1.0));
  }

  attention_alignment(a, b, 3.0, &g);
  auto f = [&](std::span<const float> x) {
    Tensor t(a.shape(), std::vector<float>(x.begin(), x.end()));
    return attention_alignment(t, b, 3.0, nullptr);
  };
  const auto r = testing::check_gradient(f, a.vec(), g.vec(), 1e-3);
  CHECK(r.relative <= 1e-3);
  CHECK_THROWS_AS(attention_alignment(a, Tensor({2, 3, 4}), 1.0, nullptr), DataError);
}

TEST_CASE("distilling a clean model keeps its accuracy") {
  const ImageShape s{8, 8, 3};
  const auto [train, test] = split_dataset(make_synthetic({440, s, 4, 41}), 240, 1);
  ArchDescriptor a;
  a.conv_channels = {4, 8};
  a.fc_width = 16;
  auto m = build_victim(a, 4, s, 3);
  TrainHyper h;
  h.epochs = 20;
  h.lr = 3e-3;
  h.batch_size = 32;
  train_clean(*m, train, h);
  REQUIRE(cda(*m, test) > 0.8);
  const auto tr = pixel_trigger(s, {7, 7}, 1.0f);
  std::vector<std::size_t> first(48);
  std::iota(first.begin(), first.end(), std::size_t{0});
  NadConfig cfg;
  cfg.teacher.epochs = 2;
  cfg.student.epochs = 2;
  cfg.teacher.batch_size = cfg.student.batch_size = 32;
  const auto r = nad_distill(*m, subset(train, first), test, tr, 0, cfg);
  CHECK(r.cda_before == doctest::Approx(cda(*m, test)));
  CHECK(r.cda_after >= r.cda_before - 0.01);
  CHECK(r.model);
  CHECK(to_report(r).tables.at(0).first == "nad.csv");
}

TEST_CASE("patch processing") {
  ArchDescriptor a;
  a.kind = ArchKind::vit_lite;
  a.depth = 1;
  a.heads = 2;
  a.embed_dim = 8;
  a.patch = 4;
  a.mlp_dim = 16;
  const ImageShape s{8, 8, 3};
  const auto vit = build_victim(a, 3, s, 2);
  const auto test = make_synthetic({60, s, 3, 5});
  const std::vector<std::pair<double, double>> fr = {{0.0, 0.0}, {1.0, 0.0}, {0.5, 0.5}};
  const auto tr = pixel_trigger(s, {0, 0}, 1.0f);
  const auto r = patch_process_defense(*vit, test, fr, &tr, 1, 3);
  REQUIRE(r.size() == 3);
  CHECK(r[0].cda == doctest::Approx(cda(*vit, test)));
  CHECK(r[0].asr == doctest::Approx(asr(*vit, test, tr, 1)));
  // With every patch dropped the input no longer matters: one class for all.
  bool some_class = false;
  for (int c = 0; c < 3; ++c)
    some_class = some_class || r[1].cda == doctest::Approx(static_cast<double>(indices_with_label(test, c).size()) / 60.0);
  CHECK(some_class);
  CHECK((r[1].asr == 0.0 || r[1].asr == 1.0));

  ArchDescriptor c;
  c.conv_channels = {4};
  c.fc_width = 8;
  const auto cnn = build_victim(c, 3, s, 2);
  CHECK_THROWS_AS(patch_process_defense(*cnn, test, fr, &tr, 1, 3), ConfigError);
  const std::vector<std::pair<double, double>> bad = {{1.5, 0.0}};
  CHECK_THROWS_AS(patch_process_defense(*vit, test, bad, &tr, 1, 3), ConfigError);
}

TEST_CASE("reports are written to disk") {
  const fs::path dir = fs::temp_directory_path() / "qoebd_test_reports";
  fs::remove_all(dir);
  DefenseReport rep;
  rep.name = "demo";
  rep.body = {{"x", 1}};
  rep.tables.emplace_back("demo.csv", "a,b\n1,2\n");
  rep.write(dir);
  CHECK(fs::exists(dir / "demo.json"));
  CHECK(fs::file_size(dir / "demo.csv") == 8);
}
