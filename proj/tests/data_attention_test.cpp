#include <algorithm>
#include <filesystem>
#include <numeric>
#include <random>

#include "doctest.h"
#include "qoebd/attention.hpp"
#include "qoebd/error.hpp"

using namespace qoebd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("qoebd_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TriggerSpec corner_trigger(ImageShape s, int side, float t, float value) {
  TriggerSpec tr;
  tr.shape = s;
  tr.side_hint = side;
  tr.transparency = t;
  tr.mask = baseline_mask(s, side, BaselineMaskKind::corner).coords;
  tr.values.assign(tr.mask.size() * static_cast<std::size_t>(s.channels), value);
  return tr;
}

// Full sort of all pixels by (value desc, index asc).
std::vector<PixelCoord> sort_oracle(const AttentionMap& m, int side) {
  std::vector<std::size_t> idx(m.values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return m.values[a] > m.values[b]; });
  std::vector<PixelCoord> out;
  for (int i = 0; i < side * side; ++i)
    out.push_back({static_cast<int>(idx[static_cast<std::size_t>(i)]) / m.width, static_cast<int>(idx[static_cast<std::size_t>(i)]) % m.width});
  return out;
}

}  // namespace

TEST_CASE("synthetic datasets are reproducible and valid") {
  for (auto kind : {SyntheticKind::blobs, SyntheticKind::shapes}) {
    const SyntheticSpec spec{64, {16, 16, 3}, 4, 9, kind, 0.1f};
    const auto a = make_synthetic(spec), b = make_synthetic(spec);
    CHECK(a.pixels == b.pixels);
    CHECK(a.labels == b.labels);
    CHECK_NOTHROW(a.validate());
  }
}

TEST_CASE("blend at full opacity is idempotent and writes the values") {
  const ImageShape s{8, 8, 3};
  auto ds = make_synthetic({1, s, 2, 1});
  const auto tr = corner_trigger(s, 3, 0.0f, 0.75f);
  const auto once = apply_trigger(ds.image(0), s, tr);
  const auto twice = apply_trigger(once, s, tr);
  CHECK(once == twice);
  for (const auto& p : tr.mask)
    for (int c = 0; c < 3; ++c) CHECK(once[(static_cast<std::size_t>(p.row) * 8 + p.col) * 3 + c] == 0.75f);
  // Pixels off the mask are untouched.
  CHECK(once[0] == ds.image(0)[0]);
}

TEST_CASE("blend keeps transparency share of the original pixel") {
  const ImageShape s{4, 4, 1};
  std::vector<float> img(16, 0.2f);
  const auto tr = corner_trigger(s, 2, 0.4f, 1.0f);
  const auto out = apply_trigger(img, s, tr);
  CHECK(out[15] == doctest::Approx(0.4 * 0.2 + 0.6));
  CHECK(out[0] == 0.2f);
}

TEST_CASE("trigger validation rejects bad geometry") {
  const ImageShape s{4, 4, 1};
  auto tr = corner_trigger(s, 2, 0.4f, 1.0f);
  CHECK_NOTHROW(tr.validate());
  auto dup = tr;
  dup.mask[1] = dup.mask[0];
  CHECK_THROWS_AS(dup.validate(), DataError);
  auto oob = tr;
  oob.mask[0] = {4, 0};
  CHECK_THROWS_AS(oob.validate(), DataError);
  auto opaque = tr;
  opaque.transparency = 1.0f;
  CHECK_THROWS_AS(opaque.validate(), DataError);
}

TEST_CASE("poison plans are sized, sorted and seeded") {
  const auto p = make_poison_plan(1000, 0.05, 2, 10, 7);
  CHECK(p.poisoned_indices.size() == 50);
  CHECK(std::is_sorted(p.poisoned_indices.begin(), p.poisoned_indices.end()));
  CHECK(std::adjacent_find(p.poisoned_indices.begin(), p.poisoned_indices.end()) == p.poisoned_indices.end());
  CHECK(make_poison_plan(1000, 0.05, 2, 10, 7).poisoned_indices == p.poisoned_indices);
  CHECK(make_poison_plan(1000, 0.0, 2, 10, 7).poisoned_indices.empty());
  CHECK_THROWS_AS(make_poison_plan(10, 1.5, 2, 10, 7), ConfigError);
  CHECK_THROWS_AS(make_poison_plan(10, 0.5, 10, 10, 7), ConfigError);
}

TEST_CASE("poisoned set relabels exactly the planned samples") {
  const ImageShape s{8, 8, 1};
  const auto ds = make_synthetic({40, s, 3, 2});
  const auto tr = corner_trigger(s, 2, 0.0f, 1.0f);
  const auto plan = make_poison_plan(ds.size(), 0.25, 1, 3, 4);
  const auto out = build_poisoned_set(ds, tr, plan);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const bool poisoned = std::binary_search(plan.poisoned_indices.begin(), plan.poisoned_indices.end(), i);
    CHECK(out.labels[i] == (poisoned ? 1 : ds.labels[i]));
    const bool same = std::equal(out.image(i).begin(), out.image(i).end(), ds.image(i).begin());
    CHECK(same == !poisoned);
  }
}

TEST_CASE("bilinear resize keeps constants, corners and identity") {
  const ImageShape s{5, 7, 2};
  std::vector<float> c(s.size(), 0.3f);
  for (float v : resize_bilinear(c, s, 11, 3)) CHECK(v == doctest::Approx(0.3f));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u;
  std::vector<float> img(s.size());
  for (auto& v : img) v = u(rng);
  CHECK(resize_bilinear(img, s, 5, 7) == img);
  const auto big = resize_bilinear(img, s, 9, 13);
  CHECK(big[0] == doctest::Approx(img[0]));
  CHECK(big[big.size() - 1] == doctest::Approx(img.back()));
}

TEST_CASE("trigger and png files round trip") {
  const auto dir = scratch("files");
  const ImageShape s{6, 6, 3};
  auto tr = corner_trigger(s, 2, 0.4f, 0.5f);
  tr.values[1] = 0.125f;
  save_trigger(dir / "t", tr);
  const auto back = load_trigger(dir / "t");
  CHECK(back.values == tr.values);
  CHECK(back.mask == tr.mask);
  CHECK(back.transparency == tr.transparency);
  CHECK(back.shape == tr.shape);

  const auto ds = make_synthetic({1, s, 2, 3});
  write_png(dir / "x.png", ds.image(0), s);
  ImageShape got;
  const auto px = read_png(dir / "x.png", got);
  CHECK(got == s);
  for (std::size_t i = 0; i < px.size(); ++i) CHECK(std::abs(px[i] - ds.image(0)[i]) <= 0.5f / 255.0f + 1e-6f);
  CHECK_THROWS_AS(load_trigger(dir / "missing"), DataError);
}

TEST_CASE("top-k mask matches a full sort on every binary 4x4 map") {
  AttentionMap m;
  m.height = m.width = 4;
  m.values.resize(16);
  for (unsigned bits = 0; bits < (1u << 16); ++bits) {
    for (int i = 0; i < 16; ++i) m.values[static_cast<std::size_t>(i)] = static_cast<float>((bits >> i) & 1u);
    for (int side = 1; side <= 4; ++side) {
      const auto mask = mask_from_map(m, side);
      REQUIRE(mask.coords == sort_oracle(m, side));
    }
  }
}

TEST_CASE("top-k mask matches a full sort on random 8x8 maps with ties") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> level(0, 5);
  AttentionMap m;
  m.height = m.width = 8;
  m.values.resize(64);
  for (int trial = 0; trial < 500; ++trial) {
    for (auto& v : m.values) v = static_cast<float>(level(rng)) * 0.25f;
    for (int side = 1; side <= 8; ++side) REQUIRE(mask_from_map(m, side).coords == sort_oracle(m, side));
  }
  CHECK_THROWS_AS(mask_from_map(m, 9), ConfigError);
}

TEST_CASE("representative map is the brute-force argmin to the mean") {
  auto scalar = [](float v, std::size_t id) {
    AttentionMap m;
    m.height = m.width = 1;
    m.values = {v};
    m.source_id = id;
    return m;
  };
  std::vector<AttentionMap> maps = {scalar(0.0f, 0), scalar(1.0f, 1), scalar(0.4f, 2)};
  CHECK(select_representative_map(maps).values[0] == 0.4f);

  // Equidistant from the mean: the lower source id wins whatever the order.
  std::vector<AttentionMap> tie = {scalar(1.0f, 5), scalar(0.0f, 3)};
  CHECK(select_representative_map(tie).source_id == 3);
  std::reverse(tie.begin(), tie.end());
  CHECK(select_representative_map(tie).source_id == 3);

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<float> u;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<AttentionMap> set;
    for (std::size_t k = 0; k < 7; ++k) {
      AttentionMap m;
      m.height = 3;
      m.width = 2;
      m.source_id = k;
      for (int i = 0; i < 6; ++i) m.values.push_back(u(rng));
      set.push_back(m);
    }
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < set.size(); ++k) {
      double d = 0;
      for (int i = 0; i < 6; ++i) {
        double mean = 0;
        for (const auto& o : set) mean += o.values[static_cast<std::size_t>(i)];
        mean /= static_cast<double>(set.size());
        d += (set[k].values[static_cast<std::size_t>(i)] - mean) * (set[k].values[static_cast<std::size_t>(i)] - mean);
      }
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    const auto picked = select_representative_map(set).source_id;
    CHECK(picked == best);
    std::shuffle(set.begin(), set.end(), rng);
    CHECK(select_representative_map(set).source_id == picked);
  }
  CHECK_THROWS_AS(select_representative_map(std::span<const AttentionMap>{}), ConfigError);
}

TEST_CASE("baseline masks") {
  const ImageShape s{8, 6, 3};
  const auto corner = baseline_mask(s, 2, BaselineMaskKind::corner);
  CHECK(corner.coords == std::vector<PixelCoord>{{6, 4}, {6, 5}, {7, 4}, {7, 5}});
  CHECK(corner.provenance == MaskProvenance::corner);
  const auto r1 = baseline_mask(s, 3, BaselineMaskKind::random, 4);
  CHECK_NOTHROW(r1.validate());
  CHECK(r1.coords == baseline_mask(s, 3, BaselineMaskKind::random, 4).coords);
  CHECK(std::is_sorted(r1.coords.begin(), r1.coords.end()));
  CHECK_THROWS_AS(baseline_mask(s, 7, BaselineMaskKind::corner), ConfigError);
}

TEST_CASE("combine_attention is (1 + S) T") {
  const std::vector<float> t = {0.5f, -1.0f, 2.0f};
  std::vector<float> h(3);
  combine_attention(std::vector<float>(3, 0.0f), t, h);
  CHECK(h == t);
  combine_attention(std::vector<float>(3, 1.0f), t, h);
  for (int i = 0; i < 3; ++i) CHECK(h[static_cast<std::size_t>(i)] == 2 * t[static_cast<std::size_t>(i)]);
}

TEST_CASE("ran maps: untrained refusal, constant input, upscaling") {
  ArchDescriptor a;
  a.kind = ArchKind::ran;
  a.stem_channels = 4;
  a.attention_channels = {4, 4, 1};
  const ImageShape s{16, 16, 3};
  RanModel ran(a, s, 3, 5);
  const std::vector<float> flat(s.size(), 0.6f);
  CHECK_THROWS_AS(attention_map(ran, flat, s), ConfigError);
  ran.mark_trained();
  const auto m = attention_map(ran, flat, s);
  CHECK(m.height == 16);
  CHECK(m.width == 16);
  for (float v : m.values) {
    CHECK(v >= 0.0f);
    CHECK(v == doctest::Approx(m.values[0]).epsilon(1e-5));
  }
  CHECK(resize_map(m, 16, 16).values == m.values);
  CHECK(resize_map(m, 32, 32).values.size() == 1024);
}

TEST_CASE("ran training learns a separable task") {
  const ImageShape s{16, 16, 3};
  const auto train = make_synthetic({400, s, 3, 21, SyntheticKind::blobs});
  RanTraining cfg;
  cfg.arch.stem_channels = 8;
  cfg.arch.attention_channels = {8, 8, 1};
  cfg.hyper.epochs = 20;
  cfg.hyper.lr = 3e-3;
  cfg.hyper.seed = 2;
  const RanModel ran = train_ran(train, cfg);
  CHECK(ran.trained());
  CHECK(evaluate(ran, train) > 0.8);
}

TEST_CASE("mask files round trip and validate") {
  const auto dir = scratch("mask");
  auto m = baseline_mask({8, 8, 3}, 3, BaselineMaskKind::random, 2);
  m.source_sample_id = 17;
  save_mask(dir / "m.json", m);
  const auto back = load_mask(dir / "m.json");
  CHECK(back.coords == m.coords);
  CHECK(back.provenance == MaskProvenance::random);
  CHECK(back.source_sample_id == 17);
  m.coords.pop_back();
  CHECK_THROWS_AS(m.validate(), DataError);
}
