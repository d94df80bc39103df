#include "qoebd/attention.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "json.hpp"
#include "qoebd/error.hpp"

namespace qoebd {

std::string to_string(MaskProvenance p) {
  switch (p) {
    case MaskProvenance::attention: return "attention";
    case MaskProvenance::corner: return "corner";
    case MaskProvenance::random: return "random";
  }
  return "?";
}

MaskProvenance parse_mask_provenance(const std::string& s) {
  if (s == "attention") return MaskProvenance::attention;
  if (s == "corner") return MaskProvenance::corner;
  if (s == "random") return MaskProvenance::random;
  throw ConfigError("unknown mask strategy '" + s + "'");
}

void Mask::validate() const {
  if (side < 1) throw ConfigError("mask side must be positive");
  if (coords.size() != static_cast<std::size_t>(side) * static_cast<std::size_t>(side))
    throw DataError("mask holds " + std::to_string(coords.size()) + " pixels, expected side^2 = " +
                    std::to_string(side * side));
  std::set<PixelCoord> seen;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const auto& c = coords[i];
    if (c.row < 0 || c.row >= height || c.col < 0 || c.col >= width)
      throw DataError("mask coordinate " + std::to_string(i) + " out of bounds");
    if (!seen.insert(c).second) throw DataError("duplicate mask coordinate at " + std::to_string(i));
  }
}

RanModel train_ran(const ImageDataset& train, const RanTraining& cfg, const EpochCallback& on_epoch) {
  ArchDescriptor arch = cfg.arch;
  arch.kind = ArchKind::ran;
  RanModel ran(arch, train.shape, train.num_classes, cfg.hyper.seed);
  train_clean(ran, train, cfg.hyper, on_epoch);
  ran.mark_trained();
  return ran;
}

namespace {

AttentionMap upscale(const float* raw, int mh, int mw, ImageShape shape) {
  AttentionMap m;
  m.height = shape.height;
  m.width = shape.width;
  m.values = resize_bilinear(std::span<const float>(raw, static_cast<std::size_t>(mh) * mw), {mh, mw, 1},
                             shape.height, shape.width);
  for (auto& v : m.values) {
    if (!std::isfinite(v)) throw DataError("non-finite attention value");
    v = std::max(v, 0.0f);
  }
  return m;
}

}  // namespace

AttentionMap attention_map(const RanModel& ran, std::span<const float> image, ImageShape shape) {
  if (!ran.trained()) throw ConfigError("attention map requested from an untrained ran");
  if (shape != ran.input_shape() || image.size() != shape.size())
    throw DataError("image shape does not match the ran input");
  Tensor x({1, shape.height, shape.width, shape.channels}, std::vector<float>(image.begin(), image.end()));
  const Tensor raw = ran.final_map(x);
  return upscale(raw.data(), raw.dim(1), raw.dim(2), shape);
}

std::vector<AttentionMap> attention_maps(const RanModel& ran, const ImageDataset& ds,
                                         std::span<const std::size_t> indices) {
  if (!ran.trained()) throw ConfigError("attention map requested from an untrained ran");
  std::vector<AttentionMap> out;
  constexpr std::size_t kBatch = 64;
  for (std::size_t start = 0; start < indices.size(); start += kBatch) {
    const std::size_t n = std::min(kBatch, indices.size() - start);
    const Tensor x = gather_batch(ds, indices.subspan(start, n), ran.input_shape());
    const Tensor raw = ran.final_map(x);
    const int mh = raw.dim(1), mw = raw.dim(2);
    for (std::size_t k = 0; k < n; ++k) {
      AttentionMap m = upscale(raw.data() + k * static_cast<std::size_t>(mh) * mw, mh, mw, ran.input_shape());
      m.source_id = indices[start + k];
      m.label = ds.labels[indices[start + k]];
      out.push_back(std::move(m));
    }
  }
  return out;
}

const AttentionMap& select_representative_map(std::span<const AttentionMap> maps) {
  if (maps.empty()) throw ConfigError("no attention maps to select from");
  const std::size_t n = maps.front().values.size();
  for (const auto& m : maps)
    if (m.height != maps.front().height || m.width != maps.front().width || m.values.size() != n)
      throw DataError("attention maps differ in shape");
  std::vector<double> mean(n, 0.0);
  for (const auto& m : maps)
    for (std::size_t i = 0; i < n; ++i) mean[i] += m.values[i];
  for (auto& v : mean) v /= static_cast<double>(maps.size());
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < maps.size(); ++k) {
    double d = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = maps[k].values[i] - mean[i];
      d += e * e;
    }
    if (d < best_d || (d == best_d && maps[k].source_id < maps[best].source_id)) {
      best_d = d;
      best = k;
    }
  }
  return maps[best];
}

AttentionMap resize_map(const AttentionMap& map, int height, int width) {
  if (map.values.size() != static_cast<std::size_t>(map.height) * map.width) throw DataError("attention map size mismatch");
  if (height == map.height && width == map.width) return map;
  AttentionMap out = upscale(map.values.data(), map.height, map.width, {height, width, 1});
  out.source_id = map.source_id;
  out.label = map.label;
  return out;
}

Mask mask_from_map(const AttentionMap& map, int side) {
  const std::size_t px = static_cast<std::size_t>(map.height) * map.width;
  if (side < 1) throw ConfigError("trigger side must be positive");
  const std::size_t k = static_cast<std::size_t>(side) * side;
  if (k > px) throw ConfigError("trigger side " + std::to_string(side) + " exceeds the map's pixel count");
  if (map.values.size() != px) throw DataError("attention map size mismatch");
  std::vector<std::size_t> order(px);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return map.values[a] > map.values[b] || (map.values[a] == map.values[b] && a < b);
                    });
  Mask m;
  m.height = map.height;
  m.width = map.width;
  m.side = side;
  m.provenance = MaskProvenance::attention;
  m.source_sample_id = static_cast<std::int64_t>(map.source_id);
  for (std::size_t i = 0; i < k; ++i)
    m.coords.push_back({static_cast<int>(order[i] / map.width), static_cast<int>(order[i] % map.width)});
  return m;
}

Mask baseline_mask(ImageShape shape, int side, BaselineMaskKind kind, std::uint64_t seed) {
  if (side < 1 || side > shape.height || side > shape.width)
    throw ConfigError("trigger side " + std::to_string(side) + " does not fit the image");
  Mask m;
  m.height = shape.height;
  m.width = shape.width;
  m.side = side;
  if (kind == BaselineMaskKind::corner) {
    m.provenance = MaskProvenance::corner;
    for (int r = shape.height - side; r < shape.height; ++r)
      for (int c = shape.width - side; c < shape.width; ++c) m.coords.push_back({r, c});
    return m;
  }
  m.provenance = MaskProvenance::random;
  const std::size_t px = shape.pixels();
  const std::size_t k = static_cast<std::size_t>(side) * side;
  std::vector<std::size_t> idx(px);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, px - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  for (std::size_t i : idx) m.coords.push_back({static_cast<int>(i / shape.width), static_cast<int>(i % shape.width)});
  return m;
}

void save_mask(const std::filesystem::path& file, const Mask& mask) {
  nlohmann::json coords = nlohmann::json::array();
  for (const auto& c : mask.coords) coords.push_back({c.row, c.col});
  const nlohmann::json j = {{"height", mask.height},
                            {"width", mask.width},
                            {"l", mask.side},
                            {"coords", coords},
                            {"provenance", to_string(mask.provenance)},
                            {"source_sample_id", mask.source_sample_id}};
  std::ofstream f(file);
  if (!f) throw DataError("cannot write mask file " + file.string());
  f << j.dump(2) << "\n";
}

Mask load_mask(const std::filesystem::path& file) {
  std::ifstream f(file);
  if (!f) throw DataError("missing mask file " + file.string());
  nlohmann::json j;
  try {
    f >> j;
    Mask m;
    m.height = j.at("height").get<int>();
    m.width = j.at("width").get<int>();
    m.side = j.at("l").get<int>();
    for (const auto& c : j.at("coords")) m.coords.push_back({c.at(0).get<int>(), c.at(1).get<int>()});
    m.provenance = parse_mask_provenance(j.at("provenance").get<std::string>());
    m.source_sample_id = j.value("source_sample_id", std::int64_t{-1});
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed mask file " + file.string() + ": " + e.what());
  }
}

}  // namespace qoebd
