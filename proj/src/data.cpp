#include "qoebd/data.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "qoebd/error.hpp"

namespace qoebd {

namespace fs = std::filesystem;
using nlohmann::json;

void ImageDataset::validate() const {
  if (pixels.size() != labels.size() * shape.size()) {
    throw DataError("dataset '" + name + "': pixel buffer holds " + std::to_string(pixels.size()) +
                    " values, expected " + std::to_string(labels.size() * shape.size()));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw DataError("dataset '" + name + "': label " + std::to_string(labels[i]) +
                      " out of range at index " + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (!(pixels[i] >= 0.0f && pixels[i] <= 1.0f)) {
      throw DataError("dataset '" + name + "': pixel out of [0,1] in image " +
                      std::to_string(i / shape.size()));
    }
  }
}

void TriggerSpec::validate() const {
  if (side_hint <= 0 || mask.size() != static_cast<std::size_t>(side_hint * side_hint)) {
    throw DataError("trigger mask has " + std::to_string(mask.size()) + " pixels, expected side " +
                    std::to_string(side_hint) + " squared");
  }
  if (values.size() != mask.size() * static_cast<std::size_t>(shape.channels)) {
    throw DataError("trigger value count does not match mask size x channels");
  }
  if (!(transparency >= 0.0f && transparency < 1.0f)) {
    throw DataError("trigger transparency must lie in [0,1)");
  }
  std::set<PixelCoord> seen;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const auto& p = mask[i];
    if (p.row < 0 || p.row >= shape.height || p.col < 0 || p.col >= shape.width) {
      throw DataError("trigger mask coordinate " + std::to_string(i) + " out of bounds");
    }
    if (!seen.insert(p).second) {
      throw DataError("trigger mask coordinate " + std::to_string(i) + " duplicated");
    }
  }
  for (float v : values) {
    if (!(v >= 0.0f && v <= 1.0f)) throw DataError("trigger value outside [0,1]");
  }
}

DatasetFormat parse_dataset_format(const std::string& s) {
  if (s == "cifar_binary") return DatasetFormat::cifar_binary;
  if (s == "image_folder") return DatasetFormat::image_folder;
  if (s == "synthetic") return DatasetFormat::synthetic;
  throw ConfigError("unknown dataset format '" + s + "'");
}

std::string to_string(DatasetFormat f) {
  switch (f) {
    case DatasetFormat::cifar_binary: return "cifar_binary";
    case DatasetFormat::image_folder: return "image_folder";
    case DatasetFormat::synthetic: return "synthetic";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// resampling

std::vector<float> resize_bilinear(std::span<const float> image, ImageShape in, int out_h,
                                   int out_w) {
  if (out_h < 1 || out_w < 1) throw DataError("resize target must be at least 1x1");
  if (image.size() != in.size()) throw DataError("resize input does not match its shape");
  const int c = in.channels;
  std::vector<float> out(static_cast<std::size_t>(out_h) * out_w * c);
  const double sy = out_h > 1 ? static_cast<double>(in.height - 1) / (out_h - 1) : 0.0;
  const double sx = out_w > 1 ? static_cast<double>(in.width - 1) / (out_w - 1) : 0.0;
  for (int y = 0; y < out_h; ++y) {
    const double fy = y * sy;
    const int y0 = std::min(static_cast<int>(fy), in.height - 1);
    const int y1 = std::min(y0 + 1, in.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = x * sx;
      const int x0 = std::min(static_cast<int>(fx), in.width - 1);
      const int x1 = std::min(x0 + 1, in.width - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < c; ++ch) {
        auto at = [&](int yy, int xx) {
          return static_cast<double>(image[(static_cast<std::size_t>(yy) * in.width + xx) * c + ch]);
        };
        const double top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
        const double bottom = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
        out[(static_cast<std::size_t>(y) * out_w + x) * c + ch] =
            static_cast<float>(top * (1.0 - wy) + bottom * wy);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// triggers and poisoning

void apply_trigger_inplace(std::span<float> image, ImageShape shape, const TriggerSpec& trigger) {
  if (trigger.shape != shape) throw DataError("trigger geometry does not match the image");
  const float t = trigger.transparency;
  const int c = shape.channels;
  for (std::size_t i = 0; i < trigger.mask.size(); ++i) {
    const auto& p = trigger.mask[i];
    if (p.row < 0 || p.row >= shape.height || p.col < 0 || p.col >= shape.width) {
      throw DataError("trigger coordinate " + std::to_string(i) + " (" + std::to_string(p.row) +
                      "," + std::to_string(p.col) + ") out of bounds");
    }
    float* px = image.data() + (static_cast<std::size_t>(p.row) * shape.width + p.col) * c;
    for (int ch = 0; ch < c; ++ch) {
      const float v = t * px[ch] + (1.0f - t) * trigger.values[i * c + ch];
      px[ch] = std::clamp(v, 0.0f, 1.0f);
    }
  }
}

std::vector<float> apply_trigger(std::span<const float> image, ImageShape shape,
                                 const TriggerSpec& trigger) {
  std::vector<float> out(image.begin(), image.end());
  apply_trigger_inplace(out, shape, trigger);
  return out;
}

PoisonPlan make_poison_plan(std::size_t n, double ratio, int target_label, int num_classes,
                            std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("poison ratio must lie in [0,1]");
  if (target_label < 0 || target_label >= num_classes) {
    throw ConfigError("target label " + std::to_string(target_label) + " out of range");
  }
  PoisonPlan plan;
  plan.target_label = target_label;
  plan.ratio = ratio;
  plan.seed = seed;
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first `count` entries are a uniform sample.
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  plan.poisoned_indices.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(plan.poisoned_indices.begin(), plan.poisoned_indices.end());
  return plan;
}

ImageDataset build_poisoned_set(const ImageDataset& ds, const TriggerSpec& trigger,
                                const PoisonPlan& plan) {
  if (!(plan.ratio >= 0.0 && plan.ratio <= 1.0)) throw ConfigError("poison ratio must lie in [0,1]");
  if (plan.target_label < 0 || plan.target_label >= ds.num_classes) {
    throw ConfigError("target label out of range");
  }
  ImageDataset out = ds;
  for (std::size_t i : plan.poisoned_indices) {
    if (i >= ds.size()) throw DataError("poison index " + std::to_string(i) + " out of range");
    apply_trigger_inplace(out.image(i), ds.shape, trigger);
    out.labels[i] = plan.target_label;
  }
  return out;
}

// ---------------------------------------------------------------------------
// subsets

ImageDataset subset(const ImageDataset& ds, std::span<const std::size_t> indices) {
  ImageDataset out;
  out.name = ds.name;
  out.split = ds.split;
  out.shape = ds.shape;
  out.num_classes = ds.num_classes;
  out.pixels.resize(indices.size() * ds.shape.size());
  out.labels.resize(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    if (i >= ds.size()) throw DataError("subset index " + std::to_string(i) + " out of range");
    auto src = ds.image(i);
    std::copy(src.begin(), src.end(), out.image(k).begin());
    out.labels[k] = ds.labels[i];
  }
  return out;
}

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace

ImageDataset sample_subset(const ImageDataset& ds, std::size_t n, std::uint64_t seed) {
  auto idx = shuffled_indices(ds.size(), seed);
  idx.resize(std::min(n, idx.size()));
  return subset(ds, idx);
}

std::pair<ImageDataset, ImageDataset> split_dataset(const ImageDataset& ds, std::size_t first_count,
                                                    std::uint64_t seed) {
  auto idx = shuffled_indices(ds.size(), seed);
  first_count = std::min(first_count, idx.size());
  std::vector<std::size_t> a(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(first_count));
  std::vector<std::size_t> b(idx.begin() + static_cast<std::ptrdiff_t>(first_count), idx.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {subset(ds, a), subset(ds, b)};
}

std::vector<std::size_t> indices_with_label(const ImageDataset& ds, int label) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.labels[i] == label) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// synthetic data

namespace {

void fill_blobs(ImageDataset& ds, const SyntheticSpec& spec, std::mt19937_64& rng) {
  const ImageShape low{4, 4, spec.shape.channels};
  std::uniform_real_distribution<float> proto_value(0.15f, 0.85f);
  std::vector<std::vector<float>> prototypes;
  for (int k = 0; k < spec.num_classes; ++k) {
    std::vector<float> coarse(low.size());
    for (auto& v : coarse) v = proto_value(rng);
    prototypes.push_back(resize_bilinear(coarse, low, spec.shape.height, spec.shape.width));
  }
  std::normal_distribution<float> noise(0.0f, spec.noise);
  std::uniform_int_distribution<int> label(0, spec.num_classes - 1);
  for (std::size_t i = 0; i < spec.count; ++i) {
    const int y = label(rng);
    ds.labels[i] = y;
    auto img = ds.image(i);
    for (std::size_t p = 0; p < img.size(); ++p)
      img[p] = std::clamp(prototypes[static_cast<std::size_t>(y)][p] + noise(rng), 0.0f, 1.0f);
  }
}

// Signed-distance style membership test of pixel (dy, dx) relative to the
// object centre for a shape of radius r.
bool inside_shape(int kind, double dy, double dx, double r) {
  const double ay = std::abs(dy);
  const double ax = std::abs(dx);
  const double d = std::sqrt(dy * dy + dx * dx);
  const double arm = std::max(1.0, r * 0.3);
  switch (kind % 10) {
    case 0: return d <= r;                                    // disc
    case 1: return ay <= r * 0.85 && ax <= r * 0.85;          // square
    case 2: return d <= r && d >= r * 0.55;                   // ring
    case 3: return (ay <= arm && ax <= r) || (ax <= arm && ay <= r);  // plus
    case 4: return std::abs(ay - ax) <= arm * 1.2 && d <= r * 1.1;    // x
    case 5: return dy <= r * 0.8 && dy >= -r && ax <= (dy + r) * 0.55;  // triangle
    case 6: return ax <= r && (std::abs(dy - r * 0.5) <= arm || std::abs(dy + r * 0.5) <= arm);
    case 7: return ay <= r && (std::abs(dx - r * 0.5) <= arm || std::abs(dx + r * 0.5) <= arm);
    case 8: return ay + ax <= r;                              // diamond
    default: return std::max(ay, ax) <= r * 0.9 && std::max(ay, ax) >= r * 0.5;  // frame
  }
}

void fill_shapes(ImageDataset& ds, const SyntheticSpec& spec, std::mt19937_64& rng) {
  const auto& s = spec.shape;
  const double scale = std::min(s.height, s.width) / 32.0;
  std::uniform_int_distribution<int> label(0, spec.num_classes - 1);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  std::uniform_real_distribution<double> jitter(-5.0 * scale, 5.0 * scale);
  std::uniform_real_distribution<double> radius(5.0 * scale, 8.0 * scale);
  std::normal_distribution<float> noise(0.0f, spec.noise);
  const ImageShape coarse{3, 3, s.channels};
  std::vector<float> field(coarse.size());
  for (std::size_t i = 0; i < spec.count; ++i) {
    const int y = label(rng);
    ds.labels[i] = y;
    for (auto& v : field) v = 0.15f + 0.7f * unit(rng);
    auto background = resize_bilinear(field, coarse, s.height, s.width);
    std::vector<float> colour(static_cast<std::size_t>(s.channels));
    float colour_mean = 0.0f;
    for (auto& c : colour) {
      c = unit(rng);
      colour_mean += c;
    }
    colour_mean /= static_cast<float>(s.channels);
    const float bg_mean =
        std::accumulate(background.begin(), background.end(), 0.0f) / static_cast<float>(background.size());
    if (std::abs(colour_mean - bg_mean) < 0.25f) {
      for (auto& c : colour) c = std::clamp(c + (colour_mean < bg_mean ? -0.35f : 0.35f), 0.0f, 1.0f);
    }
    const float tint = static_cast<float>(y / 10) * 0.15f;
    const double cy = (s.height - 1) / 2.0 + jitter(rng);
    const double cx = (s.width - 1) / 2.0 + jitter(rng);
    const double r = radius(rng);
    auto img = ds.image(i);
    for (int row = 0; row < s.height; ++row) {
      for (int col = 0; col < s.width; ++col) {
        const bool in = inside_shape(y, row - cy, col - cx, r);
        for (int ch = 0; ch < s.channels; ++ch) {
          const std::size_t p = (static_cast<std::size_t>(row) * s.width + col) * s.channels + ch;
          float v = in ? colour[static_cast<std::size_t>(ch)] + (ch == 0 ? tint : 0.0f) : background[p];
          img[p] = std::clamp(v + noise(rng), 0.0f, 1.0f);
        }
      }
    }
  }
}

}  // namespace

ImageDataset make_synthetic(const SyntheticSpec& spec, Split split) {
  if (spec.shape.height < 1 || spec.shape.width < 1 || spec.shape.channels < 1) {
    throw ConfigError("synthetic image shape must be positive");
  }
  if (spec.num_classes < 2) throw ConfigError("synthetic dataset needs at least two classes");
  ImageDataset ds;
  ds.name = spec.kind == SyntheticKind::shapes ? "synthetic-shapes" : "synthetic";
  ds.split = split;
  ds.shape = spec.shape;
  ds.num_classes = spec.num_classes;
  ds.pixels.resize(spec.count * spec.shape.size());
  ds.labels.resize(spec.count);
  std::mt19937_64 rng(spec.seed);
  if (spec.kind == SyntheticKind::blobs) {
    fill_blobs(ds, spec, rng);
  } else {
    fill_shapes(ds, spec, rng);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// on-disk formats

ImageDataset load_cifar_binary(const fs::path& file, int num_classes) {
  constexpr std::size_t kRecord = 1 + 3072;
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot open CIFAR batch " + file.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % kRecord != 0) {
    throw DataError("malformed record length in " + file.string() + ": record " +
                    std::to_string(bytes.size() / kRecord) + " is truncated");
  }
  ImageDataset ds;
  ds.name = "cifar10";
  ds.shape = {32, 32, 3};
  ds.num_classes = num_classes;
  const std::size_t n = bytes.size() / kRecord;
  ds.labels.resize(n);
  ds.pixels.resize(n * ds.shape.size());
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kRecord;
    if (rec[0] >= num_classes) {
      throw DataError("label " + std::to_string(rec[0]) + " out of range at index " + std::to_string(i));
    }
    ds.labels[i] = rec[0];
    auto img = ds.image(i);
    for (int ch = 0; ch < 3; ++ch)
      for (int p = 0; p < 1024; ++p)
        img[static_cast<std::size_t>(p) * 3 + ch] = static_cast<float>(rec[1 + ch * 1024 + p]) / 255.0f;
  }
  return ds;
}

namespace {

ImageDataset load_image_folder(const fs::path& dir, int num_classes) {
  const fs::path csv = dir / "labels.csv";
  if (!fs::exists(csv)) throw DataError("missing labels.csv in " + dir.string());
  std::vector<fs::path> pngs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".png") pngs.push_back(entry.path());
  }
  std::vector<std::pair<std::string, int>> rows;
  std::ifstream in(csv);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw DataError("labels.csv line " + std::to_string(line_no) + " has no comma");
    const std::string name = line.substr(0, comma);
    const std::string lab = line.substr(comma + 1);
    int value = 0;
    try {
      value = std::stoi(lab);
    } catch (const std::exception&) {
      if (line_no == 1) continue;  // header
      throw DataError("labels.csv line " + std::to_string(line_no) + " has a non-integer label");
    }
    rows.emplace_back(name, value);
  }
  if (rows.size() != pngs.size()) {
    throw DataError("count mismatch: " + std::to_string(pngs.size()) + " PNG files but " +
                    std::to_string(rows.size()) + " label rows");
  }
  ImageDataset ds;
  ds.name = dir.filename().string();
  ds.num_classes = num_classes;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& [name, label] = rows[i];
    if (label < 0 || label >= num_classes) {
      throw DataError("label " + std::to_string(label) + " out of range at index " + std::to_string(i));
    }
    ImageShape shape;
    auto img = read_png(dir / name, shape);
    if (i == 0) {
      ds.shape = shape;
    } else if (shape != ds.shape) {
      throw DataError("image shape differs at index " + std::to_string(i));
    }
    ds.pixels.insert(ds.pixels.end(), img.begin(), img.end());
    ds.labels.push_back(label);
  }
  return ds;
}

}  // namespace

ImageDataset load_dataset(const fs::path& path, DatasetFormat format, Split split, int num_classes) {
  if (format == DatasetFormat::synthetic) {
    throw ConfigError("synthetic datasets are built with make_synthetic");
  }
  if (!fs::exists(path)) throw DataError("dataset path does not exist: " + path.string());
  ImageDataset ds;
  if (format == DatasetFormat::cifar_binary) {
    if (fs::is_directory(path)) {
      std::vector<fs::path> files;
      for (const auto& entry : fs::directory_iterator(path)) {
        const auto name = entry.path().filename().string();
        const bool is_test = name.rfind("test_batch", 0) == 0;
        const bool is_train = name.rfind("data_batch", 0) == 0;
        if ((split == Split::test && is_test) || (split == Split::train && is_train))
          files.push_back(entry.path());
      }
      if (files.empty()) throw DataError("no CIFAR batch files in " + path.string());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) {
        auto part = load_cifar_binary(f, num_classes);
        if (ds.labels.empty()) {
          ds = std::move(part);
        } else {
          ds.pixels.insert(ds.pixels.end(), part.pixels.begin(), part.pixels.end());
          ds.labels.insert(ds.labels.end(), part.labels.begin(), part.labels.end());
        }
      }
    } else {
      ds = load_cifar_binary(path, num_classes);
    }
  } else {
    ds = load_image_folder(path, num_classes);
  }
  ds.split = split;
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// PNG

void write_png(const fs::path& file, std::span<const float> image, ImageShape shape) {
  if (shape.channels != 1 && shape.channels != 3) throw DataError("PNG export needs 1 or 3 channels");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(shape.width);
  img.height = static_cast<png_uint_32>(shape.height);
  img.format = shape.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<png_byte> bytes(shape.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<png_byte>(std::lround(std::clamp(image[i], 0.0f, 1.0f) * 255.0f));
  if (!png_image_write_to_file(&img, file.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw DataError("cannot write PNG " + file.string() + ": " + img.message);
  }
}

std::vector<float> read_png(const fs::path& file, ImageShape& shape) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, file.c_str())) {
    throw DataError("cannot read PNG " + file.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> bytes(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr)) {
    throw DataError("cannot decode PNG " + file.string() + ": " + img.message);
  }
  shape = {static_cast<int>(img.height), static_cast<int>(img.width), 3};
  std::vector<float> out(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = static_cast<float>(bytes[i]) / 255.0f;
  return out;
}

// ---------------------------------------------------------------------------
// binary blocks and trigger files

void write_f32_block(const fs::path& file, std::span<const float> values) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("cannot write " + file.string());
  for (float v : values) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
  }
}

std::vector<float> read_f32_block(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot open " + file.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 4 != 0) throw DataError("float block " + file.string() + " has a ragged length");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

void save_trigger(const fs::path& stem, const TriggerSpec& trigger) {
  trigger.validate();
  json sidecar;
  sidecar["height"] = trigger.shape.height;
  sidecar["width"] = trigger.shape.width;
  sidecar["channels"] = trigger.shape.channels;
  json coords = json::array();
  for (const auto& p : trigger.mask) coords.push_back({p.row, p.col});
  sidecar["mask_coords"] = coords;
  sidecar["transparency"] = trigger.transparency;
  sidecar["side_hint"] = trigger.side_hint;
  write_f32_block(fs::path(stem.string() + ".bin"), trigger.values);
  std::ofstream(fs::path(stem.string() + ".json")) << sidecar.dump(2) << "\n";
}

TriggerSpec load_trigger(const fs::path& stem) {
  std::ifstream in(fs::path(stem.string() + ".json"));
  if (!in) throw DataError("missing trigger sidecar " + stem.string() + ".json");
  json sidecar;
  try {
    in >> sidecar;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed trigger sidecar: ") + e.what());
  }
  TriggerSpec t;
  t.shape = {sidecar.at("height").get<int>(), sidecar.at("width").get<int>(),
             sidecar.at("channels").get<int>()};
  for (const auto& c : sidecar.at("mask_coords")) t.mask.push_back({c.at(0).get<int>(), c.at(1).get<int>()});
  t.transparency = sidecar.at("transparency").get<float>();
  t.side_hint = sidecar.at("side_hint").get<int>();
  t.values = read_f32_block(fs::path(stem.string() + ".bin"));
  t.validate();
  return t;
}

}  // namespace qoebd
