#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qoebd {

struct ImageShape {
  int height = 0;
  int width = 0;
  int channels = 0;

  std::size_t pixels() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  std::size_t size() const { return pixels() * static_cast<std::size_t>(channels); }
  auto operator<=>(const ImageShape&) const = default;
};

enum class Split { train, test };

// Images are stored HWC, values in [0,1], back to back.
struct ImageDataset {
  std::string name;
  Split split = Split::train;
  ImageShape shape;
  int num_classes = 0;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const float> image(std::size_t i) const {
    return {pixels.data() + i * shape.size(), shape.size()};
  }
  std::span<float> image(std::size_t i) { return {pixels.data() + i * shape.size(), shape.size()}; }

  // Throws DataError naming the first offending index.
  void validate() const;
};

struct PixelCoord {
  int row = 0;
  int col = 0;
  auto operator<=>(const PixelCoord&) const = default;
};

// A blended pixel patch: values holds channels floats per mask coordinate, in
// mask order. transparency is the weight kept on the original pixel.
struct TriggerSpec {
  ImageShape shape;
  std::vector<PixelCoord> mask;
  std::vector<float> values;
  float transparency = 0.0f;
  int side_hint = 0;

  void validate() const;
};

struct PoisonPlan {
  int target_label = 0;
  double ratio = 0.0;
  std::vector<std::size_t> poisoned_indices;  // sorted
  std::uint64_t seed = 0;
};

enum class DatasetFormat { cifar_binary, image_folder, synthetic };

DatasetFormat parse_dataset_format(const std::string& s);
std::string to_string(DatasetFormat f);

// Procedural datasets. `blobs`: every class has a smooth random prototype and
// samples add pixel noise. `shapes`: a class-specific shape drawn near the
// image centre over a random textured background (a stand-in for natural
// images when no real dataset is on disk).
enum class SyntheticKind { blobs, shapes };

struct SyntheticSpec {
  std::size_t count = 0;
  ImageShape shape;
  int num_classes = 2;
  std::uint64_t seed = 0;
  SyntheticKind kind = SyntheticKind::blobs;
  float noise = 0.1f;
};

ImageDataset make_synthetic(const SyntheticSpec& spec, Split split = Split::train);

// For cifar_binary `path` is one batch file or a directory of batch files;
// in the directory case the split selects data_batch_*.bin or test_batch.bin.
// For image_folder `path` is a directory with PNG files and labels.csv.
ImageDataset load_dataset(const std::filesystem::path& path, DatasetFormat format,
                          Split split = Split::train, int num_classes = 10);
ImageDataset load_cifar_binary(const std::filesystem::path& file, int num_classes = 10);

ImageDataset subset(const ImageDataset& ds, std::span<const std::size_t> indices);
// First `n` samples after a seeded shuffle.
ImageDataset sample_subset(const ImageDataset& ds, std::size_t n, std::uint64_t seed);
// Split into (first, second) with `first_count` samples drawn at random.
std::pair<ImageDataset, ImageDataset> split_dataset(const ImageDataset& ds, std::size_t first_count,
                                                    std::uint64_t seed);
std::vector<std::size_t> indices_with_label(const ImageDataset& ds, int label);

// Corner-aligned bilinear resampling of an HWC image.
std::vector<float> resize_bilinear(std::span<const float> image, ImageShape in, int out_h,
                                   int out_w);

void apply_trigger_inplace(std::span<float> image, ImageShape shape, const TriggerSpec& trigger);
std::vector<float> apply_trigger(std::span<const float> image, ImageShape shape,
                                 const TriggerSpec& trigger);

// Uniform sampling without replacement of round(ratio * n) indices.
PoisonPlan make_poison_plan(std::size_t n, double ratio, int target_label, int num_classes,
                            std::uint64_t seed);
ImageDataset build_poisoned_set(const ImageDataset& ds, const TriggerSpec& trigger,
                                const PoisonPlan& plan);

// Trigger file: <stem>.bin holds the little-endian float32 values, <stem>.json
// the geometry sidecar.
void save_trigger(const std::filesystem::path& stem, const TriggerSpec& trigger);
TriggerSpec load_trigger(const std::filesystem::path& stem);

void write_png(const std::filesystem::path& file, std::span<const float> image, ImageShape shape);
std::vector<float> read_png(const std::filesystem::path& file, ImageShape& shape);

// Little-endian float32 block helpers shared by the binary artifacts.
void write_f32_block(const std::filesystem::path& file, std::span<const float> values);
std::vector<float> read_f32_block(const std::filesystem::path& file);

}  // namespace qoebd
