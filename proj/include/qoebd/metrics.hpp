#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "qoebd/data.hpp"
#include "qoebd/model.hpp"

namespace qoebd {

struct SSIMParams {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
  // 0 picks the default: Gaussian 11x11 (sigma 1.5) when both sides are at
  // least 32 px, otherwise a 7x7 uniform window. Windows never exceed the
  // image.
  int window = 0;
  double sigma = 1.5;
  bool gaussian = true;

  void validate() const;
};

// 1-D window weights (the 2-D window is their outer product), summing to one.
std::vector<double> ssim_window(ImageShape shape, const SSIMParams& p);

// Mean SSIM over all valid window positions and channels. The luminance term
// uses c1, the contrast and structure terms c2 and c2/2. When grad_b is given
// it receives dSSIM/db (same layout as b). The raw mean can dip below zero
// for anti-correlated images; MetricRecord clamps for reporting.
double ssim(std::span<const float> a, std::span<const float> b, ImageShape shape,
            const SSIMParams& p = {}, std::vector<float>* grad_b = nullptr);

enum class AsrDenominator { exclude_target, all };

struct AsrCount {
  std::size_t hits = 0;
  std::size_t total = 0;
  double rate() const { return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0; }
};

AsrCount asr_count(const Model& model, const ImageDataset& test, const TriggerSpec& trigger,
                   int target, AsrDenominator mode = AsrDenominator::exclude_target);
// Throws DataError when the denominator is empty.
double asr(const Model& model, const ImageDataset& test, const TriggerSpec& trigger, int target,
           AsrDenominator mode = AsrDenominator::exclude_target);
double cda(const Model& model, const ImageDataset& test);

// Mean SSIM between clean test images and their triggered copies at the
// trigger's resolution.
double mean_trigger_ssim(const ImageDataset& ds, const TriggerSpec& trigger, std::size_t max_samples = 0,
                         const SSIMParams& p = {});

// Perceptual distance between two feature stacks (each batch x channels x
// positions, batch 1): every position's channel vector is unit-normalised,
// squared differences are summed over channels and averaged over positions,
// then averaged over layers.
double feature_distance(std::span<const Tensor> fa, std::span<const Tensor> fb);
double lpips_proxy(const Model& features, std::span<const float> a, std::span<const float> b,
                   ImageShape shape);

struct MetricRecord {
  std::string name;
  double value = 0.0;
  std::string dataset;
  std::string model;
  std::string trigger;
  std::string timestamp;  // ISO 8601, filled by make_metric when empty
};

// Validates and normalises (ssim is clamped into [0,1]).
MetricRecord make_metric(std::string name, double value, std::string dataset, std::string model,
                         std::string trigger);
void append_metric_csv(const std::filesystem::path& file, const MetricRecord& r);
void write_metrics_json(const std::filesystem::path& file, std::span<const MetricRecord> records);
std::vector<MetricRecord> read_metrics_json(const std::filesystem::path& file);
std::string iso_timestamp();

}  // namespace qoebd
