#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "qoebd/data.hpp"
#include "qoebd/model.hpp"
#include "qoebd/train.hpp"

namespace qoebd {

// Serialisable outcome of one defense: a JSON body plus named CSV tables for
// plotting.
struct DefenseReport {
  std::string name;
  nlohmann::json body;
  std::vector<std::pair<std::string, std::string>> tables;  // file name, contents

  // Writes <dir>/<name>.json and every table into dir.
  void write(const std::filesystem::path& dir) const;
};

// ---- STRIP ----------------------------------------------------------------

struct StripConfig {
  int copies = 20;
  double fpr = 0.01;  // clean-entropy percentile used as the threshold
  int bins = 20;
  std::uint64_t seed = 0;
};

struct StripResult {
  std::vector<double> clean_entropy;
  std::vector<double> triggered_entropy;  // empty without a trigger
  double threshold = 0.0;
  double detection_rate = 0.0;  // triggered inputs with entropy below threshold
  double false_positive_rate = 0.0;
  double ks = 0.0;       // two-sample Kolmogorov-Smirnov statistic
  double overlap = 0.0;  // histogram intersection, 1 = identical
  std::vector<double> edges;
  std::vector<double> clean_hist;  // normalised to sum 1
  std::vector<double> triggered_hist;
};

// Mean log2 prediction entropy of every sample blended (pixelwise mean) with
// `copies` distinct overlay images drawn from `pool`.
std::vector<double> strip_entropies(const Model& model, const ImageDataset& samples, const ImageDataset& pool,
                                    int copies, const TriggerSpec* trigger, std::uint64_t seed);
StripResult strip_analyze(const Model& model, const ImageDataset& samples, const ImageDataset& pool,
                          const StripConfig& cfg, const TriggerSpec* trigger);
double ks_statistic(std::span<const double> a, std::span<const double> b);
// Linear-interpolated percentile, q in [0,1].
double percentile(std::vector<double> v, double q);
DefenseReport to_report(const StripResult& r);

// ---- pruning --------------------------------------------------------------

struct PrunePoint {
  int pruned = 0;
  double fraction = 0.0;
  double asr = 0.0;
  double cda = 0.0;
};

struct PruneReport {
  std::string layer;
  std::vector<int> order;  // units by ascending mean clean activation
  std::vector<PrunePoint> curve;
  double floor = 0.0;
  std::optional<PrunePoint> crossing;  // first point with CDA below the floor
  int monotone_violations = 0;         // CDA rises of more than half a point
};

// Zeroes prunable units cumulatively (step units at a time) until CDA on `val`
// falls below cda_floor.
PruneReport prune_sweep(const Model& model, const ImageDataset& val, const TriggerSpec& trigger, int target,
                        double cda_floor, int step = 1);
DefenseReport to_report(const PruneReport& r);

// ---- Neural Cleanse ---------------------------------------------------------

struct NcConfig {
  int steps = 1000;
  int batch = 32;
  double lr = 0.1;
  double l1 = 1e-3;  // starting weight; adapted during reversal
  std::uint64_t seed = 0;
};

struct ReversedTrigger {
  int label = 0;
  ImageShape shape;
  std::vector<float> mask;     // H x W in (0,1)
  std::vector<float> pattern;  // H x W x C in (0,1)
  double l1_norm = 0.0;
  double attack_rate = 0.0;  // val samples sent to `label` by the reversed trigger
};

// Optimises x' = (1 - m) x + m p with m = sigmoid(a), p = sigmoid(b) to
// minimise CE(f(x'), label) + l1 * sum(m).
ReversedTrigger reverse_trigger(const Model& model, int label, const ImageDataset& val, const NcConfig& cfg);

// |n_i - median| / (1.4826 * MAD); all zero when MAD is zero.
std::vector<double> mad_anomaly(std::span<const double> norms);
// Labels whose index exceeds `threshold` with a norm below the median.
std::vector<int> mad_flagged(std::span<const double> norms, double threshold = 2.0);

struct NcReport {
  std::vector<ReversedTrigger> triggers;
  std::vector<double> norms;
  std::vector<double> anomaly;
  std::vector<int> flagged;
};

NcReport neural_cleanse(const Model& model, const ImageDataset& val, const NcConfig& cfg);
DefenseReport to_report(const NcReport& r);

// ---- NAD ------------------------------------------------------------------

struct NadConfig {
  TrainHyper teacher{.epochs = 5, .lr = 1e-3};
  TrainHyper student{.epochs = 5, .lr = 1e-3};
  double beta = 5000.0;  // weight of the attention alignment term
};

// Channel-summed squared activations per position, L2-normalised per sample;
// features is batch x channels x positions.
Tensor attention_maps_of(const Tensor& features);

// beta * mean over batch and positions of the squared map difference. When
// grad is given it receives d/d(student features).
double attention_alignment(const Tensor& student, const Tensor& teacher, double beta, Tensor* grad);

struct NadResult {
  std::unique_ptr<Model> model;
  double asr_before = 0.0, cda_before = 0.0;
  double asr_after = 0.0, cda_after = 0.0;
};

NadResult nad_distill(const Model& backdoored, const ImageDataset& clean_subset, const ImageDataset& test,
                      const TriggerSpec& trigger, int target, const NadConfig& cfg);
DefenseReport to_report(const NadResult& r);

// ---- ViT patch processing ----------------------------------------------------

struct PatchSetting {
  double drop = 0.0;
  double shuffle = 0.0;
  double cda = 0.0;
  double asr = 0.0;
};

// Each sample gets its own random drop/shuffle of patch tokens before the
// positional embedding.
std::vector<PatchSetting> patch_process_defense(const Model& vit, const ImageDataset& test,
                                                std::span<const std::pair<double, double>> fractions,
                                                const TriggerSpec* trigger, int target, std::uint64_t seed);
DefenseReport to_report(std::span<const PatchSetting> r);

}  // namespace qoebd
