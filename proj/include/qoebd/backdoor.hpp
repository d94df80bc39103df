#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "qoebd/attention.hpp"
#include "qoebd/metrics.hpp"
#include "qoebd/model.hpp"
#include "qoebd/train.hpp"
#include "qoebd/trigger.hpp"

namespace qoebd {

struct AttackConfig {
  int target = 2;
  double poison_ratio = 0.05;
  int side = 4;
  float transparency = 0.4f;
  QoEWeights qoe;
  double omega = 1.0;  // weight on the clean part of a mixed retrain

  double trigger_lr = 0.05;
  int trigger_steps = 500;
  int trigger_batch = 64;
  bool boost = true;

  double retrain_lr = 1e-3;
  int retrain_epochs = 3;  // passes over the round's subset
  int retrain_batch = 64;
  OptimizerKind retrain_optimizer = OptimizerKind::adam;
  double retrain_fraction = 0.2;  // of the train split, resampled every round

  int max_iters = 10;     // K
  double epsilon = 0.5;   // plateau tolerance in accuracy points
  double cda_floor = 3.0; // allowed CDA loss in points for the best iterate
  bool alternating = true;

  int maps = 50;  // N attention maps averaged
  MaskProvenance mask = MaskProvenance::attention;
  std::uint64_t seed = 0;

  // Throws ConfigError; `shape` is the victim input.
  void validate(ImageShape shape, int num_classes) const;
};

void to_json(nlohmann::json& j, const AttackConfig& c);
void from_json(const nlohmann::json& j, AttackConfig& c);

enum class RetrainMode { mixed, clean };
std::string to_string(RetrainMode m);

// Even rounds mix in poisoned copies, odd rounds use clean samples only.
RetrainMode retrain_mode(int k);

struct RoundStats {
  RetrainMode mode = RetrainMode::clean;
  std::size_t clean_samples = 0;
  std::size_t poisoned_samples = 0;
  double loss = 0.0;
};

// One retraining block on a fresh random subset of `train` in the given mode.
// Mixed rounds add poisoned copies (relabelled to the target) of a
// poison_ratio share of the subset; the clean part carries weight omega.
RoundStats retrain_round(Model& model, const ImageDataset& train, const TriggerSpec& trigger, int k,
                         RetrainMode mode, const AttackConfig& cfg);
RoundStats alternating_retrain_round(Model& model, const ImageDataset& train, const TriggerSpec& trigger,
                                     int k, const AttackConfig& cfg);

struct CoOptRecord {
  int k = 0;
  double asr = 0.0;
  double cda = 0.0;
  double loss = 0.0;  // best probe loss of this round's trigger optimisation
  std::string trigger_id;
  RetrainMode mode = RetrainMode::mixed;
};

struct CoOptTrace {
  std::vector<CoOptRecord> records;
  void append_jsonl(const std::filesystem::path& file, const CoOptRecord& r) const;
  void write_jsonl(const std::filesystem::path& file) const;
  static CoOptTrace read_jsonl(const std::filesystem::path& file);
};

struct CoOptResult {
  TriggerSpec trigger;
  std::unique_ptr<Model> model;
  CoOptTrace trace;
  double baseline_cda = 0.0;
  int best_k = 0;
  bool below_cda_floor = false;  // no iterate met the floor; best-ASR iterate returned
  std::vector<TriggerOptResult> trigger_runs;
};

using CoOptHook = std::function<void(const CoOptRecord&, const TriggerSpec&, const Model&)>;

// Algorithm loop: for k = 1..K optimise the trigger against the previous model
// (warm-started from the previous trigger), then retrain. Rounds are mixed and
// clean in turn starting with a mixed one, or always mixed when
// cfg.alternating is off. ASR and CDA are measured on `val` after each round.
CoOptResult co_optimize(const Model& clean, const ImageDataset& train, const ImageDataset& val,
                        const Mask& mask, const AttackConfig& cfg, const CoOptHook& hook = {});

// Mask at the victim's input resolution for the configured strategy. `ran` is
// only consulted for the attention strategy.
Mask build_attack_mask(const RanModel* ran, const ImageDataset& train, ImageShape victim_input,
                       const AttackConfig& cfg);

enum class AblationVariant { base, attn, iter, all };
std::string to_string(AblationVariant v);
AblationVariant parse_ablation_variant(const std::string& s);

struct AblationRow {
  AblationVariant variant = AblationVariant::base;
  double asr = 0.0;
  double cda = 0.0;
  double ssim = 0.0;
};

// base: corner mask, one trigger pass, one mixed retrain. attn: the same with
// the attention mask. iter: the full loop with mixed-only retraining. all: the
// full loop with alternating retraining. Metrics on `test`.
std::vector<AblationRow> run_ablation(const Model& clean, const ImageDataset& train, const ImageDataset& val,
                                      const ImageDataset& test, const Mask& attention_mask,
                                      const AttackConfig& cfg, std::span<const AblationVariant> variants);
void write_ablation_csv(const std::filesystem::path& file, std::span<const AblationRow> rows);

}  // namespace qoebd
