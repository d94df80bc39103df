#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "qoebd/attention.hpp"
#include "qoebd/backdoor.hpp"
#include "qoebd/data.hpp"
#include "qoebd/defense.hpp"
#include "qoebd/model.hpp"
#include "qoebd/train.hpp"

namespace qoebd {

// A failure inside a pipeline stage; the message carries the stage tag.
class StageError : public std::runtime_error {
 public:
  StageError(const std::string& stage, const std::string& what)
      : std::runtime_error("[" + stage + "] " + what), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct DatasetConfig {
  std::string name = "cifar10";
  std::string path;  // empty: QOEBD_<NAME>_DIR, required unless synthetic
  DatasetFormat format = DatasetFormat::cifar_binary;
  int num_classes = 10;
  std::size_t train_count = 0;  // 0 keeps the whole split
  std::size_t val_count = 1000;  // carved from the test split
  std::size_t test_count = 0;
  // synthetic only
  ImageShape shape{32, 32, 3};
  SyntheticKind kind = SyntheticKind::shapes;
  float noise = 0.1f;
};

struct SeedBundle {
  std::uint64_t data = 1;
  std::uint64_t victim = 1;
  std::uint64_t ran = 2;
  std::uint64_t attack = 5;
  std::uint64_t defense = 7;
};

struct DefenseSelection {
  std::vector<std::string> run{"strip", "prune", "nc"};
  int samples = 500;  // test samples handed to STRIP / NC / pruning
  StripConfig strip;
  double prune_floor = 0.80;  // absolute CDA
  int prune_step = 1;
  NcConfig nc;
  NadConfig nad;
  double nad_fraction = 0.05;  // clean share of the train split given to NAD
  std::vector<std::pair<double, double>> patch{{0.0, 0.0}, {0.25, 0.0}, {0.0, 0.5}, {0.25, 0.5}};
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ArchDescriptor arch;
  ImageShape input{0, 0, 0};  // victim input; zero = dataset shape
  TrainHyper victim;
  TrainHyper ran_train;
  ArchDescriptor ran_arch{.kind = ArchKind::ran};
  AttackConfig attack;
  DefenseSelection defenses;
  std::string out = "runs";
  SeedBundle seeds;
  bool deterministic = false;

  ImageShape victim_input() const;
  bool operator==(const ExperimentConfig& o) const;
};

// Defaults for a dataset name (cifar10, cifar100, gtsrb, synthetic).
ExperimentConfig default_config(const std::string& dataset);

nlohmann::json to_json(const ExperimentConfig& c);
// Merges over the dataset defaults; unknown fields and type mismatches raise
// ConfigError naming the field path.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& file);
std::string serialize_config(const ExperimentConfig& c);
// Range checks that do not need the data.
void validate_config(const ExperimentConfig& c);

struct ExperimentData {
  ImageDataset train, val, test;
};
// Throws ConfigError for an unresolvable path.
std::filesystem::path resolve_dataset_path(const DatasetConfig& d);
ExperimentData load_experiment_data(const ExperimentConfig& c);

std::filesystem::path output_root(const ExperimentConfig& c, const std::string& flag);
std::string run_name(const ExperimentConfig& c, const std::string& timestamp);

// Run directory with stage bookkeeping. Stages are marked only once all of
// their files are written, so an interrupted stage reruns from scratch.
class RunDir {
 public:
  static RunDir create(const std::filesystem::path& root, const ExperimentConfig& c);
  static RunDir open(const std::filesystem::path& dir);

  const std::filesystem::path& path() const { return dir_; }
  const ExperimentConfig& config() const { return config_; }
  std::filesystem::path file(const std::string& rel) const { return dir_ / rel; }

  bool done(const std::string& stage) const;
  void mark(const std::string& stage, const nlohmann::json& info = {});
  nlohmann::json stages() const;

 private:
  RunDir(std::filesystem::path dir, ExperimentConfig c) : dir_(std::move(dir)), config_(std::move(c)) {}
  std::filesystem::path dir_;
  ExperimentConfig config_;
};

enum class AttackVariant { standard, ablation };
AttackVariant parse_attack_variant(const std::string& s);

struct AttackSummary {
  double asr = 0.0, cda = 0.0, ssim = 0.0, baseline_cda = 0.0;
  int best_k = 0;
  bool below_cda_floor = false;
};

void write_text_atomic(const std::filesystem::path& file, const std::string& text);

// Each step skips work already recorded in the run directory.
void run_train_clean(RunDir& run, const ExperimentData& data, std::ostream& log);
AttackSummary run_attack(RunDir& run, const ExperimentData& data, AttackVariant variant, std::ostream& log);
void run_defenses(RunDir& run, const ExperimentData& data, const std::vector<std::string>& defenses,
                  std::ostream& log);
nlohmann::json build_report(const RunDir& run, const RunDir* compare);
void write_report(const RunDir& run, const RunDir* compare);

std::vector<std::string> known_defenses();

}  // namespace qoebd
