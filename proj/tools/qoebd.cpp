// qoebd: train-clean / attack / defend / report over a run directory.
//
// Exit codes: 0 ok, 2 config error, 3 runtime failure.

#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "qoebd/error.hpp"
#include "qoebd/experiment.hpp"

using namespace qoebd;

namespace {

constexpr int kOk = 0;
constexpr int kConfig = 2;
constexpr int kRuntime = 3;

struct Common {
  std::string config;
  std::string resume;
  std::string out;
  std::string mask;
  bool deterministic = false;
};

// Either a fresh run from --config or the snapshot of --resume. Flags that
// change the config must agree with a resumed snapshot.
RunDir open_run(const Common& o, ExperimentData& data) {
  if (o.config.empty() && o.resume.empty()) throw ConfigError("need --config or --resume");
  ExperimentConfig cfg;
  std::optional<RunDir> existing;
  if (!o.resume.empty()) {
    existing = RunDir::open(o.resume);
    cfg = existing->config();
    if (!o.config.empty() && !(load_config(o.config) == cfg))
      throw ConfigError("--config differs from the snapshot in " + o.resume);
  } else {
    cfg = load_config(o.config);
  }
  ExperimentConfig eff = cfg;
  if (!o.mask.empty()) eff.attack.mask = parse_mask_provenance(o.mask);
  if (o.deterministic) eff.deterministic = true;
  validate_config(eff);
  if (existing && !(eff == cfg)) throw ConfigError("--mask/--deterministic conflict with the snapshot in " + o.resume);
  data = load_experiment_data(eff);  // before any directory exists
  if (existing) return *existing;
  return RunDir::create(output_root(eff, o.out), eff);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"QoE-aware backdoor experiments"};
  app.require_subcommand(1);

  Common tc;
  auto* train = app.add_subcommand("train-clean", "train and checkpoint the clean victim (and the RAN if needed)");
  train->add_option("--config", tc.config, "experiment config (JSON)");
  train->add_option("--resume", tc.resume, "existing run directory");
  train->add_option("--out", tc.out, "output root (overrides QOEBD_OUTPUT_ROOT and the config)");
  train->add_flag("--deterministic", tc.deterministic, "fixed-order reductions");

  Common ac;
  std::string variant = "standard";
  auto* attack = app.add_subcommand("attack", "mask, co-optimisation, metrics");
  attack->add_option("--config", ac.config, "experiment config (JSON)");
  attack->add_option("--resume", ac.resume, "existing run directory");
  attack->add_option("--out", ac.out, "output root");
  attack->add_option("--mask", ac.mask, "attention | corner | random");
  attack->add_option("--variant", variant, "standard | ablation");
  attack->add_flag("--deterministic", ac.deterministic, "fixed-order reductions");

  std::string defend_run, defenses;
  auto* defend = app.add_subcommand("defend", "run defenses against a finished attack");
  defend->add_option("run", defend_run, "run directory")->required();
  defend->add_option("--defenses", defenses, "comma list: strip,prune,nc,nad,patch (default: config)");

  std::string report_run, compare;
  auto* report = app.add_subcommand("report", "consolidated JSON + text report");
  report->add_option("run", report_run, "run directory")->required();
  report->add_option("--compare", compare, "second run for per-metric deltas");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*train) {
      ExperimentData data;
      RunDir run = open_run(tc, data);
      std::cout << "run " << run.path().string() << std::endl;
      run_train_clean(run, data, std::cerr);
      std::cout << "clean CDA=" << run.stages().at("train-clean").at("cda").get<double>() << std::endl;
    } else if (*attack) {
      const AttackVariant v = parse_attack_variant(variant);
      ExperimentData data;
      RunDir run = open_run(ac, data);
      std::cout << "run " << run.path().string() << std::endl;
      const auto s = run_attack(run, data, v, std::cerr);
      std::cout << "ASR=" << s.asr << " CDA=" << s.cda << " SSIM=" << s.ssim
                << (s.below_cda_floor ? " (below CDA floor)" : "") << std::endl;
    } else if (*defend) {
      RunDir run = RunDir::open(defend_run);
      const auto list = defenses.empty() ? run.config().defenses.run : split_list(defenses);
      const ExperimentData data = load_experiment_data(run.config());
      run_defenses(run, data, list, std::cerr);
      std::cout << "reports in " << (run.path() / "defenses").string() << std::endl;
    } else if (*report) {
      RunDir run = RunDir::open(report_run);
      std::optional<RunDir> other;
      if (!compare.empty()) other = RunDir::open(compare);
      write_report(run, other ? &*other : nullptr);
      std::cout << (run.path() / "report.json").string() << std::endl;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kRuntime;
  }
  return kOk;
}
