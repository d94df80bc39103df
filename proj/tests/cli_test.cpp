// Drives the qoebd binary end to end on the synthetic smoke config.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "qoebd/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "qoebd_cli_runs";

struct Result {
  int code = -1;
  std::string out, err;
  double seconds = 0;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Result cli(const std::string& args) {
  const fs::path o = kRoot / "stdout.txt", e = kRoot / "stderr.txt";
  const std::string cmd = "QOEBD_OUTPUT_ROOT='" + (kRoot / "runs").string() + "' '" QOEBD_CLI "' " + args + " >'" +
                          o.string() + "' 2>'" + e.string() + "'";
  const auto t0 = std::chrono::steady_clock::now();
  const int status = std::system(cmd.c_str());
  Result r;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(o);
  r.err = slurp(e);
  return r;
}

std::string run_dir_of(const Result& r) {
  const auto p = r.out.find("run ");
  REQUIRE(p != std::string::npos);
  const auto end = r.out.find('\n', p);
  return r.out.substr(p + 4, end - p - 4);
}

std::string smoke() { return std::string(QOEBD_CONFIGS) + "/smoke.json"; }

std::size_t runs_on_disk() {
  if (!fs::exists(kRoot / "runs")) return 0;
  return static_cast<std::size_t>(std::distance(fs::directory_iterator(kRoot / "runs"), fs::directory_iterator{}));
}

fs::path write_config(const std::string& name, const json& j) {
  const fs::path p = kRoot / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

struct Setup {
  Setup() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
  }
};
const Setup setup;

}  // namespace

TEST_CASE("config errors exit 2 without a run directory") {
  const auto before = runs_on_disk();
  auto p = write_config("missing.json", {{"dataset", {{"name", "cifar10"}, {"path", "/no/such/cifar"}}}});
  auto r = cli("train-clean --config " + p.string());
  CHECK(r.code == 2);
  CHECK(r.err.find("dataset.path") != std::string::npos);

  p = write_config("typo.json", {{"dataset", {{"name", "synthetic"}}}, {"attack", {{"thetta", 2}}}});
  r = cli("attack --config " + p.string());
  CHECK(r.code == 2);
  CHECK(r.err.find("unknown field attack.thetta") != std::string::npos);

  std::ofstream(kRoot / "broken.json") << "{\"dataset\": ";
  CHECK(cli("train-clean --config " + (kRoot / "broken.json").string()).code == 2);
  CHECK(cli("train-clean --config /no/such/config.json").code == 2);
  CHECK(cli("train-clean").code == 2);
  CHECK(cli("attack --config " + smoke() + " --mask diagonal").code == 2);
  CHECK(cli("attack --config " + smoke() + " --variant everything").code == 2);
  CHECK(cli("frobnicate").code == 2);
  CHECK(cli("report " + (kRoot / "nowhere").string()).code == 2);
  CHECK(runs_on_disk() == before);
}

TEST_CASE("train-clean smoke run is fast and reproducible") {
  const auto a = cli("train-clean --deterministic --config " + smoke());
  REQUIRE(a.code == 0);
  CHECK(a.seconds < 60.0);
  const auto b = cli("train-clean --deterministic --config " + smoke());
  REQUIRE(b.code == 0);
  const fs::path ra = run_dir_of(a), rb = run_dir_of(b);
  CHECK(ra != rb);
  CHECK(fs::exists(ra / "checkpoints/clean.bin"));
  CHECK(fs::exists(ra / "metrics.json"));
  CHECK(fs::exists(ra / "plots/clean_loss.csv"));
  CHECK(slurp(ra / "checkpoints/clean.bin") == slurp(rb / "checkpoints/clean.bin"));
  const auto sa = json::parse(slurp(ra / "stages.json")), sb = json::parse(slurp(rb / "stages.json"));
  CHECK(sa["train-clean"]["cda"] == sb["train-clean"]["cda"]);
  CHECK(sa.contains("ran"));  // the smoke config uses an attention mask

  // The run name carries dataset, arch and a seed tag.
  CHECK(ra.filename().string().rfind("synthetic-cnn_small-", 0) == 0);

  // Snapshot equals the normalized input.
  const auto cfg = qoebd::load_config(smoke());
  auto det = cfg;
  det.deterministic = true;
  CHECK(slurp(ra / "config.json") == qoebd::serialize_config(det));
}

TEST_CASE("attack, resume, defend and report") {
  const auto r = cli("attack --deterministic --mask corner --config " + smoke());
  REQUIRE(r.code == 0);
  CHECK(r.seconds < 60.0);
  const fs::path run = run_dir_of(r);
  CHECK(r.out.find("ASR=") != std::string::npos);
  CHECK(r.out.find("CDA=") != std::string::npos);
  CHECK(r.out.find("SSIM=") != std::string::npos);
  CHECK(json::parse(slurp(run / "mask.json"))["provenance"] == "corner");
  CHECK_FALSE(fs::exists(run / "checkpoints/ran.bin"));  // not needed for a corner mask
  for (const char* f : {"checkpoints/backdoored.bin", "trigger.bin", "trigger.json", "trace.jsonl", "metrics.csv"})
    CHECK(fs::exists(run / f));

  // Resume skips completed stages and leaves artifacts alone.
  const std::string stages = slurp(run / "stages.json");
  const auto stamp = fs::last_write_time(run / "checkpoints/backdoored.bin");
  const auto again = cli("attack --resume " + run.string());
  CHECK(again.code == 0);
  CHECK(slurp(run / "stages.json") == stages);
  CHECK(fs::last_write_time(run / "checkpoints/backdoored.bin") == stamp);
  CHECK(again.out.substr(again.out.find("ASR=")) == r.out.substr(r.out.find("ASR=")));
  CHECK(cli("attack --resume " + run.string() + " --mask random").code == 2);

  // Defenses.
  const auto d = cli("defend " + run.string() + " --defenses strip,prune,nc");
  REQUIRE(d.code == 0);
  std::set<std::string> labels;
  std::istringstream es(slurp(run / "defenses/strip/strip_entropy.csv"));
  std::string line;
  std::getline(es, line);
  CHECK(line == "distribution,entropy");
  while (std::getline(es, line)) labels.insert(line.substr(0, line.find(',')));
  CHECK(labels == std::set<std::string>{"clean", "triggered"});

  std::istringstream pc(slurp(run / "defenses/prune/prune_curve.csv"));
  std::getline(pc, line);
  CHECK(line == "pruned,fraction,asr,cda");
  int points = 0, last = -1;
  while (std::getline(pc, line)) {
    const int k = std::stoi(line.substr(0, line.find(',')));
    CHECK(k > last);
    last = k;
    ++points;
  }
  CHECK(points > 2);
  const auto prune = json::parse(slurp(run / "defenses/prune/prune.json"));
  CHECK(prune.contains("monotone_violations"));

  std::istringstream nc(slurp(run / "defenses/nc/nc_norms.csv"));
  std::getline(nc, line);
  CHECK(line == "label,l1_norm,anomaly_index,attack_rate");
  int rows = 0;
  while (std::getline(nc, line)) ++rows;
  CHECK(rows == 4);

  CHECK(cli("defend " + run.string() + " --defenses fft").code == 2);
  CHECK(cli("defend " + run.string() + " --defenses patch").code == 2);

  // Report references every file in the run.
  REQUIRE(cli("report " + run.string()).code == 0);
  const auto rep = json::parse(slurp(run / "report.json"));
  std::set<std::string> listed;
  for (const auto& f : rep["artifacts"]) listed.insert(f.get<std::string>());
  for (const auto& e : fs::recursive_directory_iterator(run)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), run).generic_string();
    if (rel == "report.json" || rel == "report.txt") continue;
    CHECK_MESSAGE(listed.count(rel) == 1, rel);
  }
  for (const auto& f : listed) CHECK(fs::exists(run / f));
  CHECK(rep["plots"].contains("loss_curves"));
  CHECK(rep["plots"].contains("entropy_histograms"));
  CHECK(rep["plots"].contains("pruning_curves"));
  CHECK(rep["metrics"].contains("asr"));
  const std::string text = slurp(run / "report.txt");
  for (const auto& f : listed) CHECK(text.find(f) != std::string::npos);

  // A defend on a run without an attack is a runtime failure.
  const auto t = cli("train-clean --config " + smoke());
  REQUIRE(t.code == 0);
  CHECK(cli("defend " + run_dir_of(t) + " --defenses strip").code == 3);

  // Compare against a second attack.
  const auto other = cli("attack --deterministic --mask random --config " + smoke());
  REQUIRE(other.code == 0);
  REQUIRE(cli("report " + run.string() + " --compare " + run_dir_of(other)).code == 0);
  const auto cmp = json::parse(slurp(run / "report.json"));
  REQUIRE(cmp.contains("compare"));
  const auto& m = cmp["compare"]["metrics"];
  for (const char* k : {"asr", "cda", "ssim"}) {
    REQUIRE(m.contains(k));
    CHECK(m[k]["delta"].get<double>() == doctest::Approx(m[k]["this"].get<double>() - m[k]["other"].get<double>()));
  }
  CHECK(slurp(run / "report.txt").find("compared with") != std::string::npos);
}

TEST_CASE("ablation variant writes four rows") {
  const auto r = cli("attack --deterministic --variant ablation --config " + smoke());
  REQUIRE(r.code == 0);
  const fs::path run = run_dir_of(r);
  std::istringstream in(slurp(run / "ablation.csv"));
  std::string line;
  std::getline(in, line);
  CHECK(line == "variant,asr,cda,ssim");
  std::vector<std::string> variants;
  while (std::getline(in, line)) variants.push_back(line.substr(0, line.find(',')));
  CHECK(variants == std::vector<std::string>{"base", "base+attn", "base+attn+iter", "all"});
  REQUIRE(cli("report " + run.string()).code == 0);
  const auto rep = json::parse(slurp(run / "report.json"));
  REQUIRE(rep["ablation"].size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(rep["ablation"][i]["variant"] == variants[i]);
}
