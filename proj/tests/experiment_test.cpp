#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "qoebd/error.hpp"
#include "qoebd/experiment.hpp"

using namespace qoebd;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string error_of(const json& j) {
  try {
    parse_config(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

json synthetic_json() {
  return {{"dataset", {{"name", "synthetic"}, {"height", 8}, {"width", 8}, {"num_classes", 3}, {"train_count", 60},
                       {"val_count", 20}, {"test_count", 30}}},
          {"attack", {{"side", 2}, {"target", 1}}}};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("qoebd_exp_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("dataset defaults") {
  const auto c10 = default_config("cifar10");
  CHECK(c10.dataset.num_classes == 10);
  CHECK(c10.attack.poison_ratio == 0.05);
  CHECK(c10.attack.qoe.theta == 3.0);
  CHECK(default_config("cifar100").dataset.num_classes == 100);
  const auto g = default_config("gtsrb");
  CHECK(g.dataset.num_classes == 43);
  CHECK(g.attack.qoe.theta == 21.0);
  CHECK(g.dataset.format == DatasetFormat::image_folder);
  CHECK(default_config("synthetic").dataset.format == DatasetFormat::synthetic);

  const auto p = parse_config({{"dataset", {{"name", "gtsrb"}}}});
  CHECK(p.attack.qoe.theta == 21.0);
  CHECK(p.dataset.num_classes == 43);
}

TEST_CASE("config round trip") {
  auto c = parse_config(synthetic_json());
  c.defenses.run = {"strip", "nad"};
  c.attack.transparency = 0.3f;
  c.seeds.attack = 99;
  c.deterministic = true;
  const std::string text = serialize_config(c);
  const auto back = parse_config(json::parse(text));
  CHECK(back == c);
  CHECK(serialize_config(back) == text);
  CHECK(back.seeds.attack == 99);
  CHECK(back.attack.transparency == 0.3f);
}

TEST_CASE("schema errors name the field") {
  auto j = synthetic_json();
  j["attack"]["thetta"] = 3;
  CHECK(error_of(j) == "unknown field attack.thetta");

  j = synthetic_json();
  j["victim"] = {{"train", {{"epochs", 2.5}}}};
  CHECK(error_of(j) == "victim.train.epochs: expected an integer");

  j = synthetic_json();
  j["victim"] = {{"arch", {{"conv_channels", {8, "x"}}}}};
  CHECK(error_of(j) == "victim.arch.conv_channels[1]: expected a number");

  j = synthetic_json();
  j["seeds"] = {{"data", -1}};
  CHECK(error_of(j) == "seeds.data: must be non-negative");

  j = synthetic_json();
  j["deterministic"] = "yes";
  CHECK(error_of(j) == "deterministic: expected true or false");

  j = synthetic_json();
  j["attack"]["target"] = 3;
  CHECK(error_of(j).rfind("attack: ", 0) == 0);

  j = synthetic_json();
  j["attack"]["mask"] = "diagonal";
  CHECK(error_of(j).rfind("attack: ", 0) == 0);

  j = synthetic_json();
  j["defenses"] = {{"run", {"strip", "patch"}}};
  CHECK(error_of(j) == "defenses.run[1]: patch processing needs a vit_lite victim");

  j = synthetic_json();
  j["defenses"] = {{"run", {"fft"}}};
  CHECK(error_of(j) == "defenses.run[0]: unknown defense 'fft'");

  j = synthetic_json();
  j["dataset"]["train_count"] = 0;
  CHECK(error_of(j) == "dataset.train_count/test_count: synthetic data needs explicit counts");

  CHECK(error_of(json::array()) == "config: expected an object");
}

TEST_CASE("dataset path resolution") {
  DatasetConfig d;
  d.name = "nosuchset";
  CHECK_THROWS_AS(resolve_dataset_path(d), ConfigError);
  d.path = "/definitely/not/here";
  CHECK_THROWS_WITH_AS(resolve_dataset_path(d), "dataset.path: /definitely/not/here does not exist", ConfigError);
  const fs::path dir = scratch("data");
  ::setenv("QOEBD_NOSUCHSET_DIR", dir.c_str(), 1);
  d.path.clear();
  CHECK(resolve_dataset_path(d) == dir);
  ::unsetenv("QOEBD_NOSUCHSET_DIR");
  d.format = DatasetFormat::synthetic;
  CHECK(resolve_dataset_path(d).empty());
}

TEST_CASE("synthetic experiment data splits") {
  const auto c = parse_config(synthetic_json());
  const auto d = load_experiment_data(c);
  CHECK(d.train.size() == 60);
  CHECK(d.val.size() == 20);
  CHECK(d.test.size() == 30);
  const auto again = load_experiment_data(c);
  CHECK(again.test.pixels == d.test.pixels);
  CHECK(c.victim_input() == ImageShape{8, 8, 3});

  auto v = c;
  v.arch.kind = ArchKind::vit_lite;
  CHECK(v.victim_input() == ImageShape{224, 224, 3});
}

TEST_CASE("run naming and output root") {
  const auto c = parse_config(synthetic_json());
  const std::string n = run_name(c, "20260101T000000");
  CHECK(n.rfind("synthetic-cnn_small-20260101T000000-", 0) == 0);
  CHECK(n.size() == std::string("synthetic-cnn_small-20260101T000000-").size() + 6);
  auto d = c;
  d.seeds.victim = 2;
  CHECK(run_name(d, "t") != run_name(c, "t"));

  ::unsetenv("QOEBD_OUTPUT_ROOT");
  CHECK(output_root(c, "") == fs::path("runs"));
  ::setenv("QOEBD_OUTPUT_ROOT", "/tmp/elsewhere", 1);
  CHECK(output_root(c, "") == fs::path("/tmp/elsewhere"));
  CHECK(output_root(c, "flag") == fs::path("flag"));
  ::unsetenv("QOEBD_OUTPUT_ROOT");
}

TEST_CASE("run directory bookkeeping") {
  const fs::path root = scratch("runs");
  const auto c = parse_config(synthetic_json());
  auto a = RunDir::create(root, c);
  auto b = RunDir::create(root, c);
  CHECK(a.path() != b.path());  // same second, same seeds: still unique

  std::ifstream f(a.file("config.json"));
  std::stringstream ss;
  ss << f.rdbuf();
  CHECK(ss.str() == serialize_config(c));

  CHECK_FALSE(a.done("train-clean"));
  a.mark("train-clean", {{"cda", 0.5}});
  const auto reopened = RunDir::open(a.path());
  CHECK(reopened.done("train-clean"));
  CHECK(reopened.stages()["train-clean"]["cda"] == 0.5);
  CHECK(reopened.config() == c);
  CHECK_THROWS_AS(RunDir::open(root / "missing"), ConfigError);
  CHECK(parse_attack_variant("ablation") == AttackVariant::ablation);
  CHECK_THROWS_AS(parse_attack_variant("everything"), ConfigError);
}

TEST_CASE("defend needs a finished attack") {
  const fs::path root = scratch("defend");
  const auto c = parse_config(synthetic_json());
  auto run = RunDir::create(root, c);
  const auto data = load_experiment_data(c);
  std::ostringstream log;
  CHECK_THROWS_AS(run_defenses(run, data, {"strip"}, log), StageError);
  CHECK_THROWS_AS(run_defenses(run, data, {"fft"}, log), ConfigError);
}
