#include "qoebd/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "qoebd/error.hpp"
#include "qoebd/kernels.hpp"
#include "qoebd/metrics.hpp"
#include "qoebd/trigger.hpp"

namespace qoebd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string lower(std::string s) {
  for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

std::string upper_alnum(const std::string& s) {
  std::string out;
  for (char ch : s)
    out += std::isalnum(static_cast<unsigned char>(ch)) ? static_cast<char>(std::toupper(static_cast<unsigned char>(ch)))
                                                        : '_';
  return out;
}

std::string kind_name(SyntheticKind k) { return k == SyntheticKind::shapes ? "shapes" : "blobs"; }

SyntheticKind parse_kind(const std::string& s) {
  if (s == "shapes") return SyntheticKind::shapes;
  if (s == "blobs") return SyntheticKind::blobs;
  throw ConfigError("dataset.synthetic_kind: expected shapes or blobs, got '" + s + "'");
}

// ---------------------------------------------------------------------------
// schema check against the serialized defaults

void check_value(const json& v, const json& ref, const std::string& path);

void check_object(const json& user, const json& ref, const std::string& path) {
  if (!user.is_object()) throw ConfigError((path.empty() ? "config" : path) + ": expected an object");
  for (const auto& [k, v] : user.items()) {
    const std::string p = path.empty() ? k : path + "." + k;
    if (!ref.contains(k)) throw ConfigError("unknown field " + p);
    check_value(v, ref.at(k), p);
  }
}

void check_value(const json& v, const json& ref, const std::string& path) {
  if (ref.is_object()) return check_object(v, ref, path);
  if (ref.is_array()) {
    if (!v.is_array()) throw ConfigError(path + ": expected an array");
    if (!ref.empty())
      for (std::size_t i = 0; i < v.size(); ++i) check_value(v[i], ref[0], path + "[" + std::to_string(i) + "]");
    return;
  }
  if (ref.is_boolean()) {
    if (!v.is_boolean()) throw ConfigError(path + ": expected true or false");
  } else if (ref.is_string()) {
    if (!v.is_string()) throw ConfigError(path + ": expected a string");
  } else if (ref.is_number()) {
    if (!v.is_number()) throw ConfigError(path + ": expected a number");
    if (ref.is_number_integer() && !v.is_number_integer()) throw ConfigError(path + ": expected an integer");
    if (ref.is_number_unsigned() && v.is_number_integer() && v.get<std::int64_t>() < 0)
      throw ConfigError(path + ": must be non-negative");
  }
}

template <class F>
auto section(const std::string& path, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

json hyper_json(const TrainHyper& h) {
  json j = h;
  j.erase("seed");  // seeds live in the bundle
  return j;
}

json strip_json(const StripConfig& s) { return {{"copies", s.copies}, {"fpr", s.fpr}, {"bins", s.bins}}; }
json nc_json(const NcConfig& n) { return {{"steps", n.steps}, {"batch", n.batch}, {"lr", n.lr}, {"l1", n.l1}}; }

std::string compact_time() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%dT%H%M%S");
  return os.str();
}

std::string short_seed(const SeedBundle& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::uint64_t v : {s.data, s.victim, s.ran, s.attack, s.defense}) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 1099511628211ull;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(6) << std::setfill('0') << (h & 0xffffff);
  return os.str();
}

json read_json(const fs::path& file) {
  std::ifstream f(file);
  if (!f) throw DataError("cannot read " + file.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw DataError("malformed " + file.string() + ": " + e.what());
  }
}

// Stage wrapper: tags errors with the stage that raised them.
template <class F>
void stage(const std::string& name, F&& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    throw ConfigError("[" + name + "] " + e.what());
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

std::string fixed(double v, int p = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(p) << v;
  return os.str();
}

// metrics.json is rewritten as a whole; a record replaces any older one of the same name.
void put_metrics(const RunDir& run, const std::vector<MetricRecord>& fresh) {
  const fs::path jf = run.file("metrics.json");
  std::vector<MetricRecord> all = fs::exists(jf) ? read_metrics_json(jf) : std::vector<MetricRecord>{};
  for (const auto& r : fresh) {
    std::erase_if(all, [&](const MetricRecord& x) { return x.name == r.name; });
    all.push_back(r);
  }
  const fs::path jt = jf.string() + ".tmp";
  write_metrics_json(jt, all);
  fs::rename(jt, jf);
  const fs::path cf = run.file("metrics.csv");
  const fs::path ct = cf.string() + ".tmp";
  fs::remove(ct);
  for (const auto& r : all) append_metric_csv(ct, r);
  fs::rename(ct, cf);
}

MetricRecord metric(const RunDir& run, const std::string& name, double value, const std::string& model,
                    const std::string& trigger = "") {
  const auto& c = run.config();
  return make_metric(name, value, c.dataset.name, model, trigger);
}

std::string arch_name(const ExperimentConfig& c) { return to_string(c.arch.kind); }

std::unique_ptr<RanModel> load_ran(const RunDir& run) {
  auto m = load_checkpoint(run.file("checkpoints/ran"));
  auto* r = dynamic_cast<RanModel*>(m.get());
  if (!r) throw DataError("checkpoints/ran is not an attention network");
  m.release();
  std::unique_ptr<RanModel> out(r);
  out->mark_trained();
  return out;
}

std::string history_csv(const std::vector<EpochRecord>& h) {
  std::ostringstream os;
  os << "epoch,loss,accuracy\n" << std::setprecision(10);
  for (const auto& r : h) os << r.epoch << ',' << r.loss << ',' << r.accuracy << '\n';
  return os.str();
}

void ensure_ran(RunDir& run, const ExperimentData& data, std::ostream& log) {
  if (run.done("ran")) return;
  stage("ran", [&] {
    const auto& c = run.config();
    RanTraining rt;
    rt.arch = c.ran_arch;
    rt.hyper = c.ran_train;
    rt.hyper.seed = c.seeds.ran;
    log << "training attention network" << std::endl;
    std::vector<EpochRecord> hist;
    RanModel ran = train_ran(data.train, rt, [&](const EpochRecord& r) {
      hist.push_back(r);
      log << "  epoch " << r.epoch << " loss=" << fixed(r.loss) << " acc=" << fixed(r.accuracy) << std::endl;
    });
    save_checkpoint(run.file("checkpoints/ran"), ran, {{"role", "ran"}});
    write_text_atomic(run.file("plots/ran_loss.csv"), history_csv(hist));
    const double acc = evaluate(ran, data.test);
    put_metrics(run, {metric(run, "ran_accuracy", acc, "ran")});
    run.mark("ran", {{"accuracy", acc}});
  });
}

void train_stages(RunDir& run, const ExperimentData& data, bool need_ran, std::ostream& log) {
  const auto& c = run.config();
  kernels::set_deterministic(c.deterministic);
  if (!run.done("train-clean")) {
    stage("train-clean", [&] {
      auto m = build_victim(c.arch, c.dataset.num_classes, c.victim_input(), c.seeds.victim);
      TrainHyper h = c.victim;
      h.seed = c.seeds.victim;
      log << "training clean " << arch_name(c) << " on " << data.train.size() << " samples" << std::endl;
      const auto hist = train_clean(*m, data.train, h, [&](const EpochRecord& r) {
        log << "  epoch " << r.epoch << " loss=" << fixed(r.loss) << " acc=" << fixed(r.accuracy) << std::endl;
      });
      save_checkpoint(run.file("checkpoints/clean"), *m, {{"role", "clean"}});
      write_text_atomic(run.file("plots/clean_loss.csv"), history_csv(hist));
      const double acc = cda(*m, data.test);
      put_metrics(run, {metric(run, "clean_cda", acc, "clean")});
      run.mark("train-clean", {{"cda", acc}});
      log << "clean CDA=" << fixed(acc) << std::endl;
    });
  }
  if (need_ran) ensure_ran(run, data, log);
}

AttackConfig attack_config(const ExperimentConfig& c) {
  AttackConfig a = c.attack;
  a.seed = c.seeds.attack;
  return a;
}

std::vector<std::string> csv_lines(const fs::path& file) {
  std::vector<std::string> out;
  std::ifstream f(file);
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// config

ImageShape ExperimentConfig::victim_input() const {
  if (input.height > 0) return input;
  if (arch.kind == ArchKind::vit_lite) return {224, 224, dataset.shape.channels};
  return dataset.shape;
}

bool ExperimentConfig::operator==(const ExperimentConfig& o) const { return to_json(*this) == to_json(o); }

ExperimentConfig default_config(const std::string& dataset) {
  ExperimentConfig c;
  const std::string key = lower(dataset);
  c.dataset.name = dataset;
  c.victim.epochs = 20;
  c.victim.lr = 1e-3;
  c.ran_train.epochs = 10;
  c.ran_train.lr = 3e-3;
  if (key == "cifar100") {
    c.dataset.num_classes = 100;
  } else if (key == "gtsrb") {
    c.dataset.num_classes = 43;
    c.dataset.format = DatasetFormat::image_folder;
  } else if (key == "synthetic") {
    c.dataset.format = DatasetFormat::synthetic;
    c.dataset.train_count = 2000;
    c.dataset.val_count = 300;
    c.dataset.test_count = 500;
  }
  c.attack.qoe.theta = default_theta(key);
  return c;
}

nlohmann::json to_json(const ExperimentConfig& c) {
  json attack = c.attack;
  attack.erase("seed");
  json patch = json::array();
  for (const auto& [d, s] : c.defenses.patch) patch.push_back({d, s});
  return {
      {"dataset",
       {{"name", c.dataset.name},
        {"path", c.dataset.path},
        {"format", to_string(c.dataset.format)},
        {"num_classes", c.dataset.num_classes},
        {"height", c.dataset.shape.height},
        {"width", c.dataset.shape.width},
        {"channels", c.dataset.shape.channels},
        {"train_count", c.dataset.train_count},
        {"val_count", c.dataset.val_count},
        {"test_count", c.dataset.test_count},
        {"synthetic_kind", kind_name(c.dataset.kind)},
        {"noise", c.dataset.noise}}},
      {"victim",
       {{"arch", c.arch},
        {"input", {c.input.height, c.input.width, c.input.channels}},
        {"train", hyper_json(c.victim)}}},
      {"ran", {{"arch", c.ran_arch}, {"train", hyper_json(c.ran_train)}}},
      {"attack", attack},
      {"defenses",
       {{"run", c.defenses.run},
        {"samples", c.defenses.samples},
        {"strip", strip_json(c.defenses.strip)},
        {"prune", {{"floor", c.defenses.prune_floor}, {"step", c.defenses.prune_step}}},
        {"nc", nc_json(c.defenses.nc)},
        {"nad",
         {{"teacher", hyper_json(c.defenses.nad.teacher)},
          {"student", hyper_json(c.defenses.nad.student)},
          {"beta", c.defenses.nad.beta},
          {"fraction", c.defenses.nad_fraction}}},
        {"patch", patch}}},
      {"seeds",
       {{"data", c.seeds.data},
        {"victim", c.seeds.victim},
        {"ran", c.seeds.ran},
        {"attack", c.seeds.attack},
        {"defense", c.seeds.defense}}},
      {"out", c.out},
      {"deterministic", c.deterministic},
  };
}

ExperimentConfig parse_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected an object");
  std::string name = "cifar10";
  if (j.contains("dataset") && j.at("dataset").is_object() && j.at("dataset").contains("name")) {
    if (!j.at("dataset").at("name").is_string()) throw ConfigError("dataset.name: expected a string");
    name = j.at("dataset").at("name").get<std::string>();
  }
  if (name.empty()) throw ConfigError("dataset.name: must not be empty");
  const ExperimentConfig base = default_config(name);
  json m = to_json(base);
  check_object(j, m, "");
  m.merge_patch(j);

  ExperimentConfig c = base;
  const json& d = m.at("dataset");
  c.dataset.name = d.at("name").get<std::string>();
  c.dataset.path = d.at("path").get<std::string>();
  c.dataset.format = section("dataset.format", [&] { return parse_dataset_format(d.at("format").get<std::string>()); });
  c.dataset.num_classes = d.at("num_classes").get<int>();
  c.dataset.shape = {d.at("height").get<int>(), d.at("width").get<int>(), d.at("channels").get<int>()};
  c.dataset.train_count = d.at("train_count").get<std::size_t>();
  c.dataset.val_count = d.at("val_count").get<std::size_t>();
  c.dataset.test_count = d.at("test_count").get<std::size_t>();
  c.dataset.kind = parse_kind(d.at("synthetic_kind").get<std::string>());
  c.dataset.noise = d.at("noise").get<float>();

  const json& v = m.at("victim");
  c.arch = section("victim.arch", [&] { return v.at("arch").get<ArchDescriptor>(); });
  const json& in = v.at("input");
  if (in.size() != 3) throw ConfigError("victim.input: expected [height, width, channels]");
  c.input = {in[0].get<int>(), in[1].get<int>(), in[2].get<int>()};
  c.victim = section("victim.train", [&] { return v.at("train").get<TrainHyper>(); });
  c.ran_arch = section("ran.arch", [&] { return m.at("ran").at("arch").get<ArchDescriptor>(); });
  c.ran_train = section("ran.train", [&] { return m.at("ran").at("train").get<TrainHyper>(); });
  c.attack = section("attack", [&] { return m.at("attack").get<AttackConfig>(); });

  const json& df = m.at("defenses");
  c.defenses.run = df.at("run").get<std::vector<std::string>>();
  c.defenses.samples = df.at("samples").get<int>();
  const json& st = df.at("strip");
  c.defenses.strip.copies = st.at("copies").get<int>();
  c.defenses.strip.fpr = st.at("fpr").get<double>();
  c.defenses.strip.bins = st.at("bins").get<int>();
  c.defenses.prune_floor = df.at("prune").at("floor").get<double>();
  c.defenses.prune_step = df.at("prune").at("step").get<int>();
  const json& nc = df.at("nc");
  c.defenses.nc.steps = nc.at("steps").get<int>();
  c.defenses.nc.batch = nc.at("batch").get<int>();
  c.defenses.nc.lr = nc.at("lr").get<double>();
  c.defenses.nc.l1 = nc.at("l1").get<double>();
  const json& nad = df.at("nad");
  c.defenses.nad.teacher = section("defenses.nad.teacher", [&] { return nad.at("teacher").get<TrainHyper>(); });
  c.defenses.nad.student = section("defenses.nad.student", [&] { return nad.at("student").get<TrainHyper>(); });
  c.defenses.nad.beta = nad.at("beta").get<double>();
  c.defenses.nad_fraction = nad.at("fraction").get<double>();
  c.defenses.patch.clear();
  for (std::size_t i = 0; i < df.at("patch").size(); ++i) {
    const json& p = df.at("patch")[i];
    if (p.size() != 2) throw ConfigError("defenses.patch[" + std::to_string(i) + "]: expected [drop, shuffle]");
    c.defenses.patch.emplace_back(p[0].get<double>(), p[1].get<double>());
  }

  const json& s = m.at("seeds");
  c.seeds = {s.at("data").get<std::uint64_t>(), s.at("victim").get<std::uint64_t>(), s.at("ran").get<std::uint64_t>(),
             s.at("attack").get<std::uint64_t>(), s.at("defense").get<std::uint64_t>()};
  c.out = m.at("out").get<std::string>();
  c.deterministic = m.at("deterministic").get<bool>();
  validate_config(c);
  return c;
}

ExperimentConfig load_config(const fs::path& file) {
  std::ifstream f(file);
  if (!f) throw ConfigError("cannot read config " + file.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + file.string() + ": " + e.what());
  }
  return parse_config(j);
}

std::string serialize_config(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

void validate_config(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  if (d.num_classes < 2) throw ConfigError("dataset.num_classes: need at least 2");
  if (d.shape.height <= 0 || d.shape.width <= 0 || (d.shape.channels != 1 && d.shape.channels != 3))
    throw ConfigError("dataset.height/width/channels: need a positive size and 1 or 3 channels");
  if (d.val_count == 0) throw ConfigError("dataset.val_count: need a validation split");
  if (d.format == DatasetFormat::synthetic) {
    if (d.train_count == 0 || d.test_count == 0)
      throw ConfigError("dataset.train_count/test_count: synthetic data needs explicit counts");
    if (d.noise < 0.0f) throw ConfigError("dataset.noise: must be non-negative");
  }
  if (c.arch.kind == ArchKind::ran) throw ConfigError("victim.arch.kind: the victim cannot be the attention network");
  if (c.ran_arch.kind != ArchKind::ran) throw ConfigError("ran.arch.kind: must be ran");
  if (c.input.height != 0 || c.input.width != 0 || c.input.channels != 0) {
    if (c.input.height <= 0 || c.input.width <= 0 || c.input.channels != d.shape.channels)
      throw ConfigError("victim.input: need a positive size with the dataset's channel count");
  }
  section("victim.train", [&] { c.victim.validate(); return 0; });
  section("ran.train", [&] { c.ran_train.validate(); return 0; });
  section("attack", [&] { c.attack.validate(c.victim_input(), d.num_classes); return 0; });
  const auto known = known_defenses();
  for (std::size_t i = 0; i < c.defenses.run.size(); ++i) {
    const auto& n = c.defenses.run[i];
    const std::string p = "defenses.run[" + std::to_string(i) + "]";
    if (std::find(known.begin(), known.end(), n) == known.end()) throw ConfigError(p + ": unknown defense '" + n + "'");
    if (n == "patch" && c.arch.kind != ArchKind::vit_lite) throw ConfigError(p + ": patch processing needs a vit_lite victim");
  }
  const auto& df = c.defenses;
  if (df.samples < 2) throw ConfigError("defenses.samples: need at least 2");
  if (df.strip.copies < 1 || df.strip.bins < 1) throw ConfigError("defenses.strip: copies and bins must be positive");
  if (!(df.strip.fpr > 0.0 && df.strip.fpr < 1.0)) throw ConfigError("defenses.strip.fpr: must lie in (0, 1)");
  if (!(df.prune_floor >= 0.0 && df.prune_floor <= 1.0)) throw ConfigError("defenses.prune.floor: must lie in [0, 1]");
  if (df.prune_step < 1) throw ConfigError("defenses.prune.step: must be positive");
  if (df.nc.steps < 1 || df.nc.batch < 1 || !(df.nc.lr > 0.0) || df.nc.l1 < 0.0)
    throw ConfigError("defenses.nc: steps, batch and lr must be positive, l1 non-negative");
  section("defenses.nad.teacher", [&] { df.nad.teacher.validate(); return 0; });
  section("defenses.nad.student", [&] { df.nad.student.validate(); return 0; });
  if (!(df.nad_fraction > 0.0 && df.nad_fraction <= 1.0)) throw ConfigError("defenses.nad.fraction: must lie in (0, 1]");
  for (std::size_t i = 0; i < df.patch.size(); ++i) {
    const auto [a, b] = df.patch[i];
    if (a < 0.0 || a > 1.0 || b < 0.0 || b > 1.0)
      throw ConfigError("defenses.patch[" + std::to_string(i) + "]: fractions must lie in [0, 1]");
  }
  if (c.out.empty()) throw ConfigError("out: must not be empty");
}

std::vector<std::string> known_defenses() { return {"strip", "prune", "nc", "nad", "patch"}; }

// ---------------------------------------------------------------------------
// data

fs::path resolve_dataset_path(const DatasetConfig& d) {
  if (d.format == DatasetFormat::synthetic) return {};
  std::string p = d.path;
  const std::string var = "QOEBD_" + upper_alnum(d.name) + "_DIR";
  if (p.empty())
    if (const char* env = std::getenv(var.c_str()); env && *env) p = env;
  if (p.empty()) throw ConfigError("dataset.path: not set and " + var + " is empty");
  if (!fs::exists(p)) throw ConfigError("dataset.path: " + p + " does not exist");
  return p;
}

ExperimentData load_experiment_data(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  const std::uint64_t seed = c.seeds.data;
  ExperimentData out;
  ImageDataset held;
  if (d.format == DatasetFormat::synthetic) {
    // One draw, then split: blob prototypes depend on the seed.
    const std::size_t total = d.train_count + d.val_count + d.test_count;
    auto all = make_synthetic({total, d.shape, d.num_classes, seed, d.kind, d.noise});
    std::tie(out.train, held) = split_dataset(all, d.train_count, seed + 1);
    out.train.split = Split::train;
    held.split = Split::test;
  } else {
    const fs::path root = resolve_dataset_path(d);
    if (d.format == DatasetFormat::cifar_binary) {
      out.train = load_dataset(root, d.format, Split::train, d.num_classes);
      held = load_dataset(root, d.format, Split::test, d.num_classes);
    } else {
      for (const char* sub : {"train", "test"})
        if (!fs::is_directory(root / sub)) throw ConfigError("dataset.path: " + (root / sub).string() + " is missing");
      out.train = load_dataset(root / "train", d.format, Split::train, d.num_classes);
      held = load_dataset(root / "test", d.format, Split::test, d.num_classes);
    }
    if (out.train.shape != d.shape)
      throw ConfigError("dataset.height/width/channels: images are " + std::to_string(out.train.shape.height) + "x" +
                        std::to_string(out.train.shape.width) + "x" + std::to_string(out.train.shape.channels));
    if (d.train_count > 0 && d.train_count < out.train.size())
      out.train = sample_subset(out.train, d.train_count, seed + 2);
  }
  if (d.val_count >= held.size()) throw ConfigError("dataset.val_count: the held-out split has only " +
                                                    std::to_string(held.size()) + " samples");
  auto [val, test] = split_dataset(held, d.val_count, seed + 3);
  out.val = std::move(val);
  out.test = d.test_count > 0 && d.test_count < test.size() ? sample_subset(test, d.test_count, seed + 4) : std::move(test);
  return out;
}

// ---------------------------------------------------------------------------
// run directory

fs::path output_root(const ExperimentConfig& c, const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("QOEBD_OUTPUT_ROOT"); env && *env) return env;
  return c.out;
}

std::string run_name(const ExperimentConfig& c, const std::string& timestamp) {
  std::string ds;
  for (char ch : lower(c.dataset.name)) ds += std::isalnum(static_cast<unsigned char>(ch)) ? ch : '_';
  return ds + "-" + to_string(c.arch.kind) + "-" + timestamp + "-" + short_seed(c.seeds);
}

void write_text_atomic(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  const fs::path tmp = file.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw DataError("cannot write " + tmp.string());
    f << text;
    if (!f) throw DataError("short write to " + tmp.string());
  }
  fs::rename(tmp, file);
}

RunDir RunDir::create(const fs::path& root, const ExperimentConfig& c) {
  const std::string base = run_name(c, compact_time());
  fs::path dir = root / base;
  for (int i = 1; fs::exists(dir); ++i) dir = root / (base + "-" + std::to_string(i));
  fs::create_directories(dir);
  RunDir run(dir, c);
  write_text_atomic(run.file("config.json"), serialize_config(c));
  write_text_atomic(run.file("stages.json"), "{}\n");
  return run;
}

RunDir RunDir::open(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("run directory " + dir.string() + " does not exist");
  if (!fs::exists(dir / "config.json")) throw ConfigError("run directory " + dir.string() + " has no config.json");
  return RunDir(dir, load_config(dir / "config.json"));
}

nlohmann::json RunDir::stages() const {
  const fs::path f = file("stages.json");
  return fs::exists(f) ? read_json(f) : json::object();
}

bool RunDir::done(const std::string& stage) const { return stages().contains(stage); }

void RunDir::mark(const std::string& stage, const nlohmann::json& info) {
  json s = stages();
  json entry = info.is_null() ? json::object() : info;
  entry["completed"] = iso_timestamp();
  s[stage] = entry;
  write_text_atomic(file("stages.json"), s.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// stages

AttackVariant parse_attack_variant(const std::string& s) {
  if (s == "standard" || s == "default") return AttackVariant::standard;
  if (s == "ablation") return AttackVariant::ablation;
  throw ConfigError("--variant: expected standard or ablation, got '" + s + "'");
}

void run_train_clean(RunDir& run, const ExperimentData& data, std::ostream& log) {
  train_stages(run, data, run.config().attack.mask == MaskProvenance::attention, log);
}

AttackSummary run_attack(RunDir& run, const ExperimentData& data, AttackVariant variant, std::ostream& log) {
  const auto& c = run.config();
  const bool attn = c.attack.mask == MaskProvenance::attention;
  train_stages(run, data, attn || variant == AttackVariant::ablation, log);
  const AttackConfig cfg = attack_config(c);

  if (!run.done("attack")) {
    stage("attack", [&] {
      const auto clean = load_checkpoint(run.file("checkpoints/clean"));
      std::unique_ptr<RanModel> ran;
      if (attn) ran = load_ran(run);
      const Mask mask = build_attack_mask(ran.get(), data.train, clean->input_shape(), cfg);
      save_mask(run.file("mask.json"), mask);
      const fs::path trace_file = run.file("trace.jsonl");
      fs::remove(trace_file);
      CoOptTrace trace;
      log << "co-optimising (" << to_string(mask.provenance) << " mask, l=" << mask.side << ")" << std::endl;
      auto r = co_optimize(*clean, data.train, data.val, mask, cfg,
                           [&](const CoOptRecord& rec, const TriggerSpec&, const Model&) {
                             trace.append_jsonl(trace_file, rec);
                             log << "  k=" << rec.k << ' ' << to_string(rec.mode) << " asr=" << fixed(rec.asr)
                                 << " cda=" << fixed(rec.cda) << " loss=" << fixed(rec.loss) << std::endl;
                           });
      for (std::size_t i = 0; i < r.trigger_runs.size(); ++i)
        write_loss_history(run.file("plots/trigger_loss_k" + std::to_string(i + 1) + ".csv"), r.trigger_runs[i]);
      save_trigger(run.file("trigger"), r.trigger);
      save_checkpoint(run.file("checkpoints/backdoored"), *r.model, {{"role", "backdoored"}, {"best_k", r.best_k}});

      AttackSummary s;
      s.asr = asr(*r.model, data.test, r.trigger, cfg.target);
      s.cda = cda(*r.model, data.test);
      s.ssim = mean_trigger_ssim(data.test, r.trigger);
      s.baseline_cda = cda(*clean, data.test);
      s.best_k = r.best_k;
      s.below_cda_floor = r.below_cda_floor;
      const std::string tid = "trigger-" + std::to_string(r.best_k);
      put_metrics(run, {metric(run, "asr", s.asr, "backdoored", tid), metric(run, "cda", s.cda, "backdoored", tid),
                        metric(run, "ssim", s.ssim, "backdoored", tid),
                        metric(run, "baseline_cda", s.baseline_cda, "clean")});
      run.mark("attack", {{"asr", s.asr},
                          {"cda", s.cda},
                          {"ssim", s.ssim},
                          {"baseline_cda", s.baseline_cda},
                          {"best_k", s.best_k},
                          {"below_cda_floor", s.below_cda_floor},
                          {"mask", to_string(mask.provenance)}});
    });
  }

  if (variant == AttackVariant::ablation && !run.done("ablation")) {
    stage("ablation", [&] {
      const auto clean = load_checkpoint(run.file("checkpoints/clean"));
      const auto ran = load_ran(run);
      AttackConfig ac = cfg;
      ac.mask = MaskProvenance::attention;
      const Mask mask = build_attack_mask(ran.get(), data.train, clean->input_shape(), ac);
      log << "ablation over four variants" << std::endl;
      const std::vector<AblationVariant> all = {AblationVariant::base, AblationVariant::attn, AblationVariant::iter,
                                                AblationVariant::all};
      const auto rows = run_ablation(*clean, data.train, data.val, data.test, mask, cfg, all);
      const fs::path tmp = run.file("ablation.csv.tmp");
      write_ablation_csv(tmp, rows);
      fs::rename(tmp, run.file("ablation.csv"));
      json info = json::array();
      for (const auto& row : rows) {
        info.push_back({{"variant", to_string(row.variant)}, {"asr", row.asr}, {"cda", row.cda}, {"ssim", row.ssim}});
        log << "  " << to_string(row.variant) << " asr=" << fixed(row.asr) << " cda=" << fixed(row.cda)
            << " ssim=" << fixed(row.ssim) << std::endl;
      }
      run.mark("ablation", {{"rows", info}});
    });
  }

  const json a = run.stages().at("attack");
  AttackSummary s;
  s.asr = a.at("asr");
  s.cda = a.at("cda");
  s.ssim = a.at("ssim");
  s.baseline_cda = a.at("baseline_cda");
  s.best_k = a.at("best_k");
  s.below_cda_floor = a.at("below_cda_floor");
  return s;
}

void run_defenses(RunDir& run, const ExperimentData& data, const std::vector<std::string>& defenses,
                  std::ostream& log) {
  const auto& c = run.config();
  const auto known = known_defenses();
  for (const auto& n : defenses) {
    if (std::find(known.begin(), known.end(), n) == known.end()) throw ConfigError("--defenses: unknown defense '" + n + "'");
    if (n == "patch" && c.arch.kind != ArchKind::vit_lite)
      throw ConfigError("--defenses: patch processing needs a vit_lite victim");
  }
  if (!run.done("attack")) throw StageError("defend", "run " + run.path().string() + " has no completed attack stage");
  kernels::set_deterministic(c.deterministic);
  const auto model = load_checkpoint(run.file("checkpoints/backdoored"));
  const TriggerSpec trigger = load_trigger(run.file("trigger"));
  const int target = c.attack.target;
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(c.defenses.samples), data.test.size());
  const ImageDataset samples = sample_subset(data.test, n, c.seeds.defense);

  for (const auto& name : defenses) {
    const std::string tag = "defend:" + name;
    if (run.done(tag)) {
      log << name << ": already done" << std::endl;
      continue;
    }
    stage(tag, [&] {
      log << "running " << name << std::endl;
      DefenseReport rep;
      json info;
      if (name == "strip") {
        StripConfig s = c.defenses.strip;
        s.seed = c.seeds.defense;
        const auto r = strip_analyze(*model, samples, data.val, s, &trigger);
        rep = to_report(r);
        info = {{"detection_rate", r.detection_rate}, {"false_positive_rate", r.false_positive_rate}, {"ks", r.ks}};
      } else if (name == "prune") {
        const auto r = prune_sweep(*model, samples, trigger, target, c.defenses.prune_floor, c.defenses.prune_step);
        rep = to_report(r);
        info = {{"layer", r.layer}, {"monotone_violations", r.monotone_violations}};
        if (r.crossing) info["crossing"] = {{"pruned", r.crossing->pruned}, {"asr", r.crossing->asr}, {"cda", r.crossing->cda}};
      } else if (name == "nc") {
        NcConfig nc = c.defenses.nc;
        nc.seed = c.seeds.defense;
        const auto r = neural_cleanse(*model, data.val, nc);
        rep = to_report(r);
        info = {{"flagged", r.flagged}, {"target_anomaly", r.anomaly.at(static_cast<std::size_t>(target))}};
      } else if (name == "nad") {
        const auto k = std::max<std::size_t>(
            2, static_cast<std::size_t>(c.defenses.nad_fraction * static_cast<double>(data.train.size())));
        const ImageDataset clean_subset = sample_subset(data.train, std::min(k, data.train.size()), c.seeds.defense + 1);
        const auto r = nad_distill(*model, clean_subset, samples, trigger, target, c.defenses.nad);
        rep = to_report(r);
        info = {{"asr_after", r.asr_after}, {"cda_after", r.cda_after}};
      } else {
        const auto r = patch_process_defense(*model, samples, c.defenses.patch, &trigger, target, c.seeds.defense);
        rep = to_report(r);
      }
      const fs::path dir = run.file("defenses/" + name);
      fs::remove_all(dir);
      rep.write(dir);
      run.mark(tag, info);
    });
  }
}

// ---------------------------------------------------------------------------
// report

nlohmann::json build_report(const RunDir& run, const RunDir* compare) {
  const auto& c = run.config();
  json r;
  r["run"] = run.path().filename().string();
  r["dataset"] = c.dataset.name;
  r["arch"] = to_string(c.arch.kind);
  r["stages"] = run.stages();

  json metrics = json::object();
  if (fs::exists(run.file("metrics.json")))
    for (const auto& m : read_metrics_json(run.file("metrics.json"))) metrics[m.name] = m.value;
  r["metrics"] = metrics;

  json trace = json::array();
  if (fs::exists(run.file("trace.jsonl"))) {
    const auto t = CoOptTrace::read_jsonl(run.file("trace.jsonl"));
    std::ostringstream csv;
    csv << "k,mode,asr,cda,loss\n" << std::setprecision(10);
    for (const auto& rec : t.records) {
      trace.push_back({{"k", rec.k}, {"mode", to_string(rec.mode)}, {"asr", rec.asr}, {"cda", rec.cda}, {"loss", rec.loss}});
      csv << rec.k << ',' << to_string(rec.mode) << ',' << rec.asr << ',' << rec.cda << ',' << rec.loss << '\n';
    }
    write_text_atomic(run.file("plots/coopt_trace.csv"), csv.str());
  }
  r["trace"] = trace;

  json ablation = json::array();
  if (fs::exists(run.file("ablation.csv"))) {
    const auto lines = csv_lines(run.file("ablation.csv"));
    for (std::size_t i = 1; i < lines.size(); ++i) {
      std::istringstream ls(lines[i]);
      std::string v, a, cd, s;
      std::getline(ls, v, ',');
      std::getline(ls, a, ',');
      std::getline(ls, cd, ',');
      std::getline(ls, s, ',');
      ablation.push_back({{"variant", v}, {"asr", std::stod(a)}, {"cda", std::stod(cd)}, {"ssim", std::stod(s)}});
    }
  }
  r["ablation"] = ablation;

  json defenses = json::object();
  for (const auto& n : known_defenses()) {
    const fs::path f = run.file("defenses/" + n + "/" + n + ".json");
    if (fs::exists(f)) defenses[n] = read_json(f);
  }
  r["defenses"] = defenses;

  json plots = json::object();
  auto add_plot = [&](const std::string& key, const std::string& rel) {
    if (fs::exists(run.file(rel))) plots[key].push_back(rel);
  };
  add_plot("loss_curves", "plots/clean_loss.csv");
  add_plot("loss_curves", "plots/ran_loss.csv");
  for (int k = 1; fs::exists(run.file("plots/trigger_loss_k" + std::to_string(k) + ".csv")); ++k)
    add_plot("loss_curves", "plots/trigger_loss_k" + std::to_string(k) + ".csv");
  add_plot("coopt_trace", "plots/coopt_trace.csv");
  add_plot("entropy_histograms", "defenses/strip/strip_hist.csv");
  add_plot("entropy_histograms", "defenses/strip/strip_entropy.csv");
  add_plot("pruning_curves", "defenses/prune/prune_curve.csv");
  r["plots"] = plots;

  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(run.path())) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), run.path()).generic_string();
    if (rel == "report.json" || rel == "report.txt" || rel.ends_with(".tmp")) continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  r["artifacts"] = files;

  if (compare) {
    const json other = build_report(*compare, nullptr);
    json deltas = json::object();
    for (const auto& [k, v] : metrics.items()) {
      if (!other["metrics"].contains(k)) continue;
      const double a = v.get<double>(), b = other["metrics"][k].get<double>();
      deltas[k] = {{"this", a}, {"other", b}, {"delta", a - b}};
    }
    r["compare"] = {{"run", other["run"]}, {"metrics", deltas}};
  }
  return r;
}

void write_report(const RunDir& run, const RunDir* compare) {
  const json r = build_report(run, compare);
  std::ostringstream t;
  const auto& c = run.config();
  t << "run " << r["run"].get<std::string>() << "\n";
  t << "dataset " << c.dataset.name << " (" << c.dataset.num_classes << " classes), victim " << r["arch"].get<std::string>()
    << ", target " << c.attack.target << ", mask " << to_string(c.attack.mask) << "\n\n";
  if (!r["metrics"].empty()) {
    t << "metrics\n";
    for (const auto& [k, v] : r["metrics"].items()) t << "  " << std::left << std::setw(14) << k << fixed(v.get<double>()) << "\n";
    t << "\n";
  }
  if (!r["trace"].empty()) {
    t << "co-optimisation rounds\n";
    for (const auto& rec : r["trace"])
      t << "  k=" << rec["k"].get<int>() << " " << rec["mode"].get<std::string>() << " asr=" << fixed(rec["asr"].get<double>())
        << " cda=" << fixed(rec["cda"].get<double>()) << "\n";
    t << "\n";
  }
  if (!r["ablation"].empty()) {
    t << "ablation\n";
    for (const auto& row : r["ablation"])
      t << "  " << std::left << std::setw(12) << row["variant"].get<std::string>() << " asr=" << fixed(row["asr"].get<double>())
        << " cda=" << fixed(row["cda"].get<double>()) << " ssim=" << fixed(row["ssim"].get<double>()) << "\n";
    t << "\n";
  }
  if (!r["defenses"].empty()) {
    t << "defenses\n";
    const json st = r["stages"];
    for (const auto& [k, v] : r["defenses"].items()) {
      t << "  " << k;
      const std::string tag = "defend:" + k;
      if (st.contains(tag))
        for (const auto& [f, x] : st[tag].items())
          if (f != "completed") t << " " << f << "=" << x.dump();
      t << "\n";
    }
    t << "\n";
  }
  if (r.contains("compare")) {
    t << "compared with " << r["compare"]["run"].get<std::string>() << "\n";
    for (const auto& [k, d] : r["compare"]["metrics"].items())
      t << "  " << std::left << std::setw(14) << k << fixed(d["this"].get<double>()) << " vs " << fixed(d["other"].get<double>())
        << " (" << (d["delta"].get<double>() >= 0 ? "+" : "") << fixed(d["delta"].get<double>()) << ")\n";
    t << "\n";
  }
  t << "artifacts\n";
  for (const auto& f : r["artifacts"]) t << "  " << f.get<std::string>() << "\n";
  write_text_atomic(run.file("report.json"), r.dump(2) + "\n");
  write_text_atomic(run.file("report.txt"), t.str());
}

}  // namespace qoebd
