#include "qoebd/backdoor.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <random>

#include "qoebd/error.hpp"
#include "qoebd/train.hpp"

namespace qoebd {

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

bool in_unit(double v) { return v >= 0.0 && v <= 1.0; }

}  // namespace

void AttackConfig::validate(ImageShape shape, int num_classes) const {
  if (target < 0 || target >= num_classes) throw ConfigError("attack.target out of range");
  if (!in_unit(poison_ratio)) throw ConfigError("attack.poison_ratio must lie in [0,1]");
  if (!(transparency >= 0.0f && transparency < 1.0f)) throw ConfigError("attack.transparency must lie in [0,1)");
  if (side < 1 || static_cast<std::size_t>(side) * side > shape.pixels())
    throw ConfigError("attack.side squared exceeds the image pixel count");
  qoe.validate();
  if (!(omega >= 0.0)) throw ConfigError("attack.omega must be >= 0");
  if (!(trigger_lr > 0.0) || !(retrain_lr > 0.0)) throw ConfigError("attack learning rates must be positive");
  if (trigger_steps < 0 || trigger_batch < 1) throw ConfigError("attack.trigger_steps/trigger_batch invalid");
  if (retrain_epochs < 0 || retrain_batch < 1) throw ConfigError("attack.retrain_epochs/retrain_batch invalid");
  if (!(retrain_fraction > 0.0 && retrain_fraction <= 1.0)) throw ConfigError("attack.retrain_fraction must lie in (0,1]");
  if (max_iters < 1) throw ConfigError("attack.max_iters must be >= 1");
  if (!(epsilon >= 0.0) || !(cda_floor >= 0.0)) throw ConfigError("attack.epsilon/cda_floor must be >= 0");
  if (maps < 1) throw ConfigError("attack.maps must be >= 1");
}

void to_json(nlohmann::json& j, const AttackConfig& c) {
  j = {{"target", c.target},
       {"poison_ratio", c.poison_ratio},
       {"side", c.side},
       {"transparency", c.transparency},
       {"lambda", c.qoe.lambda},
       {"eta", c.qoe.eta},
       {"theta", c.qoe.theta},
       {"omega", c.omega},
       {"trigger_lr", c.trigger_lr},
       {"trigger_steps", c.trigger_steps},
       {"trigger_batch", c.trigger_batch},
       {"boost", c.boost},
       {"retrain_lr", c.retrain_lr},
       {"retrain_epochs", c.retrain_epochs},
       {"retrain_batch", c.retrain_batch},
       {"retrain_optimizer", to_string(c.retrain_optimizer)},
       {"retrain_fraction", c.retrain_fraction},
       {"max_iters", c.max_iters},
       {"epsilon", c.epsilon},
       {"cda_floor", c.cda_floor},
       {"alternating", c.alternating},
       {"maps", c.maps},
       {"mask", to_string(c.mask)},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, AttackConfig& c) {
  AttackConfig d;
  c.target = j.value("target", d.target);
  c.poison_ratio = j.value("poison_ratio", d.poison_ratio);
  c.side = j.value("side", d.side);
  c.transparency = j.value("transparency", d.transparency);
  c.qoe.lambda = j.value("lambda", d.qoe.lambda);
  c.qoe.eta = j.value("eta", d.qoe.eta);
  c.qoe.theta = j.value("theta", d.qoe.theta);
  c.omega = j.value("omega", d.omega);
  c.trigger_lr = j.value("trigger_lr", d.trigger_lr);
  c.trigger_steps = j.value("trigger_steps", d.trigger_steps);
  c.trigger_batch = j.value("trigger_batch", d.trigger_batch);
  c.boost = j.value("boost", d.boost);
  c.retrain_lr = j.value("retrain_lr", d.retrain_lr);
  c.retrain_epochs = j.value("retrain_epochs", d.retrain_epochs);
  c.retrain_batch = j.value("retrain_batch", d.retrain_batch);
  c.retrain_optimizer = parse_optimizer(j.value("retrain_optimizer", to_string(d.retrain_optimizer)));
  c.retrain_fraction = j.value("retrain_fraction", d.retrain_fraction);
  c.max_iters = j.value("max_iters", d.max_iters);
  c.epsilon = j.value("epsilon", d.epsilon);
  c.cda_floor = j.value("cda_floor", d.cda_floor);
  c.alternating = j.value("alternating", d.alternating);
  c.maps = j.value("maps", d.maps);
  c.mask = parse_mask_provenance(j.value("mask", to_string(d.mask)));
  c.seed = j.value("seed", d.seed);
}

std::string to_string(RetrainMode m) { return m == RetrainMode::mixed ? "mixed" : "clean"; }

RetrainMode retrain_mode(int k) { return k % 2 == 0 ? RetrainMode::mixed : RetrainMode::clean; }

RoundStats retrain_round(Model& model, const ImageDataset& train, const TriggerSpec& trigger, int k,
                         RetrainMode mode, const AttackConfig& cfg) {
  if (k < 1) throw ConfigError("retrain round index must be >= 1");
  if (train.size() == 0) throw DataError("retraining on an empty set");
  const std::uint64_t round_seed = mix(cfg.seed, static_cast<std::uint64_t>(k));
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(round_seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.retrain_fraction * train.size())));
  order.resize(std::min(n, order.size()));
  std::sort(order.begin(), order.end());

  std::vector<SampleSource> sources;
  SampleSource clean{&train, order, nullptr, std::nullopt, static_cast<float>(mode == RetrainMode::mixed ? cfg.omega : 1.0)};
  sources.push_back(clean);
  RoundStats st;
  st.mode = mode;
  st.clean_samples = order.size();
  if (mode == RetrainMode::mixed) {
    const PoisonPlan plan = make_poison_plan(order.size(), cfg.poison_ratio, cfg.target, train.num_classes,
                                             mix(round_seed, 1));
    if (!plan.poisoned_indices.empty()) {
      SampleSource poisoned{&train, {}, &trigger, cfg.target, 1.0f};
      for (std::size_t p : plan.poisoned_indices) poisoned.indices.push_back(order[p]);
      st.poisoned_samples = poisoned.indices.size();
      sources.push_back(std::move(poisoned));
    }
  }
  TrainHyper h;
  h.epochs = cfg.retrain_epochs;
  h.lr = cfg.retrain_lr;
  h.batch_size = cfg.retrain_batch;
  h.optimizer = cfg.retrain_optimizer;
  h.seed = mix(round_seed, 2);
  const auto hist = train_on(model, sources, h);
  if (!hist.empty()) st.loss = hist.back().loss;
  return st;
}

RoundStats alternating_retrain_round(Model& model, const ImageDataset& train, const TriggerSpec& trigger,
                                     int k, const AttackConfig& cfg) {
  return retrain_round(model, train, trigger, k, retrain_mode(k), cfg);
}

void CoOptTrace::append_jsonl(const std::filesystem::path& file, const CoOptRecord& r) const {
  std::ofstream f(file, std::ios::app);
  if (!f) throw DataError("cannot append to " + file.string());
  const nlohmann::json j = {{"k", r.k},          {"asr", r.asr},
                            {"cda", r.cda},      {"loss", r.loss},
                            {"trigger_id", r.trigger_id}, {"mode", to_string(r.mode)}};
  f << j.dump() << '\n';
}

void CoOptTrace::write_jsonl(const std::filesystem::path& file) const {
  std::ofstream(file, std::ios::trunc);
  for (const auto& r : records) append_jsonl(file, r);
}

CoOptTrace CoOptTrace::read_jsonl(const std::filesystem::path& file) {
  std::ifstream f(file);
  if (!f) throw DataError("missing trace file " + file.string());
  CoOptTrace t;
  std::string line;
  try {
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      t.records.push_back({j.at("k"), j.at("asr"), j.at("cda"), j.at("loss"), j.at("trigger_id"),
                           j.at("mode") == "mixed" ? RetrainMode::mixed : RetrainMode::clean});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed trace file " + file.string() + ": " + e.what());
  }
  return t;
}

CoOptResult co_optimize(const Model& clean, const ImageDataset& train, const ImageDataset& val, const Mask& mask,
                        const AttackConfig& cfg, const CoOptHook& hook) {
  const ImageShape in = clean.input_shape();
  cfg.validate(in, clean.num_classes());
  mask.validate();
  if (mask.height != in.height || mask.width != in.width || mask.side != cfg.side)
    throw ConfigError("mask geometry does not match the victim input and trigger side");

  CoOptResult res;
  res.baseline_cda = cda(clean, val);
  const double floor = res.baseline_cda - cfg.cda_floor / 100.0;
  const double eps = cfg.epsilon / 100.0;

  std::unique_ptr<Model> model = clean.clone();
  TriggerSpec trigger = initialize_trigger(mask.coords, in, train, cfg.target, cfg.transparency);

  TriggerOptConfig tcfg;
  tcfg.target = cfg.target;
  tcfg.steps = cfg.trigger_steps;
  tcfg.batch = cfg.trigger_batch;
  tcfg.lr = cfg.trigger_lr;
  tcfg.weights = cfg.qoe;
  tcfg.boost = cfg.boost;

  double best_asr = -1.0, best_any = -1.0;
  std::unique_ptr<Model> best_any_model;
  TriggerSpec best_any_trigger;
  int best_any_k = 0;
  int plateau = 0;
  for (int k = 1; k <= cfg.max_iters; ++k) {
    tcfg.seed = mix(cfg.seed, 100 + static_cast<std::uint64_t>(k));
    TriggerOptResult tr = optimize_trigger(*model, trigger, train, tcfg);
    trigger = tr.trigger;
    // Round 1 must inject, so the parity index runs one ahead of k.
    const RetrainMode mode = cfg.alternating ? retrain_mode(k + 1) : RetrainMode::mixed;
    retrain_round(*model, train, trigger, k, mode, cfg);

    CoOptRecord rec;
    rec.k = k;
    rec.asr = asr(*model, val, trigger, cfg.target);
    rec.cda = cda(*model, val);
    rec.loss = tr.best_loss.empty() ? 0.0 : tr.best_loss.back();
    rec.trigger_id = "trigger-" + std::to_string(k);
    rec.mode = mode;
    res.trace.records.push_back(rec);
    res.trigger_runs.push_back(std::move(tr));
    if (hook) hook(rec, trigger, *model);

    if (rec.cda >= floor && rec.asr > best_asr) {
      best_asr = rec.asr;
      res.model = model->clone();
      res.trigger = trigger;
      res.best_k = k;
    }
    if (rec.asr > best_any) {
      best_any = rec.asr;
      best_any_model = model->clone();
      best_any_trigger = trigger;
      best_any_k = k;
    }
    if (k > 1) {
      const auto& prev = res.trace.records[res.trace.records.size() - 2];
      plateau = (std::abs(rec.asr - prev.asr) < eps && std::abs(rec.cda - prev.cda) < eps) ? plateau + 1 : 0;
      if (plateau >= 2) break;
    }
  }
  if (!res.model) {
    res.below_cda_floor = true;
    res.model = std::move(best_any_model);
    res.trigger = best_any_trigger;
    res.best_k = best_any_k;
    std::cerr << "warning: no co-optimisation iterate kept CDA within " << cfg.cda_floor
              << " points of the clean baseline; returning the best-ASR iterate\n";
  }
  return res;
}

Mask build_attack_mask(const RanModel* ran, const ImageDataset& train, ImageShape victim_input,
                       const AttackConfig& cfg) {
  switch (cfg.mask) {
    case MaskProvenance::corner: return baseline_mask(victim_input, cfg.side, BaselineMaskKind::corner);
    case MaskProvenance::random:
      return baseline_mask(victim_input, cfg.side, BaselineMaskKind::random, mix(cfg.seed, 7));
    case MaskProvenance::attention: break;
  }
  if (!ran) throw ConfigError("attention mask requested without an attention network");
  auto idx = indices_with_label(train, cfg.target);
  if (idx.empty()) throw DataError("no target-class samples for attention maps");
  std::mt19937_64 rng(mix(cfg.seed, 8));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(idx.size(), static_cast<std::size_t>(cfg.maps)));
  const auto maps = attention_maps(*ran, train, idx);
  const AttentionMap& rep = select_representative_map(maps);
  return mask_from_map(resize_map(rep, victim_input.height, victim_input.width), cfg.side);
}

std::string to_string(AblationVariant v) {
  switch (v) {
    case AblationVariant::base: return "base";
    case AblationVariant::attn: return "base+attn";
    case AblationVariant::iter: return "base+attn+iter";
    case AblationVariant::all: return "all";
  }
  return "?";
}

AblationVariant parse_ablation_variant(const std::string& s) {
  if (s == "base") return AblationVariant::base;
  if (s == "base+attn" || s == "attn") return AblationVariant::attn;
  if (s == "base+attn+iter" || s == "iter") return AblationVariant::iter;
  if (s == "all") return AblationVariant::all;
  throw ConfigError("unknown ablation variant '" + s + "'");
}

std::vector<AblationRow> run_ablation(const Model& clean, const ImageDataset& train, const ImageDataset& val,
                                      const ImageDataset& test, const Mask& attention_mask,
                                      const AttackConfig& cfg, std::span<const AblationVariant> variants) {
  if (variants.empty()) throw ConfigError("ablation needs at least one variant");
  std::vector<AblationRow> rows;
  for (AblationVariant v : variants) {
    AttackConfig c = cfg;
    Mask mask = attention_mask;
    if (v == AblationVariant::base) {
      c.mask = MaskProvenance::corner;
      mask = baseline_mask(clean.input_shape(), cfg.side, BaselineMaskKind::corner);
    }
    if (v == AblationVariant::base || v == AblationVariant::attn) c.max_iters = 1;
    c.alternating = v == AblationVariant::all;
    const CoOptResult r = co_optimize(clean, train, val, mask, c);
    AblationRow row;
    row.variant = v;
    row.asr = asr(*r.model, test, r.trigger, cfg.target);
    row.cda = cda(*r.model, test);
    row.ssim = mean_trigger_ssim(test, r.trigger, 500);
    rows.push_back(row);
  }
  return rows;
}

void write_ablation_csv(const std::filesystem::path& file, std::span<const AblationRow> rows) {
  std::ofstream f(file);
  if (!f) throw DataError("cannot write " + file.string());
  f << "variant,asr,cda,ssim\n";
  for (const auto& r : rows) f << to_string(r.variant) << ',' << r.asr << ',' << r.cda << ',' << r.ssim << '\n';
}

}  // namespace qoebd
