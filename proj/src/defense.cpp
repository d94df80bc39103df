#include "qoebd/defense.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "qoebd/architectures.hpp"
#include "qoebd/error.hpp"
#include "qoebd/metrics.hpp"

namespace qoebd {

void DefenseReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / (name + ".json"));
    if (!f) throw DataError("cannot write report " + name);
    f << body.dump(2) << '\n';
  }
  for (const auto& [file, contents] : tables) {
    std::ofstream f(dir / file);
    if (!f) throw DataError("cannot write " + file);
    f << contents;
  }
}

namespace {

double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::vector<double> histogram(std::span<const double> v, std::span<const double> edges) {
  const std::size_t bins = edges.size() - 1;
  std::vector<double> h(bins, 0.0);
  if (v.empty()) return h;
  const double lo = edges.front(), hi = edges.back();
  for (double x : v) {
    auto b = static_cast<std::ptrdiff_t>((x - lo) / (hi - lo) * static_cast<double>(bins));
    b = std::clamp<std::ptrdiff_t>(b, 0, static_cast<std::ptrdiff_t>(bins) - 1);
    h[static_cast<std::size_t>(b)] += 1.0;
  }
  for (double& x : h) x /= static_cast<double>(v.size());
  return h;
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace

double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw DataError("percentile of an empty set");
  std::sort(v.begin(), v.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double ks_statistic(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) return 0.0;
  std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < x.size() && j < y.size()) {
    const double v = std::min(x[i], y[j]);
    while (i < x.size() && x[i] <= v) ++i;
    while (j < y.size() && y[j] <= v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / x.size() - static_cast<double>(j) / y.size()));
  }
  return d;
}

std::vector<double> strip_entropies(const Model& model, const ImageDataset& samples, const ImageDataset& pool,
                                    int copies, const TriggerSpec* trigger, std::uint64_t seed) {
  if (copies < 1) throw ConfigError("strip needs at least one overlay copy");
  if (pool.size() < static_cast<std::size_t>(copies))
    throw ConfigError("strip overlay pool is smaller than the copy count");
  const ImageShape in = model.input_shape();
  const std::size_t px = in.size();
  const auto sidx = all_indices(samples.size());
  const Tensor xs = gather_batch(samples, sidx, in, trigger);
  const Tensor overlays = gather_batch(pool, all_indices(pool.size()), in);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> out(samples.size());
  const int c = model.num_classes();
  Tensor batch({copies, in.height, in.width, in.channels});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (int k = 0; k < copies; ++k) {
      std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(k), order.size() - 1);
      std::swap(order[static_cast<std::size_t>(k)], order[pick(rng)]);
    }
    const float* x = xs.data() + i * px;
    for (int k = 0; k < copies; ++k) {
      const float* o = overlays.data() + order[static_cast<std::size_t>(k)] * px;
      float* dst = batch.data() + static_cast<std::size_t>(k) * px;
      for (std::size_t q = 0; q < px; ++q) dst[q] = 0.5f * (x[q] + o[q]);
    }
    const Tensor p = softmax(model.forward(batch));
    double h = 0.0;
    for (int k = 0; k < copies; ++k)
      for (int j = 0; j < c; ++j) {
        const double v = p[static_cast<std::size_t>(k) * c + j];
        if (v > 0.0) h -= v * std::log2(v);
      }
    out[i] = std::clamp(h / copies, 0.0, std::log2(static_cast<double>(c)));
  }
  return out;
}

StripResult strip_analyze(const Model& model, const ImageDataset& samples, const ImageDataset& pool,
                          const StripConfig& cfg, const TriggerSpec* trigger) {
  if (samples.size() == 0) throw DataError("strip needs samples");
  if (cfg.bins < 1 || !(cfg.fpr >= 0.0 && cfg.fpr <= 1.0)) throw ConfigError("invalid strip settings");
  StripResult r;
  r.clean_entropy = strip_entropies(model, samples, pool, cfg.copies, nullptr, cfg.seed);
  if (trigger) r.triggered_entropy = strip_entropies(model, samples, pool, cfg.copies, trigger, cfg.seed + 1);
  r.threshold = percentile(r.clean_entropy, cfg.fpr);
  auto below = [&](const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    return static_cast<double>(std::count_if(v.begin(), v.end(), [&](double e) { return e < r.threshold; })) /
           static_cast<double>(v.size());
  };
  r.false_positive_rate = below(r.clean_entropy);
  r.detection_rate = below(r.triggered_entropy);
  r.ks = ks_statistic(r.clean_entropy, r.triggered_entropy);
  const double top = std::log2(static_cast<double>(model.num_classes()));
  for (int b = 0; b <= cfg.bins; ++b) r.edges.push_back(top * b / cfg.bins);
  r.clean_hist = histogram(r.clean_entropy, r.edges);
  r.triggered_hist = histogram(r.triggered_entropy, r.edges);
  if (!r.triggered_entropy.empty())
    for (int b = 0; b < cfg.bins; ++b)
      r.overlap += std::min(r.clean_hist[static_cast<std::size_t>(b)], r.triggered_hist[static_cast<std::size_t>(b)]);
  return r;
}

DefenseReport to_report(const StripResult& r) {
  DefenseReport rep;
  rep.name = "strip";
  rep.body = {{"threshold", r.threshold},
              {"detection_rate", r.detection_rate},
              {"false_positive_rate", r.false_positive_rate},
              {"ks", r.ks},
              {"overlap", r.overlap},
              {"clean_mean", mean_of(r.clean_entropy)},
              {"clean_std", stddev_of(r.clean_entropy)},
              {"triggered_mean", mean_of(r.triggered_entropy)},
              {"triggered_std", stddev_of(r.triggered_entropy)},
              {"edges", r.edges},
              {"clean_hist", r.clean_hist},
              {"triggered_hist", r.triggered_hist}};
  std::ostringstream e;
  e << "distribution,entropy\n";
  for (double v : r.clean_entropy) e << "clean," << v << '\n';
  for (double v : r.triggered_entropy) e << "triggered," << v << '\n';
  rep.tables.emplace_back("strip_entropy.csv", e.str());
  std::ostringstream h;
  h << "bin_lo,bin_hi,clean,triggered\n";
  for (std::size_t b = 0; b + 1 < r.edges.size(); ++b)
    h << r.edges[b] << ',' << r.edges[b + 1] << ',' << r.clean_hist[b] << ','
      << (r.triggered_hist.empty() ? 0.0 : r.triggered_hist[b]) << '\n';
  rep.tables.emplace_back("strip_hist.csv", h.str());
  return rep;
}

PruneReport prune_sweep(const Model& model, const ImageDataset& val, const TriggerSpec& trigger, int target,
                        double cda_floor, int step) {
  if (!(cda_floor > 0.0 && cda_floor < 1.0)) throw ConfigError("prune cda floor must lie in (0,1)");
  if (step < 1) throw ConfigError("prune step must be positive");
  const LayerInfo layer = model.prunable_layer();
  if (layer.width <= 0) throw ConfigError("model has no prunable layer");
  if (val.size() == 0) throw DataError("pruning needs validation samples");

  std::vector<double> mean(static_cast<std::size_t>(layer.width), 0.0);
  const auto idx = all_indices(val.size());
  for (std::size_t start = 0; start < idx.size(); start += 64) {
    const std::size_t n = std::min<std::size_t>(64, idx.size() - start);
    Tape tape;
    model.forward(gather_batch(val, std::span(idx).subspan(start, n), model.input_shape()), &tape);
    const Tensor act = model.prunable_activations(tape);
    for (std::size_t r = 0; r < n; ++r)
      for (int u = 0; u < layer.width; ++u) mean[static_cast<std::size_t>(u)] += act[r * layer.width + u];
  }
  PruneReport rep;
  rep.layer = layer.name;
  rep.floor = cda_floor;
  rep.order.resize(static_cast<std::size_t>(layer.width));
  std::iota(rep.order.begin(), rep.order.end(), 0);
  std::stable_sort(rep.order.begin(), rep.order.end(),
                   [&](int a, int b) { return mean[static_cast<std::size_t>(a)] < mean[static_cast<std::size_t>(b)]; });

  auto pruned = model.clone();
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(layer.width), 0);
  double lowest = 2.0;
  for (int k = 0;; k = std::min(layer.width, k + step)) {
    for (int j = 0; j < k; ++j) mask[static_cast<std::size_t>(rep.order[static_cast<std::size_t>(j)])] = 1;
    pruned->set_pruned(mask);
    PrunePoint p{k, static_cast<double>(k) / layer.width, asr(*pruned, val, trigger, target), cda(*pruned, val)};
    if (p.cda > lowest + 0.005) ++rep.monotone_violations;
    lowest = std::min(lowest, p.cda);
    rep.curve.push_back(p);
    if (p.cda < cda_floor) {
      rep.crossing = p;
      break;
    }
    if (k == layer.width) break;
  }
  return rep;
}

DefenseReport to_report(const PruneReport& r) {
  DefenseReport rep;
  rep.name = "prune";
  nlohmann::json curve = nlohmann::json::array();
  std::ostringstream c;
  c << "pruned,fraction,asr,cda\n";
  for (const auto& p : r.curve) {
    curve.push_back({{"pruned", p.pruned}, {"fraction", p.fraction}, {"asr", p.asr}, {"cda", p.cda}});
    c << p.pruned << ',' << p.fraction << ',' << p.asr << ',' << p.cda << '\n';
  }
  rep.body = {{"layer", r.layer}, {"floor", r.floor}, {"order", r.order}, {"curve", curve},
              {"monotone_violations", r.monotone_violations}};
  if (r.crossing)
    rep.body["crossing"] = {{"pruned", r.crossing->pruned}, {"fraction", r.crossing->fraction},
                            {"asr", r.crossing->asr}, {"cda", r.crossing->cda}};
  rep.tables.emplace_back("prune_curve.csv", c.str());
  return rep;
}

namespace {

float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace

ReversedTrigger reverse_trigger(const Model& model, int label, const ImageDataset& val, const NcConfig& cfg) {
  if (label < 0 || label >= model.num_classes()) throw ConfigError("reverse_trigger label out of range");
  if (cfg.steps < 0 || cfg.batch < 1 || !(cfg.lr > 0) || !(cfg.l1 >= 0)) throw ConfigError("invalid nc settings");
  if (val.size() == 0) throw DataError("reverse_trigger needs samples");
  const ImageShape in = model.input_shape();
  const std::size_t px = in.pixels();
  const int ch = in.channels;
  std::mt19937_64 rng(cfg.seed * 1315423911ULL + static_cast<std::uint64_t>(label));
  std::normal_distribution<float> noise(0.0f, 0.1f);
  std::vector<float> a(px), b(px * ch);
  for (auto& v : a) v = noise(rng);
  for (auto& v : b) v = noise(rng);
  Adam opt_a(cfg.lr), opt_b(cfg.lr);
  std::uniform_int_distribution<std::size_t> pick(0, val.size() - 1);
  std::vector<std::size_t> bidx(static_cast<std::size_t>(cfg.batch));
  std::vector<float> m(px), p(px * ch), ga(px), gb(px * ch);
  auto refresh = [&] {
    for (std::size_t i = 0; i < px; ++i) m[i] = sigmoidf(a[i]);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = sigmoidf(b[i]);
  };
  auto blend = [&](Tensor& x) {
    const int n = x.dim(0);
    for (int s = 0; s < n; ++s) {
      float* d = x.data() + static_cast<std::size_t>(s) * px * ch;
      for (std::size_t i = 0; i < px; ++i)
        for (int c = 0; c < ch; ++c) d[i * ch + c] = (1.0f - m[i]) * d[i * ch + c] + m[i] * p[i * ch + c];
    }
  };
  const std::vector<int> labels(bidx.size(), label);
  // The L1 weight adapts: raised while the reversed trigger keeps succeeding,
  // lowered while it keeps failing. The smallest successful mask is kept.
  constexpr int kPatience = 10;
  constexpr double kSuccess = 0.99, kUp = 1.5;
  double cost = cfg.l1;
  int up = 0, down = 0;
  double best_norm = std::numeric_limits<double>::infinity();
  std::vector<float> best_a, best_b;
  for (int step = 0; step < cfg.steps; ++step) {
    refresh();
    for (auto& v : bidx) v = val.size() == 1 ? 0 : pick(rng);
    const Tensor x = gather_batch(val, bidx, in);
    Tensor xb = x;
    blend(xb);
    Tape tape;
    const Tensor logits = model.forward(xb, &tape);
    Tensor dl;
    const double ce = softmax_cross_entropy(logits, labels, {}, &dl, cfg.batch);
    if (!std::isfinite(ce)) throw DivergenceError("non-finite loss while reversing label " + std::to_string(label), step);
    int hits = 0;
    for (int s = 0; s < cfg.batch; ++s) {
      const float* row = logits.data() + static_cast<std::size_t>(s) * logits.dim(1);
      hits += std::max_element(row, row + logits.dim(1)) - row == label;
    }
    const bool success = hits >= kSuccess * cfg.batch;
    if (success) {
      const double norm = std::accumulate(m.begin(), m.end(), 0.0);
      if (norm < best_norm) {
        best_norm = norm;
        best_a = a;
        best_b = b;
      }
    }
    if (cfg.l1 > 0) {
      up = success ? up + 1 : 0;
      down = success ? 0 : down + 1;
      if (up >= kPatience) {
        cost *= kUp;
        up = 0;
      } else if (down >= kPatience) {
        cost /= std::pow(kUp, 1.5);
        down = 0;
      }
    }
    BackwardRequest req;
    req.input_grad = true;
    const Tensor dx = model.backward(tape, dl, req, nullptr);
    std::fill(ga.begin(), ga.end(), 0.0f);
    std::fill(gb.begin(), gb.end(), 0.0f);
    for (int s = 0; s < cfg.batch; ++s) {
      const float* xs = x.data() + static_cast<std::size_t>(s) * px * ch;
      const float* g = dx.data() + static_cast<std::size_t>(s) * px * ch;
      for (std::size_t i = 0; i < px; ++i)
        for (int c = 0; c < ch; ++c) {
          ga[i] += g[i * ch + c] * (p[i * ch + c] - xs[i * ch + c]);
          gb[i * ch + c] += g[i * ch + c] * m[i];
        }
    }
    for (std::size_t i = 0; i < px; ++i) ga[i] = (ga[i] + static_cast<float>(cost)) * m[i] * (1.0f - m[i]);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= p[i] * (1.0f - p[i]);
    opt_a.step(a, ga);
    opt_b.step(b, gb);
  }
  if (!best_a.empty()) {
    a = std::move(best_a);
    b = std::move(best_b);
  }
  refresh();
  ReversedTrigger r;
  r.label = label;
  r.shape = in;
  r.mask = m;
  r.pattern = p;
  r.l1_norm = std::accumulate(m.begin(), m.end(), 0.0);
  if (!std::isfinite(r.l1_norm)) throw DivergenceError("non-finite reversed mask", cfg.steps);
  std::vector<std::size_t> eidx(std::min<std::size_t>(val.size(), 256));
  std::iota(eidx.begin(), eidx.end(), std::size_t{0});
  Tensor xe = gather_batch(val, eidx, in);
  blend(xe);
  const auto pred = predict(model, xe);
  r.attack_rate = static_cast<double>(std::count(pred.begin(), pred.end(), label)) / static_cast<double>(pred.size());
  return r;
}

std::vector<double> mad_anomaly(std::span<const double> norms) {
  if (norms.size() < 3) throw ConfigError("mad anomaly needs at least three labels");
  std::vector<double> v(norms.begin(), norms.end());
  const double med = percentile(v, 0.5);
  std::vector<double> dev;
  for (double n : norms) dev.push_back(std::abs(n - med));
  const double mad = percentile(dev, 0.5);
  std::vector<double> out(norms.size(), 0.0);
  if (mad == 0.0) return out;
  for (std::size_t i = 0; i < norms.size(); ++i) out[i] = std::abs(norms[i] - med) / (1.4826 * mad);
  return out;
}

std::vector<int> mad_flagged(std::span<const double> norms, double threshold) {
  const auto idx = mad_anomaly(norms);
  const double med = percentile(std::vector<double>(norms.begin(), norms.end()), 0.5);
  std::vector<int> out;
  for (std::size_t i = 0; i < norms.size(); ++i)
    if (idx[i] > threshold && norms[i] < med) out.push_back(static_cast<int>(i));
  return out;
}

NcReport neural_cleanse(const Model& model, const ImageDataset& val, const NcConfig& cfg) {
  NcReport r;
  for (int label = 0; label < model.num_classes(); ++label) {
    r.triggers.push_back(reverse_trigger(model, label, val, cfg));
    r.norms.push_back(r.triggers.back().l1_norm);
  }
  r.anomaly = mad_anomaly(r.norms);
  r.flagged = mad_flagged(r.norms);
  return r;
}

DefenseReport to_report(const NcReport& r) {
  DefenseReport rep;
  rep.name = "nc";
  std::ostringstream c;
  c << "label,l1_norm,anomaly_index,attack_rate\n";
  nlohmann::json labels = nlohmann::json::array();
  for (std::size_t i = 0; i < r.norms.size(); ++i) {
    c << i << ',' << r.norms[i] << ',' << r.anomaly[i] << ',' << r.triggers[i].attack_rate << '\n';
    labels.push_back({{"label", i}, {"l1_norm", r.norms[i]}, {"anomaly_index", r.anomaly[i]},
                      {"attack_rate", r.triggers[i].attack_rate}});
  }
  rep.body = {{"labels", labels}, {"flagged", r.flagged}, {"threshold", 2.0}};
  rep.tables.emplace_back("nc_norms.csv", c.str());
  return rep;
}

Tensor attention_maps_of(const Tensor& f) {
  if (f.rank() != 3) throw DataError("feature tap must be batch x channels x positions");
  const int b = f.dim(0), c = f.dim(1), p = f.dim(2);
  Tensor out({b, p});
  for (int s = 0; s < b; ++s) {
    float* o = out.data() + static_cast<std::size_t>(s) * p;
    const float* src = f.data() + static_cast<std::size_t>(s) * c * p;
    for (int k = 0; k < c; ++k)
      for (int q = 0; q < p; ++q) o[q] += src[static_cast<std::size_t>(k) * p + q] * src[static_cast<std::size_t>(k) * p + q];
    double n = 0.0;
    for (int q = 0; q < p; ++q) n += static_cast<double>(o[q]) * o[q];
    const float inv = static_cast<float>(1.0 / (std::sqrt(n) + 1e-12));
    for (int q = 0; q < p; ++q) o[q] *= inv;
  }
  return out;
}

double attention_alignment(const Tensor& student, const Tensor& teacher, double beta, Tensor* grad) {
  if (student.shape() != teacher.shape()) throw DataError("feature taps differ in shape");
  const int b = student.dim(0), c = student.dim(1), p = student.dim(2);
  const Tensor as = attention_maps_of(student), at = attention_maps_of(teacher);
  const double scale = beta / (static_cast<double>(b) * p);
  double loss = 0.0;
  for (std::size_t i = 0; i < as.size(); ++i) loss += (as[i] - at[i]) * static_cast<double>(as[i] - at[i]);
  if (grad) {
    *grad = Tensor(student.shape());
    for (int s = 0; s < b; ++s) {
      const float* f = student.data() + static_cast<std::size_t>(s) * c * p;
      std::vector<double> raw(static_cast<std::size_t>(p), 0.0);
      for (int k = 0; k < c; ++k)
        for (int q = 0; q < p; ++q) raw[static_cast<std::size_t>(q)] += static_cast<double>(f[static_cast<std::size_t>(k) * p + q]) * f[static_cast<std::size_t>(k) * p + q];
      double norm = 0.0;
      for (double v : raw) norm += v * v;
      norm = std::sqrt(norm) + 1e-12;
      // d/d(raw) of the normalised map: (u - a (a.u)) / |raw|.
      std::vector<double> u(static_cast<std::size_t>(p));
      double dot = 0.0;
      for (int q = 0; q < p; ++q) {
        const std::size_t i = static_cast<std::size_t>(s) * p + q;
        u[static_cast<std::size_t>(q)] = 2.0 * scale * (as[i] - at[i]);
        dot += u[static_cast<std::size_t>(q)] * as[i];
      }
      float* g = grad->data() + static_cast<std::size_t>(s) * c * p;
      for (int q = 0; q < p; ++q) {
        const double dr = (u[static_cast<std::size_t>(q)] - as[static_cast<std::size_t>(s) * p + q] * dot) / norm;
        for (int k = 0; k < c; ++k)
          g[static_cast<std::size_t>(k) * p + q] = static_cast<float>(dr * 2.0 * f[static_cast<std::size_t>(k) * p + q]);
      }
    }
  }
  return loss * scale;
}

NadResult nad_distill(const Model& backdoored, const ImageDataset& clean_subset, const ImageDataset& test,
                      const TriggerSpec& trigger, int target, const NadConfig& cfg) {
  if (clean_subset.size() == 0) throw DataError("nad needs a clean subset");
  cfg.teacher.validate();
  cfg.student.validate();
  NadResult r;
  r.asr_before = asr(backdoored, test, trigger, target);
  r.cda_before = cda(backdoored, test);

  auto teacher = backdoored.clone();
  train_clean(*teacher, clean_subset, cfg.teacher);
  auto student = backdoored.clone();

  auto opt = make_optimizer(cfg.student);
  std::vector<Tensor> grads = student->zero_grads();
  auto order = all_indices(clean_subset.size());
  BackwardRequest req;
  req.param_grads = true;
  const auto bs = static_cast<std::size_t>(cfg.student.batch_size);
  for (int epoch = 0; epoch < cfg.student.epochs; ++epoch) {
    std::mt19937_64 rng(cfg.student.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch) + 7);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const auto items = std::span(order).subspan(start, std::min(bs, order.size() - start));
      const Tensor x = gather_batch(clean_subset, items, student->input_shape());
      std::vector<int> labels;
      for (std::size_t i : items) labels.push_back(clean_subset.labels[i]);
      Tape ts, tt;
      const Tensor logits = student->forward(x, &ts);
      teacher->forward(x, &tt);
      Tensor dl, fg;
      const double ce = softmax_cross_entropy(logits, labels, {}, &dl, static_cast<double>(items.size()));
      const double at = attention_alignment(student->feature_tap(ts), teacher->feature_tap(tt), cfg.beta, &fg);
      if (!std::isfinite(ce) || !std::isfinite(at)) throw DivergenceError("non-finite nad loss", epoch);
      req.feature_grad = &fg;
      for (auto& g : grads) g.zero();
      student->backward(ts, dl, req, &grads);
      opt->step(student->params(), grads);
    }
  }
  r.asr_after = asr(*student, test, trigger, target);
  r.cda_after = cda(*student, test);
  r.model = std::move(student);
  return r;
}

DefenseReport to_report(const NadResult& r) {
  DefenseReport rep;
  rep.name = "nad";
  rep.body = {{"asr_before", r.asr_before}, {"cda_before", r.cda_before},
              {"asr_after", r.asr_after},   {"cda_after", r.cda_after}};
  std::ostringstream c;
  c << "stage,asr,cda\nbefore," << r.asr_before << ',' << r.cda_before << "\nafter," << r.asr_after << ','
    << r.cda_after << '\n';
  rep.tables.emplace_back("nad.csv", c.str());
  return rep;
}

std::vector<PatchSetting> patch_process_defense(const Model& model, const ImageDataset& test,
                                                std::span<const std::pair<double, double>> fractions,
                                                const TriggerSpec* trigger, int target, std::uint64_t seed) {
  const auto* vit = dynamic_cast<const VitLite*>(&model);
  if (!vit) throw ConfigError("patch processing applies to vit_lite models only");
  if (test.size() == 0) throw DataError("patch processing needs samples");
  const int n = vit->patch_count();
  const ImageShape in = model.input_shape();
  std::vector<PatchSetting> out;
  for (const auto& [drop, shuffle] : fractions) {
    if (!(drop >= 0 && drop <= 1 && shuffle >= 0 && shuffle <= 1)) throw ConfigError("patch fractions must lie in [0,1]");
    std::mt19937_64 rng(seed);
    std::size_t correct = 0, hits = 0, denom = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      std::vector<int> pos(static_cast<std::size_t>(n));
      std::iota(pos.begin(), pos.end(), 0);
      std::shuffle(pos.begin(), pos.end(), rng);
      const auto kept = static_cast<std::size_t>(n - std::lround(drop * n));
      pos.resize(kept);
      std::sort(pos.begin(), pos.end());
      PatchOps ops{pos, pos};
      const auto moved = static_cast<std::size_t>(std::lround(shuffle * static_cast<double>(kept)));
      std::vector<std::size_t> pick(kept);
      std::iota(pick.begin(), pick.end(), std::size_t{0});
      std::shuffle(pick.begin(), pick.end(), rng);
      pick.resize(moved);
      std::vector<int> src;
      for (std::size_t j : pick) src.push_back(ops.source[j]);
      std::shuffle(src.begin(), src.end(), rng);
      for (std::size_t j = 0; j < moved; ++j) ops.source[pick[j]] = src[j];

      const std::size_t one[] = {i};
      correct += argmax(vit->forward_patched(gather_batch(test, one, in), ops).row(0)) == test.labels[i];
      if (trigger && test.labels[i] != target) {
        ++denom;
        hits += argmax(vit->forward_patched(gather_batch(test, one, in, trigger), ops).row(0)) == target;
      }
    }
    PatchSetting s{drop, shuffle, static_cast<double>(correct) / test.size(),
                   denom ? static_cast<double>(hits) / denom : 0.0};
    out.push_back(s);
  }
  return out;
}

DefenseReport to_report(std::span<const PatchSetting> r) {
  DefenseReport rep;
  rep.name = "patch";
  nlohmann::json rows = nlohmann::json::array();
  std::ostringstream c;
  c << "drop,shuffle,cda,asr\n";
  for (const auto& s : r) {
    rows.push_back({{"drop", s.drop}, {"shuffle", s.shuffle}, {"cda", s.cda}, {"asr", s.asr}});
    c << s.drop << ',' << s.shuffle << ',' << s.cda << ',' << s.asr << '\n';
  }
  rep.body = {{"settings", rows}};
  rep.tables.emplace_back("patch.csv", c.str());
  return rep;
}

}  // namespace qoebd
