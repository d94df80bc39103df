#include "qoebd/trigger.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>

#include "qoebd/error.hpp"
#include "qoebd/train.hpp"

namespace qoebd {

void QoEWeights::validate() const {
  if (!(lambda >= 0.0) || !(eta >= 0.0)) throw ConfigError("qoe weights lambda and eta must be >= 0");
  if (!(theta >= 1.0)) throw ConfigError("gradient boost theta must be >= 1");
}

double default_theta(const std::string& dataset) {
  std::string s;
  for (char c : dataset)
    if (std::isalnum(static_cast<unsigned char>(c))) s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (s == "cifar100") return 4.0;
  if (s == "gtsrb") return 21.0;
  return 3.0;
}

NeuronHandle select_neuron_from(const Tensor& pre, const std::string& layer) {
  if (pre.rank() != 2 || pre.dim(0) == 0) throw DataError("neuron selection needs at least one sample");
  const int n = pre.dim(0), units = pre.dim(1);
  int best = 0;
  int best_count = -1;
  double best_mean = 0.0;
  for (int u = 0; u < units; ++u) {
    int count = 0;
    double sum = 0.0;
    for (int r = 0; r < n; ++r) {
      const float v = pre[static_cast<std::size_t>(r) * units + u];
      count += v > 0.0f;
      sum += v;
    }
    const double mean = sum / n;
    if (count > best_count || (count == best_count && mean > best_mean)) {
      best = u;
      best_count = count;
      best_mean = mean;
    }
  }
  return {layer, best};
}

NeuronHandle select_neuron(const Model& model, const Tensor& target_batch, const std::string& layer) {
  if (target_batch.empty()) throw DataError("neuron selection needs at least one target sample");
  std::string name = layer.empty() ? model.key_layer() : layer;
  if (model.arch().kind == ArchKind::vit_lite) name = "head";
  return select_neuron_from(capture_activations(model, name, target_batch), name);
}

QoELoss qoe_loss(const Model& model, const TriggerSpec& trigger, const Tensor& clean, int target,
                 const QoEWeights& weights, const std::optional<NeuronHandle>& boost,
                 const SSIMParams& ssim_params, bool want_grad) {
  weights.validate();
  const ImageShape s = trigger.shape;
  if (s != model.input_shape()) throw ConfigError("trigger resolution differs from the model input");
  if (clean.rank() != 4 || clean.dim(1) != s.height || clean.dim(2) != s.width || clean.dim(3) != s.channels)
    throw DataError("clean batch does not match the trigger shape");
  const int batch = clean.dim(0);
  if (batch == 0) throw DataError("qoe loss over an empty batch");
  const int ch = s.channels;
  const float t = trigger.transparency;

  Tensor xt = clean;
  for (int i = 0; i < batch; ++i) apply_trigger_inplace(xt.row(i), s, trigger);

  Tape tape;
  const Tensor logits = model.forward(xt, &tape);
  const std::vector<int> labels(static_cast<std::size_t>(batch), target);
  Tensor dlogits;
  QoELoss out;
  out.ce = softmax_cross_entropy(logits, labels, {}, want_grad ? &dlogits : nullptr, batch) / batch;

  // Infinity norm: the masked pixels are the only ones that move.
  std::vector<std::size_t> arg(static_cast<std::size_t>(batch), 0);
  std::vector<float> sign(static_cast<std::size_t>(batch), 0.0f);
  double linf = 0.0;
  for (int i = 0; i < batch; ++i) {
    const auto x = clean.row(i);
    const auto y = xt.row(i);
    float m = 0.0f;
    for (std::size_t k = 0; k < trigger.mask.size(); ++k) {
      const auto& p = trigger.mask[k];
      const std::size_t base = (static_cast<std::size_t>(p.row) * s.width + p.col) * ch;
      for (int c = 0; c < ch; ++c) {
        const float d = y[base + c] - x[base + c];
        if (std::abs(d) > m) {
          m = std::abs(d);
          arg[static_cast<std::size_t>(i)] = k * ch + c;
          sign[static_cast<std::size_t>(i)] = d > 0 ? 1.0f : -1.0f;
        }
      }
    }
    linf += m;
  }
  out.linf = linf / batch;

  std::vector<double> sv(static_cast<std::size_t>(batch));
  std::vector<std::vector<float>> sg(want_grad ? static_cast<std::size_t>(batch) : 0);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < batch; ++i)
    sv[static_cast<std::size_t>(i)] = ssim(clean.row(i), xt.row(i), s, ssim_params,
                                           want_grad ? &sg[static_cast<std::size_t>(i)] : nullptr);
  double ssum = 0.0;
  for (double v : sv) ssum += v;
  out.ssim = ssum / batch;
  out.total = out.ce + weights.lambda * out.linf + weights.eta * (1.0 - out.ssim);
  if (!std::isfinite(out.total)) throw DivergenceError("qoe loss is not finite", 0);
  if (!want_grad) return out;

  BackwardRequest req;
  req.input_grad = true;
  if (boost) req.boost = NeuronBoost{*boost, static_cast<float>(weights.theta)};
  Tensor dx = model.backward(tape, dlogits, req, nullptr);
  const float ssim_scale = static_cast<float>(-weights.eta / batch);
  for (int i = 0; i < batch; ++i) {
    auto row = dx.row(i);
    const auto& g = sg[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < row.size(); ++k) row[k] += ssim_scale * g[k];
  }

  // x_t = t x + (1 - t) v on the mask; the clamp is inactive for values in [0,1]
  // but is honoured anyway.
  out.grad.assign(trigger.values.size(), 0.0f);
  for (int i = 0; i < batch; ++i) {
    const auto x = clean.row(i);
    const auto g = dx.row(i);
    for (std::size_t k = 0; k < trigger.mask.size(); ++k) {
      const auto& p = trigger.mask[k];
      const std::size_t base = (static_cast<std::size_t>(p.row) * s.width + p.col) * ch;
      for (int c = 0; c < ch; ++c) {
        const float raw = t * x[base + c] + (1.0f - t) * trigger.values[k * ch + c];
        if (raw < 0.0f || raw > 1.0f) continue;
        out.grad[k * ch + c] += (1.0f - t) * g[base + c];
      }
    }
    const std::size_t a = arg[static_cast<std::size_t>(i)];
    if (sign[static_cast<std::size_t>(i)] != 0.0f)
      out.grad[a] += static_cast<float>(weights.lambda / batch) * (1.0f - t) * sign[static_cast<std::size_t>(i)];
  }
  return out;
}

TriggerSpec initialize_trigger(std::span<const PixelCoord> mask, ImageShape shape, const ImageDataset& ds,
                               int target, float transparency, std::size_t max_samples) {
  auto idx = indices_with_label(ds, target);
  if (idx.empty()) throw DataError("no samples of the target label to initialise the trigger");
  if (idx.size() > max_samples) idx.resize(max_samples);
  TriggerSpec tr;
  tr.shape = shape;
  tr.mask.assign(mask.begin(), mask.end());
  tr.transparency = transparency;
  tr.side_hint = static_cast<int>(std::lround(std::sqrt(static_cast<double>(mask.size()))));
  const int ch = shape.channels;
  std::vector<double> acc(mask.size() * ch, 0.0);
  for (std::size_t i : idx) {
    const auto img = ds.shape == shape ? std::vector<float>(ds.image(i).begin(), ds.image(i).end())
                                       : resize_bilinear(ds.image(i), ds.shape, shape.height, shape.width);
    for (std::size_t k = 0; k < mask.size(); ++k) {
      const std::size_t base = (static_cast<std::size_t>(mask[k].row) * shape.width + mask[k].col) * ch;
      for (int c = 0; c < ch; ++c) acc[k * ch + c] += img[base + c];
    }
  }
  tr.values.resize(acc.size());
  for (std::size_t k = 0; k < acc.size(); ++k) tr.values[k] = static_cast<float>(acc[k] / idx.size());
  tr.validate();
  return tr;
}

TriggerOptResult optimize_trigger(const Model& model, const TriggerSpec& init, const ImageDataset& pool,
                                  const TriggerOptConfig& cfg) {
  cfg.weights.validate();
  init.validate();
  if (cfg.steps < 0 || cfg.batch < 1 || !(cfg.lr > 0) || cfg.eval_every < 1 || cfg.probe_size < 1)
    throw ConfigError("invalid trigger optimisation settings");
  if (init.shape != model.input_shape()) throw ConfigError("trigger resolution differs from the model input");

  TriggerOptResult res;
  res.trigger = init;

  std::vector<std::size_t> others;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool.labels[i] != cfg.target) others.push_back(i);
  if (others.empty()) throw DataError("trigger pool has no non-target samples");

  std::optional<NeuronHandle> boost;
  auto targets = indices_with_label(pool, cfg.target);
  if (!targets.empty()) {
    if (targets.size() > 256) targets.resize(256);
    res.neuron = select_neuron(model, gather_batch(pool, targets, model.input_shape()));
    if (cfg.boost) boost = res.neuron;
  }
  if (cfg.steps == 0) return res;

  std::mt19937_64 rng(cfg.seed ^ 0x7f4a7c15u);
  std::vector<std::size_t> probe_idx = others;
  std::shuffle(probe_idx.begin(), probe_idx.end(), rng);
  probe_idx.resize(std::min<std::size_t>(probe_idx.size(), static_cast<std::size_t>(cfg.probe_size)));
  const Tensor probe = gather_batch(pool, probe_idx, model.input_shape());

  auto probe_loss = [&](const TriggerSpec& tr) {
    return qoe_loss(model, tr, probe, cfg.target, cfg.weights, std::nullopt, cfg.ssim, false).total;
  };
  double best = probe_loss(res.trigger);
  res.eval_steps.push_back(0);
  res.probe_loss.push_back(best);
  res.best_loss.push_back(best);

  TriggerSpec cur = init;
  Adam adam(cfg.lr);
  std::uniform_int_distribution<std::size_t> pick(0, others.size() - 1);
  std::vector<std::size_t> batch_idx(static_cast<std::size_t>(cfg.batch));
  for (int step = 1; step <= cfg.steps; ++step) {
    for (auto& b : batch_idx) b = others[pick(rng)];
    const Tensor x = gather_batch(pool, batch_idx, model.input_shape());
    QoELoss l;
    bool ok = true;
    try {
      l = qoe_loss(model, cur, x, cfg.target, cfg.weights, boost, cfg.ssim, true);
      for (float g : l.grad) ok = ok && std::isfinite(g);
    } catch (const DivergenceError&) {
      ok = false;
    }
    if (!ok) {
      ++res.nonfinite_steps;
      res.loss.push_back(std::nan(""));
    } else {
      res.loss.push_back(l.total);
      adam.step(cur.values, l.grad);
      for (auto& v : cur.values) v = std::clamp(v, 0.0f, 1.0f);
    }
    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      const double pl = probe_loss(cur);
      res.eval_steps.push_back(step);
      res.probe_loss.push_back(pl);
      if (std::isfinite(pl) && pl < best) {
        best = pl;
        res.trigger = cur;
        res.best_step = step;
      }
      res.best_loss.push_back(best);
    }
  }
  if (res.nonfinite_steps == cfg.steps) throw DivergenceError("every trigger step produced a non-finite loss", 0);
  return res;
}

void write_loss_history(const std::filesystem::path& file, const TriggerOptResult& r) {
  std::ofstream f(file);
  if (!f) throw DataError("cannot write " + file.string());
  f << "step,batch_loss,probe_loss,best_loss\n" << std::setprecision(8);
  std::size_t e = 0;
  for (std::size_t i = 0; i <= r.loss.size(); ++i) {
    const int step = static_cast<int>(i);
    f << step << ',';
    if (i > 0) f << r.loss[i - 1];
    f << ',';
    if (e < r.eval_steps.size() && r.eval_steps[e] == step) {
      f << r.probe_loss[e] << ',' << r.best_loss[e];
      ++e;
    } else {
      f << ',';
    }
    f << '\n';
  }
}

}  // namespace qoebd
