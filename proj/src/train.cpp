#include "qoebd/train.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "qoebd/error.hpp"

namespace qoebd {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + s + "'");
}

void TrainHyper::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
}

void to_json(nlohmann::json& j, const TrainHyper& h) {
  j = {{"epochs", h.epochs},       {"lr", h.lr},
       {"batch_size", h.batch_size}, {"seed", h.seed},
       {"optimizer", to_string(h.optimizer)}, {"weight_decay", h.weight_decay}};
}

void from_json(const nlohmann::json& j, TrainHyper& h) {
  h = TrainHyper{};
  if (j.contains("epochs")) j.at("epochs").get_to(h.epochs);
  if (j.contains("lr")) j.at("lr").get_to(h.lr);
  if (j.contains("batch_size")) j.at("batch_size").get_to(h.batch_size);
  if (j.contains("seed")) j.at("seed").get_to(h.seed);
  if (j.contains("optimizer")) h.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  if (j.contains("weight_decay")) j.at("weight_decay").get_to(h.weight_decay);
}

void Adam::step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.size(), 0.0f);
      v_.emplace_back(p.size(), 0.0f);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  const float step = static_cast<float>(lr_ * std::sqrt(c2) / c1);
  const float b1 = static_cast<float>(b1_), b2 = static_cast<float>(b2_);
  const float eps = static_cast<float>(eps_ * std::sqrt(c2));
  const float wd = static_cast<float>(wd_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    float* p = params[i].data();
    const float* g = grads[i].data();
    float* m = m_[i].data();
    float* v = v_[i].data();
    const std::size_t n = params[i].size();
    for (std::size_t k = 0; k < n; ++k) {
      const float gk = g[k] + wd * p[k];
      m[k] = b1 * m[k] + (1.0f - b1) * gk;
      v[k] = b2 * v[k] + (1.0f - b2) * gk * gk;
      p[k] -= step * m[k] / (std::sqrt(v[k]) + eps);
    }
  }
}

void Adam::step(std::span<float> x, std::span<const float> g) {
  if (m_.empty()) {
    m_.emplace_back(x.size(), 0.0f);
    v_.emplace_back(x.size(), 0.0f);
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  auto& m = m_[0];
  auto& v = v_[0];
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double gk = g[k] + wd_ * x[k];
    m[k] = static_cast<float>(b1_ * m[k] + (1.0 - b1_) * gk);
    v[k] = static_cast<float>(b2_ * v[k] + (1.0 - b2_) * gk * gk);
    x[k] -= static_cast<float>(lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_));
  }
}

void Sgd::step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  if (vel_.empty())
    for (const auto& p : params) vel_.emplace_back(p.size(), 0.0f);
  const float lr = static_cast<float>(lr_), mom = static_cast<float>(mom_), wd = static_cast<float>(wd_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    float* p = params[i].data();
    const float* g = grads[i].data();
    float* v = vel_[i].data();
    for (std::size_t k = 0; k < params[i].size(); ++k) {
      v[k] = mom * v[k] + g[k] + wd * p[k];
      p[k] -= lr * v[k];
    }
  }
}

std::unique_ptr<Optimizer> make_optimizer(const TrainHyper& h) {
  if (h.optimizer == OptimizerKind::sgd) return std::make_unique<Sgd>(h.lr, 0.9, h.weight_decay);
  return std::make_unique<Adam>(h.lr, 0.9, 0.999, 1e-8, h.weight_decay);
}

Tensor softmax(const Tensor& logits) {
  Tensor p = logits;
  const int n = logits.dim(1);
  for (int r = 0; r < logits.dim(0); ++r) {
    float* row = p.data() + static_cast<long>(r) * n;
    const float mx = *std::max_element(row, row + n);
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += std::exp(static_cast<double>(row[j] - mx));
    for (int j = 0; j < n; ++j) row[j] = static_cast<float>(std::exp(static_cast<double>(row[j] - mx)) / s);
  }
  return p;
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             std::span<const float> weights, Tensor* dlogits, double scale) {
  const int rows = logits.dim(0);
  const int n = logits.dim(1);
  if (labels.size() != static_cast<std::size_t>(rows)) throw DataError("label count does not match batch");
  if (dlogits) *dlogits = Tensor(logits.shape());
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    const float* row = logits.data() + static_cast<long>(r) * n;
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= n) throw DataError("label " + std::to_string(y) + " out of range at row " + std::to_string(r));
    const double w = weights.empty() ? 1.0 : weights[static_cast<std::size_t>(r)];
    const float mx = *std::max_element(row, row + n);
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += std::exp(static_cast<double>(row[j] - mx));
    const double lse = std::log(s) + mx;
    total += w * (lse - row[y]);
    if (dlogits) {
      float* d = dlogits->data() + static_cast<long>(r) * n;
      for (int j = 0; j < n; ++j) {
        const double pj = std::exp(static_cast<double>(row[j]) - lse);
        d[j] = static_cast<float>(w * (pj - (j == y ? 1.0 : 0.0)) / scale);
      }
    }
  }
  return total;
}

Tensor assemble_batch(std::span<const SampleSource> sources,
                      std::span<const std::pair<std::size_t, std::size_t>> items, ImageShape target,
                      std::vector<int>& labels, std::vector<float>& weights) {
  Tensor out({static_cast<int>(items.size()), target.height, target.width, target.channels});
  labels.resize(items.size());
  weights.resize(items.size());
  const std::size_t stride = target.size();
  for (std::size_t k = 0; k < items.size(); ++k) {
    const auto& src = sources[items[k].first];
    const std::size_t idx = items[k].second;
    const std::size_t one[] = {idx};
    const Tensor img = gather_batch(*src.data, one, target, src.trigger);
    std::copy_n(img.data(), stride, out.data() + k * stride);
    labels[k] = src.relabel ? *src.relabel : src.data->labels[idx];
    weights[k] = src.weight;
  }
  return out;
}

std::vector<EpochRecord> train_on(Model& model, std::span<const SampleSource> sources,
                                  const TrainHyper& hyper, const EpochCallback& on_epoch) {
  hyper.validate();
  std::vector<std::pair<std::size_t, std::size_t>> all;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    const auto& src = sources[s];
    if (!src.data) throw ConfigError("sample source without data");
    if (src.indices.empty()) {
      for (std::size_t i = 0; i < src.data->size(); ++i) all.emplace_back(s, i);
    } else {
      for (std::size_t i : src.indices) {
        if (i >= src.data->size()) throw DataError("sample index " + std::to_string(i) + " out of range");
        all.emplace_back(s, i);
      }
    }
  }
  std::vector<EpochRecord> history;
  if (hyper.epochs == 0 || all.empty()) return history;
  auto opt = make_optimizer(hyper);
  std::vector<Tensor> grads = model.zero_grads();
  std::vector<int> labels;
  std::vector<float> weights;
  BackwardRequest req;
  req.param_grads = true;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::mt19937_64 rng(hyper.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch) + 1);
    std::shuffle(all.begin(), all.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < all.size(); start += static_cast<std::size_t>(hyper.batch_size)) {
      const std::size_t end = std::min(all.size(), start + static_cast<std::size_t>(hyper.batch_size));
      std::span<const std::pair<std::size_t, std::size_t>> items(all.data() + start, end - start);
      const Tensor x = assemble_batch(sources, items, model.input_shape(), labels, weights);
      Tape tape;
      const Tensor logits = model.forward(x, &tape);
      Tensor dlogits;
      const double loss = softmax_cross_entropy(logits, labels, weights, &dlogits,
                                                static_cast<double>(items.size()));
      if (!std::isfinite(loss)) throw DivergenceError("non-finite training loss", epoch);
      loss_sum += loss;
      for (int r = 0; r < logits.dim(0); ++r) correct += argmax(logits.row(r)) == labels[static_cast<std::size_t>(r)];
      for (auto& g : grads) g.zero();
      model.backward(tape, dlogits, req, &grads);
      opt->step(model.params(), grads);
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(all.size()),
                    static_cast<double>(correct) / static_cast<double>(all.size())};
    for (const auto& p : model.params())
      for (float v : p.vec())
        if (!std::isfinite(v)) throw DivergenceError("non-finite parameter after update", epoch);
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return history;
}

std::vector<EpochRecord> train_clean(Model& model, const ImageDataset& train, const TrainHyper& hyper,
                                     const EpochCallback& on_epoch) {
  if (train.split != Split::train) throw ConfigError("train_clean needs a train split");
  const SampleSource src{&train, {}, nullptr, std::nullopt, 1.0f};
  return train_on(model, std::span<const SampleSource>(&src, 1), hyper, on_epoch);
}

}  // namespace qoebd
