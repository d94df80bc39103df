#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qoebd/data.hpp"
#include "qoebd/model.hpp"

namespace qoebd {

enum class OptimizerKind { adam, sgd };

std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct TrainHyper {
  int epochs = 10;
  double lr = 1e-3;
  int batch_size = 64;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::adam;
  double weight_decay = 0.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainHyper& h);
void from_json(const nlohmann::json& j, TrainHyper& h);

// Parameter update rule. State is created lazily on the first step.
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) = 0;
};

class Adam final : public Optimizer {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                double weight_decay = 0.0)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}
  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) override;
  // Single flat vector variant used by the trigger optimizers.
  void step(std::span<float> x, std::span<const float> g);

 private:
  double lr_, b1_, b2_, eps_, wd_;
  long t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

class Sgd final : public Optimizer {
 public:
  explicit Sgd(double lr, double momentum = 0.9, double weight_decay = 0.0)
      : lr_(lr), mom_(momentum), wd_(weight_decay) {}
  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) override;

 private:
  double lr_, mom_, wd_;
  std::vector<std::vector<float>> vel_;
};

std::unique_ptr<Optimizer> make_optimizer(const TrainHyper& h);

// Softmax cross-entropy over a batch of logits. Returns sum_i w_i * CE_i and,
// when dlogits is given, writes d(sum_i w_i CE_i / scale)/dlogits.
double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             std::span<const float> weights, Tensor* dlogits, double scale = 1.0);

// Row-wise softmax probabilities.
Tensor softmax(const Tensor& logits);

// One group of training samples: a dataset, optionally a trigger applied on
// the fly and a label override, and a loss weight.
struct SampleSource {
  const ImageDataset* data = nullptr;
  std::vector<std::size_t> indices;  // empty = every sample
  const TriggerSpec* trigger = nullptr;
  std::optional<int> relabel;
  float weight = 1.0f;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // on the training stream itself
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Minibatch training over the union of sources. Batch order is drawn from
// hyper.seed (and the epoch index). Throws DivergenceError on a non-finite
// loss.
std::vector<EpochRecord> train_on(Model& model, std::span<const SampleSource> sources,
                                  const TrainHyper& hyper, const EpochCallback& on_epoch = {});

std::vector<EpochRecord> train_clean(Model& model, const ImageDataset& train, const TrainHyper& hyper,
                                     const EpochCallback& on_epoch = {});

// Builds an NHWC batch from (source, index) pairs; labels and weights are
// filled accordingly.
Tensor assemble_batch(std::span<const SampleSource> sources,
                      std::span<const std::pair<std::size_t, std::size_t>> items, ImageShape target,
                      std::vector<int>& labels, std::vector<float>& weights);

}  // namespace qoebd
