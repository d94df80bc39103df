#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qoebd/data.hpp"
#include "qoebd/metrics.hpp"
#include "qoebd/model.hpp"

namespace qoebd {

struct QoEWeights {
  double lambda = 0.01;  // weight on ||x_t - x||_inf
  double eta = 0.1;      // weight on 1 - SSIM
  double theta = 3.0;    // key-neuron gradient factor

  void validate() const;
};

// Per-dataset theta defaults; unknown names fall back to the CIFAR-10 value.
double default_theta(const std::string& dataset);

// Picks the unit of `layer` that is positive on the most rows of `pre` (batch x
// units); ties go to the larger mean, then the lower index.
NeuronHandle select_neuron_from(const Tensor& pre, const std::string& layer);

// Key neuron over target-class samples. vit_lite always uses its head layer;
// other architectures use `layer` or, when empty, model.key_layer().
NeuronHandle select_neuron(const Model& model, const Tensor& target_batch, const std::string& layer = {});

struct QoELoss {
  double total = 0.0;
  double ce = 0.0;    // mean cross-entropy to the target
  double linf = 0.0;  // mean over samples of ||x_t - x||_inf
  double ssim = 0.0;  // mean SSIM(x, x_t)
  std::vector<float> grad;  // d total / d trigger.values
};

// L = CE(model(x_t), y_t) + lambda ||x_t - x||_inf + eta (1 - SSIM(x, x_t)),
// batch-averaged. `clean` is NHWC at the trigger resolution, which must be the
// model input. When `boost` is set the CE gradient through that neuron is
// scaled by weights.theta.
QoELoss qoe_loss(const Model& model, const TriggerSpec& trigger, const Tensor& clean, int target,
                 const QoEWeights& weights, const std::optional<NeuronHandle>& boost,
                 const SSIMParams& ssim_params = {}, bool want_grad = true);

// Masked values start at the per-pixel mean of (up to max_samples) target-class
// images, resized to `shape`.
TriggerSpec initialize_trigger(std::span<const PixelCoord> mask, ImageShape shape, const ImageDataset& ds,
                               int target, float transparency, std::size_t max_samples = 512);

struct TriggerOptConfig {
  int target = 0;
  int steps = 500;
  int batch = 64;
  double lr = 0.05;
  QoEWeights weights;
  bool boost = true;
  SSIMParams ssim;
  std::uint64_t seed = 0;
  // The best iterate is judged on a fixed probe batch every eval_every steps.
  int eval_every = 25;
  int probe_size = 128;
};

struct TriggerOptResult {
  TriggerSpec trigger;  // best iterate
  NeuronHandle neuron;
  std::vector<double> loss;  // minibatch loss per step
  std::vector<int> eval_steps;
  std::vector<double> probe_loss;
  std::vector<double> best_loss;  // best-so-far probe loss, non-increasing
  int best_step = 0;
  int nonfinite_steps = 0;
};

// Adam over the masked values with a [0,1] clamp after every step. Minibatches
// are drawn from pool samples not labelled `target`; the key neuron comes from
// the target-class samples. `init` supplies the starting iterate (its mask and
// transparency are kept).
TriggerOptResult optimize_trigger(const Model& model, const TriggerSpec& init, const ImageDataset& pool,
                                  const TriggerOptConfig& cfg);

void write_loss_history(const std::filesystem::path& file, const TriggerOptResult& r);

}  // namespace qoebd
