#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "qoebd/data.hpp"
#include "qoebd/tensor.hpp"

namespace qoebd {

enum class ArchKind { cnn_small, vit_lite, ran };

std::string to_string(ArchKind kind);
ArchKind parse_arch_kind(const std::string& s);

struct ArchDescriptor {
  ArchKind kind = ArchKind::cnn_small;

  // cnn_small: one conv3x3+ReLU+maxpool block per entry, then two FC layers.
  std::vector<int> conv_channels{16, 32, 64, 128};
  int fc_width = 256;

  // vit_lite
  int depth = 4;
  int heads = 4;
  int embed_dim = 128;
  int patch = 16;
  int mlp_dim = 256;

  // ran: stem, then one attention module per entry; the last entry is the
  // single-channel map module.
  int stem_channels = 16;
  std::vector<int> attention_channels{32, 64, 1};

  bool operator==(const ArchDescriptor&) const = default;
};

void to_json(nlohmann::json& j, const ArchDescriptor& a);
void from_json(const nlohmann::json& j, ArchDescriptor& a);

// Addressable unit: a probe layer name plus an index within it.
struct NeuronHandle {
  std::string layer;
  int unit = 0;
  bool operator==(const NeuronHandle&) const = default;
};

// Scales the gradient flowing through one unit during backpropagation.
struct NeuronBoost {
  NeuronHandle neuron;
  float factor = 1.0f;
};

// Intermediates recorded by forward() for a matching backward() call. Slot
// layout is private to each architecture.
struct Tape {
  std::vector<Tensor> t;
  std::vector<std::vector<int>> ints;
};

struct BackwardRequest {
  bool param_grads = false;
  bool input_grad = false;
  std::optional<NeuronBoost> boost;
  // Extra gradient injected at the distillation feature tap (same layout as
  // feature_tap()).
  const Tensor* feature_grad = nullptr;
};

struct LayerInfo {
  std::string name;
  int width = 0;
};

class Model {
 public:
  Model(ArchDescriptor arch, ImageShape input, int num_classes)
      : arch_(std::move(arch)), input_(input), num_classes_(num_classes) {}
  virtual ~Model() = default;

  virtual std::unique_ptr<Model> clone() const = 0;

  const ArchDescriptor& arch() const { return arch_; }
  ImageShape input_shape() const { return input_; }
  int num_classes() const { return num_classes_; }

  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }
  std::size_t param_count() const;
  std::vector<Tensor> zero_grads() const;

  // x is batch x H x W x C. Returns batch x num_classes logits. Passing a tape
  // records what backward() needs.
  virtual Tensor forward(const Tensor& x, Tape* tape = nullptr) const = 0;

  // Backpropagates dlogits through a recorded forward pass. Parameter
  // gradients are accumulated into *grads (same order as params()). Returns
  // dL/dx in NHWC when req.input_grad is set, otherwise an empty tensor.
  virtual Tensor backward(const Tape& tape, const Tensor& dlogits, const BackwardRequest& req,
                          std::vector<Tensor>* grads) const = 0;

  virtual std::vector<LayerInfo> probe_layers() const = 0;
  // Layer holding the key neuron for trigger generation.
  virtual std::string key_layer() const = 0;
  // Pre-activation values of a probe layer: batch x width. Throws ConfigError
  // for unknown layers.
  virtual Tensor probe(const Tape& tape, const std::string& layer) const = 0;

  // batch x channels x positions activations used for attention distillation.
  virtual Tensor feature_tap(const Tape& tape) const = 0;
  // Intermediate feature stacks (each batch x channels x positions).
  virtual std::vector<Tensor> perceptual_features(const Tape& tape) const = 0;

  // Units that the pruning defense may switch off, and their per-sample mean
  // activation (batch x units) from a recorded pass.
  virtual LayerInfo prunable_layer() const = 0;
  virtual Tensor prunable_activations(const Tape& tape) const = 0;
  void set_pruned(std::vector<std::uint8_t> mask) { pruned_ = std::move(mask); }
  const std::vector<std::uint8_t>& pruned() const { return pruned_; }

 protected:
  Tensor& add_param(std::string name, std::vector<int> shape);
  bool is_pruned(int unit) const {
    return !pruned_.empty() && pruned_[static_cast<std::size_t>(unit)] != 0;
  }

  ArchDescriptor arch_;
  ImageShape input_;
  int num_classes_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  std::vector<std::uint8_t> pruned_;
};

// Validates the descriptor against the input shape and initialises
// parameters from `seed` (same seed, same bits).
std::unique_ptr<Model> build_victim(const ArchDescriptor& arch, int num_classes, ImageShape input,
                                    std::uint64_t seed);

// Multi-head self-attention over one token sequence.
struct MhsaWeights {
  int heads = 1;
  Tensor qkv_w;  // d x 3d, columns [Q | K | V], head i owns columns i*d/h..(i+1)*d/h of each
  Tensor qkv_b;  // 3d
  Tensor out_w;  // d x d
  Tensor out_b;  // d
};

struct MhsaResult {
  Tensor output;     // tokens x d
  Tensor attention;  // heads x tokens x tokens, rows sum to one
};

MhsaResult mhsa_forward(const Tensor& tokens, const MhsaWeights& w);

// Argmax with ties resolved toward the lower index.
int argmax(std::span<const float> row);
std::vector<int> predict(const Model& model, const Tensor& batch);

// NHWC batch assembled from dataset samples at the model's input resolution
// (bilinear resize when the dataset resolution differs). The trigger, when
// given, is applied after resizing.
Tensor gather_batch(const ImageDataset& ds, std::span<const std::size_t> indices, ImageShape target,
                    const TriggerSpec* trigger = nullptr);

// Fraction of samples classified correctly.
double evaluate(const Model& model, const ImageDataset& ds, const TriggerSpec* trigger = nullptr);
std::vector<int> predict_dataset(const Model& model, const ImageDataset& ds,
                                 const TriggerSpec* trigger = nullptr);

// Pre-activations of `layer` for each sample of the batch. Pure read.
Tensor capture_activations(const Model& model, const std::string& layer, const Tensor& batch);

// Checkpoint: <stem>.bin (float32 parameters back to back) + <stem>.json.
void save_checkpoint(const std::filesystem::path& stem, const Model& model,
                     const nlohmann::json& extra = {});
std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& stem,
                                       nlohmann::json* manifest = nullptr);

}  // namespace qoebd
