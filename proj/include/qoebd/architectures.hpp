#pragma once

#include <cstdint>
#include <vector>

#include "qoebd/kernels.hpp"
#include "qoebd/model.hpp"

namespace qoebd {

// conv3x3 -> ReLU -> maxpool2 blocks followed by fc1 -> ReLU -> fc2.
class CnnSmall final : public Model {
 public:
  CnnSmall(const ArchDescriptor& arch, ImageShape input, int num_classes, std::uint64_t seed);

  std::unique_ptr<Model> clone() const override { return std::make_unique<CnnSmall>(*this); }
  Tensor forward(const Tensor& x, Tape* tape = nullptr) const override;
  Tensor backward(const Tape& tape, const Tensor& dlogits, const BackwardRequest& req,
                  std::vector<Tensor>* grads) const override;

  std::vector<LayerInfo> probe_layers() const override;
  std::string key_layer() const override { return "fc1"; }
  Tensor probe(const Tape& tape, const std::string& layer) const override;
  Tensor feature_tap(const Tape& tape) const override;
  std::vector<Tensor> perceptual_features(const Tape& tape) const override;
  LayerInfo prunable_layer() const override;
  Tensor prunable_activations(const Tape& tape) const override;

 private:
  int blocks() const { return static_cast<int>(arch_.conv_channels.size()); }
  kernels::ConvGeometry geometry(int block) const;
  int flat_width() const;
};

// Token-level edit applied before positional encoding: slot j of the patch
// sequence receives the embedding of patch source[j] and the positional
// embedding of patch position slot[j].
struct PatchOps {
  std::vector<int> source;
  std::vector<int> slot;
};

// Pre-norm transformer encoder over non-overlapping patches, class token,
// learned positional embeddings and a single linear head on the class token.
class VitLite final : public Model {
 public:
  VitLite(const ArchDescriptor& arch, ImageShape input, int num_classes, std::uint64_t seed);

  std::unique_ptr<Model> clone() const override { return std::make_unique<VitLite>(*this); }
  Tensor forward(const Tensor& x, Tape* tape = nullptr) const override;
  Tensor backward(const Tape& tape, const Tensor& dlogits, const BackwardRequest& req,
                  std::vector<Tensor>* grads) const override;

  // Forward pass with patch tokens dropped or reordered (no tape).
  Tensor forward_patched(const Tensor& x, const PatchOps& ops) const;

  int patch_count() const;
  std::vector<LayerInfo> probe_layers() const override;
  std::string key_layer() const override { return "head"; }
  Tensor probe(const Tape& tape, const std::string& layer) const override;
  Tensor feature_tap(const Tape& tape) const override;
  std::vector<Tensor> perceptual_features(const Tape& tape) const override;
  LayerInfo prunable_layer() const override;
  Tensor prunable_activations(const Tape& tape) const override;

  // Weights of encoder block `i` as a standalone attention layer.
  MhsaWeights attention_weights(int block) const;

 private:
  Tensor run(const Tensor& x, const PatchOps* ops, Tape* tape) const;
  int p(const std::string& name) const;
};

}  // namespace qoebd
