#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qoebd/data.hpp"
#include "qoebd/kernels.hpp"
#include "qoebd/model.hpp"
#include "qoebd/train.hpp"

namespace qoebd {

// H = (1 + S) * T, elementwise.
void combine_attention(std::span<const float> s, std::span<const float> t, std::span<float> h);

// Residual attention classifier. A stem conv+pool feeds one attention module
// per entry of arch.attention_channels; every module multiplies its trunk by
// (1 + a sigmoid soft mask computed at half resolution). The last module has a
// single channel and is the attention map; the head pools the previous
// module's features weighted by that map. All convolutions replicate-pad, so
// the stack is translation invariant on constant inputs.
class RanModel final : public Model {
 public:
  RanModel(const ArchDescriptor& arch, ImageShape input, int num_classes, std::uint64_t seed);

  std::unique_ptr<Model> clone() const override { return std::make_unique<RanModel>(*this); }
  Tensor forward(const Tensor& x, Tape* tape = nullptr) const override;
  Tensor backward(const Tape& tape, const Tensor& dlogits, const BackwardRequest& req,
                  std::vector<Tensor>* grads) const override;

  std::vector<LayerInfo> probe_layers() const override;
  std::string key_layer() const override { return "head"; }
  Tensor probe(const Tape& tape, const std::string& layer) const override;
  Tensor feature_tap(const Tape& tape) const override;
  std::vector<Tensor> perceptual_features(const Tape& tape) const override;
  LayerInfo prunable_layer() const override;
  Tensor prunable_activations(const Tape& tape) const override;

  // Final single-channel module output, batch x map_h x map_w.
  Tensor final_map(const Tensor& x) const;
  int map_height() const;
  int map_width() const;

  bool trained() const { return trained_; }
  void mark_trained(bool on = true) { trained_ = on; }

 private:
  struct Level {
    kernels::ConvGeometry trunk, mask, expand;
    int scale = 0;  // input resolution shift of this module
    bool pool_after = false;
  };
  int modules() const { return static_cast<int>(arch_.attention_channels.size()); }
  Level level(int i) const;
  kernels::ConvGeometry stem() const;
  int mask_hidden(int i) const;

  bool trained_ = false;
};

struct AttentionMap {
  int height = 0;
  int width = 0;
  std::vector<float> values;  // row-major
  std::size_t source_id = 0;
  int label = 0;
};

enum class MaskProvenance { attention, corner, random };

std::string to_string(MaskProvenance p);
MaskProvenance parse_mask_provenance(const std::string& s);

struct Mask {
  int height = 0;
  int width = 0;
  int side = 0;
  std::vector<PixelCoord> coords;
  MaskProvenance provenance = MaskProvenance::attention;
  std::int64_t source_sample_id = -1;

  void validate() const;
};

struct RanTraining {
  ArchDescriptor arch{.kind = ArchKind::ran};
  TrainHyper hyper;
};

RanModel train_ran(const ImageDataset& train, const RanTraining& cfg,
                   const EpochCallback& on_epoch = {});

// Final map of one image, upscaled to the image resolution with
// resize_bilinear and clamped at zero.
AttentionMap attention_map(const RanModel& ran, std::span<const float> image, ImageShape shape);
std::vector<AttentionMap> attention_maps(const RanModel& ran, const ImageDataset& ds,
                                         std::span<const std::size_t> indices);

// The map closest (L2) to the elementwise mean; ties go to the lower source id.
const AttentionMap& select_representative_map(std::span<const AttentionMap> maps);

// Bilinear resampling of a map to another resolution (used when the victim's
// input is larger than the attention network's).
AttentionMap resize_map(const AttentionMap& map, int height, int width);

// The side^2 highest-valued pixels, ties broken row-major.
Mask mask_from_map(const AttentionMap& map, int side);

enum class BaselineMaskKind { corner, random };
Mask baseline_mask(ImageShape shape, int side, BaselineMaskKind kind, std::uint64_t seed = 0);

void save_mask(const std::filesystem::path& file, const Mask& mask);
Mask load_mask(const std::filesystem::path& file);

}  // namespace qoebd
