#include "qoebd/model.hpp"

#include <fstream>

#include "qoebd/architectures.hpp"
#include "qoebd/attention.hpp"
#include "qoebd/error.hpp"

namespace qoebd {

namespace {

constexpr std::size_t kEvalBatch = 64;

}  // namespace

std::string to_string(ArchKind kind) {
  switch (kind) {
    case ArchKind::cnn_small: return "cnn_small";
    case ArchKind::vit_lite: return "vit_lite";
    case ArchKind::ran: return "ran";
  }
  return "?";
}

ArchKind parse_arch_kind(const std::string& s) {
  if (s == "cnn_small") return ArchKind::cnn_small;
  if (s == "vit_lite") return ArchKind::vit_lite;
  if (s == "ran") return ArchKind::ran;
  throw ConfigError("unknown architecture '" + s + "'");
}

void to_json(nlohmann::json& j, const ArchDescriptor& a) {
  j = {{"kind", to_string(a.kind)},
       {"conv_channels", a.conv_channels},
       {"fc_width", a.fc_width},
       {"depth", a.depth},
       {"heads", a.heads},
       {"embed_dim", a.embed_dim},
       {"patch", a.patch},
       {"mlp_dim", a.mlp_dim},
       {"stem_channels", a.stem_channels},
       {"attention_channels", a.attention_channels}};
}

void from_json(const nlohmann::json& j, ArchDescriptor& a) {
  a = ArchDescriptor{};
  if (j.contains("kind")) a.kind = parse_arch_kind(j.at("kind").get<std::string>());
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("conv_channels", a.conv_channels);
  opt("fc_width", a.fc_width);
  opt("depth", a.depth);
  opt("heads", a.heads);
  opt("embed_dim", a.embed_dim);
  opt("patch", a.patch);
  opt("mlp_dim", a.mlp_dim);
  opt("stem_channels", a.stem_channels);
  opt("attention_channels", a.attention_channels);
}

std::size_t Model::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

std::vector<Tensor> Model::zero_grads() const {
  std::vector<Tensor> g;
  g.reserve(params_.size());
  for (const auto& p : params_) g.push_back(zeros_like(p));
  return g;
}

Tensor& Model::add_param(std::string name, std::vector<int> shape) {
  names_.push_back(std::move(name));
  params_.emplace_back(std::move(shape));
  return params_.back();
}

std::unique_ptr<Model> build_victim(const ArchDescriptor& arch, int num_classes, ImageShape input,
                                    std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("need at least two classes");
  if (input.height < 1 || input.width < 1 || input.channels < 1) throw ConfigError("empty input shape");
  for (int c : arch.conv_channels)
    if (c < 1) throw ConfigError("conv channel counts must be positive");
  if (arch.fc_width < 1 || arch.embed_dim < 1 || arch.mlp_dim < 1)
    throw ConfigError("layer widths must be positive");
  switch (arch.kind) {
    case ArchKind::cnn_small: return std::make_unique<CnnSmall>(arch, input, num_classes, seed);
    case ArchKind::vit_lite: return std::make_unique<VitLite>(arch, input, num_classes, seed);
    case ArchKind::ran: return std::make_unique<RanModel>(arch, input, num_classes, seed);
  }
  throw ConfigError("unknown architecture");
}

int argmax(std::span<const float> row) {
  if (row.empty()) throw DataError("argmax of an empty row");
  int best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

std::vector<int> predict(const Model& model, const Tensor& batch) {
  const ImageShape s = model.input_shape();
  if (batch.rank() != 4 || batch.dim(1) != s.height || batch.dim(2) != s.width || batch.dim(3) != s.channels)
    throw DataError("batch shape does not match model input");
  const Tensor logits = model.forward(batch);
  std::vector<int> out(static_cast<std::size_t>(logits.dim(0)));
  for (int i = 0; i < logits.dim(0); ++i) out[static_cast<std::size_t>(i)] = argmax(logits.row(i));
  return out;
}

Tensor gather_batch(const ImageDataset& ds, std::span<const std::size_t> indices, ImageShape target,
                    const TriggerSpec* trigger) {
  if (target.channels != ds.shape.channels) throw DataError("channel count mismatch");
  const bool resize = target.height != ds.shape.height || target.width != ds.shape.width;
  Tensor out({static_cast<int>(indices.size()), target.height, target.width, target.channels});
  const std::size_t stride = target.size();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= ds.size()) throw DataError("sample index " + std::to_string(indices[k]) + " out of range");
    std::span<float> dst(out.data() + k * stride, stride);
    if (resize) {
      const auto r = resize_bilinear(ds.image(indices[k]), ds.shape, target.height, target.width);
      std::copy(r.begin(), r.end(), dst.begin());
    } else {
      const auto src = ds.image(indices[k]);
      std::copy(src.begin(), src.end(), dst.begin());
    }
    if (trigger) apply_trigger_inplace(dst, target, *trigger);
  }
  return out;
}

std::vector<int> predict_dataset(const Model& model, const ImageDataset& ds, const TriggerSpec* trigger) {
  std::vector<int> out;
  out.reserve(ds.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += kEvalBatch) {
    const std::size_t end = std::min(ds.size(), start + kEvalBatch);
    idx.resize(end - start);
    for (std::size_t i = start; i < end; ++i) idx[i - start] = i;
    const auto p = predict(model, gather_batch(ds, idx, model.input_shape(), trigger));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

double evaluate(const Model& model, const ImageDataset& ds, const TriggerSpec* trigger) {
  if (ds.size() == 0) return 0.0;
  const auto p = predict_dataset(model, ds, trigger);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < p.size(); ++i) ok += p[i] == ds.labels[i];
  return static_cast<double>(ok) / static_cast<double>(ds.size());
}

Tensor capture_activations(const Model& model, const std::string& layer, const Tensor& batch) {
  bool known = false;
  for (const auto& l : model.probe_layers()) known = known || l.name == layer;
  if (!known) throw ConfigError("unknown layer '" + layer + "' for " + to_string(model.arch().kind));
  Tape tape;
  model.forward(batch, &tape);
  return model.probe(tape, layer);
}

void save_checkpoint(const std::filesystem::path& stem, const Model& model, const nlohmann::json& extra) {
  std::vector<float> flat;
  flat.reserve(model.param_count());
  nlohmann::json shapes = nlohmann::json::array();
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const auto& p = model.params()[i];
    flat.insert(flat.end(), p.vec().begin(), p.vec().end());
    shapes.push_back({{"name", model.param_names()[i]}, {"shape", p.shape()}});
  }
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  write_f32_block(std::filesystem::path(stem.string() + ".bin"), flat);
  nlohmann::json j = extra.is_object() ? extra : nlohmann::json::object();
  j["arch"] = model.arch();
  j["num_classes"] = model.num_classes();
  const ImageShape s = model.input_shape();
  j["input"] = {s.height, s.width, s.channels};
  j["params"] = shapes;
  if (!model.pruned().empty()) j["pruned"] = model.pruned();
  std::ofstream f(stem.string() + ".json");
  if (!f) throw DataError("cannot write checkpoint " + stem.string());
  f << j.dump(2) << "\n";
}

std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& stem, nlohmann::json* manifest) {
  std::ifstream f(stem.string() + ".json");
  if (!f) throw DataError("missing checkpoint manifest " + stem.string() + ".json");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  const auto arch = j.at("arch").get<ArchDescriptor>();
  const auto in = j.at("input").get<std::vector<int>>();
  if (in.size() != 3) throw DataError("checkpoint input shape must have three entries");
  auto model = build_victim(arch, j.at("num_classes").get<int>(), {in[0], in[1], in[2]}, 0);
  const auto flat = read_f32_block(std::filesystem::path(stem.string() + ".bin"));
  if (flat.size() != model->param_count())
    throw DataError("checkpoint holds " + std::to_string(flat.size()) + " values, architecture needs " +
                    std::to_string(model->param_count()));
  std::size_t off = 0;
  for (auto& p : model->params()) {
    std::copy_n(flat.begin() + static_cast<long>(off), p.size(), p.data());
    off += p.size();
  }
  if (j.contains("pruned")) model->set_pruned(j.at("pruned").get<std::vector<std::uint8_t>>());
  if (manifest) *manifest = std::move(j);
  return model;
}

}  // namespace qoebd
