#include "pcos/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pcos/errors.hpp"
#include "pcos/nn/archive.hpp"

namespace pcos::model {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::string_view to_string(BackboneKind kind) {
  switch (kind) {
    case BackboneKind::densenet201: return "densenet201";
    case BackboneKind::resnet50: return "resnet50";
    case BackboneKind::tiny_test: return "tiny_test";
  }
  return "?";
}

std::optional<BackboneKind> parse_backbone_kind(std::string_view text) {
  if (text == "densenet201") return BackboneKind::densenet201;
  if (text == "resnet50") return BackboneKind::resnet50;
  if (text == "tiny_test") return BackboneKind::tiny_test;
  return std::nullopt;
}

void BackboneSpec::validate() const {
  // Five stride-2 reductions in the full-size backbones.
  const int minimum = kind == BackboneKind::tiny_test ? 2 : 32;
  if (input_size < minimum) {
    throw ConfigError("input_size for " + std::string(to_string(kind)) + " must be >= " +
                      std::to_string(minimum));
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0,1)");
}

ModelHandle::ModelHandle(BackboneSpec spec, nn::Backbone backbone, nn::Sequential head)
    : spec_(spec), backbone_(std::move(backbone)), head_(std::move(head)) {
  preprocess_.target_size = spec_.input_size;
}

void ModelHandle::set_preprocess(const dataset::PreprocessConfig& config) {
  if (config.target_size != spec_.input_size) {
    throw ConfigError("preprocess target_size " + std::to_string(config.target_size) +
                      " does not match model input_size " + std::to_string(spec_.input_size));
  }
  preprocess_ = config;
}

std::vector<nn::StateEntry> ModelHandle::backbone_state() {
  std::vector<nn::StateEntry> entries;
  backbone_.stages.state(backbone_.state_prefix, entries);
  return entries;
}

std::vector<nn::StateEntry> ModelHandle::state() {
  auto entries = backbone_state();
  head_.state("head.", entries);
  return entries;
}

std::vector<nn::StateEntry> ModelHandle::parameters(bool include_backbone) {
  std::vector<nn::StateEntry> all;
  if (include_backbone) backbone_.stages.state(backbone_.state_prefix, all);
  head_.state("head.", all);
  std::erase_if(all, [](const nn::StateEntry& e) { return e.parameter == nullptr; });
  return all;
}

std::vector<std::pair<std::string, const nn::Tensor*>> ModelHandle::named_tensors() const {
  // Layer state accessors are non-const; nothing is modified here.
  auto entries = const_cast<ModelHandle*>(this)->state();
  std::vector<std::pair<std::string, const nn::Tensor*>> out;
  out.reserve(entries.size());
  for (auto& e : entries) out.emplace_back(e.name, e.tensor);
  return out;
}

void ModelHandle::check_input(const Image& image) const {
  if (image.height != spec_.input_size || image.width != spec_.input_size || image.channels != 3) {
    throw ShapeError("model expects " + std::to_string(spec_.input_size) + "x" +
                     std::to_string(spec_.input_size) + "x3 images, got " +
                     std::to_string(image.height) + "x" + std::to_string(image.width) + "x" +
                     std::to_string(image.channels));
  }
}

std::vector<double> ModelHandle::logits(const nn::Tensor& batch) const {
  const nn::ForwardContext ctx;
  const nn::Tensor features = backbone_.stages.forward(batch, ctx, nullptr);
  const nn::Tensor out = head_.forward(features, ctx, nullptr);
  return {out.values().begin(), out.values().end()};
}

ForwardPass ModelHandle::forward_train(const nn::Tensor& batch, nn::Rng& rng,
                                       bool train_backbone) const {
  ForwardPass pass;
  const nn::ForwardContext ctx{true, &rng};
  const nn::Tensor features =
      train_backbone ? backbone_.stages.forward(batch, ctx, &pass.backbone_cache)
                     : backbone_.stages.forward(batch, nn::ForwardContext{}, nullptr);
  const nn::Tensor out = head_.forward(features, ctx, &pass.head_cache);
  pass.logits.assign(out.values().begin(), out.values().end());
  return pass;
}

void ModelHandle::backward(const ForwardPass& pass, std::span<const double> dlogits,
                           nn::GradStore& grads, bool include_backbone) const {
  if (dlogits.size() != pass.logits.size()) throw ShapeError("backward: gradient count mismatch");
  nn::Tensor grad({static_cast<int>(dlogits.size()), 1},
                  std::vector<double>(dlogits.begin(), dlogits.end()));
  const nn::Tensor dfeatures = head_.backward(grad, *pass.head_cache, &grads);
  if (include_backbone && pass.backbone_cache) {
    backbone_.stages.backward(dfeatures, *pass.backbone_cache, &grads);
  }
}

FeatureGradients ModelHandle::feature_gradients(const Image& image, std::string_view layer) const {
  check_input(image);
  const auto& stages = backbone_.stages;
  const std::size_t index = stages.find(layer);
  if (index == stages.size()) {
    std::string names;
    for (std::size_t i = 0; i < stages.size(); ++i) names += (i ? ", " : "") + stages.name(i);
    throw AttributionError("layer '" + std::string(layer) + "' not found; backbone stages: " +
                           names);
  }
  const nn::ForwardContext ctx;
  const nn::Tensor input = to_batch(std::span(&image, 1));
  nn::Tensor activations = stages.forward_range(input, ctx, 0, index + 1, nullptr);
  if (activations.rank() != 4) {
    throw AttributionError("layer '" + std::string(layer) + "' does not produce a feature map");
  }
  nn::CachePtr tail_cache;
  nn::CachePtr head_cache;
  const nn::Tensor features =
      stages.forward_range(activations, ctx, index + 1, stages.size(), &tail_cache);
  const nn::Tensor out = head_.forward(features, ctx, &head_cache);
  const nn::Tensor dfeatures = head_.backward(nn::Tensor({1, 1}, 1.0), *head_cache, nullptr);
  nn::Tensor gradients = stages.backward(dfeatures, *tail_cache, nullptr);

  const nn::Shape chw{activations.dim(1), activations.dim(2), activations.dim(3)};
  return {activations.reshaped(chw), gradients.reshaped(chw), out[0]};
}

namespace {

fs::path resolve_weights_dir(const std::optional<fs::path>& weights_dir) {
  if (weights_dir) return *weights_dir;
  if (const char* env = std::getenv(kWeightsDirEnv); env != nullptr && *env != '\0') {
    return fs::path(env);
  }
  return {};
}

void load_pretrained(ModelHandle& model, const std::optional<fs::path>& weights_dir) {
  const fs::path dir = resolve_weights_dir(weights_dir);
  const std::string file = std::string(to_string(model.spec().kind)) + ".pcosw";
  if (dir.empty()) {
    throw WeightsUnavailableError("pretrained " + std::string(to_string(model.spec().kind)) +
                                  " weights requested but no weights directory is configured; "
                                  "set " + std::string(kWeightsDirEnv) + " to a directory holding " +
                                  file + " (see tools/export_torchvision_weights.py)");
  }
  const fs::path path = dir / file;
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) {
    throw WeightsUnavailableError("pretrained weights not found at '" + path.string() +
                                  "' (see tools/export_torchvision_weights.py)");
  }
  nn::TensorMap tensors;
  try {
    tensors = nn::read_tensor_file(path);
  } catch (const CheckpointError& e) {
    throw WeightsUnavailableError(std::string("unreadable pretrained weights: ") + e.what());
  }
  for (auto& entry : model.backbone_state()) {
    auto it = tensors.find(entry.name);
    if (it == tensors.end()) {
      throw WeightsUnavailableError("'" + path.string() + "' lacks tensor " + entry.name);
    }
    if (it->second.shape() != entry.tensor->shape()) {
      throw WeightsUnavailableError("'" + path.string() + "': tensor " + entry.name + " has shape " +
                                    nn::shape_string(it->second.shape()) + ", expected " +
                                    nn::shape_string(entry.tensor->shape()));
    }
    *entry.tensor = it->second;
  }
}

}  // namespace

ModelHandle build_model(const BackboneSpec& spec, std::uint64_t seed,
                        const std::optional<fs::path>& weights_dir) {
  spec.validate();
  nn::Rng backbone_rng(seed);
  // Separate stream so the head initialization does not depend on the backbone.
  nn::Rng head_rng(seed ^ 0x9E3779B97F4A7C15ULL);
  nn::Backbone backbone;
  switch (spec.kind) {
    case BackboneKind::tiny_test: backbone = nn::make_tiny_backbone(backbone_rng); break;
    case BackboneKind::resnet50: backbone = nn::make_resnet50(backbone_rng); break;
    case BackboneKind::densenet201: backbone = nn::make_densenet201(backbone_rng); break;
  }
  const int channels = backbone.feature_channels;
  ModelHandle model(spec, std::move(backbone), nn::make_head(channels, spec.dropout, head_rng));
  if (spec.pretrained && spec.kind != BackboneKind::tiny_test) load_pretrained(model, weights_dir);
  return model;
}

nn::Tensor to_batch(std::span<const Image> images) {
  if (images.empty()) return nn::Tensor({0, 3, 0, 0});
  const Image& first = images.front();
  const int N = static_cast<int>(images.size());
  const int C = first.channels, H = first.height, W = first.width;
  nn::Tensor batch({N, C, H, W});
  for (int n = 0; n < N; ++n) {
    const Image& img = images[n];
    if (!img.same_shape(first)) throw ShapeError("batch images must share one shape");
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        for (int c = 0; c < C; ++c) batch.at(n, c, y, x) = img.at(y, x, c);
      }
    }
  }
  return batch;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double bce_with_logit(double logit, double target) {
  const double softplus = std::max(logit, 0.0) + std::log1p(std::exp(-std::abs(logit)));
  return softplus - target * logit;
}

double binary_cross_entropy(double probability, double target) {
  const double p = std::clamp(probability, 1e-12, 1.0 - 1e-12);
  return -(target * std::log(p) + (1.0 - target) * std::log1p(-p));
}

std::vector<double> predict(const ModelHandle& model, std::span<const Image> images,
                            std::size_t batch_size) {
  if (batch_size == 0) throw ParameterError("batch_size must be positive");
  std::vector<double> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const auto chunk = images.subspan(start, std::min(batch_size, images.size() - start));
    for (const Image& img : chunk) model.check_input(img);
    for (double z : model.logits(to_batch(chunk))) out.push_back(sigmoid(z));
  }
  return out;
}

Evaluation evaluate(const ModelHandle& model, const dataset::ImageSource& source,
                    std::size_t batch_size) {
  if (batch_size == 0) throw ParameterError("batch_size must be positive");
  Evaluation ev;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  std::vector<Image> chunk;
  std::vector<Label> labels;
  auto flush = [&] {
    if (chunk.empty()) return;
    for (const Image& img : chunk) model.check_input(img);
    const auto logits = model.logits(to_batch(chunk));
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double y = label_value(labels[i]);
      const double p = sigmoid(logits[i]);
      loss_sum += bce_with_logit(logits[i], y);
      correct += (p >= 0.5) == (labels[i] == Label::infected);
      ev.probabilities.push_back(p);
      ev.labels.push_back(labels[i]);
    }
    chunk.clear();
    labels.clear();
  };
  for (std::size_t i = 0; i < source.size(); ++i) {
    auto item = source.get(i);
    chunk.push_back(std::move(item.image));
    labels.push_back(item.label);
    if (chunk.size() == batch_size) flush();
  }
  flush();
  if (!ev.probabilities.empty()) {
    ev.loss = loss_sum / static_cast<double>(ev.probabilities.size());
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(ev.probabilities.size());
  }
  return ev;
}

namespace {

constexpr std::array<char, 8> kCheckpointMagic{'P', 'C', 'O', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

ordered_json checkpoint_metadata(const ModelHandle& model, const CheckpointInfo& info) {
  const auto& spec = model.spec();
  const auto& pre = model.preprocess();
  ordered_json meta;
  meta["backbone"] = {{"kind", std::string(to_string(spec.kind))},
                      {"pretrained", spec.pretrained},
                      {"input_size", spec.input_size},
                      {"dropout", spec.dropout}};
  meta["preprocess"] = {{"target_size", pre.target_size},
                        {"rescale_divisor", pre.rescale_divisor},
                        {"standardize", pre.standardize},
                        {"mean", pre.mean},
                        {"std", pre.stddev}};
  meta["epoch"] = info.epoch;
  meta["val_loss"] = info.val_loss;
  meta["val_accuracy"] = info.val_accuracy;
  meta["config_hash"] = info.config_hash;
  return meta;
}

struct RawCheckpoint {
  nlohmann::json meta;
  nn::TensorMap tensors;
};

RawCheckpoint read_raw_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  try {
    std::array<char, 8> magic{};
    std::uint32_t version = 0;
    std::uint64_t meta_len = 0;
    if (!in.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
      throw CheckpointError("bad magic");
    }
    if (!in.read(reinterpret_cast<char*>(&version), sizeof version) ||
        version != kCheckpointVersion) {
      throw CheckpointError("unsupported version");
    }
    if (!in.read(reinterpret_cast<char*>(&meta_len), sizeof meta_len) || meta_len > (1u << 24)) {
      throw CheckpointError("bad metadata length");
    }
    std::string text(meta_len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(meta_len))) {
      throw CheckpointError("truncated metadata");
    }
    RawCheckpoint raw;
    raw.meta = nlohmann::json::parse(text);
    raw.tensors = nn::read_tensors(in);
    return raw;
  } catch (const CheckpointError& e) {
    throw CheckpointError("corrupt checkpoint '" + path.string() + "': " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint '" + path.string() + "': " + e.what());
  }
}

}  // namespace

void save_checkpoint(const ModelHandle& model, const fs::path& path, const CheckpointInfo& info) {
  const std::string meta = checkpoint_metadata(model, info).dump();
  // Write-then-rename so an interrupted save never leaves a torn best checkpoint.
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
    out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t meta_len = meta.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&meta_len), sizeof meta_len);
    out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    nn::write_tensors(out, model.named_tensors());
    if (!out) throw IoError("failed writing checkpoint '" + path.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

CheckpointInfo read_checkpoint_info(const fs::path& path) {
  const auto raw = read_raw_checkpoint(path);
  try {
    return {raw.meta.at("epoch").get<int>(), raw.meta.at("val_loss").get<double>(),
            raw.meta.at("val_accuracy").get<double>(),
            raw.meta.at("config_hash").get<std::string>()};
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint '" + path.string() + "': " + e.what());
  }
}

ModelHandle load_checkpoint(const fs::path& path) {
  auto raw = read_raw_checkpoint(path);
  BackboneSpec spec;
  dataset::PreprocessConfig pre;
  try {
    const auto& b = raw.meta.at("backbone");
    const auto kind = parse_backbone_kind(b.at("kind").get<std::string>());
    if (!kind) throw CheckpointError("unknown backbone kind");
    spec.kind = *kind;
    spec.pretrained = b.at("pretrained").get<bool>();
    spec.input_size = b.at("input_size").get<int>();
    spec.dropout = b.at("dropout").get<double>();
    const auto& p = raw.meta.at("preprocess");
    pre.target_size = p.at("target_size").get<int>();
    pre.rescale_divisor = p.at("rescale_divisor").get<double>();
    pre.standardize = p.at("standardize").get<bool>();
    pre.mean = p.at("mean").get<std::array<double, 3>>();
    pre.stddev = p.at("std").get<std::array<double, 3>>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint '" + path.string() + "': " + e.what());
  }

  BackboneSpec skeleton = spec;
  skeleton.pretrained = false;  // weights come from the checkpoint itself
  ModelHandle model = [&] {
    try {
      return build_model(skeleton, 0);
    } catch (const ConfigError& e) {
      throw CheckpointError("corrupt checkpoint '" + path.string() + "': " + e.what());
    }
  }();
  auto entries = model.state();
  if (entries.size() != raw.tensors.size()) {
    throw CheckpointError("checkpoint '" + path.string() + "' holds " +
                          std::to_string(raw.tensors.size()) + " tensors, model expects " +
                          std::to_string(entries.size()));
  }
  for (auto& entry : entries) {
    auto it = raw.tensors.find(entry.name);
    if (it == raw.tensors.end() || it->second.shape() != entry.tensor->shape()) {
      throw CheckpointError("checkpoint '" + path.string() + "' has no matching tensor " +
                            entry.name);
    }
    *entry.tensor = std::move(it->second);
  }
  // Keep the pretrained flag for provenance; the weights are already in place.
  model.spec_.pretrained = spec.pretrained;
  try {
    model.set_preprocess(pre);
  } catch (const ConfigError& e) {
    throw CheckpointError("corrupt checkpoint '" + path.string() + "': " + e.what());
  }
  return model;
}

}  // namespace pcos::model
