#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pcos/dataset.hpp"
#include "pcos/image.hpp"
#include "pcos/nn/backbones.hpp"
#include "pcos/nn/layers.hpp"

namespace pcos::model {

enum class BackboneKind : std::uint8_t { densenet201, resnet50, tiny_test };

std::string_view to_string(BackboneKind kind);
std::optional<BackboneKind> parse_backbone_kind(std::string_view text);

struct BackboneSpec {
  BackboneKind kind = BackboneKind::tiny_test;
  bool pretrained = false;  ///< ignored for tiny_test
  int input_size = 224;
  double dropout = 0.5;     ///< head dropout rate

  void validate() const;
};

/// Environment variable naming the pretrained-weights cache directory.
inline constexpr const char* kWeightsDirEnv = "PCOS_WEIGHTS_DIR";

/// Activations of one backbone stage for a single image and the gradient of
/// the infected logit with respect to them. Both are (K, h, w).
struct FeatureGradients {
  nn::Tensor activations;
  nn::Tensor gradients;
  double score = 0.0;  ///< infected logit
};

/// Training-mode forward pass with the caches needed for backward().
struct ForwardPass {
  std::vector<double> logits;
  nn::CachePtr backbone_cache;
  nn::CachePtr head_cache;
};

/// A backbone plus a single-logit head. The infected probability is
/// sigmoid(logit).
class ModelHandle {
 public:
  ModelHandle(BackboneSpec spec, nn::Backbone backbone, nn::Sequential head);

  ModelHandle(ModelHandle&&) noexcept = default;
  ModelHandle& operator=(ModelHandle&&) noexcept = default;

  const BackboneSpec& spec() const { return spec_; }
  const std::string& feature_layer() const { return backbone_.feature_layer; }
  const dataset::PreprocessConfig& preprocess() const { return preprocess_; }
  void set_preprocess(const dataset::PreprocessConfig& config);

  nn::Sequential& backbone() { return backbone_.stages; }
  const nn::Sequential& backbone() const { return backbone_.stages; }
  nn::Sequential& head() { return head_; }
  const nn::Sequential& head() const { return head_; }

  /// Every parameter and buffer, with torchvision-compatible backbone names
  /// and "head." for the classifier.
  std::vector<nn::StateEntry> state();
  std::vector<nn::StateEntry> backbone_state();
  /// Trainable parameters; the backbone is skipped when `include_backbone` is false.
  std::vector<nn::StateEntry> parameters(bool include_backbone = true);
  /// Read-only view of state(), for serialization.
  std::vector<std::pair<std::string, const nn::Tensor*>> named_tensors() const;

  /// Inference-mode logits for an NCHW batch.
  std::vector<double> logits(const nn::Tensor& batch) const;

  /// With `train_backbone` false the backbone runs in inference mode (frozen
  /// batch-norm statistics) and keeps no cache.
  ForwardPass forward_train(const nn::Tensor& batch, nn::Rng& rng, bool train_backbone = true) const;
  /// Back-propagates dLoss/dlogit. Backbone parameters receive gradients only
  /// when `include_backbone` is set.
  void backward(const ForwardPass& pass, std::span<const double> dlogits, nn::GradStore& grads,
                bool include_backbone) const;

  /// Throws AttributionError if `layer` is not a top-level backbone stage.
  FeatureGradients feature_gradients(const Image& image, std::string_view layer) const;

  /// Checks an image matches input_size x input_size x 3.
  void check_input(const Image& image) const;

 private:
  friend ModelHandle load_checkpoint(const std::filesystem::path& path);

  BackboneSpec spec_;
  nn::Backbone backbone_;
  nn::Sequential head_;
  dataset::PreprocessConfig preprocess_;
};

/// Builds a model. Backbone and head are initialized from `seed`; with
/// `pretrained`, backbone weights are loaded from `<weights_dir>/<kind>.pcosw`
/// (falling back to $PCOS_WEIGHTS_DIR) and WeightsUnavailableError is thrown
/// when they cannot be found. The head is always freshly initialized.
ModelHandle build_model(const BackboneSpec& spec, std::uint64_t seed = 0,
                        const std::optional<std::filesystem::path>& weights_dir = std::nullopt);

/// Stack images into an NCHW tensor. Throws ShapeError on mixed shapes.
nn::Tensor to_batch(std::span<const Image> images);

double sigmoid(double z);
/// Binary cross-entropy of a logit against an infected-probability target.
/// Affine in the target, so soft labels integrate exactly.
double bce_with_logit(double logit, double target);
/// Binary cross-entropy on a probability; p is clamped to [1e-12, 1-1e-12].
double binary_cross_entropy(double probability, double target);

/// Infected probabilities, order-aligned with `images`. An empty span yields
/// an empty vector.
std::vector<double> predict(const ModelHandle& model, std::span<const Image> images,
                            std::size_t batch_size = 32);

struct Evaluation {
  std::vector<double> probabilities;
  std::vector<Label> labels;
  double loss = 0.0;      ///< mean binary cross-entropy
  double accuracy = 0.0;  ///< threshold 0.5, ties positive
};

Evaluation evaluate(const ModelHandle& model, const dataset::ImageSource& source,
                    std::size_t batch_size = 32);

struct CheckpointInfo {
  int epoch = 0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  std::string config_hash;
};

void save_checkpoint(const ModelHandle& model, const std::filesystem::path& path,
                     const CheckpointInfo& info = {});
/// Throws CheckpointError naming the path when missing or corrupt.
ModelHandle load_checkpoint(const std::filesystem::path& path);
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

}  // namespace pcos::model
