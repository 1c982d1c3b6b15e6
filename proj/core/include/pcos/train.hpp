#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <unordered_map>
#include <string>
#include <string_view>
#include <vector>

#include "pcos/dataset.hpp"
#include "pcos/model.hpp"

namespace pcos::model {

enum class Optimizer : std::uint8_t { adam };
enum class LossKind : std::uint8_t { binary_cross_entropy };
enum class Monitor : std::uint8_t { val_loss };

/// Hyperparameter contract. Defaults follow the DenseNet201 configuration
/// (batch 32, Adam at 1e-4, binary cross-entropy, 98 epochs, patience 15).
struct TrainConfig {
  int batch_size = 32;
  double learning_rate = 1e-4;
  Optimizer optimizer = Optimizer::adam;
  LossKind loss = LossKind::binary_cross_entropy;
  int max_epochs = 98;
  int patience = 15;
  Monitor monitor = Monitor::val_loss;
  double mixup_alpha = 0.0;
  double cutmix_alpha = 0.0;
  std::uint64_t seed = 0;
  bool freeze_backbone = false;

  void validate() const;
  /// Stable one-line rendering of every field; the basis of config_hash().
  std::string canonical() const;
  std::string config_hash() const;

  /// densenet201: 98 epochs / patience 15; resnet50: 67 / 10; tiny_test: 30 / 5.
  static TrainConfig for_backbone(BackboneKind kind);
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  bool stopped_early = false;
  /// Epochs at which the best checkpoint was (re)written, in order.
  std::vector<int> checkpoint_epochs;

  const EpochRecord& best() const;
};

struct TrainResult {
  TrainingHistory history;
  std::filesystem::path checkpoint;  ///< <run_dir>/checkpoints/best.ckpt
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch Adam on binary cross-entropy with per-batch MixUp/CutMix.
/// After every epoch the validation split is scored; the checkpoint is
/// rewritten whenever val_loss strictly improves, and training stops once
/// val_loss has not improved for `patience` consecutive epochs.
///
/// Writes <run_dir>/history.csv (flushed per epoch) and
/// <run_dir>/checkpoints/best.{ckpt,txt}.
TrainResult train(ModelHandle& model, const dataset::ImageSource& train_split,
                  const dataset::ImageSource& val_split, const TrainConfig& config,
                  const std::filesystem::path& run_dir, const EpochCallback& on_epoch = {});

/// Adam with bias correction. State is keyed by parameter identity.
class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                double epsilon = 1e-7);
  void step(const std::vector<nn::StateEntry>& parameters, const nn::GradStore& grads);

 private:
  double lr_, beta1_, beta2_, eps_;
  long step_count_ = 0;
  std::unordered_map<const nn::Parameter*, std::pair<nn::Tensor, nn::Tensor>> moments_;
};

inline constexpr std::string_view kHistoryHeader =
    "epoch,train_loss,train_accuracy,val_loss,val_accuracy";

void write_history_row(std::ostream& out, const EpochRecord& record);
void write_history_csv(const std::filesystem::path& path, const TrainingHistory& history);
/// Parses a table produced by write_history_csv (best/stop flags are not stored).
std::vector<EpochRecord> read_history_csv(const std::filesystem::path& path);

}  // namespace pcos::model
