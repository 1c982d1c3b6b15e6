#include "pcos/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "pcos/augment.hpp"
#include "pcos/errors.hpp"
#include "pcos/hash.hpp"

namespace pcos::model {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ParameterError("learning_rate must be positive");
  }
  if (max_epochs < 1) throw ParameterError("max_epochs must be >= 1");
  if (patience < 1) throw ParameterError("patience must be >= 1");
  if (patience > max_epochs) throw ParameterError("patience must not exceed max_epochs");
  for (double alpha : {mixup_alpha, cutmix_alpha}) {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
      throw ParameterError("augmentation alphas must be finite and >= 0");
    }
  }
}

std::string TrainConfig::canonical() const {
  return fmt::format(
      "batch_size={};learning_rate={};optimizer=adam;loss=binary_cross_entropy;max_epochs={};"
      "patience={};monitor=val_loss;mixup_alpha={};cutmix_alpha={};seed={};freeze_backbone={}",
      batch_size, learning_rate, max_epochs, patience, mixup_alpha, cutmix_alpha, seed,
      freeze_backbone);
}

std::string TrainConfig::config_hash() const { return sha256_hex(canonical()).substr(0, 16); }

TrainConfig TrainConfig::for_backbone(BackboneKind kind) {
  TrainConfig config;
  switch (kind) {
    case BackboneKind::densenet201:
      config.max_epochs = 98;
      config.patience = 15;
      break;
    case BackboneKind::resnet50:
      config.max_epochs = 67;
      config.patience = 10;
      break;
    case BackboneKind::tiny_test:
      config.max_epochs = 30;
      config.patience = 5;
      break;
  }
  return config;
}

const EpochRecord& TrainingHistory::best() const {
  const auto it = std::find_if(epochs.begin(), epochs.end(),
                               [&](const EpochRecord& r) { return r.epoch == best_epoch; });
  if (it == epochs.end()) throw Error("training history has no best epoch");
  return *it;
}

Adam::Adam(double learning_rate, double beta1, double beta2, double epsilon)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {}

void Adam::step(const std::vector<nn::StateEntry>& parameters, const nn::GradStore& grads) {
  ++step_count_;
  const double correction1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double correction2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  for (const auto& entry : parameters) {
    if (entry.parameter == nullptr) continue;
    const nn::Tensor* grad = grads.find(*entry.parameter);
    if (grad == nullptr) continue;
    nn::Tensor& value = entry.parameter->value;
    auto [it, inserted] = moments_.try_emplace(entry.parameter);
    auto& [m, v] = it->second;
    if (inserted) {
      m = nn::Tensor(value.shape());
      v = nn::Tensor(value.shape());
    }
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = (*grad)[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      value[i] -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
    }
  }
}

void write_history_row(std::ostream& out, const EpochRecord& r) {
  out << fmt::format("{},{},{},{},{}\n", r.epoch, r.train_loss, r.train_accuracy, r.val_loss,
                     r.val_accuracy);
}

void write_history_csv(const fs::path& path, const TrainingHistory& history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << kHistoryHeader << '\n';
  for (const auto& r : history.epochs) write_history_row(out, r);
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<EpochRecord> read_history_csv(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kHistoryHeader) {
    throw InputError(path.string() + ": expected header '" + std::string(kHistoryHeader) + "'");
  }
  std::vector<EpochRecord> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream fields(line);
    fields.imbue(std::locale::classic());
    EpochRecord r;
    std::string rest;
    if (!(fields >> r.epoch >> r.train_loss >> r.train_accuracy >> r.val_loss >> r.val_accuracy) ||
        (fields >> rest)) {
      throw InputError(fmt::format("{}:{}: malformed history row", path.string(), line_no));
    }
    rows.push_back(r);
  }
  return rows;
}

namespace {

// Independent streams so that toggling augmentation does not perturb the
// shuffle order or dropout masks.
std::mt19937_64 stream(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag)};
  return std::mt19937_64(seq);
}

void write_best_sidecar(const fs::path& path, const EpochRecord& r, const std::string& hash) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << fmt::format("epoch={}\nval_loss={}\nval_accuracy={}\nconfig_hash={}\n", r.epoch,
                     r.val_loss, r.val_accuracy, hash);
}

}  // namespace

TrainResult train(ModelHandle& model, const dataset::ImageSource& train_split,
                  const dataset::ImageSource& val_split, const TrainConfig& config,
                  const fs::path& run_dir, const EpochCallback& on_epoch) {
  config.validate();
  if (train_split.empty()) throw ConfigError("training split is empty");
  if (val_split.empty()) throw ConfigError("validation split is empty");

  const fs::path checkpoint_dir = run_dir / "checkpoints";
  std::error_code ec;
  fs::create_directories(checkpoint_dir, ec);
  if (ec) throw IoError("cannot create " + checkpoint_dir.string() + ": " + ec.message());

  const fs::path history_path = run_dir / "history.csv";
  std::ofstream history_out(history_path, std::ios::binary);
  if (!history_out) throw IoError("cannot write " + history_path.string());
  history_out << kHistoryHeader << '\n' << std::flush;

  auto shuffle_rng = stream(config.seed, 1);
  auto augment_rng = stream(config.seed, 2);
  auto dropout_rng = stream(config.seed, 3);

  const bool train_backbone = !config.freeze_backbone;
  const auto params = model.parameters(train_backbone);
  Adam optimizer(config.learning_rate);
  const std::string hash = config.config_hash();
  const bool augmenting = config.mixup_alpha > 0.0 || config.cutmix_alpha > 0.0;

  TrainResult result;
  result.checkpoint = checkpoint_dir / "best.ckpt";
  TrainingHistory& history = result.history;
  double best_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;

  std::vector<std::size_t> order(train_split.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch_size = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;

    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      std::vector<dataset::LabeledImage> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) batch.push_back(train_split.get(order[i]));

      // A trailing single-sample batch has no partner and is used unmixed.
      const bool mix = augmenting && batch.size() >= 2;
      const auto samples = augment::augment_batch(batch, mix ? config.mixup_alpha : 0.0,
                                                  mix ? config.cutmix_alpha : 0.0, augment_rng);
      std::vector<Image> images;
      images.reserve(samples.size());
      for (const auto& s : samples) images.push_back(s.image);
      for (const Image& img : images) model.check_input(img);

      const ForwardPass pass = model.forward_train(to_batch(images), dropout_rng, train_backbone);
      const double n = static_cast<double>(samples.size());
      std::vector<double> dlogits(samples.size());
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const double z = pass.logits[i];
        const double target = samples[i].soft_label;
        const double loss = bce_with_logit(z, target);
        if (!std::isfinite(loss)) {
          throw TrainingDivergedError(epoch, fmt::format("non-finite training loss at epoch {}",
                                                         epoch));
        }
        loss_sum += loss;
        correct += (z >= 0.0) == (target >= 0.5);
        dlogits[i] = (sigmoid(z) - target) / n;
      }
      nn::GradStore grads;
      model.backward(pass, dlogits, grads, train_backbone);
      optimizer.step(params, grads);
    }

    const Evaluation val = evaluate(model, val_split, batch_size);
    if (!std::isfinite(val.loss)) {
      throw TrainingDivergedError(epoch,
                                  fmt::format("non-finite validation loss at epoch {}", epoch));
    }
    const auto total = static_cast<double>(order.size());
    const EpochRecord record{epoch, loss_sum / total, static_cast<double>(correct) / total,
                             val.loss, val.accuracy};
    history.epochs.push_back(record);
    write_history_row(history_out, record);
    history_out.flush();
    if (!history_out) throw IoError("failed writing " + history_path.string());

    if (record.val_loss < best_loss) {
      best_loss = record.val_loss;
      since_best = 0;
      history.best_epoch = epoch;
      history.checkpoint_epochs.push_back(epoch);
      save_checkpoint(model, result.checkpoint,
                      CheckpointInfo{epoch, record.val_loss, record.val_accuracy, hash});
      write_best_sidecar(checkpoint_dir / "best.txt", record, hash);
    } else {
      ++since_best;
    }
    if (on_epoch) on_epoch(record);
    if (since_best >= config.patience) {
      history.stopped_early = true;
      break;
    }
  }
  return result;
}

}  // namespace pcos::model
