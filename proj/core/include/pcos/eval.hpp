#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcos/image.hpp"
#include "pcos/model.hpp"
#include "pcos/train.hpp"

namespace pcos::eval {

/// Binary counts with `infected` as the positive class.
struct ConfusionMatrix {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  /// The same outcomes viewed with `notinfected` as the positive class.
  ConfusionMatrix swapped() const { return {tn, fn, fp, tp}; }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

/// Predicted infected iff probability >= threshold. Throws InputError on a
/// length mismatch, empty input, or a probability outside [0, 1].
ConfusionMatrix confusion(std::span<const Label> y_true, std::span<const double> y_prob,
                          double threshold = 0.5);

/// An exact count ratio. A zero denominator evaluates to 0.
struct Ratio {
  std::uint64_t numerator = 0;
  std::uint64_t denominator = 0;

  bool defined() const { return denominator != 0; }
  double value() const;

  friend bool operator==(const Ratio&, const Ratio&) = default;
};

struct ClassMetrics {
  Label label = Label::infected;
  Ratio precision;
  Ratio recall;
  /// 2tp / (2tp + fp + fn): the harmonic mean of precision and recall.
  Ratio f1;
  std::uint64_t support = 0;
};

struct MetricsReport {
  ConfusionMatrix matrix;
  Ratio accuracy;
  ClassMetrics infected;
  ClassMetrics notinfected;
  double macro_f1 = 0.0;
  /// One entry per metric that fell back to the zero-denominator convention.
  std::vector<std::string> annotations;

  const ClassMetrics& for_class(Label label) const {
    return label == Label::infected ? infected : notinfected;
  }
};

/// Throws InputError when the matrix is empty.
MetricsReport metrics(const ConfusionMatrix& cm);

/// Structured report with a fixed key order.
std::string metrics_json(const MetricsReport& report);
/// metric,class,value rows.
std::string metrics_csv(const MetricsReport& report);

struct MetricsFiles {
  std::filesystem::path json;
  std::filesystem::path csv;
  std::filesystem::path confusion_png;
};

/// Writes <prefix>.json, <prefix>.csv and <prefix>_confusion.png into `out_dir`.
MetricsFiles write_metrics(const MetricsReport& report, const std::filesystem::path& out_dir,
                           const std::string& prefix = "metrics",
                           const std::string& title = "Confusion matrix");

struct CurveFiles {
  std::filesystem::path table;
  std::filesystem::path accuracy_plot;
  std::filesystem::path loss_plot;
};

/// Writes history.csv, accuracy.png and loss.png into `out_dir`. The plots
/// are rendered from the written table so they can be regenerated from it.
CurveFiles export_curves(const model::TrainingHistory& history,
                         const std::filesystem::path& out_dir);

/// Renders accuracy.png and loss.png from a history table.
CurveFiles render_curves(const std::filesystem::path& table, const std::filesystem::path& out_dir);

// Alpha grid sweep.

struct AlphaPair {
  double mixup_alpha = 0.0;
  double cutmix_alpha = 0.0;
};

/// Parses one "mixup_alpha,cutmix_alpha" pair per line. Blank lines and lines
/// starting with '#' are skipped; a header line naming the columns is allowed.
/// Throws ConfigError naming the offending line, or when no pairs remain.
std::vector<AlphaPair> parse_grid(std::istream& in);
std::vector<AlphaPair> read_grid(const std::filesystem::path& path);

struct SweepResult {
  double mixup_alpha = 0.0;
  double cutmix_alpha = 0.0;
  double val_accuracy = 0.0;
  double val_loss = 0.0;
  std::filesystem::path run_dir;
  bool ok = true;
  std::string error;
};

struct SweepReport {
  std::vector<SweepResult> rows;
  bool all_ok() const;
};

inline constexpr const char* kSweepHeader = "mixup_alpha,cutmix_alpha,val_accuracy,val_loss,run_dir";

struct SweepInputs {
  model::BackboneSpec backbone;
  std::optional<std::filesystem::path> weights_dir;
  dataset::PreprocessConfig preprocess;
  const dataset::ImageSource* train = nullptr;
  const dataset::ImageSource* val = nullptr;
};

/// One training run per grid point, each from a freshly built model with the
/// base seed and the same splits. Rows keep the grid order and report the best
/// epoch of each run. A failing run is recorded and the sweep continues.
/// Writes <out_root>/sweep_report.csv.
SweepReport sweep(const std::vector<AlphaPair>& grid, const model::TrainConfig& base_config,
                  const SweepInputs& inputs, const std::filesystem::path& out_root);

void write_sweep_report(const std::filesystem::path& path, const SweepReport& report);

}  // namespace pcos::eval
