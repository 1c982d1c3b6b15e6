#include "pcos/eval.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "pcos/errors.hpp"
#include "pcos/plot.hpp"

namespace pcos::eval {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

ConfusionMatrix confusion(std::span<const Label> y_true, std::span<const double> y_prob,
                          double threshold) {
  if (y_true.size() != y_prob.size()) {
    throw InputError(fmt::format("confusion: {} labels but {} probabilities", y_true.size(),
                                 y_prob.size()));
  }
  if (y_true.empty()) throw InputError("confusion: no samples");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const double p = y_prob[i];
    if (!(p >= 0.0 && p <= 1.0)) {
      throw InputError(fmt::format("confusion: probability {} at index {} is outside [0, 1]", p, i));
    }
    const bool predicted = p >= threshold;
    const bool actual = y_true[i] == Label::infected;
    if (actual) {
      ++(predicted ? cm.tp : cm.fn);
    } else {
      ++(predicted ? cm.fp : cm.tn);
    }
  }
  return cm;
}

double Ratio::value() const {
  if (denominator == 0) return 0.0;
  return static_cast<double>(numerator) / static_cast<double>(denominator);
}

namespace {

ClassMetrics class_metrics(Label label, std::uint64_t tp, std::uint64_t fp, std::uint64_t fn,
                           std::vector<std::string>& notes) {
  ClassMetrics m;
  m.label = label;
  m.precision = {tp, tp + fp};
  m.recall = {tp, tp + fn};
  m.f1 = {2 * tp, 2 * tp + fp + fn};
  m.support = tp + fn;
  const std::string name(to_string(label));
  if (!m.precision.defined()) notes.push_back(name + " precision: no positive predictions, set to 0");
  if (!m.recall.defined()) notes.push_back(name + " recall: no actual samples, set to 0");
  if (!m.precision.defined() || !m.recall.defined()) {
    notes.push_back(name + " f1: precision or recall undefined, set to 0");
    m.f1 = {0, 0};
  }
  return m;
}

ordered_json ratio_json(const Ratio& r) {
  return ordered_json{{"value", r.value()},
                      {"numerator", r.numerator},
                      {"denominator", r.denominator}};
}

ordered_json class_json(const ClassMetrics& m) {
  return ordered_json{{"precision", ratio_json(m.precision)},
                      {"recall", ratio_json(m.recall)},
                      {"f1", ratio_json(m.f1)},
                      {"support", m.support}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw IoError("cannot create directory " + dir.string() +
                  (ec ? ": " + ec.message() : std::string()));
  }
}

}  // namespace

MetricsReport metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw InputError("metrics: confusion matrix is empty");
  MetricsReport report;
  report.matrix = cm;
  report.accuracy = {cm.tp + cm.tn, cm.total()};
  report.infected = class_metrics(Label::infected, cm.tp, cm.fp, cm.fn, report.annotations);
  report.notinfected = class_metrics(Label::notinfected, cm.tn, cm.fn, cm.fp, report.annotations);
  report.macro_f1 = (report.infected.f1.value() + report.notinfected.f1.value()) / 2.0;
  return report;
}

std::string metrics_json(const MetricsReport& r) {
  const auto& cm = r.matrix;
  ordered_json doc;
  doc["positive_class"] = "infected";
  doc["confusion_matrix"] = {{"tp", cm.tp}, {"fp", cm.fp}, {"fn", cm.fn}, {"tn", cm.tn}};
  doc["total"] = cm.total();
  doc["accuracy"] = ratio_json(r.accuracy);
  doc["macro_f1"] = r.macro_f1;
  doc["classes"] = {{"infected", class_json(r.infected)},
                    {"notinfected", class_json(r.notinfected)}};
  doc["annotations"] = r.annotations;
  return doc.dump(2) + "\n";
}

std::string metrics_csv(const MetricsReport& r) {
  std::string out = "metric,class,value\n";
  out += fmt::format("accuracy,all,{}\n", r.accuracy.value());
  out += fmt::format("macro_f1,all,{}\n", r.macro_f1);
  for (const ClassMetrics* m : {&r.infected, &r.notinfected}) {
    const auto name = to_string(m->label);
    out += fmt::format("precision,{},{}\n", name, m->precision.value());
    out += fmt::format("recall,{},{}\n", name, m->recall.value());
    out += fmt::format("f1,{},{}\n", name, m->f1.value());
    out += fmt::format("support,{},{}\n", name, m->support);
  }
  return out;
}

MetricsFiles write_metrics(const MetricsReport& report, const fs::path& out_dir,
                           const std::string& prefix, const std::string& title) {
  ensure_dir(out_dir);
  MetricsFiles files{out_dir / (prefix + ".json"), out_dir / (prefix + ".csv"),
                     out_dir / (prefix + "_confusion.png")};
  write_text(files.json, metrics_json(report));
  write_text(files.csv, metrics_csv(report));
  const auto& cm = report.matrix;
  plot::confusion_heatmap(files.confusion_png, title, {{{cm.tp, cm.fn}, {cm.fp, cm.tn}}},
                          {"infected", "notinfected"});
  return files;
}

CurveFiles render_curves(const fs::path& table, const fs::path& out_dir) {
  const auto rows = model::read_history_csv(table);
  if (rows.empty()) throw InputError(table.string() + ": history has no rows");
  ensure_dir(out_dir);
  std::vector<double> train_acc, val_acc, train_loss, val_loss;
  for (const auto& r : rows) {
    train_acc.push_back(r.train_accuracy);
    val_acc.push_back(r.val_accuracy);
    train_loss.push_back(r.train_loss);
    val_loss.push_back(r.val_loss);
  }
  constexpr plot::Rgb kTrain{31, 119, 180};
  constexpr plot::Rgb kVal{255, 127, 14};
  CurveFiles files{table, out_dir / "accuracy.png", out_dir / "loss.png"};
  plot::line_chart(files.accuracy_plot, "Accuracy for training and validation", "accuracy",
                   {{"train", train_acc, kTrain}, {"validation", val_acc, kVal}});
  plot::line_chart(files.loss_plot, "Loss for training and validation", "loss",
                   {{"train", train_loss, kTrain}, {"validation", val_loss, kVal}});
  return files;
}

CurveFiles export_curves(const model::TrainingHistory& history, const fs::path& out_dir) {
  if (history.epochs.empty()) throw InputError("export_curves: history is empty");
  ensure_dir(out_dir);
  const fs::path table = out_dir / "history.csv";
  model::write_history_csv(table, history);
  return render_curves(table, out_dir);
}

}  // namespace pcos::eval
