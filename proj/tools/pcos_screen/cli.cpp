#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <random>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "pcos/augment.hpp"
#include "pcos/dataset.hpp"
#include "pcos/errors.hpp"
#include "pcos/eval.hpp"
#include "pcos/explain.hpp"
#include "pcos/model.hpp"
#include "pcos/runtime.hpp"
#include "pcos/train.hpp"
#include "run_config.hpp"

namespace pcos::cli {

namespace fs = std::filesystem;

namespace {

/// Flags shared by every subcommand; each overrides the config file.
struct Overrides {
  std::string config;
  std::string data_root;
  std::string out_root;
  std::string manifest;
  std::string backbone;
  std::string weights_dir;
  std::optional<int> input_size;
  std::optional<int> batch_size;
  std::optional<int> max_epochs;
  std::optional<int> patience;
  std::optional<double> learning_rate;
  std::optional<double> mixup_alpha;
  std::optional<double> cutmix_alpha;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> split_seed;
  bool deterministic = false;
};

void add_common(CLI::App& app, Overrides& o) {
  app.add_option("--config", o.config, "JSON run configuration");
  app.add_option("--data-root", o.data_root, "dataset root with infected/ and notinfected/");
  app.add_option("--out-root", o.out_root, "parent directory for outputs");
  app.add_option("--manifest", o.manifest, "manifest produced by ingest");
  app.add_option("--backbone", o.backbone, "densenet201 | resnet50 | tiny_test");
  app.add_option("--weights-dir", o.weights_dir, "directory holding <backbone>.pcosw");
  app.add_option("--input-size", o.input_size, "model input size in pixels");
  app.add_option("--batch-size", o.batch_size);
  app.add_option("--max-epochs", o.max_epochs);
  app.add_option("--patience", o.patience);
  app.add_option("--lr", o.learning_rate, "learning rate");
  app.add_option("--mixup-alpha", o.mixup_alpha);
  app.add_option("--cutmix-alpha", o.cutmix_alpha);
  app.add_option("--seed", o.seed, "training seed");
  app.add_option("--split-seed", o.split_seed);
  app.add_flag("--deterministic", o.deterministic, "pin thread pools for bit-reproducible runs");
}

RunConfig resolve(const Overrides& o) {
  RunConfig c = default_config();
  if (!o.config.empty()) c = load_config_file(o.config, c);
  if (!o.data_root.empty()) c.data_root = o.data_root;
  if (!o.out_root.empty()) c.out_root = o.out_root;
  if (!o.manifest.empty()) c.manifest = fs::path(o.manifest);
  if (!o.backbone.empty()) {
    const auto kind = model::parse_backbone_kind(o.backbone);
    if (!kind) {
      throw ConfigError("--backbone must be one of densenet201, resnet50, tiny_test (got '" +
                        o.backbone + "')");
    }
    c.backbone.kind = *kind;
    const auto defaults = model::TrainConfig::for_backbone(*kind);
    c.train.max_epochs = defaults.max_epochs;
    c.train.patience = defaults.patience;
  }
  if (!o.weights_dir.empty()) c.weights_dir = fs::path(o.weights_dir);
  if (o.input_size) c.backbone.input_size = *o.input_size;
  c.preprocess.target_size = c.backbone.input_size;
  if (o.batch_size) c.train.batch_size = *o.batch_size;
  if (o.max_epochs) c.train.max_epochs = *o.max_epochs;
  if (o.patience) c.train.patience = *o.patience;
  if (o.learning_rate) c.train.learning_rate = *o.learning_rate;
  if (o.mixup_alpha) c.train.mixup_alpha = *o.mixup_alpha;
  if (o.cutmix_alpha) c.train.cutmix_alpha = *o.cutmix_alpha;
  if (o.seed) c.train.seed = *o.seed;
  if (o.split_seed) c.split.seed = *o.split_seed;
  c.deterministic = c.deterministic || o.deterministic;

  if (const char* env = std::getenv(model::kWeightsDirEnv); env != nullptr && *env != '\0') {
    c.weights_dir_env = env;
    if (!c.weights_dir) c.weights_dir = fs::path(env);
  }
  c.validate();
  set_deterministic(c.deterministic);
  return c;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

void write_snapshot(const fs::path& path, const RunConfig& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json(c).dump(2) << '\n';
}

/// Manifest from the config (splitting it when unassigned) or from scanning
/// data_root.
dataset::DatasetManifest load_split_manifest(const RunConfig& c, std::ostream& out) {
  dataset::DatasetManifest manifest;
  if (c.manifest) {
    manifest = dataset::read_manifest(*c.manifest);
  } else {
    if (c.data_root.empty()) throw ConfigError("no data: set data_root (or --data-root) or --manifest");
    const auto deduped = dataset::dedup(dataset::scan_dataset(c.data_root));
    if (deduped.removed > 0) out << fmt::format("duplicates removed: {}\n", deduped.removed);
    manifest = deduped.manifest;
  }
  if (!manifest.has_split()) manifest = dataset::split(manifest, c.split);
  return manifest;
}

struct Splits {
  dataset::ManifestSource train;
  dataset::ManifestSource val;
  dataset::ManifestSource test;
};

Splits load_splits(const dataset::DatasetManifest& manifest, const dataset::PreprocessConfig& pre) {
  using dataset::Split;
  for (Split s : {Split::train, Split::val, Split::test}) {
    if (manifest.indices(s).empty()) {
      throw ConfigError(fmt::format("the {} split is empty", dataset::to_string(s)));
    }
  }
  return {dataset::ManifestSource(manifest, Split::train, pre, true),
          dataset::ManifestSource(manifest, Split::val, pre, true),
          dataset::ManifestSource(manifest, Split::test, pre, true)};
}

void print_metrics(std::ostream& out, const eval::MetricsReport& r) {
  out << fmt::format("accuracy: {}\n", r.accuracy.value());
  for (const eval::ClassMetrics* m : {&r.infected, &r.notinfected}) {
    const auto name = to_string(m->label);
    out << fmt::format("{} precision: {}\n", name, m->precision.value());
    out << fmt::format("{} recall: {}\n", name, m->recall.value());
    out << fmt::format("{} f1: {}\n", name, m->f1.value());
  }
  out << fmt::format("macro_f1: {}\n", r.macro_f1);
  for (const auto& note : r.annotations) out << "note: " << note << '\n';
}

eval::MetricsReport score(const model::ModelHandle& handle, const dataset::ImageSource& source,
                          std::size_t batch_size) {
  const auto ev = model::evaluate(handle, source, batch_size);
  return eval::metrics(eval::confusion(ev.labels, ev.probabilities));
}

int cmd_ingest(const Overrides& o, const std::string& manifest_out, bool with_split,
               std::ostream& out) {
  const RunConfig c = resolve(o);
  if (c.data_root.empty()) throw ConfigError("ingest needs data_root (or --data-root)");
  const auto scanned = dataset::scan_dataset(c.data_root);
  auto [manifest, removed] = dataset::dedup(scanned);
  if (with_split) manifest = dataset::split(manifest, c.split);
  const fs::path path = manifest_out.empty() ? c.out_root / "manifest.jsonl" : fs::path(manifest_out);
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  dataset::write_manifest(path, manifest);

  const auto counts = manifest.class_counts();
  out << fmt::format("records: {}\n", manifest.records.size());
  for (Label label : {Label::infected, Label::notinfected}) {
    const auto it = counts.find(label);
    out << fmt::format("{}: {}\n", to_string(label), it == counts.end() ? 0 : it->second);
  }
  out << fmt::format("duplicates removed: {}\n", removed);
  out << fmt::format("skipped: {}\n", manifest.skipped.size());
  for (const auto& s : manifest.skipped) out << fmt::format("  {}: {}\n", s.path.string(), s.reason);
  if (with_split) {
    using dataset::Split;
    out << fmt::format("split train/val/test: {}/{}/{}\n", manifest.indices(Split::train).size(),
                       manifest.indices(Split::val).size(), manifest.indices(Split::test).size());
  }
  out << "manifest: " << path.string() << '\n';
  return kExitOk;
}

int cmd_train(const Overrides& o, const std::string& run_dir_flag, std::ostream& out) {
  const RunConfig c = resolve(o);
  const fs::path run_dir =
      run_dir_flag.empty() ? c.out_root / ("train-" + config_digest(c)) : fs::path(run_dir_flag);
  ensure_dir(run_dir);
  write_snapshot(run_dir / "config.json", c);

  const auto manifest = load_split_manifest(c, out);
  Splits splits = load_splits(manifest, c.preprocess);
  auto handle = model::build_model(c.backbone, c.train.seed, c.weights_dir);
  handle.set_preprocess(c.preprocess);
  dataset::write_manifest(run_dir / "manifest.jsonl", manifest);

  out << fmt::format("run_dir: {}\n", run_dir.string());
  out << fmt::format("train/val/test: {}/{}/{}\n", splits.train.size(), splits.val.size(),
                     splits.test.size());
  const auto result = model::train(handle, splits.train, splits.val, c.train, run_dir,
                                   [&out](const model::EpochRecord& r) {
                                     out << fmt::format(
                                         "epoch {}: train_loss={:.6f} train_acc={:.4f} "
                                         "val_loss={:.6f} val_acc={:.4f}\n",
                                         r.epoch, r.train_loss, r.train_accuracy, r.val_loss,
                                         r.val_accuracy);
                                     out.flush();
                                   });
  const auto& history = result.history;
  out << fmt::format("best_epoch: {}\nstopped_early: {}\n", history.best_epoch,
                     history.stopped_early);

  eval::render_curves(run_dir / "history.csv", run_dir / "plots");
  const auto best = model::load_checkpoint(result.checkpoint);
  const auto report = score(best, splits.test, static_cast<std::size_t>(c.train.batch_size));
  eval::write_metrics(report, run_dir / "metrics", "test_metrics", "Confusion matrix (test)");
  out << "test metrics:\n";
  print_metrics(out, report);
  out << fmt::format("checkpoint: {}\n", result.checkpoint.string());
  return kExitOk;
}

int cmd_sweep(const Overrides& o, const std::string& grid_path, const std::string& out_flag,
              std::ostream& out, std::ostream& err) {
  const RunConfig c = resolve(o);
  const auto grid = eval::read_grid(grid_path);
  const fs::path root =
      out_flag.empty() ? c.out_root / ("sweep-" + config_digest(c)) : fs::path(out_flag);
  ensure_dir(root);
  write_snapshot(root / "config.json", c);

  const auto manifest = load_split_manifest(c, out);
  Splits splits = load_splits(manifest, c.preprocess);
  dataset::write_manifest(root / "manifest.jsonl", manifest);

  eval::SweepInputs inputs{c.backbone, c.weights_dir, c.preprocess, &splits.train, &splits.val};
  const auto report = eval::sweep(grid, c.train, inputs, root);
  out << eval::kSweepHeader << '\n';
  for (const auto& r : report.rows) {
    if (r.ok) {
      out << fmt::format("{},{},{},{},{}\n", r.mixup_alpha, r.cutmix_alpha, r.val_accuracy,
                         r.val_loss, r.run_dir.string());
    } else {
      out << fmt::format("{},{},failed,failed,{}\n", r.mixup_alpha, r.cutmix_alpha,
                         r.run_dir.string());
      err << fmt::format("sweep row ({}, {}) failed: {}\n", r.mixup_alpha, r.cutmix_alpha, r.error);
    }
  }
  out << "report: " << (root / "sweep_report.csv").string() << '\n';
  return report.all_ok() ? kExitOk : kExitRuntime;
}

int cmd_evaluate(const Overrides& o, const std::string& checkpoint, const std::string& split_name,
                 const std::string& out_flag, std::ostream& out) {
  const RunConfig c = resolve(o);
  const auto which = dataset::parse_split(split_name);
  if (!which) throw ConfigError("--split must be train, val or test (got '" + split_name + "')");
  if (!c.manifest) throw ConfigError("evaluate needs --manifest");
  const auto manifest = dataset::read_manifest(*c.manifest);
  if (manifest.indices(*which).empty()) {
    throw ConfigError(fmt::format("the {} split of {} is empty", split_name, c.manifest->string()));
  }
  const auto handle = model::load_checkpoint(checkpoint);
  const dataset::ManifestSource source(manifest, *which, handle.preprocess(), false);
  const auto report = score(handle, source, static_cast<std::size_t>(c.train.batch_size));
  const fs::path dir = out_flag.empty() ? c.out_root / "evaluate" : fs::path(out_flag);
  const auto files = eval::write_metrics(report, dir, split_name + "_metrics",
                                         "Confusion matrix (" + split_name + ")");
  print_metrics(out, report);
  out << "report: " << files.json.string() << '\n';
  return kExitOk;
}

struct ExplainArgs {
  std::string checkpoint;
  std::string image;
  std::string method;
  std::string out;
  std::optional<int> segments;
  std::optional<std::size_t> samples;
  std::optional<std::uint64_t> lime_seed;
  std::string layer;
};

int cmd_explain(const Overrides& o, const ExplainArgs& a, std::ostream& out) {
  const auto method = explain::parse_method(a.method);
  if (!method) {
    throw ConfigError("--method must be one of gradcam, lime, shapley (got '" + a.method + "')");
  }
  RunConfig c = resolve(o);
  if (a.segments) c.explain.n_segments = *a.segments;
  if (a.samples) c.explain.lime_samples = *a.samples;
  if (a.lime_seed) c.explain.lime_seed = *a.lime_seed;
  if (!a.layer.empty()) c.explain.layer = a.layer;
  c.validate();
  if (*method == explain::Method::shapley && c.explain.n_segments > explain::kMaxShapleySegments) {
    throw ParameterError(fmt::format(
        "shapley enumerates 2^n coalitions and is capped at {} segments (got {}); lower "
        "--segments or use --method lime",
        explain::kMaxShapleySegments, c.explain.n_segments));
  }
  if (*method == explain::Method::lime &&
      c.explain.lime_samples < static_cast<std::size_t>(c.explain.n_segments) + 1) {
    throw ParameterError("--samples must be at least segments + 1");
  }

  const auto handle = model::load_checkpoint(a.checkpoint);
  const auto raw = decode_image(a.image);
  if (!raw) throw InvalidImageError("cannot decode image '" + a.image + "'");
  const Image input = dataset::preprocess(*raw, handle.preprocess());
  auto display_config = handle.preprocess();
  display_config.standardize = false;
  const Image display = dataset::preprocess(*raw, display_config);

  const fs::path dir = a.out.empty() ? c.out_root / "explanations" : fs::path(a.out);
  const std::string base = fs::path(a.image).stem().string() + "." + a.method;
  const double probability = model::predict(handle, std::span(&input, 1)).front();

  explain::Heatmap heat;
  std::optional<explain::Attribution> attribution;
  if (*method == explain::Method::gradcam) {
    heat = explain::grad_cam(handle, input, c.explain.layer);
  } else {
    const auto seg = explain::segment_grid(input.height, input.width, c.explain.n_segments);
    if (*method == explain::Method::lime) {
      explain::LimeConfig lime{c.explain.lime_samples, c.explain.lime_seed, c.explain.kernel_width};
      attribution = explain::lime_explain(handle, input, seg, lime, c.explain.fill);
    } else {
      attribution = explain::shapley_explain(handle, input, seg, c.explain.fill);
    }
    heat = explain::attribution_heatmap(*attribution, seg);
  }

  ensure_dir(dir);
  const auto files = explain::render_overlay(display, heat, dir / (base + ".overlay.png"),
                                             dir / (base + ".raw.png"));
  out << fmt::format("infected probability: {}\n", probability);
  out << "overlay: " << files.overlay.string() << '\n';
  out << "raw: " << files.raw.string() << '\n';
  if (attribution) {
    const fs::path weights = dir / (base + ".weights.csv");
    explain::write_weights(weights, *attribution);
    out << "weights: " << weights.string() << '\n';
  }
  return kExitOk;
}

int cmd_augment_preview(const Overrides& o, std::size_t count, const std::string& out_flag,
                        std::ostream& out) {
  const RunConfig c = resolve(o);
  if (count < 2) throw ConfigError("--count must be at least 2");
  dataset::DatasetManifest manifest;
  if (c.manifest) {
    manifest = dataset::read_manifest(*c.manifest);
  } else {
    if (c.data_root.empty()) throw ConfigError("augment-preview needs --data-root or --manifest");
    manifest = dataset::dedup(dataset::scan_dataset(c.data_root)).manifest;
  }
  if (manifest.records.size() < 2) throw ConfigError("augment-preview needs at least 2 images");

  std::mt19937_64 rng(c.train.seed);
  std::vector<std::size_t> order(manifest.records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(count, order.size()));

  auto display = c.preprocess;
  display.standardize = false;
  std::vector<dataset::LabeledImage> batch;
  for (std::size_t i : order) {
    const auto& record = manifest.records[i];
    const auto raw = decode_image(record.source_path);
    if (!raw) throw InvalidImageError("cannot decode '" + record.source_path.string() + "'");
    batch.push_back({dataset::preprocess(*raw, display), record.label, record.id});
  }
  const auto mixed = augment::augment_batch(batch, c.train.mixup_alpha, c.train.cutmix_alpha, rng);

  const fs::path dir = out_flag.empty() ? c.out_root / "augment-preview" : fs::path(out_flag);
  ensure_dir(dir);
  std::ofstream sidecar(dir / "preview.txt", std::ios::binary);
  if (!sidecar) throw IoError("cannot write " + (dir / "preview.txt").string());
  sidecar << "index,id,label,method,lambda,partner_id,soft_label\n";
  for (std::size_t i = 0; i < mixed.size(); ++i) {
    write_png(dir / fmt::format("sample_{:02}_before.png", i), batch[i].image);
    write_png(dir / fmt::format("sample_{:02}_after.png", i), mixed[i].image);
    sidecar << fmt::format("{},{},{},{},{},{},{}\n", i, batch[i].id, to_string(batch[i].label),
                           augment::to_string(mixed[i].method), mixed[i].lambda_effective,
                           mixed[i].partner_id, mixed[i].soft_label);
  }
  out << fmt::format("wrote {} before/after pairs to {}\n", mixed.size(), dir.string());
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Ovarian ultrasound PCOS screening: ingest, train, evaluate and explain",
               "pcos-screen"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "pcos-screen 0.1.0");

  Overrides o;
  std::function<int()> action;

  auto* ingest = app.add_subcommand("ingest", "scan, deduplicate and catalog a dataset");
  add_common(*ingest, o);
  std::string manifest_out;
  bool with_split = false;
  ingest->add_option("--output", manifest_out, "manifest path (default <out_root>/manifest.jsonl)");
  ingest->add_flag("--with-split", with_split, "also assign train/val/test splits");
  ingest->callback([&] { action = [&] { return cmd_ingest(o, manifest_out, with_split, out); }; });

  auto* train = app.add_subcommand("train", "split, train, and evaluate on the test split");
  add_common(*train, o);
  std::string run_dir;
  train->add_option("--run-dir", run_dir, "run directory (default <out_root>/train-<digest>)");
  train->callback([&] { action = [&] { return cmd_train(o, run_dir, out); }; });

  auto* sweep = app.add_subcommand("sweep", "train once per (mixup_alpha, cutmix_alpha) pair");
  add_common(*sweep, o);
  std::string grid;
  std::string sweep_out;
  sweep->add_option("--grid", grid, "file with one 'mixup_alpha,cutmix_alpha' pair per line")
      ->required();
  sweep->add_option("--out", sweep_out, "sweep directory (default <out_root>/sweep-<digest>)");
  sweep->callback([&] { action = [&] { return cmd_sweep(o, grid, sweep_out, out, err); }; });

  auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint on a manifest split");
  add_common(*evaluate, o);
  std::string checkpoint;
  std::string split_name = "test";
  std::string eval_out;
  evaluate->add_option("--checkpoint", checkpoint)->required();
  evaluate->add_option("--split", split_name, "train | val | test");
  evaluate->add_option("--out", eval_out, "report directory (default <out_root>/evaluate)");
  evaluate->callback(
      [&] { action = [&] { return cmd_evaluate(o, checkpoint, split_name, eval_out, out); }; });

  auto* explain_cmd = app.add_subcommand("explain", "attribute one prediction");
  add_common(*explain_cmd, o);
  ExplainArgs ea;
  explain_cmd->add_option("--checkpoint", ea.checkpoint)->required();
  explain_cmd->add_option("--image", ea.image)->required();
  explain_cmd->add_option("--method", ea.method, "gradcam | lime | shapley")->required();
  explain_cmd->add_option("--out", ea.out, "output directory");
  explain_cmd->add_option("--segments", ea.segments, "grid superpixels (lime, shapley)");
  explain_cmd->add_option("--samples", ea.samples, "LIME perturbation count");
  explain_cmd->add_option("--lime-seed", ea.lime_seed);
  explain_cmd->add_option("--layer", ea.layer, "Grad-CAM layer (default: last feature map)");
  explain_cmd->callback([&] { action = [&] { return cmd_explain(o, ea, out); }; });

  auto* preview = app.add_subcommand("augment-preview", "write before/after MixUp/CutMix pairs");
  add_common(*preview, o);
  std::size_t count = 8;
  std::string preview_out;
  preview->add_option("--count", count, "number of images in the preview batch");
  preview->add_option("--out", preview_out, "output directory");
  preview->callback(
      [&] { action = [&] { return cmd_augment_preview(o, count, preview_out, out); }; });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    return action ? action() : kExitUsage;
  } catch (const TrainingDivergedError& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace pcos::cli
