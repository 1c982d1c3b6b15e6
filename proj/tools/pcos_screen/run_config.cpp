#include "run_config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <fmt/format.h>

#include "pcos/errors.hpp"
#include "pcos/hash.hpp"

namespace pcos::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

void RunConfig::validate() const {
  backbone.validate();
  train.validate();
  split.validate();
  if (preprocess.target_size != backbone.input_size) {
    throw ConfigError("preprocess target size must equal backbone.input_size");
  }
  if (preprocess.rescale_divisor < 0.0) throw ConfigError("preprocess.rescale_divisor must be >= 0");
  for (double s : preprocess.stddev) {
    if (!(s > 0.0)) throw ConfigError("preprocess.std entries must be positive");
  }
  if (explain.n_segments < 1) throw ConfigError("explain.n_segments must be >= 1");
  if (!(explain.kernel_width > 0.0)) throw ConfigError("explain.kernel_width must be positive");
  if (backbone.pretrained && backbone.kind != model::BackboneKind::tiny_test &&
      !weights_dir) {
    throw ConfigError(fmt::format(
        "backbone.pretrained is set but no weights directory is configured; set "
        "backbone.weights_dir or {}",
        model::kWeightsDirEnv));
  }
}

RunConfig default_config() {
  RunConfig config;
  config.backbone.kind = model::BackboneKind::tiny_test;
  const auto defaults = model::TrainConfig::for_backbone(config.backbone.kind);
  config.train.max_epochs = defaults.max_epochs;
  config.train.patience = defaults.patience;
  return config;
}

namespace {

void check_keys(const json& block, const std::string& where, const std::set<std::string>& allowed) {
  if (!block.is_object()) throw ConfigError(fmt::format("config: '{}' must be an object", where));
  for (const auto& [key, value] : block.items()) {
    if (!allowed.contains(key)) {
      std::string names;
      for (const auto& a : allowed) names += (names.empty() ? "" : ", ") + a;
      throw ConfigError(fmt::format("config: unknown key '{}{}' (allowed: {})",
                                    where.empty() ? "" : where + ".", key, names));
    }
  }
}

template <typename T>
void read(const json& block, const std::string& where, const char* key, T& out) {
  if (!block.contains(key)) return;
  const json& value = block.at(key);
  const std::string name = where.empty() ? key : where + "." + key;
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!value.is_boolean()) throw ConfigError("expected a boolean");
      out = value.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!value.is_number_integer()) throw ConfigError("expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (value.is_number_unsigned() || value.get<long long>() >= 0) {
          out = value.get<T>();
        } else {
          throw ConfigError("expected a non-negative integer");
        }
      } else {
        out = value.get<T>();
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!value.is_number()) throw ConfigError("expected a number");
      out = value.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!value.is_string()) throw ConfigError("expected a string");
      out = value.get<std::string>();
    } else if constexpr (std::is_same_v<T, fs::path>) {
      if (!value.is_string()) throw ConfigError("expected a path string");
      out = fs::path(value.get<std::string>());
    }
  } catch (const ConfigError& e) {
    throw ConfigError(fmt::format("config: '{}': {}", name, e.what()));
  }
}

void read_optional_path(const json& block, const std::string& where, const char* key,
                        std::optional<fs::path>& out) {
  if (!block.contains(key)) return;
  if (block.at(key).is_null()) {
    out.reset();
    return;
  }
  fs::path p;
  read(block, where, key, p);
  out = p;
}

void require_literal(const json& block, const std::string& where, const char* key,
                     const char* only) {
  if (!block.contains(key)) return;
  std::string v;
  read(block, where, key, v);
  if (v != only) {
    throw ConfigError(fmt::format("config: '{}.{}' must be \"{}\"", where, key, only));
  }
}

void read_triple(const json& block, const std::string& where, const char* key,
                 std::array<double, 3>& out) {
  if (!block.contains(key)) return;
  const json& v = block.at(key);
  if (!v.is_array() || v.size() != 3 ||
      !std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_number(); })) {
    throw ConfigError(fmt::format("config: '{}.{}' must be an array of 3 numbers", where, key));
  }
  for (std::size_t i = 0; i < 3; ++i) out[i] = v[i].get<double>();
}

}  // namespace

RunConfig apply_json(RunConfig c, const json& doc) {
  check_keys(doc, "", {"data_root", "out_root", "manifest", "deterministic", "backbone",
                       "preprocess", "train", "augmentation", "split", "explain",
                       "environment"});
  // Snapshots record the environment they were resolved under; it is
  // informational and already folded into backbone.weights_dir.
  if (doc.contains("environment")) {
    check_keys(doc.at("environment"), "environment", {model::kWeightsDirEnv});
  }
  read(doc, "", "data_root", c.data_root);
  read(doc, "", "out_root", c.out_root);
  read_optional_path(doc, "", "manifest", c.manifest);
  read(doc, "", "deterministic", c.deterministic);

  if (doc.contains("backbone")) {
    const json& b = doc.at("backbone");
    check_keys(b, "backbone", {"kind", "pretrained", "input_size", "dropout", "weights_dir"});
    if (b.contains("kind")) {
      std::string kind;
      read(b, "backbone", "kind", kind);
      const auto parsed = model::parse_backbone_kind(kind);
      if (!parsed) {
        throw ConfigError(fmt::format(
            "config: 'backbone.kind' must be one of densenet201, resnet50, tiny_test (got '{}')",
            kind));
      }
      c.backbone.kind = *parsed;
      // Per-backbone epoch budget unless the train block overrides it.
      const auto defaults = model::TrainConfig::for_backbone(*parsed);
      c.train.max_epochs = defaults.max_epochs;
      c.train.patience = defaults.patience;
    }
    read(b, "backbone", "pretrained", c.backbone.pretrained);
    read(b, "backbone", "input_size", c.backbone.input_size);
    read(b, "backbone", "dropout", c.backbone.dropout);
    read_optional_path(b, "backbone", "weights_dir", c.weights_dir);
  }
  c.preprocess.target_size = c.backbone.input_size;

  if (doc.contains("preprocess")) {
    const json& p = doc.at("preprocess");
    check_keys(p, "preprocess", {"standardize", "rescale_divisor", "mean", "std"});
    read(p, "preprocess", "standardize", c.preprocess.standardize);
    read(p, "preprocess", "rescale_divisor", c.preprocess.rescale_divisor);
    read_triple(p, "preprocess", "mean", c.preprocess.mean);
    read_triple(p, "preprocess", "std", c.preprocess.stddev);
  }

  if (doc.contains("train")) {
    const json& t = doc.at("train");
    check_keys(t, "train", {"batch_size", "learning_rate", "optimizer", "loss", "max_epochs",
                            "patience", "monitor", "seed", "freeze_backbone"});
    read(t, "train", "batch_size", c.train.batch_size);
    read(t, "train", "learning_rate", c.train.learning_rate);
    require_literal(t, "train", "optimizer", "adam");
    require_literal(t, "train", "loss", "binary_cross_entropy");
    require_literal(t, "train", "monitor", "val_loss");
    read(t, "train", "max_epochs", c.train.max_epochs);
    read(t, "train", "patience", c.train.patience);
    read(t, "train", "seed", c.train.seed);
    read(t, "train", "freeze_backbone", c.train.freeze_backbone);
  }

  if (doc.contains("augmentation")) {
    const json& a = doc.at("augmentation");
    check_keys(a, "augmentation", {"mixup_alpha", "cutmix_alpha"});
    read(a, "augmentation", "mixup_alpha", c.train.mixup_alpha);
    read(a, "augmentation", "cutmix_alpha", c.train.cutmix_alpha);
  }

  if (doc.contains("split")) {
    const json& s = doc.at("split");
    check_keys(s, "split", {"train_fraction", "val_fraction", "test_fraction", "seed", "stratified"});
    read(s, "split", "train_fraction", c.split.train_fraction);
    read(s, "split", "val_fraction", c.split.val_fraction);
    read(s, "split", "test_fraction", c.split.test_fraction);
    read(s, "split", "seed", c.split.seed);
    read(s, "split", "stratified", c.split.stratified);
  }

  if (doc.contains("explain")) {
    const json& e = doc.at("explain");
    check_keys(e, "explain", {"n_segments", "lime_samples", "lime_seed", "kernel_width", "fill",
                              "layer"});
    read(e, "explain", "n_segments", c.explain.n_segments);
    read(e, "explain", "lime_samples", c.explain.lime_samples);
    read(e, "explain", "lime_seed", c.explain.lime_seed);
    read(e, "explain", "kernel_width", c.explain.kernel_width);
    read(e, "explain", "layer", c.explain.layer);
    if (e.contains("fill")) {
      const json& f = e.at("fill");
      if (f.is_string() && f.get<std::string>() == "mean") {
        c.explain.fill.reset();
      } else if (f.is_number()) {
        c.explain.fill = f.get<double>();
      } else {
        throw ConfigError("config: 'explain.fill' must be \"mean\" or a number");
      }
    }
  }
  return c;
}

RunConfig load_config_file(const fs::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("config file {}: {}", path.string(), e.what()));
  }
  return apply_json(std::move(base), doc);
}

ordered_json to_json(const RunConfig& c) {
  auto opt_path = [](const std::optional<fs::path>& p) {
    return p ? ordered_json(p->generic_string()) : ordered_json(nullptr);
  };
  ordered_json doc;
  doc["data_root"] = c.data_root.generic_string();
  doc["out_root"] = c.out_root.generic_string();
  doc["manifest"] = opt_path(c.manifest);
  doc["deterministic"] = c.deterministic;
  doc["backbone"] = {{"kind", std::string(model::to_string(c.backbone.kind))},
                     {"pretrained", c.backbone.pretrained},
                     {"input_size", c.backbone.input_size},
                     {"dropout", c.backbone.dropout},
                     {"weights_dir", opt_path(c.weights_dir)}};
  doc["preprocess"] = {{"standardize", c.preprocess.standardize},
                       {"rescale_divisor", c.preprocess.rescale_divisor},
                       {"mean", c.preprocess.mean},
                       {"std", c.preprocess.stddev}};
  doc["train"] = {{"batch_size", c.train.batch_size},
                  {"learning_rate", c.train.learning_rate},
                  {"optimizer", "adam"},
                  {"loss", "binary_cross_entropy"},
                  {"max_epochs", c.train.max_epochs},
                  {"patience", c.train.patience},
                  {"monitor", "val_loss"},
                  {"seed", c.train.seed},
                  {"freeze_backbone", c.train.freeze_backbone}};
  doc["augmentation"] = {{"mixup_alpha", c.train.mixup_alpha},
                         {"cutmix_alpha", c.train.cutmix_alpha}};
  doc["split"] = {{"train_fraction", c.split.train_fraction},
                  {"val_fraction", c.split.val_fraction},
                  {"test_fraction", c.split.test_fraction},
                  {"seed", c.split.seed},
                  {"stratified", c.split.stratified}};
  doc["explain"] = {{"n_segments", c.explain.n_segments},
                    {"lime_samples", c.explain.lime_samples},
                    {"lime_seed", c.explain.lime_seed},
                    {"kernel_width", c.explain.kernel_width},
                    {"fill", c.explain.fill ? ordered_json(*c.explain.fill) : ordered_json("mean")},
                    {"layer", c.explain.layer}};
  doc["environment"] = {{model::kWeightsDirEnv, c.weights_dir_env
                                                    ? ordered_json(*c.weights_dir_env)
                                                    : ordered_json(nullptr)}};
  return doc;
}

std::string config_digest(const RunConfig& config) {
  ordered_json doc = to_json(config);
  // The digest names a run by what it computes, not where it writes.
  doc.erase("out_root");
  doc.erase("explain");
  return sha256_hex(doc.dump()).substr(0, 12);
}

}  // namespace pcos::cli
