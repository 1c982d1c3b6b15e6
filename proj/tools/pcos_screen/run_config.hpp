#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "pcos/dataset.hpp"
#include "pcos/model.hpp"
#include "pcos/train.hpp"

namespace pcos::cli {

struct ExplainDefaults {
  int n_segments = 16;
  std::size_t lime_samples = 1000;
  std::uint64_t lime_seed = 0;
  double kernel_width = 0.25;
  std::optional<double> fill;  ///< empty: per-channel image mean
  std::string layer;           ///< empty: the backbone's feature layer
};

/// Everything a command needs, fully resolved before work starts.
struct RunConfig {
  std::filesystem::path data_root;
  std::filesystem::path out_root = "runs";
  std::optional<std::filesystem::path> manifest;
  model::BackboneSpec backbone;
  std::optional<std::filesystem::path> weights_dir;
  /// Value of PCOS_WEIGHTS_DIR observed at startup, recorded in the snapshot.
  std::optional<std::string> weights_dir_env;
  dataset::PreprocessConfig preprocess;
  model::TrainConfig train;
  dataset::SplitSpec split;
  ExplainDefaults explain;
  bool deterministic = false;

  void validate() const;
};

/// Defaults with tiny_test epochs when no backbone is named.
RunConfig default_config();

/// Applies a JSON document on top of `base`. Unknown keys and wrongly typed
/// values throw ConfigError naming the key.
RunConfig apply_json(RunConfig base, const nlohmann::json& doc);
RunConfig load_config_file(const std::filesystem::path& path, RunConfig base);

/// Resolved snapshot with a fixed key order. Includes the environment
/// variables that were consulted.
nlohmann::ordered_json to_json(const RunConfig& config);

/// First 12 hex digits of the snapshot's SHA-256.
std::string config_digest(const RunConfig& config);

}  // namespace pcos::cli
