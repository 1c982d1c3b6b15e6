#include "pcos/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pcos/errors.hpp"
#include "pcos/hash.hpp"

namespace pcos::dataset {

namespace fs = std::filesystem;

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::optional<Split> parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  return std::nullopt;
}

std::map<Label, std::size_t> DatasetManifest::class_counts() const {
  std::map<Label, std::size_t> counts{{Label::infected, 0}, {Label::notinfected, 0}};
  for (const auto& record : records) ++counts[record.label];
  return counts;
}

std::vector<std::size_t> DatasetManifest::indices(Split which) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto it = split_assignment.find(records[i].id);
    if (it != split_assignment.end() && it->second == which) out.push_back(i);
  }
  return out;
}

std::string content_id(const RawImage& image) {
  std::ostringstream header;
  header << image.height << 'x' << image.width << 'x' << image.channels << '/' << image.max_value
         << ':';
  const std::string prefix = header.str();
  std::vector<std::byte> bytes(prefix.size() + image.pixels.size() * 2);
  std::memcpy(bytes.data(), prefix.data(), prefix.size());
  std::size_t k = prefix.size();
  for (std::uint16_t v : image.pixels) {
    // Little-endian regardless of host so ids are portable.
    bytes[k++] = static_cast<std::byte>(v & 0xFF);
    bytes[k++] = static_cast<std::byte>(v >> 8);
  }
  return sha256_hex(bytes);
}

DatasetManifest scan_dataset(const fs::path& root) {
  DatasetManifest manifest;
  for (Label label : {Label::infected, Label::notinfected}) {
    const fs::path dir = root / std::string(to_string(label));
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) {
      throw ConfigError("missing class directory '" + dir.string() +
                        "'; expected layout <root>/infected/*.{jpg,png} and "
                        "<root>/notinfected/*.{jpg,png}");
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      auto raw = decode_image(file);
      if (!raw) {
        manifest.skipped.push_back({file, "undecodable image"});
        continue;
      }
      manifest.records.push_back(
          {content_id(*raw), file, label, raw->width, raw->height, raw->channels});
    }
  }
  if (manifest.records.empty()) {
    throw EmptyDatasetError("no decodable images under '" + root.string() + "'");
  }
  return manifest;
}

DedupResult dedup(const DatasetManifest& manifest) {
  DedupResult result;
  result.manifest.skipped = manifest.skipped;
  std::set<std::string> seen;
  for (const auto& record : manifest.records) {
    if (seen.insert(record.id).second) {
      result.manifest.records.push_back(record);
      auto it = manifest.split_assignment.find(record.id);
      if (it != manifest.split_assignment.end()) {
        result.manifest.split_assignment.emplace(record.id, it->second);
      }
    } else {
      ++result.removed;
    }
  }
  return result;
}

Image preprocess(const RawImage& image, const PreprocessConfig& config) {
  if (image.height <= 0 || image.width <= 0 || image.channels <= 0 ||
      image.pixels.size() !=
          static_cast<std::size_t>(image.height) * image.width * image.channels) {
    throw InvalidImageError("image has invalid dimensions " + std::to_string(image.width) + "x" +
                            std::to_string(image.height) + "x" + std::to_string(image.channels));
  }
  if (config.target_size <= 0) throw ParameterError("target_size must be positive");
  const double divisor =
      config.rescale_divisor > 0.0 ? config.rescale_divisor : static_cast<double>(image.max_value);
  if (divisor <= 0.0) throw ParameterError("rescale divisor must be positive");

  const int target = config.target_size;
  int resized_h = target;
  int resized_w = target;
  if (image.height <= image.width) {
    resized_w = std::max(target, static_cast<int>(std::lround(
                                     static_cast<double>(image.width) * target / image.height)));
  } else {
    resized_h = std::max(target, static_cast<int>(std::lround(
                                     static_cast<double>(image.height) * target / image.width)));
  }
  const int offset_y = (resized_h - target) / 2;
  const int offset_x = (resized_w - target) / 2;
  const double scale_y = static_cast<double>(image.height) / resized_h;
  const double scale_x = static_cast<double>(image.width) / resized_w;
  const bool gray = image.channels <= 2;

  // Source coordinate and blend weight along one axis, half-pixel centers.
  auto sample_axis = [](int dst, int offset, double scale, int extent) {
    double src = (dst + offset + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(extent - 1));
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, extent - 1);
    return std::tuple{lo, hi, src - lo};
  };

  Image out(target, target, 3);
  for (int y = 0; y < target; ++y) {
    const auto [y0, y1, wy] = sample_axis(y, offset_y, scale_y, image.height);
    for (int x = 0; x < target; ++x) {
      const auto [x0, x1, wx] = sample_axis(x, offset_x, scale_x, image.width);
      for (int c = 0; c < 3; ++c) {
        const int sc = gray ? 0 : c;
        const double top = (1.0 - wx) * image.at(y0, x0, sc) + wx * image.at(y0, x1, sc);
        const double bottom = (1.0 - wx) * image.at(y1, x0, sc) + wx * image.at(y1, x1, sc);
        double v = std::clamp(((1.0 - wy) * top + wy * bottom) / divisor, 0.0, 1.0);
        if (config.standardize) v = (v - config.mean[c]) / config.stddev[c];
        out.at(y, x, c) = v;
      }
    }
  }
  return out;
}

void SplitSpec::validate() const {
  for (double f : {train_fraction, val_fraction, test_fraction}) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("split fractions must lie in [0,1]");
  }
  if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
}

std::array<std::size_t, 3> apportion(std::size_t count, const SplitSpec& spec) {
  const std::array<double, 3> fractions{spec.train_fraction, spec.val_fraction,
                                        spec.test_fraction};
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> remainders{};
  std::size_t assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double quota = fractions[k] * static_cast<double>(count);
    sizes[k] = static_cast<std::size_t>(std::floor(quota));
    remainders[k] = quota - std::floor(quota);
    assigned += sizes[k];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return remainders[a] > remainders[b]; });
  for (std::size_t i = 0; assigned < count; ++i, ++assigned) ++sizes[order[i % 3]];
  while (assigned > count) {
    // Only reachable through floating-point slack in the fractions.
    auto it = std::max_element(sizes.begin(), sizes.end());
    --*it;
    --assigned;
  }
  for (int k = 0; k < 3; ++k) {
    if (fractions[k] > 0.0 && sizes[k] == 0) {
      auto donor = std::max_element(sizes.begin(), sizes.end());
      if (*donor <= 1) break;
      --*donor;
      ++sizes[k];
    }
  }
  return sizes;
}

DatasetManifest split(const DatasetManifest& manifest, const SplitSpec& spec) {
  spec.validate();
  if (manifest.records.empty()) throw EmptyDatasetError("cannot split an empty manifest");
  {
    std::set<std::string> ids;
    for (const auto& r : manifest.records) {
      if (!ids.insert(r.id).second) {
        throw ConfigError("manifest contains duplicate id " + r.id + "; run dedup first");
      }
    }
  }
  const int required = (spec.train_fraction > 0) + (spec.val_fraction > 0) +
                       (spec.test_fraction > 0);

  std::vector<std::vector<std::size_t>> groups;
  if (spec.stratified) {
    for (Label label : {Label::infected, Label::notinfected}) {
      std::vector<std::size_t> group;
      for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        if (manifest.records[i].label == label) group.push_back(i);
      }
      if (!group.empty()) groups.push_back(std::move(group));
    }
  } else {
    groups.emplace_back(manifest.records.size());
    std::iota(groups.back().begin(), groups.back().end(), std::size_t{0});
  }

  DatasetManifest out = manifest;
  out.split_assignment.clear();
  std::mt19937_64 rng(spec.seed);
  for (auto& group : groups) {
    if (group.size() < static_cast<std::size_t>(required)) {
      throw InfeasibleSplitError(
          "class '" + std::string(to_string(manifest.records[group.front()].label)) + "' has " +
          std::to_string(group.size()) + " record(s) but " + std::to_string(required) +
          " splits need at least one each");
    }
    std::shuffle(group.begin(), group.end(), rng);
    const auto sizes = apportion(group.size(), spec);
    std::size_t cursor = 0;
    for (int k = 0; k < 3; ++k) {
      for (std::size_t n = 0; n < sizes[k]; ++n, ++cursor) {
        out.split_assignment[manifest.records[group[cursor]].id] = static_cast<Split>(k);
      }
    }
  }
  return out;
}

void write_manifest(std::ostream& out, const DatasetManifest& manifest) {
  for (const auto& record : manifest.records) {
    nlohmann::ordered_json line;
    line["id"] = record.id;
    line["path"] = record.source_path.generic_string();
    line["label"] = std::string(to_string(record.label));
    auto it = manifest.split_assignment.find(record.id);
    if (it != manifest.split_assignment.end()) {
      line["split"] = std::string(to_string(it->second));
    } else {
      line["split"] = nullptr;
    }
    line["width"] = record.width;
    line["height"] = record.height;
    line["channels"] = record.channels;
    out << line.dump() << '\n';
  }
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  write_manifest(out, manifest);
  if (!out) throw IoError("failed writing manifest '" + path.string() + "'");
}

DatasetManifest read_manifest(std::istream& in) {
  DatasetManifest manifest;
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.empty()) continue;
    const auto where = "manifest line " + std::to_string(line_no);
    nlohmann::json line;
    try {
      line = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw InputError(where + ": " + e.what());
    }
    try {
      ImageRecord record;
      record.id = line.at("id").get<std::string>();
      record.source_path = fs::path(line.at("path").get<std::string>());
      const auto label = parse_label(line.at("label").get<std::string>());
      if (!label) throw InputError(where + ": unknown label");
      record.label = *label;
      record.width = line.at("width").get<int>();
      record.height = line.at("height").get<int>();
      record.channels = line.at("channels").get<int>();
      const auto& split_field = line.at("split");
      if (!split_field.is_null()) {
        const auto which = parse_split(split_field.get<std::string>());
        if (!which) throw InputError(where + ": unknown split");
        manifest.split_assignment[record.id] = *which;
      }
      manifest.records.push_back(std::move(record));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(where + ": " + e.what());
    }
  }
  return manifest;
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open manifest '" + path.string() + "'");
  return read_manifest(in);
}

ManifestSource::ManifestSource(const DatasetManifest& manifest, Split which,
                               PreprocessConfig config, bool preload)
    : config_(std::move(config)) {
  for (std::size_t i : manifest.indices(which)) records_.push_back(manifest.records[i]);
  if (preload) {
    cache_.reserve(records_.size());
    for (const auto& record : records_) cache_.push_back(load(record));
  }
}

LabeledImage ManifestSource::get(std::size_t index) const {
  if (!cache_.empty()) return cache_.at(index);
  return load(records_.at(index));
}

LabeledImage ManifestSource::load(const ImageRecord& record) const {
  auto raw = decode_image(record.source_path);
  if (!raw) throw InvalidImageError("cannot decode '" + record.source_path.string() + "'");
  return {preprocess(*raw, config_), record.label, record.id};
}

}  // namespace pcos::dataset
