#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pcos/image.hpp"

namespace pcos::dataset {

enum class Split : std::uint8_t { train, val, test };

std::string_view to_string(Split split);
std::optional<Split> parse_split(std::string_view text);

/// One labeled ultrasound frame. `id` is the SHA-256 of the decoded pixels
/// (dimensions included), so byte-identical and re-encoded copies share it.
struct ImageRecord {
  std::string id;
  std::filesystem::path source_path;
  Label label = Label::notinfected;
  int width = 0;
  int height = 0;
  int channels = 0;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

/// A file under a class directory that could not be decoded.
struct SkippedFile {
  std::filesystem::path path;
  std::string reason;

  friend bool operator==(const SkippedFile&, const SkippedFile&) = default;
};

struct DatasetManifest {
  std::vector<ImageRecord> records;
  std::vector<SkippedFile> skipped;
  std::map<std::string, Split> split_assignment;

  std::map<Label, std::size_t> class_counts() const;
  bool has_split() const { return !split_assignment.empty(); }
  /// Indices into `records` assigned to `split`, in record order.
  std::vector<std::size_t> indices(Split split) const;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Catalogs `<root>/infected` and `<root>/notinfected`. Files are visited in
/// lexicographic order, infected first. Undecodable files land in `skipped`.
///
/// Throws ConfigError when either class directory is missing and
/// EmptyDatasetError when nothing decodes.
DatasetManifest scan_dataset(const std::filesystem::path& root);

/// Content hash used for ImageRecord::id.
std::string content_id(const RawImage& image);

struct DedupResult {
  DatasetManifest manifest;
  std::size_t removed = 0;
};

/// Keeps the first record of every content id; survivors keep their order.
DedupResult dedup(const DatasetManifest& manifest);

struct PreprocessConfig {
  int target_size = 224;
  /// Divisor applied after resizing; 0 means "use the source's max_value".
  double rescale_divisor = 0.0;
  /// Opt-in per-channel (x - mean) / std after rescaling, for pretrained
  /// backbones trained with that convention. Output leaves [0,1] when set.
  bool standardize = false;
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> stddev{0.229, 0.224, 0.225};
};

/// Resize so the short side equals target_size (bilinear, half-pixel centers),
/// center-crop to a square, rescale to [0,1] and replicate gray to 3 channels.
Image preprocess(const RawImage& image, const PreprocessConfig& config);

struct SplitSpec {
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
  std::uint64_t seed = 0;
  bool stratified = true;

  void validate() const;
};

/// Per-split counts for a group of `count` items: largest-remainder rounding of
/// fraction * count, then every split with a positive fraction is bumped to at
/// least one item (taken from the largest split).
std::array<std::size_t, 3> apportion(std::size_t count, const SplitSpec& spec);

/// Assigns every record to train/val/test. Stratified splits shuffle each class
/// independently with a generator seeded from `spec.seed`.
DatasetManifest split(const DatasetManifest& manifest, const SplitSpec& spec);

/// JSON-lines serialization: one object per record with keys in the fixed order
/// id, path, label, split, width, height, channels.
void write_manifest(std::ostream& out, const DatasetManifest& manifest);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(std::istream& in);
DatasetManifest read_manifest(const std::filesystem::path& path);

struct LabeledImage {
  Image image;
  Label label = Label::notinfected;
  std::string id;
};

/// Random-access source of preprocessed, labeled images.
class ImageSource {
 public:
  virtual ~ImageSource() = default;
  virtual std::size_t size() const = 0;
  virtual LabeledImage get(std::size_t index) const = 0;
  virtual Label label(std::size_t index) const = 0;
  bool empty() const { return size() == 0; }
};

class InMemorySource final : public ImageSource {
 public:
  explicit InMemorySource(std::vector<LabeledImage> items) : items_(std::move(items)) {}
  std::size_t size() const override { return items_.size(); }
  LabeledImage get(std::size_t index) const override { return items_.at(index); }
  Label label(std::size_t index) const override { return items_.at(index).label; }
  const std::vector<LabeledImage>& items() const { return items_; }

 private:
  std::vector<LabeledImage> items_;
};

/// Decodes and preprocesses records of one split on demand, or once up front
/// when `preload` is set.
class ManifestSource final : public ImageSource {
 public:
  ManifestSource(const DatasetManifest& manifest, Split split, PreprocessConfig config,
                 bool preload);
  std::size_t size() const override { return records_.size(); }
  LabeledImage get(std::size_t index) const override;
  Label label(std::size_t index) const override { return records_.at(index).label; }

 private:
  LabeledImage load(const ImageRecord& record) const;

  std::vector<ImageRecord> records_;
  PreprocessConfig config_;
  std::vector<LabeledImage> cache_;
};

}  // namespace pcos::dataset
