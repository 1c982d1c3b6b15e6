#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pcos/image.hpp"
#include "pcos/model.hpp"
#include "pcos/nn/tensor.hpp"

namespace pcos::explain {

/// Per-pixel attribution in [0, 1] for the infected score.
struct Heatmap {
  int height = 0;
  int width = 0;
  std::vector<double> values;  ///< row-major
  std::string source_layer;

  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

/// Grad-CAM on `layer` (empty selects the model's feature layer). The score
/// is the infected logit. Throws AttributionError for an unknown layer.
Heatmap grad_cam(const model::ModelHandle& model, const Image& image, std::string_view layer = {});

/// Grad-CAM from (K, h, w) activations and score gradients: channel weights
/// are spatial gradient means, the weighted sum is rectified, bilinearly
/// upsampled to height x width, then min-max normalized.
Heatmap grad_cam_from(const nn::Tensor& activations, const nn::Tensor& gradients, int height,
                      int width, std::string source_layer = {});

/// Half-pixel-center bilinear resize of a row-major map.
std::vector<double> upsample_bilinear(std::span<const double> map, int h, int w, int height,
                                      int width);

/// Rescales to [0, 1]. A constant map becomes all zeros.
void normalize_min_max(std::vector<double>& values);

struct Segmentation {
  int height = 0;
  int width = 0;
  int n_segments = 0;
  std::vector<int> labels;  ///< row-major ids in [0, n_segments)

  int at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
};

/// Grid superpixels: exactly `n_segments` rectangles. Rows are chosen close to
/// the image aspect ratio and segments are spread over rows as evenly as
/// possible, so 16 on a square image is a 4x4 tiling. Throws ParameterError
/// when n_segments < 1 or exceeds the pixel count.
Segmentation segment_grid(int height, int width, int n_segments);

/// One byte per segment; nonzero keeps the segment.
using Mask = std::vector<std::uint8_t>;

/// Scores a batch of masks. Must be deterministic.
using MaskScorer = std::function<std::vector<double>(std::span<const Mask>)>;

/// Adapts a single-mask function.
MaskScorer per_mask(std::function<double(const Mask&)> fn);

/// Off segments are replaced by `fill`, or by the per-channel image mean when
/// `fill` is empty.
Image perturb(const Image& image, const Segmentation& seg, const Mask& mask,
              std::optional<double> fill = std::nullopt);

/// Infected probability of the perturbed image, evaluated in batches.
MaskScorer model_scorer(const model::ModelHandle& model, const Image& image,
                        const Segmentation& seg, std::optional<double> fill = std::nullopt,
                        std::size_t batch_size = 32);

enum class Method : std::uint8_t { gradcam, lime, shapley };

std::string_view to_string(Method method);
std::optional<Method> parse_method(std::string_view text);

struct Attribution {
  std::vector<double> weights;  ///< one signed weight per segment
  Method method = Method::lime;
  std::string baseline = "image mean";
  double intercept = 0.0;       ///< LIME surrogate intercept
  double full_score = 0.0;      ///< f(all segments on)
  double empty_score = 0.0;     ///< f(all segments off)
};

struct LimeConfig {
  std::size_t n_samples = 1000;
  std::uint64_t seed = 0;
  double kernel_width = 0.25;  ///< sigma over the fraction of segments switched off
};

/// Draws masks (each segment kept with probability 1/2), scores them, and fits
/// a weighted least-squares linear surrogate with kernel exp(-d^2 / sigma^2).
/// A rank-deficient design is redrawn once before AttributionError is thrown.
/// Throws ParameterError when n_samples < n_segments + 1.
Attribution lime_fit(int n_segments, const MaskScorer& scorer, const LimeConfig& config);

Attribution lime_explain(const model::ModelHandle& model, const Image& image,
                         const Segmentation& seg, const LimeConfig& config,
                         std::optional<double> fill = std::nullopt);

inline constexpr int kMaxShapleySegments = 14;

/// Exact Shapley values by enumerating all 2^n coalitions.
/// Throws ParameterError when n_segments exceeds kMaxShapleySegments.
Attribution shapley_values(int n_segments, const MaskScorer& scorer);

Attribution shapley_explain(const model::ModelHandle& model, const Image& image,
                            const Segmentation& seg, std::optional<double> fill = std::nullopt);

/// Paints each segment with its weight, keeping positive (infected-ward)
/// evidence scaled by the largest positive weight; negative weights map to 0.
Heatmap attribution_heatmap(const Attribution& attribution, const Segmentation& seg);

inline constexpr double kOverlayAlpha = 0.4;

/// Jet colormap (high = red) as 8-bit RGB.
std::array<std::uint8_t, 3> jet(double value);

/// (1 - alpha) * image + alpha * jet(heatmap), as a [0, 1] RGB image.
Image overlay(const Image& image, const Heatmap& heatmap, double alpha = kOverlayAlpha);

struct OverlayFiles {
  std::filesystem::path overlay;
  std::filesystem::path raw;
};

/// Writes the overlay at `overlay_path` and the heatmap as a grayscale PNG at
/// `raw_path`. Throws ShapeError on mismatched sizes and IoError on write failure.
OverlayFiles render_overlay(const Image& image, const Heatmap& heatmap,
                            const std::filesystem::path& overlay_path,
                            const std::filesystem::path& raw_path);

/// "segment,weight" table preceded by method and baseline comments.
void write_weights(const std::filesystem::path& path, const Attribution& attribution);

}  // namespace pcos::explain
