#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pcos/dataset.hpp"
#include "pcos/image.hpp"

namespace pcos::augment {

using Rng = std::mt19937_64;

enum class Method : std::uint8_t { none, mixup, cutmix };

std::string_view to_string(Method method);

struct MixCoefficient {
  double lambda = 1.0;
  double alpha = 0.0;
};

/// Rectangle replaced by the partner image. Coordinates are in pixels.
struct RectMask {
  int x0 = 0;
  int y0 = 0;
  int w = 0;
  int h = 0;
  int image_height = 0;
  int image_width = 0;

  std::size_t area() const { return static_cast<std::size_t>(w) * h; }
  /// Fraction of pixels replaced by the partner.
  double coverage() const;
  /// Fraction of pixels kept from the base image, computed as kept/total so it
  /// is exactly the kept-pixel count ratio.
  double kept_fraction() const;
  bool contains(int y, int x) const { return x >= x0 && x < x0 + w && y >= y0 && y < y0 + h; }
};

struct MixedSample {
  Image image;
  double soft_label = 0.0;  ///< probability of `infected`
  double lambda_effective = 1.0;
  Method method = Method::none;
  std::string partner_id;
};

/// lambda ~ Beta(alpha, alpha); alpha == 0 yields exactly 1.
/// Throws ParameterError for negative or non-finite alpha.
MixCoefficient sample_lambda(double alpha, Rng& rng);

/// Convex blend of two images and their infected-probability labels.
MixedSample mixup(const Image& xi, double yi, const Image& xj, double yj, double lambda);

/// Patch of size round(W*sqrt(1-lambda)) x round(H*sqrt(1-lambda)), placed
/// uniformly with full containment.
RectMask make_rect_mask(double lambda, int height, int width, Rng& rng);

/// Pixels inside the mask come from xj. The label weight on xi is the realized
/// kept-pixel fraction, not the sampled lambda.
MixedSample cutmix(const Image& xi, double yi, const Image& xj, double yj, const RectMask& mask);

/// Everything random about one batch, drawn up front.
struct MixPlan {
  Method method = Method::none;
  double lambda = 1.0;             ///< mixup coefficient
  RectMask mask;                   ///< cutmix patch
  std::vector<std::size_t> partners;
};

/// Draw order: method choice (only when both alphas > 0), lambda, partner
/// permutation, then the cutmix patch position.
MixPlan draw_plan(std::size_t batch_size, double mixup_alpha, double cutmix_alpha, int height,
                  int width, Rng& rng);

/// Applies a plan. Self-paired samples pass through unchanged with lambda 1.
std::vector<MixedSample> apply_plan(std::span<const dataset::LabeledImage> batch,
                                    const MixPlan& plan);

/// One method per batch (uniform when both alphas are positive), one lambda
/// per batch, partners from a random permutation of the batch. Both alphas 0
/// returns the inputs untouched with hard labels.
std::vector<MixedSample> augment_batch(std::span<const dataset::LabeledImage> batch,
                                       double mixup_alpha, double cutmix_alpha, Rng& rng);

}  // namespace pcos::augment
