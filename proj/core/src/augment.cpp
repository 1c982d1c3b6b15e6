#include "pcos/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pcos/errors.hpp"

namespace pcos::augment {

std::string_view to_string(Method method) {
  switch (method) {
    case Method::none: return "none";
    case Method::mixup: return "mixup";
    case Method::cutmix: return "cutmix";
  }
  return "?";
}

double RectMask::coverage() const {
  const auto total = static_cast<std::size_t>(image_height) * image_width;
  return total == 0 ? 0.0 : static_cast<double>(area()) / static_cast<double>(total);
}

double RectMask::kept_fraction() const {
  const auto total = static_cast<std::size_t>(image_height) * image_width;
  return total == 0 ? 1.0 : static_cast<double>(total - area()) / static_cast<double>(total);
}

MixCoefficient sample_lambda(double alpha, Rng& rng) {
  if (!std::isfinite(alpha) || alpha < 0.0) {
    throw ParameterError("mixing alpha must be a finite value >= 0, got " + std::to_string(alpha));
  }
  if (alpha == 0.0) return {1.0, 0.0};
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const double a = gamma(rng);
  const double b = gamma(rng);
  double lambda = 0.0;
  if (a + b > 0.0) {
    lambda = a / (a + b);
  } else {
    // Both draws underflowed (tiny alpha): Beta(a,a) degenerates to a fair coin on {0,1}.
    lambda = std::bernoulli_distribution(0.5)(rng) ? 1.0 : 0.0;
  }
  return {std::clamp(lambda, 0.0, 1.0), alpha};
}

namespace {

void require_same_shape(const Image& a, const Image& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("image shapes differ: " + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + "x" + std::to_string(a.channels) + " vs " +
                     std::to_string(b.height) + "x" + std::to_string(b.width) + "x" +
                     std::to_string(b.channels));
  }
}

void require_unit(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ParameterError("lambda must lie in [0,1], got " + std::to_string(lambda));
  }
}

}  // namespace

MixedSample mixup(const Image& xi, double yi, const Image& xj, double yj, double lambda) {
  require_same_shape(xi, xj);
  require_unit(lambda);
  MixedSample out;
  out.image = Image(xi.height, xi.width, xi.channels);
  const double other = 1.0 - lambda;
  for (std::size_t k = 0; k < xi.values.size(); ++k) {
    const double a = xi.values[k];
    const double b = xj.values[k];
    // Rounding can push a convex combination one ulp outside its endpoints.
    out.image.values[k] = std::clamp(lambda * a + other * b, std::min(a, b), std::max(a, b));
  }
  out.soft_label = std::clamp(lambda * yi + other * yj, std::min(yi, yj), std::max(yi, yj));
  out.lambda_effective = lambda;
  out.method = Method::mixup;
  return out;
}

RectMask make_rect_mask(double lambda, int height, int width, Rng& rng) {
  require_unit(lambda);
  if (height <= 0 || width <= 0) throw ParameterError("mask dimensions must be positive");
  const double cut = std::sqrt(1.0 - lambda);
  RectMask mask;
  mask.image_height = height;
  mask.image_width = width;
  mask.w = std::clamp(static_cast<int>(std::lround(width * cut)), 0, width);
  mask.h = std::clamp(static_cast<int>(std::lround(height * cut)), 0, height);
  if (mask.w == 0 || mask.h == 0) {
    mask.w = 0;
    mask.h = 0;
    return mask;
  }
  mask.x0 = std::uniform_int_distribution<int>(0, width - mask.w)(rng);
  mask.y0 = std::uniform_int_distribution<int>(0, height - mask.h)(rng);
  return mask;
}

MixedSample cutmix(const Image& xi, double yi, const Image& xj, double yj, const RectMask& mask) {
  require_same_shape(xi, xj);
  if (mask.image_height != xi.height || mask.image_width != xi.width) {
    throw ShapeError("mask dimensions do not match the images");
  }
  if (mask.x0 < 0 || mask.y0 < 0 || mask.w < 0 || mask.h < 0 || mask.x0 + mask.w > xi.width ||
      mask.y0 + mask.h > xi.height) {
    throw ShapeError("mask extends outside the image");
  }
  MixedSample out;
  out.image = xi;
  for (int y = mask.y0; y < mask.y0 + mask.h; ++y) {
    for (int x = mask.x0; x < mask.x0 + mask.w; ++x) {
      for (int c = 0; c < xi.channels; ++c) out.image.at(y, x, c) = xj.at(y, x, c);
    }
  }
  const double kept = mask.kept_fraction();
  out.lambda_effective = kept;
  out.soft_label = std::clamp(kept * yi + (1.0 - kept) * yj, std::min(yi, yj), std::max(yi, yj));
  out.method = Method::cutmix;
  return out;
}

MixPlan draw_plan(std::size_t batch_size, double mixup_alpha, double cutmix_alpha, int height,
                  int width, Rng& rng) {
  for (double alpha : {mixup_alpha, cutmix_alpha}) {
    if (!std::isfinite(alpha) || alpha < 0.0) {
      throw ParameterError("mixing alpha must be a finite value >= 0");
    }
  }
  MixPlan plan;
  plan.partners.resize(batch_size);
  std::iota(plan.partners.begin(), plan.partners.end(), std::size_t{0});
  if (mixup_alpha == 0.0 && cutmix_alpha == 0.0) return plan;
  if (batch_size < 2) {
    throw ConfigError("augmentation needs a batch of at least 2 samples, got " +
                      std::to_string(batch_size));
  }

  if (mixup_alpha > 0.0 && cutmix_alpha > 0.0) {
    plan.method = std::bernoulli_distribution(0.5)(rng) ? Method::cutmix : Method::mixup;
  } else {
    plan.method = mixup_alpha > 0.0 ? Method::mixup : Method::cutmix;
  }
  const double alpha = plan.method == Method::mixup ? mixup_alpha : cutmix_alpha;
  plan.lambda = sample_lambda(alpha, rng).lambda;
  std::shuffle(plan.partners.begin(), plan.partners.end(), rng);
  if (plan.method == Method::cutmix) {
    plan.mask = make_rect_mask(plan.lambda, height, width, rng);
  }
  return plan;
}

std::vector<MixedSample> apply_plan(std::span<const dataset::LabeledImage> batch,
                                    const MixPlan& plan) {
  if (plan.partners.size() != batch.size()) {
    throw ShapeError("mix plan covers " + std::to_string(plan.partners.size()) +
                     " samples but the batch has " + std::to_string(batch.size()));
  }
  std::vector<MixedSample> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& base = batch[i];
    const std::size_t j = plan.partners[i];
    if (j >= batch.size()) throw ShapeError("partner index out of range");
    if (plan.method == Method::none || j == i) {
      MixedSample same;
      same.image = base.image;
      same.soft_label = label_value(base.label);
      same.lambda_effective = 1.0;
      same.method = plan.method == Method::none ? Method::none : plan.method;
      same.partner_id = base.id;
      out.push_back(std::move(same));
      continue;
    }
    const auto& partner = batch[j];
    MixedSample mixed =
        plan.method == Method::mixup
            ? mixup(base.image, label_value(base.label), partner.image, label_value(partner.label),
                    plan.lambda)
            : cutmix(base.image, label_value(base.label), partner.image,
                     label_value(partner.label), plan.mask);
    mixed.partner_id = partner.id;
    out.push_back(std::move(mixed));
  }
  return out;
}

std::vector<MixedSample> augment_batch(std::span<const dataset::LabeledImage> batch,
                                       double mixup_alpha, double cutmix_alpha, Rng& rng) {
  const int height = batch.empty() ? 0 : batch.front().image.height;
  const int width = batch.empty() ? 0 : batch.front().image.width;
  const MixPlan plan = draw_plan(batch.size(), mixup_alpha, cutmix_alpha, height, width, rng);
  return apply_plan(batch, plan);
}

}  // namespace pcos::augment
