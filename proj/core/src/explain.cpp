#include "pcos/explain.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <random>
#include <tuple>

#include <Eigen/Dense>
#include <fmt/format.h>
#include <opencv2/imgproc.hpp>

#include "pcos/errors.hpp"

namespace pcos::explain {

namespace fs = std::filesystem;

// Grad-CAM

std::vector<double> upsample_bilinear(std::span<const double> map, int h, int w, int height,
                                      int width) {
  if (h <= 0 || w <= 0 || height <= 0 || width <= 0 ||
      map.size() != static_cast<std::size_t>(h) * w) {
    throw ShapeError(fmt::format("upsample: bad sizes {}x{} -> {}x{}", h, w, height, width));
  }
  auto axis = [](int dst, int src_extent, int dst_extent) {
    const double src = (dst + 0.5) * src_extent / dst_extent - 0.5;
    const double clamped = std::clamp(src, 0.0, static_cast<double>(src_extent - 1));
    const int lo = static_cast<int>(std::floor(clamped));
    const int hi = std::min(lo + 1, src_extent - 1);
    return std::tuple{lo, hi, clamped - lo};
  };
  std::vector<double> out(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y) {
    const auto [y0, y1, fy] = axis(y, h, height);
    for (int x = 0; x < width; ++x) {
      const auto [x0, x1, fx] = axis(x, w, width);
      const double top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
      const double bottom = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
      out[static_cast<std::size_t>(y) * width + x] = top * (1.0 - fy) + bottom * fy;
    }
  }
  return out;
}

void normalize_min_max(std::vector<double>& values) {
  if (values.empty()) return;
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it;
  const double range = *hi_it - lo;
  if (!(range > 0.0)) {
    std::fill(values.begin(), values.end(), 0.0);
    return;
  }
  for (double& v : values) v = std::clamp((v - lo) / range, 0.0, 1.0);
}

Heatmap grad_cam_from(const nn::Tensor& activations, const nn::Tensor& gradients, int height,
                      int width, std::string source_layer) {
  nn::require_rank(activations, 3, "grad_cam activations");
  if (activations.shape() != gradients.shape()) {
    throw AttributionError("grad_cam: activation and gradient shapes differ");
  }
  const int k = activations.dim(0);
  const int h = activations.dim(1);
  const int w = activations.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  std::vector<double> raw(plane, 0.0);
  for (int c = 0; c < k; ++c) {
    const double* g = gradients.data() + c * plane;
    const double* a = activations.data() + c * plane;
    double weight = 0.0;
    for (std::size_t i = 0; i < plane; ++i) weight += g[i];
    weight /= static_cast<double>(plane);
    if (weight == 0.0) continue;
    for (std::size_t i = 0; i < plane; ++i) raw[i] += weight * a[i];
  }
  for (double& v : raw) v = std::max(v, 0.0);

  Heatmap heat;
  heat.height = height;
  heat.width = width;
  heat.values = upsample_bilinear(raw, h, w, height, width);
  normalize_min_max(heat.values);
  heat.source_layer = std::move(source_layer);
  return heat;
}

Heatmap grad_cam(const model::ModelHandle& model, const Image& image, std::string_view layer) {
  const std::string name = layer.empty() ? model.feature_layer() : std::string(layer);
  const auto fg = model.feature_gradients(image, name);
  return grad_cam_from(fg.activations, fg.gradients, image.height, image.width, name);
}

// Segmentation and perturbation

Segmentation segment_grid(int height, int width, int n_segments) {
  if (height <= 0 || width <= 0) throw ParameterError("segment: image has no pixels");
  if (n_segments < 1) throw ParameterError("segment: n_segments must be >= 1");
  if (static_cast<long long>(n_segments) > static_cast<long long>(height) * width) {
    throw ParameterError(fmt::format("segment: {} segments exceed {} pixels", n_segments,
                                     static_cast<long long>(height) * width));
  }
  // Rows near sqrt(n * H / W) give roughly square cells.
  int rows = static_cast<int>(std::lround(std::sqrt(double(n_segments) * height / width)));
  rows = std::clamp(rows, 1, std::min(n_segments, height));
  while ((n_segments + rows - 1) / rows > width) ++rows;

  Segmentation seg;
  seg.height = height;
  seg.width = width;
  seg.n_segments = n_segments;
  seg.labels.resize(static_cast<std::size_t>(height) * width);
  const int base = n_segments / rows;
  const int extra = n_segments % rows;
  int id = 0;
  for (int r = 0; r < rows; ++r) {
    const int y0 = static_cast<int>(static_cast<long long>(r) * height / rows);
    const int y1 = static_cast<int>(static_cast<long long>(r + 1) * height / rows);
    // Trailing rows take the extra segment.
    const int cols = base + (r >= rows - extra ? 1 : 0);
    for (int c = 0; c < cols; ++c) {
      const int x0 = static_cast<int>(static_cast<long long>(c) * width / cols);
      const int x1 = static_cast<int>(static_cast<long long>(c + 1) * width / cols);
      for (int y = y0; y < y1; ++y) {
        std::fill_n(seg.labels.begin() + static_cast<std::ptrdiff_t>(y) * width + x0, x1 - x0, id);
      }
      ++id;
    }
  }
  return seg;
}

MaskScorer per_mask(std::function<double(const Mask&)> fn) {
  return [fn = std::move(fn)](std::span<const Mask> masks) {
    std::vector<double> out;
    out.reserve(masks.size());
    for (const Mask& m : masks) out.push_back(fn(m));
    return out;
  };
}

namespace {

void check_segmentation(const Image& image, const Segmentation& seg) {
  if (seg.height != image.height || seg.width != image.width) {
    throw ShapeError(fmt::format("segmentation is {}x{} but image is {}x{}", seg.width, seg.height,
                                 image.width, image.height));
  }
}

std::vector<double> channel_means(const Image& image) {
  std::vector<double> means(image.channels, 0.0);
  for (std::size_t i = 0; i < image.values.size(); ++i) means[i % image.channels] += image.values[i];
  for (double& m : means) m /= static_cast<double>(image.pixel_count());
  return means;
}

}  // namespace

Image perturb(const Image& image, const Segmentation& seg, const Mask& mask,
              std::optional<double> fill) {
  check_segmentation(image, seg);
  if (mask.size() != static_cast<std::size_t>(seg.n_segments)) {
    throw ShapeError("perturb: mask length does not match segment count");
  }
  const std::vector<double> fills =
      fill ? std::vector<double>(image.channels, *fill) : channel_means(image);
  Image out = image;
  for (std::size_t p = 0; p < image.pixel_count(); ++p) {
    if (mask[seg.labels[p]] != 0) continue;
    for (int c = 0; c < image.channels; ++c) out.values[p * image.channels + c] = fills[c];
  }
  return out;
}

MaskScorer model_scorer(const model::ModelHandle& model, const Image& image,
                        const Segmentation& seg, std::optional<double> fill,
                        std::size_t batch_size) {
  check_segmentation(image, seg);
  model.check_input(image);
  return [&model, image, seg, fill, batch_size](std::span<const Mask> masks) {
    // Perturbed images are built one batch at a time to bound memory.
    std::vector<double> scores;
    scores.reserve(masks.size());
    std::vector<Image> perturbed;
    for (std::size_t start = 0; start < masks.size(); start += batch_size) {
      const std::size_t end = std::min(masks.size(), start + batch_size);
      perturbed.clear();
      for (std::size_t i = start; i < end; ++i) perturbed.push_back(perturb(image, seg, masks[i], fill));
      const auto chunk = model::predict(model, perturbed, batch_size);
      scores.insert(scores.end(), chunk.begin(), chunk.end());
    }
    return scores;
  };
}

std::string_view to_string(Method method) {
  switch (method) {
    case Method::gradcam: return "gradcam";
    case Method::lime: return "lime";
    case Method::shapley: return "shapley";
  }
  return "unknown";
}

std::optional<Method> parse_method(std::string_view text) {
  for (Method m : {Method::gradcam, Method::lime, Method::shapley}) {
    if (text == to_string(m)) return m;
  }
  return std::nullopt;
}

// LIME

namespace {

std::string baseline_text(std::optional<double> fill) {
  return fill ? fmt::format("constant {}", *fill) : std::string("image mean");
}

std::vector<Mask> draw_masks(int n_segments, std::size_t n_samples, std::mt19937_64& rng) {
  std::vector<Mask> masks(n_samples, Mask(n_segments));
  for (Mask& m : masks) {
    for (auto& bit : m) bit = static_cast<std::uint8_t>(rng() >> 63);
  }
  return masks;
}

}  // namespace

Attribution lime_fit(int n_segments, const MaskScorer& scorer, const LimeConfig& config) {
  if (n_segments < 1) throw ParameterError("lime: n_segments must be >= 1");
  if (config.n_samples < static_cast<std::size_t>(n_segments) + 1) {
    throw ParameterError(fmt::format("lime: n_samples must be at least n_segments + 1 = {}",
                                     n_segments + 1));
  }
  if (!(config.kernel_width > 0.0)) throw ParameterError("lime: kernel_width must be positive");

  std::mt19937_64 rng(config.seed);
  const auto n = static_cast<Eigen::Index>(config.n_samples);
  const Eigen::Index cols = n_segments + 1;
  for (int attempt = 0; attempt < 2; ++attempt) {
    const auto masks = draw_masks(n_segments, config.n_samples, rng);
    Eigen::MatrixXd design(n, cols);
    Eigen::VectorXd sqrt_w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Mask& m = masks[static_cast<std::size_t>(i)];
      design(i, 0) = 1.0;
      int off = 0;
      for (int s = 0; s < n_segments; ++s) {
        design(i, s + 1) = m[s];
        off += m[s] == 0;
      }
      const double d = static_cast<double>(off) / n_segments;
      sqrt_w(i) = std::exp(-0.5 * d * d / (config.kernel_width * config.kernel_width));
    }
    const Eigen::MatrixXd weighted = sqrt_w.asDiagonal() * design;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(weighted);
    if (qr.rank() < cols) continue;

    const std::vector<double> scores = scorer(masks);
    if (scores.size() != masks.size()) throw AttributionError("lime: scorer returned wrong count");
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double v = scores[static_cast<std::size_t>(i)];
      if (!std::isfinite(v)) throw AttributionError("lime: black box returned a non-finite score");
      y(i) = sqrt_w(i) * v;
    }
    const Eigen::VectorXd beta = qr.solve(y);
    Attribution out;
    out.method = Method::lime;
    out.intercept = beta(0);
    out.weights.assign(beta.data() + 1, beta.data() + cols);
    return out;
  }
  throw AttributionError("lime: perturbation design is degenerate after resampling; "
                         "increase n_samples");
}

Attribution lime_explain(const model::ModelHandle& model, const Image& image,
                         const Segmentation& seg, const LimeConfig& config,
                         std::optional<double> fill) {
  Attribution out = lime_fit(seg.n_segments, model_scorer(model, image, seg, fill), config);
  out.baseline = baseline_text(fill);
  return out;
}

// Shapley

Attribution shapley_values(int n_segments, const MaskScorer& scorer) {
  if (n_segments < 1) throw ParameterError("shapley: n_segments must be >= 1");
  if (n_segments > kMaxShapleySegments) {
    throw ParameterError(fmt::format(
        "shapley: {} segments exceed the exact-enumeration cap of {}; use fewer segments or "
        "--method lime",
        n_segments, kMaxShapleySegments));
  }
  const int n = n_segments;
  const std::size_t count = std::size_t{1} << n;
  std::vector<Mask> masks(count, Mask(n));
  for (std::size_t s = 0; s < count; ++s) {
    for (int i = 0; i < n; ++i) masks[s][i] = static_cast<std::uint8_t>((s >> i) & 1U);
  }
  const std::vector<double> value = scorer(masks);
  if (value.size() != count) throw AttributionError("shapley: scorer returned wrong count");

  // |S|! (n - |S| - 1)! / n!, exact in double for n <= 14.
  std::vector<double> factorial(n + 1, 1.0);
  for (int i = 1; i <= n; ++i) factorial[i] = factorial[i - 1] * i;
  std::vector<double> coalition_weight(n);
  for (int s = 0; s < n; ++s) coalition_weight[s] = factorial[s] * factorial[n - s - 1] / factorial[n];

  Attribution out;
  out.method = Method::shapley;
  out.weights.assign(n, 0.0);
  for (std::size_t s = 0; s < count; ++s) {
    const int size = std::popcount(s);
    for (int i = 0; i < n; ++i) {
      if ((s >> i) & 1U) continue;
      const std::size_t with = s | (std::size_t{1} << i);
      out.weights[i] += coalition_weight[size] * (value[with] - value[s]);
    }
  }
  out.full_score = value[count - 1];
  out.empty_score = value[0];
  return out;
}

Attribution shapley_explain(const model::ModelHandle& model, const Image& image,
                            const Segmentation& seg, std::optional<double> fill) {
  Attribution out = shapley_values(seg.n_segments, model_scorer(model, image, seg, fill));
  out.baseline = baseline_text(fill);
  return out;
}

// Rendering

Heatmap attribution_heatmap(const Attribution& attribution, const Segmentation& seg) {
  if (attribution.weights.size() != static_cast<std::size_t>(seg.n_segments)) {
    throw ShapeError("attribution length does not match segment count");
  }
  const double peak = std::max(0.0, *std::max_element(attribution.weights.begin(),
                                                      attribution.weights.end()));
  Heatmap heat;
  heat.height = seg.height;
  heat.width = seg.width;
  heat.source_layer = std::string(to_string(attribution.method));
  heat.values.resize(seg.labels.size(), 0.0);
  if (peak <= 0.0) return heat;
  for (std::size_t p = 0; p < seg.labels.size(); ++p) {
    heat.values[p] = std::clamp(attribution.weights[seg.labels[p]] / peak, 0.0, 1.0);
  }
  return heat;
}

std::array<std::uint8_t, 3> jet(double value) {
  cv::Mat gray(1, 1, CV_8UC1, cv::Scalar(to_byte(value)));
  cv::Mat color;
  cv::applyColorMap(gray, color, cv::COLORMAP_JET);
  const auto bgr = color.at<cv::Vec3b>(0, 0);
  return {bgr[2], bgr[1], bgr[0]};
}

Image overlay(const Image& image, const Heatmap& heatmap, double alpha) {
  if (heatmap.height != image.height || heatmap.width != image.width) {
    throw ShapeError(fmt::format("overlay: heatmap is {}x{} but image is {}x{}", heatmap.width,
                                 heatmap.height, image.width, image.height));
  }
  if (image.channels != 1 && image.channels != 3) {
    throw ShapeError("overlay: image must have 1 or 3 channels");
  }
  // One colormap lookup per 8-bit level.
  cv::Mat levels(1, 256, CV_8UC1);
  for (int i = 0; i < 256; ++i) levels.at<std::uint8_t>(0, i) = static_cast<std::uint8_t>(i);
  cv::Mat lut;
  cv::applyColorMap(levels, lut, cv::COLORMAP_JET);

  Image out(image.height, image.width, 3);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const auto bgr = lut.at<cv::Vec3b>(0, to_byte(heatmap.at(y, x)));
      for (int c = 0; c < 3; ++c) {
        const double base = image.at(y, x, image.channels == 3 ? c : 0);
        const double color = bgr[2 - c] / 255.0;
        out.at(y, x, c) = (1.0 - alpha) * base + alpha * color;
      }
    }
  }
  return out;
}

OverlayFiles render_overlay(const Image& image, const Heatmap& heatmap, const fs::path& overlay_path,
                            const fs::path& raw_path) {
  const Image blended = overlay(image, heatmap);
  Image raw(heatmap.height, heatmap.width, 1);
  raw.values = heatmap.values;
  write_png(overlay_path, blended);
  write_png(raw_path, raw);
  return {overlay_path, raw_path};
}

void write_weights(const fs::path& path, const Attribution& attribution) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "# method: " << to_string(attribution.method) << '\n';
  out << "# baseline: " << attribution.baseline << '\n';
  if (attribution.method == Method::lime) {
    out << fmt::format("# intercept: {}\n", attribution.intercept);
  } else if (attribution.method == Method::shapley) {
    out << fmt::format("# full_score: {}\n# empty_score: {}\n", attribution.full_score,
                       attribution.empty_score);
  }
  out << "segment,weight\n";
  for (std::size_t i = 0; i < attribution.weights.size(); ++i) {
    out << fmt::format("{},{}\n", i, attribution.weights[i]);
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace pcos::explain
