#include "pcos/plot.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pcos/errors.hpp"

namespace pcos::plot {

namespace {

constexpr int kWidth = 800;
constexpr int kHeight = 500;
constexpr int kLeft = 80;
constexpr int kRight = 150;
constexpr int kTop = 50;
constexpr int kBottom = 60;
constexpr int kFont = cv::FONT_HERSHEY_SIMPLEX;

cv::Scalar bgr(const Rgb& c) { return {double(c[2]), double(c[1]), double(c[0])}; }

const cv::Scalar kBlack(0, 0, 0);
const cv::Scalar kGrid(225, 225, 225);

void put_text(cv::Mat& canvas, const std::string& text, cv::Point origin, double scale,
              const cv::Scalar& color = kBlack, int thickness = 1) {
  cv::putText(canvas, text, origin, kFont, scale, color, thickness, cv::LINE_AA);
}

void put_centered(cv::Mat& canvas, const std::string& text, cv::Point center, double scale,
                  const cv::Scalar& color = kBlack, int thickness = 1) {
  int baseline = 0;
  const cv::Size size = cv::getTextSize(text, kFont, scale, thickness, &baseline);
  put_text(canvas, text, {center.x - size.width / 2, center.y + size.height / 2}, scale, color,
           thickness);
}

void save(const std::filesystem::path& path, const cv::Mat& canvas) {
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), canvas);
  } catch (const cv::Exception& e) {
    throw IoError("cannot write " + path.string() + ": " + e.what());
  }
  if (!ok) throw IoError("cannot write " + path.string());
}

std::string tick_label(double v) {
  std::string s = fmt::format("{:.3g}", v);
  return s == "-0" ? "0" : s;
}

}  // namespace

void line_chart(const std::filesystem::path& path, const std::string& title,
                const std::string& y_label, const std::vector<Series>& series) {
  cv::Mat canvas(kHeight, kWidth, CV_8UC3, cv::Scalar(255, 255, 255));
  const int plot_w = kWidth - kLeft - kRight;
  const int plot_h = kHeight - kTop - kBottom;

  std::size_t points = 0;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& s : series) {
    points = std::max(points, s.values.size());
    for (double v : s.values) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (!std::isfinite(lo)) {
    lo = 0.0;
    hi = 1.0;
  }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;

  const double x_span = points > 1 ? static_cast<double>(points - 1) : 1.0;
  auto px = [&](std::size_t i) {
    return kLeft + static_cast<int>(std::lround(static_cast<double>(i) / x_span * plot_w));
  };
  auto py = [&](double v) {
    return kTop + plot_h - static_cast<int>(std::lround((v - lo) / (hi - lo) * plot_h));
  };

  constexpr int kTicks = 5;
  for (int t = 0; t <= kTicks; ++t) {
    const double v = lo + (hi - lo) * t / kTicks;
    const int y = py(v);
    cv::line(canvas, {kLeft, y}, {kLeft + plot_w, y}, kGrid, 1);
    put_text(canvas, tick_label(v), {8, y + 5}, 0.45);
  }
  const std::size_t x_step = std::max<std::size_t>(1, (points + 9) / 10);
  for (std::size_t i = 0; i < points; i += x_step) {
    put_centered(canvas, std::to_string(i + 1), {px(i), kTop + plot_h + 18}, 0.45);
  }
  cv::rectangle(canvas, {kLeft, kTop}, {kLeft + plot_w, kTop + plot_h}, kBlack, 1);

  for (const auto& s : series) {
    std::vector<cv::Point> pts;
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      if (std::isfinite(s.values[i])) pts.emplace_back(px(i), py(s.values[i]));
    }
    if (pts.size() > 1) {
      cv::polylines(canvas, pts, false, bgr(s.color), 2, cv::LINE_AA);
    }
    for (const auto& p : pts) cv::circle(canvas, p, 3, bgr(s.color), cv::FILLED, cv::LINE_AA);
  }

  int legend_y = kTop + 20;
  for (const auto& s : series) {
    const int x = kLeft + plot_w + 15;
    cv::line(canvas, {x, legend_y - 5}, {x + 25, legend_y - 5}, bgr(s.color), 3);
    put_text(canvas, s.name, {x + 32, legend_y}, 0.5);
    legend_y += 25;
  }

  put_centered(canvas, title, {kWidth / 2, kTop / 2}, 0.65, kBlack, 2);
  put_centered(canvas, "epoch", {kLeft + plot_w / 2, kHeight - 18}, 0.55);
  put_text(canvas, y_label, {kLeft + plot_w + 15, kTop + plot_h}, 0.55);
  save(path, canvas);
}

void confusion_heatmap(const std::filesystem::path& path, const std::string& title,
                       const std::array<std::array<std::uint64_t, 2>, 2>& counts,
                       const std::array<std::string, 2>& class_names) {
  constexpr int kSize = 560;
  constexpr int kCell = 170;
  constexpr int kOriginX = 170;
  constexpr int kOriginY = 90;
  cv::Mat canvas(kSize, kSize, CV_8UC3, cv::Scalar(255, 255, 255));

  std::uint64_t peak = 1;
  for (const auto& row : counts) {
    for (auto c : row) peak = std::max(peak, c);
  }
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 2; ++c) {
      const double t = static_cast<double>(counts[r][c]) / static_cast<double>(peak);
      // White to dark blue.
      const Rgb fill{static_cast<std::uint8_t>(std::lround(247 - t * (247 - 8))),
                     static_cast<std::uint8_t>(std::lround(251 - t * (251 - 48))),
                     static_cast<std::uint8_t>(std::lround(255 - t * (255 - 107)))};
      const cv::Point tl(kOriginX + c * kCell, kOriginY + r * kCell);
      cv::rectangle(canvas, tl, tl + cv::Point(kCell, kCell), bgr(fill), cv::FILLED);
      cv::rectangle(canvas, tl, tl + cv::Point(kCell, kCell), kBlack, 1);
      const cv::Scalar ink = t > 0.5 ? cv::Scalar(255, 255, 255) : kBlack;
      put_centered(canvas, std::to_string(counts[r][c]), tl + cv::Point(kCell / 2, kCell / 2), 1.0,
                   ink, 2);
    }
  }
  for (int i = 0; i < 2; ++i) {
    put_centered(canvas, class_names[i], {kOriginX + i * kCell + kCell / 2, kOriginY - 15}, 0.55);
    int baseline = 0;
    const cv::Size size = cv::getTextSize(class_names[i], kFont, 0.55, 1, &baseline);
    put_text(canvas, class_names[i],
             {kOriginX - size.width - 10, kOriginY + i * kCell + kCell / 2 + size.height / 2},
             0.55);
  }
  put_centered(canvas, title, {kSize / 2, 25}, 0.7, kBlack, 2);
  put_centered(canvas, "Predicted", {kOriginX + kCell, kOriginY - 45}, 0.6);
  put_text(canvas, "Actual", {15, kOriginY + 2 * kCell + 40}, 0.6);
  save(path, canvas);
}

}  // namespace pcos::plot
