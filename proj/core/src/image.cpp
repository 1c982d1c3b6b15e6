#include "pcos/image.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pcos/errors.hpp"

namespace pcos {

std::string_view to_string(Label label) {
  return label == Label::infected ? "infected" : "notinfected";
}

std::optional<Label> parse_label(std::string_view text) {
  if (text == "infected") return Label::infected;
  if (text == "notinfected") return Label::notinfected;
  return std::nullopt;
}

std::uint8_t to_byte(double value) {
  const double clamped = std::clamp(value, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(clamped * 255.0));
}

std::optional<RawImage> decode_image(const std::filesystem::path& path) {
  cv::Mat mat;
  try {
    mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception&) {
    return std::nullopt;
  }
  if (mat.empty() || mat.dims != 2 || mat.rows <= 0 || mat.cols <= 0) return std::nullopt;

  std::uint32_t max_value = 0;
  switch (mat.depth()) {
    case CV_8U: max_value = 255; break;
    case CV_16U: max_value = 65535; break;
    default: return std::nullopt;
  }

  const int channels = mat.channels();
  if (channels == 3) {
    cv::cvtColor(mat, mat, cv::COLOR_BGR2RGB);
  } else if (channels == 4) {
    cv::cvtColor(mat, mat, cv::COLOR_BGRA2RGBA);
  } else if (channels != 1 && channels != 2) {
    return std::nullopt;
  }

  RawImage raw;
  raw.height = mat.rows;
  raw.width = mat.cols;
  raw.channels = channels;
  raw.max_value = max_value;
  raw.pixels.resize(static_cast<std::size_t>(mat.rows) * mat.cols * channels);
  std::size_t k = 0;
  for (int y = 0; y < mat.rows; ++y) {
    if (max_value == 255) {
      const auto* row = mat.ptr<std::uint8_t>(y);
      for (int i = 0; i < mat.cols * channels; ++i) raw.pixels[k++] = row[i];
    } else {
      const auto* row = mat.ptr<std::uint16_t>(y);
      for (int i = 0; i < mat.cols * channels; ++i) raw.pixels[k++] = row[i];
    }
  }
  return raw;
}

namespace {

void write_mat(const std::filesystem::path& path, const cv::Mat& mat) {
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), mat, {cv::IMWRITE_PNG_COMPRESSION, 6});
  } catch (const cv::Exception& e) {
    throw IoError("cannot write PNG '" + path.string() + "': " + e.what());
  }
  if (!ok) throw IoError("cannot write PNG '" + path.string() + "'");
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw ShapeError("write_png expects 1 or 3 channels, got " + std::to_string(image.channels));
  }
  cv::Mat mat(image.height, image.width, image.channels == 1 ? CV_8UC1 : CV_8UC3);
  for (int y = 0; y < image.height; ++y) {
    auto* row = mat.ptr<std::uint8_t>(y);
    for (int x = 0; x < image.width; ++x) {
      if (image.channels == 1) {
        row[x] = to_byte(image.at(y, x, 0));
      } else {
        // OpenCV stores BGR.
        row[3 * x + 0] = to_byte(image.at(y, x, 2));
        row[3 * x + 1] = to_byte(image.at(y, x, 1));
        row[3 * x + 2] = to_byte(image.at(y, x, 0));
      }
    }
  }
  write_mat(path, mat);
}

void write_png(const std::filesystem::path& path, const RawImage& image) {
  if (image.channels != 1 && image.channels != 3 && image.channels != 4) {
    throw ShapeError("write_png expects 1, 3 or 4 channels, got " + std::to_string(image.channels));
  }
  const bool wide = image.max_value > 255;
  const int type = CV_MAKETYPE(wide ? CV_16U : CV_8U, image.channels);
  cv::Mat mat(image.height, image.width, type);
  std::size_t k = 0;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width * image.channels; ++x, ++k) {
      if (wide) {
        mat.ptr<std::uint16_t>(y)[x] = image.pixels[k];
      } else {
        mat.ptr<std::uint8_t>(y)[x] = static_cast<std::uint8_t>(image.pixels[k]);
      }
    }
  }
  if (image.channels == 3) cv::cvtColor(mat, mat, cv::COLOR_RGB2BGR);
  if (image.channels == 4) cv::cvtColor(mat, mat, cv::COLOR_RGBA2BGRA);
  write_mat(path, mat);
}

}  // namespace pcos
