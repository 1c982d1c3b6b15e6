#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pcos {

/// Diagnostic class of an ultrasound frame. The positive class is `infected`.
enum class Label : std::uint8_t { notinfected = 0, infected = 1 };

std::string_view to_string(Label label);
std::optional<Label> parse_label(std::string_view text);

/// Infected-probability encoding of a hard label: 1 for infected, 0 otherwise.
inline double label_value(Label label) { return label == Label::infected ? 1.0 : 0.0; }

/// Decoded image with integer samples, interleaved row-major (HWC).
/// Channel order is RGB(A) or single-channel gray.
struct RawImage {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::uint32_t max_value = 255;  // 255 for 8-bit sources, 65535 for 16-bit
  std::vector<std::uint16_t> pixels;

  std::uint16_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

/// Real-valued image, interleaved row-major (HWC).
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> values;

  Image() = default;
  Image(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c),
        values(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double& at(int y, int x, int c) { return values[index(y, x, c)]; }
  double at(int y, int x, int c) const { return values[index(y, x, c)]; }
  bool same_shape(const Image& other) const {
    return height == other.height && width == other.width && channels == other.channels;
  }
  std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Decodes a PNG/JPEG/BMP/... file. Returns std::nullopt when the file is not a
/// decodable image.
std::optional<RawImage> decode_image(const std::filesystem::path& path);

/// Writes an RGB or gray Image with values in [0,1] as an 8-bit PNG.
/// Values are clamped and rounded to nearest. Throws IoError on failure.
void write_png(const std::filesystem::path& path, const Image& image);

/// Writes an integer image losslessly (8- or 16-bit PNG depending on max_value).
void write_png(const std::filesystem::path& path, const RawImage& image);

/// Quantizes [0,1] to 8-bit the same way write_png does.
std::uint8_t to_byte(double value);

}  // namespace pcos
