#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pcos/dataset.hpp"
#include "pcos/image.hpp"
#include "pcos/model.hpp"

namespace pcos::testing {

/// Unique directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "pcos");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

Image constant_image(int size, double value, int channels = 3);
Image random_image(int size, std::uint64_t seed);

/// Bright (infected) versus dark (notinfected) images: a per-image level in
/// [0.6, 0.9] or [0.1, 0.4] plus uniform pixel noise of +-0.05. Separable by
/// mean intensity at 0.5. Labels alternate, starting with infected.
std::vector<dataset::LabeledImage> separable_set(std::size_t count, int size, std::uint64_t seed);

/// Writes 8-bit gray PNGs with distinct content to <root>/infected and
/// <root>/notinfected, following the separable_set brightness convention.
void write_png_dataset(const std::filesystem::path& root, int infected, int notinfected, int size,
                       std::uint64_t seed);

model::ModelHandle tiny_model(int input_size, std::uint64_t seed = 0);

/// Reads a whole file as bytes.
std::string slurp(const std::filesystem::path& path);

}  // namespace pcos::testing
