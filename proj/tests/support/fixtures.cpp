#include "fixtures.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <tuple>

#include <unistd.h>

namespace pcos::testing {

namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

Image constant_image(int size, double value, int channels) {
  return Image(size, size, channels, value);
}

Image random_image(int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(size, size, 3);
  for (double& v : img.values) v = u(rng);
  return img;
}

namespace {

double level_for(bool infected, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 0.3);
  return (infected ? 0.6 : 0.1) + u(rng);
}

}  // namespace

std::vector<dataset::LabeledImage> separable_set(std::size_t count, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(-0.05, 0.05);
  std::vector<dataset::LabeledImage> out;
  for (std::size_t i = 0; i < count; ++i) {
    const bool infected = i % 2 == 0;
    const double level = level_for(infected, rng);
    Image img(size, size, 3);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double v = level + noise(rng);
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = v;
      }
    }
    out.push_back({std::move(img), infected ? Label::infected : Label::notinfected,
                   "synthetic-" + std::to_string(i)});
  }
  return out;
}

void write_png_dataset(const fs::path& root, int infected, int notinfected, int size,
                       std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> noise(-12, 12);
  for (const auto& [name, count, is_infected] :
       {std::tuple{"infected", infected, true}, std::tuple{"notinfected", notinfected, false}}) {
    fs::create_directories(root / name);
    for (int i = 0; i < count; ++i) {
      const double level = level_for(is_infected, rng);
      RawImage raw;
      raw.height = size;
      raw.width = size;
      raw.channels = 1;
      raw.max_value = 255;
      raw.pixels.resize(static_cast<std::size_t>(size) * size);
      for (auto& p : raw.pixels) {
        p = static_cast<std::uint16_t>(std::clamp(static_cast<int>(level * 255) + noise(rng), 0, 255));
      }
      char file[32];
      std::snprintf(file, sizeof file, "img_%03d.png", i);
      write_png(root / name / file, raw);
    }
  }
}

model::ModelHandle tiny_model(int input_size, std::uint64_t seed) {
  model::BackboneSpec spec;
  spec.kind = model::BackboneKind::tiny_test;
  spec.input_size = input_size;
  return model::build_model(spec, seed);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace pcos::testing
