#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace pcos::plot {

using Rgb = std::array<std::uint8_t, 3>;

struct Series {
  std::string name;
  std::vector<double> values;  ///< y values at x = 1, 2, ...
  Rgb color{0, 0, 0};
};

/// Fixed-size (800x500) line chart. Output bytes depend only on the inputs.
void line_chart(const std::filesystem::path& path, const std::string& title,
                const std::string& y_label, const std::vector<Series>& series);

/// 2x2 count heatmap; rows are actual classes, columns predicted.
void confusion_heatmap(const std::filesystem::path& path, const std::string& title,
                       const std::array<std::array<std::uint64_t, 2>, 2>& counts,
                       const std::array<std::string, 2>& class_names);

}  // namespace pcos::plot
