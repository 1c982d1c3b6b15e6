#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "pcos/errors.hpp"
#include "pcos/eval.hpp"

namespace pcos::eval {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

bool parse_alpha(const std::string& text, double& out) {
  const std::string t = trim(text);
  if (t.empty()) return false;
  std::istringstream in(t);
  in.imbue(std::locale::classic());
  std::string rest;
  return (in >> out) && !(in >> rest) && std::isfinite(out) && out >= 0.0;
}

}  // namespace

std::vector<AlphaPair> parse_grid(std::istream& in) {
  std::vector<AlphaPair> grid;
  std::string line;
  int line_no = 0;
  bool first_content = true;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    if (first_content && t.rfind("mixup_alpha", 0) == 0) {
      first_content = false;
      continue;
    }
    first_content = false;
    const auto comma = t.find(',');
    AlphaPair pair;
    if (comma == std::string::npos || t.find(',', comma + 1) != std::string::npos ||
        !parse_alpha(t.substr(0, comma), pair.mixup_alpha) ||
        !parse_alpha(t.substr(comma + 1), pair.cutmix_alpha)) {
      throw ConfigError(fmt::format(
          "grid line {}: expected 'mixup_alpha,cutmix_alpha' with non-negative numbers, got '{}'",
          line_no, t));
    }
    grid.push_back(pair);
  }
  if (grid.empty()) throw ConfigError("grid contains no alpha pairs");
  return grid;
}

std::vector<AlphaPair> read_grid(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read grid file " + path.string());
  return parse_grid(in);
}

bool SweepReport::all_ok() const {
  return std::all_of(rows.begin(), rows.end(), [](const SweepResult& r) { return r.ok; });
}

void write_sweep_report(const fs::path& path, const SweepReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << kSweepHeader << '\n';
  for (const auto& r : report.rows) {
    if (r.ok) {
      out << fmt::format("{},{},{},{},{}\n", r.mixup_alpha, r.cutmix_alpha, r.val_accuracy,
                         r.val_loss, r.run_dir.generic_string());
    } else {
      out << fmt::format("{},{},failed,failed,{}\n", r.mixup_alpha, r.cutmix_alpha,
                         r.run_dir.generic_string());
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

SweepReport sweep(const std::vector<AlphaPair>& grid, const model::TrainConfig& base_config,
                  const SweepInputs& inputs, const fs::path& out_root) {
  if (grid.empty()) throw ConfigError("sweep grid is empty");
  if (inputs.train == nullptr || inputs.val == nullptr) {
    throw ConfigError("sweep requires train and validation splits");
  }
  std::error_code ec;
  fs::create_directories(out_root, ec);
  if (ec) throw IoError("cannot create " + out_root.string() + ": " + ec.message());

  SweepReport report;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    SweepResult row;
    row.mixup_alpha = grid[i].mixup_alpha;
    row.cutmix_alpha = grid[i].cutmix_alpha;
    row.run_dir = out_root / fmt::format("run_{:02}_mixup{}_cutmix{}", i + 1, row.mixup_alpha,
                                         row.cutmix_alpha);
    try {
      model::TrainConfig config = base_config;
      config.mixup_alpha = row.mixup_alpha;
      config.cutmix_alpha = row.cutmix_alpha;
      auto handle = model::build_model(inputs.backbone, config.seed, inputs.weights_dir);
      handle.set_preprocess(inputs.preprocess);
      const auto result = model::train(handle, *inputs.train, *inputs.val, config, row.run_dir);
      const auto& best = result.history.best();
      row.val_accuracy = best.val_accuracy;
      row.val_loss = best.val_loss;
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
    report.rows.push_back(std::move(row));
  }
  write_sweep_report(out_root / "sweep_report.csv", report);
  return report;
}

}  // namespace pcos::eval
