#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <gtest/gtest.h>
#include <opencv2/imgcodecs.hpp>

#include "fixtures.hpp"
#include "pcos/dataset.hpp"
#include "pcos/errors.hpp"

namespace pcos::dataset {
namespace {

using testing::TempDir;
namespace fs = std::filesystem;

RawImage gray(int height, int width, std::uint32_t max_value = 255) {
  RawImage r;
  r.height = height;
  r.width = width;
  r.channels = 1;
  r.max_value = max_value;
  r.pixels.assign(static_cast<std::size_t>(height) * width, 0);
  return r;
}

ImageRecord record(const std::string& id, Label label) {
  return {id, "mem/" + id + ".png", label, 8, 8, 1};
}

DatasetManifest synthetic_manifest(std::size_t infected, std::size_t notinfected) {
  DatasetManifest m;
  for (std::size_t i = 0; i < infected; ++i) m.records.push_back(record("i" + std::to_string(i), Label::infected));
  for (std::size_t i = 0; i < notinfected; ++i) {
    m.records.push_back(record("n" + std::to_string(i), Label::notinfected));
  }
  return m;
}

// scan_dataset

TEST(ScanDataset, CountsMatchDirectoryContents) {
  TempDir dir;
  testing::write_png_dataset(dir.path(), 2, 3, 16, 1);
  const auto m = scan_dataset(dir.path());
  EXPECT_EQ(m.records.size(), 5u);
  EXPECT_EQ(m.class_counts().at(Label::infected), 2u);
  EXPECT_EQ(m.class_counts().at(Label::notinfected), 3u);
  EXPECT_TRUE(m.skipped.empty());
  EXPECT_EQ(m.records.front().label, Label::infected);
  EXPECT_EQ(m.records.back().label, Label::notinfected);
}

TEST(ScanDataset, UndecodableFilesAreListedNotDropped) {
  TempDir dir;
  testing::write_png_dataset(dir.path(), 1, 1, 8, 2);
  std::ofstream(dir.path() / "infected" / "broken.png") << "not an image";
  const auto m = scan_dataset(dir.path());
  EXPECT_EQ(m.records.size(), 2u);
  ASSERT_EQ(m.skipped.size(), 1u);
  EXPECT_EQ(m.skipped[0].path.filename(), "broken.png");
}

TEST(ScanDataset, MissingClassDirectoryNamesLayout) {
  TempDir dir;
  fs::create_directories(dir.path() / "infected");
  try {
    scan_dataset(dir.path());
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("notinfected"), std::string::npos);
  }
}

TEST(ScanDataset, EmptyDirectoriesRaiseEmptyDataset) {
  TempDir dir;
  fs::create_directories(dir.path() / "infected");
  fs::create_directories(dir.path() / "notinfected");
  EXPECT_THROW(scan_dataset(dir.path()), EmptyDatasetError);
}

// content ids and dedup

TEST(ContentId, ReencodedPixelsShareId) {
  TempDir dir;
  fs::create_directories(dir.path() / "infected");
  fs::create_directories(dir.path() / "notinfected");
  cv::Mat img(10, 12, CV_8UC1);
  for (int y = 0; y < 10; ++y) {
    for (int x = 0; x < 12; ++x) img.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(y * 12 + x);
  }
  cv::imwrite((dir.path() / "infected" / "a.png").string(), img);
  cv::imwrite((dir.path() / "infected" / "b.bmp").string(), img);
  cv::imwrite((dir.path() / "notinfected" / "c.png").string(), cv::Mat(img + 1));
  const auto m = scan_dataset(dir.path());
  ASSERT_EQ(m.records.size(), 3u);
  EXPECT_EQ(m.records[0].id, m.records[1].id);
  EXPECT_NE(m.records[0].id, m.records[2].id);

  const auto d = dedup(m);
  EXPECT_EQ(d.removed, 1u);
  ASSERT_EQ(d.manifest.records.size(), 2u);
  EXPECT_EQ(d.manifest.records[0].source_path.filename(), "a.png");
}

TEST(Dedup, DistinctRecordsUnchangedAndIdempotent) {
  const auto m = synthetic_manifest(3, 4);
  const auto once = dedup(m);
  EXPECT_EQ(once.removed, 0u);
  EXPECT_EQ(once.manifest, m);
  const auto twice = dedup(once.manifest);
  EXPECT_EQ(twice.removed, 0u);
  EXPECT_EQ(twice.manifest, once.manifest);
}

TEST(Dedup, IdempotentWithDuplicates) {
  auto m = synthetic_manifest(2, 2);
  m.records.push_back(m.records[0]);
  m.records.push_back(m.records[3]);
  const auto once = dedup(m);
  EXPECT_EQ(once.removed, 2u);
  const auto twice = dedup(once.manifest);
  EXPECT_EQ(twice.removed, 0u);
  EXPECT_EQ(twice.manifest, once.manifest);
}

// preprocess

TEST(Preprocess, SquareInputShape) {
  const auto raw = gray(448, 448);
  const Image out = preprocess(raw, {});
  EXPECT_EQ(out.height, 224);
  EXPECT_EQ(out.width, 224);
  EXPECT_EQ(out.channels, 3);
}

TEST(Preprocess, MaxIntensityMapsToOne) {
  for (std::uint32_t max_value : {255u, 65535u}) {
    auto raw = gray(37, 53, max_value);
    std::fill(raw.pixels.begin(), raw.pixels.end(), static_cast<std::uint16_t>(max_value));
    const Image out = preprocess(raw, {});
    for (double v : out.values) ASSERT_DOUBLE_EQ(v, 1.0);
  }
}

TEST(Preprocess, GrayReplicatedToThreeChannels) {
  const auto raw = [] {
    auto r = gray(30, 30);
    for (std::size_t i = 0; i < r.pixels.size(); ++i) r.pixels[i] = static_cast<std::uint16_t>(i % 251);
    return r;
  }();
  const Image out = preprocess(raw, {.target_size = 20});
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      EXPECT_EQ(out.at(y, x, 0), out.at(y, x, 1));
      EXPECT_EQ(out.at(y, x, 0), out.at(y, x, 2));
    }
  }
}

// Bilinear interpolation reproduces affine functions exactly away from the
// clamped border, so a ramp image has a closed-form expected output: the
// source coordinate of each kept column.
double expected_ramp(int dst, int crop_offset, int src_extent, int resized_extent, double step,
                     double max_value) {
  double src = (dst + crop_offset + 0.5) * src_extent / resized_extent - 0.5;
  src = std::clamp(src, 0.0, static_cast<double>(src_extent - 1));
  return src * step / max_value;
}

TEST(Preprocess, WideRampMatchesIndexArithmetic) {
  // 300 wide x 200 tall: short side 200 -> 224, long side 300 -> 336,
  // crop offset (336 - 224) / 2 = 56 columns.
  constexpr int kW = 300, kH = 200;
  constexpr double kStep = 200.0;
  auto raw = gray(kH, kW, 65535);
  for (int y = 0; y < kH; ++y) {
    for (int x = 0; x < kW; ++x) raw.pixels[y * kW + x] = static_cast<std::uint16_t>(x * kStep);
  }
  const Image out = preprocess(raw, {});
  ASSERT_EQ(out.height, 224);
  ASSERT_EQ(out.width, 224);
  for (int y = 0; y < 224; y += 17) {
    for (int x = 0; x < 224; ++x) {
      ASSERT_NEAR(out.at(y, x, 0), expected_ramp(x, 56, kW, 336, kStep, 65535.0), 1e-12)
          << "x=" << x;
    }
  }
}

TEST(Preprocess, TallRampMatchesIndexArithmetic) {
  // 200 wide x 300 tall: crop offset 56 rows.
  constexpr int kW = 200, kH = 300;
  constexpr double kStep = 150.0;
  auto raw = gray(kH, kW, 65535);
  for (int y = 0; y < kH; ++y) {
    for (int x = 0; x < kW; ++x) raw.pixels[y * kW + x] = static_cast<std::uint16_t>(y * kStep);
  }
  const Image out = preprocess(raw, {});
  for (int y = 0; y < 224; ++y) {
    for (int x = 0; x < 224; x += 23) {
      ASSERT_NEAR(out.at(y, x, 1), expected_ramp(y, 56, kH, 336, kStep, 65535.0), 1e-12)
          << "y=" << y;
    }
  }
}

TEST(Preprocess, SmallRampCropIndices) {
  // 6x4 -> target 4: width 6 resized to 6 (no scale), crop columns 1..4.
  auto raw = gray(4, 6);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 6; ++x) raw.pixels[y * 6 + x] = static_cast<std::uint16_t>(10 * x);
  }
  const Image out = preprocess(raw, {.target_size = 4});
  for (int x = 0; x < 4; ++x) EXPECT_NEAR(out.at(2, x, 0), 10.0 * (x + 1) / 255.0, 1e-12);
}

TEST(Preprocess, OutputRangeProperty) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const int h = 1 + static_cast<int>(rng() % 90);
    const int w = 1 + static_cast<int>(rng() % 90);
    const bool deep = trial % 2 == 1;
    RawImage raw;
    raw.height = h;
    raw.width = w;
    raw.channels = (trial % 3 == 0) ? 3 : 1;
    raw.max_value = deep ? 65535 : 255;
    raw.pixels.resize(static_cast<std::size_t>(h) * w * raw.channels);
    for (auto& p : raw.pixels) p = static_cast<std::uint16_t>(rng() % (raw.max_value + 1));
    const Image out = preprocess(raw, {.target_size = 1 + static_cast<int>(rng() % 40)});
    const auto [lo, hi] = std::minmax_element(out.values.begin(), out.values.end());
    ASSERT_GE(*lo, 0.0);
    ASSERT_LE(*hi, 1.0);
  }
}

TEST(Preprocess, ZeroDimensionIsInvalid) {
  RawImage raw;
  raw.channels = 1;
  EXPECT_THROW(preprocess(raw, {}), InvalidImageError);
}

TEST(Preprocess, StandardizeIsOptIn) {
  auto raw = gray(8, 8);
  std::fill(raw.pixels.begin(), raw.pixels.end(), 255);
  PreprocessConfig config{.target_size = 8, .standardize = true};
  const Image out = preprocess(raw, config);
  EXPECT_NEAR(out.at(0, 0, 0), (1.0 - 0.485) / 0.229, 1e-12);
  EXPECT_NEAR(out.at(0, 0, 2), (1.0 - 0.406) / 0.225, 1e-12);
}

// split

TEST(Split, TenRecordsTwentyPercentTest) {
  const auto m = synthetic_manifest(5, 5);
  const auto s = split(m, {.train_fraction = 0.7, .val_fraction = 0.1, .test_fraction = 0.2,
                           .seed = 3});
  std::map<Label, int> test_per_class;
  for (std::size_t i : s.indices(Split::test)) ++test_per_class[s.records[i].label];
  EXPECT_EQ(test_per_class[Label::infected], 1);
  EXPECT_EQ(test_per_class[Label::notinfected], 1);
}

TEST(Split, DeterministicForSeed) {
  const auto m = synthetic_manifest(17, 23);
  const SplitSpec spec{.seed = 99};
  EXPECT_EQ(split(m, spec).split_assignment, split(m, spec).split_assignment);
  EXPECT_NE(split(m, spec).split_assignment, split(m, {.seed = 100}).split_assignment);
}

// Oracle: shuffle each class's index list with the documented generator and
// cut it by explicitly counted sizes.
TEST(Split, ThirtyEightFortyRecordsMatchCountingOracle) {
  constexpr std::size_t kInfected = 1600, kNot = 2240;  // 3,840 records
  const auto m = synthetic_manifest(kInfected, kNot);
  const SplitSpec spec{.seed = 2024};
  const auto s = split(m, spec);

  std::mt19937_64 rng(spec.seed);
  std::map<std::string, Split> expected;
  std::size_t offset = 0;
  for (std::size_t n : {kInfected, kNot}) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = offset + i;
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t train_n = n * 8 / 10, val_n = n / 10;
    for (std::size_t k = 0; k < n; ++k) {
      expected[m.records[idx[k]].id] =
          k < train_n ? Split::train : (k < train_n + val_n ? Split::val : Split::test);
    }
    offset += n;
  }
  EXPECT_EQ(s.split_assignment, expected);
  EXPECT_EQ(s.indices(Split::test).size(), 384u);
  EXPECT_EQ(s.indices(Split::val).size(), 384u);
  EXPECT_EQ(s.indices(Split::train).size(), 3072u);
}

TEST(Split, PartitionAndStratificationProperties) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t a = 3 + rng() % 200, b = 3 + rng() % 200;
    const auto m = synthetic_manifest(a, b);
    const auto s = split(m, {.seed = rng()});
    ASSERT_EQ(s.split_assignment.size(), m.records.size());
    std::set<std::string> seen;
    std::size_t total = 0;
    for (Split k : {Split::train, Split::val, Split::test}) {
      for (std::size_t i : s.indices(k)) {
        ASSERT_TRUE(seen.insert(s.records[i].id).second);
        ++total;
      }
    }
    ASSERT_EQ(total, m.records.size());

    const auto test = s.indices(Split::test);
    ASSERT_FALSE(test.empty());
    const double test_infected = static_cast<double>(std::count_if(
        test.begin(), test.end(), [&](std::size_t i) { return s.records[i].label == Label::infected; }));
    const double ratio_test = test_infected / static_cast<double>(test.size());
    const double ratio_all = static_cast<double>(a) / static_cast<double>(a + b);
    ASSERT_LE(std::abs(ratio_test - ratio_all), 1.0 / static_cast<double>(test.size()) + 1e-12)
        << a << "/" << b;

    for (auto [label, n] : {std::pair{Label::infected, a}, std::pair{Label::notinfected, b}}) {
      for (auto [k, frac] : {std::pair{Split::train, 0.8}, std::pair{Split::val, 0.1},
                             std::pair{Split::test, 0.1}}) {
        const auto idx = s.indices(k);
        const double got = static_cast<double>(std::count_if(
            idx.begin(), idx.end(), [&](std::size_t i) { return s.records[i].label == label; }));
        // Within one of the quota once every quota is at least one.
        if (0.1 * static_cast<double>(n) >= 1.0) ASSERT_LT(std::abs(got - frac * n), 1.0 + 1e-9);
      }
    }
  }
}

TEST(Split, TooFewRecordsIsInfeasible) {
  EXPECT_THROW(split(synthetic_manifest(2, 10), {}), InfeasibleSplitError);
}

TEST(Split, FractionsMustSumToOne) {
  EXPECT_THROW(split(synthetic_manifest(10, 10), {.train_fraction = 0.8, .val_fraction = 0.1,
                                                   .test_fraction = 0.2}),
               ConfigError);
}

TEST(Apportion, LargestRemainder) {
  EXPECT_EQ(apportion(10, {}), (std::array<std::size_t, 3>{8, 1, 1}));
  EXPECT_EQ(apportion(162, {}), (std::array<std::size_t, 3>{130, 16, 16}));
  EXPECT_EQ(apportion(5, {}), (std::array<std::size_t, 3>{3, 1, 1}));
}

// manifest serialization

TEST(Manifest, FieldOrderAndRoundTrip) {
  auto m = split(synthetic_manifest(4, 4), {.seed = 1});
  std::ostringstream out;
  write_manifest(out, m);
  const std::string text = out.str();
  const std::string first = text.substr(0, text.find('\n'));
  const auto pos = [&](const char* key) { return first.find(std::string("\"") + key + "\""); };
  EXPECT_LT(pos("id"), pos("path"));
  EXPECT_LT(pos("path"), pos("label"));
  EXPECT_LT(pos("label"), pos("split"));
  EXPECT_LT(pos("split"), pos("width"));
  std::istringstream in(text);
  EXPECT_EQ(read_manifest(in), m);
}

TEST(Manifest, ScanDedupSplitIsByteReproducible) {
  TempDir dir;
  testing::write_png_dataset(dir.path(), 6, 7, 12, 4);
  auto run = [&] {
    std::ostringstream out;
    write_manifest(out, split(dedup(scan_dataset(dir.path())).manifest, {.seed = 8}));
    return out.str();
  };
  EXPECT_EQ(run(), run());
}

TEST(ManifestSource, LoadsPreprocessedSplit) {
  TempDir dir;
  testing::write_png_dataset(dir.path(), 5, 5, 20, 6);
  const auto m = split(dedup(scan_dataset(dir.path())).manifest, {.seed = 1});
  const ManifestSource lazy(m, Split::train, {.target_size = 16}, false);
  const ManifestSource eager(m, Split::train, {.target_size = 16}, true);
  ASSERT_EQ(lazy.size(), m.indices(Split::train).size());
  for (std::size_t i = 0; i < lazy.size(); ++i) {
    const auto a = lazy.get(i);
    EXPECT_EQ(a.image.height, 16);
    EXPECT_EQ(a.image.channels, 3);
    EXPECT_EQ(a.image, eager.get(i).image);
    EXPECT_EQ(a.label, lazy.label(i));
  }
}

}  // namespace
}  // namespace pcos::dataset
