#include <cmath>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "cli.hpp"
#include "fixtures.hpp"
#include "pcos/dataset.hpp"
#include "pcos/eval.hpp"
#include "pcos/model.hpp"
#include "pcos/train.hpp"

namespace pcos::cli {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

// Small separable dataset plus fast training flags shared by the tests.
class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    ::unsetenv(model::kWeightsDirEnv);
    testing::write_png_dataset(data_.path(), 30, 30, 20, 7);
  }

  std::vector<std::string> fast(std::vector<std::string> args, int max_epochs = 25,
                                int patience = 5) const {
    const std::vector<std::string> common{
        "--data-root", data_.path().string(), "--out-root", (out_.path() / "runs").string(),
        "--input-size", "16", "--lr", "0.01", "--batch-size", "16",
        "--max-epochs", std::to_string(max_epochs), "--patience", std::to_string(patience)};
    args.insert(args.end(), common.begin(), common.end());
    return args;
  }

  TempDir data_{"cli-data"};
  TempDir out_{"cli-out"};
};

TEST_F(CliTest, IngestWritesReproducibleManifest) {
  const fs::path m1 = out_ / "a.jsonl", m2 = out_ / "b.jsonl";
  const auto r1 = run({"ingest", "--data-root", data_.path().string(), "--output", m1.string()});
  ASSERT_EQ(r1.code, 0) << r1.err;
  EXPECT_NE(r1.out.find("records: 60"), std::string::npos);
  EXPECT_NE(r1.out.find("infected: 30"), std::string::npos);
  EXPECT_NE(r1.out.find("duplicates removed: 0"), std::string::npos);
  ASSERT_EQ(run({"ingest", "--data-root", data_.path().string(), "--output", m2.string()}).code, 0);
  EXPECT_EQ(testing::slurp(m1), testing::slurp(m2));
  EXPECT_EQ(dataset::read_manifest(m1).records.size(), 60u);
}

TEST_F(CliTest, IngestTinyLayoutWithoutSplitAndWithDuplicates) {
  TempDir tiny("cli-tiny");
  testing::write_png_dataset(tiny.path(), 2, 3, 8, 1);
  fs::copy_file(tiny / "infected/img_000.png", tiny / "notinfected/copy.png");
  std::ofstream(tiny / "infected/readme.txt") << "x";
  const auto r = run({"ingest", "--data-root", tiny.path().string(), "--out-root",
                      (out_ / "tiny").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("records: 5"), std::string::npos);
  EXPECT_NE(r.out.find("duplicates removed: 1"), std::string::npos);
  EXPECT_NE(r.out.find("readme.txt"), std::string::npos);
  EXPECT_TRUE(fs::exists(out_ / "tiny" / "manifest.jsonl"));
}

TEST_F(CliTest, IngestMissingClassDirectoryIsUsageError) {
  TempDir bad("cli-bad");
  fs::create_directories(bad / "infected");
  const auto r = run({"ingest", "--data-root", bad.path().string(), "--out-root", out_.path().string()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("notinfected"), std::string::npos);
}

TEST_F(CliTest, UnknownFlagsAndMissingRequiredAreUsageErrors) {
  EXPECT_EQ(run({"train", "--no-such-flag"}).code, kExitUsage);
  EXPECT_EQ(run({"evaluate"}).code, kExitUsage);
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"train", "--backbone", "vgg16"}).code, kExitUsage);
}

TEST_F(CliTest, ConfigFileUnknownKeyIsUsageError) {
  std::ofstream(out_ / "c.json") << R"({"train": {"epochz": 3}})";
  const auto r = run({"train", "--config", (out_ / "c.json").string()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("train.epochz"), std::string::npos);
}

TEST_F(CliTest, TrainThenEvaluateAndExplain) {
  const fs::path run_dir = out_ / "run";
  const auto r = run(fast({"train", "--run-dir", run_dir.string()}));
  ASSERT_EQ(r.code, 0) << r.err << r.out;
  for (const char* f : {"config.json", "manifest.jsonl", "history.csv", "checkpoints/best.ckpt",
                        "checkpoints/best.txt", "plots/accuracy.png", "plots/loss.png",
                        "metrics/test_metrics.json", "metrics/test_metrics.csv",
                        "metrics/test_metrics_confusion.png"}) {
    EXPECT_TRUE(fs::exists(run_dir / f)) << f;
  }
  const auto metrics = nlohmann::json::parse(testing::slurp(run_dir / "metrics/test_metrics.json"));
  EXPECT_GE(metrics["accuracy"]["value"].get<double>(), 0.95);
  const auto snapshot = nlohmann::json::parse(testing::slurp(run_dir / "config.json"));
  EXPECT_EQ(snapshot["backbone"]["input_size"], 16);
  EXPECT_TRUE(snapshot["environment"][model::kWeightsDirEnv].is_null());

  // Evaluate reproduces the stored test metrics.
  const auto ev = run({"evaluate", "--checkpoint", (run_dir / "checkpoints/best.ckpt").string(),
                       "--manifest", (run_dir / "manifest.jsonl").string(), "--out",
                       (out_ / "eval").string(), "--split", "test"});
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_EQ(testing::slurp(out_ / "eval/test_metrics.json"),
            testing::slurp(run_dir / "metrics/test_metrics.json"));

  // Explanations.
  const fs::path image = data_ / "infected/img_004.png";
  const std::string ckpt = (run_dir / "checkpoints/best.ckpt").string();
  const auto gc = run({"explain", "--checkpoint", ckpt, "--image", image.string(), "--method",
                       "gradcam", "--out", (out_ / "x").string()});
  ASSERT_EQ(gc.code, 0) << gc.err;
  const cv::Mat overlay = cv::imread((out_ / "x/img_004.gradcam.overlay.png").string());
  ASSERT_FALSE(overlay.empty());
  EXPECT_EQ(overlay.rows, 16);
  EXPECT_EQ(overlay.cols, 16);
  EXPECT_TRUE(fs::exists(out_ / "x/img_004.gradcam.raw.png"));

  const auto too_many = run({"explain", "--checkpoint", ckpt, "--image", image.string(),
                             "--method", "shapley", "--segments", "20", "--out",
                             (out_ / "y").string()});
  EXPECT_EQ(too_many.code, kExitUsage);
  EXPECT_NE(too_many.err.find("14"), std::string::npos);
  EXPECT_FALSE(fs::exists(out_ / "y"));

  const auto bad_method = run({"explain", "--checkpoint", ckpt, "--image", image.string(),
                               "--method", "shap", "--out", (out_ / "y").string()});
  EXPECT_EQ(bad_method.code, kExitUsage);
  EXPECT_NE(bad_method.err.find("gradcam, lime, shapley"), std::string::npos);

  for (const char* dir : {"l1", "l2"}) {
    const auto lime = run({"explain", "--checkpoint", ckpt, "--image", image.string(), "--method",
                           "lime", "--segments", "4", "--samples", "200", "--lime-seed", "3",
                           "--out", (out_ / dir).string()});
    ASSERT_EQ(lime.code, 0) << lime.err;
  }
  EXPECT_EQ(testing::slurp(out_ / "l1/img_004.lime.weights.csv"),
            testing::slurp(out_ / "l2/img_004.lime.weights.csv"));

  const auto sh = run({"explain", "--checkpoint", ckpt, "--image", image.string(), "--method",
                       "shapley", "--segments", "4", "--out", (out_ / "s").string()});
  ASSERT_EQ(sh.code, 0) << sh.err;
  EXPECT_NE(testing::slurp(out_ / "s/img_004.shapley.weights.csv").find("# method: shapley"),
            std::string::npos);
}

TEST_F(CliTest, ZeroAlphasMatchOmittedAugmentation) {
  const auto plain = run(fast({"train", "--run-dir", (out_ / "plain").string()}, 3, 3));
  ASSERT_EQ(plain.code, 0) << plain.err;
  std::ofstream(out_ / "zero.json") << R"({"augmentation": {"mixup_alpha": 0, "cutmix_alpha": 0}})";
  const auto zero = run(fast({"train", "--run-dir", (out_ / "zero").string(), "--config",
                              (out_ / "zero.json").string()}, 3, 3));
  ASSERT_EQ(zero.code, 0) << zero.err;
  EXPECT_EQ(testing::slurp(out_ / "plain/history.csv"), testing::slurp(out_ / "zero/history.csv"));
}

TEST_F(CliTest, SweepReportsEveryGridRowInOrder) {
  std::ofstream(out_ / "grid.csv") << "mixup_alpha,cutmix_alpha\n0.2,0.2\n0.25,0.25\n0.3,0.3\n"
                                      "0.35,0.35\n0.4,0.4\n";
  const auto r = run(fast({"sweep", "--grid", (out_ / "grid.csv").string(), "--out",
                           (out_ / "sweep").string()}, 2, 1));
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream report(testing::slurp(out_ / "sweep/sweep_report.csv"));
  std::string line;
  std::getline(report, line);
  EXPECT_EQ(line, eval::kSweepHeader);
  std::vector<std::string> firsts;
  while (std::getline(report, line)) firsts.push_back(line.substr(0, line.find(',', line.find(',') + 1)));
  EXPECT_EQ(firsts, (std::vector<std::string>{"0.2,0.2", "0.25,0.25", "0.3,0.3", "0.35,0.35",
                                              "0.4,0.4"}));

  std::ofstream(out_ / "empty.csv") << "# nothing\n";
  EXPECT_EQ(run(fast({"sweep", "--grid", (out_ / "empty.csv").string()})).code, kExitUsage);
}

TEST_F(CliTest, EvaluateConstantModelMatchesHandCounts) {
  // Every weight zero and the output bias at logit(0.9): every image scores 0.9.
  auto handle = testing::tiny_model(16, 0);
  for (auto& e : handle.state()) e.tensor->fill(0.0);
  for (auto& e : handle.state()) {
    if (e.name == "head.fc.bias") e.tensor->fill(std::log(0.9 / 0.1));
  }
  model::save_checkpoint(handle, out_ / "stub.ckpt");

  const fs::path manifest = out_ / "m.jsonl";
  ASSERT_EQ(run({"ingest", "--data-root", data_.path().string(), "--output", manifest.string(),
                 "--with-split"}).code, 0);
  const auto m = dataset::read_manifest(manifest);
  std::size_t inf = 0, total = 0;
  for (std::size_t i : m.indices(dataset::Split::test)) {
    ++total;
    inf += m.records[i].label == Label::infected;
  }
  const auto r = run({"evaluate", "--checkpoint", (out_ / "stub.ckpt").string(), "--manifest",
                      manifest.string(), "--out", (out_ / "ev").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto doc = nlohmann::json::parse(testing::slurp(out_ / "ev/test_metrics.json"));
  EXPECT_EQ(doc["confusion_matrix"]["tp"], inf);
  EXPECT_EQ(doc["confusion_matrix"]["fp"], total - inf);
  EXPECT_EQ(doc["confusion_matrix"]["fn"], 0);
  EXPECT_EQ(doc["accuracy"]["numerator"], inf);
  EXPECT_EQ(doc["classes"]["notinfected"]["precision"]["denominator"], 0);
  EXPECT_FALSE(doc["annotations"].empty());
  EXPECT_NE(r.out.find("note: notinfected precision"), std::string::npos);
}

TEST_F(CliTest, AugmentPreviewWritesPairs) {
  const auto r = run({"augment-preview", "--data-root", data_.path().string(), "--count", "4",
                      "--mixup-alpha", "0.2", "--out", (out_ / "prev").string(), "--input-size",
                      "16"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (int i = 0; i < 4; ++i) {
    EXPECT_TRUE(fs::exists(out_ / "prev" / ("sample_0" + std::to_string(i) + "_after.png")));
  }
  const auto text = testing::slurp(out_ / "prev/preview.txt");
  EXPECT_NE(text.find("mixup"), std::string::npos);
}

}  // namespace
}  // namespace pcos::cli
