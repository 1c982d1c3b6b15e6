#include <gtest/gtest.h>

#include "pcos/errors.hpp"
#include "run_config.hpp"

namespace pcos::cli {
namespace {

using nlohmann::json;

std::string error_of(const json& doc) {
  try {
    apply_json(default_config(), doc);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

TEST(RunConfig, DefaultsAreValidTinyRun) {
  const auto c = default_config();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.backbone.kind, model::BackboneKind::tiny_test);
  EXPECT_EQ(c.train.max_epochs, 30);
  EXPECT_EQ(c.train.patience, 5);
  EXPECT_EQ(c.train.batch_size, 32);
  EXPECT_EQ(c.split.train_fraction, 0.8);
}

TEST(RunConfig, BackboneKindSelectsEpochBudgetUnlessOverridden) {
  auto c = apply_json(default_config(), json::parse(R"({"backbone": {"kind": "densenet201"}})"));
  EXPECT_EQ(c.train.max_epochs, 98);
  EXPECT_EQ(c.train.patience, 15);
  c = apply_json(default_config(),
                 json::parse(R"({"backbone": {"kind": "resnet50"}, "train": {"patience": 4}})"));
  EXPECT_EQ(c.train.max_epochs, 67);
  EXPECT_EQ(c.train.patience, 4);
}

TEST(RunConfig, InputSizeDrivesPreprocessing) {
  const auto c = apply_json(default_config(), json::parse(R"({"backbone": {"input_size": 48}})"));
  EXPECT_EQ(c.preprocess.target_size, 48);
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, UnknownKeysAreNamed) {
  EXPECT_NE(error_of(json::parse(R"({"trian": {}})")).find("'trian'"), std::string::npos);
  EXPECT_NE(error_of(json::parse(R"({"train": {"epochs": 3}})")).find("'train.epochs'"),
            std::string::npos);
  EXPECT_NE(error_of(json::parse(R"({"environment": {"HOME": "/"}})")).find("environment.HOME"),
            std::string::npos);
}

TEST(RunConfig, TypeAndLiteralErrors) {
  EXPECT_NE(error_of(json::parse(R"({"train": {"batch_size": "32"}})")).find("train.batch_size"),
            std::string::npos);
  EXPECT_FALSE(error_of(json::parse(R"({"train": {"seed": -1}})")).empty());
  EXPECT_FALSE(error_of(json::parse(R"({"train": {"optimizer": "sgd"}})")).empty());
  EXPECT_FALSE(error_of(json::parse(R"({"backbone": {"kind": "vgg"}})")).empty());
  EXPECT_FALSE(error_of(json::parse(R"({"explain": {"fill": "median"}})")).empty());
  EXPECT_FALSE(error_of(json::parse(R"([1, 2])")).empty());
  EXPECT_TRUE(error_of(json::parse(R"({"train": {"optimizer": "adam"}})")).empty());
}

TEST(RunConfig, ExplainFill) {
  auto c = apply_json(default_config(), json::parse(R"({"explain": {"fill": 0.25}})"));
  EXPECT_EQ(c.explain.fill, 0.25);
  c = apply_json(c, json::parse(R"({"explain": {"fill": "mean"}})"));
  EXPECT_FALSE(c.explain.fill.has_value());
}

TEST(RunConfig, ValidationCatchesInconsistentValues) {
  auto c = default_config();
  c.split.test_fraction = 0.3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = default_config();
  c.backbone.kind = model::BackboneKind::resnet50;
  c.backbone.pretrained = true;
  EXPECT_THROW(c.validate(), ConfigError);
  c.weights_dir = "/tmp";
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, SnapshotRoundTrips) {
  auto c = apply_json(default_config(), json::parse(R"({
    "data_root": "data", "manifest": "m.jsonl",
    "backbone": {"kind": "resnet50", "input_size": 64, "dropout": 0.25},
    "train": {"batch_size": 8, "learning_rate": 0.001, "seed": 17},
    "augmentation": {"mixup_alpha": 0.2, "cutmix_alpha": 0.3},
    "split": {"seed": 3}, "explain": {"n_segments": 9, "fill": 0.5}})"));
  c.weights_dir_env = "/cache";
  const auto snapshot = to_json(c);
  const auto reloaded = apply_json(default_config(), json::parse(snapshot.dump()));
  // The environment block is a record of the run, not an input.
  EXPECT_FALSE(reloaded.weights_dir_env.has_value());
  auto again = to_json(reloaded);
  auto expected = snapshot;
  again.erase("environment");
  expected.erase("environment");
  EXPECT_EQ(again.dump(), expected.dump());

  std::vector<std::string> keys;
  for (const auto& [k, v] : snapshot.items()) keys.push_back(k);
  EXPECT_EQ(keys.front(), "data_root");
  EXPECT_EQ(keys.back(), "environment");
  EXPECT_EQ(snapshot["environment"][model::kWeightsDirEnv], "/cache");
}

TEST(RunConfig, DigestIgnoresOutputLocation) {
  auto a = default_config();
  auto b = a;
  b.out_root = "elsewhere";
  b.explain.n_segments = 4;
  EXPECT_EQ(config_digest(a), config_digest(b));
  EXPECT_EQ(config_digest(a).size(), 12u);
  b.train.seed = 99;
  EXPECT_NE(config_digest(a), config_digest(b));
}

}  // namespace
}  // namespace pcos::cli
