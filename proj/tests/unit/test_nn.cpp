#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include <gtest/gtest.h>

#include "pcos/errors.hpp"
#include "pcos/nn/archive.hpp"
#include "pcos/nn/backbones.hpp"
#include "pcos/nn/layers.hpp"

namespace pcos::nn {
namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.values()) v = u(rng);
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  return std::inner_product(a.values().begin(), a.values().end(), b.values().begin(), 0.0);
}

std::size_t parameter_count(Layer& layer, const std::string& prefix = "") {
  std::vector<StateEntry> entries;
  layer.state(prefix, entries);
  std::size_t n = 0;
  for (const auto& e : entries) {
    if (e.parameter) n += e.tensor->size();
  }
  return n;
}

// Central-difference check of the scalar L = <g, layer(x)> against backward().
void check_gradients(Layer& layer, const Tensor& x, std::uint64_t seed, double tol = 1e-6) {
  Rng rng(seed);
  const ForwardContext ctx{.training = true, .rng = nullptr};
  CachePtr cache;
  const Tensor y = layer.forward(x, ctx, &cache);
  const Tensor g = random_tensor(y.shape(), rng);
  GradStore grads;
  const Tensor dx = layer.backward(g, *cache, &grads);
  ASSERT_EQ(dx.shape(), x.shape());

  auto loss = [&](const Tensor& input) { return dot(g, layer.forward(input, ctx, nullptr)); };
  constexpr double kH = 1e-5;
  std::uniform_int_distribution<std::size_t> pick_x(0, x.size() - 1);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t i = pick_x(rng);
    Tensor plus = x, minus = x;
    plus[i] += kH;
    minus[i] -= kH;
    const double numeric = (loss(plus) - loss(minus)) / (2 * kH);
    ASSERT_NEAR(dx[i], numeric, tol * std::max(1.0, std::abs(numeric))) << layer.kind() << " dx[" << i << "]";
  }

  std::vector<StateEntry> entries;
  layer.state("", entries);
  for (const auto& e : entries) {
    if (!e.parameter) continue;
    const Tensor* grad = grads.find(*e.parameter);
    ASSERT_NE(grad, nullptr) << e.name;
    std::uniform_int_distribution<std::size_t> pick(0, e.tensor->size() - 1);
    for (int trial = 0; trial < 6; ++trial) {
      const std::size_t i = pick(rng);
      const double saved = (*e.tensor)[i];
      (*e.tensor)[i] = saved + kH;
      const double up = loss(x);
      (*e.tensor)[i] = saved - kH;
      const double down = loss(x);
      (*e.tensor)[i] = saved;
      const double numeric = (up - down) / (2 * kH);
      ASSERT_NEAR((*grad)[i], numeric, tol * std::max(1.0, std::abs(numeric)))
          << layer.kind() << " " << e.name << "[" << i << "]";
    }
  }
}

// Direct cross-correlation with explicit zero padding.
Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor* b, int stride, int pad) {
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), k = w.dim(2);
  const int oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensor y({n, cout, oh, ow});
  for (int s = 0; s < n; ++s) {
    for (int o = 0; o < cout; ++o) {
      for (int r = 0; r < oh; ++r) {
        for (int c = 0; c < ow; ++c) {
          double acc = b ? (*b)[o] : 0.0;
          for (int i = 0; i < cin; ++i) {
            for (int u = 0; u < k; ++u) {
              for (int v = 0; v < k; ++v) {
                const int yy = r * stride + u - pad, xx = c * stride + v - pad;
                if (yy < 0 || yy >= h || xx < 0 || xx >= wd) continue;
                acc += x.at(s, i, yy, xx) * w.at(o, i, u, v);
              }
            }
          }
          y.at(s, o, r, c) = acc;
        }
      }
    }
  }
  return y;
}

TEST(Conv2d, MatchesNaiveCrossCorrelation) {
  Rng rng(1);
  for (auto [k, stride, pad] : {std::tuple{3, 1, 1}, std::tuple{3, 2, 1}, std::tuple{1, 1, 0},
                                std::tuple{7, 2, 3}, std::tuple{1, 2, 0}}) {
    Conv2d conv(3, 5, k, stride, pad, true, rng);
    conv.bias().value = random_tensor({5}, rng);
    const Tensor x = random_tensor({2, 3, 11, 9}, rng);
    const Tensor y = conv.forward(x, {}, nullptr);
    const Tensor expected = naive_conv(x, conv.weight().value, &conv.bias().value, stride, pad);
    ASSERT_EQ(y.shape(), expected.shape());
    for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y[i], expected[i], 1e-12);
  }
}

TEST(Conv2d, RejectsWrongChannelCount) {
  Rng rng(1);
  Conv2d conv(3, 4, 3, 1, 1, false, rng);
  EXPECT_THROW(conv.forward(Tensor({1, 2, 5, 5}), {}, nullptr), ShapeError);
}

TEST(Gradients, Conv2d) {
  Rng rng(2);
  Conv2d conv(3, 4, 3, 2, 1, true, rng);
  check_gradients(conv, random_tensor({2, 3, 7, 6}, rng), 10);
}

TEST(Gradients, BatchNormTrainingMode) {
  Rng rng(3);
  BatchNorm2d bn(3);
  std::vector<StateEntry> entries;
  bn.state("", entries);
  for (auto& e : entries) {
    if (e.parameter) *e.tensor = random_tensor(e.tensor->shape(), rng, 0.5, 1.5);
  }
  check_gradients(bn, random_tensor({4, 3, 3, 3}, rng), 11, 1e-5);
}

TEST(Gradients, ReluPoolsLinear) {
  Rng rng(4);
  ReLU relu;
  check_gradients(relu, random_tensor({2, 3, 4, 4}, rng), 12);
  MaxPool2d maxpool(3, 2, 1);
  check_gradients(maxpool, random_tensor({2, 2, 7, 7}, rng), 13);
  AvgPool2d avgpool(2, 2);
  check_gradients(avgpool, random_tensor({2, 2, 6, 6}, rng), 14);
  GlobalAvgPool gap;
  check_gradients(gap, random_tensor({3, 4, 5, 5}, rng), 15);
  Linear fc(6, 3, rng);
  fc.bias().value = random_tensor({3}, rng);
  check_gradients(fc, random_tensor({4, 6}, rng), 16);
}

TEST(Gradients, CompositeBlocks) {
  Rng rng(5);
  Bottleneck projected(8, 4, 2, rng);
  check_gradients(projected, random_tensor({2, 8, 6, 6}, rng), 17, 1e-5);
  Bottleneck identity(16, 4, 1, rng);
  check_gradients(identity, random_tensor({2, 16, 4, 4}, rng), 18, 1e-5);
  DenseLayer dense(6, 4, 8, rng);
  check_gradients(dense, random_tensor({2, 6, 5, 5}, rng), 19, 1e-5);
}

TEST(Gradients, TinyBackboneAndHead) {
  Rng rng(6);
  Backbone tiny = make_tiny_backbone(rng);
  check_gradients(tiny.stages, random_tensor({2, 3, 8, 8}, rng), 20);
  Sequential head = make_head(8, 0.0, rng);
  check_gradients(head, random_tensor({2, 8, 4, 4}, rng), 21);
}

TEST(BatchNorm, RunningStatisticsFollowMomentum) {
  BatchNorm2d bn(1, 1e-5, 0.1);
  Tensor x({2, 1, 1, 2}, std::vector<double>{1.0, 3.0, 5.0, 7.0});
  bn.forward(x, {.training = true}, nullptr);
  std::vector<StateEntry> entries;
  bn.state("", entries);
  // batch mean 4, unbiased variance 20/3
  EXPECT_NEAR((*entries[2].tensor)[0], 0.9 * 0.0 + 0.1 * 4.0, 1e-12);
  EXPECT_NEAR((*entries[3].tensor)[0], 0.9 * 1.0 + 0.1 * 20.0 / 3.0, 1e-12);

  // Inference uses running statistics: (x - 0.4) / sqrt(var + eps).
  const Tensor y = bn.forward(x, {}, nullptr);
  const double var = 0.9 + 0.1 * 20.0 / 3.0;
  EXPECT_NEAR(y[0], (1.0 - 0.4) / std::sqrt(var + 1e-5), 1e-12);
}

TEST(Dropout, InvertedScalingAndIdentityAtInference) {
  Dropout drop(0.5);
  Tensor x({1, 10000}, 1.0);
  EXPECT_EQ(drop.forward(x, {}, nullptr), x);
  Rng rng(3);
  const Tensor y = drop.forward(x, {.training = true, .rng = &rng}, nullptr);
  std::size_t kept = 0;
  for (double v : y.values()) {
    ASSERT_TRUE(v == 0.0 || v == 2.0);
    kept += v != 0.0;
  }
  EXPECT_NEAR(static_cast<double>(kept) / 10000.0, 0.5, 0.03);
  EXPECT_THROW(drop.forward(x, {.training = true}, nullptr), Error);
  EXPECT_THROW(Dropout(1.0), ParameterError);
}

TEST(Archive, RoundTripPreservesNamesShapesAndBits) {
  Rng rng(8);
  const Tensor a = random_tensor({2, 3, 1, 4}, rng);
  const Tensor b({5}, std::vector<double>{0.0, -0.0, 1e-300, -7.5, 3.0});
  std::stringstream buffer;
  write_tensors(buffer, {{"layer.a", &a}, {"b", &b}});
  const TensorMap back = read_tensors(buffer);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back.at("layer.a"), a);
  EXPECT_EQ(back.at("b"), b);
  EXPECT_TRUE(std::signbit(back.at("b")[1]));
}

TEST(Archive, RejectsBadMagicAndTruncation) {
  std::stringstream bad("NOTATENSORFILE");
  EXPECT_THROW(read_tensors(bad), Error);

  const Tensor a({4}, 1.0);
  std::stringstream buffer;
  write_tensors(buffer, {{"a", &a}});
  std::string bytes = buffer.str();
  bytes.resize(bytes.size() - 3);
  std::stringstream cut(bytes);
  EXPECT_THROW(read_tensors(cut), Error);
}

TEST(Backbones, TinyShapesAndState) {
  Rng rng(1);
  Backbone tiny = make_tiny_backbone(rng);
  const Tensor y = tiny.stages.forward(Tensor({2, 3, 16, 16}), {}, nullptr);
  EXPECT_EQ(y.shape(), (Shape{2, 8, 8, 8}));
  std::vector<StateEntry> entries;
  tiny.stages.state("", entries);
  std::vector<std::string> names;
  for (const auto& e : entries) names.push_back(e.name);
  EXPECT_EQ(names, (std::vector<std::string>{"conv1.weight", "conv1.bias", "conv2.weight",
                                             "conv2.bias"}));
  EXPECT_EQ(parameter_count(tiny.stages), 3u * 8 * 9 + 8 + 8u * 8 * 9 + 8);
}

// Reference counts: torchvision totals minus their 1000-way classifiers
// (resnet50 25,557,032 - 2,049,000; densenet201 20,013,928 - 1,921,000).
TEST(Backbones, ResNet50ParameterCountAndShape) {
  Rng rng(1);
  Backbone net = make_resnet50(rng);
  EXPECT_EQ(parameter_count(net.stages), 23'508'032u);
  EXPECT_EQ(net.feature_channels, 2048);
  std::vector<StateEntry> entries;
  net.stages.state(net.state_prefix, entries);
  const auto has = [&](const std::string& name) {
    return std::any_of(entries.begin(), entries.end(), [&](const auto& e) { return e.name == name; });
  };
  EXPECT_TRUE(has("layer1.0.downsample.0.weight"));
  EXPECT_TRUE(has("layer4.2.bn3.running_var"));
  EXPECT_TRUE(has("bn1.running_mean"));
  const Tensor y = net.stages.forward(Tensor({1, 3, 64, 64}, 0.5), {}, nullptr);
  EXPECT_EQ(y.shape(), (Shape{1, 2048, 2, 2}));
}

TEST(Backbones, DenseNet201ParameterCountAndShape) {
  Rng rng(1);
  Backbone net = make_densenet201(rng);
  EXPECT_EQ(parameter_count(net.stages), 18'092'928u);
  EXPECT_EQ(net.feature_channels, 1920);
  std::vector<StateEntry> entries;
  net.stages.state(net.state_prefix, entries);
  EXPECT_EQ(entries.front().name, "features.conv0.weight");
  EXPECT_EQ(entries.back().name, "features.norm5.running_var");
  const Tensor y = net.stages.forward(Tensor({1, 3, 64, 64}, 0.5), {}, nullptr);
  EXPECT_EQ(y.shape(), (Shape{1, 1920, 2, 2}));
}

TEST(Sequential, ForwardRangeComposes) {
  Rng rng(2);
  Backbone tiny = make_tiny_backbone(rng);
  const Tensor x = random_tensor({1, 3, 8, 8}, rng);
  const Tensor mid = tiny.stages.forward_range(x, {}, 0, 2, nullptr);
  const Tensor end = tiny.stages.forward_range(mid, {}, 2, tiny.stages.size(), nullptr);
  EXPECT_EQ(end, tiny.stages.forward(x, {}, nullptr));
  EXPECT_EQ(tiny.stages.find("relu2"), 3u);
  EXPECT_EQ(tiny.stages.find("missing"), tiny.stages.size());
}

}  // namespace
}  // namespace pcos::nn
