#include "pcos/nn/backbones.hpp"

#include <array>

namespace pcos::nn {

Backbone make_tiny_backbone(Rng& rng) {
  Backbone b;
  b.stages.add("conv1", std::make_unique<Conv2d>(3, 8, 3, 2, 1, true, rng))
      .add("relu1", std::make_unique<ReLU>())
      .add("conv2", std::make_unique<Conv2d>(8, 8, 3, 1, 1, true, rng))
      .add("relu2", std::make_unique<ReLU>());
  b.feature_layer = "relu2";
  b.feature_channels = 8;
  return b;
}

Backbone make_resnet50(Rng& rng) {
  Backbone b;
  b.stages.add("conv1", std::make_unique<Conv2d>(3, 64, 7, 2, 3, false, rng))
      .add("bn1", std::make_unique<BatchNorm2d>(64))
      .add("relu", std::make_unique<ReLU>())
      .add("maxpool", std::make_unique<MaxPool2d>(3, 2, 1));

  constexpr std::array<int, 4> kBlocks{3, 4, 6, 3};
  constexpr std::array<int, 4> kWidths{64, 128, 256, 512};
  int channels = 64;
  for (int stage = 0; stage < 4; ++stage) {
    auto layer = std::make_unique<Sequential>();
    for (int block = 0; block < kBlocks[stage]; ++block) {
      const int stride = (stage > 0 && block == 0) ? 2 : 1;
      layer->add(std::to_string(block),
                 std::make_unique<Bottleneck>(channels, kWidths[stage], stride, rng));
      channels = kWidths[stage] * Bottleneck::kExpansion;
    }
    b.stages.add("layer" + std::to_string(stage + 1), std::move(layer));
  }
  b.feature_layer = "layer4";
  b.feature_channels = channels;
  return b;
}

Backbone make_densenet201(Rng& rng) {
  constexpr int kGrowth = 32;
  constexpr int kBottleneck = 4 * kGrowth;
  constexpr std::array<int, 4> kBlocks{6, 12, 48, 32};

  Backbone b;
  b.state_prefix = "features.";
  int channels = 64;
  b.stages.add("conv0", std::make_unique<Conv2d>(3, channels, 7, 2, 3, false, rng))
      .add("norm0", std::make_unique<BatchNorm2d>(channels))
      .add("relu0", std::make_unique<ReLU>())
      .add("pool0", std::make_unique<MaxPool2d>(3, 2, 1));
  for (int block = 0; block < 4; ++block) {
    auto dense = std::make_unique<Sequential>();
    for (int i = 0; i < kBlocks[block]; ++i) {
      dense->add("denselayer" + std::to_string(i + 1),
                 std::make_unique<DenseLayer>(channels, kGrowth, kBottleneck, rng));
      channels += kGrowth;
    }
    b.stages.add("denseblock" + std::to_string(block + 1), std::move(dense));
    if (block < 3) {
      auto transition = std::make_unique<Sequential>();
      transition->add("norm", std::make_unique<BatchNorm2d>(channels))
          .add("relu", std::make_unique<ReLU>())
          .add("conv", std::make_unique<Conv2d>(channels, channels / 2, 1, 1, 0, false, rng))
          .add("pool", std::make_unique<AvgPool2d>(2, 2));
      channels /= 2;
      b.stages.add("transition" + std::to_string(block + 1), std::move(transition));
    }
  }
  b.stages.add("norm5", std::make_unique<BatchNorm2d>(channels))
      .add("relu5", std::make_unique<ReLU>());
  b.feature_layer = "relu5";
  b.feature_channels = channels;
  return b;
}

Sequential make_head(int channels, double dropout, Rng& rng) {
  Sequential head;
  head.add("pool", std::make_unique<GlobalAvgPool>())
      .add("dropout", std::make_unique<Dropout>(dropout))
      .add("fc", std::make_unique<Linear>(channels, 1, rng));
  return head;
}

}  // namespace pcos::nn
