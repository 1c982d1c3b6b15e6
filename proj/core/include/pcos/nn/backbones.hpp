#pragma once

#include <string>

#include "pcos/nn/layers.hpp"

namespace pcos::nn {

/// A feature extractor split into named top-level stages. State names use
/// `state_prefix` so they line up with torchvision's state_dict keys.
struct Backbone {
  Sequential stages;
  std::string feature_layer;  ///< last convolutional feature map (Grad-CAM default)
  std::string state_prefix;
  int feature_channels = 0;
};

/// conv(3->8, 3x3, stride 2) -> ReLU -> conv(8->8, 3x3) -> ReLU.
Backbone make_tiny_backbone(Rng& rng);

/// ResNet-50 (torchvision v1.5 layout: stride on the 3x3 conv), 2048 features.
Backbone make_resnet50(Rng& rng);

/// DenseNet-201: growth 32, blocks (6, 12, 48, 32), 1920 features.
Backbone make_densenet201(Rng& rng);

/// Global average pool -> dropout -> linear(channels -> 1). Output is the
/// infected logit.
Sequential make_head(int channels, double dropout, Rng& rng);

}  // namespace pcos::nn
