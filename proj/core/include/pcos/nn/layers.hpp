#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pcos/nn/tensor.hpp"

namespace pcos::nn {

using Rng = std::mt19937_64;

struct Parameter {
  Tensor value;
};

/// Per-call state a layer needs to run its backward pass.
struct Cache {
  virtual ~Cache() = default;
};
using CachePtr = std::unique_ptr<Cache>;

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;  // dropout draws; required when training
};

/// Gradient accumulators keyed by parameter identity.
class GradStore {
 public:
  Tensor& operator()(const Parameter& parameter);
  const Tensor* find(const Parameter& parameter) const;
  void clear() { grads_.clear(); }

 private:
  std::unordered_map<const Parameter*, Tensor> grads_;
};

/// A named tensor owned by a layer. `parameter` is null for buffers such as
/// batch-norm running statistics.
struct StateEntry {
  std::string name;
  Tensor* tensor = nullptr;
  Parameter* parameter = nullptr;
};

/// Layer interface. forward() is const and safe to call concurrently in
/// inference mode; training-mode forward updates batch-norm running statistics
/// and must not overlap with other calls on the same layer.
class Layer {
 public:
  virtual ~Layer() = default;

  /// `cache` may be null when no backward pass follows.
  virtual Tensor forward(const Tensor& x, const ForwardContext& ctx, CachePtr* cache) const = 0;
  /// Returns dL/dx. Parameter gradients are accumulated into `grads` unless it is null.
  virtual Tensor backward(const Tensor& grad_out, const Cache& cache, GradStore* grads) const = 0;
  virtual void state(const std::string& prefix, std::vector<StateEntry>& out);
  virtual std::string_view kind() const = 0;
};

using LayerPtr = std::unique_ptr<Layer>;

class Conv2d final : public Layer {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, bool bias,
         Rng& rng);

  Tensor forward(const Tensor& x, const ForwardContext& ctx, CachePtr* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache, GradStore* grads) const override;
  void state(const std::string& prefix, std::vector<StateEntry>& out) override;
  std::string_view kind() const override { return "conv2d"; }

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  bool has_bias() const { return has_bias_; }
  int out_size(int in_size) const { return (in_size + 2 * padding_ - kernel_) / stride_ + 1; }

 private:
  int in_channels_;
  int out_channels_;
  int kernel_;
  int stride_;
  int padding_;
  bool has_bias_;
  Parameter weight_;  // (out, in, k, k)
  Parameter bias_;    // (out)
};

class BatchNorm2d final : public Layer {
 public:
  explicit BatchNorm2d(int channels, double eps = 1e-5, double momentum = 0.1);

  Tensor forward(const Tensor& x, const ForwardContext& ctx, CachePtr* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache, GradStore* grads) const override;
  void state(const std::string& prefix, std::vector<StateEntry>& out) override;
  std::string_view kind() const override { return "batchnorm2d"; }

 private:
  int channels_;
  double eps_;
  double momentum_;
  Parameter weight_;
  Parameter bias_;
  // Updated by training-mode forward.
  mutable Tensor running_mean_;
  mutable Tensor running_var_;
};

class ReLU final : public Layer {
 public:
  Tensor forward(const Tensor& x, const ForwardContext& ctx, CachePtr* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache, GradStore* grads) const override;
  std::string_view kind() const override { return "relu"; }
};

class MaxPool2d final : public Layer {
 public:
  MaxPool2d(int kernel, int stride, int padding);
  Tensor forward(const Tensor& x, const ForwardContext& ctx, CachePtr* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache, GradStore* grads) const override;
  std::string_view kind() const override { return "maxpool2d"; }

 private:
  int kernel_;
  int stride_;
  int padding_;
};

/// Unpadded average pooling.
class AvgPool2d final : public Layer {
 public:
  AvgPool2d(int kernel, int stride);
  Tensor forward(const Tensor& x, const ForwardContext& ctx, CachePtr* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache, GradStore* grads) const override;
  std::string_view kind() const override { return "avgpool2d"; }

 private:
  int kernel_;
  int stride_;
};

/// (N, C, H, W) -> (N, C).
class GlobalAvgPool final : public Layer {
 public:
  Tensor forward(const Tensor& x, const ForwardContext& ctx, CachePtr* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache, GradStore* grads) const override;
  std::string_view kind() const override { return "global_avg_pool"; }
};

/// Inverted dropout; identity outside training.
class Dropout final : public Layer {
 public:
  explicit Dropout(double rate);
  Tensor forward(const Tensor& x, const ForwardContext& ctx, CachePtr* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache, GradStore* grads) const override;
  std::string_view kind() const override { return "dropout"; }
  double rate() const { return rate_; }

 private:
  double rate_;
};

/// (N, in) -> (N, out). Glorot-uniform weights, zero bias.
class Linear final : public Layer {
 public:
  Linear(int in_features, int out_features, Rng& rng);
  Tensor forward(const Tensor& x, const ForwardContext& ctx, CachePtr* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache, GradStore* grads) const override;
  void state(const std::string& prefix, std::vector<StateEntry>& out) override;
  std::string_view kind() const override { return "linear"; }

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

 private:
  int in_features_;
  int out_features_;
  Parameter weight_;  // (out, in)
  Parameter bias_;    // (out)
};

/// Ordered, named children. Child state is exposed as `<prefix><name>.<entry>`.
class Sequential final : public Layer {
 public:
  Sequential() = default;
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  Sequential& add(std::string name, LayerPtr layer);

  Tensor forward(const Tensor& x, const ForwardContext& ctx, CachePtr* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache, GradStore* grads) const override;
  void state(const std::string& prefix, std::vector<StateEntry>& out) override;
  std::string_view kind() const override { return "sequential"; }

  /// Runs children [begin, end).
  Tensor forward_range(const Tensor& x, const ForwardContext& ctx, std::size_t begin,
                       std::size_t end, CachePtr* cache) const;

  std::size_t size() const { return children_.size(); }
  const std::string& name(std::size_t i) const { return children_.at(i).first; }
  Layer& child(std::size_t i) { return *children_.at(i).second; }
  const Layer& child(std::size_t i) const { return *children_.at(i).second; }
  /// Index of the child called `name`, or size() when absent.
  std::size_t find(std::string_view name) const;

 private:
  std::vector<std::pair<std::string, LayerPtr>> children_;
};

/// ResNet bottleneck: 1x1 -> 3x3 (strided) -> 1x1 with batch norm, plus an
/// identity or projected shortcut, followed by ReLU.
class Bottleneck final : public Layer {
 public:
  Bottleneck(int in_channels, int width, int stride, Rng& rng);
  Tensor forward(const Tensor& x, const ForwardContext& ctx, CachePtr* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache, GradStore* grads) const override;
  void state(const std::string& prefix, std::vector<StateEntry>& out) override;
  std::string_view kind() const override { return "bottleneck"; }

  static constexpr int kExpansion = 4;

 private:
  Sequential branch_;
  std::unique_ptr<Sequential> downsample_;
};

/// DenseNet layer: BN-ReLU-1x1 conv-BN-ReLU-3x3 conv; output is the input
/// concatenated with `growth` new channels.
class DenseLayer final : public Layer {
 public:
  DenseLayer(int in_channels, int growth, int bottleneck_width, Rng& rng);
  Tensor forward(const Tensor& x, const ForwardContext& ctx, CachePtr* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache, GradStore* grads) const override;
  void state(const std::string& prefix, std::vector<StateEntry>& out) override;
  std::string_view kind() const override { return "dense_layer"; }

 private:
  int in_channels_;
  int growth_;
  Sequential branch_;
};

/// Concatenate two NCHW tensors along channels.
Tensor concat_channels(const Tensor& a, const Tensor& b);

}  // namespace pcos::nn
