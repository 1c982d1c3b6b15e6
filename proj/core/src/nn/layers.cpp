#include "pcos/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "pcos/errors.hpp"

namespace pcos::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

template <typename T>
const T& cache_as(const Cache& cache, const char* who) {
  const auto* typed = dynamic_cast<const T*>(&cache);
  if (typed == nullptr) throw Error(std::string(who) + ": backward called with a foreign cache");
  return *typed;
}

void require_channels(const Tensor& x, int channels, const char* who) {
  require_rank(x, 4, who);
  if (x.dim(1) != channels) {
    throw ShapeError(std::string(who) + " expects " + std::to_string(channels) +
                     " channels, got input " + shape_string(x.shape()));
  }
}

struct InputCache final : Cache {
  Tensor input;
};

struct ShapeCache final : Cache {
  Shape input_shape;
};

}  // namespace

Tensor& GradStore::operator()(const Parameter& parameter) {
  auto it = grads_.find(&parameter);
  if (it == grads_.end()) {
    it = grads_.emplace(&parameter, Tensor(parameter.value.shape())).first;
  }
  return it->second;
}

const Tensor* GradStore::find(const Parameter& parameter) const {
  auto it = grads_.find(&parameter);
  return it == grads_.end() ? nullptr : &it->second;
}

void Layer::state(const std::string&, std::vector<StateEntry>&) {}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, bool bias,
               Rng& rng)
    : in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_(kernel),
      stride_(stride),
      padding_(padding),
      has_bias_(bias),
      weight_{Tensor({out_channels, in_channels, kernel, kernel})},
      bias_{Tensor({bias ? out_channels : 0})} {
  if (in_channels <= 0 || out_channels <= 0 || kernel <= 0 || stride <= 0 || padding < 0) {
    throw ParameterError("invalid conv2d geometry");
  }
  // He-normal, fan-out mode.
  const double fan_out = static_cast<double>(out_channels) * kernel * kernel;
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_out));
  for (double& w : weight_.value.values()) w = normal(rng);
}

namespace {

struct ConvGeometry {
  int channels, height, width, kernel, stride, padding, out_h, out_w;
};

void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const int P = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        double* row = cols + (static_cast<std::size_t>(c) * g.kernel * g.kernel + ki * g.kernel + kj) * P;
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.padding + ki;
          double* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(c) * g.height + ih) * g.width;
          for (int ow = 0; ow < g.out_w; ++ow) {
            const int iw = ow * g.stride - g.padding + kj;
            dst[ow] = (iw >= 0 && iw < g.width) ? src[iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeometry& g, double* dx) {
  const int P = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        const double* row =
            cols + (static_cast<std::size_t>(c) * g.kernel * g.kernel + ki * g.kernel + kj) * P;
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.padding + ki;
          if (ih < 0 || ih >= g.height) continue;
          double* dst = dx + (static_cast<std::size_t>(c) * g.height + ih) * g.width;
          const double* src = row + oh * g.out_w;
          for (int ow = 0; ow < g.out_w; ++ow) {
            const int iw = ow * g.stride - g.padding + kj;
            if (iw >= 0 && iw < g.width) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor Conv2d::forward(const Tensor& x, const ForwardContext&, CachePtr* cache) const {
  require_channels(x, in_channels_, "conv2d");
  const int N = x.dim(0);
  const ConvGeometry g{in_channels_, x.dim(2), x.dim(3), kernel_, stride_, padding_,
                       out_size(x.dim(2)), out_size(x.dim(3))};
  if (g.out_h <= 0 || g.out_w <= 0) {
    throw ShapeError("conv2d input " + shape_string(x.shape()) + " is smaller than its kernel");
  }
  const int K = in_channels_ * kernel_ * kernel_;
  const int P = g.out_h * g.out_w;
  const bool pointwise = kernel_ == 1 && stride_ == 1 && padding_ == 0;

  Tensor y({N, out_channels_, g.out_h, g.out_w});
  ConstMatMap weight(weight_.value.data(), out_channels_, K);
  std::vector<double> cols(pointwise ? 0 : static_cast<std::size_t>(K) * P);
  for (int n = 0; n < N; ++n) {
    const double* xn = x.data() + static_cast<std::size_t>(n) * in_channels_ * g.height * g.width;
    if (!pointwise) im2col(xn, g, cols.data());
    ConstMatMap columns(pointwise ? xn : cols.data(), K, P);
    MatMap out(y.data() + static_cast<std::size_t>(n) * out_channels_ * P, out_channels_, P);
    out.noalias() = weight * columns;
    if (has_bias_) {
      for (int o = 0; o < out_channels_; ++o) out.row(o).array() += bias_.value[o];
    }
  }
  if (cache) {
    auto c = std::make_unique<InputCache>();
    c->input = x;
    *cache = std::move(c);
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out, const Cache& cache, GradStore* grads) const {
  const Tensor& x = cache_as<InputCache>(cache, "conv2d").input;
  const int N = x.dim(0);
  const ConvGeometry g{in_channels_, x.dim(2), x.dim(3), kernel_, stride_, padding_,
                       out_size(x.dim(2)), out_size(x.dim(3))};
  const int K = in_channels_ * kernel_ * kernel_;
  const int P = g.out_h * g.out_w;
  const bool pointwise = kernel_ == 1 && stride_ == 1 && padding_ == 0;
  if (grad_out.shape() != Shape{N, out_channels_, g.out_h, g.out_w}) {
    throw ShapeError("conv2d backward: unexpected gradient shape " + shape_string(grad_out.shape()));
  }

  Tensor dx(x.shape());
  ConstMatMap weight(weight_.value.data(), out_channels_, K);
  std::vector<double> cols(pointwise ? 0 : static_cast<std::size_t>(K) * P);
  RowMat dcols(K, P);
  for (int n = 0; n < N; ++n) {
    const std::size_t in_offset = static_cast<std::size_t>(n) * in_channels_ * g.height * g.width;
    const double* xn = x.data() + in_offset;
    ConstMatMap dy(grad_out.data() + static_cast<std::size_t>(n) * out_channels_ * P,
                   out_channels_, P);
    if (grads) {
      if (!pointwise) im2col(xn, g, cols.data());
      ConstMatMap columns(pointwise ? xn : cols.data(), K, P);
      MatMap dw((*grads)(weight_).data(), out_channels_, K);
      dw.noalias() += dy * columns.transpose();
      if (has_bias_) {
        Tensor& db = (*grads)(bias_);
        for (int o = 0; o < out_channels_; ++o) db[o] += dy.row(o).sum();
      }
    }
    dcols.noalias() = weight.transpose() * dy;
    if (pointwise) {
      MatMap(dx.data() + in_offset, K, P) = dcols;
    } else {
      col2im(dcols.data(), g, dx.data() + in_offset);
    }
  }
  return dx;
}

void Conv2d::state(const std::string& prefix, std::vector<StateEntry>& out) {
  out.push_back({prefix + "weight", &weight_.value, &weight_});
  if (has_bias_) out.push_back({prefix + "bias", &bias_.value, &bias_});
}

// ---------------------------------------------------------------- BatchNorm2d

namespace {

struct BatchNormCache final : Cache {
  Tensor normalized;
  std::vector<double> inv_std;
  bool training = false;
};

}  // namespace

BatchNorm2d::BatchNorm2d(int channels, double eps, double momentum)
    : channels_(channels),
      eps_(eps),
      momentum_(momentum),
      weight_{Tensor({channels}, 1.0)},
      bias_{Tensor({channels}, 0.0)},
      running_mean_({channels}, 0.0),
      running_var_({channels}, 1.0) {}

Tensor BatchNorm2d::forward(const Tensor& x, const ForwardContext& ctx, CachePtr* cache) const {
  require_channels(x, channels_, "batchnorm2d");
  const int N = x.dim(0);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const double m = static_cast<double>(N) * static_cast<double>(plane);

  Tensor y(x.shape());
  auto c = cache ? std::make_unique<BatchNormCache>() : nullptr;
  if (c) {
    c->normalized = Tensor(x.shape());
    c->inv_std.resize(channels_);
    c->training = ctx.training;
  }
  for (int ch = 0; ch < channels_; ++ch) {
    double mean = running_mean_[ch];
    double var = running_var_[ch];
    if (ctx.training) {
      double sum = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = x.data() + (static_cast<std::size_t>(n) * channels_ + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      }
      mean = sum / m;
      double sq = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = x.data() + (static_cast<std::size_t>(n) * channels_ + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mean) * (p[i] - mean);
      }
      var = sq / m;
      const double unbiased = m > 1.0 ? sq / (m - 1.0) : var;
      running_mean_[ch] = (1.0 - momentum_) * running_mean_[ch] + momentum_ * mean;
      running_var_[ch] = (1.0 - momentum_) * running_var_[ch] + momentum_ * unbiased;
    }
    const double inv = 1.0 / std::sqrt(var + eps_);
    const double gamma = weight_.value[ch];
    const double beta = bias_.value[ch];
    for (int n = 0; n < N; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels_ + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double xhat = (x[base + i] - mean) * inv;
        y[base + i] = gamma * xhat + beta;
        if (c) c->normalized[base + i] = xhat;
      }
    }
    if (c) c->inv_std[ch] = inv;
  }
  if (cache) *cache = std::move(c);
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out, const Cache& cache, GradStore* grads) const {
  const auto& c = cache_as<BatchNormCache>(cache, "batchnorm2d");
  const Tensor& xhat = c.normalized;
  if (grad_out.shape() != xhat.shape()) throw ShapeError("batchnorm2d backward: shape mismatch");
  const int N = xhat.dim(0);
  const std::size_t plane = static_cast<std::size_t>(xhat.dim(2)) * xhat.dim(3);
  const double m = static_cast<double>(N) * static_cast<double>(plane);

  Tensor dx(xhat.shape());
  for (int ch = 0; ch < channels_; ++ch) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (int n = 0; n < N; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels_ + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += grad_out[base + i];
        sum_dy_xhat += grad_out[base + i] * xhat[base + i];
      }
    }
    if (grads) {
      (*grads)(weight_)[ch] += sum_dy_xhat;
      (*grads)(bias_)[ch] += sum_dy;
    }
    const double gamma = weight_.value[ch];
    const double inv = c.inv_std[ch];
    for (int n = 0; n < N; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels_ + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        if (c.training) {
          dx[base + i] =
              gamma * inv / m * (m * grad_out[base + i] - sum_dy - xhat[base + i] * sum_dy_xhat);
        } else {
          dx[base + i] = gamma * inv * grad_out[base + i];
        }
      }
    }
  }
  return dx;
}

void BatchNorm2d::state(const std::string& prefix, std::vector<StateEntry>& out) {
  out.push_back({prefix + "weight", &weight_.value, &weight_});
  out.push_back({prefix + "bias", &bias_.value, &bias_});
  out.push_back({prefix + "running_mean", &running_mean_, nullptr});
  out.push_back({prefix + "running_var", &running_var_, nullptr});
}

// ---------------------------------------------------------------- ReLU

namespace {

struct OutputCache final : Cache {
  Tensor output;
};

}  // namespace

Tensor ReLU::forward(const Tensor& x, const ForwardContext&, CachePtr* cache) const {
  Tensor y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  if (cache) {
    auto c = std::make_unique<OutputCache>();
    c->output = y;
    *cache = std::move(c);
  }
  return y;
}

Tensor ReLU::backward(const Tensor& grad_out, const Cache& cache, GradStore*) const {
  const Tensor& y = cache_as<OutputCache>(cache, "relu").output;
  if (grad_out.shape() != y.shape()) throw ShapeError("relu backward: shape mismatch");
  Tensor dx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = y[i] > 0.0 ? grad_out[i] : 0.0;
  return dx;
}

// ---------------------------------------------------------------- pooling

namespace {

struct MaxPoolCache final : Cache {
  Shape input_shape;
  std::vector<std::size_t> argmax;
};

}  // namespace

MaxPool2d::MaxPool2d(int kernel, int stride, int padding)
    : kernel_(kernel), stride_(stride), padding_(padding) {
  if (kernel <= 0 || stride <= 0 || padding < 0 || 2 * padding > kernel) {
    throw ParameterError("invalid maxpool geometry");
  }
}

Tensor MaxPool2d::forward(const Tensor& x, const ForwardContext&, CachePtr* cache) const {
  require_rank(x, 4, "maxpool2d");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OH = (H + 2 * padding_ - kernel_) / stride_ + 1;
  const int OW = (W + 2 * padding_ - kernel_) / stride_ + 1;
  if (OH <= 0 || OW <= 0) throw ShapeError("maxpool2d input smaller than its window");
  Tensor y({N, C, OH, OW});
  std::vector<std::size_t> argmax(y.size());
  std::size_t k = 0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * H * W;
      for (int oh = 0; oh < OH; ++oh) {
        for (int ow = 0; ow < OW; ++ow, ++k) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t where = base;
          for (int i = 0; i < kernel_; ++i) {
            const int ih = oh * stride_ - padding_ + i;
            if (ih < 0 || ih >= H) continue;
            for (int j = 0; j < kernel_; ++j) {
              const int iw = ow * stride_ - padding_ + j;
              if (iw < 0 || iw >= W) continue;
              const std::size_t idx = base + static_cast<std::size_t>(ih) * W + iw;
              if (x[idx] > best) {
                best = x[idx];
                where = idx;
              }
            }
          }
          y[k] = best;
          argmax[k] = where;
        }
      }
    }
  }
  if (cache) {
    auto c = std::make_unique<MaxPoolCache>();
    c->input_shape = x.shape();
    c->argmax = std::move(argmax);
    *cache = std::move(c);
  }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& grad_out, const Cache& cache, GradStore*) const {
  const auto& c = cache_as<MaxPoolCache>(cache, "maxpool2d");
  if (grad_out.size() != c.argmax.size()) throw ShapeError("maxpool2d backward: shape mismatch");
  Tensor dx(c.input_shape);
  for (std::size_t k = 0; k < c.argmax.size(); ++k) dx[c.argmax[k]] += grad_out[k];
  return dx;
}

AvgPool2d::AvgPool2d(int kernel, int stride) : kernel_(kernel), stride_(stride) {
  if (kernel <= 0 || stride <= 0) throw ParameterError("invalid avgpool geometry");
}

Tensor AvgPool2d::forward(const Tensor& x, const ForwardContext&, CachePtr* cache) const {
  require_rank(x, 4, "avgpool2d");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OH = (H - kernel_) / stride_ + 1;
  const int OW = (W - kernel_) / stride_ + 1;
  if (H < kernel_ || W < kernel_) throw ShapeError("avgpool2d input smaller than its window");
  Tensor y({N, C, OH, OW});
  const double scale = 1.0 / (kernel_ * kernel_);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int oh = 0; oh < OH; ++oh) {
        for (int ow = 0; ow < OW; ++ow) {
          double sum = 0.0;
          for (int i = 0; i < kernel_; ++i) {
            for (int j = 0; j < kernel_; ++j) sum += x.at(n, c, oh * stride_ + i, ow * stride_ + j);
          }
          y.at(n, c, oh, ow) = sum * scale;
        }
      }
    }
  }
  if (cache) {
    auto c = std::make_unique<ShapeCache>();
    c->input_shape = x.shape();
    *cache = std::move(c);
  }
  return y;
}

Tensor AvgPool2d::backward(const Tensor& grad_out, const Cache& cache, GradStore*) const {
  Tensor dx(cache_as<ShapeCache>(cache, "avgpool2d").input_shape);
  const int N = grad_out.dim(0), C = grad_out.dim(1), OH = grad_out.dim(2), OW = grad_out.dim(3);
  const double scale = 1.0 / (kernel_ * kernel_);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int oh = 0; oh < OH; ++oh) {
        for (int ow = 0; ow < OW; ++ow) {
          const double g = grad_out.at(n, c, oh, ow) * scale;
          for (int i = 0; i < kernel_; ++i) {
            for (int j = 0; j < kernel_; ++j) dx.at(n, c, oh * stride_ + i, ow * stride_ + j) += g;
          }
        }
      }
    }
  }
  return dx;
}

Tensor GlobalAvgPool::forward(const Tensor& x, const ForwardContext&, CachePtr* cache) const {
  require_rank(x, 4, "global_avg_pool");
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor y({N, C});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const double* p = x.data() + (static_cast<std::size_t>(n) * C + c) * plane;
      double sum = 0.0;
      for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      y[static_cast<std::size_t>(n) * C + c] = sum / static_cast<double>(plane);
    }
  }
  if (cache) {
    auto c = std::make_unique<ShapeCache>();
    c->input_shape = x.shape();
    *cache = std::move(c);
  }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out, const Cache& cache, GradStore*) const {
  const Shape& shape = cache_as<ShapeCache>(cache, "global_avg_pool").input_shape;
  Tensor dx(shape);
  const int N = shape[0], C = shape[1];
  const std::size_t plane = static_cast<std::size_t>(shape[2]) * shape[3];
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const double g = grad_out[static_cast<std::size_t>(n) * C + c] / static_cast<double>(plane);
      double* p = dx.data() + (static_cast<std::size_t>(n) * C + c) * plane;
      std::fill(p, p + plane, g);
    }
  }
  return dx;
}

// ---------------------------------------------------------------- Dropout

namespace {

struct DropoutCache final : Cache {
  std::vector<double> scale;  // empty means identity
};

}  // namespace

Dropout::Dropout(double rate) : rate_(rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError("dropout rate must lie in [0,1)");
}

Tensor Dropout::forward(const Tensor& x, const ForwardContext& ctx, CachePtr* cache) const {
  auto c = std::make_unique<DropoutCache>();
  Tensor y = x;
  if (ctx.training && rate_ > 0.0) {
    if (ctx.rng == nullptr) throw Error("dropout in training mode needs a generator");
    std::bernoulli_distribution keep(1.0 - rate_);
    const double kept_scale = 1.0 / (1.0 - rate_);
    c->scale.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      c->scale[i] = keep(*ctx.rng) ? kept_scale : 0.0;
      y[i] *= c->scale[i];
    }
  }
  if (cache) *cache = std::move(c);
  return y;
}

Tensor Dropout::backward(const Tensor& grad_out, const Cache& cache, GradStore*) const {
  const auto& c = cache_as<DropoutCache>(cache, "dropout");
  Tensor dx = grad_out;
  if (!c.scale.empty()) {
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= c.scale[i];
  }
  return dx;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(int in_features, int out_features, Rng& rng)
    : in_features_(in_features),
      out_features_(out_features),
      weight_{Tensor({out_features, in_features})},
      bias_{Tensor({out_features}, 0.0)} {
  if (in_features <= 0 || out_features <= 0) throw ParameterError("invalid linear geometry");
  const double limit = std::sqrt(6.0 / (in_features + out_features));
  std::uniform_real_distribution<double> uniform(-limit, limit);
  for (double& w : weight_.value.values()) w = uniform(rng);
}

Tensor Linear::forward(const Tensor& x, const ForwardContext&, CachePtr* cache) const {
  require_rank(x, 2, "linear");
  if (x.dim(1) != in_features_) {
    throw ShapeError("linear expects " + std::to_string(in_features_) + " features, got " +
                     shape_string(x.shape()));
  }
  const int N = x.dim(0);
  Tensor y({N, out_features_});
  ConstMatMap input(x.data(), N, in_features_);
  ConstMatMap weight(weight_.value.data(), out_features_, in_features_);
  MatMap out(y.data(), N, out_features_);
  out.noalias() = input * weight.transpose();
  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < out_features_; ++o) out(n, o) += bias_.value[o];
  }
  if (cache) {
    auto c = std::make_unique<InputCache>();
    c->input = x;
    *cache = std::move(c);
  }
  return y;
}

Tensor Linear::backward(const Tensor& grad_out, const Cache& cache, GradStore* grads) const {
  const Tensor& x = cache_as<InputCache>(cache, "linear").input;
  const int N = x.dim(0);
  if (grad_out.shape() != Shape{N, out_features_}) throw ShapeError("linear backward: shape mismatch");
  ConstMatMap dy(grad_out.data(), N, out_features_);
  ConstMatMap input(x.data(), N, in_features_);
  ConstMatMap weight(weight_.value.data(), out_features_, in_features_);
  if (grads) {
    MatMap dw((*grads)(weight_).data(), out_features_, in_features_);
    dw.noalias() += dy.transpose() * input;
    Tensor& db = (*grads)(bias_);
    for (int o = 0; o < out_features_; ++o) db[o] += dy.col(o).sum();
  }
  Tensor dx({N, in_features_});
  MatMap(dx.data(), N, in_features_).noalias() = dy * weight;
  return dx;
}

void Linear::state(const std::string& prefix, std::vector<StateEntry>& out) {
  out.push_back({prefix + "weight", &weight_.value, &weight_});
  out.push_back({prefix + "bias", &bias_.value, &bias_});
}

// ---------------------------------------------------------------- Sequential

namespace {

struct SequentialCache final : Cache {
  std::size_t begin = 0;
  std::vector<CachePtr> children;
};

}  // namespace

Sequential& Sequential::add(std::string name, LayerPtr layer) {
  children_.emplace_back(std::move(name), std::move(layer));
  return *this;
}

std::size_t Sequential::find(std::string_view name) const {
  for (std::size_t i = 0; i < children_.size(); ++i) {
    if (children_[i].first == name) return i;
  }
  return children_.size();
}

Tensor Sequential::forward(const Tensor& x, const ForwardContext& ctx, CachePtr* cache) const {
  return forward_range(x, ctx, 0, children_.size(), cache);
}

Tensor Sequential::forward_range(const Tensor& x, const ForwardContext& ctx, std::size_t begin,
                                 std::size_t end, CachePtr* cache) const {
  if (begin > end || end > children_.size()) throw Error("sequential: invalid child range");
  auto c = cache ? std::make_unique<SequentialCache>() : nullptr;
  if (c) {
    c->begin = begin;
    c->children.resize(end - begin);
  }
  Tensor current = x;
  for (std::size_t i = begin; i < end; ++i) {
    current = children_[i].second->forward(current, ctx, c ? &c->children[i - begin] : nullptr);
  }
  if (cache) *cache = std::move(c);
  return current;
}

Tensor Sequential::backward(const Tensor& grad_out, const Cache& cache, GradStore* grads) const {
  const auto& c = cache_as<SequentialCache>(cache, "sequential");
  Tensor grad = grad_out;
  for (std::size_t k = c.children.size(); k-- > 0;) {
    grad = children_[c.begin + k].second->backward(grad, *c.children[k], grads);
  }
  return grad;
}

void Sequential::state(const std::string& prefix, std::vector<StateEntry>& out) {
  for (auto& [name, layer] : children_) layer->state(prefix + name + ".", out);
}

// ---------------------------------------------------------------- Bottleneck

namespace {

struct ResidualCache final : Cache {
  CachePtr branch;
  CachePtr shortcut;
  Tensor output;
};

}  // namespace

Bottleneck::Bottleneck(int in_channels, int width, int stride, Rng& rng) {
  const int out_channels = width * kExpansion;
  branch_.add("conv1", std::make_unique<Conv2d>(in_channels, width, 1, 1, 0, false, rng))
      .add("bn1", std::make_unique<BatchNorm2d>(width))
      .add("relu1", std::make_unique<ReLU>())
      .add("conv2", std::make_unique<Conv2d>(width, width, 3, stride, 1, false, rng))
      .add("bn2", std::make_unique<BatchNorm2d>(width))
      .add("relu2", std::make_unique<ReLU>())
      .add("conv3", std::make_unique<Conv2d>(width, out_channels, 1, 1, 0, false, rng))
      .add("bn3", std::make_unique<BatchNorm2d>(out_channels));
  if (stride != 1 || in_channels != out_channels) {
    downsample_ = std::make_unique<Sequential>();
    downsample_->add("0", std::make_unique<Conv2d>(in_channels, out_channels, 1, stride, 0, false, rng))
        .add("1", std::make_unique<BatchNorm2d>(out_channels));
  }
}

Tensor Bottleneck::forward(const Tensor& x, const ForwardContext& ctx, CachePtr* cache) const {
  auto c = cache ? std::make_unique<ResidualCache>() : nullptr;
  Tensor out = branch_.forward(x, ctx, c ? &c->branch : nullptr);
  if (downsample_) {
    out.add(downsample_->forward(x, ctx, c ? &c->shortcut : nullptr));
  } else {
    out.add(x);
  }
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  if (c) {
    c->output = out;
    *cache = std::move(c);
  }
  return out;
}

Tensor Bottleneck::backward(const Tensor& grad_out, const Cache& cache, GradStore* grads) const {
  const auto& c = cache_as<ResidualCache>(cache, "bottleneck");
  Tensor dz(grad_out.shape());
  for (std::size_t i = 0; i < dz.size(); ++i) dz[i] = c.output[i] > 0.0 ? grad_out[i] : 0.0;
  Tensor dx = branch_.backward(dz, *c.branch, grads);
  if (downsample_) {
    dx.add(downsample_->backward(dz, *c.shortcut, grads));
  } else {
    dx.add(dz);
  }
  return dx;
}

void Bottleneck::state(const std::string& prefix, std::vector<StateEntry>& out) {
  branch_.state(prefix, out);
  if (downsample_) downsample_->state(prefix + "downsample.", out);
}

// ---------------------------------------------------------------- DenseLayer

namespace {

struct DenseCache final : Cache {
  CachePtr branch;
};

}  // namespace

DenseLayer::DenseLayer(int in_channels, int growth, int bottleneck_width, Rng& rng)
    : in_channels_(in_channels), growth_(growth) {
  branch_.add("norm1", std::make_unique<BatchNorm2d>(in_channels))
      .add("relu1", std::make_unique<ReLU>())
      .add("conv1", std::make_unique<Conv2d>(in_channels, bottleneck_width, 1, 1, 0, false, rng))
      .add("norm2", std::make_unique<BatchNorm2d>(bottleneck_width))
      .add("relu2", std::make_unique<ReLU>())
      .add("conv2", std::make_unique<Conv2d>(bottleneck_width, growth, 3, 1, 1, false, rng));
}

Tensor DenseLayer::forward(const Tensor& x, const ForwardContext& ctx, CachePtr* cache) const {
  require_channels(x, in_channels_, "dense_layer");
  auto c = cache ? std::make_unique<DenseCache>() : nullptr;
  Tensor fresh = branch_.forward(x, ctx, c ? &c->branch : nullptr);
  if (cache) *cache = std::move(c);
  return concat_channels(x, fresh);
}

Tensor DenseLayer::backward(const Tensor& grad_out, const Cache& cache, GradStore* grads) const {
  const auto& c = cache_as<DenseCache>(cache, "dense_layer");
  const int N = grad_out.dim(0), H = grad_out.dim(2), W = grad_out.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const int total = in_channels_ + growth_;
  Tensor direct({N, in_channels_, H, W});
  Tensor fresh({N, growth_, H, W});
  for (int n = 0; n < N; ++n) {
    const double* src = grad_out.data() + static_cast<std::size_t>(n) * total * plane;
    std::copy(src, src + in_channels_ * plane,
              direct.data() + static_cast<std::size_t>(n) * in_channels_ * plane);
    std::copy(src + in_channels_ * plane, src + total * plane,
              fresh.data() + static_cast<std::size_t>(n) * growth_ * plane);
  }
  Tensor dx = branch_.backward(fresh, *c.branch, grads);
  dx.add(direct);
  return dx;
}

void DenseLayer::state(const std::string& prefix, std::vector<StateEntry>& out) {
  branch_.state(prefix, out);
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("cannot concatenate " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
  const std::size_t plane = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  Tensor out({N, Ca + Cb, a.dim(2), a.dim(3)});
  for (int n = 0; n < N; ++n) {
    double* dst = out.data() + static_cast<std::size_t>(n) * (Ca + Cb) * plane;
    const double* pa = a.data() + static_cast<std::size_t>(n) * Ca * plane;
    const double* pb = b.data() + static_cast<std::size_t>(n) * Cb * plane;
    dst = std::copy(pa, pa + Ca * plane, dst);
    std::copy(pb, pb + Cb * plane, dst);
  }
  return out;
}

}  // namespace pcos::nn
