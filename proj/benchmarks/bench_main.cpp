#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "pcos/augment.hpp"
#include "pcos/explain.hpp"
#include "pcos/model.hpp"
#include "pcos/nn/layers.hpp"
#include "pcos/train.hpp"

namespace {

pcos::Image noise_image(int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  pcos::Image img(size, size, 3);
  for (double& v : img.values) v = u(rng);
  return img;
}

void BM_Conv3x3Forward(benchmark::State& state) {
  const int channels = static_cast<int>(state.range(0));
  pcos::nn::Rng rng(1);
  pcos::nn::Conv2d conv(channels, channels, 3, 1, 1, false, rng);
  pcos::nn::Tensor x({1, channels, 56, 56}, 0.5);
  for (auto _ : state) {
    benchmark::DoNotOptimize(conv.forward(x, {}, nullptr));
  }
}
BENCHMARK(BM_Conv3x3Forward)->Arg(16)->Arg(64);

void BM_MixupBatch(benchmark::State& state) {
  std::mt19937_64 rng(2);
  std::vector<pcos::dataset::LabeledImage> batch;
  for (int i = 0; i < 32; ++i) {
    batch.push_back({noise_image(224, rng), i % 2 ? pcos::Label::infected : pcos::Label::notinfected,
                     "img" + std::to_string(i)});
  }
  pcos::augment::Rng aug(3);
  for (auto _ : state) {
    benchmark::DoNotOptimize(pcos::augment::augment_batch(batch, 0.25, 0.4, aug));
  }
}
BENCHMARK(BM_MixupBatch);

void BM_ShapleyAdditiveGame(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto scorer = pcos::explain::per_mask([](const pcos::explain::Mask& m) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) s += (i + 1) * m[i];
    return s;
  });
  for (auto _ : state) {
    benchmark::DoNotOptimize(pcos::explain::shapley_values(n, scorer));
  }
}
BENCHMARK(BM_ShapleyAdditiveGame)->Arg(8)->Arg(14);

void BM_TinyPredict(benchmark::State& state) {
  pcos::model::BackboneSpec spec;
  spec.input_size = 64;
  const auto model = pcos::model::build_model(spec, 4);
  std::mt19937_64 rng(5);
  std::vector<pcos::Image> images;
  for (int i = 0; i < 16; ++i) images.push_back(noise_image(64, rng));
  for (auto _ : state) {
    benchmark::DoNotOptimize(pcos::model::predict(model, images));
  }
}
BENCHMARK(BM_TinyPredict);

}  // namespace
BENCHMARK_MAIN();
