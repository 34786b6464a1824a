// SPDX-License-Identifier: Apache-2.0

// Parallel kernels against their serial references, and the grouped EKS
// forward against one convolution per task.

#include <random>

#include <benchmark/benchmark.h>

#include "lorkd/eks_conv.hpp"
#include "lorkd/lowrank.hpp"
#include "lorkd/ops.hpp"

using namespace lorkd;

namespace {

Tensor<float> noise(const Shape& shape, std::mt19937_64& gen, float scale = 1.0f) {
  Tensor<float> t(shape);
  std::normal_distribution<float> n(0.0f, scale);
  for (float& v : t.data()) v = n(gen);
  return t;
}

struct ConvCase {
  ConvGeometry g;
  Tensor<float> x, w, grad;
};

ConvCase conv_case(const benchmark::State& state) {
  const auto C = static_cast<std::size_t>(state.range(0)), S = static_cast<std::size_t>(state.range(1));
  std::mt19937_64 gen(7);
  ConvCase c{{C, C, 3, 1, 1, 1}, noise({16, C, S, S}, gen), {}, {}};
  c.w = noise(c.g.weight_shape(), gen, 0.1f);
  c.grad = noise({16, C, S, S}, gen);
  return c;
}

void BM_conv2d_parallel(benchmark::State& state) {
  const auto c = conv_case(state);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(c.x, c.w, c.g));
}

void BM_conv2d_serial(benchmark::State& state) {
  const auto c = conv_case(state);
  for (auto _ : state) benchmark::DoNotOptimize(reference::conv2d(c.x, c.w, c.g));
}

void BM_conv2d_backward_parallel(benchmark::State& state) {
  const auto c = conv_case(state);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d_backward(c.grad, c.x, c.w, c.g));
}

void BM_conv2d_backward_serial(benchmark::State& state) {
  const auto c = conv_case(state);
  for (auto _ : state) benchmark::DoNotOptimize(reference::conv2d_backward(c.grad, c.x, c.w, c.g));
}

struct EksCase {
  EksConvLayer<float> layer;
  Tensor<float> x;
  TaskIndexMatrix m;
};

// T = range(0) tasks, batch 16, 32 channels, 16x16, rank 8
EksCase eks_case(const benchmark::State& state) {
  const auto T = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 gen(8);
  ConvGeometry g{32, 32, 3, 1, 1, 1};
  EksCase c{{g, noise(g.weight_shape(), gen, 0.1f), noise({32}, gen), {}}, noise({16, 32, 16, 16}, gen), {}};
  for (std::size_t t = 0; t < T; ++t) {
    auto p = init_lowrank<float>(g, 8, 100 + t);
    p.b_factor = noise(p.b_factor.shape(), gen, 0.02f);
    c.layer.experts.push_back(std::move(p));
  }
  std::vector<std::size_t> assign(16);
  for (std::size_t b = 0; b < 16; ++b) assign[b] = b % T;
  c.m = TaskIndexMatrix(assign, T);
  return c;
}

void BM_eks_forward(benchmark::State& state) {
  const auto c = eks_case(state);
  for (auto _ : state) benchmark::DoNotOptimize(eks_forward(c.layer, c.x, c.m));
}

void BM_naive_forward(benchmark::State& state) {
  const auto c = eks_case(state);
  for (auto _ : state) benchmark::DoNotOptimize(naive_forward(c.layer, c.x, c.m));
}

}  // namespace

BENCHMARK(BM_conv2d_parallel)->Args({8, 16})->Args({32, 16})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv2d_serial)->Args({8, 16})->Args({32, 16})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv2d_backward_parallel)->Args({8, 16})->Args({32, 16})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv2d_backward_serial)->Args({8, 16})->Args({32, 16})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_eks_forward)->Arg(2)->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_naive_forward)->Arg(2)->Arg(8)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
