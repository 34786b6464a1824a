// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <numeric>

#include "lorkd/eks_conv.hpp"
#include "support.hpp"

using namespace lorkd;
using test::EksCase;
using test::random_tensor;

namespace {

// Per-sample oracle: its own fused weight, its own direct convolution.
template <typename T>
Tensor<T> per_sample_oracle(const EksConvLayer<T>& layer, const Tensor<T>& h, const TaskIndexMatrix& m) {
  const ConvGeometry& g = layer.geometry;
  const std::size_t B = h.dim(0), k = g.kernel;
  std::vector<Tensor<T>> outs;
  for (std::size_t b = 0; b < B; ++b) {
    const auto& e = layer.experts[m.task_of(b)];
    const auto prod = matmul(e.b_factor, e.a_factor);
    Tensor<T> w = layer.w0;
    for (std::size_t co = 0; co < g.out_channels; ++co)
      for (std::size_t ci = 0; ci < g.in_channels; ++ci)
        for (std::size_t u = 0; u < k; ++u)
          for (std::size_t v = 0; v < k; ++v) w.at({co, ci, u, v}) += prod.at({co * k + u, ci * k + v});
    auto y = test::direct_conv(slice_batch(h, b, b + 1), w, g);
    if (layer.has_bias())
      for (std::size_t c = 0; c < g.out_channels; ++c)
        for (std::size_t i = 0; i < y.dim(2) * y.dim(3); ++i) y[c * y.dim(2) * y.dim(3) + i] += layer.bias[c];
    outs.push_back(std::move(y));
  }
  const std::size_t per = outs[0].size();
  Tensor<T> out({B, outs[0].dim(1), outs[0].dim(2), outs[0].dim(3)});
  for (std::size_t b = 0; b < B; ++b) std::copy_n(outs[b].raw(), per, out.raw() + b * per);
  return out;
}

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("TaskIndexMatrix") {
  const TaskIndexMatrix m({2, 0, 2, 1}, 3);
  CHECK(m.batch() == 4);
  CHECK(m.samples_of(2) == std::vector<std::size_t>{0, 2});
  CHECK(m.samples_of(1) == std::vector<std::size_t>{3});
  const auto oh = m.one_hot<float>();
  CHECK(oh.shape() == Shape{4, 3});
  CHECK(oh.at({0, 2}) == 1.0f);
  CHECK(oh.at({0, 0}) == 0.0f);
  CHECK(TaskIndexMatrix::from_one_hot(oh) == m);
  CHECK_THROWS(TaskIndexMatrix({3}, 3));
  CHECK_THROWS(TaskIndexMatrix::from_one_hot(Tensor<float>({2, 2}, {1, 1, 0, 1})));
  CHECK_THROWS(TaskIndexMatrix::from_one_hot(Tensor<float>({2, 2}, {0, 0, 0, 1})));
  CHECK_THROWS(TaskIndexMatrix::from_one_hot(Tensor<float>({2, 2}, {0.5f, 0.5f, 0, 1})));
}

TEST_CASE("eks_forward matches the per-task loop and the per-sample oracle") {
  std::mt19937_64 gen(31);
  for (int trial = 0; trial < 60; ++trial) {
    auto c = test::random_eks_case<double>(gen);
    const auto eks = eks_forward(c.layer, c.input, c.tasks);
    CHECK(test::rel_error(eks, naive_forward(c.layer, c.input, c.tasks)) <= 1e-12);
    CHECK(test::rel_error(eks, per_sample_oracle(c.layer, c.input, c.tasks)) <= 1e-12);
  }
  std::mt19937_64 fgen(32);
  for (int trial = 0; trial < 30; ++trial) {
    auto c = test::random_eks_case<float>(fgen);
    CHECK(test::rel_error(eks_forward(c.layer, c.input, c.tasks), naive_forward(c.layer, c.input, c.tasks)) <= 1e-5);
  }
}

TEST_CASE("aggregate_weights sums the backbone and the sample's expert") {
  std::mt19937_64 gen(33);
  auto c = test::random_eks_case<double>(gen, 4, 6);
  const auto agg = aggregate_weights(c.layer, c.tasks);
  const std::size_t per = c.layer.geometry.weight_size();
  for (std::size_t b = 0; b < c.tasks.batch(); ++b) {
    const auto fused = fuse_weights(c.layer.w0, c.layer.experts[c.tasks.task_of(b)]);
    for (std::size_t i = 0; i < per; ++i) CHECK(agg[b * per + i] == doctest::Approx(fused[i]).epsilon(1e-12));
  }
}

TEST_CASE("inert experts reduce to the plain convolution") {
  std::mt19937_64 gen(34);
  for (int trial = 0; trial < 20; ++trial) {
    auto c = test::random_eks_case<float>(gen);
    for (auto& e : c.layer.experts) e.b_factor.fill(0);
    auto plain = conv2d(c.input, c.layer.w0, c.layer.geometry);
    if (c.layer.has_bias()) add_channel_bias(plain, c.layer.bias);
    CHECK(eks_forward(c.layer, c.input, c.tasks) == plain);
  }
}

TEST_CASE("permuting the batch permutes the output") {
  std::mt19937_64 gen(35);
  for (int trial = 0; trial < 20; ++trial) {
    auto c = test::random_eks_case<double>(gen);
    const std::size_t B = c.tasks.batch();
    std::vector<std::size_t> perm(B);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), gen);
    std::vector<std::size_t> tasks(B);
    for (std::size_t i = 0; i < B; ++i) tasks[i] = c.tasks.task_of(perm[i]);
    const auto y = eks_forward(c.layer, c.input, c.tasks);
    const auto yp = eks_forward(c.layer, gather_batch(c.input, perm), TaskIndexMatrix(tasks, c.tasks.task_count()));
    CHECK(max_abs_diff(yp, gather_batch(y, perm)) <= 1e-12);
  }
}

TEST_CASE("one grouped launch per forward and per backward") {
  std::mt19937_64 gen(36);
  auto c = test::random_eks_case<float>(gen, 8, 16);
  reset_kernel_counters();
  const auto y = eks_forward(c.layer, c.input, c.tasks);
  CHECK(kernel_counters().conv_forward_launches == 1);
  eks_backward(c.layer, c.input, c.tasks, y);
  CHECK(kernel_counters().conv_backward_launches == 1);
  reset_kernel_counters();
  naive_forward(c.layer, c.input, c.tasks);
  std::size_t present = 0;
  for (std::size_t t = 0; t < c.tasks.task_count(); ++t) present += c.tasks.samples_of(t).empty() ? 0 : 1;
  CHECK(kernel_counters().conv_forward_launches == present);
}

TEST_CASE("eks_backward against central differences") {
  std::mt19937_64 gen(37);
  for (int trial = 0; trial < 20; ++trial) {
    auto c = test::random_eks_case<double>(gen, 4, 4, 4, 6);
    const auto probe = random_tensor<double>(eks_forward(c.layer, c.input, c.tasks).shape(), gen);
    const auto grads = eks_backward(c.layer, c.input, c.tasks, probe);
    auto loss = [&] { return dot(eks_forward(c.layer, c.input, c.tasks), probe); };

    auto check = [&](Tensor<double>& x, const Tensor<double>& analytic) {
      auto [a, n] = test::sampled_fd(loss, x, analytic, 40, gen);
      CHECK(test::rel_error(a, n) <= 1e-6);
    };
    check(c.input, grads.input);
    check(c.layer.w0, grads.w0);
    if (c.layer.has_bias()) check(c.layer.bias, grads.bias);
    for (std::size_t t = 0; t < c.layer.task_count(); ++t) {
      check(c.layer.experts[t].b_factor, grads.experts[t].b_factor);
      check(c.layer.experts[t].a_factor, grads.experts[t].a_factor);
    }
  }
}

TEST_CASE("routing: absent experts get exact zero gradients") {
  std::mt19937_64 gen(38);
  for (int trial = 0; trial < 30; ++trial) {
    auto c = test::random_eks_case<float>(gen, 8, 6);
    const auto probe = random_tensor<float>(eks_forward(c.layer, c.input, c.tasks).shape(), gen);
    const auto grads = eks_backward(c.layer, c.input, c.tasks, probe);
    REQUIRE(grads.experts.size() == c.layer.task_count());
    for (std::size_t t = 0; t < c.layer.task_count(); ++t) {
      const bool present = !c.tasks.samples_of(t).empty();
      if (!present) {
        CHECK(max_abs(grads.experts[t].b_factor) == 0.0f);
        CHECK(max_abs(grads.experts[t].a_factor) == 0.0f);
      } else {
        CHECK(max_abs(grads.experts[t].b_factor) + max_abs(grads.experts[t].a_factor) > 0.0f);
      }
    }
  }
}

TEST_CASE("backbone gradient is the sum of per-task gradients") {
  std::mt19937_64 gen(39);
  for (int trial = 0; trial < 20; ++trial) {
    auto c = test::random_eks_case<double>(gen);
    const auto probe = random_tensor<double>(eks_forward(c.layer, c.input, c.tasks).shape(), gen);
    const auto full = eks_backward(c.layer, c.input, c.tasks, probe);
    Tensor<double> sum(c.layer.w0.shape());
    for (std::size_t t = 0; t < c.tasks.task_count(); ++t) {
      const auto rows = c.tasks.samples_of(t);
      if (rows.empty()) continue;
      const auto fused = fuse_weights(c.layer.w0, c.layer.experts[t]);
      sum += conv2d_backward(gather_batch(probe, rows), gather_batch(c.input, rows), fused, c.layer.geometry).weight;
    }
    CHECK(test::rel_error(full.w0, sum) <= 1e-12);
  }
}

TEST_CASE("layers without experts are plain convolutions") {
  std::mt19937_64 gen(40);
  EksConvLayer<double> layer;
  layer.geometry = ConvGeometry{3, 4, 3, 1, 1, 1};
  layer.w0 = random_tensor<double>(layer.geometry.weight_shape(), gen);
  const auto x = random_tensor<double>({5, 3, 6, 6}, gen);
  const TaskIndexMatrix none({0, 1, 1, 0, 1}, 2);
  CHECK(max_abs_diff(eks_forward(layer, x, none), test::direct_conv(x, layer.w0, layer.geometry)) <= 1e-12);
  CHECK(eks_backward(layer, x, none, eks_forward(layer, x, none)).experts.empty());
}

TEST_CASE("eks routing validation") {
  std::mt19937_64 gen(41);
  auto c = test::random_eks_case<float>(gen, 3, 4);
  const std::size_t B = c.tasks.batch(), T_ = c.tasks.task_count();
  CHECK_THROWS_AS(eks_forward(c.layer, c.input, TaskIndexMatrix(std::vector<std::size_t>(B + 1, 0), T_)), ShapeError);
  CHECK_THROWS_AS(eks_forward(c.layer, c.input, TaskIndexMatrix(std::vector<std::size_t>(B, 0), T_ + 1)), ShapeError);
}

TEST_CASE("cost_estimate") {
  const auto e = cost_estimate(8, 16, 256, 64, 8);
  CHECK(e.eks_flops == 8ull * 2 * 8 * 64 * 64 + 2ull * 16 * 256 * 64 * 64);
  CHECK(e.flora_flops == 2ull * 8 * 16 * 256 * 64 * 64);
  CHECK(e.eks_cheaper);
  // r = 1 can never pay off: T/(b*l) + 1 > 1
  CHECK_FALSE(cost_estimate(1, 4, 4, 8, 1).eks_cheaper);
  // boundary T*r + b*l == r*b*l: 2*2 + 4 == 2*4
  CHECK(cost_estimate(2, 2, 2, 8, 2).eks_cheaper);
  CHECK_FALSE(cost_estimate(3, 2, 2, 8, 2).eks_cheaper);
  CHECK_THROWS(cost_estimate(1, 0, 1, 1, 1));

  std::mt19937_64 gen(42);
  for (int trial = 0; trial < 200; ++trial) {
    const std::uint64_t T_ = test::pick(gen, 1, 64), b = test::pick(gen, 1, 64), l = test::pick(gen, 1, 1024);
    const std::uint64_t d = test::pick(gen, 1, 256), r = test::pick(gen, 1, 64);
    const auto est = cost_estimate(T_, b, l, d, r);
    const double lhs = static_cast<double>(T_ * r) / static_cast<double>(b * l) + 1.0;
    if (std::abs(lhs - static_cast<double>(r)) > 1e-9) CHECK(est.eks_cheaper == (lhs <= static_cast<double>(r)));
    CHECK(est.eks_cheaper == (est.eks_flops <= est.flora_flops));
  }
}
