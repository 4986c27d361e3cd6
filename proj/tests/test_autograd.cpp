#include <doctest.h>

#include <cmath>

#include "hovertrans/error.hpp"
#include "hovertrans/ops.hpp"
#include "test_support.hpp"

using namespace hovertrans;
using hovertrans::testing::grad_check;
using hovertrans::testing::random_tensor;

namespace {

// Probe loss sum(w * f(...)) with fixed random weights, so every output
// element carries a distinct upstream gradient.
Var probe(const Var& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ops::weighted_sum(y, random_tensor(y.shape(), rng));
}

double check(const std::function<Var()>& f, std::vector<Var> inputs) {
  std::vector<std::pair<std::string, Var>> params;
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    params.emplace_back("in" + std::to_string(i), inputs[i]);
    for (std::size_t j = 0; j < inputs[i].value().size(); ++j) coords.emplace_back(i, j);
  }
  return grad_check(f, params, coords).max_rel_error;
}

}  // namespace

TEST_SUITE("autograd") {
  TEST_CASE("tensor basics") {
    Tensor t({2, 3}, 1.5);
    CHECK(t.size() == 6);
    t.at({1, 2}) = 4.0;
    CHECK(t[5] == 4.0);
    CHECK(t.reshaped({3, 2}).at({2, 1}) == 4.0);
    CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1.0}), ShapeError);
    CHECK(shape_string({2, 3}) == "(2,3)");
  }

  TEST_CASE("scalar gradients accumulate over shared uses") {
    Var x = Var::parameter(Tensor({}, std::vector<double>{3.0}));
    Var y = ops::add(x, x);
    backward(y);
    CHECK(x.grad()[0] == 2.0);
  }

  TEST_CASE("no-grad mode records nothing") {
    Var x = Var::parameter(Tensor({2}, 1.0));
    NoGradGuard g;
    Var y = ops::scale(x, 2.0);
    CHECK_FALSE(y.requires_grad());
    CHECK_FALSE(grad_enabled());
  }

  TEST_CASE("backward needs a scalar root without a seed") {
    Var x = Var::parameter(Tensor({2}, 1.0));
    CHECK_THROWS_AS(backward(ops::scale(x, 2.0)), ShapeError);
  }

  TEST_CASE("elementwise and linear ops match finite differences") {
    Rng rng(1);
    Var a = Var::parameter(random_tensor({2, 3, 4}, rng));
    Var b = Var::parameter(random_tensor({2, 3, 4}, rng));
    Var bias = Var::parameter(random_tensor({4}, rng));
    Var w = Var::parameter(random_tensor({4, 5}, rng));
    Var wb = Var::parameter(random_tensor({5}, rng));
    CHECK(check([&] { return probe(ops::add(a, b)); }, {a, b}) < 1e-6);
    CHECK(check([&] { return probe(ops::add_broadcast(a, bias)); }, {a, bias}) < 1e-6);
    CHECK(check([&] { return probe(ops::scale(a, -0.7)); }, {a}) < 1e-6);
    CHECK(check([&] { return probe(ops::linear(a, w, wb)); }, {a, w, wb}) < 1e-6);
    CHECK(check([&] { return probe(ops::gelu(a)); }, {a}) < 1e-6);
    CHECK(check([&] { return probe(ops::concat_last(a, b)); }, {a, b}) < 1e-6);
    CHECK(check([&] { return probe(ops::reshape(a, {6, 4})); }, {a}) < 1e-6);
  }

  TEST_CASE("relu gradient away from the kink") {
    Tensor t({6}, std::vector<double>{-2.0, -0.5, 0.3, 1.0, 2.5, -1.0});
    Var x = Var::parameter(t);
    CHECK(check([&] { return probe(ops::relu(x)); }, {x}) < 1e-6);
  }

  TEST_CASE("layer norm matches the direct formula and its gradient") {
    Rng rng(2);
    Var x = Var::parameter(random_tensor({2, 3, 6}, rng));
    Var g = Var::parameter(random_tensor({6}, rng));
    Var s = Var::parameter(random_tensor({6}, rng));
    const Tensor y = ops::layer_norm(x, g, s, 1e-6).value();
    for (std::size_t r = 0; r < 6; ++r) {
      double mean = 0.0, var = 0.0;
      for (std::size_t i = 0; i < 6; ++i) mean += x.value()[r * 6 + i] / 6.0;
      for (std::size_t i = 0; i < 6; ++i) var += std::pow(x.value()[r * 6 + i] - mean, 2) / 6.0;
      for (std::size_t i = 0; i < 6; ++i) {
        const double expect = (x.value()[r * 6 + i] - mean) / std::sqrt(var + 1e-6) * g.value()[i] + s.value()[i];
        CHECK(y[r * 6 + i] == doctest::Approx(expect).epsilon(1e-12));
      }
    }
    CHECK(check([&] { return probe(ops::layer_norm(x, g, s, 1e-6)); }, {x, g, s}) < 1e-5);
  }

  TEST_CASE("attention matches a naive per-head computation") {
    Rng rng(3);
    const std::size_t B = 2, T = 3, D = 4, H = 2, dh = 2;
    Var q = Var::parameter(random_tensor({B, T, D}, rng));
    Var k = Var::parameter(random_tensor({B, T, D}, rng));
    Var v = Var::parameter(random_tensor({B, T, D}, rng));
    const Tensor out = ops::attention(q, k, v, H).value();
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t i = 0; i < T; ++i) {
          std::vector<double> s(T);
          double mx = -1e300, z = 0.0;
          for (std::size_t j = 0; j < T; ++j) {
            s[j] = 0.0;
            for (std::size_t d = 0; d < dh; ++d) {
              s[j] += q.value().at({b, i, h * dh + d}) * k.value().at({b, j, h * dh + d});
            }
            s[j] /= std::sqrt(static_cast<double>(dh));
            mx = std::max(mx, s[j]);
          }
          for (auto& e : s) z += (e = std::exp(e - mx));
          for (std::size_t d = 0; d < dh; ++d) {
            double expect = 0.0;
            for (std::size_t j = 0; j < T; ++j) expect += s[j] / z * v.value().at({b, j, h * dh + d});
            CHECK(out.at({b, i, h * dh + d}) == doctest::Approx(expect).epsilon(1e-12));
          }
        }
      }
    }
    CHECK(check([&] { return probe(ops::attention(q, k, v, H)); }, {q, k, v}) < 1e-5);
  }

  TEST_CASE("conv2d matches a direct loop and its gradient") {
    Rng rng(4);
    const std::size_t B = 2, H = 5, W = 6, Ci = 3, Co = 2;
    Var x = Var::parameter(random_tensor({B, H, W, Ci}, rng));
    Var w = Var::parameter(random_tensor({3, 3, Ci, Co}, rng));
    Var bias = Var::parameter(random_tensor({Co}, rng));
    for (std::size_t stride : {1, 2}) {
      const Tensor y = ops::conv2d(x, w, bias, stride, 1).value();
      const std::size_t Ho = (H + 2 - 3) / stride + 1, Wo = (W + 2 - 3) / stride + 1;
      REQUIRE(y.shape() == Tensor::Shape{B, Ho, Wo, Co});
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Wo; ++ox)
            for (std::size_t co = 0; co < Co; ++co) {
              double expect = bias.value()[co];
              for (std::size_t ky = 0; ky < 3; ++ky)
                for (std::size_t kx = 0; kx < 3; ++kx) {
                  const long iy = static_cast<long>(oy * stride + ky) - 1, ix = static_cast<long>(ox * stride + kx) - 1;
                  if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                  for (std::size_t ci = 0; ci < Ci; ++ci) {
                    expect += x.value().at({b, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), ci}) *
                              w.value().at({ky, kx, ci, co});
                  }
                }
              CHECK(y.at({b, oy, ox, co}) == doctest::Approx(expect).epsilon(1e-12));
            }
      CHECK(check([&] { return probe(ops::conv2d(x, w, bias, stride, 1)); }, {x, w, bias}) < 1e-5);
    }
  }

  TEST_CASE("batch norm: training gradient, running statistics, eval mode") {
    Rng rng(5);
    Var x = Var::parameter(random_tensor({3, 2, 2, 2}, rng));
    Var g = Var::parameter(random_tensor({2}, rng));
    Var s = Var::parameter(random_tensor({2}, rng));
    ops::BatchNormStats stats{Tensor({2}, 0.0), Tensor({2}, 1.0)};
    CHECK(check([&] { return probe(ops::batch_norm(x, g, s, stats, true)); }, {x, g, s}) < 1e-5);

    ops::BatchNormStats fresh{Tensor({2}, 0.0), Tensor({2}, 1.0)};
    ops::batch_norm(x, g, s, fresh, true);
    for (std::size_t c = 0; c < 2; ++c) {
      double mean = 0.0, ss = 0.0;
      for (std::size_t i = 0; i < 12; ++i) mean += x.value()[i * 2 + c] / 12.0;
      for (std::size_t i = 0; i < 12; ++i) ss += std::pow(x.value()[i * 2 + c] - mean, 2);
      CHECK(fresh.running_mean[c] == doctest::Approx(0.1 * mean).epsilon(1e-12));
      CHECK(fresh.running_var[c] == doctest::Approx(0.9 + 0.1 * ss / 11.0).epsilon(1e-12));
    }
    const Tensor y = ops::batch_norm(x, g, s, fresh, false).value();
    const double expect =
        (x.value()[0] - fresh.running_mean[0]) / std::sqrt(fresh.running_var[0] + 1e-5) * g.value()[0] + s.value()[0];
    CHECK(y[0] == doctest::Approx(expect).epsilon(1e-12));
  }

  TEST_CASE("pooling ops") {
    Rng rng(6);
    Var x = Var::parameter(random_tensor({2, 4, 6, 3}, rng));
    CHECK(ops::avg_pool2(x).shape() == Tensor::Shape{2, 2, 3, 3});
    CHECK(ops::global_avg_pool(x).shape() == Tensor::Shape{2, 3});
    CHECK(check([&] { return probe(ops::avg_pool2(x)); }, {x}) < 1e-6);
    CHECK(check([&] { return probe(ops::global_avg_pool(x)); }, {x}) < 1e-6);
    Var odd = Var::constant(Tensor({1, 3, 4, 1}));
    CHECK_THROWS_AS(ops::avg_pool2(odd), ConfigError);
  }

  TEST_CASE("remap applies weighted gathers") {
    ops::RemapPlan plan;
    plan.in_size = 3;
    plan.out_shape = {2};
    plan.offsets = {0, 2, 3};
    plan.sources = {0, 2, 1};
    plan.weights = {0.5, 0.5, 2.0};
    Rng rng(7);
    Var x = Var::parameter(random_tensor({2, 3}, rng));
    const Tensor y = ops::remap(x, plan).value();
    CHECK(y.at({1, 0}) == doctest::Approx(0.5 * x.value()[3] + 0.5 * x.value()[5]));
    CHECK(y.at({1, 1}) == doctest::Approx(2.0 * x.value()[4]));
    CHECK(check([&] { return probe(ops::remap(x, plan)); }, {x}) < 1e-6);
  }

  TEST_CASE("cross entropy value, gradient and label validation") {
    Var logits = Var::parameter(Tensor({2, 2}, std::vector<double>{2.0, 0.0, 0.0, 0.0}));
    const std::vector<int> labels{0, 1};
    const double expect = 0.5 * (std::log(1.0 + std::exp(-2.0)) + std::log(2.0));
    CHECK(ops::cross_entropy(logits, labels).value()[0] == doctest::Approx(expect).epsilon(1e-14));
    CHECK(check([&] { return ops::cross_entropy(logits, labels); }, {logits}) < 1e-6);
    const std::vector<int> bad{0, 2};
    CHECK_THROWS_AS(ops::cross_entropy(logits, bad), ValidationError);
  }
}
