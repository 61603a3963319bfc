#include <omp.h>

#include <cstring>
#include <fstream>
#include <functional>

#include "helpers.hpp"
#include "statdistill/checkpoint.hpp"
#include "statdistill/errors.hpp"
#include "statdistill/grad_check.hpp"
#include "statdistill/kernels.hpp"
#include "statdistill/ops.hpp"

using namespace sdt;
using testutil::random_tensor;
using testutil::to_vec;
using TD = Tensor<double>;

namespace {

// Reduces any tensor to a scalar with fixed random weights so every output
// entry contributes a distinct amount to the gradient.
TD project(const TD& y, std::uint64_t seed) { return sum(mul(y, random_tensor(y.shape(), seed + 991))); }

void check_grad(const std::function<TD(const TD&)>& f, const Shape& shape, std::uint64_t seed) {
  const TD x = random_tensor(shape, seed);
  const auto r = grad_check(f, x);
  INFO("max rel error " << r.max_rel_error << " at " << r.worst_index << " analytic " << r.analytic_at_worst
                        << " numeric " << r.numeric_at_worst);
  CHECK(r.max_rel_error < 1e-4);
  CHECK(r.passed);
}

constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

}  // namespace

TEST_CASE("tensor construction and invariants") {
  TD t({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.values().size() == shape_numel(t.shape()));
  CHECK_FALSE(t.requires_grad());
  CHECK(t.grad().empty());
  t.set_requires_grad(true);
  CHECK(t.grad().size() == t.numel());
  t.mutable_grad()[2] = 4.0;
  t.zero_grad();
  for (double g : t.grad()) CHECK(g == 0.0);
  CHECK_THROWS_AS(TD({2, 2}, std::vector<double>(3)), DimensionError);
  CHECK_THROWS_AS(TD(Shape{1, 1, 1, 1, 1}), DimensionError);
  CHECK(TD({2, 2}, std::vector<double>{1, 2, 3, 4}).at({1, 0}) == 3.0);
}

TEST_CASE("graph outputs are immutable; leaves are not") {
  TD x = random_tensor({3}, 1);
  x.set_requires_grad(true);
  TD y = scale(x, 2.0);
  CHECK_FALSE(y.is_leaf());
  CHECK_THROWS_AS(y.mutable_values(), UsageError);
  CHECK_THROWS_AS(y.set_requires_grad(false), UsageError);
  CHECK_NOTHROW(x.mutable_values());
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives ones") {
    TD x = random_tensor({2, 3, 2}, 7);
    x.set_requires_grad(true);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("mse(w * x, 0) gives 2 w x^2") {
    TD w = TD::scalar(0.7);
    w.set_requires_grad(true);
    const TD x = TD::scalar(1.3);
    backward(mse(scale_by(x, w), TD::scalar(0.0)));
    CHECK(w.grad()[0] == doctest::Approx(2 * 0.7 * 1.3 * 1.3).epsilon(1e-14));
  }
  SUBCASE("non-scalar loss is a usage error") {
    TD x = random_tensor({3}, 2);
    x.set_requires_grad(true);
    CHECK_THROWS_AS(backward(scale(x, 2.0)), UsageError);
  }
  SUBCASE("loss without a graph is a usage error") { CHECK_THROWS_AS(backward(TD::scalar(1.0)), UsageError); }
  SUBCASE("tensors without requires_grad never receive gradient") {
    TD a = random_tensor({4}, 3);
    TD b = random_tensor({4}, 4);
    a.set_requires_grad(true);
    backward(sum(mul(a, b)));
    CHECK(b.grad().empty());
    CHECK(a.grad().size() == 4);
  }
  SUBCASE("no-grad mode records nothing") {
    TD a = random_tensor({4}, 3);
    a.set_requires_grad(true);
    TD y;
    {
      NoGradGuard g;
      y = sum(a);
    }
    CHECK(y.is_leaf());
    CHECK_FALSE(y.requires_grad());
  }
  SUBCASE("diamond graph visits each node once") {
    TD x = random_tensor({3}, 5);
    x.set_requires_grad(true);
    const TD y = square(x);
    backward(sum(add(y, y)));
    const auto xv = x.values();
    for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(4 * xv[i]).epsilon(1e-14));
  }
}

TEST_CASE("backward is linear in the loss") {
  for (auto seed : kSeeds) {
    TD w = random_tensor({3, 4}, seed);
    w.set_requires_grad(true);
    const TD x = random_tensor({2, 4}, seed + 10);
    const std::vector<int> labels = {1, 2};
    auto l1 = [&] { return cross_entropy(linear(x, w, TD::zeros({3})), labels); };
    auto l2 = [&] { return mse(linear(x, w, TD::zeros({3})), random_tensor({2, 3}, seed + 20)); };
    backward(add(l1(), l2()));
    const auto joint = to_vec(TD({12}, std::vector<double>(w.grad().begin(), w.grad().end())));
    w.zero_grad();
    backward(l1());
    backward(l2());
    const std::vector<double> separate(w.grad().begin(), w.grad().end());
    CHECK(testutil::max_abs_diff(joint, separate) < 1e-14);
  }
}

TEST_CASE("two identical forward/backward passes give bitwise-identical gradients") {
  auto run = [] {
    TD x = random_tensor({2, 3, 6, 6}, 11);
    TD w = random_tensor({4, 3, 3, 3}, 12);
    w.set_requires_grad(true);
    x.set_requires_grad(true);
    RunningStats<double> rs = RunningStats<double>::standard(4);
    TD y = batchnorm2d(conv2d(x, w, TD{}, 2, 1), TD::ones({4}), TD::zeros({4}), rs, BatchNormMode::train, 0.1, 1e-5);
    backward(sum(square(relu(y))));
    return std::make_pair(to_vec(TD(w.shape(), std::vector<double>(w.grad().begin(), w.grad().end()))),
                          std::vector<double>(x.grad().begin(), x.grad().end()));
  };
  const auto a = run(), b = run();
  CHECK(std::memcmp(a.first.data(), b.first.data(), a.first.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(a.second.data(), b.second.data(), a.second.size() * sizeof(double)) == 0);
}

TEST_CASE("conv2d examples and oracle agreement") {
  SUBCASE("1x1x1x1 scalar product") {
    const TD y = conv2d(TD({1, 1, 1, 1}, 2.0), TD({1, 1, 1, 1}, 3.0), TD{}, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == 6.0);
  }
  SUBCASE("identity 1x1 kernel") {
    const TD x = random_tensor({2, 1, 5, 4}, 3);
    CHECK(testutil::bitwise_equal(conv2d(x, TD({1, 1, 1, 1}, 1.0), TD{}, 1, 0), x));
  }
  SUBCASE("random shapes up to 4x8x8x8 match the nested-loop oracle to 1e-12") {
    struct Case {
      std::size_t n, ci, h, w, co, k, stride, pad;
      bool bias;
    };
    const Case cases[] = {{1, 2, 4, 4, 3, 3, 1, 1, true},  {4, 8, 8, 8, 8, 3, 1, 1, false},
                          {4, 8, 8, 8, 8, 3, 2, 1, true},  {3, 5, 7, 6, 4, 1, 2, 0, true},
                          {2, 3, 8, 8, 6, 1, 1, 0, false}, {2, 4, 5, 5, 2, 3, 2, 0, true}};
    std::uint64_t seed = 100;
    for (const auto& c : cases) {
      const TD x = random_tensor({c.n, c.ci, c.h, c.w}, seed++);
      const TD w = random_tensor({c.co, c.ci, c.k, c.k}, seed++);
      const TD b = random_tensor({c.co}, seed++);
      const TD y = conv2d(x, w, c.bias ? b : TD{}, c.stride, c.pad);
      std::size_t ho = 0, wo = 0;
      const auto bv = to_vec(b);
      const auto ref = oracle::conv2d(to_vec(x), to_vec(w), c.bias ? &bv : nullptr, c.n, c.ci, c.h, c.w, c.co, c.k,
                                      c.stride, c.pad, ho, wo);
      CHECK(y.shape() == Shape{c.n, c.co, ho, wo});
      CHECK(testutil::max_abs_diff(to_vec(y), ref) < 1e-12);
    }
  }
  SUBCASE("errors name the offending axis") {
    const TD x = random_tensor({1, 3, 4, 4}, 1);
    try {
      conv2d(x, random_tensor({2, 2, 3, 3}, 2), TD{}, 1, 1);
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      CHECK(std::string(e.what()).find("axis 1") != std::string::npos);
    }
    CHECK_THROWS_AS(conv2d(x, random_tensor({2, 3, 2, 2}, 2), TD{}, 1, 1), DimensionError);
    CHECK_THROWS_AS(conv2d(x, random_tensor({2, 3, 3, 3}, 2), TD{}, 3, 1), UsageError);
    CHECK_THROWS_AS(conv2d(x, random_tensor({2, 3, 3, 3}, 2), random_tensor({3}, 3), 1, 1), DimensionError);
  }
}

TEST_CASE("serial and parallel kernels agree and are thread-count independent") {
  kernels::ConvGeometry g{3, 5, 9, 7, 6, 3, 3, 2, 1, 0, 0};
  g.out_h = (g.in_h + 2 * g.padding - g.kernel_h) / g.stride + 1;
  g.out_w = (g.in_w + 2 * g.padding - g.kernel_w) / g.stride + 1;
  const auto x = oracle::random_vec(g.input_size(), 1);
  const auto w = oracle::random_vec(g.weight_size(), 2);
  const auto b = oracle::random_vec(g.out_channels, 3);
  const auto go = oracle::random_vec(g.output_size(), 4);

  auto run = [&](bool parallel) {
    std::vector<double> y(g.output_size()), gi(g.input_size(), 0.0), gw(g.weight_size(), 0.0), gb(g.out_channels, 0.0);
    if (parallel) {
      kernels::parallel::conv2d_forward<double>(g, x, w, b, y);
      kernels::parallel::conv2d_backward_input<double>(g, go, w, gi);
      kernels::parallel::conv2d_backward_weight<double>(g, go, x, gw);
      kernels::parallel::conv2d_backward_bias<double>(g, go, gb);
    } else {
      kernels::serial::conv2d_forward<double>(g, x, w, b, y);
      kernels::serial::conv2d_backward_input<double>(g, go, w, gi);
      kernels::serial::conv2d_backward_weight<double>(g, go, x, gw);
      kernels::serial::conv2d_backward_bias<double>(g, go, gb);
    }
    std::vector<double> all = y;
    all.insert(all.end(), gi.begin(), gi.end());
    all.insert(all.end(), gw.begin(), gw.end());
    all.insert(all.end(), gb.begin(), gb.end());
    return all;
  };
  const auto serial = run(false);
  const int threads = omp_get_max_threads();
  omp_set_num_threads(1);
  const auto one = run(true);
  omp_set_num_threads(4);
  const auto four = run(true);
  omp_set_num_threads(threads);
  CHECK(testutil::max_abs_diff(serial, one) < 1e-12);
  CHECK(std::memcmp(one.data(), four.data(), one.size() * sizeof(double)) == 0);

  kernels::LinearGeometry lg{5, 13, 7};
  const auto lx = oracle::random_vec(lg.batch * lg.in_features, 5);
  const auto lw = oracle::random_vec(lg.out_features * lg.in_features, 6);
  const auto lb = oracle::random_vec(lg.out_features, 7);
  std::vector<double> ys(lg.batch * lg.out_features), yp(ys.size());
  kernels::serial::linear_forward<double>(lg, lx, lw, lb, ys);
  kernels::parallel::linear_forward<double>(lg, lx, lw, lb, yp);
  CHECK(testutil::max_abs_diff(ys, yp) < 1e-12);
}

TEST_CASE("linear matches the triple-loop oracle") {
  for (auto seed : kSeeds) {
    const TD x = random_tensor({4, 8}, seed), w = random_tensor({5, 8}, seed + 1), b = random_tensor({5}, seed + 2);
    const auto ref = oracle::linear(to_vec(x), to_vec(w), to_vec(b), 4, 8, 5);
    CHECK(testutil::max_abs_diff(to_vec(linear(x, w, b)), ref) < 1e-12);
  }
  CHECK_THROWS_AS(linear(random_tensor({2, 3}, 1), random_tensor({4, 2}, 2), random_tensor({4}, 3)), DimensionError);
}

TEST_CASE("batchnorm2d") {
  SUBCASE("eval with standard stats and eps 0 is the identity") {
    const TD x = random_tensor({2, 3, 4, 4}, 1);
    auto rs = RunningStats<double>::standard(3);
    const TD y = batchnorm2d(x, TD::ones({3}), TD::zeros({3}), rs, BatchNormMode::eval, 0.1, 0.0);
    CHECK(testutil::max_abs_diff(to_vec(y), to_vec(x)) == 0.0);
  }
  SUBCASE("constant channel in train mode outputs beta") {
    std::vector<double> v(2 * 2 * 3 * 3);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (i / 9) % 2 == 0 ? 3.0 : static_cast<double>(i % 7);
    const TD x({2, 2, 3, 3}, v);
    auto rs = RunningStats<double>::standard(2);
    const TD beta({2}, std::vector<double>{0.25, -1.0});
    const TD y = batchnorm2d(x, TD::ones({2}), beta, rs, BatchNormMode::train, 0.1, 1e-5);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t p = 0; p < 9; ++p) CHECK(y.values()[(n * 2) * 9 + p] == doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("train mode standardises each channel") {
    const TD x = random_tensor({2, 3, 4, 4}, 5, -2.0, 3.0);
    auto rs = RunningStats<double>::standard(3);
    const TD y = batchnorm2d(x, TD::ones({3}), TD::zeros({3}), rs, BatchNormMode::train, 0.1, 1e-5);
    const auto m = oracle::batch_channel_moments(to_vec(y), 2, 3, 16);
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(std::abs(m.mean[c]) < 1e-10);
      CHECK(std::abs(m.var[c] - 1.0) < 1e-6 + 1e-4);  // eps shrinks the variance by var/(var+eps)
    }
    // Running statistics follow the EMA with the unbiased batch variance.
    const auto xm = oracle::batch_channel_moments(to_vec(x), 2, 3, 16);
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(rs.mean.values()[c] == doctest::Approx(0.1 * xm.mean[c]).epsilon(1e-12));
      CHECK(rs.var.values()[c] == doctest::Approx(0.9 + 0.1 * xm.var[c] * 32.0 / 31.0).epsilon(1e-12));
    }
  }
  SUBCASE("train-mode output variance matches var/(var+eps) exactly") {
    const TD x = random_tensor({2, 3, 4, 4}, 6, -2.0, 3.0);
    auto rs = RunningStats<double>::standard(3);
    const TD y = batchnorm2d(x, TD::ones({3}), TD::zeros({3}), rs, BatchNormMode::train, 0.1, 1e-5);
    const auto xm = oracle::batch_channel_moments(to_vec(x), 2, 3, 16);
    const auto ym = oracle::batch_channel_moments(to_vec(y), 2, 3, 16);
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(ym.var[c] - xm.var[c] / (xm.var[c] + 1e-5)) < 1e-10);
  }
  SUBCASE("eval mode with uninitialised running stats is a state error") {
    RunningStats<double> rs;
    CHECK_THROWS_AS(batchnorm2d(random_tensor({1, 2, 2, 2}, 1), TD::ones({2}), TD::zeros({2}), rs,
                                BatchNormMode::eval, 0.1, 1e-5),
                    StateError);
  }
  SUBCASE("channel mismatch") {
    auto rs = RunningStats<double>::standard(2);
    CHECK_THROWS_AS(batchnorm2d(random_tensor({1, 3, 2, 2}, 1), TD::ones({2}), TD::zeros({2}), rs,
                                BatchNormMode::train, 0.1, 1e-5),
                    DimensionError);
  }
}

TEST_CASE("elementwise and reduction examples") {
  SUBCASE("softmax of equal logits is uniform") {
    const TD p = softmax(TD({2, 5}, 3.25));
    for (double v : p.values()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));
  }
  SUBCASE("avg_pool_global of a constant map") {
    const TD y = avg_pool_global(TD({2, 3, 4, 5}, -1.75));
    CHECK(y.shape() == Shape{2, 3});
    for (double v : y.values()) CHECK(v == doctest::Approx(-1.75).epsilon(1e-15));
  }
  SUBCASE("relu has zero derivative at zero") {
    TD x({3}, std::vector<double>{-1.0, 0.0, 2.0});
    x.set_requires_grad(true);
    backward(sum(relu(x)));
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 0.0);
    CHECK(x.grad()[2] == 1.0);
  }
  SUBCASE("add requires identical shapes") {
    CHECK_THROWS_AS(add(TD({2, 3}), TD({3, 2})), DimensionError);
    CHECK_THROWS_AS(mul(TD({2}), TD({3})), DimensionError);
  }
}

TEST_CASE("cross entropy") {
  SUBCASE("saturated correct prediction is about zero") {
    std::vector<double> z(3 * 4, 0.0);
    const std::vector<int> labels = {0, 3, 2};
    for (std::size_t n = 0; n < 3; ++n) z[n * 4 + static_cast<std::size_t>(labels[n])] = 1e6;
    CHECK(cross_entropy(TD({3, 4}, z), labels).item() < 1e-12);
  }
  SUBCASE("zero logits give ln K") {
    CHECK(cross_entropy(TD({3, 7}, 0.0), std::vector<int>{0, 6, 3}).item() ==
          doctest::Approx(std::log(7.0)).epsilon(1e-15));
  }
  SUBCASE("random logits match the direct formula") {
    for (auto seed : kSeeds) {
      const TD z = random_tensor({4, 10}, seed, -3.0, 3.0);
      const std::vector<int> labels = {0, 9, 4, 4};
      CHECK(std::abs(cross_entropy(z, labels).item() - oracle::cross_entropy(to_vec(z), labels, 10)) < 1e-12);
    }
  }
  SUBCASE("labels out of range and count mismatch") {
    CHECK_THROWS_AS(cross_entropy(TD({2, 3}), std::vector<int>{0, 3}), InputError);
    CHECK_THROWS_AS(cross_entropy(TD({2, 3}), std::vector<int>{-1, 0}), InputError);
    CHECK_THROWS_AS(cross_entropy(TD({2, 3}), std::vector<int>{0}), DimensionError);
  }
}

TEST_CASE("mse reduction") {
  const TD x = random_tensor({3, 4}, 1);
  CHECK(mse(x, x).item() == 0.0);
  CHECK(mse(TD({1, 2}, std::vector<double>{1, 2}), TD({1, 2}, std::vector<double>{1, 4})).item() == 4.0);
  for (auto seed : kSeeds) {
    const TD a = random_tensor({3, 2, 2}, seed), b = random_tensor({3, 2, 2}, seed + 50);
    const auto av = to_vec(a), bv = to_vec(b);
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
    CHECK(std::abs(mse(a, b).item() - s / 3.0) < 1e-14);
  }
  CHECK_THROWS_AS(mse(TD({2, 2}), TD({2, 3})), DimensionError);
}

TEST_CASE("finite-difference gradient check for every op, 5 seeds") {
  for (auto seed : kSeeds) {
    CAPTURE(seed);
    const TD w3 = random_tensor({4, 3, 3, 3}, seed + 1);
    const TD w1 = random_tensor({4, 3, 1, 1}, seed + 2);
    const TD b4 = random_tensor({4}, seed + 3);
    const TD g3 = random_tensor({3}, seed + 4, 0.5, 1.5);
    const TD b3 = random_tensor({3}, seed + 5);
    const TD lw = random_tensor({5, 6}, seed + 6);
    const TD lb = random_tensor({5}, seed + 7);
    const TD other = random_tensor({2, 6}, seed + 8);
    const TD pos = random_tensor({2, 6}, seed + 9, 0.5, 2.0);
    const TD nc = random_tensor({2, 3}, seed + 10);
    const std::vector<int> labels = {1, 4};
    const TD probs = softmax(random_tensor({2, 5}, seed + 11));
    const Shape fmap{2, 3, 5, 5};

    SUBCASE("conv2d input, 3x3 stride 1 pad 1") { check_grad([&](const TD& x) { return project(conv2d(x, w3, b4, 1, 1), seed); }, fmap, seed); }
    SUBCASE("conv2d input, 3x3 stride 2 pad 1") { check_grad([&](const TD& x) { return project(conv2d(x, w3, TD{}, 2, 1), seed); }, fmap, seed); }
    SUBCASE("conv2d input, 1x1 stride 2") { check_grad([&](const TD& x) { return project(conv2d(x, w1, b4, 2, 0), seed); }, fmap, seed); }
    SUBCASE("conv2d weight") {
      const TD x = random_tensor(fmap, seed + 20);
      check_grad([&](const TD& w) { return project(conv2d(x, w, b4, 2, 1), seed); }, {4, 3, 3, 3}, seed);
    }
    SUBCASE("conv2d bias") {
      const TD x = random_tensor(fmap, seed + 20);
      check_grad([&](const TD& b) { return project(conv2d(x, w3, b, 1, 1), seed); }, {4}, seed);
    }
    SUBCASE("batchnorm2d train, input") {
      check_grad([&](const TD& x) {
        auto rs = RunningStats<double>::standard(3);
        return project(batchnorm2d(x, g3, b3, rs, BatchNormMode::train, 0.1, 1e-5), seed);
      }, fmap, seed);
    }
    SUBCASE("batchnorm2d train, gamma and beta") {
      const TD x = random_tensor(fmap, seed + 21);
      check_grad([&](const TD& g) {
        auto rs = RunningStats<double>::standard(3);
        return project(batchnorm2d(x, g, b3, rs, BatchNormMode::train, 0.1, 1e-5), seed);
      }, {3}, seed);
      check_grad([&](const TD& b) {
        auto rs = RunningStats<double>::standard(3);
        return project(batchnorm2d(x, g3, b, rs, BatchNormMode::train, 0.1, 1e-5), seed);
      }, {3}, seed);
    }
    SUBCASE("batchnorm2d eval, input") {
      auto rs = RunningStats<double>{random_tensor({3}, seed + 30), random_tensor({3}, seed + 31, 0.5, 2.0)};
      check_grad([&](const TD& x) { return project(batchnorm2d(x, g3, b3, rs, BatchNormMode::eval, 0.1, 1e-5), seed); }, fmap, seed);
    }
    SUBCASE("relu") { check_grad([&](const TD& x) { return project(relu(x), seed); }, fmap, seed); }
    SUBCASE("avg_pool_global") { check_grad([&](const TD& x) { return project(avg_pool_global(x), seed); }, fmap, seed); }
    SUBCASE("linear input, weight, bias") {
      const TD x = random_tensor({2, 6}, seed + 22);
      check_grad([&](const TD& v) { return project(linear(v, lw, lb), seed); }, {2, 6}, seed);
      check_grad([&](const TD& w) { return project(linear(x, w, lb), seed); }, {5, 6}, seed);
      check_grad([&](const TD& b) { return project(linear(x, lw, b), seed); }, {5}, seed);
    }
    SUBCASE("add, sub, mul, div") {
      check_grad([&](const TD& x) { return project(add(x, other), seed); }, {2, 6}, seed);
      check_grad([&](const TD& x) { return project(sub(other, x), seed); }, {2, 6}, seed);
      check_grad([&](const TD& x) { return project(mul(x, x), seed); }, {2, 6}, seed);
      check_grad([&](const TD& x) { return project(div(x, pos), seed); }, {2, 6}, seed);
      check_grad([&](const TD& x) { return project(div(other, add(square(x), TD({2, 6}, 0.5))), seed); }, {2, 6}, seed);
    }
    SUBCASE("scale, scale_by, square, sum, mean") {
      check_grad([&](const TD& x) { return project(scale(x, -2.5), seed); }, {2, 6}, seed);
      check_grad([&](const TD& s) { return project(scale_by(other, s), seed); }, {1}, seed);
      check_grad([&](const TD& x) { return project(square(x), seed); }, {2, 6}, seed);
      check_grad([&](const TD& x) { return sum(square(x)); }, {2, 6}, seed);
      check_grad([&](const TD& x) { return mean(mul(x, other)); }, {2, 6}, seed);
    }
    SUBCASE("softmax and log_softmax") {
      check_grad([&](const TD& x) { return project(softmax(x), seed); }, {2, 5}, seed);
      check_grad([&](const TD& x) { return project(log_softmax(x), seed); }, {2, 5}, seed);
    }
    SUBCASE("cross_entropy, kl_div_with_logits, mse") {
      check_grad([&](const TD& x) { return cross_entropy(x, labels); }, {2, 5}, seed);
      check_grad([&](const TD& x) { return kl_div_with_logits(x, probs); }, {2, 5}, seed);
      check_grad([&](const TD& x) { return mse(x, other); }, {2, 6}, seed);
    }
    SUBCASE("channel statistics and affine") {
      check_grad([&](const TD& x) { return project(channel_mean(x), seed); }, fmap, seed);
      check_grad([&](const TD& x) { return project(channel_std(x, 1e-5), seed); }, fmap, seed);
      check_grad([&](const TD& x) { return project(channel_affine(x, nc, nc), seed); }, fmap, seed);
      const TD x = random_tensor(fmap, seed + 23);
      check_grad([&](const TD& s) { return project(channel_affine(x, s, nc), seed); }, {2, 3}, seed);
      check_grad([&](const TD& s) { return project(channel_affine(x, nc, s), seed); }, {2, 3}, seed);
    }
    SUBCASE("channel_energy and l2_normalize_rows") {
      check_grad([&](const TD& x) { return project(channel_energy(x), seed); }, fmap, seed);
      check_grad([&](const TD& x) { return project(l2_normalize_rows(x), seed); }, {2, 6}, seed);
    }
    SUBCASE("composed cross entropy through linear") {
      check_grad([&](const TD& x) { return cross_entropy(linear(x, lw, lb), labels); }, {2, 6}, seed);
    }
  }
}

TEST_CASE("grad_check reports zero error for sum") {
  const auto r = grad_check([](const TD& x) { return sum(x); }, random_tensor({3, 3}, 1));
  CHECK(r.max_rel_error < 1e-9);
  CHECK(r.passed);
}

TEST_CASE("grad_check flags a wrong gradient") {
  // relu's subgradient at 0 is 0 while the central difference sees 1/2.
  const auto r = grad_check([](const TD& x) { return sum(relu(x)); }, TD({2}, 0.0));
  CHECK_FALSE(r.passed);
  CHECK(r.numeric_at_worst == doctest::Approx(0.5));
}

TEST_CASE("checkpoint round trip and corruption") {
  const std::vector<NamedTensor> entries = {{"a.weight", {2, 3}, {1, 2, 3, 4, 5, -6.5f}},
                                            {"b", {1}, {0.125f}},
                                            {"c.ü", {1, 1, 2, 1}, {7, 8}}};
  const auto bytes = encode_checkpoint(entries);
  CHECK(std::memcmp(bytes.data(), "SDT1", 4) == 0);
  // u32 name length, little-endian.
  CHECK(bytes[4] == 8);
  CHECK(bytes[5] == 0);
  const auto back = decode_checkpoint(bytes);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].name == entries[i].name);
    CHECK(back[i].shape == entries[i].shape);
    CHECK(back[i].values == entries[i].values);
  }

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);

  const std::vector<unsigned char> truncated(bytes.begin(), bytes.begin() + 20);
  try {
    decode_checkpoint(truncated);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }

  const auto dir = testutil::temp_dir("ckpt");
  write_checkpoint(dir / "x.ckpt", entries);
  CHECK(read_checkpoint(dir / "x.ckpt").size() == 3);
  CHECK_THROWS_AS(read_checkpoint(dir / "missing.ckpt"), FileError);
}
