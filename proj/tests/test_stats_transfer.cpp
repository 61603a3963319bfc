#include <cmath>
#include <random>

#include "helpers.hpp"
#include "statdistill/errors.hpp"
#include "statdistill/grad_check.hpp"
#include "statdistill/models.hpp"
#include "statdistill/ops.hpp"
#include "statdistill/stats_transfer.hpp"

using namespace sdt;
using testutil::random_tensor;
using testutil::to_vec;
using TD = Tensor<double>;

namespace {

FeatureStats<double> random_stats(std::size_t n, std::size_t c, std::uint64_t seed) {
  return {random_tensor({n, c}, seed, -2.0, 2.0), random_tensor({n, c}, seed + 1, 0.5, 2.0), kStatsEps};
}

// A feature map whose every (n, c) plane has variance at least 1: a random
// map scaled by a per-plane gain drawn large enough.
TD wide_feature(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0), gain(2.0, 6.0), shift(-3.0, 3.0);
  const std::size_t hw = shape[2] * shape[3];
  std::vector<double> v(shape_numel(shape));
  for (std::size_t plane = 0; plane < shape[0] * shape[1]; ++plane) {
    const double g = gain(rng), s = shift(rng);
    for (std::size_t p = 0; p < hw; ++p) v[plane * hw + p] = s + g * u(rng);
  }
  return TD(shape, v);
}

}  // namespace

TEST_CASE("channel_stats examples") {
  SUBCASE("single channel [[1,3],[5,7]] with eps 0 limit") {
    const auto s = channel_stats(TD({1, 1, 2, 2}, std::vector<double>{1, 3, 5, 7}), 1e-300);
    CHECK(s.mu.item() == doctest::Approx(4.0).epsilon(1e-15));
    CHECK(s.sigma.item() == doctest::Approx(std::sqrt(5.0)).epsilon(1e-15));
  }
  SUBCASE("constant map") {
    const auto s = channel_stats(TD({1, 2, 3, 3}, 2.0), 1e-5);
    for (double m : s.mu.values()) CHECK(m == doctest::Approx(2.0).epsilon(1e-15));
    for (double sd : s.sigma.values()) CHECK(sd == doctest::Approx(std::sqrt(1e-5)).epsilon(1e-12));
  }
  SUBCASE("two identical samples give equal rows") {
    const auto one = to_vec(random_tensor({1, 3, 4, 4}, 9));
    std::vector<double> both = one;
    both.insert(both.end(), one.begin(), one.end());
    const auto s = channel_stats(TD({2, 3, 4, 4}, both));
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(s.mu.values()[c] == s.mu.values()[3 + c]);
      CHECK(s.sigma.values()[c] == s.sigma.values()[3 + c]);
    }
  }
  SUBCASE("random maps match the two-pass oracle; sigma >= sqrt(eps)") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const TD x = random_tensor({3, 4, 5, 5}, seed, -3.0, 3.0);
      const auto s = channel_stats(x);
      const auto m = oracle::plane_moments(to_vec(x), 3, 4, 25);
      for (std::size_t i = 0; i < 12; ++i) {
        CHECK(std::abs(s.mu.values()[i] - m.mean[i]) < 1e-12);
        CHECK(std::abs(s.sigma.values()[i] - std::sqrt(m.var[i] + kStatsEps)) < 1e-12);
        CHECK(s.sigma.values()[i] >= std::sqrt(kStatsEps));
      }
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(channel_stats(TD({2, 3})), DimensionError);
    CHECK_THROWS_AS(channel_stats(TD({1, 1, 2, 2}), 0.0), UsageError);
  }
}

TEST_CASE("loss_sm_pair") {
  SUBCASE("identical stats give zero") {
    const auto s = random_stats(3, 5, 1);
    CHECK(loss_sm_pair(s, s).item() == 0.0);
  }
  SUBCASE("single squared difference") {
    const FeatureStats<double> t{TD({1, 1}, 1.0), TD({1, 1}, 0.7)};
    const FeatureStats<double> s{TD({1, 1}, 0.0), TD({1, 1}, 0.7)};
    CHECK(loss_sm_pair(t, s).item() == 1.0);
  }
  SUBCASE("random stats match the summation oracle, symmetric, non-negative") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      const auto t = random_stats(4, 6, seed), s = random_stats(4, 6, seed + 100);
      const double ref = oracle::sm_pair(to_vec(t.mu), to_vec(t.sigma), to_vec(s.mu), to_vec(s.sigma), 4, 6);
      const double v = loss_sm_pair(t, s).item();
      CHECK(std::abs(v - ref) < 1e-12);
      CHECK(v > 0.0);
      CHECK(loss_sm_pair(s, t).item() == doctest::Approx(v).epsilon(1e-15));
    }
  }
  SUBCASE("gradient reaches the student side only") {
    auto t = random_stats(2, 3, 5), s = random_stats(2, 3, 6);
    t.mu.set_requires_grad(true);
    s.mu.set_requires_grad(true);
    s.sigma.set_requires_grad(true);
    backward(loss_sm_pair(t, s));
    for (double g : t.mu.grad()) CHECK(g == 0.0);
    bool any = false;
    for (double g : s.mu.grad()) any = any || g != 0.0;
    CHECK(any);
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(loss_sm_pair(random_stats(2, 3, 1), random_stats(2, 4, 2)), DimensionError);
    CHECK_THROWS_AS(loss_sm_pair(random_stats(2, 3, 1), random_stats(3, 3, 2)), DimensionError);
  }
}

TEST_CASE("loss_sm_total") {
  const TD t1 = random_tensor({2, 4, 4, 4}, 1), s1 = random_tensor({2, 4, 4, 4}, 2);
  const TD t2 = random_tensor({2, 8, 2, 2}, 3), s2 = random_tensor({2, 8, 2, 2}, 4);
  const TD t3 = random_tensor({2, 8, 2, 2}, 5), s3 = random_tensor({2, 2, 2, 2}, 6);
  ChannelAdapter<double> adapter(2, 8, 7);
  const std::vector<FeaturePair<double>> one = {{t1, s1, {}}};
  const double single = loss_sm_total<double>(one).item();
  CHECK(std::abs(single - oracle::sm_from_features(to_vec(t1), to_vec(s1), 2, 4, 16, kStatsEps)) < 1e-12);
  CHECK(single == loss_sm_pair(channel_stats(t1), channel_stats(s1)).item());

  const std::vector<FeaturePair<double>> dup = {{t1, s1, {}}, {t1, s1, {}}};
  CHECK(loss_sm_total<double>(dup).item() == 2.0 * single);

  const std::vector<FeaturePair<double>> three = {{t1, s1, {}}, {t2, s2, {}}, {t3, s3, {HookId::conv4, HookId::conv4, &adapter}}};
  const double expected = single + loss_sm_pair(channel_stats(t2), channel_stats(s2)).item() +
                          loss_sm_pair(channel_stats(t3), channel_stats(adapter.apply(s3))).item();
  CHECK(std::abs(loss_sm_total<double>(three).item() - expected) < 1e-12);

  CHECK_THROWS_AS(loss_sm_total<double>(std::span<const FeaturePair<double>>{}), UsageError);
  const std::vector<FeaturePair<double>> bad = {{t3, s3, {}}};
  CHECK_THROWS_AS(loss_sm_total<double>(bad), DimensionError);
}

TEST_CASE("adapter receives gradient and is trainable") {
  ChannelAdapter<double> adapter(2, 4, 3);
  CHECK(adapter.weight().shape() == Shape{4, 2, 1, 1});
  CHECK(adapter.weight().requires_grad());
  const std::vector<FeaturePair<double>> pairs = {
      {random_tensor({2, 4, 3, 3}, 1), random_tensor({2, 2, 3, 3}, 2), {HookId::conv3, HookId::conv3, &adapter}}};
  backward(loss_sm_total<double>(pairs));
  double norm = 0.0;
  for (double g : adapter.weight().grad()) norm += g * g;
  CHECK(norm > 0.0);
}

TEST_CASE("adain identity with own statistics, any eps") {
  for (double eps : {1e-8, 1e-5, 1e-2, 1.0}) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const TD f = random_tensor({2, 3, 4, 4}, seed, -2.0, 2.0);
      const TD out = adain(f, channel_stats(f, eps), eps);
      CHECK(testutil::max_abs_diff(to_vec(out), to_vec(f)) < 1e-12);
    }
  }
}

TEST_CASE("adain replaces statistics") {
  SUBCASE("constant content with style (0, 1) gives the zero map") {
    const FeatureStats<double> style{TD({1, 2}, 0.0), TD({1, 2}, 1.0)};
    const TD out = adain(TD({1, 2, 3, 3}, 4.5), style);
    for (double v : out.values()) CHECK(std::abs(v) < 1e-12);
  }
  SUBCASE("stats of the output match the style on high-variance channels") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      const TD f = wide_feature({2, 3, 4, 4}, seed);
      const auto style = random_stats(2, 3, seed + 500);
      const auto got = channel_stats(adain(f, style));
      for (std::size_t i = 0; i < 6; ++i) {
        CHECK(std::abs(got.mu.values()[i] - style.mu.values()[i]) <= 1e-3 * std::abs(style.mu.values()[i]) + 1e-12);
        CHECK(std::abs(got.sigma.values()[i] - style.sigma.values()[i]) <= 1e-3 * style.sigma.values()[i]);
      }
    }
  }
  SUBCASE("shifting the content does not move the output mean") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const TD f = wide_feature({2, 3, 4, 4}, seed);
      const auto style = random_stats(2, 3, seed + 700);
      const TD shifted = add(f, TD(f.shape(), 17.0));
      const auto got = channel_stats(adain(shifted, style));
      for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(got.mu.values()[i] - style.mu.values()[i]) < 1e-9);
    }
  }
  SUBCASE("applying twice with the same style equals applying once") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const TD f = wide_feature({2, 3, 4, 4}, seed);
      const FeatureStats<double> style{random_tensor({2, 3}, seed + 900, -2.0, 2.0),
                                       random_tensor({2, 3}, seed + 901, 1.0, 2.0)};
      const TD once = adain(f, style);
      const TD twice = adain(once, style);
      // The output of the first pass has variance s^2 v / (v + eps), so the
      // second pass rescales around s.mu by s / sqrt(s^2 v / (v + eps) + eps),
      // which differs from 1 at first order by (eps / 2)(1/v - 1/s^2).
      const auto content = oracle::plane_moments(to_vec(f), 2, 3, 16);
      const auto first = oracle::plane_moments(to_vec(once), 2, 3, 16);
      const auto o = to_vec(once), t = to_vec(twice);
      for (std::size_t plane = 0; plane < 6; ++plane) {
        const double mu = style.mu.values()[plane], s = style.sigma.values()[plane];
        const double gain = s / std::sqrt(first.var[plane] + kStatsEps);
        const double drift = 0.5 * kStatsEps * std::abs(1.0 / content.var[plane] - 1.0 / (s * s));
        for (std::size_t p = 0; p < 16; ++p) {
          const std::size_t i = plane * 16 + p;
          CHECK(std::abs(t[i] - (mu + gain * (o[i] - mu))) < 1e-12);
          CHECK(std::abs(t[i] - o[i]) <= 1.01 * drift * std::abs(o[i] - mu) + 1e-12);
        }
      }
    }
  }
  SUBCASE("dimension errors") {
    CHECK_THROWS_AS(adain(random_tensor({2, 3, 2, 2}, 1), random_stats(2, 4, 2)), DimensionError);
    CHECK_THROWS_AS(adain(random_tensor({2, 3, 2, 2}, 1), random_stats(1, 3, 2)), DimensionError);
    CHECK_THROWS_AS(adain(random_tensor({2, 3}, 1), random_stats(2, 3, 2)), DimensionError);
  }
}

TEST_CASE("adain gradient w.r.t. content and style") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const TD f = random_tensor({2, 3, 3, 3}, seed);
    const auto st = random_stats(2, 3, seed + 10);
    const TD w = random_tensor({2, 3, 3, 3}, seed + 20);
    auto r = grad_check([&](const TD& x) { return sum(mul(adain(x, st), w)); }, f);
    CHECK(r.max_rel_error < 1e-4);
    r = grad_check([&](const TD& mu) { return sum(mul(adain(f, FeatureStats<double>{mu, st.sigma}), w)); }, st.mu);
    CHECK(r.max_rel_error < 1e-4);
    r = grad_check([&](const TD& sg) { return sum(mul(adain(f, FeatureStats<double>{st.mu, sg}), w)); }, st.sigma);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("loss_adain") {
  SUBCASE("q == p gives zero loss and zero gradient") {
    const TD p = random_tensor({3, 4}, 1);
    TD q = p.clone();
    q.set_requires_grad(true);
    const TD l = loss_adain(p, q);
    CHECK(l.item() == 0.0);
    backward(l);
    for (double g : q.grad()) CHECK(g == 0.0);
  }
  SUBCASE("p=[1,0], q=[0,0]") {
    CHECK(loss_adain(TD({1, 2}, std::vector<double>{1, 0}), TD({1, 2}, 0.0)).item() == 1.0);
  }
  SUBCASE("p is detached") {
    TD p = random_tensor({2, 3}, 1);
    p.set_requires_grad(true);
    TD q = random_tensor({2, 3}, 2);
    q.set_requires_grad(true);
    backward(loss_adain(p, q));
    for (double g : p.grad()) CHECK(g == 0.0);
  }
  SUBCASE("shape mismatch") { CHECK_THROWS_AS(loss_adain(TD({2, 3}), TD({3, 2})), DimensionError); }
}

TEST_CASE("composed L_SM and L_AdaIN gradients through a frozen teacher tail, 5 seeds") {
  WrnConfig cfg{10, 1, 2, 3, 8};
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    CAPTURE(seed);
    auto teacher = build_wrn<double>(cfg, seed);
    // Non-trivial running statistics so the eval-mode tail is not an identity.
    teacher.set_training(true);
    {
      NoGradGuard g;
      for (int i = 0; i < 3; ++i) teacher.forward(random_tensor({4, 3, 8, 8}, seed * 10 + i, 0.0, 1.0));
    }
    teacher.freeze();
    for (auto h : kAllHooks) teacher.register_hook(h);
    const TD x = random_tensor({2, 3, 8, 8}, seed + 40, 0.0, 1.0);
    const TD p = teacher.forward(x, true);
    for (auto hook : kAllHooks) {
      CAPTURE(to_string(hook));
      const TD ft = teacher.captured(hook);
      const Shape fs_shape = ft.shape();
      auto f_adain = [&](const TD& fs) {
        const TD q = teacher.forward_from(hook, adain(ft.detach(), channel_stats(fs)));
        return loss_adain(p, q);
      };
      auto r = grad_check(f_adain, random_tensor(fs_shape, seed + 60));
      INFO("adain: " << r.max_rel_error << " analytic " << r.analytic_at_worst << " numeric " << r.numeric_at_worst);
      CHECK(r.max_rel_error < 1e-4);

      auto f_sm = [&](const TD& fs) {
        const std::vector<FeaturePair<double>> pairs = {{ft, fs, {hook, hook, nullptr}}};
        return loss_sm_total<double>(pairs);
      };
      r = grad_check(f_sm, random_tensor(fs_shape, seed + 61));
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("matching statistics leave the teacher output unchanged and give zero gradient") {
  WrnConfig cfg{10, 1, 2, 3, 8};
  auto teacher = build_wrn<double>(cfg, 3);
  teacher.freeze();
  for (auto h : kAllHooks) teacher.register_hook(h);
  const TD x = random_tensor({2, 3, 8, 8}, 4, 0.0, 1.0);
  const TD p = teacher.forward(x, true);
  for (auto hook : kAllHooks) {
    TD fs = teacher.captured(hook).clone();
    fs.set_requires_grad(true);
    const TD q = teacher.forward_from(hook, adain(teacher.captured(hook).detach(), channel_stats(fs)));
    CHECK(testutil::max_abs_diff(to_vec(q), to_vec(p)) < 1e-12);
    const TD l = loss_adain(p, q);
    CHECK(l.item() < 1e-24);
    backward(l);
    for (double g : fs.grad()) CHECK(std::abs(g) < 1e-10);
  }
}
