#include <cmath>
#include <cstring>
#include <random>

#include "helpers.hpp"
#include "statdistill/data.hpp"
#include "statdistill/errors.hpp"
#include "statdistill/grad_check.hpp"
#include "statdistill/models.hpp"
#include "statdistill/trainer.hpp"

using namespace sdt;
using testutil::random_tensor;
using testutil::to_vec;
using TD = Tensor<double>;

namespace {

// Tiny teacher/student pair with different widths so adapters are in play.
const WrnConfig kToyTeacher{10, 2, 2, 3, 8};
const WrnConfig kToyStudent{10, 1, 2, 3, 8};

template <typename T>
Batch<T> random_batch(std::size_t n, std::size_t side, int classes, std::uint64_t seed) {
  Batch<T> b{random_tensor<T>({n, 3, side, side}, seed, 0.0, 1.0), {}};
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(static_cast<int>((seed + i) % static_cast<std::size_t>(classes)));
  return b;
}

template <typename T>
WideResNet<T> frozen_teacher(const WrnConfig& cfg, std::uint64_t seed) {
  auto t = build_wrn<T>(cfg, seed);
  {
    NoGradGuard g;
    t.set_training(true);
    const auto side = static_cast<std::size_t>(cfg.input_size);
    for (int i = 0; i < 3; ++i) t.forward(random_tensor<T>({8, 3, side, side}, seed + 50 + i, 0.0, 1.0));
  }
  t.freeze();
  return t;
}

template <typename T>
std::vector<std::vector<T>> param_values(const WideResNet<T>& m) {
  std::vector<std::vector<T>> out;
  m.visit_state([&](const std::string&, const Tensor<T>& t) { out.emplace_back(t.values().begin(), t.values().end()); });
  return out;
}

LossConfig loss(double alpha, double beta, std::vector<HookId> positions = {HookId::conv4}) {
  LossConfig l;
  l.alpha = alpha;
  l.beta = beta;
  l.positions = std::move(positions);
  return l;
}

bool contains(const std::string& text, const std::string& part) { return text.find(part) != std::string::npos; }

}  // namespace

TEST_CASE("loss config validation lists every problem") {
  LossConfig l;
  l.alpha = -1;
  l.beta = -0.5;
  l.kd_temperature = 0;
  l.kd_alpha = 2;
  l.positions = {HookId::conv3, HookId::conv3};
  const auto problems = l.problems();
  CHECK(problems.size() == 5);
  try {
    l.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(contains(e.what(), "loss.alpha"));
    CHECK(contains(e.what(), "loss.kd_temperature"));
  }
  LossConfig empty_positions;
  empty_positions.positions.clear();
  CHECK_THROWS_AS(empty_positions.validate(), ConfigError);
  empty_positions.alpha = empty_positions.beta = 0;
  CHECK_NOTHROW(empty_positions.validate());
  CHECK_NOTHROW(LossConfig{}.validate());
}

TEST_CASE("train config validation and schedule") {
  TrainConfig t;
  CHECK_NOTHROW(t.validate());
  CHECK(t.lr_at(0) == 0.1);
  CHECK(t.lr_at(29) == 0.1);
  CHECK(t.lr_at(30) == doctest::Approx(0.02).epsilon(1e-15));
  CHECK(t.lr_at(45) == doctest::Approx(0.004).epsilon(1e-15));
  t.lr_milestones = {{10, 0.5}, {10, 0.5}};
  t.lr = 0;
  const auto problems = t.problems();
  CHECK(problems.size() == 2);
  CHECK_THROWS_AS(t.validate(), ConfigError);
  TrainConfig bad;
  bad.momentum = 1.0;
  bad.batch_size = 0;
  CHECK(bad.problems().size() == 2);
}

TEST_CASE("enum parsing") {
  CHECK(parse_baseline("kd") == Baseline::kd);
  CHECK(parse_injection("joint") == AdainInjection::joint);
  CHECK(parse_precision("high") == Precision::high);
  CHECK(to_string(Baseline::at) == "at");
  CHECK_THROWS_AS(parse_baseline("crd"), ConfigError);
  CHECK_THROWS_AS(parse_precision("half"), ConfigError);
}

TEST_CASE("loss_kd") {
  const std::vector<int> labels = {0, 3, 1, 2};
  SUBCASE("identical logits leave only the CE share") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const TD z = random_tensor({4, 5}, seed, -3.0, 3.0);
      CHECK(std::abs(loss_kd(z, z, labels, 1.0, 4.0).item()) < 1e-14);
      const double ce = cross_entropy(z, labels).item();
      CHECK(std::abs(loss_kd(z, z, labels, 0.9, 4.0).item() - 0.1 * ce) < 1e-14);
    }
  }
  SUBCASE("kd_alpha = 0 is plain CE") {
    const TD s = random_tensor({4, 5}, 1), t = random_tensor({4, 5}, 2);
    CHECK(loss_kd(s, t, labels, 0.0, 4.0).item() == doctest::Approx(cross_entropy(s, labels).item()).epsilon(1e-15));
  }
  SUBCASE("random logits match the direct-formula oracle") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      const TD s = random_tensor({4, 5}, seed, -4.0, 4.0), t = random_tensor({4, 5}, seed + 100, -4.0, 4.0);
      for (double temp : {1.0, 2.5, 4.0}) {
        const double ref = oracle::kd_loss(to_vec(s), to_vec(t), labels, 5, 0.9, temp);
        CHECK(std::abs(loss_kd(s, t, labels, 0.9, temp).item() - ref) < 1e-10);
      }
    }
  }
  SUBCASE("teacher logits are detached; student gradient matches finite differences") {
    TD t = random_tensor({4, 5}, 7);
    t.set_requires_grad(true);
    TD s = random_tensor({4, 5}, 8);
    s.set_requires_grad(true);
    backward(loss_kd(s, t, labels, 0.9, 4.0));
    for (double g : t.grad()) CHECK(g == 0.0);
    const TD tc = t.detach();
    const auto r = grad_check([&](const TD& x) { return loss_kd(x, tc, labels, 0.9, 4.0); }, s.detach());
    CHECK(r.max_rel_error < 1e-4);
  }
  SUBCASE("temperature must be positive") {
    const TD z = random_tensor({4, 5}, 1);
    CHECK_THROWS_AS(loss_kd(z, z, labels, 0.9, 0.0), ConfigError);
    CHECK_THROWS_AS(loss_kd(z, z, labels, 0.9, -1.0), ConfigError);
  }
}

TEST_CASE("loss_at") {
  SUBCASE("identical features give zero") {
    const TD f = random_tensor({2, 4, 3, 3}, 1);
    CHECK(loss_at(f, f).item() < 1e-30);
  }
  SUBCASE("matches the attention-map oracle, including differing channel counts") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const TD s = random_tensor({3, 2, 4, 4}, seed), t = random_tensor({3, 5, 4, 4}, seed + 20);
      CHECK(std::abs(loss_at(s, t).item() - oracle::at_loss(to_vec(s), to_vec(t), 3, 2, 5, 16)) < 1e-14);
    }
  }
  SUBCASE("invariant to positive scaling of either feature, 100 scalings") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> logscale(-4.0, 4.0);
    const TD s = random_tensor({2, 3, 4, 4}, 11), t = random_tensor({2, 6, 4, 4}, 12);
    const double base = loss_at(s, t).item();
    for (int i = 0; i < 100; ++i) {
      const double a = std::exp(logscale(rng)), b = std::exp(logscale(rng));
      CHECK(std::abs(loss_at(scale(s, a), scale(t, b)).item() - base) <= 1e-6 * base);
    }
  }
  SUBCASE("gradient") {
    const TD t = random_tensor({2, 3, 3, 3}, 4);
    const auto r = grad_check([&](const TD& x) { return loss_at(x, t); }, random_tensor({2, 2, 3, 3}, 5));
    CHECK(r.max_rel_error < 1e-4);
  }
  SUBCASE("spatial or batch mismatch") {
    CHECK_THROWS_AS(loss_at(random_tensor({2, 3, 4, 4}, 1), random_tensor({2, 3, 2, 2}, 2)), DimensionError);
    CHECK_THROWS_AS(loss_at(random_tensor({2, 3, 4, 4}, 1), random_tensor({3, 3, 4, 4}, 2)), DimensionError);
  }
}

TEST_CASE("sgd update rule") {
  TD w({3}, std::vector<double>{1.0, -2.0, 0.5});
  w.set_requires_grad(true);
  TD b({1}, 0.25);
  b.set_requires_grad(true);
  SgdOptimizer<double> opt(0.9, 0.1);
  opt.add({"w", w, true});
  opt.add({"b", b, false});
  // Two steps with fixed gradients, computed by hand.
  const std::vector<double> g = {0.5, 0.5, -1.0};
  std::vector<double> v(3, 0.0), ref = {1.0, -2.0, 0.5};
  double vb = 0.0, rb = 0.25;
  for (int step = 0; step < 2; ++step) {
    opt.zero_grad();
    for (std::size_t i = 0; i < 3; ++i) w.mutable_grad()[i] = g[i];
    b.mutable_grad()[0] = 1.0;
    opt.step(0.1);
    for (std::size_t i = 0; i < 3; ++i) {
      v[i] = 0.9 * v[i] + g[i] + 0.1 * ref[i];
      ref[i] -= 0.1 * v[i];
    }
    vb = 0.9 * vb + 1.0;
    rb -= 0.1 * vb;
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(w.values()[i] == doctest::Approx(ref[i]).epsilon(1e-15));
  CHECK(b.values()[0] == doctest::Approx(rb).epsilon(1e-15));

  const auto state = opt.state();
  REQUIRE(state.size() == 2);
  CHECK(state[0].name == "momentum.w");
  SgdOptimizer<double> other(0.9, 0.1);
  TD w2 = w.clone();
  other.add({"w", w2, true});
  CHECK_THROWS_AS(other.load_state(std::vector<NamedTensor>{}), FormatError);
  CHECK_NOTHROW(other.load_state(state));
}

TEST_CASE("distiller preconditions") {
  auto teacher = frozen_teacher<double>(kToyTeacher, 1);
  auto student = build_wrn<double>(kToyStudent, 2);
  SUBCASE("unfrozen teacher") {
    auto live = build_wrn<double>(kToyTeacher, 1);
    CHECK_THROWS_AS(Distiller<double>(student, live, loss(1, 1), 0.9, 5e-4, 0), UsageError);
  }
  SUBCASE("frozen student") {
    auto other = frozen_teacher<double>(kToyStudent, 3);
    CHECK_THROWS_AS(Distiller<double>(other, teacher, loss(1, 1), 0.9, 5e-4, 0), UsageError);
  }
  SUBCASE("class or input mismatch") {
    auto wrong = build_wrn<double>({10, 1, 2, 5, 8}, 2);
    CHECK_THROWS_AS(Distiller<double>(wrong, teacher, loss(1, 1), 0.9, 5e-4, 0), ConfigError);
    auto wrong_side = build_wrn<double>({10, 1, 2, 3, 16}, 2);
    CHECK_THROWS_AS(Distiller<double>(wrong_side, teacher, loss(1, 1), 0.9, 5e-4, 0), ConfigError);
  }
  SUBCASE("invalid losses") { CHECK_THROWS_AS(Distiller<double>(student, teacher, loss(-1, 1), 0.9, 5e-4, 0), ConfigError); }
  SUBCASE("hooks and adapters") {
    Distiller<double> d(student, teacher, loss(1, 1, {HookId::conv2, HookId::conv4}), 0.9, 5e-4, 0);
    CHECK(student.has_hook(HookId::conv2));
    CHECK(teacher.has_hook(HookId::conv4));
    CHECK_FALSE(student.has_hook(HookId::conv3));
    REQUIRE(d.adapter(HookId::conv4) != nullptr);
    CHECK(d.adapter(HookId::conv4)->in_channels() == 8);
    CHECK(d.adapter(HookId::conv4)->out_channels() == 16);
    CHECK(d.adapter(HookId::conv3) == nullptr);
    CHECK(d.adapter_state().size() == 4);
  }
}

TEST_CASE("step report reassembles the total, every configuration") {
  auto teacher = frozen_teacher<double>(kToyTeacher, 1);
  std::vector<LossConfig> configs = {loss(1, 1), loss(0.5, 2, {HookId::conv2, HookId::conv3, HookId::conv4}), loss(0, 0),
                                     loss(0, 3), loss(2, 0)};
  LossConfig kd = loss(0, 0);
  kd.baseline = Baseline::kd;
  LossConfig at = loss(0, 0, {HookId::conv3, HookId::conv4});
  at.baseline = Baseline::at;
  LossConfig probs = loss(1, 1);
  probs.adain_on_probs = true;
  LossConfig joint = loss(1, 1, {HookId::conv3, HookId::conv4});
  joint.injection = AdainInjection::joint;
  configs.insert(configs.end(), {kd, at, probs, joint});
  for (const auto& l : configs) {
    auto student = build_wrn<double>(kToyStudent, 2);
    Distiller<double> d(student, teacher, l, 0.9, 5e-4, 7);
    for (int step = 0; step < 3; ++step) {
      const auto r = d.train_step(random_batch<double>(4, 8, 3, 10 + step), 0.05);
      CHECK(std::isfinite(r.total));
      CHECK(std::abs(r.total - (r.l_ce + l.alpha * r.l_sm + l.beta * r.l_adain + r.l_baseline)) < 1e-10);
      if (l.alpha == 0 && l.beta == 0) {
        CHECK(r.l_sm == 0.0);
        CHECK(r.l_adain == 0.0);
      }
      if (l.baseline == Baseline::none) CHECK(r.l_baseline == 0.0);
      else CHECK(r.l_baseline > 0.0);
    }
  }
}

TEST_CASE("separate and joint injection agree for a single position") {
  auto teacher = frozen_teacher<double>(kToyTeacher, 1);
  auto s1 = build_wrn<double>(kToyStudent, 2);
  auto s2 = build_wrn<double>(kToyStudent, 2);
  LossConfig joint = loss(1, 1, {HookId::conv3});
  joint.injection = AdainInjection::joint;
  Distiller<double> a(s1, teacher, loss(1, 1, {HookId::conv3}), 0.9, 5e-4, 7);
  Distiller<double> b(s2, teacher, joint, 0.9, 5e-4, 7);
  const auto batch = random_batch<double>(4, 8, 3, 3);
  CHECK(a.compute_losses(batch).report().l_adain ==
        doctest::Approx(b.compute_losses(batch).report().l_adain).epsilon(1e-12));
}

TEST_CASE("alpha = beta = 0 matches plain supervised training bitwise") {
  const WrnConfig cfg = student_preset(4);
  auto teacher = build_wrn<float>(teacher_preset(4), 1);
  teacher.freeze();
  auto distilled = build_wrn<float>(cfg, 5);
  auto plain = build_wrn<float>(cfg, 5);
  Distiller<float> d(distilled, teacher, loss(0, 0), 0.9, 5e-4, 3);
  SgdOptimizer<float> opt(0.9, 5e-4);
  opt.add_all(plain.parameters());
  for (int step = 0; step < 4; ++step) {
    const auto batch = random_batch<float>(8, 16, 4, 20 + step);
    const auto r = d.train_step(batch, 0.1);
    const double ce = supervised_step(plain, opt, batch, 0.1);
    CHECK(std::memcmp(&r.l_ce, &ce, sizeof(double)) == 0);
  }
  CHECK(param_values(distilled) == param_values(plain));
}

TEST_CASE("student equal to the teacher is a zero-loss fixpoint") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto teacher = frozen_teacher<double>(kToyTeacher, seed);
    // Exact copy of every tensor (a checkpoint round trip would round to f32).
    auto trainable = build_wrn<double>(kToyTeacher, 0);
    std::vector<std::vector<double>> src = param_values(teacher);
    std::size_t i = 0;
    trainable.visit_state([&](const std::string&, TD& t) {
      std::copy(src[i].begin(), src[i].end(), t.mutable_values().begin());
      ++i;
    });
    trainable.set_training(false);
    Distiller<double> d(trainable, teacher, loss(1, 1, {HookId::conv2, HookId::conv3, HookId::conv4}), 0.9, 5e-4, 0);
    // Same widths: no adapters.
    for (auto h : kAllHooks) CHECK(d.adapter(h) == nullptr);
    const auto batch = random_batch<double>(4, 8, 3, seed + 30);
    d.optimizer().zero_grad();
    const auto terms = d.compute_losses(batch);
    CHECK(terms.report().l_sm < 1e-20);
    CHECK(terms.report().l_adain < 1e-20);
    backward(add(terms.sm, terms.adain));
    double max_grad = 0.0;
    for (const auto& p : trainable.parameters()) {
      for (double g : p.tensor.grad()) max_grad = std::max(max_grad, std::abs(g));
    }
    CHECK(max_grad < 1e-8);
  }
}

TEST_CASE("gradient of the total loss w.r.t. every student parameter matches finite differences") {
  for (std::uint64_t seed = 1; seed <= 2; ++seed) {
    CAPTURE(seed);
    auto teacher = frozen_teacher<double>(kToyTeacher, seed);
    auto student = build_wrn<double>(kToyStudent, seed + 10);
    student.set_training(true);
    Distiller<double> d(student, teacher, loss(1, 1, {HookId::conv3, HookId::conv4}), 0.9, 5e-4, seed);
    const auto batch = random_batch<double>(3, 8, 3, seed + 20);
    std::vector<TD> params;
    for (const auto& p : student.parameters()) params.push_back(p.tensor);
    for (const auto& p : d.adapter_parameters()) params.push_back(p.tensor);
    const auto r = grad_check_params([&] { return d.compute_losses(batch).total; }, params);
    INFO("worst " << r.worst_index << " analytic " << r.analytic_at_worst << " numeric " << r.numeric_at_worst);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("one step on a fixed 2-sample batch lowers the total loss") {
  auto teacher = frozen_teacher<float>(teacher_preset(4), 1);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto student = build_wrn<float>(student_preset(4), seed);
    LossConfig l = loss(1, 0.01);
    Distiller<float> d(student, teacher, l, 0.9, 5e-4, seed);
    const auto batch = random_batch<float>(2, 16, 4, seed);
    student.set_training(true);
    const double before = d.compute_losses(batch).report().total;
    const double reported = d.train_step(batch, 0.01).total;
    CHECK(reported == doctest::Approx(before).epsilon(1e-6));
    student.set_training(true);
    const double after = d.compute_losses(batch).report().total;
    CHECK(after < before);
  }
}

TEST_CASE("the frozen teacher is bitwise untouched by distillation steps") {
  auto teacher = frozen_teacher<float>(teacher_preset(4), 1);
  const auto before = param_values(teacher);
  auto student = build_wrn<float>(student_preset(4), 2);
  LossConfig l = loss(1, 0.01, {HookId::conv2, HookId::conv3, HookId::conv4});
  Distiller<float> d(student, teacher, l, 0.9, 5e-4, 0);
  for (int step = 0; step < 5; ++step) d.train_step(random_batch<float>(4, 16, 4, 40 + step), 0.1);
  CHECK(param_values(teacher) == before);
  for (const auto& p : teacher.parameters()) CHECK(p.tensor.grad().empty());
}

TEST_CASE("adapters learn from L_SM and from L_AdaIN alone") {
  auto teacher = frozen_teacher<double>(kToyTeacher, 1);
  for (const auto& l : {loss(1, 0), loss(0, 1)}) {
    auto student = build_wrn<double>(kToyStudent, 2);
    Distiller<double> d(student, teacher, l, 0.9, 0.0, 3);
    const std::vector<double> before(d.adapter(HookId::conv4)->weight().values().begin(),
                                     d.adapter(HookId::conv4)->weight().values().end());
    d.train_step(random_batch<double>(4, 8, 3, 5), 0.1);
    const auto after = d.adapter(HookId::conv4)->weight().values();
    CHECK_FALSE(std::equal(before.begin(), before.end(), after.begin()));
  }
}
