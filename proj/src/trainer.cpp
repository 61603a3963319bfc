#include "statdistill/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "statdistill/ops.hpp"

namespace sdt {

std::string to_string(Baseline b) {
  switch (b) {
    case Baseline::none:
      return "none";
    case Baseline::kd:
      return "kd";
    case Baseline::at:
      return "at";
  }
  return "none";
}

std::string to_string(AdainInjection m) { return m == AdainInjection::joint ? "joint" : "separate"; }
std::string to_string(Precision p) { return p == Precision::high ? "high" : "single"; }

Baseline parse_baseline(const std::string& s) {
  if (s == "none") return Baseline::none;
  if (s == "kd") return Baseline::kd;
  if (s == "at") return Baseline::at;
  throw ConfigError("unknown baseline '" + s + "' (expected none, kd or at)");
}

AdainInjection parse_injection(const std::string& s) {
  if (s == "separate") return AdainInjection::separate;
  if (s == "joint") return AdainInjection::joint;
  throw ConfigError("unknown adain injection mode '" + s + "' (expected separate or joint)");
}

Precision parse_precision(const std::string& s) {
  if (s == "single") return Precision::single;
  if (s == "high") return Precision::high;
  throw ConfigError("unknown precision '" + s + "' (expected single or high)");
}

namespace {
void throw_problems(const std::string& what, const std::vector<std::string>& problems) {
  if (problems.empty()) return;
  std::string msg = "invalid " + what + ":";
  for (const auto& p : problems) msg += " " + p + ";";
  throw ConfigError(msg);
}
}  // namespace

std::vector<std::string> LossConfig::problems() const {
  std::vector<std::string> out;
  if (!(alpha >= 0.0)) out.push_back("loss.alpha must be >= 0");
  if (!(beta >= 0.0)) out.push_back("loss.beta must be >= 0");
  if ((alpha > 0.0 || beta > 0.0 || baseline == Baseline::at) && positions.empty()) {
    out.push_back("loss.positions must be non-empty when alpha > 0, beta > 0 or baseline = at");
  }
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (std::size_t j = i + 1; j < positions.size(); ++j) {
      if (positions[i] == positions[j]) out.push_back("loss.positions lists " + to_string(positions[i]) + " twice");
    }
  }
  if (!(kd_temperature > 0.0)) out.push_back("loss.kd_temperature must be > 0");
  if (!(kd_alpha >= 0.0 && kd_alpha <= 1.0)) out.push_back("loss.kd_alpha must be in [0,1]");
  if (!(at_weight >= 0.0)) out.push_back("loss.at_weight must be >= 0");
  return out;
}

void LossConfig::validate() const { throw_problems("loss config", problems()); }

std::vector<std::string> TrainConfig::problems() const {
  std::vector<std::string> out;
  if (epochs < 0) out.push_back("train.epochs must be >= 0");
  if (batch_size < 1) out.push_back("train.batch_size must be >= 1");
  if (!(lr > 0.0)) out.push_back("train.lr must be > 0");
  for (std::size_t i = 0; i < lr_milestones.size(); ++i) {
    if (i > 0 && lr_milestones[i].first <= lr_milestones[i - 1].first) {
      out.push_back("train.lr_milestones must be strictly increasing");
      break;
    }
  }
  for (const auto& [epoch, factor] : lr_milestones) {
    if (!(factor > 0.0)) {
      out.push_back("train.lr_milestones factor at epoch " + std::to_string(epoch) + " must be > 0");
    }
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) out.push_back("train.momentum must be in [0,1)");
  if (!(weight_decay >= 0.0)) out.push_back("train.weight_decay must be >= 0");
  return out;
}

void TrainConfig::validate() const { throw_problems("train config", problems()); }

double TrainConfig::lr_at(int epoch) const {
  double out = lr;
  for (const auto& [at, factor] : lr_milestones) {
    if (epoch >= at) out *= factor;
  }
  return out;
}

template <typename T>
Tensor<T> loss_kd(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits, std::span<const int> labels,
                  double kd_alpha, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("loss_kd: temperature must be > 0");
  Tensor<T> soft_teacher;
  {
    NoGradGuard no_grad;
    soft_teacher = softmax(scale(teacher_logits.detach(), 1.0 / temperature));
  }
  const Tensor<T> kl = kl_div_with_logits(scale(student_logits, 1.0 / temperature), soft_teacher);
  const Tensor<T> soft = scale(kl, kd_alpha * temperature * temperature);
  if (kd_alpha >= 1.0) return soft;
  return add(soft, scale(cross_entropy(student_logits, labels), 1.0 - kd_alpha));
}

template <typename T>
Tensor<T> loss_at(const Tensor<T>& student_feature, const Tensor<T>& teacher_feature) {
  if (student_feature.rank() != 4 || teacher_feature.rank() != 4) {
    throw DimensionError("loss_at: features must be rank 4");
  }
  for (std::size_t axis : {0u, 2u, 3u}) {
    if (student_feature.dim(axis) != teacher_feature.dim(axis)) {
      throw DimensionError("loss_at: axis " + std::to_string(axis) + " differs (student " +
                           std::to_string(student_feature.dim(axis)) + ", teacher " +
                           std::to_string(teacher_feature.dim(axis)) + ")");
    }
  }
  const Tensor<T> a_s = l2_normalize_rows(channel_energy(student_feature));
  const Tensor<T> a_t = l2_normalize_rows(channel_energy(teacher_feature.detach()));
  return mean(square(sub(a_s, a_t)));
}

template <typename T>
void SgdOptimizer<T>::add(const Parameter<T>& param) {
  if (!param.tensor.requires_grad()) throw UsageError("optimizer: parameter " + param.name + " does not require grad");
  slots_.push_back({param.name, param.tensor, std::vector<T>(param.tensor.numel(), T{0}), param.weight_decay});
}

template <typename T>
void SgdOptimizer<T>::zero_grad() {
  for (auto& s : slots_) s.param.zero_grad();
}

template <typename T>
void SgdOptimizer<T>::step(double lr) {
  const T mu = static_cast<T>(momentum_);
  const T wd = static_cast<T>(weight_decay_);
  const T rate = static_cast<T>(lr);
  for (auto& s : slots_) {
    auto w = s.param.mutable_values();
    const auto g = s.param.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T d = s.weight_decay ? g[i] + wd * w[i] : g[i];
      s.velocity[i] = mu * s.velocity[i] + d;
      w[i] -= rate * s.velocity[i];
    }
  }
}

template <typename T>
std::vector<NamedTensor> SgdOptimizer<T>::state() const {
  std::vector<NamedTensor> out;
  for (const auto& s : slots_) {
    NamedTensor e{"momentum." + s.name, s.param.shape(), {}};
    e.values.assign(s.velocity.begin(), s.velocity.end());
    out.push_back(std::move(e));
  }
  return out;
}

template <typename T>
void SgdOptimizer<T>::load_state(std::span<const NamedTensor> entries) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  std::vector<std::string> missing;
  for (const auto& s : slots_) {
    auto it = by_name.find("momentum." + s.name);
    if (it == by_name.end() || it->second->values.size() != s.velocity.size()) missing.push_back("momentum." + s.name);
  }
  if (!missing.empty()) {
    std::string msg = "optimizer state is missing or mis-sized:";
    for (const auto& m : missing) msg += " " + m;
    throw FormatError(msg);
  }
  for (auto& s : slots_) {
    const auto& src = by_name.at("momentum." + s.name)->values;
    for (std::size_t i = 0; i < s.velocity.size(); ++i) s.velocity[i] = static_cast<T>(src[i]);
  }
}

template <typename T>
StepReport LossTerms<T>::report() const {
  StepReport r;
  r.l_ce = static_cast<double>(ce.item());
  if (sm.defined()) r.l_sm = static_cast<double>(sm.item());
  if (adain.defined()) r.l_adain = static_cast<double>(adain.item());
  if (baseline.defined()) r.l_baseline = static_cast<double>(baseline.item());
  r.total = static_cast<double>(total.item());
  return r;
}

template <typename T>
double supervised_step(WideResNet<T>& model, SgdOptimizer<T>& optimizer, const Batch<T>& batch, double lr) {
  model.set_training(true);
  optimizer.zero_grad();
  const Tensor<T> loss = cross_entropy(model.forward(batch.images), batch.labels);
  backward(loss);
  optimizer.step(lr);
  return static_cast<double>(loss.item());
}

template <typename T>
Distiller<T>::Distiller(WideResNet<T>& student, WideResNet<T>& teacher, LossConfig losses, double momentum,
                        double weight_decay, std::uint64_t adapter_seed, std::span<const HookId> extra_positions)
    : student_(student), teacher_(teacher), losses_(std::move(losses)), optimizer_(momentum, weight_decay) {
  losses_.validate();
  if (!teacher_.frozen()) throw UsageError("distillation requires a frozen teacher");
  if (student_.frozen()) throw UsageError("distillation requires a trainable student");
  if (teacher_.config().num_classes != student_.config().num_classes) {
    throw ConfigError("teacher and student disagree on num_classes");
  }
  if (teacher_.config().input_size != student_.config().input_size) {
    throw ConfigError("teacher and student disagree on input_size");
  }

  std::vector<HookId> hooks = losses_.positions;
  for (auto h : extra_positions) {
    if (std::find(hooks.begin(), hooks.end(), h) == hooks.end()) hooks.push_back(h);
  }
  std::sort(hooks.begin(), hooks.end());
  for (auto hook : hooks) {
    if (teacher_.config().group_side(hook) != student_.config().group_side(hook)) {
      throw ConfigError("hook " + to_string(hook) + " has different spatial size in teacher and student");
    }
    teacher_.register_hook(hook);
    student_.register_hook(hook);
    const auto tc = teacher_.config().group_channels(hook);
    const auto sc = student_.config().group_channels(hook);
    if (tc != sc) {
      adapters_[static_cast<std::size_t>(hook)].emplace(sc, tc, adapter_seed + static_cast<std::uint64_t>(hook));
    }
  }
  optimizer_.add_all(student_.parameters());
  optimizer_.add_all(adapter_parameters());
}

template <typename T>
const ChannelAdapter<T>* Distiller<T>::adapter(HookId hook) const {
  const auto& a = adapters_[static_cast<std::size_t>(hook)];
  return a ? &*a : nullptr;
}

template <typename T>
ChannelAdapter<T>* Distiller<T>::adapter(HookId hook) {
  auto& a = adapters_[static_cast<std::size_t>(hook)];
  return a ? &*a : nullptr;
}

template <typename T>
std::vector<Parameter<T>> Distiller<T>::adapter_parameters() const {
  std::vector<Parameter<T>> out;
  for (auto hook : kAllHooks) {
    if (const auto* a = adapter(hook)) {
      out.push_back({"adapter." + to_string(hook) + ".weight", a->weight(), true});
      out.push_back({"adapter." + to_string(hook) + ".bias", a->bias(), false});
    }
  }
  return out;
}

template <typename T>
std::vector<NamedTensor> Distiller<T>::adapter_state() const {
  std::vector<NamedTensor> out;
  for (const auto& p : adapter_parameters()) out.push_back(to_named(p.name, p.tensor));
  return out;
}

template <typename T>
void Distiller<T>::load_adapter_state(std::span<const NamedTensor> entries) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto params = adapter_parameters();
  std::vector<std::string> missing;
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end() || it->second->shape != p.tensor.shape()) missing.push_back(p.name);
  }
  if (!missing.empty()) {
    std::string msg = "missing adapter parameters:";
    for (const auto& m : missing) msg += " " + m;
    throw FormatError(msg);
  }
  for (auto& p : params) {
    const auto& src = by_name.at(p.name)->values;
    auto dst = p.tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
  }
}

template <typename T>
LossTerms<T> Distiller<T>::compute_losses(const Batch<T>& batch) {
  LossTerms<T> terms;
  const Tensor<T> logits = student_.forward(batch.images, true);
  terms.ce = cross_entropy(logits, batch.labels);
  terms.total = terms.ce;
  if (!losses_.uses_teacher()) return terms;

  Tensor<T> p;
  {
    NoGradGuard no_grad;
    p = teacher_.forward(batch.images, true);
  }

  const bool need_stats = losses_.alpha > 0.0 || losses_.beta > 0.0;
  std::map<HookId, FeatureStats<T>> student_stats;
  if (need_stats) {
    std::vector<FeaturePair<T>> pairs;
    for (auto hook : losses_.positions) {
      FeaturePair<T> pair{teacher_.captured(hook), student_.captured(hook), {hook, hook, adapter(hook)}};
      student_stats.emplace(hook, channel_stats(adapt_student(pair)));
      pairs.push_back(std::move(pair));
    }
    Tensor<T> sm;
    for (auto hook : losses_.positions) {
      const auto teacher_stats = channel_stats(teacher_.captured(hook).detach());
      const Tensor<T> term = loss_sm_pair(teacher_stats, student_stats.at(hook));
      sm = sm.defined() ? add(sm, term) : term;
    }
    terms.sm = sm;
    if (losses_.alpha > 0.0) terms.total = add(terms.total, scale(terms.sm, losses_.alpha));
  }

  if (losses_.beta > 0.0) {
    const Tensor<T> target = losses_.adain_on_probs ? softmax(p) : p;
    auto output = [&](const Tensor<T>& q) { return losses_.adain_on_probs ? softmax(q) : q; };
    Tensor<T> adain_loss;
    if (losses_.injection == AdainInjection::separate) {
      for (auto hook : losses_.positions) {
        const Tensor<T> injected = adain(teacher_.captured(hook).detach(), student_stats.at(hook));
        const Tensor<T> term = loss_adain(target, output(teacher_.forward_from(hook, injected)));
        adain_loss = adain_loss.defined() ? add(adain_loss, term) : term;
      }
    } else {
      const Tensor<T> q = teacher_.forward_with(batch.images, [&](HookId hook, const Tensor<T>& f) {
        auto it = student_stats.find(hook);
        return it == student_stats.end() ? f : adain(f, it->second);
      });
      adain_loss = loss_adain(target, output(q));
    }
    terms.adain = adain_loss;
    terms.total = add(terms.total, scale(terms.adain, losses_.beta));
  }

  if (losses_.baseline == Baseline::kd) {
    terms.baseline = loss_kd(logits, p, batch.labels, losses_.kd_alpha, losses_.kd_temperature);
  } else if (losses_.baseline == Baseline::at) {
    Tensor<T> at;
    for (auto hook : losses_.positions) {
      const Tensor<T> term = loss_at(student_.captured(hook), teacher_.captured(hook));
      at = at.defined() ? add(at, term) : term;
    }
    terms.baseline = scale(at, losses_.at_weight);
  }
  if (terms.baseline.defined()) terms.total = add(terms.total, terms.baseline);
  return terms;
}

template <typename T>
StepReport Distiller<T>::train_step(const Batch<T>& batch, double lr) {
  student_.set_training(true);
  optimizer_.zero_grad();
  const LossTerms<T> terms = compute_losses(batch);
  backward(terms.total);
  optimizer_.step(lr);
  return terms.report();
}

#define SDT_INSTANTIATE(T)                                                                                    \
  template Tensor<T> loss_kd(const Tensor<T>&, const Tensor<T>&, std::span<const int>, double, double);       \
  template Tensor<T> loss_at(const Tensor<T>&, const Tensor<T>&);                                             \
  template class SgdOptimizer<T>;                                                                             \
  template struct LossTerms<T>;                                                                               \
  template double supervised_step(WideResNet<T>&, SgdOptimizer<T>&, const Batch<T>&, double);                 \
  template class Distiller<T>;

SDT_INSTANTIATE(float)
SDT_INSTANTIATE(double)
#undef SDT_INSTANTIATE

}  // namespace sdt
