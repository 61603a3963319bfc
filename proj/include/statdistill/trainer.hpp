#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "statdistill/checkpoint.hpp"
#include "statdistill/hooks.hpp"
#include "statdistill/models.hpp"
#include "statdistill/stats_transfer.hpp"
#include "statdistill/tensor.hpp"

namespace sdt {

enum class Baseline { none, kd, at };
enum class AdainInjection {
  separate,  // one teacher-tail execution per position, losses summed
  joint,     // a single teacher pass with every position injected
};
enum class Precision { single, high };

std::string to_string(Baseline b);
std::string to_string(AdainInjection m);
std::string to_string(Precision p);
Baseline parse_baseline(const std::string& s);
AdainInjection parse_injection(const std::string& s);
Precision parse_precision(const std::string& s);

/// Weights of the combined objective CE + alpha * L_SM + beta * L_AdaIN
/// (+ baseline term).
struct LossConfig {
  double alpha = 1.0;
  double beta = 1.0;
  std::vector<HookId> positions = {HookId::conv4};
  Baseline baseline = Baseline::none;
  double kd_alpha = 0.9;
  double kd_temperature = 4.0;
  double at_weight = 1000.0;
  bool adain_on_probs = false;
  AdainInjection injection = AdainInjection::separate;

  /// Messages for every violated field; empty when valid.
  std::vector<std::string> problems() const;
  void validate() const;
  bool uses_teacher() const { return alpha > 0.0 || beta > 0.0 || baseline != Baseline::none; }
  bool operator==(const LossConfig&) const = default;
};

struct TrainConfig {
  int epochs = 60;
  int batch_size = 64;
  double lr = 0.1;
  std::vector<std::pair<int, double>> lr_milestones = {{30, 0.2}, {45, 0.2}};
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  Precision precision = Precision::single;

  std::vector<std::string> problems() const;
  void validate() const;
  /// Learning rate for a zero-based epoch: lr times every factor whose
  /// milestone epoch is <= epoch.
  double lr_at(int epoch) const;
  bool operator==(const TrainConfig&) const = default;
};

/// Hinton distillation: kd_alpha * T^2 * KL(softmax(t/T) || softmax(s/T))
/// + (1 - kd_alpha) * CE(s, labels). Teacher logits are detached.
template <typename T>
Tensor<T> loss_kd(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits, std::span<const int> labels,
                  double kd_alpha, double temperature);

/// Attention transfer: squared difference of the L2-normalized spatial
/// energy maps sum_c x^2, averaged over batch and spatial positions.
template <typename T>
Tensor<T> loss_at(const Tensor<T>& student_feature, const Tensor<T>& teacher_feature);

/// SGD with momentum and coupled weight decay:
///   v = momentum * v + (g + wd * w);  w -= lr * v
template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void add(const Parameter<T>& param);
  void add_all(const std::vector<Parameter<T>>& params) {
    for (const auto& p : params) add(p);
  }
  void zero_grad();
  void step(double lr);

  std::size_t size() const { return slots_.size(); }
  /// Velocity buffers as "momentum.<name>".
  std::vector<NamedTensor> state() const;
  void load_state(std::span<const NamedTensor> entries);

 private:
  struct Slot {
    std::string name;
    Tensor<T> param;
    std::vector<T> velocity;
    bool weight_decay = true;
  };
  double momentum_;
  double weight_decay_;
  std::vector<Slot> slots_;
};

template <typename T>
struct Batch {
  Tensor<T> images;  // [N,3,H,W]
  std::vector<int> labels;
};

/// Loss components of one step. Inactive terms are 0.
struct StepReport {
  double l_ce = 0.0;
  double l_sm = 0.0;
  double l_adain = 0.0;
  double l_baseline = 0.0;
  double total = 0.0;
};

template <typename T>
struct LossTerms {
  Tensor<T> ce;
  Tensor<T> sm;        // undefined when not computed
  Tensor<T> adain;     // undefined when not computed
  Tensor<T> baseline;  // undefined when not computed
  Tensor<T> total;
  StepReport report() const;
};

/// One plain supervised step: zero grads, CE, backward, SGD update.
template <typename T>
double supervised_step(WideResNet<T>& model, SgdOptimizer<T>& optimizer, const Batch<T>& batch, double lr);

/// Student training against a frozen teacher. Owns the channel adapters
/// (created for every distillation position whose channel counts differ,
/// plus any extra positions requested for evaluation) and the optimizer over
/// student parameters and adapters.
template <typename T>
class Distiller {
 public:
  Distiller(WideResNet<T>& student, WideResNet<T>& teacher, LossConfig losses, double momentum, double weight_decay,
            std::uint64_t adapter_seed, std::span<const HookId> extra_positions = {});

  /// Builds the full objective for a batch without updating anything. The
  /// student runs in whatever mode it is in.
  LossTerms<T> compute_losses(const Batch<T>& batch);
  /// Student to train mode, compute_losses, backward, optimizer step.
  StepReport train_step(const Batch<T>& batch, double lr);

  const LossConfig& losses() const { return losses_; }
  const ChannelAdapter<T>* adapter(HookId hook) const;
  ChannelAdapter<T>* adapter(HookId hook);
  SgdOptimizer<T>& optimizer() { return optimizer_; }
  std::vector<Parameter<T>> adapter_parameters() const;

  /// Adapter tensors as "adapter.<hook>.weight|bias".
  std::vector<NamedTensor> adapter_state() const;
  void load_adapter_state(std::span<const NamedTensor> entries);

 private:
  WideResNet<T>& student_;
  WideResNet<T>& teacher_;
  LossConfig losses_;
  std::array<std::optional<ChannelAdapter<T>>, 3> adapters_;
  SgdOptimizer<T> optimizer_;
};

}  // namespace sdt
