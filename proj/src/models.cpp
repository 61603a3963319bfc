#include "statdistill/models.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <sstream>

namespace sdt {

std::size_t WrnConfig::group_channels(HookId hook) const {
  return static_cast<std::size_t>(base_channels * width) << static_cast<std::size_t>(hook);
}

std::size_t WrnConfig::group_side(HookId hook) const {
  return static_cast<std::size_t>(input_size) >> static_cast<std::size_t>(hook);
}

void WrnConfig::validate() const {
  std::vector<std::string> problems;
  if (depth < 10 || (depth - 4) % 6 != 0) problems.push_back("depth=" + std::to_string(depth) + " (need depth-4 divisible by 6, depth >= 10)");
  if (width < 1) problems.push_back("width=" + std::to_string(width) + " (need >= 1)");
  if (base_channels < 1) problems.push_back("base_channels=" + std::to_string(base_channels) + " (need >= 1)");
  if (num_classes < 2) problems.push_back("num_classes=" + std::to_string(num_classes) + " (need >= 2)");
  if (input_size < 4 || input_size % 4 != 0) problems.push_back("input_size=" + std::to_string(input_size) + " (need a multiple of 4)");
  if (!problems.empty()) {
    std::string msg = "invalid WRN config:";
    for (const auto& p : problems) msg += " " + p + ";";
    throw ConfigError(msg);
  }
}

std::string WrnConfig::name() const {
  return "WRN-" + std::to_string(depth) + "-" + std::to_string(width) + " base " + std::to_string(base_channels);
}

WrnConfig teacher_preset(int num_classes) { return {16, 2, 8, num_classes, 16}; }
WrnConfig student_preset(int num_classes) { return {10, 1, 8, num_classes, 16}; }

std::size_t wrn_parameter_count(const WrnConfig& c) {
  c.validate();
  const std::size_t d = static_cast<std::size_t>(c.blocks_per_group());
  std::size_t count = 3 * static_cast<std::size_t>(c.base_channels) * 9;
  std::size_t in = static_cast<std::size_t>(c.base_channels);
  for (auto hook : kAllHooks) {
    const std::size_t out = c.group_channels(hook);
    for (std::size_t b = 0; b < d; ++b) {
      const std::size_t block_in = b == 0 ? in : out;
      count += 2 * block_in + block_in * out * 9 + 2 * out + out * out * 9;
      if (block_in != out || (b == 0 && hook != HookId::conv2)) count += block_in * out;
    }
    in = out;
  }
  count += 2 * in + in * static_cast<std::size_t>(c.num_classes) + static_cast<std::size_t>(c.num_classes);
  return count;
}

namespace {

template <typename T>
Tensor<T> init_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.mutable_values()) v = static_cast<T>(dist(rng));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
ConvLayer<T> make_conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::mt19937_64& rng) {
  return {init_uniform<T>({out, in, k, k}, in * k * k, rng), stride, k / 2};
}

template <typename T>
BatchNormLayer<T> make_bn(std::size_t channels) {
  BatchNormLayer<T> bn{Tensor<T>::ones({channels}), Tensor<T>::zeros({channels}), RunningStats<T>::standard(channels)};
  bn.gamma.set_requires_grad(true);
  bn.beta.set_requires_grad(true);
  return bn;
}

}  // namespace

template <typename T>
WideResNet<T>::WideResNet(const WrnConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto base = static_cast<std::size_t>(config_.base_channels);
  stem_ = make_conv<T>(3, base, 3, 1, rng);
  std::size_t in = base;
  for (auto hook : kAllHooks) {
    const std::size_t out = config_.group_channels(hook);
    const std::size_t stride = hook == HookId::conv2 ? 1 : 2;
    auto& group = groups_[index(hook)];
    for (int b = 0; b < config_.blocks_per_group(); ++b) {
      const std::size_t block_in = b == 0 ? in : out;
      const std::size_t block_stride = b == 0 ? stride : 1;
      ResidualBlock<T> block;
      block.bn1 = make_bn<T>(block_in);
      block.conv1 = make_conv<T>(block_in, out, 3, block_stride, rng);
      block.bn2 = make_bn<T>(out);
      block.conv2 = make_conv<T>(out, out, 3, 1, rng);
      if (block_in != out || block_stride != 1) block.shortcut = make_conv<T>(block_in, out, 1, block_stride, rng);
      group.push_back(std::move(block));
    }
    in = out;
  }
  final_bn_ = make_bn<T>(in);
  const auto classes = static_cast<std::size_t>(config_.num_classes);
  fc_weight_ = init_uniform<T>({classes, in}, in, rng);
  fc_bias_ = Tensor<T>::zeros({classes});
  fc_bias_.set_requires_grad(true);
}

template <typename T>
WideResNet<T> WideResNet<T>::clone() const {
  WideResNet out(config_, 0);
  std::vector<const Tensor<T>*> src;
  visit_state([&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
  std::size_t i = 0;
  out.visit_state([&](const std::string&, Tensor<T>& t) {
    const auto from = src[i++]->values();
    std::copy(from.begin(), from.end(), t.mutable_values().begin());
  });
  out.registered_ = registered_;
  out.training_ = training_;
  if (frozen_) out.freeze();
  return out;
}

template <typename T>
void WideResNet<T>::visit_state(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
  fn("conv1.weight", stem_.weight);
  auto bn_params = [&](const std::string& prefix, BatchNormLayer<T>& bn) {
    fn(prefix + ".gamma", bn.gamma);
    fn(prefix + ".beta", bn.beta);
  };
  for (auto hook : kAllHooks) {
    auto& group = groups_[index(hook)];
    for (std::size_t b = 0; b < group.size(); ++b) {
      const std::string p = to_string(hook) + ".block" + std::to_string(b);
      bn_params(p + ".bn1", group[b].bn1);
      fn(p + ".conv1.weight", group[b].conv1.weight);
      bn_params(p + ".bn2", group[b].bn2);
      fn(p + ".conv2.weight", group[b].conv2.weight);
      if (group[b].shortcut) fn(p + ".shortcut.weight", group[b].shortcut->weight);
    }
  }
  bn_params("bn_final", final_bn_);
  fn("fc.weight", fc_weight_);
  fn("fc.bias", fc_bias_);

  auto bn_buffers = [&](const std::string& prefix, BatchNormLayer<T>& bn) {
    fn(prefix + ".running_mean", bn.stats.mean);
    fn(prefix + ".running_var", bn.stats.var);
  };
  for (auto hook : kAllHooks) {
    auto& group = groups_[index(hook)];
    for (std::size_t b = 0; b < group.size(); ++b) {
      const std::string p = to_string(hook) + ".block" + std::to_string(b);
      bn_buffers(p + ".bn1", group[b].bn1);
      bn_buffers(p + ".bn2", group[b].bn2);
    }
  }
  bn_buffers("bn_final", final_bn_);
}

template <typename T>
void WideResNet<T>::visit_state(const std::function<void(const std::string&, const Tensor<T>&)>& fn) const {
  const_cast<WideResNet*>(this)->visit_state([&](const std::string& name, Tensor<T>& t) { fn(name, t); });
}

template <typename T>
std::vector<Parameter<T>> WideResNet<T>::parameters() const {
  std::vector<Parameter<T>> out;
  visit_state([&](const std::string& name, const Tensor<T>& t) {
    const bool is_buffer = name.ends_with(".running_mean") || name.ends_with(".running_var");
    if (is_buffer) return;
    const bool is_bn = name.ends_with(".gamma") || name.ends_with(".beta");
    out.push_back({name, t, !is_bn});
  });
  return out;
}

template <typename T>
std::size_t WideResNet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
void WideResNet<T>::freeze() {
  frozen_ = true;
  for (auto& p : parameters()) {
    Tensor<T> t = p.tensor;
    t.set_requires_grad(false);
  }
}

template <typename T>
void WideResNet<T>::register_hook(HookId hook) {
  registered_[index(hook)] = true;
}

template <typename T>
const Tensor<T>& WideResNet<T>::captured(HookId hook) const {
  if (!registered_[index(hook)]) throw UsageError("hook " + to_string(hook) + " is not registered");
  if (!captured_[index(hook)].defined()) throw UsageError("hook " + to_string(hook) + " has no captured feature");
  return captured_[index(hook)];
}

template <typename T>
void WideResNet<T>::clear_captures() {
  for (auto& c : captured_) c = Tensor<T>{};
}

template <typename T>
Tensor<T> WideResNet<T>::run_stem(const Tensor<T>& x) const {
  return stem_.forward(x);
}

template <typename T>
Tensor<T> WideResNet<T>::run_block(ResidualBlock<T>& block, const Tensor<T>& x) {
  const auto mode = bn_mode();
  const Tensor<T> pre = relu(block.bn1.forward(x, mode));
  Tensor<T> y = block.conv1.forward(pre);
  y = block.conv2.forward(relu(block.bn2.forward(y, mode)));
  const Tensor<T> skip = block.shortcut ? block.shortcut->forward(pre) : x;
  return add(y, skip);
}

template <typename T>
Tensor<T> WideResNet<T>::run_group(std::size_t group, const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& block : groups_[group]) y = run_block(block, y);
  return y;
}

template <typename T>
Tensor<T> WideResNet<T>::run_head(const Tensor<T>& x) {
  const Tensor<T> pooled = avg_pool_global(relu(final_bn_.forward(x, bn_mode())));
  return linear(pooled, fc_weight_, fc_bias_);
}

template <typename T>
void WideResNet<T>::check_feature(HookId hook, const Tensor<T>& f) const {
  const std::size_t c = config_.group_channels(hook);
  const std::size_t side = config_.group_side(hook);
  if (f.rank() != 4) throw DimensionError("feature for " + to_string(hook) + " must be rank 4, got " + shape_str(f.shape()));
  const std::array<std::size_t, 3> expected = {c, side, side};
  for (std::size_t axis = 1; axis < 4; ++axis) {
    if (f.dim(axis) != expected[axis - 1]) {
      throw DimensionError("feature for " + to_string(hook) + ": axis " + std::to_string(axis) + " is " +
                           std::to_string(f.dim(axis)) + ", expected " + std::to_string(expected[axis - 1]));
    }
  }
}

template <typename T>
Tensor<T> WideResNet<T>::forward_with(const Tensor<T>& x, const HookFn& at_hook) {
  if (x.rank() != 4) throw DimensionError("forward: input must be [N,3,H,W], got " + shape_str(x.shape()));
  if (x.dim(1) != 3) throw DimensionError("forward: input axis 1 is " + std::to_string(x.dim(1)) + ", expected 3");
  const auto side = static_cast<std::size_t>(config_.input_size);
  for (std::size_t axis = 2; axis < 4; ++axis) {
    if (x.dim(axis) != side) {
      throw DimensionError("forward: input axis " + std::to_string(axis) + " is " + std::to_string(x.dim(axis)) +
                           ", expected " + std::to_string(side));
    }
  }
  Tensor<T> y = run_stem(x);
  for (auto hook : kAllHooks) {
    y = run_group(index(hook), y);
    if (at_hook) y = at_hook(hook, y);
  }
  return run_head(y);
}

template <typename T>
Tensor<T> WideResNet<T>::forward(const Tensor<T>& x, bool capture) {
  if (!capture) return forward_with(x, nullptr);
  clear_captures();
  return forward_with(x, [this](HookId hook, const Tensor<T>& f) {
    if (registered_[index(hook)]) captured_[index(hook)] = f;
    return f;
  });
}

template <typename T>
Tensor<T> WideResNet<T>::forward_from(HookId hook, const Tensor<T>& injected) {
  if (!frozen_) throw UsageError("forward_from requires a frozen model");
  if (!registered_[index(hook)]) throw UsageError("forward_from: hook " + to_string(hook) + " is not registered");
  check_feature(hook, injected);
  Tensor<T> y = injected;
  for (std::size_t g = index(hook) + 1; g < groups_.size(); ++g) y = run_group(g, y);
  return run_head(y);
}

template <typename T>
std::vector<NamedTensor> WideResNet<T>::state() const {
  std::vector<NamedTensor> out;
  visit_state([&](const std::string& name, const Tensor<T>& t) { out.push_back(to_named(name, t)); });
  return out;
}

template <typename T>
void WideResNet<T>::load_state(std::span<const NamedTensor> entries, bool allow_extra) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  std::vector<std::string> missing, mismatched;
  std::set<std::string> used;
  visit_state([&](const std::string& name, const Tensor<T>& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      missing.push_back(name);
    } else if (it->second->shape != t.shape()) {
      mismatched.push_back(name + " " + shape_str(it->second->shape) + " vs " + shape_str(t.shape()));
    }
    used.insert(name);
  });
  std::vector<std::string> unexpected;
  if (!allow_extra) {
    for (const auto& [name, e] : by_name) {
      if (!used.count(name)) unexpected.push_back(name);
    }
  }
  if (!missing.empty() || !mismatched.empty() || !unexpected.empty()) {
    std::ostringstream msg;
    msg << "checkpoint does not match " << config_.name() << ":";
    if (!missing.empty()) {
      msg << " missing parameters [";
      for (std::size_t i = 0; i < missing.size(); ++i) msg << (i ? ", " : "") << missing[i];
      msg << "]";
    }
    if (!unexpected.empty()) {
      msg << " unexpected parameters [";
      for (std::size_t i = 0; i < unexpected.size(); ++i) msg << (i ? ", " : "") << unexpected[i];
      msg << "]";
    }
    if (!mismatched.empty()) {
      msg << " shape mismatches [";
      for (std::size_t i = 0; i < mismatched.size(); ++i) msg << (i ? ", " : "") << mismatched[i];
      msg << "]";
    }
    throw FormatError(msg.str());
  }
  visit_state([&](const std::string& name, Tensor<T>& t) {
    const auto& src = by_name.at(name)->values;
    auto dst = t.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
  });
}

template <typename T>
void WideResNet<T>::save(const std::filesystem::path& path) const {
  const auto entries = state();
  write_checkpoint(path, entries);
}

template <typename T>
void WideResNet<T>::load(const std::filesystem::path& path) {
  const auto entries = read_checkpoint(path);
  load_state(entries);
}

template class WideResNet<float>;
template class WideResNet<double>;

}  // namespace sdt
