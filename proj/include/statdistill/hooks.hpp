#pragma once

#include <array>
#include <string>
#include <string_view>

namespace sdt {

/// Group outputs of a wide residual network where features are tapped.
enum class HookId { conv2 = 0, conv3 = 1, conv4 = 2 };

inline constexpr std::array<HookId, 3> kAllHooks = {HookId::conv2, HookId::conv3, HookId::conv4};

std::string to_string(HookId id);
/// Accepts "conv2", "conv3", "conv4"; throws ConfigError otherwise.
HookId parse_hook(std::string_view name);

}  // namespace sdt
