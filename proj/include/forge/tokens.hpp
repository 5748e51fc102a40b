#pragma once

#include "forge/ops.hpp"

namespace forge {

// Reserved vocabulary ids.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kFirstWordId = 4;

}  // namespace forge
