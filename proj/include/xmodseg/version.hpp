#pragma once

namespace xmodseg {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace xmodseg
