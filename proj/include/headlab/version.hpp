#pragma once

namespace headlab {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace headlab
