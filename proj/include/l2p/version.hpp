#pragma once

namespace l2p {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace l2p
