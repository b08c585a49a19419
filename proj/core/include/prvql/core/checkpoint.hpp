#pragma once

#include <filesystem>
#include <span>

#include "prvql/core/nn.hpp"

namespace prvql {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: "PRVQLCKP", u32 version, u32 count, then per parameter
// u32 name length, name bytes, u32 rank, u64 dims..., float32 payload.
// All integers and floats little-endian.
void save_checkpoint(const std::filesystem::path& path, std::span<const Parameter> params);

// Overwrites every parameter in `params` from the file. Names and shapes must
// match exactly, with no missing or extra entries.
void load_checkpoint(const std::filesystem::path& path, std::span<const Parameter> params);

}  // namespace prvql
