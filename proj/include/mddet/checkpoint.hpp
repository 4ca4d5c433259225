#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "mddet/arch.hpp"

namespace mddet {

// Checkpoint layout (little-endian):
//   magic "MDDET1" | u32 version | u64 spec_len | spec text |
//   u32 n_blocks | per block: u64 count, f32[count]
// Blocks follow the network's state order: per layer, per conv unit:
// weight, bias, then gamma, beta, running_mean, running_var when normalized.
void save_checkpoint(const std::filesystem::path& path, Network& net);
Network load_checkpoint(const std::filesystem::path& path);

// Spec echo without loading parameter data (compatibility checks).
std::string checkpoint_spec_text(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::string_view s);

}  // namespace mddet
