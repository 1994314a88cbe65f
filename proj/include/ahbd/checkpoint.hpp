#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "ahbd/transformer.hpp"

namespace ahbd {

// Binary checkpoint layout (all integers and floats little-endian):
//   "AHBD"                      4-byte magic
//   u32 format version          kCheckpointVersion
//   u32 n_layers, n_heads, d_model, d_head, d_ff, vocab_size, max_seq
//   f32 parameter arrays        ownership-table order, row-major
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ModelParams& params, std::ostream& out);
ModelParams load_checkpoint(std::istream& in);

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace ahbd
