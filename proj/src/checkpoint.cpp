#include "ahbd/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace ahbd {
namespace {

constexpr std::array<char, 4> kMagic = {'A', 'H', 'B', 'D'};

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<unsigned char, 4> b{};
  for (int i = 0; i < 4; ++i) b[static_cast<std::size_t>(i)] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b.data()), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw FormatError("checkpoint: truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const ModelParams& params, std::ostream& out) {
  const auto& c = params.config();
  out.write(kMagic.data(), kMagic.size());
  put_u32(out, kCheckpointVersion);
  for (int v : {c.n_layers, c.n_heads, c.d_model, c.d_head, c.d_ff, c.vocab_size, c.max_seq}) {
    put_u32(out, static_cast<std::uint32_t>(v));
  }
  for (const auto& e : params.entries()) {
    for (float x : e.tensor.values()) put_u32(out, std::bit_cast<std::uint32_t>(x));
  }
  if (!out) throw FormatError("checkpoint: write failed");
}

ModelParams load_checkpoint(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw FormatError("checkpoint: bad magic");
  const std::uint32_t version = get_u32(in);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version));
  }
  ModelConfig c;
  for (int* field : {&c.n_layers, &c.n_heads, &c.d_model, &c.d_head, &c.d_ff, &c.vocab_size, &c.max_seq}) {
    const std::uint32_t v = get_u32(in);
    if (v > (1u << 20)) throw FormatError("checkpoint: implausible config value " + std::to_string(v));
    *field = static_cast<int>(v);
  }
  ModelParams params(c);
  for (auto& e : params.entries()) {
    for (auto& x : e.tensor.values()) {
      try {
        x = std::bit_cast<float>(get_u32(in));
      } catch (const FormatError&) {
        throw FormatError("checkpoint: truncated parameter data in " + e.name);
      }
    }
    if (!e.tensor.all_finite()) throw FormatError("checkpoint: non-finite values in " + e.name);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes");
  return params;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("checkpoint: cannot open " + path.string() + " for writing");
  save_checkpoint(params, out);
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open " + path.string());
  return load_checkpoint(in);
}

}  // namespace ahbd
