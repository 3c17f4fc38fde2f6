#pragma once

// Checkpoint layout (all integers and floats little-endian):
//
//   offset  size   field
//   0       8      magic "CFLOWCKP"
//   8       4      format version (u32) = 1
//   12      4      kind tag (u32): 1 velocity field, 2 classifier, 3 flow model
//   16      4      L, number of layer widths (u32)
//   20      4*L    widths (u32 each)
//   ...     8*P    parameters as f64, in declaration order: W_0 row-major
//                  (widths[0] x widths[1]), b_0, W_1, b_1, ...
//   ...     8      metadata length M (u64)
//   ...     M      metadata bytes (UTF-8 JSON, may be empty)
//   ...            payload: kind-specific trailing bytes (a flow model with a
//                  model-backed base embeds the base's full checkpoint here)

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "cflow/diffcore/mlp.hpp"

namespace cflow::diffcore {

enum class CheckpointKind : std::uint32_t { velocity_field = 1, classifier = 2, flow_model = 3 };

inline constexpr std::array<char, 8> kCheckpointMagic{'C', 'F', 'L', 'O', 'W', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffU);
  out.write(b, 8);
}

inline void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffU);
  out.write(b, 4);
}

inline void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline void read_exact(std::istream& in, char* dst, std::size_t n) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) fail(ErrorKind::format, "truncated checkpoint");
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  read_exact(in, reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  read_exact(in, reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

}  // namespace detail

struct CheckpointRecord {
  CheckpointKind kind = CheckpointKind::velocity_field;
  Mlp net;
  std::string metadata;
};

/// Writes header, weights and metadata. Kind-specific payload may follow on the same stream.
inline void write_checkpoint(std::ostream& out, const CheckpointRecord& record) {
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(record.kind));
  const auto& widths = record.net.widths();
  detail::put_u32(out, static_cast<std::uint32_t>(widths.size()));
  for (std::size_t w : widths) detail::put_u32(out, static_cast<std::uint32_t>(w));
  for (const Tensor* p : record.net.parameters())
    for (Eigen::Index i = 0; i < p->value().size(); ++i) detail::put_f64(out, p->value().data()[i]);
  detail::put_u64(out, record.metadata.size());
  out.write(record.metadata.data(), static_cast<std::streamsize>(record.metadata.size()));
  if (!out) fail(ErrorKind::io, "failed writing checkpoint");
}

inline CheckpointRecord read_checkpoint(std::istream& in) {
  std::array<char, 8> magic{};
  detail::read_exact(in, magic.data(), magic.size());
  if (magic != kCheckpointMagic) fail(ErrorKind::format, "not a checkpoint (bad magic)");
  const std::uint32_t version = detail::get_u32(in);
  if (version != kCheckpointVersion)
    fail(ErrorKind::format, "unsupported checkpoint version " + std::to_string(version));
  CheckpointRecord record;
  const std::uint32_t kind = detail::get_u32(in);
  if (kind < 1 || kind > 3) fail(ErrorKind::format, "unknown checkpoint kind " + std::to_string(kind));
  record.kind = static_cast<CheckpointKind>(kind);
  const std::uint32_t count = detail::get_u32(in);
  if (count < 2 || count > 64) fail(ErrorKind::format, "implausible layer count in checkpoint");
  std::vector<std::size_t> widths;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t w = detail::get_u32(in);
    if (w == 0 || w > (1U << 20)) fail(ErrorKind::format, "implausible layer width in checkpoint");
    widths.push_back(w);
  }
  record.net = Mlp::zeros(std::move(widths));
  for (Tensor* p : record.net.parameters())
    for (Eigen::Index i = 0; i < p->value().size(); ++i) p->value().data()[i] = detail::get_f64(in);
  const std::uint64_t meta = detail::get_u64(in);
  if (meta > (1ULL << 26)) fail(ErrorKind::format, "implausible metadata length in checkpoint");
  record.metadata.resize(meta);
  detail::read_exact(in, record.metadata.data(), meta);
  return record;
}

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open " + path.string() + " for writing");
  return out;
}

inline std::ifstream open_for_read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  return in;
}

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointRecord& record) {
  std::ofstream out = open_for_write(path);
  write_checkpoint(out, record);
}

inline CheckpointRecord load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in = open_for_read(path);
  return read_checkpoint(in);
}

}  // namespace cflow::diffcore
