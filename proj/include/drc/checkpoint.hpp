#pragma once

// Checkpoint file:
//   "DRCK" | u32 version | u8 stage | u64 step | u64 config hash
//   | model config (u32 x 8, u8 disentangler, u8 fusion)
//   | u32 block count | blocks
//   block: u16 name length | name | u32 rows | u32 cols | u8 scalar bytes | raw little-endian values
// Values are stored at their in-memory precision, so save -> load -> save is
// byte-identical.

#include "drc/model.hpp"
#include "drc/toyworld.hpp"

#include <filesystem>

namespace drc {

inline constexpr uint32_t kCheckpointVersion = 1;

template <class T>
struct Checkpoint {
  int stage = 1;
  uint64_t step = 0;
  uint64_t config_hash = 0;
  DrcModel<T> model;
};

template <class T>
std::vector<uint8_t> serialize_checkpoint(const Checkpoint<T>& ck) {
  std::vector<uint8_t> b;
  io::put_bytes(b, "DRCK");
  io::put(b, kCheckpointVersion);
  io::put(b, static_cast<uint8_t>(ck.stage));
  io::put(b, ck.step);
  io::put(b, ck.config_hash);
  const ModelConfig& c = ck.model.cfg;
  for (int v : {c.visual_vocab, c.text_vocab, c.seq_len, c.width, c.blocks, c.latent_rows, c.ffn_mult, c.context})
    io::put(b, static_cast<uint32_t>(v));
  io::put(b, static_cast<uint8_t>(c.disentangler));
  io::put(b, static_cast<uint8_t>(c.fusion));

  const auto params = param_list<const T>(ck.model);
  io::put(b, static_cast<uint32_t>(params.size()));
  for (const auto& p : params) {
    io::put(b, static_cast<uint16_t>(p.name.size()));
    io::put_bytes(b, p.name);
    io::put(b, static_cast<uint32_t>(p.rows));
    io::put(b, static_cast<uint32_t>(p.cols));
    io::put(b, static_cast<uint8_t>(sizeof(T)));
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      if constexpr (sizeof(T) == 4)
        io::put(b, std::bit_cast<uint32_t>(p.data[k]));
      else
        io::put(b, std::bit_cast<uint64_t>(p.data[k]));
    }
  }
  return b;
}

// expected_hash: 0 skips the config-hash check.
template <class T>
Checkpoint<T> deserialize_checkpoint(const std::vector<uint8_t>& bytes, uint64_t expected_hash = 0) {
  io::Reader r(bytes.data(), bytes.size());
  if (r.get_string(4) != "DRCK") throw FormatError("not a checkpoint file (bad magic)");
  const auto version = r.get<uint32_t>();
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint format version " + std::to_string(version) + " is not supported");
  Checkpoint<T> ck;
  ck.stage = r.get<uint8_t>();
  ck.step = r.get<uint64_t>();
  ck.config_hash = r.get<uint64_t>();
  if (expected_hash != 0 && ck.config_hash != expected_hash)
    throw VersionError("checkpoint config hash " + hex64(ck.config_hash) + " does not match current config " +
                       hex64(expected_hash));

  ModelConfig c;
  int* fields[] = {&c.visual_vocab, &c.text_vocab, &c.seq_len, &c.width, &c.blocks, &c.latent_rows, &c.ffn_mult, &c.context};
  for (int* f : fields) *f = static_cast<int>(r.get<uint32_t>());
  const auto dk = r.get<uint8_t>(), fk = r.get<uint8_t>();
  if (dk > 1 || fk > 1) throw FormatError("checkpoint: bad variant tag");
  c.disentangler = static_cast<DisentanglerKind>(dk);
  c.fusion = static_cast<FusionKind>(fk);
  ck.model = make_model<T>(c, 0);

  auto params = param_list<T>(ck.model);
  const auto count = r.get<uint32_t>();
  if (count != params.size()) throw FormatError("checkpoint: parameter block count mismatch");
  for (auto& p : params) {
    const auto name = r.get_string(r.get<uint16_t>());
    const auto rows = r.get<uint32_t>(), cols = r.get<uint32_t>();
    const auto width = r.get<uint8_t>();
    if (name != p.name || rows != p.rows || cols != p.cols || width != sizeof(T))
      throw FormatError("checkpoint: block '" + name + "' does not match expected '" + p.name + "'");
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      if constexpr (sizeof(T) == 4)
        p.data[k] = std::bit_cast<T>(r.get<uint32_t>());
      else
        p.data[k] = std::bit_cast<T>(r.get<uint64_t>());
    }
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
  if (!all_finite(ck.model)) throw NumericError("checkpoint contains non-finite parameters");
  return ck;
}

template <class T>
void save_checkpoint(const std::filesystem::path& p, const Checkpoint<T>& ck) {
  world::detail::write_file(p, serialize_checkpoint(ck));
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& p, uint64_t expected_hash = 0) {
  if (!std::filesystem::exists(p)) throw MissingArtifact("checkpoint not found: " + p.string());
  return deserialize_checkpoint<T>(world::detail::read_file(p), expected_hash);
}

}  // namespace drc
