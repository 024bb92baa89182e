#pragma once

// Binary checkpoint:
//   "MEDK" | u32 LE version (1) | u32 LE header length | JSON header |
//   raw LE f32 tensors in header order (parameters, then Adam first and second
//   moments when present).

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nv/model.hpp"
#include "nv/vocab.hpp"

namespace nv {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// First and second AdamW moments, aligned with MEDParams order.
struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::size_t step = 0;

  static AdamState zeros_like(const MEDParams& params);
  bool empty() const noexcept { return m.empty(); }
  bool operator==(const AdamState&) const = default;
};

struct Checkpoint {
  MEDConfig config;
  MEDParams params;
  AdamState optimizer;
  Vocabulary vocab = Vocabulary::builtin();
  std::size_t step = 0;
  std::uint64_t corpus_fingerprint = 0;
  std::string stage;                    // stage that produced it
  bool statement_head_trained = false;  // set by finetune-nlvr

  static Checkpoint fresh(const MEDConfig& config);
};

std::string encode_checkpoint(const Checkpoint& ckpt);
// Throws BadMagic, UnsupportedVersion, TruncatedFile, ParseError.
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
// Throws IOError when the file cannot be read, then as decode_checkpoint.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace nv
