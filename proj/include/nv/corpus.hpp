#pragma once

// On-disk scene corpora:
//   DIR/vocab.txt
//   DIR/{train,eval}/scenes.jsonl   one record per line
//   DIR/{train,eval}/img/<id>.ppm
// The eval split reserves (shape, color) combinations that never occur in
// train; every even-indexed eval scene contains one of them.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "nv/image.hpp"
#include "nv/scenegen.hpp"
#include "nv/vocab.hpp"

namespace nv {

inline constexpr std::array<std::pair<ShapeKind, ColorKind>, 2> kHoldoutCombos{{
    {ShapeKind::Triangle, ColorKind::Yellow},
    {ShapeKind::Square, ColorKind::Blue},
}};

bool has_holdout_combo(const SceneSpec& scene);

struct SceneRecord {
  std::size_t id = 0;
  std::string split;
  SceneSpec spec;
  std::string caption;
  std::vector<QAPair> qa;
  std::vector<Statement> statements;
  std::string image;  // relative to the split directory
  bool operator==(const SceneRecord&) const = default;
};

// All labels for a scene: caption, QA pairs, one true and one false statement.
SceneRecord make_record(std::size_t id, const std::string& split, const SceneSpec& spec);

std::string encode_record(const SceneRecord& record);
// Throws ParseError.
SceneRecord decode_record(const std::string& line);

// Throws InvalidArgument for empty splits and IOError on write failures.
void build_corpus(const std::filesystem::path& out, std::size_t n_train, std::size_t n_eval,
                  std::uint64_t seed);

struct CorpusSplit {
  std::string name;
  std::vector<SceneRecord> records;
  std::vector<Image> images;  // images[i] belongs to records[i]
};

// Throws MissingCorpus when the split directory or its scenes.jsonl is absent.
CorpusSplit load_split(const std::filesystem::path& root, const std::string& split);
Vocabulary load_corpus_vocab(const std::filesystem::path& root);

// FNV-1a over vocab.txt and both scenes.jsonl files.
std::uint64_t corpus_fingerprint(const std::filesystem::path& root);

}  // namespace nv
