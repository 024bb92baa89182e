#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace nv {

using TokenId = std::int32_t;

namespace tok {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kCls = 2;
inline constexpr TokenId kEnc = 3;
inline constexpr TokenId kDec = 4;
inline constexpr TokenId kEos = 5;
inline constexpr TokenId kSep = 6;
inline constexpr TokenId kNumSpecial = 7;
}  // namespace tok

struct TokenSequence {
  std::vector<TokenId> ids;

  std::size_t size() const noexcept { return ids.size(); }
  bool empty() const noexcept { return ids.empty(); }
  TokenId operator[](std::size_t i) const { return ids[i]; }
  bool operator==(const TokenSequence&) const = default;
};

// Lowercases and replaces everything but [a-z0-9] with spaces, then collapses
// runs of whitespace.
std::string normalize_text(std::string_view text);

// Closed word-level vocabulary; id = position in the token list.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  // Special tokens followed by every word the scene grammar can emit.
  static Vocabulary builtin();
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  const std::string& token(TokenId id) const;
  TokenId id(std::string_view word) const;  // kUnk when absent
  bool contains(std::string_view word) const;
  bool is_special(TokenId id) const noexcept { return id >= 0 && id < tok::kNumSpecial; }

  // Word ids for normalized text, no role token. TooLong when the result
  // would exceed max_len (0 = unbounded).
  TokenSequence tokenize(std::string_view text, std::size_t max_len = 0) const;
  // Words joined by single spaces; role tokens, [PAD] and [EOS] are dropped.
  std::string detokenize(std::span<const TokenId> ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// [role] words... (+ [EOS] when with_eos). TooLong past max_len.
TokenSequence make_sequence(TokenId role, const TokenSequence& words, bool with_eos,
                            std::size_t max_len);
// [DEC] question [SEP] answer [EOS]
TokenSequence make_vqa_sequence(const TokenSequence& question, const TokenSequence& answer,
                                std::size_t max_len);

}  // namespace nv
