#include "nv/vocab.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "nv/error.hpp"

namespace nv {

std::string normalize_text(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isalnum(c)) {
      if (pending_space && !out.empty()) out.push_back(' ');
      pending_space = false;
      out.push_back(static_cast<char>(std::tolower(c)));
    } else {
      pending_space = true;
    }
  }
  return out;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!inserted) throw Error(Errc::InvalidArgument, "duplicate vocabulary entry " + tokens_[i]);
  }
  if (tokens_.size() < static_cast<std::size_t>(tok::kNumSpecial))
    throw Error(Errc::InvalidArgument, "vocabulary lacks the special tokens");
}

Vocabulary Vocabulary::builtin() {
  return Vocabulary({
      "[PAD]", "[UNK]", "[CLS]", "[ENC]", "[DEC]", "[EOS]", "[SEP]",
      // captions
      "a", "large", "small", "red", "green", "blue", "yellow", "circle", "square", "triangle",
      "above", "below", "left", "right", "of",
      // questions and answers
      "how", "many", "shapes", "one", "two", "three", "what", "color", "is", "the", "shape",
      "where", "top", "bottom", "yes", "no", "bigger", "than", "object",
      // statements
      "there",
  });
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IOError, "cannot read " + path.string());
  std::vector<std::string> tokens;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocabulary(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::IOError, "cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw Error(Errc::OutOfRange, "token id " + std::to_string(id));
  return tokens_[id];
}

TokenId Vocabulary::id(std::string_view word) const {
  const auto it = index_.find(std::string(word));
  return it == index_.end() ? tok::kUnk : it->second;
}

bool Vocabulary::contains(std::string_view word) const {
  return index_.contains(std::string(word));
}

TokenSequence Vocabulary::tokenize(std::string_view text, std::size_t max_len) const {
  TokenSequence seq;
  std::istringstream words(normalize_text(text));
  for (std::string w; words >> w;) {
    const TokenId id = index_.contains(w) && !is_special(index_.at(w)) ? index_.at(w) : tok::kUnk;
    seq.ids.push_back(id);
  }
  if (max_len && seq.size() > max_len)
    throw Error(Errc::TooLong, std::to_string(seq.size()) + " tokens exceed " + std::to_string(max_len));
  return seq;
}

std::string Vocabulary::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id == tok::kPad || id == tok::kCls || id == tok::kEnc || id == tok::kDec || id == tok::kEos)
      continue;
    if (!out.empty()) out.push_back(' ');
    out += token(id);
  }
  return out;
}

TokenSequence make_sequence(TokenId role, const TokenSequence& words, bool with_eos,
                            std::size_t max_len) {
  TokenSequence seq;
  seq.ids.reserve(words.size() + 2);
  seq.ids.push_back(role);
  seq.ids.insert(seq.ids.end(), words.ids.begin(), words.ids.end());
  if (with_eos) seq.ids.push_back(tok::kEos);
  if (seq.size() > max_len)
    throw Error(Errc::TooLong, std::to_string(seq.size()) + " tokens exceed " + std::to_string(max_len));
  return seq;
}

TokenSequence make_vqa_sequence(const TokenSequence& question, const TokenSequence& answer,
                                std::size_t max_len) {
  TokenSequence seq;
  seq.ids.push_back(tok::kDec);
  seq.ids.insert(seq.ids.end(), question.ids.begin(), question.ids.end());
  seq.ids.push_back(tok::kSep);
  seq.ids.insert(seq.ids.end(), answer.ids.begin(), answer.ids.end());
  seq.ids.push_back(tok::kEos);
  if (seq.size() > max_len)
    throw Error(Errc::TooLong, std::to_string(seq.size()) + " tokens exceed " + std::to_string(max_len));
  return seq;
}

}  // namespace nv
