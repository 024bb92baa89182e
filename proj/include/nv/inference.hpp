#pragma once

// Captioning, VQA, statement verification and retrieval from a checkpoint.

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nv/checkpoint.hpp"
#include "nv/image.hpp"

namespace nv {

enum class DecodeStrategy { Greedy, Beam };

struct DecodeOptions {
  DecodeStrategy strategy = DecodeStrategy::Greedy;
  std::size_t beam_width = 3;
  std::size_t max_new_tokens = 0;  // 0 = up to max_len
};

// A generated continuation. tokens excludes the prompt and includes the
// closing [EOS] when one was produced.
struct Hypothesis {
  std::vector<TokenId> tokens;
  double score = 0.0;  // mean log-probability per generated token
  bool operator==(const Hypothesis&) const = default;
};

// Decodes after `prompt` ([DEC]-led). Special tokens other than [EOS] are
// never generated and [EOS] is not allowed as the first token. Greedy ties go
// to the lowest token id; beam ties to the lexicographically smallest
// sequence.
Hypothesis generate(const Checkpoint& ckpt, const Tensor& image_states, const TokenSequence& prompt,
                    const DecodeOptions& opts = {});

// Mean log-probability of `continuation` after `prompt`.
double continuation_score(const Checkpoint& ckpt, const Tensor& image_states,
                          const TokenSequence& prompt, std::span<const TokenId> continuation);

std::string caption_image(const Image& image, const Checkpoint& ckpt, const DecodeOptions& opts = {});

// Throws EmptyQuestion, TooLong, BadImageShape.
std::string answer_question(const Image& image, std::string_view question, const Checkpoint& ckpt,
                            const DecodeOptions& opts = {});

struct Verdict {
  bool truth = false;
  double confidence = 0.0;
};

// sigmoid(logit); truth iff confidence >= 0.5.
Verdict verdict_from_logit(float logit);

// Throws MissingHead when the statement head was never fine-tuned.
Verdict verify_statement(const Image& image, std::string_view statement, const Checkpoint& ckpt);

// ITC embeddings (unit rows).
Tensor embed_images(std::span<const Image> images, const Checkpoint& ckpt);
Tensor embed_texts(std::span<const std::string> texts, const Checkpoint& ckpt);

// Argmax of text . image_rows^T; ties go to the lowest index. Throws
// EmptyCandidates.
std::size_t best_match(std::span<const float> text_embedding, const Tensor& image_embeddings);
std::size_t retrieve_best_match(std::string_view text, std::span<const Image> images,
                                const Checkpoint& ckpt);

// [CLS] words, [ENC] words, [DEC] words [EOS].
TokenSequence text_sequence(const Checkpoint& ckpt, std::string_view text, TokenId role,
                            bool with_eos = false);

}  // namespace nv
