#include "nv/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "nv/error.hpp"

namespace nv {

namespace {

// Log-softmax of the last row of decoder logits for each sequence, with
// tokens that may not be generated at this point set to -inf.
std::vector<std::vector<double>> next_token_logprobs(const Checkpoint& ck, const Tensor& image_states,
                                                     const std::vector<TokenSequence>& seqs,
                                                     const std::vector<bool>& first_step) {
  const auto text = TextBatch::pack(seqs, tok::kDec, ck.config.max_len);
  const std::vector<std::size_t> image_of(seqs.size(), 0);
  const auto logits = decode(text, image_states, image_of, ck.params, ck.config);
  const auto v = logits.cols();
  std::vector<std::vector<double>> out(seqs.size(), std::vector<double>(v));
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const std::size_t row = b * text.len + seqs[b].size() - 1;
    auto& lp = out[b];
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, double(logits.at(row, j)));
    double z = 0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(double(logits.at(row, j)) - mx);
    const double lz = std::log(z) + mx;
    for (std::size_t j = 0; j < v; ++j) {
      const auto id = static_cast<TokenId>(j);
      const bool allowed = id == tok::kEos ? !first_step[b] : id >= tok::kNumSpecial;
      lp[j] = allowed ? double(logits.at(row, j)) - lz : -std::numeric_limits<double>::infinity();
    }
  }
  return out;
}

std::size_t budget(const Checkpoint& ck, const TokenSequence& prompt, const DecodeOptions& opts) {
  if (prompt.size() >= ck.config.max_len)
    throw Error(Errc::TooLong, "prompt leaves no room to generate");
  const auto room = ck.config.max_len - prompt.size();
  return opts.max_new_tokens == 0 ? room : std::min(room, opts.max_new_tokens);
}

Hypothesis greedy(const Checkpoint& ck, const Tensor& states, const TokenSequence& prompt,
                  std::size_t limit) {
  auto seq = prompt;
  Hypothesis h;
  double total = 0;
  for (std::size_t step = 0; step < limit; ++step) {
    const auto lp = next_token_logprobs(ck, states, {seq}, {step == 0})[0];
    const auto best = static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    total += lp[best];
    h.tokens.push_back(best);
    seq.ids.push_back(best);
    if (best == tok::kEos) break;
  }
  h.score = h.tokens.empty() ? 0.0 : total / double(h.tokens.size());
  return h;
}

struct Beam {
  std::vector<TokenId> tokens;
  double sum = 0;
  bool done = false;
  double mean() const { return tokens.empty() ? 0.0 : sum / double(tokens.size()); }
};

bool better(const Beam& a, const Beam& b) {
  if (a.mean() != b.mean()) return a.mean() > b.mean();
  return a.tokens < b.tokens;
}

Hypothesis beam_search(const Checkpoint& ck, const Tensor& states, const TokenSequence& prompt,
                       std::size_t width, std::size_t limit) {
  std::vector<Beam> beams{Beam{}};
  for (std::size_t step = 0; step < limit; ++step) {
    std::vector<TokenSequence> live;
    std::vector<std::size_t> live_index;
    for (std::size_t i = 0; i < beams.size(); ++i) {
      if (beams[i].done) continue;
      auto s = prompt;
      s.ids.insert(s.ids.end(), beams[i].tokens.begin(), beams[i].tokens.end());
      live.push_back(std::move(s));
      live_index.push_back(i);
    }
    if (live.empty()) break;
    const auto lps = next_token_logprobs(ck, states, live, std::vector<bool>(live.size(), step == 0));
    std::vector<Beam> next;
    for (const auto& b : beams)
      if (b.done) next.push_back(b);
    for (std::size_t k = 0; k < live.size(); ++k) {
      const auto& parent = beams[live_index[k]];
      for (std::size_t j = 0; j < lps[k].size(); ++j) {
        if (!std::isfinite(lps[k][j])) continue;
        Beam c = parent;
        c.tokens.push_back(static_cast<TokenId>(j));
        c.sum += lps[k][j];
        c.done = j == static_cast<std::size_t>(tok::kEos);
        next.push_back(std::move(c));
      }
    }
    const auto keep = std::min(width, next.size());
    std::partial_sort(next.begin(), next.begin() + static_cast<std::ptrdiff_t>(keep), next.end(), better);
    next.resize(keep);
    beams = std::move(next);
  }
  const auto& best = *std::min_element(beams.begin(), beams.end(), better);
  return {best.tokens, best.mean()};
}

std::vector<TokenId> strip_eos(std::vector<TokenId> ids) {
  if (!ids.empty() && ids.back() == tok::kEos) ids.pop_back();
  return ids;
}

Tensor image_states_of(const Image& image, const Checkpoint& ck) {
  return encode_image(image, ck.params, ck.config);
}

}  // namespace

TokenSequence text_sequence(const Checkpoint& ck, std::string_view text, TokenId role, bool with_eos) {
  return make_sequence(role, ck.vocab.tokenize(text), with_eos, ck.config.max_len);
}

Hypothesis generate(const Checkpoint& ck, const Tensor& states, const TokenSequence& prompt,
                    const DecodeOptions& opts) {
  const auto limit = budget(ck, prompt, opts);
  if (opts.strategy == DecodeStrategy::Greedy) return greedy(ck, states, prompt, limit);
  if (opts.beam_width == 0) throw Error(Errc::InvalidArgument, "beam_width must be >= 1");
  const auto g = greedy(ck, states, prompt, limit);
  const auto b = beam_search(ck, states, prompt, opts.beam_width, limit);
  // Greedy is one of the paths a beam could have kept; never return worse.
  return g.score > b.score ? g : b;
}

double continuation_score(const Checkpoint& ck, const Tensor& states, const TokenSequence& prompt,
                          std::span<const TokenId> continuation) {
  if (continuation.empty()) return 0.0;
  auto seq = prompt;
  seq.ids.insert(seq.ids.end(), continuation.begin(), continuation.end() - 1);
  const auto text = TextBatch::pack({&seq, 1}, tok::kDec, ck.config.max_len);
  const std::size_t image_of[] = {0};
  const auto logits = decode(text, states, image_of, ck.params, ck.config);
  double total = 0;
  for (std::size_t t = 0; t < continuation.size(); ++t) {
    const std::size_t row = prompt.size() - 1 + t;
    double mx = -std::numeric_limits<double>::infinity(), z = 0;
    for (std::size_t j = 0; j < logits.cols(); ++j) mx = std::max(mx, double(logits.at(row, j)));
    for (std::size_t j = 0; j < logits.cols(); ++j) z += std::exp(double(logits.at(row, j)) - mx);
    total += double(logits.at(row, continuation[t])) - mx - std::log(z);
  }
  return total / double(continuation.size());
}

std::string caption_image(const Image& image, const Checkpoint& ck, const DecodeOptions& opts) {
  const auto states = image_states_of(image, ck);
  const auto h = generate(ck, states, TokenSequence{{tok::kDec}}, opts);
  return ck.vocab.detokenize(strip_eos(h.tokens));
}

std::string answer_question(const Image& image, std::string_view question, const Checkpoint& ck,
                            const DecodeOptions& opts) {
  const auto words = ck.vocab.tokenize(question);
  if (words.empty()) throw Error(Errc::EmptyQuestion, "question has no words");
  auto prompt = make_sequence(tok::kDec, words, false, ck.config.max_len);
  prompt.ids.push_back(tok::kSep);
  if (prompt.size() >= ck.config.max_len) throw Error(Errc::TooLong, "question too long to answer");
  const auto states = image_states_of(image, ck);
  return ck.vocab.detokenize(strip_eos(generate(ck, states, prompt, opts).tokens));
}

Verdict verdict_from_logit(float logit) {
  const double c = 1.0 / (1.0 + std::exp(-double(logit)));
  return {c >= 0.5, c};
}

Verdict verify_statement(const Image& image, std::string_view statement, const Checkpoint& ck) {
  if (!ck.statement_head_trained)
    throw Error(Errc::MissingHead, "checkpoint has no fine-tuned statement head");
  const auto states = image_states_of(image, ck);
  const auto seq = text_sequence(ck, statement, tok::kEnc);
  const auto fused = encode_multimodal(seq, &states, ck.params, ck.config);
  return verdict_from_logit(statement_logits(leading_rows(fused, 1, seq.size()), ck.params).item());
}

Tensor embed_images(std::span<const Image> images, const Checkpoint& ck) {
  if (images.empty()) throw Error(Errc::EmptyCandidates, "no images");
  std::vector<const Image*> ptrs;
  for (const auto& im : images) ptrs.push_back(&im);
  const auto states = encode_images(ptrs, ck.params, ck.config);
  return image_embeddings(leading_rows(states, images.size(), ck.config.image_tokens()), ck.params);
}

Tensor embed_texts(std::span<const std::string> texts, const Checkpoint& ck) {
  if (texts.empty()) throw Error(Errc::EmptyBatch, "no texts");
  std::vector<TokenSequence> seqs;
  for (const auto& t : texts) seqs.push_back(text_sequence(ck, t, tok::kCls));
  const auto batch = TextBatch::pack(seqs, tok::kCls, ck.config.max_len);
  const auto states = encode_texts(batch, ck.params, ck.config);
  return text_embeddings(leading_rows(states, texts.size(), batch.len), ck.params);
}

std::size_t best_match(std::span<const float> text, const Tensor& images) {
  if (images.empty()) throw Error(Errc::EmptyCandidates, "no candidate images");
  if (images.cols() != text.size()) throw Error(Errc::ShapeMismatch, "embedding widths differ");
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < images.rows(); ++i) {
    double s = 0;
    for (std::size_t k = 0; k < text.size(); ++k) s += double(text[k]) * images.at(i, k);
    if (s > best_score) {
      best_score = s;
      best = i;
    }
  }
  return best;
}

std::size_t retrieve_best_match(std::string_view text, std::span<const Image> images,
                                const Checkpoint& ck) {
  if (images.empty()) throw Error(Errc::EmptyCandidates, "no candidate images");
  const std::string t(text);
  const auto query = embed_texts({&t, 1}, ck);
  return best_match(query.data(), embed_images(images, ck));
}

}  // namespace nv
