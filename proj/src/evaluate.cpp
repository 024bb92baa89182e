#include "nv/evaluate.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>

#include "nv/error.hpp"

namespace nv {

namespace {

std::vector<std::string> split_words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

void require_aligned(std::size_t a, std::size_t b) {
  if (a != b) throw Error(Errc::ShapeMismatch, "predictions and references differ in count");
  if (a == 0) throw Error(Errc::EmptySplit, "no examples to score");
}

double itm_accuracy(const Checkpoint& ck, const CorpusSplit& split, const Tensor& img_emb,
                    const Tensor& txt_emb, std::span<const std::string> captions) {
  const auto n = split.records.size();
  // Positive pair plus the most similar caption that does not hold for the
  // image.
  std::vector<std::size_t> pair_image, pair_text;
  std::vector<bool> gold;
  for (std::size_t i = 0; i < n; ++i) {
    pair_image.push_back(i);
    pair_text.push_back(i);
    gold.push_back(true);
    std::optional<std::size_t> neg;
    double best = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (captions[j] == captions[i] || caption_holds(split.records[i].spec, captions[j])) continue;
      double s = 0;
      for (std::size_t k = 0; k < img_emb.cols(); ++k) s += double(img_emb.at(i, k)) * txt_emb.at(j, k);
      if (!neg || s > best) {
        neg = j;
        best = s;
      }
    }
    if (neg) {
      pair_image.push_back(i);
      pair_text.push_back(*neg);
      gold.push_back(false);
    }
  }
  std::vector<const Image*> ptrs;
  for (const auto& im : split.images) ptrs.push_back(&im);
  const auto states = encode_images(ptrs, ck.params, ck.config);
  std::vector<TokenSequence> seqs;
  for (auto t : pair_text) seqs.push_back(text_sequence(ck, captions[t], tok::kEnc));
  const auto text = TextBatch::pack(seqs, tok::kEnc, ck.config.max_len);
  const auto fused = encode_multimodal(text, states, pair_image, ck.params, ck.config);
  const auto logits = itm_logits(leading_rows(fused, seqs.size(), text.len), ck.params);
  std::vector<bool> predicted;
  for (std::size_t r = 0; r < seqs.size(); ++r) predicted.push_back(verdict_from_logit(logits[r]).truth);
  return accuracy(predicted, gold);
}

}  // namespace

std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::CaptionExactMatch: return "caption_exact_match";
    case Metric::CaptionUnigramPrecision: return "caption_unigram_precision";
    case Metric::VqaAnswerExactMatch: return "vqa_answer_exact_match";
    case Metric::NlvrStatementAccuracy: return "nlvr_statement_accuracy";
    case Metric::ItmAccuracy: return "itm_accuracy";
    case Metric::RetrievalRecallAt1: return "retrieval_recall_at_1";
  }
  return "?";
}

std::vector<Metric> all_metrics() {
  return {Metric::CaptionExactMatch, Metric::CaptionUnigramPrecision, Metric::VqaAnswerExactMatch,
          Metric::NlvrStatementAccuracy, Metric::ItmAccuracy, Metric::RetrievalRecallAt1};
}

Metric parse_metric(std::string_view name) {
  for (auto m : all_metrics())
    if (to_string(m) == name) return m;
  throw Error(Errc::InvalidArgument, "unknown metric \"" + std::string(name) + "\"");
}

double exact_match_rate(std::span<const std::string> pred, std::span<const std::string> gold) {
  require_aligned(pred.size(), gold.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == gold[i];
  return double(hits) / double(pred.size());
}

double unigram_precision(std::span<const std::string> pred, std::span<const std::string> gold) {
  require_aligned(pred.size(), gold.size());
  std::size_t matched = 0, total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    std::unordered_map<std::string, int> budget;
    for (const auto& w : split_words(gold[i])) ++budget[w];
    for (const auto& w : split_words(pred[i])) {
      ++total;
      if (budget[w] > 0) {
        --budget[w];
        ++matched;
      }
    }
  }
  return total == 0 ? 0.0 : double(matched) / double(total);
}

double accuracy(const std::vector<bool>& predicted, const std::vector<bool>& gold) {
  require_aligned(predicted.size(), gold.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hits += predicted[i] == gold[i];
  return double(hits) / double(gold.size());
}

double recall_at_1(const Tensor& text_emb, const Tensor& image_emb, std::span<const std::string> captions) {
  require_aligned(text_emb.rows(), captions.size());
  require_aligned(image_emb.rows(), captions.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    const auto j = best_match(text_emb.data().subspan(i * text_emb.cols(), text_emb.cols()), image_emb);
    hits += captions[j] == captions[i];
  }
  return double(hits) / double(captions.size());
}

std::map<std::string, double> evaluate(const Checkpoint& ck, const CorpusSplit& split,
                                       const EvalOptions& opts) {
  if (split.records.empty()) throw Error(Errc::EmptySplit, "split \"" + split.name + "\" has no scenes");
  auto wanted = opts.metrics;
  if (wanted.empty()) {
    for (auto m : all_metrics())
      if (m != Metric::NlvrStatementAccuracy || ck.statement_head_trained) wanted.push_back(m);
  }
  const auto has = [&](Metric m) { return std::find(wanted.begin(), wanted.end(), m) != wanted.end(); };
  if (has(Metric::NlvrStatementAccuracy) && !ck.statement_head_trained)
    throw Error(Errc::MissingHead, "statement accuracy needs a fine-tuned statement head");

  const auto n = split.records.size();
  std::vector<std::string> captions;
  for (const auto& r : split.records) captions.push_back(r.caption);
  std::map<std::string, double> out;

  if (has(Metric::CaptionExactMatch) || has(Metric::CaptionUnigramPrecision)) {
    std::vector<std::string> pred;
    for (std::size_t i = 0; i < n; ++i) pred.push_back(caption_image(split.images[i], ck, opts.decode));
    if (has(Metric::CaptionExactMatch))
      out[std::string(to_string(Metric::CaptionExactMatch))] = exact_match_rate(pred, captions);
    if (has(Metric::CaptionUnigramPrecision))
      out[std::string(to_string(Metric::CaptionUnigramPrecision))] = unigram_precision(pred, captions);
  }
  if (has(Metric::VqaAnswerExactMatch)) {
    std::vector<std::string> pred, gold;
    for (std::size_t i = 0; i < n; ++i)
      for (const auto& qa : split.records[i].qa) {
        pred.push_back(answer_question(split.images[i], qa.question, ck, opts.decode));
        gold.push_back(qa.answer);
      }
    out[std::string(to_string(Metric::VqaAnswerExactMatch))] = exact_match_rate(pred, gold);
  }
  if (has(Metric::NlvrStatementAccuracy)) {
    std::vector<bool> pred, gold;
    for (std::size_t i = 0; i < n; ++i)
      for (const auto& st : split.records[i].statements) {
        pred.push_back(verify_statement(split.images[i], st.text, ck).truth);
        gold.push_back(st.truth);
      }
    out[std::string(to_string(Metric::NlvrStatementAccuracy))] = accuracy(pred, gold);
  }
  if (has(Metric::ItmAccuracy) || has(Metric::RetrievalRecallAt1)) {
    const auto img_emb = embed_images(split.images, ck);
    const auto txt_emb = embed_texts(captions, ck);
    if (has(Metric::RetrievalRecallAt1))
      out[std::string(to_string(Metric::RetrievalRecallAt1))] = recall_at_1(txt_emb, img_emb, captions);
    if (has(Metric::ItmAccuracy))
      out[std::string(to_string(Metric::ItmAccuracy))] = itm_accuracy(ck, split, img_emb, txt_emb, captions);
  }
  return out;
}

}  // namespace nv
