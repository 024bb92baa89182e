#pragma once

// Task metrics over a corpus split. The counting functions are pure so they
// can be checked against hand counts; evaluate() runs the model to produce
// the predictions they consume.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nv/checkpoint.hpp"
#include "nv/corpus.hpp"
#include "nv/inference.hpp"

namespace nv {

enum class Metric {
  CaptionExactMatch,
  CaptionUnigramPrecision,
  VqaAnswerExactMatch,
  NlvrStatementAccuracy,
  ItmAccuracy,
  RetrievalRecallAt1,
};

std::string_view to_string(Metric m);
// Throws InvalidArgument.
Metric parse_metric(std::string_view name);
std::vector<Metric> all_metrics();

double exact_match_rate(std::span<const std::string> predictions, std::span<const std::string> gold);
// Clipped unigram matches over all predicted words (0 when nothing was
// predicted).
double unigram_precision(std::span<const std::string> predictions, std::span<const std::string> gold);
double accuracy(const std::vector<bool>& predicted, const std::vector<bool>& gold);
// Text i retrieves argmax_j text_i . image_j; a hit when caption j == caption i.
double recall_at_1(const Tensor& text_embeddings, const Tensor& image_embeddings,
                   std::span<const std::string> captions);

struct EvalOptions {
  std::vector<Metric> metrics;  // empty = every metric the checkpoint supports
  DecodeOptions decode;
};

// Metric name -> value in [0, 1]. Throws EmptySplit, and MissingHead when the
// statement metric is requested from a checkpoint without that head.
std::map<std::string, double> evaluate(const Checkpoint& ckpt, const CorpusSplit& split,
                                       const EvalOptions& options = {});

}  // namespace nv
