#pragma once

// Pretraining losses: image-text contrastive (ITC), image-text matching (ITM)
// with in-batch hard negatives, shifted-token language modeling (LM), their
// weighted sum, and soft-label distillation.

#include <cstddef>
#include <span>
#include <vector>

#include "nv/model.hpp"
#include "nv/tensor.hpp"
#include "nv/vocab.hpp"

namespace nv {

struct BatchEmbeddings {
  Tensor image_proj;   // N x proj_dim, unit rows
  Tensor text_proj;    // N x proj_dim, unit rows
  Tensor temperature;  // one element, > 0
};

struct ItcResult {
  Tensor loss;
  Tensor similarity;  // N x N cosine similarities, untracked
};

// Symmetric InfoNCE over S / temperature with the diagonal as positives.
ItcResult itc_loss(const BatchEmbeddings& batch);

struct ItmPair {
  std::size_t image = 0;
  std::size_t text = 0;
  bool match = false;
  bool operator==(const ItmPair&) const = default;
};

// For each i: (i, i, match), (i, hardest text j != i, no-match),
// (hardest image j != i, i, no-match). Ties go to the lowest index.
std::vector<ItmPair> select_hard_negatives(const Tensor& similarity);

// Mean sigmoid cross-entropy of the ITM head over the fused [ENC] rows.
Tensor itm_loss(const Tensor& fused_rows, const std::vector<bool>& matched, const MEDParams& params);

// First target position supervised by the LM loss: one past [SEP] if
// present, otherwise 1.
std::size_t supervision_start(std::span<const TokenId> ids);
// Per-row targets for decoder logits of a padded batch; ignored rows hold [PAD].
std::vector<TokenId> lm_targets(const TextBatch& text);

Tensor lm_loss(const Tensor& logits, const TokenSequence& tokens);
Tensor lm_loss(const Tensor& logits, const TextBatch& text);

// T^2 * KL(softmax(teacher/T) || softmax(student/T)), mean over rows. Only
// the student receives gradients.
Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, float temperature);

struct LossWeights {
  float itc = 1.0f;
  float itm = 1.0f;
  float lm = 1.0f;
  bool operator==(const LossWeights&) const = default;
};

Tensor joint_loss(const Tensor& itc, const Tensor& itm, const Tensor& lm,
                  const LossWeights& weights = {});

}  // namespace nv
