#pragma once

// Multimodal mixture of encoder-decoder: one parameter set driving a ViT image
// encoder, a bidirectional text encoder ([CLS]), an image-grounded text
// encoder ([ENC], cross-attention in every block) and an image-grounded causal
// decoder ([DEC]).
//
// Every forward function takes a batch of samples stacked along rows; the
// single-sample entry points are thin wrappers. Passing params bound to a Tape
// (MEDParams::bind) records the computation for backward().

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "nv/image.hpp"
#include "nv/tensor.hpp"
#include "nv/vocab.hpp"

namespace nv {

struct MEDConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;  // per stack
  std::size_t ffn_dim = 256;
  std::size_t vocab_size = 42;
  std::size_t max_len = 24;
  std::size_t image_size = 32;
  std::size_t image_channels = 3;
  std::size_t patch_size = 8;
  std::size_t proj_dim = 32;
  float temperature_init = 0.07f;
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
  std::size_t n_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  std::size_t patch_dim() const { return patch_size * patch_size * image_channels; }
  std::size_t image_tokens() const { return n_patches() + 1; }

  bool operator==(const MEDConfig&) const = default;
};

inline constexpr float kTemperatureMin = 0.01f;
inline constexpr float kTemperatureMax = 1.0f;

// Named parameters in a fixed creation order.
class MEDParams {
 public:
  // normal(0, 0.02) weights, zero biases, unit layer-norm gains, seeded by
  // config.seed.
  static MEDParams init(const MEDConfig& config);

  std::size_t count() const noexcept { return tensors_.size(); }
  std::size_t total_elements() const;
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::vector<Tensor>& tensors() const noexcept { return tensors_; }

  bool contains(std::string_view name) const;
  const Tensor& operator[](std::string_view name) const;
  const Tensor& at(std::size_t i) const { return tensors_.at(i); }
  std::size_t index_of(std::string_view name) const;

  void add(std::string name, Tensor value);
  void set(std::size_t i, Tensor value);

  // Copy whose tensors are leaves on `tape`, in the same order.
  MEDParams bind(Tape& tape) const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Closed-form parameter count for a configuration.
std::size_t expected_parameter_count(const MEDConfig& config);

// Token sequences padded to a common length for one forward pass.
struct TextBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<TokenId> ids;  // batch * len, [PAD]-padded
  std::vector<std::size_t> lengths;

  // Checks each sequence starts with `role` (MissingRoleToken) and fits
  // max_len (TooLong).
  static TextBatch pack(std::span<const TokenSequence> seqs, TokenId role, std::size_t max_len);
};

// Projected multi-head attention: softmax(QK^T/sqrt(d_head) + mask) V per
// head, heads concatenated, then the output projection. `prefix` selects the
// q/k/v/o weights.
Tensor multi_head_attention(const Tensor& query_states, const Tensor& kv_states,
                            const MEDParams& params, const std::string& prefix,
                            const AttentionLayout& layout);

// [batch * (n_patches + 1)] x d_model; row 0 of each image is its [CLS].
Tensor encode_images(std::span<const Image* const> images, const MEDParams& params,
                     const MEDConfig& config);
// [batch * len] x d_model, bidirectional self-attention, [CLS]-led.
Tensor encode_texts(const TextBatch& text, const MEDParams& params, const MEDConfig& config);
// [ENC]-led text fused with image_states[image_of[b]] through cross-attention.
Tensor encode_multimodal(const TextBatch& text, const Tensor& image_states,
                         std::span<const std::size_t> image_of, const MEDParams& params,
                         const MEDConfig& config);
// [DEC]-led causal decoding; returns logits [batch * len] x vocab.
Tensor decode(const TextBatch& text, const Tensor& image_states,
              std::span<const std::size_t> image_of, const MEDParams& params,
              const MEDConfig& config);

// Single-sample forms.
Tensor encode_image(const Image& image, const MEDParams& params, const MEDConfig& config);
Tensor encode_text(const TokenSequence& tokens, const MEDParams& params, const MEDConfig& config);
// image_states may be null (MissingImage).
Tensor encode_multimodal(const TokenSequence& tokens, const Tensor* image_states,
                         const MEDParams& params, const MEDConfig& config);
Tensor decode_step(const TokenSequence& prefix, const Tensor* image_states,
                   const MEDParams& params, const MEDConfig& config);

// Row 0 of each of `batch` consecutive blocks of `len` rows.
Tensor leading_rows(const Tensor& states, std::size_t batch, std::size_t len);

// L2-normalized contrastive embeddings from [CLS] rows.
Tensor image_embeddings(const Tensor& cls_rows, const MEDParams& params);
Tensor text_embeddings(const Tensor& cls_rows, const MEDParams& params);

// One logit per fused [ENC] row.
Tensor itm_logits(const Tensor& fused_rows, const MEDParams& params);
Tensor statement_logits(const Tensor& fused_rows, const MEDParams& params);

}  // namespace nv
