#pragma once

// Dense f32 tensors with a define-by-run reverse-mode gradient tape.
//
// A Tensor is an immutable value (shape + shared row-major buffer). Tensors
// produced from at least one tracked input are recorded on that input's Tape;
// everything else is a plain constant. backward() walks the tape in reverse
// and returns gradients for the watched leaves only.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace nv {

using Shape = std::vector<std::size_t>;
using NodeId = std::int32_t;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor scalar(float value);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_ ? data_->size() : 0; }
  bool empty() const noexcept { return !data_; }

  // Rank-2 accessors; throw ShapeMismatch on other ranks.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const float> data() const noexcept;
  float operator[](std::size_t i) const { return (*data_)[i]; }
  float at(std::size_t row, std::size_t col) const;
  float item() const;
  std::vector<float> to_vector() const { return data_ ? *data_ : std::vector<float>{}; }
  const std::shared_ptr<const std::vector<float>>& buffer() const noexcept { return data_; }

  bool requires_grad() const noexcept { return tape_ != nullptr; }
  std::optional<NodeId> node() const noexcept;
  Tape* tape() const noexcept { return tape_; }

  // Same values, no tape membership.
  Tensor detach() const;
  Tensor reshape(Shape shape) const;

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<const std::vector<float>> data_;
  Tape* tape_ = nullptr;
  NodeId node_ = -1;
};

// Per-input gradient buffers handed to a backward rule. Entries are null for
// inputs that are not tracked on this tape.
using GradSlots = std::span<std::vector<float>* const>;
using BackwardFn = std::function<void(std::span<const float> grad_out, GradSlots grad_in)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers `value` as a leaf whose gradient backward() will report.
  Tensor watch(const Tensor& value);

  // Records an op producing `data` of `shape` from `inputs`. Returns an
  // untracked tensor (and drops `fn`) when no input lives on a tape.
  static Tensor record(Shape shape, std::vector<float> data,
                       std::initializer_list<const Tensor*> inputs, BackwardFn fn);
  static Tensor record(Shape shape, std::vector<float> data,
                       std::span<const Tensor* const> inputs, BackwardFn fn);

  std::size_t node_count() const noexcept { return nodes_.size(); }
  std::size_t op_count() const noexcept { return entries_.size(); }
  std::vector<NodeId> leaves() const;

 private:
  friend std::map<NodeId, Tensor> backward(const Tape& tape, const Tensor& loss);

  struct Node {
    Shape shape;
    bool leaf = false;
  };
  struct Entry {
    std::vector<NodeId> inputs;  // -1 for untracked inputs
    NodeId output = -1;
    BackwardFn fn;
  };

  Tensor append(Shape shape, std::vector<float> data, std::span<const Tensor* const> inputs,
                BackwardFn fn);

  std::vector<Node> nodes_;
  std::vector<Entry> entries_;
};

using GradientMap = std::map<NodeId, Tensor>;

// Gradient of a scalar `loss` with respect to every leaf watched on `tape`.
// Does not mutate the tape, so it can be called repeatedly.
GradientMap backward(const Tape& tape, const Tensor& loss);

// ---------------------------------------------------------------------------
// Operations. All rank-2 unless noted; shapes are checked and violations throw
// Error{ShapeMismatch}.

// c[i][j] = sum_k a[i][k] * b[k][j], accumulated in increasing k.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
Tensor add_scalar(const Tensor& x, float value);
// x * s and x / s for a one-element tensor s.
Tensor mul_scalar(const Tensor& x, const Tensor& s);
Tensor div_scalar(const Tensor& x, const Tensor& s);
// x[m x n] + bias[n] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);

// tanh approximation.
Tensor gelu(const Tensor& x);

// Any rank; max-subtracted.
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x);

inline constexpr float kLayerNormEps = 1e-5f;
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps = kLayerNormEps);

// Row gather with scatter-add backward (embedding lookup).
Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor l2_normalize_rows(const Tensor& x, float eps = 1e-12f);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Mean of -log softmax(logits[i])[targets[i]] over rows whose target is not
// ignore_id. Throws AllIgnored / OutOfRange.
Tensor cross_entropy_logits(const Tensor& logits, std::span<const std::int32_t> targets,
                            std::int32_t ignore_id);

// Mean sigmoid cross-entropy; `logits` has one entry per label.
Tensor bce_logits(const Tensor& logits, std::span<const float> labels);

// Scaled dot-product attention over a batch of independent samples stacked
// along rows. q is [batch*q_len x d]; k and v are [kv_batch*k_len x d]. Query
// sample b attends to key/value sample kv_index[b] (identity when empty).
// mask holds batch*q_len*k_len bytes, nonzero = may attend (empty = all).
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t q_len = 1;
  std::size_t k_len = 1;
  std::size_t n_heads = 1;
  std::vector<std::uint8_t> mask;
  std::vector<std::size_t> kv_index;
};

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionLayout& layout);

// The softmax weights attention() applies, laid out [batch][head][q][k].
std::vector<float> attention_weights(const Tensor& q, const Tensor& k,
                                     const AttentionLayout& layout);

}  // namespace nv
