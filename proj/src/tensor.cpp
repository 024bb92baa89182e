#include "nv/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "nv/error.hpp"

namespace nv {

namespace {

using Buffer = std::shared_ptr<const std::vector<float>>;

void require(bool ok, Errc code, const std::string& msg) {
  if (!ok) throw Error(code, msg);
}

void require_rank2(const Tensor& t, const char* op) {
  require(t.rank() == 2, Errc::ShapeMismatch,
          std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), Errc::ShapeMismatch,
          std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Buffer share(const Tensor& t) { return t.buffer(); }

// c[m x n] (+)= a[m x k] * b[k x n]. The i-k-j order keeps the per-element
// accumulation in increasing k, identical to the naive triple loop, while the
// inner loop runs over contiguous columns.
void gemm_accumulate(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                     std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    float* __restrict crow = c + i * n;
    const float* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = arow[p];
      const float* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<float> transposed(const float* a, std::size_t rows, std::size_t cols) {
  std::vector<float> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  return out;
}

void accumulate(std::vector<float>* dst, std::span<const float> src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)) {
  for (auto d : shape_) require(d > 0, Errc::ShapeMismatch, "zero-sized dimension");
  require(numel(shape_) == data.size(), Errc::ShapeMismatch,
          "shape " + shape_str(shape_) + " does not match " + std::to_string(data.size()) +
              " values");
  data_ = std::make_shared<const std::vector<float>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0f); }

Tensor Tensor::full(Shape shape, float value) {
  const auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, value));
}

Tensor Tensor::scalar(float value) { return Tensor({}, {value}); }

std::size_t Tensor::rows() const {
  require_rank2(*this, "rows");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  require_rank2(*this, "cols");
  return shape_[1];
}

std::span<const float> Tensor::data() const noexcept {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

float Tensor::at(std::size_t row, std::size_t col) const {
  const auto c = cols();
  require(row < shape_[0] && col < c, Errc::OutOfRange, "index out of range");
  return (*data_)[row * c + col];
}

float Tensor::item() const {
  require(size() == 1, Errc::NotScalar, "item() on " + shape_str(shape_));
  return (*data_)[0];
}

std::optional<NodeId> Tensor::node() const noexcept {
  if (!tape_) return std::nullopt;
  return node_;
}

Tensor Tensor::detach() const {
  Tensor out = *this;
  out.tape_ = nullptr;
  out.node_ = -1;
  return out;
}

Tensor Tensor::reshape(Shape shape) const {
  require(numel(shape) == size(), Errc::ShapeMismatch,
          "reshape " + shape_str(shape_) + " -> " + shape_str(shape));
  const auto n = size();
  const Tensor* in = this;
  return Tape::record(std::move(shape), to_vector(), {in},
                      [n](std::span<const float> g, GradSlots gi) {
                        accumulate(gi[0], g.first(n));
                      });
}

// ---------------------------------------------------------------------------
// Tape

Tensor Tape::watch(const Tensor& value) {
  require(!value.empty(), Errc::InvalidArgument, "cannot watch an empty tensor");
  const auto id = static_cast<NodeId>(nodes_.size());
  nodes_.push_back({value.shape(), true});
  Tensor out = value.detach();
  out.tape_ = this;
  out.node_ = id;
  return out;
}

std::vector<NodeId> Tape::leaves() const {
  std::vector<NodeId> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].leaf) out.push_back(static_cast<NodeId>(i));
  return out;
}

Tensor Tape::record(Shape shape, std::vector<float> data,
                    std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  return record(std::move(shape), std::move(data),
                std::span<const Tensor* const>(inputs.begin(), inputs.size()), std::move(fn));
}

Tensor Tape::record(Shape shape, std::vector<float> data, std::span<const Tensor* const> inputs,
                    BackwardFn fn) {
  Tape* tape = nullptr;
  for (const Tensor* in : inputs) {
    if (!in->tape_) continue;
    require(tape == nullptr || tape == in->tape_, Errc::InvalidArgument,
            "op inputs recorded on different tapes");
    tape = in->tape_;
  }
  if (!tape) return Tensor(std::move(shape), std::move(data));
  return tape->append(std::move(shape), std::move(data), inputs, std::move(fn));
}

Tensor Tape::append(Shape shape, std::vector<float> data, std::span<const Tensor* const> inputs,
                    BackwardFn fn) {
  Tensor out(shape, std::move(data));
  const auto id = static_cast<NodeId>(nodes_.size());
  nodes_.push_back({std::move(shape), false});
  Entry entry;
  entry.output = id;
  entry.fn = std::move(fn);
  for (const Tensor* in : inputs) entry.inputs.push_back(in->tape_ == this ? in->node_ : -1);
  entries_.push_back(std::move(entry));
  out.tape_ = this;
  out.node_ = id;
  return out;
}

GradientMap backward(const Tape& tape, const Tensor& loss) {
  require(loss.size() == 1, Errc::NotScalar, "loss has shape " + shape_str(loss.shape()));
  GradientMap result;
  if (!loss.requires_grad()) return result;
  require(loss.tape() == &tape && *loss.node() < static_cast<NodeId>(tape.nodes_.size()),
          Errc::DetachedLoss, "loss is not recorded on this tape");

  std::vector<std::vector<float>> grads(tape.nodes_.size());
  grads[*loss.node()] = {1.0f};
  std::vector<std::vector<float>*> slots;
  for (auto it = tape.entries_.rbegin(); it != tape.entries_.rend(); ++it) {
    auto& gout = grads[it->output];
    if (gout.empty()) continue;
    slots.assign(it->inputs.size(), nullptr);
    for (std::size_t i = 0; i < it->inputs.size(); ++i) {
      const NodeId in = it->inputs[i];
      if (in < 0) continue;
      if (grads[in].empty()) grads[in].assign(numel(tape.nodes_[in].shape), 0.0f);
      slots[i] = &grads[in];
    }
    it->fn(gout, GradSlots(slots.data(), slots.size()));
    if (!tape.nodes_[it->output].leaf) std::vector<float>().swap(gout);
  }
  for (std::size_t i = 0; i < tape.nodes_.size(); ++i) {
    if (!tape.nodes_[i].leaf) continue;
    const auto& shape = tape.nodes_[i].shape;
    if (grads[i].empty()) grads[i].assign(numel(shape), 0.0f);
    result.emplace(static_cast<NodeId>(i), Tensor(shape, std::move(grads[i])));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  require(k == b.rows(), Errc::ShapeMismatch,
          "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<float> out(m * n, 0.0f);
  gemm_accumulate(a.data().data(), b.data().data(), out.data(), m, k, n);
  Buffer ad = a.requires_grad() || b.requires_grad() ? share(a) : nullptr;
  Buffer bd = ad ? share(b) : nullptr;
  return Tape::record({m, n}, std::move(out), {&a, &b},
                      [ad, bd, m, k, n](std::span<const float> g, GradSlots gi) {
                        if (gi[0]) {
                          // dA = G * B^T
                          const auto bt = transposed(bd->data(), k, n);
                          gemm_accumulate(g.data(), bt.data(), gi[0]->data(), m, n, k);
                        }
                        if (gi[1]) {
                          // dB = A^T * G
                          const auto at = transposed(ad->data(), m, k);
                          gemm_accumulate(at.data(), g.data(), gi[1]->data(), k, m, n);
                        }
                      });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const auto r = a.rows(), c = a.cols();
  return Tape::record({c, r}, transposed(a.data().data(), r, c), {&a},
                      [r, c](std::span<const float> g, GradSlots gi) {
                        accumulate(gi[0], transposed(g.data(), c, r));
                      });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tape::record(a.shape(), std::move(out), {&a, &b},
                      [](std::span<const float> g, GradSlots gi) {
                        accumulate(gi[0], g);
                        accumulate(gi[1], g);
                      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tape::record(a.shape(), std::move(out), {&a, &b},
                      [](std::span<const float> g, GradSlots gi) {
                        accumulate(gi[0], g);
                        if (gi[1])
                          for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] -= g[i];
                      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Buffer ad = share(a), bd = share(b);
  return Tape::record(a.shape(), std::move(out), {&a, &b},
                      [ad, bd](std::span<const float> g, GradSlots gi) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          if (gi[0]) (*gi[0])[i] += g[i] * (*bd)[i];
                          if (gi[1]) (*gi[1])[i] += g[i] * (*ad)[i];
                        }
                      });
}

Tensor scale(const Tensor& x, float factor) {
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return Tape::record(x.shape(), std::move(out), {&x},
                      [factor](std::span<const float> g, GradSlots gi) {
                        for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * factor;
                      });
}

Tensor add_scalar(const Tensor& x, float value) {
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + value;
  return Tape::record(x.shape(), std::move(out), {&x},
                      [](std::span<const float> g, GradSlots gi) { accumulate(gi[0], g); });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  require(s.size() == 1, Errc::NotScalar, "mul_scalar factor must have one element");
  const float sv = s[0];
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * sv;
  Buffer xd = share(x);
  return Tape::record(x.shape(), std::move(out), {&x, &s},
                      [xd, sv](std::span<const float> g, GradSlots gi) {
                        double ds = 0.0;
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          if (gi[0]) (*gi[0])[i] += g[i] * sv;
                          ds += static_cast<double>(g[i]) * (*xd)[i];
                        }
                        if (gi[1]) (*gi[1])[0] += static_cast<float>(ds);
                      });
}

Tensor div_scalar(const Tensor& x, const Tensor& s) {
  require(s.size() == 1, Errc::NotScalar, "div_scalar divisor must have one element");
  const float sv = s[0];
  require(sv != 0.0f && std::isfinite(sv), Errc::InvalidArgument, "division by zero");
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / sv;
  Buffer xd = share(x);
  return Tape::record(x.shape(), std::move(out), {&x, &s},
                      [xd, sv](std::span<const float> g, GradSlots gi) {
                        double ds = 0.0;
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          if (gi[0]) (*gi[0])[i] += g[i] / sv;
                          ds += static_cast<double>(g[i]) * (*xd)[i];
                        }
                        if (gi[1]) (*gi[1])[0] += static_cast<float>(-ds / (double(sv) * sv));
                      });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank2(x, "add_bias");
  const auto m = x.rows(), n = x.cols();
  require(bias.size() == n, Errc::ShapeMismatch,
          "add_bias " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + bias[j];
  return Tape::record(x.shape(), std::move(out), {&x, &bias},
                      [m, n](std::span<const float> g, GradSlots gi) {
                        accumulate(gi[0], g);
                        if (gi[1])
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) (*gi[1])[j] += g[i * n + j];
                      });
}

Tensor gelu(const Tensor& x) {
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  constexpr float kA = 0.044715f;
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float v = x[i];
    out[i] = 0.5f * v * (1.0f + std::tanh(kC * (v + kA * v * v * v)));
  }
  Buffer xd = share(x);
  return Tape::record(x.shape(), std::move(out), {&x},
                      [xd](std::span<const float> g, GradSlots gi) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          const float v = (*xd)[i];
                          const float t = std::tanh(kC * (v + kA * v * v * v));
                          const float d = 0.5f * (1.0f + t) +
                                          0.5f * v * (1.0f - t * t) * kC * (1.0f + 3.0f * kA * v * v);
                          (*gi[0])[i] += g[i] * d;
                        }
                      });
}

// ---------------------------------------------------------------------------
// Normalizations

Tensor softmax(const Tensor& x, std::size_t axis) {
  require(axis < x.rank(), Errc::InvalidAxis,
          "axis " + std::to_string(axis) + " for " + shape_str(x.shape()));
  const auto& s = x.shape();
  const std::size_t len = s[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t outer = x.size() / (len * inner);

  std::vector<float> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::size_t l = 0; l < len; ++l) mx = std::max(mx, x[base + l * inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const float e = std::exp(x[base + l * inner] - mx);
        out[base + l * inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < len; ++l)
        out[base + l * inner] = static_cast<float>(out[base + l * inner] / total);
    }
  }
  auto yd = std::make_shared<const std::vector<float>>(out);
  return Tape::record(x.shape(), std::move(out), {&x},
                      [yd, outer, inner, len](std::span<const float> g, GradSlots gi) {
                        const auto& y = *yd;
                        for (std::size_t o = 0; o < outer; ++o) {
                          for (std::size_t in = 0; in < inner; ++in) {
                            const std::size_t base = o * len * inner + in;
                            double dot = 0.0;
                            for (std::size_t l = 0; l < len; ++l)
                              dot += double(g[base + l * inner]) * y[base + l * inner];
                            for (std::size_t l = 0; l < len; ++l) {
                              const auto i = base + l * inner;
                              (*gi[0])[i] += static_cast<float>(y[i] * (g[i] - dot));
                            }
                          }
                        }
                      });
}

Tensor log_softmax(const Tensor& x) {
  require(x.rank() >= 1, Errc::InvalidAxis, "log_softmax on a scalar");
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.size() / len;
  std::vector<float> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = x.data().data() + r * len;
    const float mx = *std::max_element(row, row + len);
    double total = 0.0;
    for (std::size_t l = 0; l < len; ++l) total += std::exp(double(row[l]) - mx);
    const double lse = std::log(total);
    for (std::size_t l = 0; l < len; ++l)
      out[r * len + l] = static_cast<float>((double(row[l]) - mx) - lse);
  }
  auto yd = std::make_shared<const std::vector<float>>(out);
  return Tape::record(x.shape(), std::move(out), {&x},
                      [yd, rows, len](std::span<const float> g, GradSlots gi) {
                        for (std::size_t r = 0; r < rows; ++r) {
                          double gs = 0.0;
                          for (std::size_t l = 0; l < len; ++l) gs += g[r * len + l];
                          for (std::size_t l = 0; l < len; ++l) {
                            const auto i = r * len + l;
                            (*gi[0])[i] += static_cast<float>(g[i] - std::exp(double((*yd)[i])) * gs);
                          }
                        }
                      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  require(x.rank() >= 1, Errc::ShapeMismatch, "layer_norm on a scalar");
  const std::size_t n = x.shape().back();
  require(gamma.size() == n && beta.size() == n, Errc::ShapeMismatch,
          "layer_norm gamma/beta must have " + std::to_string(n) + " entries");
  const std::size_t rows = x.size() / n;
  std::vector<float> out(x.size());
  auto xhat = std::make_shared<std::vector<float>>(x.size());
  auto inv_std = std::make_shared<std::vector<float>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = x.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= double(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= double(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = static_cast<float>(is);
    for (std::size_t j = 0; j < n; ++j) {
      const float h = static_cast<float>((row[j] - mu) * is);
      (*xhat)[r * n + j] = h;
      out[r * n + j] = h * gamma[j] + beta[j];
    }
  }
  Buffer gd = share(gamma);
  return Tape::record(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [xhat, inv_std, gd, rows, n](std::span<const float> g, GradSlots gi) {
        std::vector<double> dh(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const float* h = xhat->data() + r * n;
          const float* gr = g.data() + r * n;
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            dh[j] = double(gr[j]) * (*gd)[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * h[j];
            if (gi[1]) (*gi[1])[j] += gr[j] * h[j];
            if (gi[2]) (*gi[2])[j] += gr[j];
          }
          if (!gi[0]) continue;
          mean_dh /= double(n);
          mean_dh_h /= double(n);
          const double is = (*inv_std)[r];
          for (std::size_t j = 0; j < n; ++j)
            (*gi[0])[r * n + j] += static_cast<float>(is * (dh[j] - mean_dh - h[j] * mean_dh_h));
        }
      });
}

Tensor l2_normalize_rows(const Tensor& x, float eps) {
  require_rank2(x, "l2_normalize_rows");
  const auto m = x.rows(), n = x.cols();
  std::vector<float> out(x.size());
  auto norms = std::make_shared<std::vector<float>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < n; ++j) sq += double(x[i * n + j]) * x[i * n + j];
    const float norm = std::max(static_cast<float>(std::sqrt(sq)), eps);
    (*norms)[i] = norm;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] / norm;
  }
  auto yd = std::make_shared<const std::vector<float>>(out);
  return Tape::record(x.shape(), std::move(out), {&x},
                      [yd, norms, m, n](std::span<const float> g, GradSlots gi) {
                        for (std::size_t i = 0; i < m; ++i) {
                          double dot = 0.0;
                          for (std::size_t j = 0; j < n; ++j)
                            dot += double(g[i * n + j]) * (*yd)[i * n + j];
                          for (std::size_t j = 0; j < n; ++j) {
                            const auto k = i * n + j;
                            (*gi[0])[k] += static_cast<float>((g[k] - (*yd)[k] * dot) / (*norms)[i]);
                          }
                        }
                      });
}

// ---------------------------------------------------------------------------
// Indexing

Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids) {
  require_rank2(table, "gather_rows");
  require(!ids.empty(), Errc::EmptyBatch, "gather_rows with no ids");
  const auto v = table.rows(), d = table.cols();
  std::vector<float> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < v, Errc::OutOfRange,
            "row id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v));
    std::copy_n(table.data().data() + ids[i] * d, d, out.data() + i * d);
  }
  auto idv = std::make_shared<const std::vector<std::int32_t>>(ids.begin(), ids.end());
  return Tape::record({ids.size(), d}, std::move(out), {&table},
                      [idv, d](std::span<const float> g, GradSlots gi) {
                        for (std::size_t i = 0; i < idv->size(); ++i) {
                          float* dst = gi[0]->data() + (*idv)[i] * d;
                          for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
                        }
                      });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), Errc::EmptyBatch, "concat_rows with no parts");
  const auto d = parts[0].cols();
  std::size_t total = 0;
  std::vector<const Tensor*> inputs;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    require(p.cols() == d, Errc::ShapeMismatch, "concat_rows column mismatch");
    offsets.push_back(total * d);
    total += p.rows();
    inputs.push_back(&p);
  }
  std::vector<float> out;
  out.reserve(total * d);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return Tape::record({total, d}, std::move(out), inputs,
                      [offsets](std::span<const float> g, GradSlots gi) {
                        for (std::size_t i = 0; i < gi.size(); ++i)
                          if (gi[i]) accumulate(gi[i], g.subspan(offsets[i], gi[i]->size()));
                      });
}

// ---------------------------------------------------------------------------
// Reductions and losses

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (float v : x.data()) total += v;
  const auto n = x.size();
  return Tape::record({}, {static_cast<float>(total)}, {&x},
                      [n](std::span<const float> g, GradSlots gi) {
                        for (std::size_t i = 0; i < n; ++i) (*gi[0])[i] += g[0];
                      });
}

Tensor mean(const Tensor& x) {
  require(x.size() > 0, Errc::EmptyBatch, "mean of empty tensor");
  double total = 0.0;
  for (float v : x.data()) total += v;
  const auto n = x.size();
  return Tape::record({}, {static_cast<float>(total / double(n))}, {&x},
                      [n](std::span<const float> g, GradSlots gi) {
                        const float share = g[0] / static_cast<float>(n);
                        for (std::size_t i = 0; i < n; ++i) (*gi[0])[i] += share;
                      });
}

Tensor cross_entropy_logits(const Tensor& logits, std::span<const std::int32_t> targets,
                            std::int32_t ignore_id) {
  require_rank2(logits, "cross_entropy_logits");
  const auto n = logits.rows(), vocab = logits.cols();
  require(targets.size() == n, Errc::ShapeMismatch, "one target per logits row required");
  std::size_t live = 0;
  for (auto t : targets) {
    if (t == ignore_id) continue;
    require(t >= 0 && static_cast<std::size_t>(t) < vocab, Errc::OutOfRange,
            "target " + std::to_string(t) + " outside [0," + std::to_string(vocab) + ")");
    ++live;
  }
  require(live > 0, Errc::AllIgnored, "every row is ignored");

  auto probs = std::make_shared<std::vector<float>>(n * vocab, 0.0f);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == ignore_id) continue;
    const float* row = logits.data().data() + i * vocab;
    const float mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(double(row[j]) - mx);
    // log(z) + (max - x_t): exact for uniform rows.
    total += std::log(z) + (double(mx) - row[targets[i]]);
    for (std::size_t j = 0; j < vocab; ++j)
      (*probs)[i * vocab + j] = static_cast<float>(std::exp(double(row[j]) - mx) / z);
  }
  auto tv = std::make_shared<const std::vector<std::int32_t>>(targets.begin(), targets.end());
  return Tape::record({}, {static_cast<float>(total / double(live))}, {&logits},
                      [probs, tv, n, vocab, live, ignore_id](std::span<const float> g,
                                                             GradSlots gi) {
                        const float w = g[0] / static_cast<float>(live);
                        for (std::size_t i = 0; i < n; ++i) {
                          if ((*tv)[i] == ignore_id) continue;
                          for (std::size_t j = 0; j < vocab; ++j)
                            (*gi[0])[i * vocab + j] += w * (*probs)[i * vocab + j];
                          (*gi[0])[i * vocab + (*tv)[i]] -= w;
                        }
                      });
}

Tensor bce_logits(const Tensor& logits, std::span<const float> labels) {
  const auto m = logits.size();
  require(m > 0, Errc::EmptyBatch, "bce_logits with no examples");
  require(labels.size() == m, Errc::ShapeMismatch, "one label per logit required");
  double total = 0.0;
  auto sig = std::make_shared<std::vector<float>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double z = logits[i];
    total += std::max(z, 0.0) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
    (*sig)[i] = static_cast<float>(1.0 / (1.0 + std::exp(-z)));
  }
  auto lv = std::make_shared<const std::vector<float>>(labels.begin(), labels.end());
  return Tape::record({}, {static_cast<float>(total / double(m))}, {&logits},
                      [sig, lv, m](std::span<const float> g, GradSlots gi) {
                        const float w = g[0] / static_cast<float>(m);
                        for (std::size_t i = 0; i < m; ++i)
                          (*gi[0])[i] += w * ((*sig)[i] - (*lv)[i]);
                      });
}

// ---------------------------------------------------------------------------
// Attention

namespace {

struct AttentionGeometry {
  std::size_t batch, q_len, k_len, heads, d, dh, kv_batch;
};

AttentionGeometry check_attention(const Tensor& q, const Tensor& k, const Tensor* v,
                                  const AttentionLayout& l) {
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require(l.n_heads > 0 && q.cols() % l.n_heads == 0, Errc::ShapeMismatch,
          "model width not divisible by head count");
  require(q.rows() == l.batch * l.q_len, Errc::ShapeMismatch, "query rows do not match layout");
  require(k.cols() == q.cols(), Errc::ShapeMismatch, "query/key width mismatch");
  require(k.rows() % l.k_len == 0, Errc::ShapeMismatch, "key rows do not match layout");
  if (v) require(v->shape() == k.shape(), Errc::ShapeMismatch, "key/value shape mismatch");
  const std::size_t kv_batch = k.rows() / l.k_len;
  if (l.kv_index.empty()) {
    require(kv_batch == l.batch, Errc::ShapeMismatch, "key batch does not match query batch");
  } else {
    require(l.kv_index.size() == l.batch, Errc::ShapeMismatch, "kv_index size mismatch");
    for (auto idx : l.kv_index) require(idx < kv_batch, Errc::OutOfRange, "kv_index out of range");
  }
  require(l.mask.empty() || l.mask.size() == l.batch * l.q_len * l.k_len, Errc::ShapeMismatch,
          "mask must hold batch*q_len*k_len entries");
  return {l.batch, l.q_len, l.k_len, l.n_heads, q.cols(), q.cols() / l.n_heads, kv_batch};
}

// Fills probs[b][h][i][j]. Masked entries are exactly zero; a fully masked
// row yields all zeros.
void compute_weights(const float* q, const float* k, const AttentionLayout& l,
                     const AttentionGeometry& g, std::vector<float>& probs) {
  probs.assign(g.batch * g.heads * g.q_len * g.k_len, 0.0f);
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(g.dh));
  std::vector<float> scores(g.k_len);
  for (std::size_t b = 0; b < g.batch; ++b) {
    const std::size_t kb = l.kv_index.empty() ? b : l.kv_index[b];
    for (std::size_t h = 0; h < g.heads; ++h) {
      for (std::size_t i = 0; i < g.q_len; ++i) {
        const float* qrow = q + (b * g.q_len + i) * g.d + h * g.dh;
        const std::uint8_t* mrow =
            l.mask.empty() ? nullptr : l.mask.data() + (b * g.q_len + i) * g.k_len;
        float mx = -std::numeric_limits<float>::infinity();
        for (std::size_t j = 0; j < g.k_len; ++j) {
          if (mrow && !mrow[j]) continue;
          const float* krow = k + (kb * g.k_len + j) * g.d + h * g.dh;
          float s = 0.0f;
          for (std::size_t c = 0; c < g.dh; ++c) s += qrow[c] * krow[c];
          scores[j] = s * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        if (mx == -std::numeric_limits<float>::infinity()) continue;
        float* prow = probs.data() + ((b * g.heads + h) * g.q_len + i) * g.k_len;
        double total = 0.0;
        for (std::size_t j = 0; j < g.k_len; ++j) {
          if (mrow && !mrow[j]) continue;
          prow[j] = std::exp(scores[j] - mx);
          total += prow[j];
        }
        for (std::size_t j = 0; j < g.k_len; ++j) prow[j] = static_cast<float>(prow[j] / total);
      }
    }
  }
}

}  // namespace

std::vector<float> attention_weights(const Tensor& q, const Tensor& k,
                                     const AttentionLayout& layout) {
  const auto g = check_attention(q, k, nullptr, layout);
  std::vector<float> probs;
  compute_weights(q.data().data(), k.data().data(), layout, g, probs);
  return probs;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionLayout& layout) {
  const auto g = check_attention(q, k, &v, layout);
  auto probs = std::make_shared<std::vector<float>>();
  compute_weights(q.data().data(), k.data().data(), layout, g, *probs);

  std::vector<float> out(g.batch * g.q_len * g.d, 0.0f);
  const float* vd = v.data().data();
  for (std::size_t b = 0; b < g.batch; ++b) {
    const std::size_t kb = layout.kv_index.empty() ? b : layout.kv_index[b];
    for (std::size_t h = 0; h < g.heads; ++h) {
      for (std::size_t i = 0; i < g.q_len; ++i) {
        const float* prow = probs->data() + ((b * g.heads + h) * g.q_len + i) * g.k_len;
        float* orow = out.data() + (b * g.q_len + i) * g.d + h * g.dh;
        for (std::size_t j = 0; j < g.k_len; ++j) {
          const float p = prow[j];
          if (p == 0.0f) continue;
          const float* vrow = vd + (kb * g.k_len + j) * g.d + h * g.dh;
          for (std::size_t c = 0; c < g.dh; ++c) orow[c] += p * vrow[c];
        }
      }
    }
  }

  Buffer qd = share(q), kd = share(k), vdat = share(v);
  auto kv_index = std::make_shared<const std::vector<std::size_t>>(layout.kv_index);
  return Tape::record(
      {g.batch * g.q_len, g.d}, std::move(out), {&q, &k, &v},
      [probs, qd, kd, vdat, kv_index, g](std::span<const float> grad, GradSlots gi) {
        const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(g.dh));
        std::vector<float> dp(g.k_len);
        for (std::size_t b = 0; b < g.batch; ++b) {
          const std::size_t kb = kv_index->empty() ? b : (*kv_index)[b];
          for (std::size_t h = 0; h < g.heads; ++h) {
            for (std::size_t i = 0; i < g.q_len; ++i) {
              const float* prow = probs->data() + ((b * g.heads + h) * g.q_len + i) * g.k_len;
              const std::size_t qoff = (b * g.q_len + i) * g.d + h * g.dh;
              const float* go = grad.data() + qoff;
              // dP = dO V^T; dV += P^T dO
              double dot = 0.0;
              for (std::size_t j = 0; j < g.k_len; ++j) {
                const std::size_t koff = (kb * g.k_len + j) * g.d + h * g.dh;
                float s = 0.0f;
                for (std::size_t c = 0; c < g.dh; ++c) s += go[c] * (*vdat)[koff + c];
                dp[j] = s;
                dot += double(s) * prow[j];
                if (gi[2] && prow[j] != 0.0f)
                  for (std::size_t c = 0; c < g.dh; ++c) (*gi[2])[koff + c] += prow[j] * go[c];
              }
              // dS = P * (dP - <dP, P>), then through the scaled q.k product.
              for (std::size_t j = 0; j < g.k_len; ++j) {
                if (prow[j] == 0.0f) continue;
                const float ds = static_cast<float>(prow[j] * (dp[j] - dot)) * inv_sqrt;
                const std::size_t koff = (kb * g.k_len + j) * g.d + h * g.dh;
                for (std::size_t c = 0; c < g.dh; ++c) {
                  if (gi[0]) (*gi[0])[qoff + c] += ds * (*kd)[koff + c];
                  if (gi[1]) (*gi[1])[koff + c] += ds * (*qd)[qoff + c];
                }
              }
            }
          }
        }
      });
}

}  // namespace nv
