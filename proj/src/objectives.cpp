#include "nv/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "nv/error.hpp"

namespace nv {

ItcResult itc_loss(const BatchEmbeddings& batch) {
  const auto& img = batch.image_proj;
  const auto& txt = batch.text_proj;
  if (img.empty() || txt.empty()) throw Error(Errc::EmptyBatch, "ITC needs N >= 1");
  if (img.shape() != txt.shape())
    throw Error(Errc::ShapeMismatch, "image/text projections " + shape_str(img.shape()) + " vs " +
                                         shape_str(txt.shape()));
  if (batch.temperature.size() != 1 || !(batch.temperature[0] > 0.0f))
    throw Error(Errc::InvalidArgument, "temperature must be a positive scalar");
  const auto n = img.rows();
  const auto sim = matmul(img, transpose(txt));
  const auto logits = div_scalar(sim, batch.temperature);
  std::vector<TokenId> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = static_cast<TokenId>(i);
  const auto i2t = cross_entropy_logits(logits, diag, -1);
  const auto t2i = cross_entropy_logits(transpose(logits), diag, -1);
  return {scale(add(i2t, t2i), 0.5f), sim.detach()};
}

std::vector<ItmPair> select_hard_negatives(const Tensor& sim) {
  if (sim.rank() != 2 || sim.rows() != sim.cols())
    throw Error(Errc::ShapeMismatch, "similarity must be square");
  const auto n = sim.rows();
  if (n < 2) throw Error(Errc::EmptyBatch, "hard negatives need N >= 2");
  std::vector<ItmPair> out;
  out.reserve(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best_text = i == 0 ? 1 : 0, best_image = best_text;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (sim.at(i, j) > sim.at(i, best_text)) best_text = j;
      if (sim.at(j, i) > sim.at(best_image, i)) best_image = j;
    }
    out.push_back({i, i, true});
    out.push_back({i, best_text, false});
    out.push_back({best_image, i, false});
  }
  return out;
}

Tensor itm_loss(const Tensor& fused_rows, const std::vector<bool>& matched, const MEDParams& params) {
  if (fused_rows.empty() || matched.empty()) throw Error(Errc::EmptyBatch, "ITM needs M >= 1");
  if (fused_rows.rows() != matched.size())
    throw Error(Errc::ShapeMismatch, "one label per fused row required");
  std::vector<float> labels(matched.begin(), matched.end());
  return bce_logits(itm_logits(fused_rows, params), labels);
}

std::size_t supervision_start(std::span<const TokenId> ids) {
  const auto sep = std::find(ids.begin(), ids.end(), tok::kSep);
  return sep == ids.end() ? 1 : static_cast<std::size_t>(sep - ids.begin()) + 1;
}

std::vector<TokenId> lm_targets(const TextBatch& text) {
  std::vector<TokenId> targets(text.batch * text.len, tok::kPad);
  for (std::size_t b = 0; b < text.batch; ++b) {
    const auto n = text.lengths[b];
    if (n < 2) throw Error(Errc::InvalidArgument, "LM needs sequences of at least 2 tokens");
    const std::span<const TokenId> ids(text.ids.data() + b * text.len, n);
    const auto start = supervision_start(ids);
    for (std::size_t t = 0; t + 1 < n; ++t)
      if (t + 1 >= start) targets[b * text.len + t] = ids[t + 1];
  }
  return targets;
}

Tensor lm_loss(const Tensor& logits, const TokenSequence& tokens) {
  if (tokens.size() < 2) throw Error(Errc::InvalidArgument, "LM needs sequences of at least 2 tokens");
  TextBatch text;
  text.batch = 1;
  text.len = tokens.size();
  text.ids = tokens.ids;
  text.lengths = {tokens.size()};
  return lm_loss(logits, text);
}

Tensor lm_loss(const Tensor& logits, const TextBatch& text) {
  if (logits.rank() != 2 || logits.rows() != text.batch * text.len)
    throw Error(Errc::ShapeMismatch, "logits rows must match the text batch");
  return cross_entropy_logits(logits, lm_targets(text), tok::kPad);
}

Tensor kd_loss(const Tensor& student, const Tensor& teacher, float temperature) {
  if (student.shape() != teacher.shape() || student.rank() != 2)
    throw Error(Errc::ShapeMismatch, "student " + shape_str(student.shape()) + " vs teacher " +
                                         shape_str(teacher.shape()));
  if (!(temperature > 0.0f)) throw Error(Errc::InvalidArgument, "distillation temperature must be > 0");
  const auto rows = student.rows(), v = student.cols();
  const double t = temperature;

  // Softened distributions in double; identical logits give identical rows.
  auto softened = [&](const Tensor& x, std::vector<double>& p) {
    p.resize(rows * v);
    for (std::size_t r = 0; r < rows; ++r) {
      const float* row = x.data().data() + r * v;
      const double mx = *std::max_element(row, row + v) / t;
      double z = 0.0;
      for (std::size_t j = 0; j < v; ++j) z += (p[r * v + j] = std::exp(row[j] / t - mx));
      for (std::size_t j = 0; j < v; ++j) p[r * v + j] /= z;
    }
  };
  std::vector<double> p, q;
  softened(teacher, p);
  softened(student, q);
  double kl = 0.0;
  for (std::size_t i = 0; i < rows * v; ++i)
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  const double loss = std::max(0.0, t * t * kl / double(rows));

  // d/ds = T (q - p) / rows
  auto grad = std::make_shared<std::vector<float>>(rows * v);
  for (std::size_t i = 0; i < rows * v; ++i)
    (*grad)[i] = static_cast<float>(t * (q[i] - p[i]) / double(rows));
  return Tape::record({}, {static_cast<float>(loss)}, {&student},
                      [grad](std::span<const float> g, GradSlots gi) {
                        if (!gi[0]) return;
                        for (std::size_t i = 0; i < grad->size(); ++i) (*gi[0])[i] += g[0] * (*grad)[i];
                      });
}

Tensor joint_loss(const Tensor& itc, const Tensor& itm, const Tensor& lm, const LossWeights& w) {
  for (const Tensor* t : {&itc, &itm, &lm})
    if (t->size() != 1) throw Error(Errc::NotScalar, "joint_loss components must be scalars");
  auto as_scalar = [](const Tensor& t) { return t.rank() == 0 ? t : t.reshape({}); };
  return add(add(scale(as_scalar(itc), w.itc), scale(as_scalar(itm), w.itm)),
             scale(as_scalar(lm), w.lm));
}

}  // namespace nv
