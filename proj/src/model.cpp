#include "nv/model.hpp"

#include <random>

#include "nv/error.hpp"

namespace nv {

namespace {

constexpr float kInitStd = 0.02f;

constexpr const char* kImageStack = "img_enc";
constexpr const char* kTextStack = "txt_enc";
constexpr const char* kFusedStack = "mm_enc";
constexpr const char* kDecoderStack = "dec";

void add_attention_params(MEDParams& p, const std::string& prefix, std::size_t d,
                          std::mt19937_64& rng, std::normal_distribution<float>& normal) {
  for (const char* proj : {"q", "k", "v", "o"}) {
    std::vector<float> w(d * d);
    for (auto& x : w) x = normal(rng);
    p.add(prefix + "." + proj + ".w", Tensor({d, d}, std::move(w)));
    p.add(prefix + "." + proj + ".b", Tensor::zeros({d}));
  }
}

Tensor normal_tensor(Shape shape, std::mt19937_64& rng, std::normal_distribution<float>& normal) {
  std::vector<float> data(numel(shape));
  for (auto& x : data) x = normal(rng);
  return Tensor(std::move(shape), std::move(data));
}

void add_stack_params(MEDParams& p, const std::string& stack, bool cross, const MEDConfig& c,
                      std::mt19937_64& rng, std::normal_distribution<float>& normal) {
  const auto d = c.d_model, f = c.ffn_dim;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto pre = stack + ".l" + std::to_string(l);
    p.add(pre + ".ln1.g", Tensor::full({d}, 1.0f));
    p.add(pre + ".ln1.b", Tensor::zeros({d}));
    add_attention_params(p, pre + ".attn", d, rng, normal);
    if (cross) {
      p.add(pre + ".lnx.g", Tensor::full({d}, 1.0f));
      p.add(pre + ".lnx.b", Tensor::zeros({d}));
      add_attention_params(p, pre + ".xattn", d, rng, normal);
    }
    p.add(pre + ".ln2.g", Tensor::full({d}, 1.0f));
    p.add(pre + ".ln2.b", Tensor::zeros({d}));
    p.add(pre + ".fc1.w", normal_tensor({d, f}, rng, normal));
    p.add(pre + ".fc1.b", Tensor::zeros({f}));
    p.add(pre + ".fc2.w", normal_tensor({f, d}, rng, normal));
    p.add(pre + ".fc2.b", Tensor::zeros({d}));
  }
  p.add(stack + ".lnf.g", Tensor::full({d}, 1.0f));
  p.add(stack + ".lnf.b", Tensor::zeros({d}));
}

Tensor linear(const Tensor& x, const MEDParams& p, const std::string& prefix) {
  return add_bias(matmul(x, p[prefix + ".w"]), p[prefix + ".b"]);
}

Tensor norm(const Tensor& x, const MEDParams& p, const std::string& prefix) {
  return layer_norm(x, p[prefix + ".g"], p[prefix + ".b"]);
}

struct CrossInput {
  const Tensor* states;
  AttentionLayout layout;
};

// Pre-norm residual blocks: self-attention, optional cross-attention, then
// the feed-forward network; final layer norm.
Tensor run_stack(Tensor x, const std::string& stack, const MEDParams& p, const MEDConfig& c,
                 const AttentionLayout& self_layout, const CrossInput* cross) {
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto pre = stack + ".l" + std::to_string(l);
    auto h = norm(x, p, pre + ".ln1");
    x = add(x, multi_head_attention(h, h, p, pre + ".attn", self_layout));
    if (cross) {
      h = norm(x, p, pre + ".lnx");
      x = add(x, multi_head_attention(h, *cross->states, p, pre + ".xattn", cross->layout));
    }
    h = norm(x, p, pre + ".ln2");
    h = gelu(linear(h, p, pre + ".fc1"));
    x = add(x, linear(h, p, pre + ".fc2"));
  }
  return norm(x, p, stack + ".lnf");
}

// Token + position embeddings for a padded batch.
Tensor embed_text(const TextBatch& text, const MEDParams& p) {
  std::vector<TokenId> positions(text.batch * text.len);
  for (std::size_t b = 0; b < text.batch; ++b)
    for (std::size_t t = 0; t < text.len; ++t) positions[b * text.len + t] = static_cast<TokenId>(t);
  return add(gather_rows(p["txt.tok"], text.ids), gather_rows(p["txt.pos"], positions));
}

AttentionLayout self_layout(const TextBatch& text, std::size_t heads, bool causal) {
  AttentionLayout l;
  l.batch = text.batch;
  l.q_len = text.len;
  l.k_len = text.len;
  l.n_heads = heads;
  l.mask.assign(text.batch * text.len * text.len, 0);
  for (std::size_t b = 0; b < text.batch; ++b)
    for (std::size_t i = 0; i < text.len; ++i)
      for (std::size_t j = 0; j < text.lengths[b]; ++j)
        if (!causal || j <= i) l.mask[(b * text.len + i) * text.len + j] = 1;
  return l;
}

CrossInput cross_input(const TextBatch& text, const Tensor& image_states,
                       std::span<const std::size_t> image_of, const MEDConfig& c) {
  if (image_states.empty()) throw Error(Errc::MissingImage, "grounded stack needs image states");
  if (image_states.rank() != 2 || image_states.cols() != c.d_model ||
      image_states.rows() % c.image_tokens() != 0)
    throw Error(Errc::ShapeMismatch, "image states " + shape_str(image_states.shape()));
  if (image_of.size() != text.batch)
    throw Error(Errc::ShapeMismatch, "one image index per text sample required");
  CrossInput in{&image_states, {}};
  in.layout.batch = text.batch;
  in.layout.q_len = text.len;
  in.layout.k_len = c.image_tokens();
  in.layout.n_heads = c.n_heads;
  in.layout.kv_index.assign(image_of.begin(), image_of.end());
  return in;
}

// Per-channel pixel statistics of rendered scenes; patches are standardized
// with them so the white background does not swamp the objects.
constexpr float kPixelMean[3] = {0.9707f, 0.9672f, 0.9596f};
constexpr float kPixelStd[3] = {0.1537f, 0.1492f, 0.1809f};

std::vector<float> extract_patches(std::span<const Image* const> images, const MEDConfig& c) {
  const auto ps = c.patch_size, grid = c.image_size / ps, ch = c.image_channels;
  std::vector<float> out;
  out.reserve(images.size() * c.n_patches() * c.patch_dim());
  for (const Image* img : images) {
    if (img->height != c.image_size || img->width != c.image_size || img->channels != ch ||
        img->pixels.size() != c.image_size * c.image_size * ch)
      throw Error(Errc::BadImageShape, std::to_string(img->height) + "x" +
                                           std::to_string(img->width) + "x" +
                                           std::to_string(img->channels) + " image, expected " +
                                           std::to_string(c.image_size) + "x" +
                                           std::to_string(c.image_size) + "x" + std::to_string(ch));
    for (std::size_t gr = 0; gr < grid; ++gr)
      for (std::size_t gc = 0; gc < grid; ++gc)
        for (std::size_t dy = 0; dy < ps; ++dy)
          for (std::size_t dx = 0; dx < ps; ++dx)
            for (std::size_t k = 0; k < ch; ++k) {
              const float v = img->at(gr * ps + dy, gc * ps + dx, k);
              out.push_back(ch == 3 ? (v - kPixelMean[k]) / kPixelStd[k] : v);
            }
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

void MEDConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(Errc::ConfigError, msg); };
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
    fail("d_model must be a positive multiple of n_heads");
  if (n_layers == 0 || ffn_dim == 0 || proj_dim == 0) fail("layer sizes must be positive");
  if (vocab_size < static_cast<std::size_t>(tok::kNumSpecial)) fail("vocabulary too small");
  if (max_len < 3) fail("max_len must be at least 3");
  if (patch_size == 0 || image_size % patch_size != 0)
    fail("image_size must be divisible by patch_size");
  if (image_channels == 0) fail("image_channels must be positive");
  if (!(temperature_init >= kTemperatureMin && temperature_init <= kTemperatureMax))
    fail("temperature_init outside [0.01, 1]");
}

MEDParams MEDParams::init(const MEDConfig& c) {
  c.validate();
  std::mt19937_64 rng(c.seed);
  std::normal_distribution<float> normal(0.0f, kInitStd);
  const auto d = c.d_model;
  MEDParams p;
  p.add("img.patch.w", normal_tensor({c.patch_dim(), d}, rng, normal));
  p.add("img.patch.b", Tensor::zeros({d}));
  p.add("img.cls", normal_tensor({1, d}, rng, normal));
  p.add("img.pos", normal_tensor({c.image_tokens(), d}, rng, normal));
  p.add("txt.tok", normal_tensor({c.vocab_size, d}, rng, normal));
  p.add("txt.pos", normal_tensor({c.max_len, d}, rng, normal));
  add_stack_params(p, kImageStack, false, c, rng, normal);
  add_stack_params(p, kTextStack, false, c, rng, normal);
  add_stack_params(p, kFusedStack, true, c, rng, normal);
  add_stack_params(p, kDecoderStack, true, c, rng, normal);
  p.add("itc.img.w", normal_tensor({d, c.proj_dim}, rng, normal));
  p.add("itc.txt.w", normal_tensor({d, c.proj_dim}, rng, normal));
  p.add("itm.w", normal_tensor({d, 1}, rng, normal));
  p.add("itm.b", Tensor::zeros({1}));
  p.add("nlvr.w", normal_tensor({d, 1}, rng, normal));
  p.add("nlvr.b", Tensor::zeros({1}));
  p.add("lm.w", normal_tensor({d, c.vocab_size}, rng, normal));
  p.add("lm.b", Tensor::zeros({c.vocab_size}));
  p.add("temp", Tensor::full({1}, c.temperature_init));
  return p;
}

std::size_t MEDParams::total_elements() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

bool MEDParams::contains(std::string_view name) const { return index_.contains(std::string(name)); }

std::size_t MEDParams::index_of(std::string_view name) const {
  const auto it = index_.find(std::string(name));
  if (it == index_.end()) throw Error(Errc::InvalidArgument, "no parameter named " + std::string(name));
  return it->second;
}

const Tensor& MEDParams::operator[](std::string_view name) const { return tensors_[index_of(name)]; }

void MEDParams::add(std::string name, Tensor value) {
  if (index_.contains(name)) throw Error(Errc::InvalidArgument, "duplicate parameter " + name);
  index_.emplace(name, tensors_.size());
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(value));
}

void MEDParams::set(std::size_t i, Tensor value) {
  if (value.shape() != tensors_.at(i).shape())
    throw Error(Errc::ShapeMismatch, "parameter " + names_[i] + " expects " +
                                         shape_str(tensors_[i].shape()));
  tensors_[i] = std::move(value);
}

MEDParams MEDParams::bind(Tape& tape) const {
  MEDParams out = *this;
  for (auto& t : out.tensors_) t = tape.watch(t);
  return out;
}

std::size_t expected_parameter_count(const MEDConfig& c) {
  const auto d = c.d_model, f = c.ffn_dim;
  const auto attn = 4 * (d * d + d);
  const auto block = 2 * d + attn + 2 * d + d * f + f + f * d + d;
  const auto cross = 2 * d + attn;
  const auto plain_stack = c.n_layers * block + 2 * d;
  const auto cross_stack = c.n_layers * (block + cross) + 2 * d;
  return c.patch_dim() * d + d + d + c.image_tokens() * d  // image embedding
         + c.vocab_size * d + c.max_len * d                // text embedding
         + 2 * plain_stack + 2 * cross_stack               //
         + 2 * d * c.proj_dim                              // contrastive heads
         + 2 * (d + 1)                                     // matching + statement heads
         + d * c.vocab_size + c.vocab_size                 // language-model head
         + 1;                                              // temperature
}

TextBatch TextBatch::pack(std::span<const TokenSequence> seqs, TokenId role, std::size_t max_len) {
  if (seqs.empty()) throw Error(Errc::EmptyBatch, "no sequences to pack");
  TextBatch out;
  out.batch = seqs.size();
  for (const auto& s : seqs) {
    if (s.empty() || s[0] != role)
      throw Error(Errc::MissingRoleToken, "sequence must start with token id " + std::to_string(role));
    if (s.size() > max_len)
      throw Error(Errc::TooLong, std::to_string(s.size()) + " tokens exceed " + std::to_string(max_len));
    out.len = std::max(out.len, s.size());
    out.lengths.push_back(s.size());
  }
  out.ids.assign(out.batch * out.len, tok::kPad);
  for (std::size_t b = 0; b < seqs.size(); ++b)
    std::copy(seqs[b].ids.begin(), seqs[b].ids.end(), out.ids.begin() + b * out.len);
  return out;
}

Tensor multi_head_attention(const Tensor& query_states, const Tensor& kv_states,
                            const MEDParams& p, const std::string& prefix,
                            const AttentionLayout& layout) {
  const auto q = linear(query_states, p, prefix + ".q");
  const auto k = linear(kv_states, p, prefix + ".k");
  const auto v = linear(kv_states, p, prefix + ".v");
  return linear(attention(q, k, v, layout), p, prefix + ".o");
}

Tensor encode_images(std::span<const Image* const> images, const MEDParams& p,
                     const MEDConfig& c) {
  if (images.empty()) throw Error(Errc::EmptyBatch, "no images to encode");
  const auto n = images.size(), np = c.n_patches(), tokens = c.image_tokens();
  const Tensor patches({n * np, c.patch_dim()}, extract_patches(images, c));
  const auto embedded = linear(patches, p, "img.patch");
  // Row 0 of the concatenation is the shared [CLS]; patch row r sits at r + 1.
  const auto pool = concat_rows(std::vector<Tensor>{p["img.cls"], embedded});
  std::vector<TokenId> order, positions;
  order.reserve(n * tokens);
  positions.reserve(n * tokens);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t t = 0; t < tokens; ++t) {
      order.push_back(t == 0 ? 0 : static_cast<TokenId>(1 + b * np + (t - 1)));
      positions.push_back(static_cast<TokenId>(t));
    }
  }
  auto x = add(gather_rows(pool, order), gather_rows(p["img.pos"], positions));
  AttentionLayout layout;
  layout.batch = n;
  layout.q_len = tokens;
  layout.k_len = tokens;
  layout.n_heads = c.n_heads;
  return run_stack(std::move(x), kImageStack, p, c, layout, nullptr);
}

Tensor encode_texts(const TextBatch& text, const MEDParams& p, const MEDConfig& c) {
  return run_stack(embed_text(text, p), kTextStack, p, c, self_layout(text, c.n_heads, false),
                   nullptr);
}

Tensor encode_multimodal(const TextBatch& text, const Tensor& image_states,
                         std::span<const std::size_t> image_of, const MEDParams& p,
                         const MEDConfig& c) {
  const auto cross = cross_input(text, image_states, image_of, c);
  return run_stack(embed_text(text, p), kFusedStack, p, c, self_layout(text, c.n_heads, false),
                   &cross);
}

Tensor decode(const TextBatch& text, const Tensor& image_states,
              std::span<const std::size_t> image_of, const MEDParams& p, const MEDConfig& c) {
  const auto cross = cross_input(text, image_states, image_of, c);
  const auto h = run_stack(embed_text(text, p), kDecoderStack, p, c,
                           self_layout(text, c.n_heads, true), &cross);
  return linear(h, p, "lm");
}

Tensor encode_image(const Image& image, const MEDParams& p, const MEDConfig& c) {
  const Image* one[] = {&image};
  return encode_images(one, p, c);
}

Tensor encode_text(const TokenSequence& tokens, const MEDParams& p, const MEDConfig& c) {
  return encode_texts(TextBatch::pack({&tokens, 1}, tok::kCls, c.max_len), p, c);
}

Tensor encode_multimodal(const TokenSequence& tokens, const Tensor* image_states,
                         const MEDParams& p, const MEDConfig& c) {
  const auto text = TextBatch::pack({&tokens, 1}, tok::kEnc, c.max_len);
  if (!image_states) throw Error(Errc::MissingImage, "grounded encoder needs image states");
  const std::size_t image_of[] = {0};
  return encode_multimodal(text, *image_states, image_of, p, c);
}

Tensor decode_step(const TokenSequence& prefix, const Tensor* image_states, const MEDParams& p,
                   const MEDConfig& c) {
  const auto text = TextBatch::pack({&prefix, 1}, tok::kDec, c.max_len);
  if (!image_states) throw Error(Errc::MissingImage, "decoder needs image states");
  const std::size_t image_of[] = {0};
  return decode(text, *image_states, image_of, p, c);
}

Tensor leading_rows(const Tensor& states, std::size_t batch, std::size_t len) {
  std::vector<TokenId> rows(batch);
  for (std::size_t b = 0; b < batch; ++b) rows[b] = static_cast<TokenId>(b * len);
  return gather_rows(states, rows);
}

Tensor image_embeddings(const Tensor& cls_rows, const MEDParams& p) {
  return l2_normalize_rows(matmul(cls_rows, p["itc.img.w"]));
}

Tensor text_embeddings(const Tensor& cls_rows, const MEDParams& p) {
  return l2_normalize_rows(matmul(cls_rows, p["itc.txt.w"]));
}

Tensor itm_logits(const Tensor& fused_rows, const MEDParams& p) {
  return linear(fused_rows, p, "itm");
}

Tensor statement_logits(const Tensor& fused_rows, const MEDParams& p) {
  return linear(fused_rows, p, "nlvr");
}

}  // namespace nv
