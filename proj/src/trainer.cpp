#include "nv/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "json.hpp"
#include "nv/error.hpp"

namespace nv {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr float kMaskedSimilarity = -1e30f;

std::size_t pick(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[pick(rng, i)]);
}

bool starts_with(const std::string& s, std::string_view prefix) {
  return s.compare(0, prefix.size(), prefix) == 0;
}

// Parameters each stage may update; the rest stay exactly as loaded.
std::vector<bool> trainable_mask(const MEDParams& p, Stage stage) {
  std::vector<std::string_view> prefixes;
  switch (stage) {
    case Stage::Pretrain:
    case Stage::Distill:
      prefixes = {"img.", "txt.", "img_enc.", "txt_enc.", "mm_enc.", "dec.", "itc.", "itm.", "lm.", "temp"};
      break;
    case Stage::FinetuneCaption:
    case Stage::FinetuneVqa:
      prefixes = {"img.", "txt.", "img_enc.", "dec.", "lm."};
      break;
    case Stage::FinetuneNlvr:
      prefixes = {"img.", "txt.", "img_enc.", "mm_enc.", "nlvr."};
      break;
  }
  std::vector<bool> mask(p.count());
  for (std::size_t i = 0; i < p.count(); ++i)
    mask[i] = std::any_of(prefixes.begin(), prefixes.end(),
                          [&](auto pre) { return starts_with(p.names()[i], pre); });
  return mask;
}

// One training example after augmentation.
struct Example {
  Image image;
  std::string text;     // caption, question, or statement
  std::string answer;   // VQA only
  bool truth = false;   // statements only
  SceneSpec spec;       // after augmentation
};

struct ExampleRef {
  std::size_t scene = 0;
  std::size_t item = 0;  // QA or statement index
};

std::vector<ExampleRef> enumerate_examples(const CorpusSplit& split, Stage stage) {
  std::vector<ExampleRef> out;
  for (std::size_t s = 0; s < split.records.size(); ++s) {
    const auto& r = split.records[s];
    if (stage == Stage::FinetuneVqa)
      for (std::size_t q = 0; q < r.qa.size(); ++q) out.push_back({s, q});
    else if (stage == Stage::FinetuneNlvr)
      for (std::size_t q = 0; q < r.statements.size(); ++q) out.push_back({s, q});
    else
      out.push_back({s, 0});
  }
  return out;
}

// Labels are re-derived from the (possibly flipped) spec.
Example materialize(const CorpusSplit& split, const ExampleRef& ref, Stage stage,
                    AugmentPolicy policy, std::mt19937_64& rng) {
  const auto& r = split.records[ref.scene];
  const auto& image = split.images[ref.scene];
  Example ex;
  auto [img, spec] = std::pair{image, r.spec};
  bool changed = false;
  if (policy == AugmentPolicy::HFlip && pick(rng, 2) == 1) {
    std::tie(img, spec) = augment(image, r.spec, policy, 0);
    changed = true;
  } else if (policy == AugmentPolicy::Jitter) {
    img = augment(image, r.spec, policy, rng()).first;
  }
  ex.image = std::move(img);
  ex.spec = spec;
  switch (stage) {
    case Stage::FinetuneVqa:
      ex.text = r.qa[ref.item].question;
      ex.answer = changed ? answer_from_spec(spec, ex.text) : r.qa[ref.item].answer;
      break;
    case Stage::FinetuneNlvr:
      ex.text = r.statements[ref.item].text;
      ex.truth = changed ? statement_holds(spec, ex.text) : r.statements[ref.item].truth;
      break;
    default:
      ex.text = changed ? caption_of(spec, spec.seed) : r.caption;
  }
  return ex;
}

// Encodes each distinct image once; image_of maps examples to rows blocks.
Tensor encode_example_images(const std::vector<Example>& batch, const MEDParams& p,
                             const MEDConfig& c, std::vector<std::size_t>& image_of) {
  std::vector<const Image*> unique;
  image_of.clear();
  for (const auto& ex : batch) {
    std::size_t k = 0;
    while (k < unique.size() && !(*unique[k] == ex.image)) ++k;
    if (k == unique.size()) unique.push_back(&ex.image);
    image_of.push_back(k);
  }
  return encode_images(unique, p, c);
}

Tensor caption_lm_loss(const MEDParams& p, const MEDConfig& c, const Vocabulary& vocab,
                       const std::vector<Example>& batch) {
  std::vector<std::size_t> image_of;
  const auto states = encode_example_images(batch, p, c, image_of);
  std::vector<TokenSequence> seqs;
  for (const auto& ex : batch)
    seqs.push_back(make_sequence(tok::kDec, vocab.tokenize(ex.text), true, c.max_len));
  const auto text = TextBatch::pack(seqs, tok::kDec, c.max_len);
  return lm_loss(decode(text, states, image_of, p, c), text);
}

Tensor vqa_lm_loss(const MEDParams& p, const MEDConfig& c, const Vocabulary& vocab,
                   const std::vector<Example>& batch) {
  std::vector<std::size_t> image_of;
  const auto states = encode_example_images(batch, p, c, image_of);
  std::vector<TokenSequence> seqs;
  for (const auto& ex : batch)
    seqs.push_back(make_vqa_sequence(vocab.tokenize(ex.text), vocab.tokenize(ex.answer), c.max_len));
  const auto text = TextBatch::pack(seqs, tok::kDec, c.max_len);
  return lm_loss(decode(text, states, image_of, p, c), text);
}

Tensor statement_loss(const MEDParams& p, const MEDConfig& c, const Vocabulary& vocab,
                      const std::vector<Example>& batch) {
  std::vector<std::size_t> image_of;
  const auto states = encode_example_images(batch, p, c, image_of);
  std::vector<TokenSequence> seqs;
  std::vector<float> labels;
  for (const auto& ex : batch) {
    seqs.push_back(make_sequence(tok::kEnc, vocab.tokenize(ex.text), false, c.max_len));
    labels.push_back(ex.truth ? 1.0f : 0.0f);
  }
  const auto text = TextBatch::pack(seqs, tok::kEnc, c.max_len);
  const auto fused = encode_multimodal(text, states, image_of, p, c);
  return bce_logits(statement_logits(leading_rows(fused, batch.size(), text.len), p), labels);
}

// KD over the decoder rows that hold real tokens.
Tensor distill_loss(const MEDParams& student, const MEDConfig& sc, const Checkpoint& teacher,
                    const Vocabulary& vocab, const std::vector<Example>& batch, float temperature) {
  std::vector<std::size_t> image_of;
  const auto s_states = encode_example_images(batch, student, sc, image_of);
  const auto t_states = encode_example_images(batch, teacher.params, teacher.config, image_of);
  std::vector<TokenSequence> seqs;
  for (const auto& ex : batch)
    seqs.push_back(make_sequence(tok::kDec, vocab.tokenize(ex.text), true,
                                 std::min(sc.max_len, teacher.config.max_len)));
  const auto text = TextBatch::pack(seqs, tok::kDec, sc.max_len);
  std::vector<TokenId> live;
  for (std::size_t b = 0; b < text.batch; ++b)
    for (std::size_t t = 0; t < text.lengths[b]; ++t) live.push_back(static_cast<TokenId>(b * text.len + t));
  const auto s_logits = gather_rows(decode(text, s_states, image_of, student, sc), live);
  const auto t_logits = gather_rows(decode(text, t_states, image_of, teacher.params, teacher.config), live);
  return kd_loss(s_logits, t_logits.detach(), temperature);
}

double value(const Tensor& t) { return static_cast<double>(t.item()); }

MEDConfig model_from_json(const json& j, MEDConfig c) {
  for (const auto& [key, v] : j.items()) {
    if (key == "d_model") c.d_model = v;
    else if (key == "n_heads") c.n_heads = v;
    else if (key == "n_layers") c.n_layers = v;
    else if (key == "ffn_dim") c.ffn_dim = v;
    else if (key == "vocab_size") c.vocab_size = v;
    else if (key == "max_len") c.max_len = v;
    else if (key == "image_size") c.image_size = v;
    else if (key == "patch_size") c.patch_size = v;
    else if (key == "proj_dim") c.proj_dim = v;
    else if (key == "temperature_init") c.temperature_init = v;
    else if (key == "seed") c.seed = v;
    else throw Error(Errc::ConfigError, "unknown model key \"" + key + "\"");
  }
  return c;
}

}  // namespace

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::Pretrain: return "pretrain";
    case Stage::FinetuneCaption: return "finetune-caption";
    case Stage::FinetuneVqa: return "finetune-vqa";
    case Stage::FinetuneNlvr: return "finetune-nlvr";
    case Stage::Distill: return "distill";
  }
  return "?";
}

Stage parse_stage(std::string_view name) {
  for (auto s : {Stage::Pretrain, Stage::FinetuneCaption, Stage::FinetuneVqa, Stage::FinetuneNlvr,
                 Stage::Distill})
    if (to_string(s) == name) return s;
  throw Error(Errc::ConfigError, "unknown stage \"" + std::string(name) + "\"");
}

void adamw_step(MEDParams& params, std::span<const Tensor> grads, AdamState& state,
                const AdamWConfig& cfg, const std::vector<bool>& trainable) {
  if (grads.size() != params.count()) throw Error(Errc::ShapeMismatch, "one gradient per parameter required");
  if (state.empty()) state = AdamState::zeros_like(params);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != params.at(i).size())
      throw Error(Errc::ShapeMismatch, "gradient for " + params.names()[i] + " has the wrong size");
    for (float g : grads[i].data())
      if (!std::isfinite(g))
        throw Error(Errc::NaNGradient, "non-finite gradient in " + params.names()[i] + " at step " +
                                           std::to_string(state.step + 1));
  }
  ++state.step;
  const double t = double(state.step);
  const double bc1 = 1.0 - std::pow(double(cfg.beta1), t);
  const double bc2 = 1.0 - std::pow(double(cfg.beta2), t);
  for (std::size_t i = 0; i < params.count(); ++i) {
    if (!trainable.empty() && !trainable[i]) continue;
    const auto& p = params.at(i);
    auto w = p.to_vector();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto g = grads[i].data();
    const float decay = p.rank() == 2 ? 1.0f - cfg.lr * cfg.weight_decay : 1.0f;
    for (std::size_t k = 0; k < w.size(); ++k) {
      w[k] *= decay;
      m[k] = cfg.beta1 * m[k] + (1.0f - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0f - cfg.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1, vhat = v[k] / bc2;
      w[k] = static_cast<float>(w[k] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
    if (params.names()[i] == "temp")
      for (auto& x : w) x = std::clamp(x, kTemperatureMin, kTemperatureMax);
    params.set(i, Tensor(p.shape(), std::move(w)));
  }
}

void adamw_step(MEDParams& params, std::span<const Tensor> grads, AdamState& state,
                const AdamWConfig& cfg) {
  adamw_step(params, grads, state, cfg, {});
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(Errc::ConfigError, m); };
  if (steps == 0) fail("steps must be >= 1");
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (stage == Stage::Pretrain && batch_size < 2)
    fail("pretraining needs batch_size >= 2 to mine ITM negatives");
  if (!(optim.lr >= 0.0f) || !(optim.weight_decay >= 0.0f)) fail("lr and weight_decay must be >= 0");
  if (!(optim.beta1 >= 0.0f && optim.beta1 < 1.0f && optim.beta2 >= 0.0f && optim.beta2 < 1.0f))
    fail("betas must lie in [0, 1)");
  if (!(optim.eps > 0.0f)) fail("eps must be > 0");
  if (!(kd_temperature > 0.0f)) fail("kd_temperature must be > 0");
  if (corpus.empty()) fail("corpus path is required");
  const bool needs_init = stage == Stage::FinetuneCaption || stage == Stage::FinetuneVqa ||
                          stage == Stage::FinetuneNlvr;
  if (needs_init && init_checkpoint.empty()) fail(std::string(to_string(stage)) + " needs init_checkpoint");
  parse_policy(augment);
  model.validate();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  TrainConfig c;
  try {
    const auto j = json::parse(text);
    if (!j.is_object()) throw Error(Errc::ConfigError, "training config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
      if (key == "stage") c.stage = parse_stage(v.get<std::string>());
      else if (key == "steps") c.steps = v;
      else if (key == "batch_size") c.batch_size = v;
      else if (key == "lr") c.optim.lr = v;
      else if (key == "weight_decay") c.optim.weight_decay = v;
      else if (key == "betas") {
        c.optim.beta1 = v.at(0);
        c.optim.beta2 = v.at(1);
      } else if (key == "eps") c.optim.eps = v;
      else if (key == "loss_weights") {
        c.weights.itc = v.value("itc", 1.0f);
        c.weights.itm = v.value("itm", 1.0f);
        c.weights.lm = v.value("lm", 1.0f);
      } else if (key == "seed") c.seed = v;
      else if (key == "augment") c.augment = v.get<std::string>();
      else if (key == "corpus") c.corpus = v.get<std::string>();
      else if (key == "init_checkpoint") c.init_checkpoint = v.get<std::string>();
      else if (key == "output_checkpoint") c.output_checkpoint = v.get<std::string>();
      else if (key == "metrics_log") c.metrics_log = v.get<std::string>();
      else if (key == "teacher_checkpoint") c.teacher_checkpoint = v.get<std::string>();
      else if (key == "model") c.model = model_from_json(v, c.model);
      else if (key == "kd_temperature") c.kd_temperature = v;
      else throw Error(Errc::ConfigError, "unknown config key \"" + key + "\"");
    }
  } catch (const json::exception& e) {
    throw Error(Errc::ConfigError, std::string("bad training config: ") + e.what());
  }
  return c;
}

TrainConfig TrainConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IOError, "cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  auto c = from_json(ss.str());
  // Relative paths are taken relative to the config file.
  const auto base = path.parent_path();
  for (auto* p : {&c.corpus, &c.init_checkpoint, &c.output_checkpoint, &c.metrics_log,
                  &c.teacher_checkpoint})
    if (!p->empty() && p->is_relative()) *p = base / *p;
  return c;
}

std::string to_json_line(const StepMetrics& m, Stage stage) {
  json j;
  j["step"] = m.step;
  j["itc"] = m.itc;
  j["itm"] = m.itm;
  j["lm"] = m.lm;
  if (stage == Stage::FinetuneNlvr) j["statement"] = m.aux;
  if (stage == Stage::Distill) j["kd"] = m.aux;
  j["total"] = m.total;
  return j.dump();
}

PretrainLosses pretrain_losses(const MEDParams& p, const MEDConfig& c, const Vocabulary& vocab,
                               std::span<const Image* const> images,
                               std::span<const std::string> captions,
                               std::span<const SceneSpec> specs) {
  const auto n = images.size();
  if (n < 2 || captions.size() != n || (!specs.empty() && specs.size() != n))
    throw Error(Errc::EmptyBatch, "pretraining needs >= 2 aligned image-caption pairs");
  auto describes = [&](std::size_t i, std::size_t j) {
    return captions[i] == captions[j] || (!specs.empty() && caption_holds(specs[i], captions[j]));
  };
  const auto img_states = encode_images(images, p, c);

  std::vector<TokenSequence> cls, enc, dec;
  for (const auto& cap : captions) {
    const auto words = vocab.tokenize(cap);
    cls.push_back(make_sequence(tok::kCls, words, false, c.max_len));
    enc.push_back(make_sequence(tok::kEnc, words, false, c.max_len));
    dec.push_back(make_sequence(tok::kDec, words, true, c.max_len));
  }
  const auto cls_batch = TextBatch::pack(cls, tok::kCls, c.max_len);
  const auto txt_states = encode_texts(cls_batch, p, c);
  const auto itc = itc_loss({image_embeddings(leading_rows(img_states, n, c.image_tokens()), p),
                             text_embeddings(leading_rows(txt_states, n, cls_batch.len), p), p["temp"]});

  auto sim = itc.similarity.to_vector();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && describes(i, j)) sim[i * n + j] = kMaskedSimilarity;
  const auto pairs = select_hard_negatives(Tensor({n, n}, std::move(sim)));
  std::vector<TokenSequence> pair_text;
  std::vector<std::size_t> pair_image;
  std::vector<bool> matched;
  for (const auto& pr : pairs) {
    pair_text.push_back(enc[pr.text]);
    pair_image.push_back(pr.image);
    matched.push_back(describes(pr.image, pr.text));
  }
  const auto enc_batch = TextBatch::pack(pair_text, tok::kEnc, c.max_len);
  const auto fused = encode_multimodal(enc_batch, img_states, pair_image, p, c);
  const auto itm = itm_loss(leading_rows(fused, pairs.size(), enc_batch.len), matched, p);

  const auto dec_batch = TextBatch::pack(dec, tok::kDec, c.max_len);
  std::vector<std::size_t> identity(n);
  for (std::size_t i = 0; i < n; ++i) identity[i] = i;
  const auto lm = lm_loss(decode(dec_batch, img_states, identity, p, c), dec_batch);
  return {itc.loss, itm, lm};
}

TrainResult train(const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  const auto split = load_split(cfg.corpus, "train");
  if (split.records.empty()) throw Error(Errc::EmptySplit, "training split is empty");
  const auto vocab = load_corpus_vocab(cfg.corpus);
  const auto policy = parse_policy(cfg.augment);

  std::optional<Checkpoint> teacher;
  if (cfg.stage == Stage::Distill) {
    if (cfg.teacher_checkpoint.empty() || !fs::is_regular_file(cfg.teacher_checkpoint))
      throw Error(Errc::MissingTeacher, "distillation needs a teacher checkpoint");
    teacher = load_checkpoint(cfg.teacher_checkpoint);
  }

  Checkpoint ck;
  if (!cfg.init_checkpoint.empty()) {
    ck = load_checkpoint(cfg.init_checkpoint);
  } else {
    auto model = cfg.model;
    model.vocab_size = vocab.size();
    ck = Checkpoint::fresh(model);
    ck.vocab = vocab;
  }
  if (ck.vocab.tokens() != vocab.tokens())
    throw Error(Errc::ConfigError, "checkpoint vocabulary differs from the corpus vocabulary");
  if (teacher && teacher->vocab.tokens() != vocab.tokens())
    throw Error(Errc::ConfigError, "teacher vocabulary differs from the corpus vocabulary");
  ck.optimizer = AdamState::zeros_like(ck.params);
  ck.stage = std::string(to_string(cfg.stage));
  ck.corpus_fingerprint = corpus_fingerprint(cfg.corpus);
  const auto mask = trainable_mask(ck.params, cfg.stage);

  const auto examples = enumerate_examples(split, cfg.stage);
  const bool drop_partial = cfg.stage == Stage::Pretrain;
  if (drop_partial && examples.size() < cfg.batch_size)
    throw Error(Errc::ConfigError, "batch_size " + std::to_string(cfg.batch_size) + " exceeds the " +
                                       std::to_string(examples.size()) + " training scenes");

  std::ofstream log_file;
  if (!cfg.metrics_log.empty()) {
    log_file.open(cfg.metrics_log, std::ios::trunc);
    if (!log_file) throw Error(Errc::IOError, "cannot write metrics log " + cfg.metrics_log.string());
  }

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(examples.size());
  std::size_t cursor = order.size();
  TrainResult result;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const auto remaining = order.size() - cursor;
    if (cursor >= order.size() || (drop_partial && remaining < cfg.batch_size)) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      shuffle(order, rng);
      cursor = 0;
    }
    const auto take = std::min(cfg.batch_size, order.size() - cursor);
    std::vector<Example> batch;
    for (std::size_t k = 0; k < take; ++k)
      batch.push_back(materialize(split, examples[order[cursor + k]], cfg.stage, policy, rng));
    cursor += take;

    Tape tape;
    const auto p = ck.params.bind(tape);
    StepMetrics m;
    m.step = step;
    Tensor loss;
    switch (cfg.stage) {
      case Stage::Pretrain: {
        std::vector<const Image*> imgs;
        std::vector<std::string> caps;
        std::vector<SceneSpec> specs;
        for (const auto& ex : batch) {
          imgs.push_back(&ex.image);
          caps.push_back(ex.text);
          specs.push_back(ex.spec);
        }
        const auto parts = pretrain_losses(p, ck.config, vocab, imgs, caps, specs);
        loss = joint_loss(parts.itc, parts.itm, parts.lm, cfg.weights);
        m.itc = value(parts.itc);
        m.itm = value(parts.itm);
        m.lm = value(parts.lm);
        break;
      }
      case Stage::FinetuneCaption:
        loss = caption_lm_loss(p, ck.config, vocab, batch);
        m.lm = value(loss);
        break;
      case Stage::FinetuneVqa:
        loss = vqa_lm_loss(p, ck.config, vocab, batch);
        m.lm = value(loss);
        break;
      case Stage::FinetuneNlvr:
        loss = statement_loss(p, ck.config, vocab, batch);
        m.aux = value(loss);
        break;
      case Stage::Distill:
        loss = distill_loss(p, ck.config, *teacher, vocab, batch, cfg.kd_temperature);
        m.aux = value(loss);
        break;
    }
    m.total = value(loss);
    if (!std::isfinite(m.total))
      throw Error(Errc::NaNGradient, "non-finite loss at step " + std::to_string(step));

    const auto grads = backward(tape, loss);
    std::vector<Tensor> aligned;
    aligned.reserve(p.count());
    for (std::size_t i = 0; i < p.count(); ++i) aligned.push_back(grads.at(*p.at(i).node()));
    adamw_step(ck.params, aligned, ck.optimizer, cfg.optim, mask);

    ++ck.step;
    result.log.push_back(m);
    if (log_file) log_file << to_json_line(m, cfg.stage) << '\n' << std::flush;
    if (on_step) on_step(m);
  }
  if (cfg.stage == Stage::FinetuneNlvr) ck.statement_head_trained = true;
  if (!cfg.output_checkpoint.empty()) save_checkpoint(ck, cfg.output_checkpoint);
  result.checkpoint = std::move(ck);
  return result;
}

}  // namespace nv
