#include <cmath>
#include <numeric>
#include <optional>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "test_util.hpp"
#include "nv/error.hpp"
#include "nv/objectives.hpp"

using namespace nv;
using nv::testing::check_gradients;
using nv::testing::code_of;
using nv::testing::random_tensor;

namespace {

Tensor unit_rows(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::vector<float> v(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += double(v[i * d + j] = g(rng)) * v[i * d + j];
    for (std::size_t j = 0; j < d; ++j) v[i * d + j] = float(v[i * d + j] / std::sqrt(s));
  }
  return Tensor({n, d}, v);
}

// Symmetric InfoNCE written out in double.
double itc_oracle(const Tensor& img, const Tensor& txt, double tau) {
  const auto n = img.rows(), d = img.cols();
  std::vector<double> s(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < d; ++k) acc += double(img.at(i, k)) * txt.at(j, k);
      s[i * n + j] = acc / tau;
    }
  double rows = 0, cols = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double zr = 0, zc = 0;
    for (std::size_t j = 0; j < n; ++j) {
      zr += std::exp(s[i * n + j]);
      zc += std::exp(s[j * n + i]);
    }
    rows += std::log(zr) - s[i * n + i];
    cols += std::log(zc) - s[i * n + i];
  }
  return 0.5 * (rows + cols) / double(n);
}

MEDParams with_tensors(const MEDParams& base, std::span<const Tensor> ts) {
  auto p = base;
  for (std::size_t i = 0; i < ts.size(); ++i) p.set(i, ts[i]);
  return p;
}

Image random_image(std::uint64_t seed, std::size_t size) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img = Image::filled(size, size, 0.0f);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

}  // namespace

TEST_CASE("itc_loss examples") {
  const auto temp = Tensor::full({1}, 0.07f);
  SUBCASE("single pair is zero") {
    std::mt19937_64 rng(1);
    const auto r = itc_loss({unit_rows(1, 8, rng), unit_rows(1, 8, rng), temp});
    CHECK(r.loss.item() == 0.0f);
    CHECK(r.similarity.shape() == Shape{1, 1});
  }
  SUBCASE("identical rows give ln N") {
    std::mt19937_64 rng(2);
    for (std::size_t n : {2u, 5u, 16u}) {
      const auto a = unit_rows(1, 8, rng), b = unit_rows(1, 8, rng);
      std::vector<float> ia, ib;
      for (std::size_t i = 0; i < n; ++i) {
        ia.insert(ia.end(), a.data().begin(), a.data().end());
        ib.insert(ib.end(), b.data().begin(), b.data().end());
      }
      const auto r = itc_loss({Tensor({n, 8}, ia), Tensor({n, 8}, ib), temp});
      CHECK(r.loss.item() == doctest::Approx(std::log(double(n))).epsilon(1e-6));
    }
  }
  SUBCASE("random unit vectors average near ln 16") {
    double total = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      std::mt19937_64 rng(seed);
      total += itc_loss({unit_rows(16, 32, rng), unit_rows(16, 32, rng), Tensor::full({1}, 1.0f)})
                   .loss.item();
    }
    CHECK(std::abs(total / 100 - std::log(16.0)) <= 0.1 * std::log(16.0));
  }
  SUBCASE("matches the double-precision formula") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      const auto img = unit_rows(6, 8, rng), txt = unit_rows(6, 8, rng);
      const auto r = itc_loss({img, txt, temp});
      CHECK(r.loss.item() == doctest::Approx(itc_oracle(img, txt, 0.07f)).epsilon(1e-5));
      double dot = 0;
      for (std::size_t k = 0; k < 8; ++k) dot += double(img.at(2, k)) * txt.at(4, k);
      CHECK(r.similarity.at(2, 4) == doctest::Approx(dot).epsilon(1e-6));
    }
  }
  CHECK(code_of([&] { itc_loss({Tensor{}, Tensor{}, temp}); }) ==
        Errc::EmptyBatch);
  CHECK(code_of([&] { itc_loss({Tensor::zeros({2, 8}), Tensor::zeros({3, 8}), temp}); }) ==
        Errc::ShapeMismatch);
}

TEST_CASE("itc_loss properties") {
  std::mt19937_64 rng(4);
  const auto temp = Tensor::full({1}, 0.1f);
  for (int trial = 0; trial < 30; ++trial) {
    const auto img = unit_rows(5, 8, rng), txt = unit_rows(5, 8, rng);
    const float base = itc_loss({img, txt, temp}).loss.item();
    CHECK(base >= 0.0f);
    std::vector<std::int32_t> perm(5);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const float permuted =
        itc_loss({gather_rows(img, perm), gather_rows(txt, perm), temp}).loss.item();
    CHECK(permuted == doctest::Approx(base).epsilon(1e-5));
  }
  // Perfectly separated pairs approach zero.
  std::vector<float> eye(16, 0.0f);
  for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0f;
  const Tensor e({4, 4}, eye);
  CHECK(itc_loss({e, e, Tensor::full({1}, 0.01f)}).loss.item() < 1e-6);
}

TEST_CASE("itc_loss gradients") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto report = check_gradients(
        {random_tensor({4, 6}, rng), random_tensor({4, 6}, rng), Tensor::full({1}, 0.3f)},
        [](std::span<const Tensor> in) {
          return itc_loss({l2_normalize_rows(in[0]), l2_normalize_rows(in[1]), in[2]}).loss;
        });
    CHECK(report.max_rel_error < 1e-3);
  }
}

TEST_CASE("select_hard_negatives") {
  SUBCASE("matches an exhaustive scan") {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t n = 2 + trial % 7;
      auto sim = random_tensor({n, n}, rng);
      auto data = sim.to_vector();
      for (std::size_t i = 0; i < n; ++i) data[i * n + i] = 5.0f;
      sim = Tensor({n, n}, data);
      const auto pairs = select_hard_negatives(sim);
      REQUIRE(pairs.size() == 3 * n);
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t bt = n, bi = n;
        for (std::size_t j = 0; j < n; ++j) {
          if (j == i) continue;
          if (bt == n || data[i * n + j] > data[i * n + bt]) bt = j;
          if (bi == n || data[j * n + i] > data[bi * n + i]) bi = j;
        }
        CHECK(pairs[3 * i] == ItmPair{i, i, true});
        CHECK(pairs[3 * i + 1] == ItmPair{i, bt, false});
        CHECK(pairs[3 * i + 2] == ItmPair{bi, i, false});
      }
      for (const auto& p : pairs)
        if (!p.match) CHECK(p.image != p.text);
    }
  }
  SUBCASE("two items are each other's negative") {
    const auto pairs = select_hard_negatives(Tensor({2, 2}, {1, 0.5f, 0.2f, 1}));
    CHECK(pairs == std::vector<ItmPair>{{0, 0, true}, {0, 1, false}, {1, 0, false},
                                        {1, 1, true}, {1, 0, false}, {0, 1, false}});
  }
  SUBCASE("ties go to the lowest index") {
    std::vector<float> s(16, 0.0f);
    s[0 * 4 + 1] = 0.7f;
    s[0 * 4 + 3] = 0.7f;
    s[1 * 4 + 0] = 0.4f;
    s[3 * 4 + 0] = 0.4f;
    const auto pairs = select_hard_negatives(Tensor({4, 4}, s));
    CHECK(pairs[1] == ItmPair{0, 1, false});
    CHECK(pairs[2] == ItmPair{1, 0, false});
  }
  CHECK(code_of([] { select_hard_negatives(Tensor({1, 1}, {1})); }) == Errc::EmptyBatch);
  CHECK(code_of([] { select_hard_negatives(Tensor::zeros({2, 3})); }) == Errc::ShapeMismatch);
}

TEST_CASE("itm_loss") {
  MEDConfig c{.d_model = 8, .n_heads = 2, .n_layers = 1, .ffn_dim = 16};
  auto p = MEDParams::init(c);
  // Head reads the first feature only: logit = row[0].
  std::vector<float> w(8, 0.0f);
  w[0] = 1.0f;
  p.set(p.index_of("itm.w"), Tensor({8, 1}, w));
  auto rows = [](std::vector<float> first) {
    std::vector<float> d(first.size() * 8, 0.0f);
    for (std::size_t i = 0; i < first.size(); ++i) d[i * 8] = first[i];
    return Tensor({first.size(), 8}, d);
  };
  CHECK(itm_loss(rows({0, 0, 0}), {true, false, true}, p).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK(itm_loss(rows({30, -30}), {true, false}, p).item() < 1e-9);
  const double hand = 0.5 * (std::log1p(std::exp(-1.0)) + std::log1p(std::exp(-1.0)));
  CHECK(itm_loss(rows({1, -1}), {true, false}, p).item() == doctest::Approx(hand).epsilon(1e-6));
  CHECK(code_of([&] { itm_loss(Tensor{}, {}, p); }) == Errc::EmptyBatch);
  CHECK(code_of([&] { itm_loss(rows({1, 2}), {true}, p); }) == Errc::ShapeMismatch);
}

TEST_CASE("lm_loss") {
  SUBCASE("uniform logits give ln V") {
    const auto t = TokenSequence{{tok::kDec, 10, 11, 12, tok::kEos}};
    CHECK(lm_loss(Tensor::zeros({5, 42}), t).item() == doctest::Approx(std::log(42.0)).epsilon(1e-6));
  }
  SUBCASE("targets are shifted by one") {
    TextBatch b;
    b.batch = 1;
    b.len = 3;
    b.ids = {tok::kDec, 10, 11};
    b.lengths = {3};
    CHECK(lm_targets(b) == std::vector<TokenId>{10, 11, tok::kPad});
    // Only the logit of the correct target on each live row matters.
    std::vector<float> d(3 * 42, 0.0f);
    d[0 * 42 + 10] = 3.0f;
    d[1 * 42 + 11] = 3.0f;
    d[2 * 42 + 20] = 50.0f;
    const double row = std::log(41.0 + std::exp(3.0)) - 3.0;
    CHECK(lm_loss(Tensor({3, 42}, d), TokenSequence{b.ids}).item() == doctest::Approx(row).epsilon(1e-6));
  }
  SUBCASE("pad target is ignored") {
    std::mt19937_64 rng(7);
    const auto logits = random_tensor({3, 42}, rng, -2, 2);
    const auto t = TokenSequence{{tok::kDec, 15, tok::kPad}};
    double z = 0;
    for (std::size_t j = 0; j < 42; ++j) z += std::exp(double(logits.at(0, j)));
    CHECK(lm_loss(logits, t).item() == doctest::Approx(std::log(z) - logits.at(0, 15)).epsilon(1e-6));
  }
  SUBCASE("supervision starts after the separator") {
    const std::vector<TokenId> ids{tok::kDec, 20, 21, tok::kSep, 30, tok::kEos};
    CHECK(supervision_start(ids) == 4);
    CHECK(supervision_start(std::vector<TokenId>{tok::kDec, 20}) == 1);
    TextBatch b;
    b.batch = 2;
    b.len = 6;
    b.ids = ids;
    b.ids.insert(b.ids.end(), {tok::kDec, 7, 8, tok::kPad, tok::kPad, tok::kPad});
    b.lengths = {6, 3};
    CHECK(lm_targets(b) == std::vector<TokenId>{tok::kPad, tok::kPad, tok::kPad, 30, tok::kEos,
                                                tok::kPad, 7, 8, tok::kPad, tok::kPad, tok::kPad,
                                                tok::kPad});
  }
  CHECK(code_of([] { lm_loss(Tensor::zeros({1, 42}), TokenSequence{{tok::kDec}}); }) ==
        Errc::InvalidArgument);
  CHECK(code_of([] { lm_loss(Tensor::zeros({2, 42}), TokenSequence{{tok::kDec, 9, 9}}); }) ==
        Errc::ShapeMismatch);
}

TEST_CASE("kd_loss") {
  std::mt19937_64 rng(8);
  const auto s = random_tensor({3, 5}, rng, -3, 3);
  CHECK(kd_loss(s, s, 2.0f).item() == 0.0f);

  const double p0 = 2.0 / 3.0, p1 = 1.0 / 3.0;
  const double kl = p0 * std::log(p0 / 0.5) + p1 * std::log(p1 / 0.5);
  CHECK(kd_loss(Tensor({1, 2}, {0, 0}), Tensor({1, 2}, {float(std::log(2.0)), 0}), 1.0f).item() ==
        doctest::Approx(kl).epsilon(1e-6));

  const auto t = random_tensor({3, 5}, rng, -3, 3);
  const float base = kd_loss(s, t, 1.5f).item();
  CHECK(base > 0.0f);
  CHECK(kd_loss(add_scalar(s, 4.0f), add_scalar(t, -2.5f), 1.5f).item() ==
        doctest::Approx(base).epsilon(1e-5));

  for (int trial = 0; trial < 10; ++trial) {
    const auto teacher = random_tensor({4, 6}, rng, -2, 2);
    const float temperature = 0.5f + 0.5f * trial;
    const auto report = check_gradients({random_tensor({4, 6}, rng, -2, 2)},
                                        [&](std::span<const Tensor> in) {
                                          return kd_loss(in[0], teacher, temperature);
                                        });
    CHECK(report.max_rel_error < 1e-3);
    CHECK(kd_loss(random_tensor({4, 6}, rng), teacher, temperature).item() >= 0.0f);
  }
  CHECK(code_of([&] { kd_loss(s, Tensor::zeros({3, 4}), 1.0f); }) == Errc::ShapeMismatch);
  CHECK(code_of([&] { kd_loss(s, s, 0.0f); }) == Errc::InvalidArgument);
}

TEST_CASE("joint_loss") {
  const auto a = Tensor::scalar(0.5f), b = Tensor::scalar(1.25f), c = Tensor::scalar(2.0f);
  CHECK(joint_loss(a, b, c).item() == 3.75f);
  CHECK(joint_loss(a, b, c, {0, 0, 0}).item() == 0.0f);
  CHECK(joint_loss(a, b, c, {2, 0, 1}).item() == 3.0f);
  CHECK(code_of([&] { joint_loss(Tensor::zeros({2}), b, c); }) == Errc::NotScalar);
}

TEST_CASE("full pretraining losses on a small model") {
  const MEDConfig c{.d_model = 8, .n_heads = 2, .n_layers = 2, .ffn_dim = 16, .image_size = 16,
                    .patch_size = 8, .proj_dim = 4, .temperature_init = 0.5f, .seed = 11};
  const auto base = MEDParams::init(c);
  const std::vector<Image> images{random_image(1, 16), random_image(2, 16), random_image(3, 16)};
  const std::vector<std::vector<TokenId>> words{{10, 11, 12}, {13, 14}, {15, 16, 17, 18}};

  struct Parts {
    Tensor itc, itm, lm;
    std::vector<ItmPair> pairs;
  };
  // Mining is piecewise constant in the parameters; gradient checks pass the
  // pairing found at the unperturbed point.
  auto parts = [&](const MEDParams& p, std::optional<std::vector<ItmPair>> fixed = std::nullopt) {
    std::vector<const Image*> ptrs;
    for (const auto& img : images) ptrs.push_back(&img);
    const auto img_states = encode_images(ptrs, p, c);
    std::vector<TokenSequence> cls, enc, dec;
    for (const auto& w : words) {
      cls.push_back(make_sequence(tok::kCls, TokenSequence{w}, false, c.max_len));
      enc.push_back(make_sequence(tok::kEnc, TokenSequence{w}, false, c.max_len));
      dec.push_back(make_sequence(tok::kDec, TokenSequence{w}, true, c.max_len));
    }
    const auto cls_batch = TextBatch::pack(cls, tok::kCls, c.max_len);
    const auto txt_states = encode_texts(cls_batch, p, c);
    const auto itc = itc_loss({image_embeddings(leading_rows(img_states, 3, c.image_tokens()), p),
                               text_embeddings(leading_rows(txt_states, 3, cls_batch.len), p),
                               p["temp"]});
    const auto pairs = fixed ? *fixed : select_hard_negatives(itc.similarity);
    std::vector<TokenSequence> pair_text;
    std::vector<std::size_t> pair_image;
    std::vector<bool> matched;
    for (const auto& pr : pairs) {
      pair_text.push_back(enc[pr.text]);
      pair_image.push_back(pr.image);
      matched.push_back(pr.match);
    }
    const auto enc_batch = TextBatch::pack(pair_text, tok::kEnc, c.max_len);
    const auto fused = encode_multimodal(enc_batch, img_states, pair_image, p, c);
    const auto itm = itm_loss(leading_rows(fused, pairs.size(), enc_batch.len), matched, p);
    const auto dec_batch = TextBatch::pack(dec, tok::kDec, c.max_len);
    const std::size_t identity[] = {0, 1, 2};
    const auto lm = lm_loss(decode(dec_batch, img_states, identity, p, c), dec_batch);
    return Parts{itc.loss, itm, lm, pairs};
  };

  SUBCASE("joint gradient passes the finite-difference check") {
    const auto pairs = parts(base).pairs;
    const auto report = check_gradients(
        base.tensors(),
        [&](std::span<const Tensor> ts) {
          const auto q = parts(with_tensors(base, ts), pairs);
          return joint_loss(q.itc, q.itm, q.lm);
        },
        1e-3f, 4);
    INFO("worst parameter " << base.names()[report.worst_input] << "[" << report.worst_index
                            << "] analytic " << report.analytic << " numeric " << report.numeric);
    CHECK(report.max_rel_error < 1e-3);
  }
  SUBCASE("joint gradient is the sum of component gradients") {
    Tape tape;
    const auto p = base.bind(tape);
    const auto q = parts(p);
    const auto gj = backward(tape, joint_loss(q.itc, q.itm, q.lm));
    const auto g1 = backward(tape, q.itc), g2 = backward(tape, q.itm), g3 = backward(tape, q.lm);
    double worst = 0;
    for (const auto& [node, g] : gj)
      for (std::size_t e = 0; e < g.size(); ++e)
        worst = std::max(worst, nv::testing::relative_error(
                                    g[e], double(g1.at(node)[e]) + g2.at(node)[e] + g3.at(node)[e]));
    CHECK(worst < 1e-5);
    CHECK(q.itc.item() > 0.0f);
    CHECK(q.lm.item() == doctest::Approx(std::log(42.0)).epsilon(0.05));
  }
}
