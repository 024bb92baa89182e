#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "test_util.hpp"
#include "nv/corpus.hpp"
#include "nv/error.hpp"
#include "nv/scenegen.hpp"
#include "nv/vocab.hpp"

using namespace nv;
using nv::testing::code_of;
using nv::testing::TempDir;
namespace fs = std::filesystem;

namespace {

SceneObject obj(ShapeKind s, ColorKind c, int row, int col, SizeKind size = SizeKind::Large) {
  return {s, c, row, col, size};
}

SceneSpec scene_of(std::vector<SceneObject> objs) {
  SceneSpec s;
  s.objects = std::move(objs);
  return s;
}

std::vector<std::string> words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::string swap_left_right(std::string text) {
  for (auto [from, to] : {std::pair{"left of", "@L"}, {"right of", "left of"}, {"@L", "right of"}}) {
    for (auto pos = text.find(from); pos != std::string::npos; pos = text.find(from, pos))
      text.replace(pos, std::string(from).size(), to);
  }
  return text;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}


}  // namespace

TEST_CASE("tokenizer") {
  const auto v = Vocabulary::builtin();
  CHECK(v.size() <= 64);
  CHECK(v.detokenize(v.tokenize("a large red circle").ids) == "a large red circle");
  CHECK(v.tokenize("zebra").ids == std::vector<TokenId>{tok::kUnk});
  CHECK(v.tokenize("  What COLOR is the circle? ").ids == v.tokenize("what color is the circle").ids);
  std::set<TokenId> ids;
  for (std::size_t i = tok::kNumSpecial; i < v.size(); ++i) ids.insert(v.tokenize(v.token(i)).ids.at(0));
  CHECK(ids.size() == v.size() - tok::kNumSpecial);
  CHECK(code_of([&] { v.tokenize("a a a a a", 4); }) == Errc::TooLong);
  const auto q = make_vqa_sequence(v.tokenize("where is the circle"), v.tokenize("top left"), 24);
  CHECK(q.ids.front() == tok::kDec);
  CHECK(q.ids.back() == tok::kEos);
  CHECK(q.ids[5] == tok::kSep);
  CHECK(v.detokenize(q.ids) == "where is the circle [SEP] top left");
}

TEST_CASE("vocabulary file round trip") {
  TempDir dir("vocab");
  fs::create_directories(dir.path);
  Vocabulary::builtin().save(dir.path / "v.txt");
  CHECK(Vocabulary::load(dir.path / "v.txt").tokens() == Vocabulary::builtin().tokens());
  CHECK(code_of([&] { Vocabulary::load(dir.path / "missing.txt"); }) == Errc::IOError);
}

TEST_CASE("ppm encoding") {
  Image img = Image::filled(2, 3, 0.0f);
  img.at(0, 1, 0) = 1.0f;
  img.at(1, 2, 2) = 0.5f;
  const auto bytes = encode_ppm(img);
  CHECK(bytes.substr(0, 11) == "P6\n3 2\n255\n");
  CHECK(static_cast<unsigned char>(bytes[11 + 3]) == 255);
  CHECK(static_cast<unsigned char>(bytes[11 + 17]) == 128);
  const auto back = decode_ppm(bytes);
  CHECK(back.height == 2);
  CHECK(back == quantize8(img));
  CHECK(code_of([&] { decode_ppm(bytes.substr(0, bytes.size() - 1)); }) == Errc::TruncatedFile);
  CHECK(code_of([] { decode_ppm("P3\n1 1\n255\n"); }) == Errc::ParseError);
  CHECK(code_of([] { read_ppm("/nonexistent/x.ppm"); }) == Errc::IOError);
}

TEST_CASE("generate_scene") {
  CHECK(generate_scene(42) == generate_scene(42));
  std::set<std::pair<ShapeKind, ColorKind>> combos;
  std::array<int, 4> counts{};
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const auto s = generate_scene(seed);
    validate_scene(s);
    ++counts[s.objects.size()];
    for (const auto& o : s.objects) combos.insert({o.shape, o.color});
  }
  CHECK(combos.size() == 12);
  CHECK(counts[0] == 0);
  for (int n = 1; n <= 3; ++n) CHECK(std::abs(counts[n] - 3333) < 200);
}

TEST_CASE("render_scene") {
  const auto s = scene_of({obj(ShapeKind::Circle, ColorKind::Red, 0, 1),
                           obj(ShapeKind::Triangle, ColorKind::Blue, 2, 3, SizeKind::Small),
                           obj(ShapeKind::Square, ColorKind::Yellow, 3, 0, SizeKind::Small)});
  const auto img = render_scene(s);
  CHECK(img.height == 32);
  CHECK(img.width == 32);
  for (std::size_t k = 0; k < 3; ++k) CHECK(img.at(0, 31, k) == 1.0f);
  for (const auto& o : s.objects) {
    const auto rgb = color_rgb(o.color);
    for (std::size_t k = 0; k < 3; ++k)
      CHECK(img.at(o.row * 8 + 4, o.col * 8 + 4, k) == static_cast<float>(rgb[k] / 255.0));
  }
  // Small objects stay inside the centered 4x4.
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(img.at(24, 0, k) == 1.0f);
    CHECK(img.at(16 + 1, 24 + 4, k) == 1.0f);
  }
  // Large square fills its whole cell; the circle leaves its corners white.
  const auto big = render_scene(scene_of({obj(ShapeKind::Square, ColorKind::Green, 1, 1)}));
  CHECK(big.at(8, 8, 1) == static_cast<float>(170 / 255.0));
  CHECK(big.at(15, 15, 1) == static_cast<float>(170 / 255.0));
  CHECK(img.at(0, 8, 0) == 1.0f);
  CHECK(render_scene(s) == img);
  CHECK(quantize8(img) == img);
}

TEST_CASE("captions") {
  CHECK(caption_of(scene_of({obj(ShapeKind::Circle, ColorKind::Red, 1, 1)})) == "a large red circle");
  const auto stacked = scene_of({obj(ShapeKind::Square, ColorKind::Green, 0, 2, SizeKind::Small),
                                 obj(ShapeKind::Circle, ColorKind::Blue, 3, 2)});
  CHECK(caption_of(stacked) == "a large blue circle below a small green square");
  const auto row = scene_of({obj(ShapeKind::Triangle, ColorKind::Red, 1, 0),
                             obj(ShapeKind::Circle, ColorKind::Red, 1, 3, SizeKind::Small)});
  CHECK(caption_of(row) == "a small red circle right of a large red triangle");

  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const auto s = generate_scene(seed);
    const auto c = caption_of(s, seed);
    CHECK(caption_holds(s, c));
    const auto w = words(c);
    if (s.objects.size() > 1) {
      const auto first = *std::min_element(s.objects.begin(), s.objects.end(),
                                           [](auto& a, auto& b) { return a.shape < b.shape; });
      std::vector<SceneObject> rest;
      for (const auto& o : s.objects)
        if (o.shape != first.shape) rest.push_back(o);
      const auto second = *std::min_element(rest.begin(), rest.end(),
                                            [](auto& a, auto& b) { return a.shape < b.shape; });
      if (first.row != second.row) CHECK(w[4] == (first.row < second.row ? "above" : "below"));
    }
  }
  CHECK(code_of([] { caption_holds(SceneSpec{}, "the quick fox"); }) == Errc::ParseError);
  CHECK_FALSE(caption_holds(stacked, "a large blue circle above a small green square"));
  CHECK_FALSE(caption_holds(stacked, "a small blue circle below a small green square"));
}

TEST_CASE("qa pairs") {
  const auto s = scene_of({obj(ShapeKind::Circle, ColorKind::Red, 0, 0),
                           obj(ShapeKind::Square, ColorKind::Red, 0, 3, SizeKind::Small),
                           obj(ShapeKind::Triangle, ColorKind::Green, 3, 1)});
  const auto qa = qa_pairs_of(s);
  CHECK(qa[0] == QAPair{"how many red shapes", "two", QAKind::Count});
  CHECK(qa[1] == QAPair{"what color is the circle", "red", QAKind::Color});
  CHECK(qa[2] == QAPair{"what shape is the green object", "triangle", QAKind::Shape});
  CHECK(qa[3] == QAPair{"where is the circle", "top left", QAKind::Position});
  CHECK(qa[4] == QAPair{"is the circle bigger than the square", "yes", QAKind::Compare});
  CHECK(answer_from_spec(s, "where is the triangle") == "bottom left");
  CHECK(answer_from_spec(s, "is the square bigger than the triangle") == "no");

  const auto single = scene_of({obj(ShapeKind::Square, ColorKind::Blue, 2, 2)});
  for (const auto& q : qa_pairs_of(single)) CHECK(q.kind != QAKind::Compare);
  CHECK(code_of([&] { answer_from_spec(single, "what color is the circle"); }) == Errc::InvalidArgument);
  CHECK(code_of([&] { answer_from_spec(single, "why"); }) == Errc::ParseError);

  // Counting and attribute oracles straight off the spec.
  const auto v = Vocabulary::builtin();
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const auto sc = generate_scene(seed);
    for (const auto& q : qa_pairs_of(sc)) {
      for (const auto& w : words(q.question + " " + q.answer)) CHECK(v.contains(w));
      if (q.kind == QAKind::Count) {
        const auto color = words(q.question)[2];
        const auto n = std::count_if(sc.objects.begin(), sc.objects.end(),
                                     [&](auto& o) { return to_string(o.color) == color; });
        CHECK(q.answer == std::array{"zero", "one", "two", "three"}[n]);
      }
      if (q.kind == QAKind::Color) {
        const auto* o = sc.find(*parse_shape(words(q.question)[4]));
        REQUIRE(o);
        CHECK(q.answer == to_string(o->color));
      }
    }
  }
}

TEST_CASE("statements") {
  const auto s = scene_of({obj(ShapeKind::Circle, ColorKind::Red, 1, 1)});
  const auto t = statement_of(s, true, 3);
  CHECK(t.truth);
  CHECK(statement_holds(s, t.text));
  const auto f = statement_of(s, false, 3);
  CHECK_FALSE(f.truth);
  CHECK_FALSE(statement_holds(s, f.text));
  CHECK(f.text.find("circle") != std::string::npos);
  CHECK(f.text.find("red") == std::string::npos);
  CHECK(statement_of(s, false, 3) == f);
  CHECK(code_of([] { statement_of(SceneSpec{}, false, 0); }) == Errc::CannotFalsify);

  const auto two = scene_of({obj(ShapeKind::Circle, ColorKind::Red, 0, 0),
                             obj(ShapeKind::Square, ColorKind::Blue, 2, 0)});
  CHECK(statement_holds(two, "the circle is above the square"));
  CHECK(statement_holds(two, "there is a blue square"));
  CHECK_FALSE(statement_holds(two, "the square is above the circle"));
  CHECK_FALSE(statement_holds(two, "the triangle is red"));
  CHECK_FALSE(statement_holds(two, "the circle is left of the square"));
  CHECK(code_of([&] { statement_holds(two, "the circle is happy"); }) == Errc::ParseError);
}

TEST_CASE("augment") {
  const auto spec = generate_scene(11);
  const auto img = render_scene(spec);
  CHECK(augment(img, spec, AugmentPolicy::Identity, 0) == std::pair{img, spec});

  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const auto s = generate_scene(seed);
    const auto im = render_scene(s);
    const auto [fi, fs_] = augment(im, s, AugmentPolicy::HFlip, 0);
    validate_scene(fs_);
    CHECK(fi == render_scene(fs_));
    CHECK(augment(fi, fs_, AugmentPolicy::HFlip, 0) == std::pair{im, s});
    CHECK(caption_of(fs_) == swap_left_right(caption_of(s)));
  }

  const auto [ji, js] = augment(img, spec, AugmentPolicy::Jitter, 5);
  CHECK(js == spec);
  CHECK(ji != img);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    CHECK(std::abs(ji.pixels[i] - img.pixels[i]) <= 10.0f / 255.0f + 1e-6f);
    CHECK(ji.pixels[i] >= 0.0f);
    CHECK(ji.pixels[i] <= 1.0f);
  }
  CHECK(augment(img, spec, AugmentPolicy::Jitter, 5).first == ji);
  CHECK(parse_policy("hflip") == AugmentPolicy::HFlip);
  CHECK(code_of([] { parse_policy("vflip"); }) == Errc::UnknownPolicy);
}

TEST_CASE("label soundness over a scene sweep") {
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const auto r = make_record(seed, "train", generate_scene(seed));
    CHECK(caption_holds(r.spec, r.caption));
    for (const auto& q : r.qa) CHECK(answer_from_spec(r.spec, q.question) == q.answer);
    REQUIRE(r.statements.size() == 2);
    for (const auto& st : r.statements) CHECK(statement_holds(r.spec, st.text) == st.truth);
    checked += 1 + r.qa.size() + r.statements.size();
  }
  CHECK(checked > 40000);
}

TEST_CASE("record encoding round trips") {
  const auto r = make_record(3, "eval", generate_scene(99));
  CHECK(decode_record(encode_record(r)) == r);
  CHECK(code_of([] { decode_record("{not json"); }) == Errc::ParseError);
  CHECK(code_of([] { decode_record(R"({"id":1})"); }) == Errc::ParseError);
}

TEST_CASE("build_corpus") {
  TempDir a("corpus_a"), b("corpus_b");
  build_corpus(a.path, 64, 16, 7);
  build_corpus(b.path, 64, 16, 7);
  for (const auto& rel : {"vocab.txt", "train/scenes.jsonl", "eval/scenes.jsonl", "train/img/0.ppm",
                          "eval/img/15.ppm"})
    CHECK(slurp(a.path / rel) == slurp(b.path / rel));
  CHECK(corpus_fingerprint(a.path) == corpus_fingerprint(b.path));

  const auto train = load_split(a.path, "train");
  const auto eval = load_split(a.path, "eval");
  REQUIRE(train.records.size() == 64);
  REQUIRE(eval.records.size() == 16);
  for (std::size_t i = 0; i < train.records.size(); ++i) {
    const auto& r = train.records[i];
    CHECK(r.id == i);
    CHECK_FALSE(has_holdout_combo(r.spec));
    CHECK_FALSE(r.caption.empty());
    CHECK_FALSE(r.qa.empty());
    CHECK(r.statements.size() == 2);
    CHECK(r.statements[0].truth != r.statements[1].truth);
    CHECK(train.images[i] == render_scene(r.spec));
  }
  for (std::size_t i = 0; i < eval.records.size(); i += 2) CHECK(has_holdout_combo(eval.records[i].spec));
  for (const auto& e : eval.records)
    for (const auto& t : train.records) CHECK(e.spec.objects != t.spec.objects);

  build_corpus(b.path, 64, 16, 8);
  CHECK(corpus_fingerprint(a.path) != corpus_fingerprint(b.path));
  CHECK(load_corpus_vocab(a.path).tokens() == Vocabulary::builtin().tokens());
  CHECK(code_of([&] { load_split(a.path, "test"); }) == Errc::MissingCorpus);
  CHECK(code_of([&] { build_corpus(a.path, 0, 1, 0); }) == Errc::InvalidArgument);
}
