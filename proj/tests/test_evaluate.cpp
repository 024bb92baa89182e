#include "doctest.h"
#include "nv/error.hpp"
#include "nv/evaluate.hpp"
#include "test_util.hpp"

using namespace nv;
using nv::testing::code_of;
using nv::testing::TempDir;

namespace {

Checkpoint small_checkpoint() {
  MEDConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 1;
  c.ffn_dim = 32;
  c.seed = 11;
  return Checkpoint::fresh(c);
}

}  // namespace

TEST_CASE("metric names round trip") {
  for (auto m : all_metrics()) CHECK(parse_metric(to_string(m)) == m);
  CHECK(all_metrics().size() == 6);
  CHECK(code_of([] { parse_metric("cider"); }) == Errc::InvalidArgument);
}

TEST_CASE("a model that echoes the gold captions scores 1") {
  const std::vector<std::string> gold{"a large red circle", "a small blue square above a large green triangle"};
  CHECK(exact_match_rate(gold, gold) == 1.0);
  CHECK(unigram_precision(gold, gold) == 1.0);
}

TEST_CASE("hand-counted three example split") {
  const std::vector<std::string> gold{"a large red circle", "a small blue square", "two"};
  const std::vector<std::string> pred{"a large red circle", "a small red red square", "three"};
  CHECK(exact_match_rate(pred, gold) == doctest::Approx(1.0 / 3.0));
  // 4 + 3 + 0 clipped matches over 4 + 5 + 1 predicted words.
  CHECK(unigram_precision(pred, gold) == doctest::Approx(7.0 / 10.0));
  // Clipping: "red red red" against "a red circle" earns one match.
  const std::vector<std::string> p2{"red red red"}, g2{"a red circle"};
  CHECK(unigram_precision(p2, g2) == doctest::Approx(1.0 / 3.0));
  const std::vector<std::string> empty_pred{""}, g3{"a red circle"};
  CHECK(unigram_precision(empty_pred, g3) == 0.0);

  CHECK(accuracy({true, false, true}, {true, true, true}) == doctest::Approx(2.0 / 3.0));
  CHECK(code_of([] { accuracy({}, {}); }) == Errc::EmptySplit);
  CHECK(code_of([] { exact_match_rate({}, {}); }) == Errc::EmptySplit);

  // Text 0 -> image 0 (hit), text 1 -> image 0 (miss), text 2 -> image 1,
  // a hit because captions 1 and 2 are identical.
  const Tensor text({3, 2}, {1.0f, 0.0f, 1.0f, 0.0f, 0.0f, 1.0f});
  const Tensor image({3, 2}, {1.0f, 0.0f, 0.0f, 1.0f, 0.6f, 0.8f});
  const std::vector<std::string> captions{"a red circle", "a blue square", "a blue square"};
  CHECK(recall_at_1(text, image, captions) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("evaluate on a corpus split") {
  TempDir dir("evaluate");
  build_corpus(dir.path, 6, 2, 4);
  const auto split = load_split(dir.path, "train");
  const auto ck = small_checkpoint();
  const auto before = encode_checkpoint(ck);

  const auto a = evaluate(ck, split);
  CHECK(a.size() == 5);
  CHECK_FALSE(a.count("nlvr_statement_accuracy"));
  for (const auto& [name, v] : a) {
    CAPTURE(name);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(evaluate(ck, split) == a);
  CHECK(encode_checkpoint(ck) == before);

  EvalOptions only;
  only.metrics = {Metric::NlvrStatementAccuracy};
  CHECK(code_of([&] { evaluate(ck, split, only); }) == Errc::MissingHead);
  auto headed = ck;
  headed.statement_head_trained = true;
  const auto n = evaluate(headed, split, only);
  CHECK(n.size() == 1);
  CHECK(n.at("nlvr_statement_accuracy") >= 0.0);

  CorpusSplit empty{"train", {}, {}};
  CHECK(code_of([&] { evaluate(ck, empty); }) == Errc::EmptySplit);
}
