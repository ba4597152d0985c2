#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "denserl/core.hpp"

using namespace denserl;

namespace {
Vocabulary tiny_vocab() { return Vocabulary({"<unk>", "good", "movie"}); }
}  // namespace

TEST_CASE("vocabulary index round trip") {
  const Vocabulary v({"<unk>", "a", "b", "c"});
  for (TokenId i = 0; i < static_cast<TokenId>(v.size()); ++i) {
    CHECK(v.index(v.symbol(i)) == i);
  }
  CHECK(v.index("missing") == Vocabulary::kUnk);
}

TEST_CASE("vocabulary rejects duplicates and empty symbols") {
  CHECK_THROWS_AS(Vocabulary({"<unk>", "a", "a"}), ConfigError);
  CHECK_THROWS_AS(Vocabulary({"<unk>", ""}), ConfigError);
  CHECK_THROWS_AS(Vocabulary({}), ConfigError);
}

TEST_CASE("tokenize maps words and absorbs unknowns") {
  const Vocabulary v = tiny_vocab();
  CHECK(tokenize("good movie", v) == std::vector<TokenId>{1, 2});
  CHECK(tokenize("", v).empty());
  CHECK(tokenize("   \t \n ", v).empty());

  const Vocabulary v2({"<unk>", "good"});
  CHECK(tokenize("zzz good", v2) == std::vector<TokenId>{0, 1});
}

TEST_CASE("detokenize produces text and offsets") {
  const Vocabulary v = tiny_vocab();
  const Detokenized d = detokenize({1, 2}, v);
  CHECK(d.text == "good movie");
  REQUIRE(d.offsets.size() == 2);
  CHECK(d.offsets[0] == std::pair<int, int>{0, 4});
  CHECK(d.offsets[1] == std::pair<int, int>{5, 10});

  const Detokenized empty = detokenize({}, v);
  CHECK(empty.text.empty());
  CHECK(empty.offsets.empty());

  CHECK_THROWS_AS(detokenize({7}, v), ShapeError);
}

TEST_CASE("tokenize/detokenize round trip on in-vocab text") {
  const Vocabulary v = tiny_vocab();
  const std::string text = "  good   movie good ";
  CHECK(detokenize(tokenize(text, v), v).text == "good movie good");
}

TEST_CASE("detokenize offsets are ordered, non-overlapping, and cover symbols") {
  const Vocabulary v({"<unk>", "a", "bb", "ccc"});
  const std::vector<TokenId> tokens{3, 1, 2, 2, 0};
  const Detokenized d = detokenize(tokens, v);
  int prev_end = -1;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto [start, end] = d.offsets[i];
    CHECK(start > prev_end);
    CHECK(d.text.substr(static_cast<std::size_t>(start), static_cast<std::size_t>(end - start)) ==
          v.symbol(tokens[i]));
    prev_end = end;
  }
}

TEST_CASE("derive_seed separates episodes") {
  CHECK(derive_seed(0, 0) != derive_seed(0, 1));
  CHECK(derive_seed(0, 0) != derive_seed(1, 0));
  CHECK(derive_seed(42, 7) == derive_seed(42, 7));
}
