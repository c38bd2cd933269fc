// tests/test_textfeat.cpp
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "ustr/corpus.hpp"
#include "ustr/experiment.hpp"
#include "ustr/textfeat.hpp"

using namespace ustr;
namespace fs = std::filesystem;

TEST_CASE("grapheme tokenize basic and boundary symbol") {
  TextVocab v = MakeGraphemeVocab({"ab"});
  CHECK(v.Symbol(0) == kMaskSymbol);
  auto t = GraphemeTokenize({"ab"}, v);
  CHECK(t.ids == std::vector<int>{v.Id("a"), v.Id("b")});
  auto t2 = GraphemeTokenize({"a", "b"}, v);
  CHECK(t2.ids ==
        std::vector<int>{v.Id("a"), v.Id(kSpaceSymbol), v.Id("b")});
}

TEST_CASE("grapheme tokenize unknown character names it") {
  TextVocab v = MakeGraphemeVocab({"ab"});
  CHECK_THROWS_WITH_AS(GraphemeTokenize({"q"}, v), doctest::Contains("q"),
                       std::runtime_error);
}

TEST_CASE("grapheme round trip over generated corpora") {
  DomainSpec spec = BuiltinSourceDomain();
  DomainSpec tgt = BuiltinTargetDomain();
  std::set<std::string> words(spec.vocabulary.begin(), spec.vocabulary.end());
  words.insert(tgt.vocabulary.begin(), tgt.vocabulary.end());
  TextVocab v = MakeGraphemeVocab({words.begin(), words.end()});
  Rng rng(17);
  for (int i = 0; i < 200; ++i) {
    auto sent = SampleSentence(i % 2 ? spec : tgt, rng);
    CHECK(GraphemeDetokenize(GraphemeTokenize(sent, v), v) == sent);
  }
}

TEST_CASE("bpe first merge on abab corpus") {
  auto model = BpeTrain({{"abab"}}, 1);
  REQUIRE(model.merges.size() == 1);
  CHECK(model.merges[0].first == "a");
  CHECK(model.merges[0].second == "b");
}

TEST_CASE("bpe zero merges gives grapheme base vocabulary") {
  auto model = BpeTrain({{"ab", "ba"}}, 0);
  CHECK(model.merges.empty());
  std::set<std::string> vocab(model.vocab.begin(), model.vocab.end());
  CHECK(vocab.count("a"));
  CHECK(vocab.count("b</w>"));
  CHECK(vocab.count("a</w>"));
  CHECK(vocab.count("b"));
}

TEST_CASE("bpe training is deterministic") {
  std::vector<std::vector<std::string>> corpus = {
      {"abab", "abba"}, {"baba", "abab"}, {"aabb"}};
  auto m1 = BpeTrain(corpus, 5);
  auto m2 = BpeTrain(corpus, 5);
  CHECK(m1.merges == m2.merges);
  CHECK(m1.vocab == m2.vocab);
}

TEST_CASE("bpe empty corpus errors") {
  CHECK_THROWS_AS(BpeTrain({}, 1), std::runtime_error);
}

TEST_CASE("bpe encode applies merges and round trips") {
  auto model = BpeTrain({{"abab"}}, 3);
  TextVocab v = MakeBpeVocab(model);
  auto t = BpeEncode(model, v, {"abab"});
  CHECK(BpeDecode(t, v) == std::vector<std::string>{"abab"});
  // Unseen word falls back to graphemes.
  auto u = BpeEncode(model, v, {"ba"});
  CHECK(BpeDecode(u, v) == std::vector<std::string>{"ba"});
}

TEST_CASE("bpe round trip over generated corpora") {
  DomainSpec spec = BuiltinSourceDomain();
  std::vector<std::vector<std::string>> corpus;
  Rng rng(3);
  for (int i = 0; i < 50; ++i) corpus.push_back(SampleSentence(spec, rng));
  auto model = BpeTrain(corpus, 40);
  TextVocab v = MakeBpeVocab(model);
  for (const auto& sent : corpus)
    CHECK(BpeDecode(BpeEncode(model, v, sent), v) == sent);
}

TEST_CASE("bpe model file round trip preserves merges") {
  auto model = BpeTrain({{"abab", "abba"}}, 4);
  fs::path p = fs::temp_directory_path() / "ustr_test_bpe.txt";
  SaveBpeModel(model, p.string());
  auto loaded = LoadBpeModel(p.string());
  CHECK(loaded.merges == model.merges);
  // Segmentation behavior is fully determined by the merge list.
  CHECK(BpeSegmentWord(loaded, "abab") == BpeSegmentWord(model, "abab"));
}

TEST_CASE("g2p lookup and strict oov error") {
  Lexicon lex;
  lex.entries["cat"] = {"K", "AE", "T"};
  PhonemeInventory inv;
  inv.phonemes = {"K", "AE", "T"};
  TextVocab v = MakePhonemeVocab(inv);
  auto t = G2p(lex, v, {"cat"});
  CHECK(t.ids == std::vector<int>{v.Id("K"), v.Id("AE"), v.Id("T")});
  auto t2 = G2p(lex, v, {"cat", "cat"});
  CHECK(t2.ids.size() == 6);
  CHECK(t2.ids[3] == v.Id("K"));
  CHECK_THROWS_WITH_AS(G2p(lex, v, {"dog"}), doctest::Contains("dog"),
                       std::runtime_error);
}

TEST_CASE("mask_then_repeat is block constant") {
  TokenSequence t{{3, 7}};
  TextRepConfig cfg;
  cfg.repeat = 4;
  cfg.mask_prob = 0.0;
  Rng rng(1);
  auto f = MaskThenRepeat(t, cfg, 0, rng);
  CHECK(f.ids == std::vector<int>{3, 3, 3, 3, 7, 7, 7, 7});

  cfg.mask_prob = 1.0;
  auto g = MaskThenRepeat(t, cfg, 0, rng);
  CHECK(g.ids == std::vector<int>(8, 0));

  cfg.repeat = 1;
  cfg.mask_prob = 0.0;
  auto h = MaskThenRepeat(t, cfg, 0, rng);
  CHECK(h.ids == t.ids);

  // Block constancy at intermediate probability.
  cfg.repeat = 5;
  cfg.mask_prob = 0.5;
  for (int trial = 0; trial < 50; ++trial) {
    auto out = MaskThenRepeat(t, cfg, 0, rng);
    REQUIRE(out.ids.size() == 10);
    for (size_t b = 0; b < out.ids.size(); b += 5)
      for (size_t k = 1; k < 5; ++k) CHECK(out.ids[b + k] == out.ids[b]);
  }
}

TEST_CASE("repeat_then_mask produces non-uniform blocks") {
  TokenSequence t{{3}};
  TextRepConfig cfg;
  cfg.repeat = 4;
  cfg.mask_prob = 0.0;
  Rng rng(5);
  auto f = RepeatThenMask(t, cfg, 0, rng);
  CHECK(f.ids == std::vector<int>{3, 3, 3, 3});

  cfg.mask_prob = 0.5;
  bool saw_mixed_block = false;
  for (int trial = 0; trial < 200 && !saw_mixed_block; ++trial) {
    auto out = RepeatThenMask(t, cfg, 0, rng);
    std::set<int> distinct(out.ids.begin(), out.ids.end());
    if (distinct.size() > 1) saw_mixed_block = true;
  }
  CHECK(saw_mixed_block);
}

TEST_CASE("repeat_then_mask masked fraction matches probability") {
  TokenSequence t{{3, 7, 9, 11}};
  TextRepConfig cfg;
  cfg.repeat = 4;
  cfg.mask_prob = 0.15;
  Rng rng(9);
  long masked = 0, total = 0;
  while (total < 10000) {
    auto out = RepeatThenMask(t, cfg, 0, rng);
    for (int id : out.ids) {
      if (id == 0) ++masked;
      ++total;
    }
  }
  double frac = static_cast<double>(masked) / total;
  CHECK(std::abs(frac - 0.15) <= 0.01);
}

TEST_CASE("text vocab file round trip and mask guard") {
  TextVocab v = MakeGraphemeVocab({"abc"});
  fs::path p = fs::temp_directory_path() / "ustr_test_vocab.txt";
  SaveTextVocab(v, p.string());
  TextVocab loaded = LoadTextVocab(p.string());
  CHECK(loaded.symbols == v.symbols);
  CHECK(loaded.mask_id == 0);
}

TEST_CASE("text unit names round trip") {
  for (TextUnit u :
       {TextUnit::kGrapheme, TextUnit::kSubword, TextUnit::kPhoneme})
    CHECK(TextUnitFromName(TextUnitName(u)) == u);
  CHECK_THROWS_AS(TextUnitFromName("word"), std::runtime_error);
}
