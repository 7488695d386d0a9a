// Copyright 2026 The unet-transformer Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "unet/data.hpp"

namespace unet {
namespace {

namespace fs = std::filesystem;

std::vector<std::string> words(std::string_view s) { return tokenize(s, false); }

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("unet_data_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

TEST(Tokenize, WhitespaceAndLowercase) {
  EXPECT_EQ(tokenize("  Hello\tWORLD \n x "), (std::vector<std::string>{"hello", "world", "x"}));
  EXPECT_EQ(tokenize("Ab", false), (std::vector<std::string>{"Ab"}));
  EXPECT_TRUE(tokenize("   ").empty());
}

TEST(Vocab, ReservedIdsAndFrequencyOrder) {
  auto v = Vocab::build({words("a a b")}, 6);
  ASSERT_EQ(v.size(), 6);
  EXPECT_EQ(v.token(0), "<pad>");
  EXPECT_EQ(v.token(1), "<unk>");
  EXPECT_EQ(v.token(2), "<bos>");
  EXPECT_EQ(v.token(3), "<eos>");
  EXPECT_EQ(v.id("a"), 4);
  EXPECT_EQ(v.id("b"), 5);
  auto capped = Vocab::build({words("a a b")}, 5);
  EXPECT_EQ(capped.size(), 5);
  EXPECT_FALSE(capped.contains("b"));
  EXPECT_EQ(capped.id("b"), kUnk);
  EXPECT_THROW(Vocab::build({words("a")}, 4), std::invalid_argument);
}

TEST(Vocab, TiesBreakLexicographicallyAndReservedAreNotCounted) {
  auto v = Vocab::build({words("zeta beta <eos> alpha <eos> <eos>")}, 6);
  EXPECT_EQ(v.id("alpha"), 4);
  EXPECT_EQ(v.id("beta"), 5);
  EXPECT_FALSE(v.contains("zeta"));
  EXPECT_EQ(v.id("<eos>"), kEos);
}

TEST(Vocab, RoundTripAndOovBecomesUnk) {
  auto v = Vocab::build({words("the cat sat on the mat")}, 100);
  const auto text = words("the cat sat");
  EXPECT_EQ(v.decode(v.encode(text)), text);
  auto ids = v.encode(words("the dog"));
  EXPECT_EQ(ids[1], kUnk);
  EXPECT_EQ(v.decode(ids), (std::vector<std::string>{"the", "<unk>"}));
}

TEST(Vocab, SaveLoadOneTokenPerLine) {
  auto dir = scratch_dir("vocab");
  auto v = Vocab::build({words("b b a c")}, 100);
  v.save((dir / "vocab.txt").string());
  EXPECT_EQ(read_lines((dir / "vocab.txt").string()), (std::vector<std::string>{"b", "a", "c"}));
  EXPECT_EQ(Vocab::load((dir / "vocab.txt").string()), v);
  EXPECT_THROW(Vocab::load((dir / "missing.txt").string()), DataError);
}

TEST(Dialogue, JoinsHistoryWithEosAndSegments) {
  auto v = Vocab::build({words("hello hi there")}, 100);
  auto ex = make_dialogue_example(v, {words("hello"), words("hi there")}, words("hi"));
  EXPECT_EQ(ex.source, (std::vector<std::int32_t>{v.id("hello"), kEos, v.id("hi"), v.id("there")}));
  EXPECT_EQ(ex.segments, (std::vector<std::int32_t>{0, 0, 1, 1}));
  EXPECT_EQ(ex.target, (std::vector<std::int32_t>{kBos, v.id("hi"), kEos}));
  auto single = make_dialogue_example(v, {words("hi there hello")}, words("hello"));
  EXPECT_EQ(single.segments, (std::vector<std::int32_t>{0, 0, 0}));
  EXPECT_THROW(make_dialogue_example(v, {}, words("hi")), DataError);
}

TEST(Dialogue, KeepsTheLast150Tokens) {
  std::vector<std::string> long_turn;
  for (int i = 0; i < 200; ++i) long_turn.push_back("t" + std::to_string(i));
  auto v = Vocab::build({long_turn}, 1000);
  auto ex = make_dialogue_example(v, {long_turn}, words("t1 t2"));
  ASSERT_EQ(ex.source.size(), 150u);
  EXPECT_EQ(ex.source.front(), v.id("t50"));
  EXPECT_EQ(ex.source.back(), v.id("t199"));
  EXPECT_EQ(ex.segments.size(), 150u);
  EXPECT_EQ(ex.target.front(), kBos);
  EXPECT_EQ(ex.target.back(), kEos);
  EXPECT_EQ(ex.target.size(), 4u);
}

TEST(Translation, SeparateVocabsTruncationAndSkips) {
  auto de = Vocab::build({words("ein Haus")}, 100);
  auto en = Vocab::build({words("a house")}, 100);
  auto ex = make_translation_example(de, en, words("ein Haus"), words("a house"));
  ASSERT_TRUE(ex);
  EXPECT_EQ(ex->source, (std::vector<std::int32_t>{de.id("ein"), de.id("Haus")}));
  EXPECT_EQ(ex->target, (std::vector<std::int32_t>{kBos, en.id("a"), en.id("house"), kEos}));
  EXPECT_EQ(ex->segments, (std::vector<std::int32_t>{0, 0}));
  std::vector<std::string> sixty(60, "ein");
  sixty[49] = "Haus";
  auto cut = make_translation_example(de, en, sixty, words("a"));
  ASSERT_EQ(cut->source.size(), 50u);
  EXPECT_EQ(cut->source.back(), de.id("Haus"));
  EXPECT_FALSE(make_translation_example(de, en, words("ein"), {}));
}

TEST(Synth, CopyReverseNested) {
  SynthSpec s;
  s.max_len = 8;
  for (auto kind : {SynthKind::Copy, SynthKind::Reverse}) {
    s.kind = kind;
    auto v = synth_vocab(s);
    EXPECT_EQ(v.size(), 20);
    auto data = synth_task(s, v, 50, 3);
    for (const auto& ex : data) {
      ASSERT_GE(ex.source.size(), 1u);
      ASSERT_LE(ex.source.size(), 8u);
      std::vector<std::int32_t> body(ex.target.begin() + 1, ex.target.end() - 1);
      if (kind == SynthKind::Reverse) std::reverse(body.begin(), body.end());
      EXPECT_EQ(body, ex.source);
      for (auto id : ex.source) EXPECT_GE(id, kNumReserved);
    }
  }
  EXPECT_EQ(bracket_depths({true, true, false, false, true, false}), (std::vector<std::int32_t>{1, 2, 1, 0, 1, 0}));
  s.kind = SynthKind::Nested;
  auto v = synth_vocab(s);
  for (const auto& ex : synth_task(s, v, 50, 4)) {
    ASSERT_EQ(ex.source.size() % 2, 0u);
    // Re-derive depths and bracket matching from the token strings.
    std::vector<std::string> stack;
    std::int32_t depth = 0;
    for (std::size_t i = 0; i < ex.source.size(); ++i) {
      const auto& tok = v.token(ex.source[i]);
      if (tok == "(" || tok == "[") {
        stack.push_back(tok);
        ++depth;
      } else {
        ASSERT_FALSE(stack.empty());
        EXPECT_EQ(stack.back(), tok == ")" ? "(" : "[");
        stack.pop_back();
        --depth;
      }
      EXPECT_EQ(v.token(ex.target[i + 1]), "d" + std::to_string(depth));
    }
    EXPECT_TRUE(stack.empty());
  }
}

TEST(Synth, DeterministicAndHeldOutDisjoint) {
  SynthSpec s;
  auto a = make_synth_corpus(s, 9), b = make_synth_corpus(s, 9), c = make_synth_corpus(s, 10);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_NE(a.train, c.train);
  std::set<std::vector<std::int32_t>> seen;
  for (const auto& ex : a.train) seen.insert(ex.source);
  for (const auto& ex : a.test) EXPECT_EQ(seen.count(ex.source), 0u);
}

TEST(DataSpec, ParsesSyntheticAndFileForms) {
  auto s = parse_data_spec("synth:reverse:len=12:n=100");
  EXPECT_TRUE(s.synthetic);
  EXPECT_EQ(s.synth.kind, SynthKind::Reverse);
  EXPECT_EQ(s.synth.max_len, 12);
  EXPECT_EQ(s.synth.n_train, 100);
  auto f = parse_data_spec("file:a.txt,b.txt");
  EXPECT_FALSE(f.synthetic);
  EXPECT_EQ(f.source_path, "a.txt");
  EXPECT_EQ(f.target_path, "b.txt");
  EXPECT_EQ(parse_data_spec("file:x.tsv").target_path, "");
  for (const char* bad : {"synth:", "synth:sort", "synth:copy:len=0", "synth:copy:len=3x", "synth:copy:foo=1", "file:",
                          "file:a,", "corpus.txt"}) {
    EXPECT_THROW(parse_data_spec(bad), DataError) << bad;
  }
}

TEST(TextCorpus, DialogueFileSharedVocabAndSplits) {
  auto dir = scratch_dir("dialogue");
  std::string text;
  for (int i = 0; i < 40; ++i) text += "Hello there <eos> how are you\tfine thanks " + std::to_string(i % 3) + "\n";
  text += "no tab on this line\n";
  text += "\tempty history\n";
  write_file(dir / "d.tsv", text);
  auto c = load_corpus(parse_data_spec("file:" + (dir / "d.tsv").string()), 1, {});
  EXPECT_EQ(c.skipped, 2);
  EXPECT_EQ(c.train.size() + c.valid.size() + c.test.size(), 40u);
  EXPECT_EQ(c.valid.size(), 2u);
  EXPECT_EQ(c.test.size(), 2u);
  EXPECT_TRUE(c.source_vocab == c.target_vocab);
  EXPECT_TRUE(c.source_vocab.contains("hello"));
  EXPECT_TRUE(c.source_vocab.contains("fine"));
  EXPECT_EQ(c.train[0].segments, (std::vector<std::int32_t>{0, 0, 0, 1, 1, 1}));
}

TEST(TextCorpus, TranslationAlignedFilesUnsharedVocabs) {
  auto dir = scratch_dir("translation");
  write_file(dir / "src.txt", "ein haus\nein baum\n\n");
  write_file(dir / "tgt.txt", "a house\na tree\nlonely\n");
  TextOptions opt;
  opt.mode = DataMode::Translation;
  auto c = load_corpus(parse_data_spec("file:" + (dir / "src.txt").string() + "," + (dir / "tgt.txt").string()), 1, opt);
  EXPECT_EQ(c.skipped, 1);
  EXPECT_EQ(c.train.size(), 2u);
  EXPECT_TRUE(c.source_vocab.contains("haus"));
  EXPECT_FALSE(c.source_vocab.contains("house"));
  EXPECT_TRUE(c.target_vocab.contains("house"));
  write_file(dir / "short.txt", "x\n");
  EXPECT_THROW(load_corpus(parse_data_spec("file:" + (dir / "src.txt").string() + "," + (dir / "short.txt").string()), 1, opt),
               DataError);
  EXPECT_THROW(load_corpus(parse_data_spec("file:" + (dir / "nope.txt").string()), 1, opt), DataError);
}

TEST(Batch, PadsToBatchMaxAndMasksMatchPadIds) {
  std::vector<Example> exs(2);
  exs[0].source = {5, 6, 7};
  exs[0].target = {kBos, 5, kEos};
  exs[1].source = {5, 6, 7, 8, 9};
  exs[1].target = {kBos, 5, 6, 7, kEos};
  auto b = make_batch(exs);
  EXPECT_EQ(b.source_len, 5);
  EXPECT_EQ(b.source, (std::vector<std::int32_t>{5, 6, 7, 0, 0, 5, 6, 7, 8, 9}));
  EXPECT_EQ(b.source_mask.count(0), 3);
  EXPECT_EQ(b.source_mask.count(1), 5);
  for (std::size_t i = 0; i < b.source.size(); ++i) EXPECT_EQ(b.source_mask.valid[i] == 0, b.source[i] == kPad);
  EXPECT_EQ(b.target_in, (std::vector<std::int32_t>{kBos, 5, 0, 0, kBos, 5, 6, 7}));
  EXPECT_EQ(b.target_out, (std::vector<std::int32_t>{5, kEos, 0, 0, 5, 6, 7, kEos}));
  EXPECT_EQ(b.loss_targets(), (std::vector<std::int32_t>{5, kEos, -1, -1, 5, 6, 7, kEos}));
  EXPECT_EQ(b.target_tokens(), 6);
  EXPECT_THROW(make_batch(std::span<const Example>{}), std::invalid_argument);
}

TEST(Batcher, OrderIsAPureFunctionOfSeedAndStep) {
  const std::vector<Index> lens{3, 1, 4, 1, 5, 9, 2, 6, 5, 3};
  Batcher a(lens, 4, 5), b(lens, 4, 5), c(lens, 4, 6);
  EXPECT_EQ(a.batches_per_epoch(), 3);
  std::vector<Index> seen;
  for (Index s = 0; s < 3; ++s) {
    const auto idx = a.indices(s);
    seen.insert(seen.end(), idx.begin(), idx.end());
  }
  std::sort(seen.begin(), seen.end());
  std::vector<Index> all(10);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(seen, all);
  // Random access (as after a resume) matches sequential access.
  EXPECT_EQ(b.indices(7), a.indices(7));
  EXPECT_EQ(b.indices(2), a.indices(2));
  bool differs = false;
  for (Index s = 0; s < 6; ++s) differs = differs || c.indices(s) != a.indices(s);
  EXPECT_TRUE(differs);
}

TEST(Batcher, LengthSortingGroupsSimilarSources) {
  std::vector<Index> lens;
  for (int i = 0; i < 40; ++i) lens.push_back(1 + i % 4);
  Batcher sorted(lens, 10, 1), plain(lens, 10, 1, false);
  for (Index s = 0; s < 4; ++s) {
    const auto idx = sorted.indices(s);
    for (Index i : idx) EXPECT_EQ(lens[i], lens[idx[0]]);
  }
  bool mixed = false;
  for (Index s = 0; s < 4; ++s) {
    const auto idx = plain.indices(s);
    for (Index i : idx) mixed = mixed || lens[i] != lens[idx[0]];
  }
  EXPECT_TRUE(mixed);
}

TEST(EvalBatches, CoverEveryExampleOnce) {
  std::vector<Example> exs;
  for (int i = 0; i < 7; ++i) exs.push_back({std::vector<std::int32_t>(static_cast<std::size_t>(1 + (i * 3) % 5), 4 + i), {kBos, 4, kEos}, {}});
  for (bool sort : {true, false}) {
    const auto batches = eval_batches(exs, 3, sort);
    ASSERT_EQ(batches.size(), 3u);
    std::multiset<std::int32_t> seen;
    for (const auto& b : batches)
      for (Index r = 0; r < b.size; ++r) seen.insert(b.source[static_cast<std::size_t>(r * b.source_len)]);
    EXPECT_EQ(seen, (std::multiset<std::int32_t>{4, 5, 6, 7, 8, 9, 10}));
  }
  // lengths 1,4,2,5,3,1,4 sort to {1,1,2}, {3,4,4}, {5}
  const auto sorted = eval_batches(exs, 3, true);
  EXPECT_EQ(sorted[0].source_len, 2);
  EXPECT_EQ(sorted[2].source_len, 5);
}

}  // namespace
}  // namespace unet
