#include <set>

#include "doctest.h"
#include "vlmkit/sequence.h"

using namespace vlmkit;

namespace {

ChatTurn user(std::vector<Segment> segs) { return ChatTurn{Role::user, std::move(segs)}; }
ChatTurn assistant(std::string text) { return ChatTurn{Role::assistant, {std::move(text)}}; }

}  // namespace

TEST_CASE("vocabulary layout") {
  Vocabulary v;
  CHECK(v.size() == 256 + 6 + 25);
  CHECK(v.bos() == 256);
  CHECK(v.text(v.bos()) == "<s>");
  CHECK(v.text(v.eos()) == "</s>");
  CHECK(v.text(v.end_of_utterance()) == "<end_of_utterance>");
  CHECK(v.text(v.image()) == "<image>");
  CHECK(v.text(v.fake_token_around_image()) == "<fake_token_around_image>");
  CHECK(v.text(v.global_img()) == "<global-img>");
  CHECK(v.text(v.tile_marker(2, 3)) == "<row_2_col_3>");
  CHECK(v.text('A') == "A");
  std::set<TokenId> ids;
  for (std::size_t r = 1; r <= 5; ++r)
    for (std::size_t c = 1; c <= 5; ++c) {
      const TokenId id = v.tile_marker(r, c);
      ids.insert(id);
      CHECK(v.parse_tile_marker(id) == std::make_pair(r, c));
      CHECK(v.find_special(v.text(id)) == id);
    }
  CHECK(ids.size() == 25);
  CHECK_THROWS_AS(v.tile_marker(6, 1), VocabularyError);
  CHECK_THROWS_AS(v.text(v.size()), VocabularyError);
  CHECK_FALSE(v.parse_tile_marker('x'));
}

TEST_CASE("tokenizer is byte level and never emits specials") {
  Vocabulary v;
  const std::string text = "<image> caf\xc3\xa9\n";
  auto ids = tokenize(text, v);
  CHECK(ids.size() == text.size());
  for (TokenId id : ids) CHECK_FALSE(v.is_special(id));
  CHECK(detokenize(ids, v) == text);
}

TEST_CASE("tiled layout for every grid up to 5x5") {
  Vocabulary v;
  for (std::size_t rows = 1; rows <= 5; ++rows)
    for (std::size_t cols = 1; cols <= 5; ++cols) {
      MultimodalSequence seq;
      assemble_tiled_image({rows, cols}, 3, 0, v, seq);
      // expected layout built independently
      std::vector<TokenId> expect;
      for (std::size_t r = 1; r <= rows; ++r) {
        for (std::size_t c = 1; c <= cols; ++c) {
          expect.push_back(v.tile_marker(r, c));
          expect.insert(expect.end(), 3, v.image());
        }
        expect.push_back('\n');
      }
      expect.push_back(v.global_img());
      expect.insert(expect.end(), 3, v.image());
      CHECK(seq.token_ids == expect);
      CHECK(seq.image_token_count() == (rows * cols + 1) * 3);
      CHECK(seq.image_slots.size() == rows * cols + 1);
      CHECK(seq.image_slots.back().tile_index == kGlobalTile);
      auto grids = parse_tile_layout(seq, v);
      REQUIRE(grids.size() == 1);
      CHECK(grids[0] == GridShape{rows, cols});
    }
}

TEST_CASE("layout parser rejects malformed marker order") {
  Vocabulary v;
  MultimodalSequence seq;
  seq.push(v.tile_marker(1, 2), 0);
  CHECK_THROWS_AS(parse_tile_layout(seq, v), AssemblyError);
  MultimodalSequence open;
  open.push(v.tile_marker(1, 1), 0);
  open.push('\n', 0);
  CHECK_THROWS_AS(parse_tile_layout(open, v), AssemblyError);
}

TEST_CASE("training sequence masks only assistant text and its end marker") {
  Vocabulary v;
  std::vector<ChatTurn> turns = {user({std::string("Hi "), ImageRef{0}, std::string("?")}), assistant("Yes")};
  std::vector<GridShape> grids = {{1, 2}};
  MultimodalSequence seq = build_training_sequence(turns, grids, 4, v);

  MultimodalSequence expect;
  expect.push(v.bos(), 0);
  expect.push_text("User: Hi ", 0, v);
  assemble_tiled_image({1, 2}, 4, 0, v, expect);
  expect.push_text("?", 0, v);
  expect.push(v.end_of_utterance(), 0);
  expect.push('\n', 0);
  expect.push_text("Assistant: ", 0, v);
  expect.push_text("Yes", 1, v);
  expect.push(v.end_of_utterance(), 1);
  expect.push('\n', 0);
  CHECK(seq.token_ids == expect.token_ids);
  CHECK(seq.loss_mask == expect.loss_mask);
  std::size_t supervised = 0;
  for (auto m : seq.loss_mask) supervised += m;
  CHECK(supervised == 4);
}

TEST_CASE("placeholder layout uses one image token per image") {
  Vocabulary v;
  std::vector<ChatTurn> turns = {user({ImageRef{0}, ImageRef{1}, std::string("x")}), assistant("y")};
  std::vector<GridShape> grids = {{2, 2}, {1, 1}};
  AssembleOptions opts;
  opts.layout = ImageLayout::placeholder;
  MultimodalSequence seq = build_training_sequence(turns, grids, 9, v, opts);
  std::size_t images = 0;
  for (auto id : seq.token_ids) images += id == v.image();
  CHECK(images == 2);
  CHECK(seq.image_slots.empty());
}

TEST_CASE("assembly errors") {
  Vocabulary v;
  std::vector<GridShape> grids = {{1, 1}};
  std::vector<ChatTurn> missing = {user({ImageRef{3}}), assistant("a")};
  CHECK_THROWS_AS(build_training_sequence(missing, grids, 2, v), FormatError);
  std::vector<ChatTurn> empty = {ChatTurn{Role::user, {}}};
  CHECK_THROWS_AS(build_training_sequence(empty, grids, 2, v), FormatError);
  std::vector<ChatTurn> image_answer = {user({std::string("q")}), ChatTurn{Role::assistant, {ImageRef{0}}}};
  CHECK_THROWS_AS(build_training_sequence(image_answer, grids, 2, v), FormatError);
  std::vector<ChatTurn> ok = {user({ImageRef{0}, std::string("q")}), assistant("a")};
  AssembleOptions cap;
  cap.max_len = 10;
  CHECK_THROWS_AS(build_training_sequence(ok, grids, 2, v, cap), SequenceOverflowError);
  MultimodalSequence scratch;
  CHECK_THROWS_AS(assemble_tiled_image({6, 1}, 2, 0, v, scratch), VocabularyError);
}

TEST_CASE("sequence validation catches supervised or overlapping slots") {
  Vocabulary v;
  MultimodalSequence seq;
  assemble_tiled_image({1, 1}, 2, 0, v, seq);
  CHECK_NOTHROW(seq.validate());
  MultimodalSequence bad = seq;
  bad.loss_mask[bad.image_slots[0].start] = 1;
  CHECK_THROWS_AS(bad.validate(), AssemblyError);
  MultimodalSequence overlap = seq;
  overlap.image_slots[1].start = overlap.image_slots[0].start;
  CHECK_THROWS_AS(overlap.validate(), AssemblyError);
}

TEST_CASE("debug rendering shows slots and mask runs") {
  Vocabulary v;
  std::vector<ChatTurn> turns = {user({ImageRef{0}, std::string("Q")}), assistant("A")};
  std::vector<GridShape> grids = {{1, 1}};
  const std::string text = render_debug(build_training_sequence(turns, grids, 2, v), v);
  CHECK(text.find("[image 0 tile 0 x2]") != std::string::npos);
  CHECK(text.find("[image 0 global x2]") != std::string::npos);
  CHECK(text.find("1 | A<end_of_utterance>") != std::string::npos);
}

TEST_CASE("decoding stops on stop words and end of sequence") {
  Vocabulary v;
  auto scripted = [&](const std::string& s, bool eos) {
    return [&v, s, eos](std::span<const TokenId> done) -> TokenId {
      if (done.size() < s.size()) return static_cast<unsigned char>(s[done.size()]);
      return eos ? v.eos() : TokenId{'z'};
    };
  };
  const std::vector<std::string> stops = default_stop_words();
  CHECK(decode_with_stopwords(scripted("blue  \nQuestion: what", false), stops, 50, v) == "blue");
  CHECK(decode_with_stopwords(scripted("red ", true), stops, 50, v) == "red");
  CHECK(decode_with_stopwords(scripted("abcdef", false), stops, 3, v) == "abc");
  CHECK(decode_with_stopwords(scripted("ok User", false), stops, 50, v) == "ok");
  auto eou = [&](std::span<const TokenId> done) -> TokenId { return done.empty() ? TokenId{'x'} : v.end_of_utterance(); };
  CHECK(decode_with_stopwords(eou, stops, 10, v) == "x");
  CHECK_THROWS_AS(decode_with_stopwords(eou, stops, 0, v), ParameterError);
}
