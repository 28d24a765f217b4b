#include "vlmkit/sequence.h"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace vlmkit {

Vocabulary::Vocabulary(std::size_t max_grid) : max_grid_(max_grid) {
  if (max_grid < 1) throw ConfigError("vocabulary max_grid must be >= 1");
  names_.reserve(kByteCount + 6 + max_grid * max_grid);
  for (TokenId b = 0; b < kByteCount; ++b) names_.emplace_back(1, static_cast<char>(b));
  bos_ = add_special("<s>");
  eos_ = add_special("</s>");
  eou_ = add_special("<end_of_utterance>");
  image_ = add_special("<image>");
  fake_ = add_special("<fake_token_around_image>");
  global_ = add_special("<global-img>");
  first_marker_ = names_.size();
  for (std::size_t r = 1; r <= max_grid; ++r)
    for (std::size_t c = 1; c <= max_grid; ++c)
      add_special("<row_" + std::to_string(r) + "_col_" + std::to_string(c) + ">");
}

TokenId Vocabulary::add_special(const std::string& name) {
  const TokenId id = names_.size();
  names_.push_back(name);
  specials_.emplace(name, id);
  return id;
}

TokenId Vocabulary::tile_marker(std::size_t row, std::size_t col) const {
  if (row < 1 || col < 1 || row > max_grid_ || col > max_grid_) {
    throw VocabularyError("tile marker <row_" + std::to_string(row) + "_col_" + std::to_string(col) +
                          "> exceeds vocabulary grid " + std::to_string(max_grid_));
  }
  return first_marker_ + (row - 1) * max_grid_ + (col - 1);
}

std::optional<std::pair<std::size_t, std::size_t>> Vocabulary::parse_tile_marker(TokenId id) const {
  if (id < first_marker_ || id >= first_marker_ + max_grid_ * max_grid_) return std::nullopt;
  const std::size_t k = id - first_marker_;
  return std::make_pair(k / max_grid_ + 1, k % max_grid_ + 1);
}

const std::string& Vocabulary::text(TokenId id) const {
  if (id >= names_.size()) throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
  return names_[id];
}

std::optional<TokenId> Vocabulary::find_special(const std::string& name) const {
  auto it = specials_.find(name);
  if (it == specials_.end()) return std::nullopt;
  return it->second;
}

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary&) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (char ch : text) ids.push_back(static_cast<unsigned char>(ch));
  return ids;
}

std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) out += vocab.text(id);
  return out;
}

std::size_t MultimodalSequence::image_token_count() const {
  std::size_t n = 0;
  for (const auto& s : image_slots) n += s.length;
  return n;
}

void MultimodalSequence::push(TokenId id, uint8_t mask) {
  token_ids.push_back(id);
  loss_mask.push_back(mask);
}

void MultimodalSequence::push_text(std::string_view text, uint8_t mask, const Vocabulary& vocab) {
  for (TokenId id : tokenize(text, vocab)) push(id, mask);
}

void MultimodalSequence::validate() const {
  if (loss_mask.size() != token_ids.size()) throw AssemblyError("loss mask length differs from token count");
  std::size_t prev_end = 0;
  for (const auto& s : image_slots) {
    if (s.length == 0) throw AssemblyError("empty image slot");
    if (s.start < prev_end) throw AssemblyError("image slots overlap or are out of order");
    if (s.start + s.length > token_ids.size()) throw AssemblyError("image slot exceeds sequence");
    for (std::size_t i = s.start; i < s.start + s.length; ++i) {
      if (loss_mask[i]) throw AssemblyError("image slot position " + std::to_string(i) + " is supervised");
    }
    prev_end = s.start + s.length;
  }
}

namespace {

void push_slot(MultimodalSequence& out, std::size_t count, std::size_t image_index, int tile, const Vocabulary& vocab) {
  out.image_slots.push_back(ImageSlot{out.size(), count, image_index, tile});
  for (std::size_t i = 0; i < count; ++i) out.push(vocab.image(), 0);
}

}  // namespace

void assemble_tiled_image(GridShape grid, std::size_t per_tile_tokens, std::size_t image_index,
                          const Vocabulary& vocab, MultimodalSequence& out) {
  if (per_tile_tokens < 1) throw ParameterError("per_tile_tokens must be >= 1");
  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      out.push(vocab.tile_marker(r + 1, c + 1), 0);
      push_slot(out, per_tile_tokens, image_index, static_cast<int>(r * grid.cols + c), vocab);
    }
    out.push(vocab.newline(), 0);
  }
  out.push(vocab.global_img(), 0);
  push_slot(out, per_tile_tokens, image_index, kGlobalTile, vocab);
}

std::vector<GridShape> parse_tile_layout(const MultimodalSequence& seq, const Vocabulary& vocab) {
  std::vector<GridShape> grids;
  std::size_t rows = 0, cols = 0;
  std::size_t expect_row = 1, expect_col = 1;
  bool open = false;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const TokenId id = seq.token_ids[i];
    if (auto rc = vocab.parse_tile_marker(id)) {
      const auto [r, c] = *rc;
      if (r != expect_row || c != expect_col) {
        throw AssemblyError("tile marker <row_" + std::to_string(r) + "_col_" + std::to_string(c) +
                            "> out of row-major order at position " + std::to_string(i));
      }
      open = true;
      rows = std::max(rows, r);
      cols = std::max(cols, c);
      ++expect_col;
    } else if (id == vocab.newline() && open && expect_col > 1) {
      ++expect_row;
      expect_col = 1;
    } else if (id == vocab.global_img()) {
      if (!open) throw AssemblyError("<global-img> without preceding tiles at position " + std::to_string(i));
      if (expect_col != 1) throw AssemblyError("tile row not terminated by a newline before <global-img>");
      grids.push_back(GridShape{rows, cols});
      rows = cols = 0;
      expect_row = expect_col = 1;
      open = false;
    }
  }
  if (open) throw AssemblyError("tiled image without <global-img> suffix");
  return grids;
}

MultimodalSequence build_training_sequence(std::span<const ChatTurn> turns, std::span<const GridShape> images,
                                           std::size_t per_tile_tokens, const Vocabulary& vocab,
                                           const AssembleOptions& opts) {
  MultimodalSequence seq;
  if (opts.add_bos) seq.push(vocab.bos(), 0);
  for (std::size_t t = 0; t < turns.size(); ++t) {
    const ChatTurn& turn = turns[t];
    if (turn.segments.empty()) throw FormatError("turn " + std::to_string(t) + " has no segments");
    const bool assistant = turn.role == Role::assistant;
    const uint8_t mask = assistant ? 1 : 0;
    seq.push_text(assistant ? kAssistantHeader : kUserHeader, 0, vocab);
    for (const Segment& seg : turn.segments) {
      if (const auto* text = std::get_if<std::string>(&seg)) {
        seq.push_text(*text, mask, vocab);
        continue;
      }
      const auto& ref = std::get<ImageRef>(seg);
      if (assistant) throw FormatError("assistant turn " + std::to_string(t) + " contains an image");
      if (ref.index >= images.size()) {
        throw FormatError("turn " + std::to_string(t) + " references missing image " + std::to_string(ref.index));
      }
      if (opts.layout == ImageLayout::tiled) {
        assemble_tiled_image(images[ref.index], per_tile_tokens, ref.index, vocab, seq);
      } else {
        seq.push(vocab.image(), 0);
      }
    }
    seq.push(vocab.end_of_utterance(), mask);
    seq.push(vocab.newline(), 0);
  }
  if (opts.max_len > 0 && seq.size() > opts.max_len) {
    throw SequenceOverflowError("assembled sequence of " + std::to_string(seq.size()) +
                                " tokens exceeds the cap of " + std::to_string(opts.max_len));
  }
  seq.validate();
  return seq;
}

void append_generation_prompt(MultimodalSequence& seq, const Vocabulary& vocab) {
  seq.push_text(kAssistantHeader, 0, vocab);
}

namespace {

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '\n') {
      out += "\\n";
    } else if (c == '\\') {
      out += "\\\\";
    } else {
      out += c;
    }
  }
  return out;
}

}  // namespace

std::string render_debug(const MultimodalSequence& seq, const Vocabulary& vocab) {
  std::ostringstream os;
  std::size_t slot = 0;
  std::size_t i = 0;
  while (i < seq.size()) {
    if (slot < seq.image_slots.size() && seq.image_slots[slot].start == i) {
      const ImageSlot& s = seq.image_slots[slot++];
      os << "0 | [image " << s.image_index << ' ';
      if (s.tile_index == kGlobalTile) {
        os << "global";
      } else {
        os << "tile " << s.tile_index;
      }
      os << " x" << s.length << "]\n";
      i += s.length;
      continue;
    }
    const uint8_t m = seq.loss_mask[i];
    const std::size_t next_slot = slot < seq.image_slots.size() ? seq.image_slots[slot].start : seq.size();
    std::string run;
    while (i < next_slot && seq.loss_mask[i] == m) run += vocab.text(seq.token_ids[i++]);
    os << static_cast<int>(m) << " | " << escape(run) << '\n';
  }
  return os.str();
}

std::string decode_with_stopwords(const StepFunction& step, std::span<const std::string> stop_words,
                                  std::size_t max_tokens, const Vocabulary& vocab) {
  if (max_tokens < 1) throw ParameterError("decode_with_stopwords: max_tokens must be >= 1");
  std::vector<TokenId> generated;
  std::string text;
  for (std::size_t i = 0; i < max_tokens; ++i) {
    const TokenId id = step(generated);
    if (id == vocab.eos()) break;
    generated.push_back(id);
    text += vocab.text(id);
    std::size_t cut = std::string::npos;
    for (const auto& w : stop_words) {
      if (w.empty()) continue;
      cut = std::min(cut, text.find(w));
    }
    if (cut != std::string::npos) {
      text.resize(cut);
      break;
    }
  }
  while (!text.empty() && std::isspace(static_cast<unsigned char>(text.back()))) text.pop_back();
  return text;
}

}  // namespace vlmkit
