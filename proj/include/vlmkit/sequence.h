#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "vlmkit/error.h"

namespace vlmkit {

using TokenId = std::size_t;

// Byte-level vocabulary: ids 0..255 are raw bytes, specials follow densely.
// Special tokens are only ever produced by the assembler, never by tokenize().
class Vocabulary {
 public:
  static constexpr TokenId kByteCount = 256;

  explicit Vocabulary(std::size_t max_grid = 5);

  std::size_t size() const { return names_.size(); }
  std::size_t max_grid() const { return max_grid_; }

  TokenId bos() const { return bos_; }
  TokenId eos() const { return eos_; }
  TokenId end_of_utterance() const { return eou_; }
  TokenId image() const { return image_; }
  TokenId fake_token_around_image() const { return fake_; }
  TokenId global_img() const { return global_; }
  TokenId newline() const { return '\n'; }
  // <row_{row}_col_{col}>, both 1-indexed.
  TokenId tile_marker(std::size_t row, std::size_t col) const;
  std::optional<std::pair<std::size_t, std::size_t>> parse_tile_marker(TokenId id) const;

  bool is_special(TokenId id) const { return id >= kByteCount; }
  // Byte value for byte ids, the token text for specials.
  const std::string& text(TokenId id) const;
  std::optional<TokenId> find_special(const std::string& name) const;

 private:
  TokenId add_special(const std::string& name);

  std::size_t max_grid_;
  std::vector<std::string> names_;
  std::unordered_map<std::string, TokenId> specials_;
  TokenId bos_, eos_, eou_, image_, fake_, global_, first_marker_;
};

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab);
std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab);

struct GridShape {
  std::size_t rows = 1;
  std::size_t cols = 1;
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

inline constexpr int kGlobalTile = -1;

struct ImageSlot {
  std::size_t start = 0;
  std::size_t length = 0;
  std::size_t image_index = 0;
  int tile_index = 0;  // row-major tile, or kGlobalTile
};

struct MultimodalSequence {
  std::vector<TokenId> token_ids;
  std::vector<ImageSlot> image_slots;
  std::vector<uint8_t> loss_mask;

  std::size_t size() const { return token_ids.size(); }
  std::size_t image_token_count() const;
  void push(TokenId id, uint8_t mask);
  void push_text(std::string_view text, uint8_t mask, const Vocabulary& vocab);
  // Throws AssemblyError if spans overlap, leave the sequence, or are supervised.
  void validate() const;
};

// Appends the tiled layout of one image: per row, each tile's marker and slot,
// then a newline; finally <global-img> and the global slot.
void assemble_tiled_image(GridShape grid, std::size_t per_tile_tokens, std::size_t image_index,
                          const Vocabulary& vocab, MultimodalSequence& out);

// Recovers the grid of every image in order by scanning tile markers.
std::vector<GridShape> parse_tile_layout(const MultimodalSequence& seq, const Vocabulary& vocab);

enum class Role { user, assistant };

struct ImageRef {
  std::size_t index = 0;
};

using Segment = std::variant<std::string, ImageRef>;

struct ChatTurn {
  Role role = Role::user;
  std::vector<Segment> segments;
};

enum class ImageLayout {
  tiled,        // slots filled by visual tokens (self-attention fusion)
  placeholder,  // a single <image> token per image (cross-attention fusion)
};

struct AssembleOptions {
  ImageLayout layout = ImageLayout::tiled;
  std::size_t max_len = 0;  // 0 disables the cap
  bool add_bos = true;
};

inline constexpr std::string_view kUserHeader = "User: ";
inline constexpr std::string_view kAssistantHeader = "Assistant: ";

MultimodalSequence build_training_sequence(std::span<const ChatTurn> turns, std::span<const GridShape> images,
                                           std::size_t per_tile_tokens, const Vocabulary& vocab,
                                           const AssembleOptions& opts = {});

// Appends the assistant header so that a model continues with the answer.
void append_generation_prompt(MultimodalSequence& seq, const Vocabulary& vocab);

// Text rendering with slot placeholders and per-run mask values.
std::string render_debug(const MultimodalSequence& seq, const Vocabulary& vocab);

// Returns the next token given all tokens generated so far.
using StepFunction = std::function<TokenId(std::span<const TokenId>)>;

inline const std::vector<std::string>& default_stop_words() {
  static const std::vector<std::string> words = {"Question", "User", "<end_of_utterance>"};
  return words;
}

// Greedy decoding loop that halts on EOS or when the decoded text contains a
// stop word. The stop word and anything after it are cut, then trailing
// whitespace is trimmed.
std::string decode_with_stopwords(const StepFunction& step, std::span<const std::string> stop_words,
                                  std::size_t max_tokens, const Vocabulary& vocab);

}  // namespace vlmkit
