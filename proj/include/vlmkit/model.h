#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vlmkit/checkpoint.h"
#include "vlmkit/config.h"
#include "vlmkit/connector.h"
#include "vlmkit/image.h"
#include "vlmkit/layers.h"
#include "vlmkit/sequence.h"

namespace vlmkit {

struct VisionEncoderConfig {
  std::size_t patch_side = 14;
  std::size_t dim = 64;
  std::size_t depth = 2;
  std::size_t heads = 4;
};

struct DecoderLMConfig {
  std::size_t vocab_size = 300;
  std::size_t dim = 128;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t max_seq_len = 1024;
};

enum class FusionMode { self_attention, cross_attention };

std::string to_string(FusionMode mode);
FusionMode parse_fusion_mode(const std::string& s);

struct FusionConfig {
  FusionMode mode = FusionMode::self_attention;
  std::size_t cross_period = 4;
  double cross_gate_init = 0.0;
};

struct ModelConfig {
  std::size_t tile_side = 364;
  std::size_t max_grid = 5;  // tile markers reserved per axis
  VisionEncoderConfig vision;
  DecoderLMConfig lm;
  ConnectorKind connector = ConnectorKind::pixel_shuffle;
  std::size_t latent_count = 64;
  std::size_t shuffle_factor = 2;
  std::size_t perceiver_heads = 1;
  bool perceiver_pos2d = false;
  FusionConfig fusion;
  AdapterConfig adapter;
  double neftune_alpha = 5.0;
  uint64_t seed = 0;

  void validate() const;
  ConnectorConfig connector_config() const;
  std::size_t patch_grid() const { return tile_side / vision.patch_side; }

  static ModelConfig from_tree(const ConfigTree& tree);
  static ModelConfig load(const std::filesystem::path& path);
  ConfigTree to_tree() const;
};

// Small enough to train a few steps at 364-pixel tiles on a laptop core.
ModelConfig desk_model_config();

enum class Freezing { frozen, adapters, full };

std::string to_string(Freezing f);
Freezing parse_freezing(const std::string& s);

// Adds uniform noise in [-1, 1] scaled by alpha / sqrt(T * d) in training
// mode; returns the input untouched otherwise.
Tensor neftune_embed(const Tensor& embeddings, double alpha, bool training, uint64_t seed);

struct NoiseOptions {
  bool training = false;
  double alpha = 0.0;
  uint64_t seed = 0;
};

// Visual tokens for one image: one entry per tile in row-major order, then
// the global image.
using ImageTokens = std::vector<VisualTokens>;

class VisionLanguageModel {
 public:
  explicit VisionLanguageModel(const ModelConfig& cfg);
  VisionLanguageModel(const VisionLanguageModel&) = delete;
  VisionLanguageModel& operator=(const VisionLanguageModel&) = delete;
  VisionLanguageModel(VisionLanguageModel&&) = default;
  VisionLanguageModel& operator=(VisionLanguageModel&&) = default;

  const ModelConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  const Connector& connector() const { return connector_; }
  std::size_t tokens_per_tile() const;
  std::size_t cross_block_count() const { return cross_.size(); }
  std::vector<GatedCrossBlock>& cross_blocks() { return cross_; }

  // [grid_h*grid_w x vision.dim], one state per patch.
  Tensor encode_image(const PatchSequence& patches) const;
  ImageTokens encode_tiles(const TileGrid& grid) const;

  // Token embeddings with each image slot replaced by its visual tokens,
  // run through the causal decoder. `slot_tokens` aligns with seq.image_slots.
  Tensor forward_self_attention(const MultimodalSequence& seq, std::span<const VisualTokens> slot_tokens,
                                const NoiseOptions& noise = {}) const;
  // Text-only decoder with gated cross-attention blocks over `memory`
  // ([M x lm.dim], possibly undefined when there are no images).
  Tensor forward_cross_attention(std::span<const TokenId> tokens, const Tensor& memory,
                                 const NoiseOptions& noise = {}) const;
  // Plain decoder: no images and no cross blocks.
  Tensor forward_text(std::span<const TokenId> tokens, const NoiseOptions& noise = {}) const;

  // Dispatches on the fusion mode. `images` holds encoded tokens per image
  // referenced by the sequence.
  Tensor forward(const MultimodalSequence& seq, std::span<const ImageTokens> images,
                 const NoiseOptions& noise = {}) const;

  // Next-token loss restricted to supervised positions.
  Tensor loss(const MultimodalSequence& seq, std::span<const ImageTokens> images,
              const NoiseOptions& noise = {}) const;

  AssembleOptions assemble_options(std::size_t max_len = 0) const;

  // Greedy answer to the prompt turns, cut at the evaluation stop words.
  std::string generate(std::span<const TileGrid> images, std::span<const ChatTurn> prompt, std::size_t max_tokens,
                       std::span<const std::string> stop_words = default_stop_words()) const;
  // Next-token step over a fixed prompt, for callers running their own loop.
  StepFunction greedy_step(const MultimodalSequence& prompt, std::vector<ImageTokens> images) const;

  void apply_adapters(const AdapterConfig& cfg);
  bool has_adapters() const { return adapters_applied_; }

  ParamList parameters() const;
  void set_trainable(Freezing policy);

  void save(Checkpoint& ck) const;
  // Applies adapters first when the checkpoint carries them.
  void load(const Checkpoint& ck);

 private:
  Tensor decode(Tensor hidden, const Tensor* memory, const NoiseOptions& noise) const;
  Tensor embed(std::span<const TokenId> tokens) const;

  ModelConfig cfg_;
  Vocabulary vocab_;
  Rng rng_;
  // vision encoder
  Linear patch_embed_;
  Tensor row_pos_, col_pos_;
  std::vector<TransformerBlock> vision_blocks_;
  LayerNorm vision_ln_;
  // connector
  Connector connector_;
  // language model
  Tensor tok_emb_, pos_emb_;
  std::vector<TransformerBlock> lm_blocks_;
  std::vector<GatedCrossBlock> cross_;
  LayerNorm lm_ln_;
  Linear lm_head_;
  bool adapters_applied_ = false;
  AdapterConfig applied_adapter_;
};

// Closed-form parameter count for a configuration (optionally with adapters).
std::size_t analytic_parameter_count(const ModelConfig& cfg, bool with_adapters);

// Attention + feed-forward weights of the decoder blocks and of the inserted
// cross-attention blocks.
struct FusionParameterSplit {
  std::size_t decoder_block_params = 0;
  std::size_t cross_block_params = 0;
  std::size_t decoder_total_params = 0;
  double ratio() const { return static_cast<double>(cross_block_params) / static_cast<double>(decoder_block_params); }
};
FusionParameterSplit measure_fusion_parameters(const VisionLanguageModel& model);

}  // namespace vlmkit
