#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "vlmkit/layers.h"
#include "vlmkit/sequence.h"
#include "vlmkit/tensor.h"

namespace vlmkit {

enum class ConnectorKind { linear, perceiver, pixel_shuffle };

std::string to_string(ConnectorKind kind);
ConnectorKind parse_connector_kind(const std::string& s);

struct ConnectorConfig {
  ConnectorKind kind = ConnectorKind::pixel_shuffle;
  std::size_t vision_dim = 64;
  std::size_t text_dim = 128;
  std::size_t latent_count = 64;
  std::size_t shuffle_factor = 2;
  std::size_t perceiver_heads = 1;
  // Adds fixed 2-D sinusoidal positions to the hidden states the latents
  // attend over. Off by default.
  bool perceiver_pos2d = false;

  void validate() const;
  // Visual tokens emitted for one tile encoded into a grid_h x grid_w map.
  std::size_t tokens_per_tile(std::size_t grid_h, std::size_t grid_w) const;
};

struct VisualTokens {
  Tensor values;  // [count x text_dim]
  int origin = 0;  // tile index, or kGlobalTile

  std::size_t count() const { return values.dim(0); }
  std::size_t dim() const { return values.dim(1); }
};

// Space-to-depth reindexing: each r x r neighbourhood of a grid_h x grid_w map
// becomes one row holding the r^2 states in row-major neighbourhood order.
std::vector<std::size_t> pixel_shuffle_index(std::size_t grid_h, std::size_t grid_w, std::size_t r, std::size_t dim);
Tensor pixel_shuffle_reindex(const Tensor& hidden, std::size_t grid_h, std::size_t grid_w, std::size_t r);
Tensor pixel_unshuffle(const Tensor& shuffled, std::size_t grid_h, std::size_t grid_w, std::size_t r);

class Connector {
 public:
  Connector() = default;
  Connector(const ConnectorConfig& cfg, Rng& rng);

  const ConnectorConfig& config() const { return cfg_; }

  // Routes to the configured connector family.
  VisualTokens project(const Tensor& hidden, std::size_t grid_h, std::size_t grid_w, int origin = 0) const;

  VisualTokens linear_project(const Tensor& hidden, int origin = 0) const;
  // `attention` receives the per-head [latents x M] attention weights.
  VisualTokens perceiver_resample(const Tensor& hidden, std::vector<Tensor>* attention = nullptr,
                                  std::size_t grid_h = 0, std::size_t grid_w = 0, int origin = 0) const;
  VisualTokens pixel_shuffle(const Tensor& hidden, std::size_t grid_h, std::size_t grid_w, int origin = 0) const;

  void attach_adapters(const AdapterConfig& cfg, Rng& rng);
  void collect(const std::string& prefix, ParamList& out) const;

  Linear& projection() { return proj_; }

 private:
  void require_kind(ConnectorKind kind, const char* op) const;
  void require_width(const Tensor& hidden, const char* op) const;

  ConnectorConfig cfg_;
  Linear proj_;
  // perceiver only
  Tensor latents_;
  LayerNorm ln_latents_, ln_context_, ln_ffn_;
  Attention attn_;
  FeedForward ffn_;
};

}  // namespace vlmkit
