#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "vlmkit/rng.h"
#include "vlmkit/tensor.h"

namespace vlmkit {

// Which training policy governs a parameter.
enum class ParamRole {
  backbone,  // pretrained vision encoder / language model weights
  fresh,     // newly initialised: connector and cross-attention blocks
  adapter,   // LoRA/DoRA factors and magnitudes
};

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamRole role;
};

using ParamList = std::vector<NamedParam>;

struct AdapterConfig {
  std::size_t rank = 8;
  double alpha = 16.0;
  bool dora = true;
  bool target_attention = true;
  bool target_ffn = false;
  bool target_connector = true;

  void validate() const;
  double scale() const { return alpha / static_cast<double>(rank); }
};

struct LowRankAdapter {
  Tensor a;          // [in x rank], small random
  Tensor b;          // [rank x out], zero at attach time
  double scale = 1;  // alpha / rank
  Tensor magnitude;  // [out], DoRA only
};

// y = x W + b, optionally with a LoRA or DoRA adapter on W.
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng, double init_std = -1.0);

  Tensor forward(const Tensor& x) const;
  // Weight actually applied by forward() (base weight plus adapter update).
  Tensor effective_weight() const;
  void attach_adapter(const AdapterConfig& cfg, Rng& rng);
  bool has_adapter() const { return adapter_.has_value(); }

  void collect(const std::string& prefix, ParamRole role, ParamList& out) const;

  std::size_t in_dim() const { return in_; }
  std::size_t out_dim() const { return out_; }
  Tensor& weight() { return weight_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }
  const std::optional<LowRankAdapter>& adapter() const { return adapter_; }
  std::optional<LowRankAdapter>& adapter() { return adapter_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor weight_;  // [in x out]
  Tensor bias_;    // [out] or undefined
  std::optional<LowRankAdapter> adapter_;
};

struct LayerNorm {
  static constexpr double kEps = 1e-5;
  Tensor gain, bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias, kEps); }
  void collect(const std::string& prefix, ParamRole role, ParamList& out) const;
};

// Multi-head attention; queries from one stream, keys/values from another.
class Attention {
 public:
  Attention() = default;
  Attention(std::size_t query_dim, std::size_t kv_dim, std::size_t dim, std::size_t heads, Rng& rng);

  // Optional `weights` receives the per-head [Tq x Tk] attention matrices.
  Tensor forward(const Tensor& queries, const Tensor& keys_values, bool causal,
                 std::vector<Tensor>* weights = nullptr) const;
  void attach_adapters(const AdapterConfig& cfg, Rng& rng);
  void collect(const std::string& prefix, ParamRole role, ParamList& out) const;

  std::size_t heads() const { return heads_; }

 private:
  std::size_t dim_ = 0, heads_ = 1;
  Linear q_, k_, v_, o_;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(std::size_t dim, std::size_t hidden, Rng& rng);
  Tensor forward(const Tensor& x) const { return down_.forward(gelu(up_.forward(x))); }
  void attach_adapters(const AdapterConfig& cfg, Rng& rng);
  void collect(const std::string& prefix, ParamRole role, ParamList& out) const;

 private:
  Linear up_, down_;
};

// Pre-norm transformer block.
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(std::size_t dim, std::size_t heads, std::size_t ffn_hidden, Rng& rng);
  Tensor forward(const Tensor& x, bool causal) const;
  void attach_adapters(const AdapterConfig& cfg, Rng& rng);
  void collect(const std::string& prefix, ParamRole role, ParamList& out) const;

 private:
  LayerNorm ln_attn_, ln_ffn_;
  Attention attn_;
  FeedForward ffn_;
};

// Flamingo-style block: text queries attend to vision memory; both residual
// branches are scaled by tanh of a learned gate.
class GatedCrossBlock {
 public:
  GatedCrossBlock() = default;
  GatedCrossBlock(std::size_t dim, std::size_t memory_dim, std::size_t heads, std::size_t ffn_hidden,
                  double gate_init, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& memory) const;
  void collect(const std::string& prefix, ParamRole role, ParamList& out) const;

  Tensor& attn_gate() { return gate_attn_; }
  Tensor& ffn_gate() { return gate_ffn_; }
  bool gates_closed() const { return gate_attn_.data()[0] == 0.0 && gate_ffn_.data()[0] == 0.0; }

 private:
  LayerNorm ln_attn_, ln_ffn_;
  Attention attn_;
  FeedForward ffn_;
  Tensor gate_attn_, gate_ffn_;
};

// Returns a leaf tensor of N(0, std^2) draws.
Tensor random_normal(Shape shape, double stddev, Rng& rng);

std::size_t param_numel(const ParamList& params);

}  // namespace vlmkit
