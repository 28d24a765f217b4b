#include "vlmkit/layers.h"

#include <cmath>
#include <limits>

namespace vlmkit {

void AdapterConfig::validate() const {
  if (rank < 1) throw ConfigError("adapter rank must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("adapter alpha must be > 0");
}

Tensor random_normal(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(v));
}

std::size_t param_numel(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

// ---- Linear ----------------------------------------------------------------

Linear::Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng, double init_std)
    : in_(in), out_(out) {
  const double std = init_std > 0.0 ? init_std : 1.0 / std::sqrt(static_cast<double>(in));
  weight_ = random_normal({in, out}, std, rng);
  if (with_bias) bias_ = Tensor::zeros({out});
}

Tensor Linear::effective_weight() const {
  if (!adapter_) return weight_;
  const LowRankAdapter& ad = *adapter_;
  Tensor merged = add(weight_, scale(matmul(ad.a, ad.b), ad.scale));
  if (!ad.magnitude.defined()) return merged;
  return mul_trailing(normalize_columns(merged), ad.magnitude);
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y;
  if (adapter_ && !adapter_->magnitude.defined()) {
    // LoRA keeps the base product separate so B = 0 reproduces it exactly.
    y = add(matmul(x, weight_), scale(matmul(matmul(x, adapter_->a), adapter_->b), adapter_->scale));
  } else {
    y = matmul(x, effective_weight());
  }
  return bias_.defined() ? add_trailing(y, bias_) : y;
}

void Linear::attach_adapter(const AdapterConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.rank > std::min(in_, out_)) {
    throw ConfigError("adapter rank " + std::to_string(cfg.rank) + " exceeds weight dimensions " +
                      std::to_string(in_) + "x" + std::to_string(out_));
  }
  LowRankAdapter ad;
  ad.a = random_normal({in_, cfg.rank}, 1.0 / std::sqrt(static_cast<double>(in_)), rng);
  ad.b = Tensor::zeros({cfg.rank, out_});
  ad.scale = cfg.scale();
  if (cfg.dora) {
    NoGradGuard guard;
    ad.magnitude = column_norms(weight_).detach();
  }
  adapter_ = std::move(ad);
}

void Linear::collect(const std::string& prefix, ParamRole role, ParamList& out) const {
  out.push_back({prefix + ".weight", weight_, role});
  if (bias_.defined()) out.push_back({prefix + ".bias", bias_, role});
  if (adapter_) {
    out.push_back({prefix + ".lora_a", adapter_->a, ParamRole::adapter});
    out.push_back({prefix + ".lora_b", adapter_->b, ParamRole::adapter});
    if (adapter_->magnitude.defined()) out.push_back({prefix + ".dora_m", adapter_->magnitude, ParamRole::adapter});
  }
}

// ---- LayerNorm -------------------------------------------------------------

LayerNorm::LayerNorm(std::size_t dim) : gain(Tensor::full({dim}, 1.0)), bias(Tensor::zeros({dim})) {}

void LayerNorm::collect(const std::string& prefix, ParamRole role, ParamList& out) const {
  out.push_back({prefix + ".gain", gain, role});
  out.push_back({prefix + ".bias", bias, role});
}

// ---- Attention -------------------------------------------------------------

Attention::Attention(std::size_t query_dim, std::size_t kv_dim, std::size_t dim, std::size_t heads, Rng& rng)
    : dim_(dim), heads_(heads) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
  }
  q_ = Linear(query_dim, dim, false, rng);
  k_ = Linear(kv_dim, dim, false, rng);
  v_ = Linear(kv_dim, dim, false, rng);
  o_ = Linear(dim, dim, false, rng);
}

Tensor Attention::forward(const Tensor& queries, const Tensor& keys_values, bool causal,
                          std::vector<Tensor>* weights) const {
  const Tensor q = q_.forward(queries);
  const Tensor k = k_.forward(keys_values);
  const Tensor v = v_.forward(keys_values);
  const std::size_t tq = q.dim(0), tk = k.dim(0);
  const std::size_t head_dim = dim_ / heads_;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Tensor mask;
  if (causal) {
    if (tq != tk) throw ShapeError("causal attention needs equal query and key lengths");
    std::vector<double> m(tq * tk, 0.0);
    for (std::size_t i = 0; i < tq; ++i)
      for (std::size_t j = i + 1; j < tk; ++j) m[i * tk + j] = -std::numeric_limits<double>::infinity();
    mask = Tensor::from({tq, tk}, std::move(m));
  }

  std::vector<Tensor> outputs;
  outputs.reserve(heads_);
  for (std::size_t h = 0; h < heads_; ++h) {
    const Tensor qh = heads_ == 1 ? q : slice_cols(q, h * head_dim, head_dim);
    const Tensor kh = heads_ == 1 ? k : slice_cols(k, h * head_dim, head_dim);
    const Tensor vh = heads_ == 1 ? v : slice_cols(v, h * head_dim, head_dim);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    if (causal) scores = add(scores, mask);
    Tensor probs = softmax(scores, 1);
    if (weights) weights->push_back(probs);
    outputs.push_back(matmul(probs, vh));
  }
  const Tensor merged = heads_ == 1 ? outputs[0] : concat_cols(outputs);
  return o_.forward(merged);
}

void Attention::attach_adapters(const AdapterConfig& cfg, Rng& rng) {
  q_.attach_adapter(cfg, rng);
  k_.attach_adapter(cfg, rng);
  v_.attach_adapter(cfg, rng);
  o_.attach_adapter(cfg, rng);
}

void Attention::collect(const std::string& prefix, ParamRole role, ParamList& out) const {
  q_.collect(prefix + ".q", role, out);
  k_.collect(prefix + ".k", role, out);
  v_.collect(prefix + ".v", role, out);
  o_.collect(prefix + ".o", role, out);
}

// ---- FeedForward -----------------------------------------------------------

FeedForward::FeedForward(std::size_t dim, std::size_t hidden, Rng& rng)
    : up_(dim, hidden, true, rng), down_(hidden, dim, true, rng) {}

void FeedForward::attach_adapters(const AdapterConfig& cfg, Rng& rng) {
  up_.attach_adapter(cfg, rng);
  down_.attach_adapter(cfg, rng);
}

void FeedForward::collect(const std::string& prefix, ParamRole role, ParamList& out) const {
  up_.collect(prefix + ".up", role, out);
  down_.collect(prefix + ".down", role, out);
}

// ---- blocks ----------------------------------------------------------------

TransformerBlock::TransformerBlock(std::size_t dim, std::size_t heads, std::size_t ffn_hidden, Rng& rng)
    : ln_attn_(dim), ln_ffn_(dim), attn_(dim, dim, dim, heads, rng), ffn_(dim, ffn_hidden, rng) {}

Tensor TransformerBlock::forward(const Tensor& x, bool causal) const {
  const Tensor normed = ln_attn_.forward(x);
  const Tensor h = add(x, attn_.forward(normed, normed, causal));
  return add(h, ffn_.forward(ln_ffn_.forward(h)));
}

void TransformerBlock::attach_adapters(const AdapterConfig& cfg, Rng& rng) {
  if (cfg.target_attention) attn_.attach_adapters(cfg, rng);
  if (cfg.target_ffn) ffn_.attach_adapters(cfg, rng);
}

void TransformerBlock::collect(const std::string& prefix, ParamRole role, ParamList& out) const {
  ln_attn_.collect(prefix + ".ln_attn", role, out);
  attn_.collect(prefix + ".attn", role, out);
  ln_ffn_.collect(prefix + ".ln_ffn", role, out);
  ffn_.collect(prefix + ".ffn", role, out);
}

GatedCrossBlock::GatedCrossBlock(std::size_t dim, std::size_t memory_dim, std::size_t heads, std::size_t ffn_hidden,
                                 double gate_init, Rng& rng)
    : ln_attn_(dim),
      ln_ffn_(dim),
      attn_(dim, memory_dim, dim, heads, rng),
      ffn_(dim, ffn_hidden, rng),
      gate_attn_(Tensor::scalar(gate_init)),
      gate_ffn_(Tensor::scalar(gate_init)) {}

Tensor GatedCrossBlock::forward(const Tensor& x, const Tensor& memory) const {
  const Tensor h = add(x, scale_by(attn_.forward(ln_attn_.forward(x), memory, false), tanh(gate_attn_)));
  return add(h, scale_by(ffn_.forward(ln_ffn_.forward(h)), tanh(gate_ffn_)));
}

void GatedCrossBlock::collect(const std::string& prefix, ParamRole role, ParamList& out) const {
  ln_attn_.collect(prefix + ".ln_attn", role, out);
  attn_.collect(prefix + ".attn", role, out);
  out.push_back({prefix + ".gate_attn", gate_attn_, role});
  ln_ffn_.collect(prefix + ".ln_ffn", role, out);
  ffn_.collect(prefix + ".ffn", role, out);
  out.push_back({prefix + ".gate_ffn", gate_ffn_, role});
}

}  // namespace vlmkit
