#include "vlmkit/model.h"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace vlmkit {

std::string to_string(FusionMode mode) {
  return mode == FusionMode::self_attention ? "self_attention" : "cross_attention";
}

FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "self_attention") return FusionMode::self_attention;
  if (s == "cross_attention") return FusionMode::cross_attention;
  throw ConfigError("unknown fusion mode '" + s + "' (expected self_attention or cross_attention)");
}

std::string to_string(Freezing f) {
  switch (f) {
    case Freezing::frozen:
      return "frozen";
    case Freezing::adapters:
      return "adapters";
    case Freezing::full:
      return "full";
  }
  return "?";
}

Freezing parse_freezing(const std::string& s) {
  std::string v = trim(s);
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "frozen") return Freezing::frozen;
  if (v == "adapters" || v == "lora" || v == "dora") return Freezing::adapters;
  if (v == "full") return Freezing::full;
  throw ConfigError("unknown freezing policy '" + s + "' (expected frozen, lora/adapters or full)");
}

// ---- config ----------------------------------------------------------------

void ModelConfig::validate() const {
  if (tile_side == 0) throw ConfigError("tile_side must be > 0");
  if (vision.patch_side == 0 || tile_side % vision.patch_side != 0) {
    throw ConfigError("tile_side " + std::to_string(tile_side) + " is not divisible by patch_side " +
                      std::to_string(vision.patch_side));
  }
  if (vision.heads == 0 || vision.dim % vision.heads != 0) throw ConfigError("vision dim must be divisible by heads");
  if (lm.heads == 0 || lm.dim % lm.heads != 0) throw ConfigError("lm dim must be divisible by heads");
  if (vision.depth == 0 || lm.depth == 0) throw ConfigError("depths must be >= 1");
  if (lm.max_seq_len == 0) throw ConfigError("max_seq_len must be >= 1");
  if (fusion.cross_period < 1) throw ConfigError("cross_period must be >= 1");
  if (!(neftune_alpha >= 0.0)) throw ConfigError("neftune_alpha must be >= 0");
  const Vocabulary v(max_grid);
  if (lm.vocab_size < v.size()) {
    throw ConfigError("vocab_size " + std::to_string(lm.vocab_size) + " is smaller than the " +
                      std::to_string(v.size()) + " byte and special tokens");
  }
  connector_config().validate();
  adapter.validate();
  if (connector == ConnectorKind::pixel_shuffle) connector_config().tokens_per_tile(patch_grid(), patch_grid());
}

ConnectorConfig ModelConfig::connector_config() const {
  ConnectorConfig c;
  c.kind = connector;
  c.vision_dim = vision.dim;
  c.text_dim = lm.dim;
  c.latent_count = latent_count;
  c.shuffle_factor = shuffle_factor;
  c.perceiver_heads = perceiver_heads;
  c.perceiver_pos2d = perceiver_pos2d;
  return c;
}

ModelConfig ModelConfig::from_tree(const ConfigTree& t) {
  require_known_keys(t, "model", {"tile_side", "max_grid", "neftune_alpha", "seed"});
  require_known_keys(t, "vision", {"patch_side", "dim", "depth", "heads"});
  require_known_keys(t, "lm", {"vocab_size", "dim", "depth", "heads", "max_seq_len"});
  require_known_keys(t, "connector", {"kind", "latent_count", "shuffle_factor", "perceiver_heads", "perceiver_pos2d"});
  require_known_keys(t, "fusion", {"mode", "cross_period", "cross_gate_init"});
  require_known_keys(t, "adapter", {"rank", "alpha", "dora", "targets"});
  for (const auto& [section, _] : t) {
    static const std::vector<std::string> known = {"model", "vision", "lm", "connector", "fusion", "adapter"};
    if (std::find(known.begin(), known.end(), section) == known.end()) {
      throw ConfigError("unknown model config section [" + section + "]");
    }
  }
  ModelConfig c;
  c.tile_side = config_size(t, "model.tile_side", c.tile_side);
  c.max_grid = config_size(t, "model.max_grid", c.max_grid);
  c.neftune_alpha = config_double(t, "model.neftune_alpha", c.neftune_alpha);
  c.seed = config_size(t, "model.seed", c.seed);
  c.vision.patch_side = config_size(t, "vision.patch_side", c.vision.patch_side);
  c.vision.dim = config_size(t, "vision.dim", c.vision.dim);
  c.vision.depth = config_size(t, "vision.depth", c.vision.depth);
  c.vision.heads = config_size(t, "vision.heads", c.vision.heads);
  c.lm.vocab_size = config_size(t, "lm.vocab_size", c.lm.vocab_size);
  c.lm.dim = config_size(t, "lm.dim", c.lm.dim);
  c.lm.depth = config_size(t, "lm.depth", c.lm.depth);
  c.lm.heads = config_size(t, "lm.heads", c.lm.heads);
  c.lm.max_seq_len = config_size(t, "lm.max_seq_len", c.lm.max_seq_len);
  c.connector = parse_connector_kind(config_string(t, "connector.kind", to_string(c.connector)));
  c.latent_count = config_size(t, "connector.latent_count", c.latent_count);
  c.shuffle_factor = config_size(t, "connector.shuffle_factor", c.shuffle_factor);
  c.perceiver_heads = config_size(t, "connector.perceiver_heads", c.perceiver_heads);
  c.perceiver_pos2d = config_bool(t, "connector.perceiver_pos2d", c.perceiver_pos2d);
  c.fusion.mode = parse_fusion_mode(config_string(t, "fusion.mode", to_string(c.fusion.mode)));
  c.fusion.cross_period = config_size(t, "fusion.cross_period", c.fusion.cross_period);
  c.fusion.cross_gate_init = config_double(t, "fusion.cross_gate_init", c.fusion.cross_gate_init);
  c.adapter.rank = config_size(t, "adapter.rank", c.adapter.rank);
  c.adapter.alpha = config_double(t, "adapter.alpha", c.adapter.alpha);
  c.adapter.dora = config_bool(t, "adapter.dora", c.adapter.dora);
  if (auto targets = t.get_optional<std::string>("adapter.targets")) {
    c.adapter.target_attention = c.adapter.target_ffn = c.adapter.target_connector = false;
    std::istringstream is(*targets);
    std::string item;
    while (std::getline(is, item, ',')) {
      item = trim(item);
      if (item == "attention") {
        c.adapter.target_attention = true;
      } else if (item == "ffn") {
        c.adapter.target_ffn = true;
      } else if (item == "connector") {
        c.adapter.target_connector = true;
      } else if (!item.empty()) {
        throw ConfigError("unknown adapter target '" + item + "'");
      }
    }
  }
  c.validate();
  return c;
}

ModelConfig desk_model_config() {
  ModelConfig c;
  c.vision.patch_side = 26;
  c.vision.dim = 32;
  c.vision.depth = 1;
  c.vision.heads = 2;
  c.lm.dim = 64;
  c.lm.depth = 2;
  c.lm.heads = 2;
  c.lm.max_seq_len = 512;
  c.latent_count = 16;
  c.validate();
  return c;
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) { return from_tree(read_config_file(path)); }

namespace {

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

ConfigTree ModelConfig::to_tree() const {
  ConfigTree t;
  t.put("model.tile_side", tile_side);
  t.put("model.max_grid", max_grid);
  t.put("model.neftune_alpha", fmt_double(neftune_alpha));
  t.put("model.seed", seed);
  t.put("vision.patch_side", vision.patch_side);
  t.put("vision.dim", vision.dim);
  t.put("vision.depth", vision.depth);
  t.put("vision.heads", vision.heads);
  t.put("lm.vocab_size", lm.vocab_size);
  t.put("lm.dim", lm.dim);
  t.put("lm.depth", lm.depth);
  t.put("lm.heads", lm.heads);
  t.put("lm.max_seq_len", lm.max_seq_len);
  t.put("connector.kind", to_string(connector));
  t.put("connector.latent_count", latent_count);
  t.put("connector.shuffle_factor", shuffle_factor);
  t.put("connector.perceiver_heads", perceiver_heads);
  t.put("connector.perceiver_pos2d", perceiver_pos2d ? "true" : "false");
  t.put("fusion.mode", to_string(fusion.mode));
  t.put("fusion.cross_period", fusion.cross_period);
  t.put("fusion.cross_gate_init", fmt_double(fusion.cross_gate_init));
  t.put("adapter.rank", adapter.rank);
  t.put("adapter.alpha", fmt_double(adapter.alpha));
  t.put("adapter.dora", adapter.dora ? "true" : "false");
  std::string targets;
  auto append = [&](bool on, const char* name) {
    if (!on) return;
    if (!targets.empty()) targets += ",";
    targets += name;
  };
  append(adapter.target_attention, "attention");
  append(adapter.target_ffn, "ffn");
  append(adapter.target_connector, "connector");
  t.put("adapter.targets", targets);
  return t;
}

// ---- NEFTune ---------------------------------------------------------------

Tensor neftune_embed(const Tensor& embeddings, double alpha, bool training, uint64_t seed) {
  if (!(alpha >= 0.0)) throw ParameterError("neftune alpha must be >= 0");
  if (!training || alpha == 0.0) return embeddings;
  const double bound = alpha / std::sqrt(static_cast<double>(embeddings.numel()));
  Rng rng(seed);
  std::vector<double> noise(embeddings.numel());
  for (auto& v : noise) v = rng.uniform(-1.0, 1.0) * bound;
  return add(embeddings, Tensor::from(embeddings.shape(), std::move(noise)));
}

// ---- model -----------------------------------------------------------------

VisionLanguageModel::VisionLanguageModel(const ModelConfig& cfg) : cfg_(cfg), vocab_(cfg.max_grid), rng_(cfg.seed) {
  cfg_.validate();
  const std::size_t grid = cfg_.patch_grid();
  const std::size_t patch_dim = cfg_.vision.patch_side * cfg_.vision.patch_side * RawImage::kChannels;
  const std::size_t vd = cfg_.vision.dim, d = cfg_.lm.dim;

  patch_embed_ = Linear(patch_dim, vd, true, rng_);
  row_pos_ = random_normal({grid, vd}, 0.1, rng_);
  col_pos_ = random_normal({grid, vd}, 0.1, rng_);
  for (std::size_t i = 0; i < cfg_.vision.depth; ++i) vision_blocks_.emplace_back(vd, cfg_.vision.heads, 4 * vd, rng_);
  vision_ln_ = LayerNorm(vd);

  connector_ = Connector(cfg_.connector_config(), rng_);

  tok_emb_ = random_normal({cfg_.lm.vocab_size, d}, 0.1, rng_);
  pos_emb_ = random_normal({cfg_.lm.max_seq_len, d}, 0.02, rng_);
  for (std::size_t i = 0; i < cfg_.lm.depth; ++i) lm_blocks_.emplace_back(d, cfg_.lm.heads, 4 * d, rng_);
  if (cfg_.fusion.mode == FusionMode::cross_attention) {
    const std::size_t n = cfg_.lm.depth / cfg_.fusion.cross_period;
    for (std::size_t i = 0; i < n; ++i) cross_.emplace_back(d, d, cfg_.lm.heads, 4 * d, cfg_.fusion.cross_gate_init, rng_);
  }
  lm_ln_ = LayerNorm(d);
  lm_head_ = Linear(d, cfg_.lm.vocab_size, false, rng_);
}

std::size_t VisionLanguageModel::tokens_per_tile() const {
  return cfg_.connector_config().tokens_per_tile(cfg_.patch_grid(), cfg_.patch_grid());
}

Tensor VisionLanguageModel::encode_image(const PatchSequence& patches) const {
  if (!patches.patches.defined() || patches.patches.dim(0) != patches.count()) {
    throw ShapeError("encode_image: patch tensor does not hold grid_h*grid_w patches");
  }
  if (patches.patch_side != cfg_.vision.patch_side || patches.patches.dim(1) != patch_embed_.in_dim()) {
    throw ShapeError("encode_image: patch side " + std::to_string(patches.patch_side) + " does not match encoder " +
                     std::to_string(cfg_.vision.patch_side));
  }
  if (patches.grid_h > cfg_.patch_grid() || patches.grid_w > cfg_.patch_grid()) {
    throw ShapeError("encode_image: patch grid exceeds positional table of " + std::to_string(cfg_.patch_grid()));
  }
  std::vector<std::size_t> rows, cols;
  for (std::size_t y = 0; y < patches.grid_h; ++y)
    for (std::size_t x = 0; x < patches.grid_w; ++x) {
      rows.push_back(y);
      cols.push_back(x);
    }
  Tensor h = add(add(patch_embed_.forward(patches.patches), gather_rows(row_pos_, rows)), gather_rows(col_pos_, cols));
  for (const auto& block : vision_blocks_) h = block.forward(h, false);
  return vision_ln_.forward(h);
}

ImageTokens VisionLanguageModel::encode_tiles(const TileGrid& grid) const {
  ImageTokens out;
  out.reserve(grid.image_count());
  auto encode_one = [&](const RawImage& tile, int origin) {
    const PatchSequence ps = patchify(tile, cfg_.vision.patch_side);
    out.push_back(connector_.project(encode_image(ps), ps.grid_h, ps.grid_w, origin));
  };
  for (std::size_t i = 0; i < grid.tiles.size(); ++i) encode_one(grid.tiles[i], static_cast<int>(i));
  encode_one(grid.global_image, kGlobalTile);
  return out;
}

Tensor VisionLanguageModel::embed(std::span<const TokenId> tokens) const {
  if (tokens.empty()) throw ShapeError("empty token sequence");
  if (tokens.size() > cfg_.lm.max_seq_len) {
    throw SequenceOverflowError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                                std::to_string(cfg_.lm.max_seq_len));
  }
  return gather_rows(tok_emb_, tokens);
}

Tensor VisionLanguageModel::decode(Tensor hidden, const Tensor* memory, const NoiseOptions& noise) const {
  const std::size_t t = hidden.dim(0);
  hidden = neftune_embed(hidden, noise.alpha, noise.training, noise.seed);
  hidden = add(hidden, slice_rows(pos_emb_, 0, t));
  std::size_t next_cross = 0;
  for (std::size_t i = 0; i < lm_blocks_.size(); ++i) {
    hidden = lm_blocks_[i].forward(hidden, true);
    if (memory && (i + 1) % cfg_.fusion.cross_period == 0 && next_cross < cross_.size()) {
      hidden = cross_[next_cross++].forward(hidden, *memory);
    }
  }
  return lm_head_.forward(lm_ln_.forward(hidden));
}

Tensor VisionLanguageModel::forward_self_attention(const MultimodalSequence& seq, std::span<const VisualTokens> slot_tokens,
                                                   const NoiseOptions& noise) const {
  seq.validate();
  if (slot_tokens.size() != seq.image_slots.size()) {
    throw AssemblyError("sequence has " + std::to_string(seq.image_slots.size()) + " image slots but " +
                        std::to_string(slot_tokens.size()) + " visual token blocks were supplied");
  }
  const Tensor emb = embed(seq.token_ids);
  if (seq.image_slots.empty()) return decode(emb, nullptr, noise);
  std::vector<Tensor> parts;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < seq.image_slots.size(); ++i) {
    const ImageSlot& slot = seq.image_slots[i];
    const VisualTokens& vt = slot_tokens[i];
    if (vt.count() != slot.length || vt.dim() != cfg_.lm.dim) {
      throw AssemblyError("image slot at " + std::to_string(slot.start) + " expects " + std::to_string(slot.length) +
                          " tokens of width " + std::to_string(cfg_.lm.dim) + ", got " + shape_str(vt.values.shape()));
    }
    if (slot.start > pos) parts.push_back(slice_rows(emb, pos, slot.start - pos));
    parts.push_back(vt.values);
    pos = slot.start + slot.length;
  }
  if (pos < seq.size()) parts.push_back(slice_rows(emb, pos, seq.size() - pos));
  return decode(concat_rows(parts), nullptr, noise);
}

Tensor VisionLanguageModel::forward_cross_attention(std::span<const TokenId> tokens, const Tensor& memory,
                                                    const NoiseOptions& noise) const {
  if (cfg_.fusion.mode != FusionMode::cross_attention) {
    throw ConfigError("forward_cross_attention on a model built for " + to_string(cfg_.fusion.mode));
  }
  if (!memory.defined()) {
    for (const auto& block : cross_) {
      if (!block.gates_closed()) throw ConfigError("cross-attention gates are open but there are no vision states");
    }
    return decode(embed(tokens), nullptr, noise);
  }
  if (memory.rank() != 2 || memory.dim(1) != cfg_.lm.dim) {
    throw ShapeError("cross-attention memory " + shape_str(memory.shape()) + " must have width " +
                     std::to_string(cfg_.lm.dim));
  }
  return decode(embed(tokens), &memory, noise);
}

Tensor VisionLanguageModel::forward_text(std::span<const TokenId> tokens, const NoiseOptions& noise) const {
  return decode(embed(tokens), nullptr, noise);
}

Tensor VisionLanguageModel::forward(const MultimodalSequence& seq, std::span<const ImageTokens> images,
                                    const NoiseOptions& noise) const {
  if (cfg_.fusion.mode == FusionMode::self_attention) {
    std::vector<VisualTokens> slots;
    slots.reserve(seq.image_slots.size());
    for (const ImageSlot& s : seq.image_slots) {
      if (s.image_index >= images.size()) throw AssemblyError("image slot references missing image");
      const ImageTokens& img = images[s.image_index];
      if (s.tile_index == kGlobalTile) {
        slots.push_back(img.back());
      } else {
        if (static_cast<std::size_t>(s.tile_index) + 1 >= img.size()) throw AssemblyError("image slot references missing tile");
        slots.push_back(img[static_cast<std::size_t>(s.tile_index)]);
      }
    }
    return forward_self_attention(seq, slots, noise);
  }
  std::vector<Tensor> parts;
  for (const ImageTokens& img : images)
    for (const VisualTokens& vt : img) parts.push_back(vt.values);
  const Tensor memory = parts.empty() ? Tensor() : concat_rows(parts);
  return forward_cross_attention(seq.token_ids, memory, noise);
}

Tensor VisionLanguageModel::loss(const MultimodalSequence& seq, std::span<const ImageTokens> images,
                                 const NoiseOptions& noise) const {
  if (seq.size() < 2) throw EmptyLossError("sequence too short for next-token loss");
  const Tensor logits = forward(seq, images, noise);
  const std::size_t t = seq.size() - 1;
  return cross_entropy_masked(slice_rows(logits, 0, t), std::span(seq.token_ids).subspan(1),
                              std::span(seq.loss_mask).subspan(1));
}

AssembleOptions VisionLanguageModel::assemble_options(std::size_t max_len) const {
  AssembleOptions opts;
  opts.layout = cfg_.fusion.mode == FusionMode::self_attention ? ImageLayout::tiled : ImageLayout::placeholder;
  opts.max_len = max_len;
  return opts;
}

StepFunction VisionLanguageModel::greedy_step(const MultimodalSequence& prompt, std::vector<ImageTokens> images) const {
  return [this, prompt, images = std::move(images)](std::span<const TokenId> generated) -> TokenId {
    if (prompt.size() + generated.size() >= cfg_.lm.max_seq_len) return vocab_.eos();
    MultimodalSequence seq = prompt;
    for (TokenId id : generated) seq.push(id, 0);
    NoGradGuard guard;
    const Tensor logits = forward(seq, images);
    const std::size_t vocab = logits.dim(1);
    const auto data = logits.data();
    const double* row = data.data() + (seq.size() - 1) * vocab;
    const std::size_t usable = std::min(vocab, vocab_.size());
    return static_cast<TokenId>(std::max_element(row, row + usable) - row);
  };
}

std::string VisionLanguageModel::generate(std::span<const TileGrid> images, std::span<const ChatTurn> prompt,
                                          std::size_t max_tokens, std::span<const std::string> stop_words) const {
  std::vector<GridShape> shapes;
  std::vector<ImageTokens> encoded;
  {
    NoGradGuard guard;
    for (const TileGrid& g : images) {
      shapes.push_back(GridShape{g.rows, g.cols});
      encoded.push_back(encode_tiles(g));
    }
  }
  MultimodalSequence seq = build_training_sequence(prompt, shapes, tokens_per_tile(), vocab_, assemble_options());
  append_generation_prompt(seq, vocab_);
  return decode_with_stopwords(greedy_step(seq, std::move(encoded)), stop_words, max_tokens, vocab_);
}

void VisionLanguageModel::apply_adapters(const AdapterConfig& cfg) {
  if (adapters_applied_) throw ConfigError("adapters are already applied");
  cfg.validate();
  Rng rng(Rng::derive(cfg_.seed, 0xada));
  for (auto& b : vision_blocks_) b.attach_adapters(cfg, rng);
  for (auto& b : lm_blocks_) b.attach_adapters(cfg, rng);
  if (cfg.target_connector) connector_.attach_adapters(cfg, rng);
  adapters_applied_ = true;
  applied_adapter_ = cfg;
}

ParamList VisionLanguageModel::parameters() const {
  ParamList out;
  patch_embed_.collect("vision.patch_embed", ParamRole::backbone, out);
  out.push_back({"vision.row_pos", row_pos_, ParamRole::backbone});
  out.push_back({"vision.col_pos", col_pos_, ParamRole::backbone});
  for (std::size_t i = 0; i < vision_blocks_.size(); ++i) {
    vision_blocks_[i].collect("vision.blocks." + std::to_string(i), ParamRole::backbone, out);
  }
  vision_ln_.collect("vision.ln", ParamRole::backbone, out);
  connector_.collect("connector", out);
  out.push_back({"lm.tok_emb", tok_emb_, ParamRole::backbone});
  out.push_back({"lm.pos_emb", pos_emb_, ParamRole::backbone});
  for (std::size_t i = 0; i < lm_blocks_.size(); ++i) {
    lm_blocks_[i].collect("lm.blocks." + std::to_string(i), ParamRole::backbone, out);
  }
  for (std::size_t i = 0; i < cross_.size(); ++i) cross_[i].collect("cross." + std::to_string(i), ParamRole::fresh, out);
  lm_ln_.collect("lm.ln", ParamRole::backbone, out);
  lm_head_.collect("lm.head", ParamRole::backbone, out);
  return out;
}

void VisionLanguageModel::set_trainable(Freezing policy) {
  for (auto& p : parameters()) {
    bool trainable = false;
    switch (p.role) {
      case ParamRole::backbone:
        trainable = policy == Freezing::full;
        break;
      case ParamRole::fresh:
        trainable = true;
        break;
      case ParamRole::adapter:
        trainable = policy != Freezing::frozen;
        break;
    }
    Tensor t = p.tensor;
    t.set_requires_grad(trainable);
    t.zero_grad();
  }
}

void VisionLanguageModel::save(Checkpoint& ck) const {
  ck.meta["model.config"] = write_config(cfg_.to_tree());
  ck.meta["model.adapters"] = adapters_applied_ ? "1" : "0";
  if (adapters_applied_) {
    ModelConfig with = cfg_;
    with.adapter = applied_adapter_;
    ck.meta["model.adapter_config"] = write_config(with.to_tree());
  }
  for (const auto& p : parameters()) ck.put(p.name, p.tensor);
}

void VisionLanguageModel::load(const Checkpoint& ck) {
  auto it = ck.meta.find("model.adapters");
  if (it != ck.meta.end() && it->second == "1" && !adapters_applied_) {
    const ModelConfig with = ModelConfig::from_tree(parse_config(ck.meta.at("model.adapter_config"), "checkpoint"));
    apply_adapters(with.adapter);
  }
  for (auto& p : parameters()) {
    Tensor t = p.tensor;
    ck.load_into(p.name, t);
  }
}

// ---- parameter accounting --------------------------------------------------

namespace {

std::size_t linear_count(std::size_t in, std::size_t out, bool bias) { return in * out + (bias ? out : 0); }
std::size_t norm_count(std::size_t d) { return 2 * d; }
std::size_t attention_count(std::size_t q, std::size_t kv, std::size_t d) { return q * d + 2 * kv * d + d * d; }
std::size_t ffn_count(std::size_t d, std::size_t h) { return linear_count(d, h, true) + linear_count(h, d, true); }
std::size_t block_count(std::size_t d) { return 2 * norm_count(d) + attention_count(d, d, d) + ffn_count(d, 4 * d); }

std::size_t adapter_count(std::size_t in, std::size_t out, const AdapterConfig& a) {
  return in * a.rank + a.rank * out + (a.dora ? out : 0);
}

std::size_t block_adapter_count(std::size_t d, const AdapterConfig& a) {
  std::size_t n = 0;
  if (a.target_attention) n += 4 * adapter_count(d, d, a);
  if (a.target_ffn) n += adapter_count(d, 4 * d, a) + adapter_count(4 * d, d, a);
  return n;
}

}  // namespace

std::size_t analytic_parameter_count(const ModelConfig& cfg, bool with_adapters) {
  const std::size_t vd = cfg.vision.dim, d = cfg.lm.dim, v = cfg.lm.vocab_size;
  const std::size_t grid = cfg.patch_grid();
  const std::size_t patch_dim = cfg.vision.patch_side * cfg.vision.patch_side * RawImage::kChannels;
  std::size_t n = 0;
  n += linear_count(patch_dim, vd, true) + 2 * grid * vd + cfg.vision.depth * block_count(vd) + norm_count(vd);

  std::size_t proj_in = vd;
  switch (cfg.connector) {
    case ConnectorKind::linear:
      break;
    case ConnectorKind::perceiver:
      n += cfg.latent_count * vd + 3 * norm_count(vd) + attention_count(vd, vd, vd) + ffn_count(vd, 4 * vd);
      break;
    case ConnectorKind::pixel_shuffle:
      proj_in = vd * cfg.shuffle_factor * cfg.shuffle_factor;
      break;
  }
  n += linear_count(proj_in, d, true);

  n += v * d + cfg.lm.max_seq_len * d + cfg.lm.depth * block_count(d) + norm_count(d) + linear_count(d, v, false);
  if (cfg.fusion.mode == FusionMode::cross_attention) {
    const std::size_t cross = cfg.lm.depth / cfg.fusion.cross_period;
    n += cross * (2 * norm_count(d) + attention_count(d, d, d) + ffn_count(d, 4 * d) + 2);
  }
  if (with_adapters) {
    n += cfg.vision.depth * block_adapter_count(vd, cfg.adapter) + cfg.lm.depth * block_adapter_count(d, cfg.adapter);
    if (cfg.adapter.target_connector) n += adapter_count(proj_in, d, cfg.adapter);
  }
  return n;
}

FusionParameterSplit measure_fusion_parameters(const VisionLanguageModel& model) {
  FusionParameterSplit split;
  auto is_block_weight = [](const std::string& name) {
    return name.find(".attn.") != std::string::npos || name.find(".ffn.") != std::string::npos;
  };
  for (const auto& p : model.parameters()) {
    if (p.role == ParamRole::adapter) continue;
    if (p.name.rfind("lm.", 0) == 0) {
      split.decoder_total_params += p.tensor.numel();
      if (p.name.rfind("lm.blocks.", 0) == 0 && is_block_weight(p.name)) split.decoder_block_params += p.tensor.numel();
    } else if (p.name.rfind("cross.", 0) == 0 && is_block_weight(p.name)) {
      split.cross_block_params += p.tensor.numel();
    }
  }
  return split;
}

}  // namespace vlmkit
