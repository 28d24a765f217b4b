#include "vlmkit/connector.h"

#include <cmath>

namespace vlmkit {

std::string to_string(ConnectorKind kind) {
  switch (kind) {
    case ConnectorKind::linear:
      return "linear";
    case ConnectorKind::perceiver:
      return "perceiver";
    case ConnectorKind::pixel_shuffle:
      return "pixel_shuffle";
  }
  return "?";
}

ConnectorKind parse_connector_kind(const std::string& s) {
  if (s == "linear") return ConnectorKind::linear;
  if (s == "perceiver") return ConnectorKind::perceiver;
  if (s == "pixel_shuffle") return ConnectorKind::pixel_shuffle;
  throw ConfigError("unknown connector kind '" + s + "' (expected linear, perceiver or pixel_shuffle)");
}

void ConnectorConfig::validate() const {
  if (vision_dim < 1 || text_dim < 1) throw ConfigError("connector dims must be >= 1");
  if (latent_count < 1) throw ConfigError("perceiver latent_count must be >= 1");
  if (shuffle_factor < 1) throw ConfigError("pixel shuffle factor must be >= 1");
  if (perceiver_heads < 1 || vision_dim % perceiver_heads != 0) {
    throw ConfigError("perceiver heads must divide vision_dim");
  }
  if (perceiver_pos2d && vision_dim % 4 != 0) throw ConfigError("2-D positions need vision_dim divisible by 4");
}

std::size_t ConnectorConfig::tokens_per_tile(std::size_t grid_h, std::size_t grid_w) const {
  switch (kind) {
    case ConnectorKind::linear:
      return grid_h * grid_w;
    case ConnectorKind::perceiver:
      return latent_count;
    case ConnectorKind::pixel_shuffle:
      if (grid_h % shuffle_factor != 0 || grid_w % shuffle_factor != 0) {
        throw DivisibilityError("pixel shuffle: grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                                " is not divisible by r=" + std::to_string(shuffle_factor));
      }
      return (grid_h / shuffle_factor) * (grid_w / shuffle_factor);
  }
  return 0;
}

std::vector<std::size_t> pixel_shuffle_index(std::size_t grid_h, std::size_t grid_w, std::size_t r, std::size_t dim) {
  if (r == 0 || grid_h % r != 0 || grid_w % r != 0) {
    throw DivisibilityError("pixel shuffle: grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                            " is not divisible by r=" + std::to_string(r));
  }
  const std::size_t out_h = grid_h / r, out_w = grid_w / r;
  std::vector<std::size_t> index;
  index.reserve(grid_h * grid_w * dim);
  for (std::size_t i = 0; i < out_h; ++i)
    for (std::size_t j = 0; j < out_w; ++j)
      for (std::size_t dy = 0; dy < r; ++dy)
        for (std::size_t dx = 0; dx < r; ++dx) {
          const std::size_t src_row = (i * r + dy) * grid_w + (j * r + dx);
          for (std::size_t c = 0; c < dim; ++c) index.push_back(src_row * dim + c);
        }
  return index;
}

Tensor pixel_shuffle_reindex(const Tensor& hidden, std::size_t grid_h, std::size_t grid_w, std::size_t r) {
  if (hidden.rank() != 2 || hidden.dim(0) != grid_h * grid_w) {
    throw ShapeError("pixel shuffle: hidden " + shape_str(hidden.shape()) + " does not hold a " +
                     std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
  }
  const std::size_t dim = hidden.dim(1);
  const auto index = pixel_shuffle_index(grid_h, grid_w, r, dim);
  return reindex(hidden, index, {grid_h * grid_w / (r * r), dim * r * r});
}

Tensor pixel_unshuffle(const Tensor& shuffled, std::size_t grid_h, std::size_t grid_w, std::size_t r) {
  const std::size_t dim = shuffled.dim(1) / (r * r);
  const auto forward_index = pixel_shuffle_index(grid_h, grid_w, r, dim);
  std::vector<std::size_t> inverse(forward_index.size());
  for (std::size_t i = 0; i < forward_index.size(); ++i) inverse[forward_index[i]] = i;
  return reindex(shuffled, inverse, {grid_h * grid_w, dim});
}

namespace {

// Fixed sin/cos encoding: first half of the channels encodes the row, second
// half the column.
Tensor sincos_2d(std::size_t grid_h, std::size_t grid_w, std::size_t dim) {
  std::vector<double> v(grid_h * grid_w * dim);
  const std::size_t half = dim / 2, quarter = dim / 4;
  for (std::size_t y = 0; y < grid_h; ++y)
    for (std::size_t x = 0; x < grid_w; ++x) {
      double* row = &v[(y * grid_w + x) * dim];
      for (std::size_t k = 0; k < quarter; ++k) {
        const double freq = 1.0 / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(quarter));
        row[k] = std::sin(static_cast<double>(y) * freq);
        row[quarter + k] = std::cos(static_cast<double>(y) * freq);
        row[half + k] = std::sin(static_cast<double>(x) * freq);
        row[half + quarter + k] = std::cos(static_cast<double>(x) * freq);
      }
    }
  return Tensor::from({grid_h * grid_w, dim}, std::move(v));
}

}  // namespace

Connector::Connector(const ConnectorConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  switch (cfg_.kind) {
    case ConnectorKind::linear:
      proj_ = Linear(cfg_.vision_dim, cfg_.text_dim, true, rng);
      break;
    case ConnectorKind::perceiver:
      latents_ = random_normal({cfg_.latent_count, cfg_.vision_dim}, 1.0, rng);
      ln_latents_ = LayerNorm(cfg_.vision_dim);
      ln_context_ = LayerNorm(cfg_.vision_dim);
      ln_ffn_ = LayerNorm(cfg_.vision_dim);
      attn_ = Attention(cfg_.vision_dim, cfg_.vision_dim, cfg_.vision_dim, cfg_.perceiver_heads, rng);
      ffn_ = FeedForward(cfg_.vision_dim, 4 * cfg_.vision_dim, rng);
      proj_ = Linear(cfg_.vision_dim, cfg_.text_dim, true, rng);
      break;
    case ConnectorKind::pixel_shuffle:
      proj_ = Linear(cfg_.vision_dim * cfg_.shuffle_factor * cfg_.shuffle_factor, cfg_.text_dim, true, rng);
      break;
  }
}

void Connector::require_kind(ConnectorKind kind, const char* op) const {
  if (cfg_.kind != kind) {
    throw ConfigError(std::string(op) + " called on a " + to_string(cfg_.kind) + " connector");
  }
}

void Connector::require_width(const Tensor& hidden, const char* op) const {
  if (!hidden.defined()) throw EmptyInputError(std::string(op) + ": no hidden states");
  if (hidden.rank() != 2 || hidden.dim(1) != cfg_.vision_dim) {
    throw ShapeError(std::string(op) + ": hidden states " + shape_str(hidden.shape()) + " do not have width " +
                     std::to_string(cfg_.vision_dim));
  }
}

VisualTokens Connector::project(const Tensor& hidden, std::size_t grid_h, std::size_t grid_w, int origin) const {
  switch (cfg_.kind) {
    case ConnectorKind::linear:
      return linear_project(hidden, origin);
    case ConnectorKind::perceiver:
      return perceiver_resample(hidden, nullptr, grid_h, grid_w, origin);
    case ConnectorKind::pixel_shuffle:
      return pixel_shuffle(hidden, grid_h, grid_w, origin);
  }
  throw ConfigError("unknown connector kind");
}

VisualTokens Connector::linear_project(const Tensor& hidden, int origin) const {
  require_kind(ConnectorKind::linear, "linear_project");
  require_width(hidden, "linear_project");
  return VisualTokens{proj_.forward(hidden), origin};
}

VisualTokens Connector::perceiver_resample(const Tensor& hidden, std::vector<Tensor>* attention, std::size_t grid_h,
                                           std::size_t grid_w, int origin) const {
  require_kind(ConnectorKind::perceiver, "perceiver_resample");
  require_width(hidden, "perceiver_resample");
  Tensor context = hidden;
  if (cfg_.perceiver_pos2d) {
    if (grid_h * grid_w != hidden.dim(0)) {
      throw ShapeError("perceiver 2-D positions need the hidden grid shape");
    }
    context = add(context, sincos_2d(grid_h, grid_w, cfg_.vision_dim));
  }
  Tensor lat = add(latents_, attn_.forward(ln_latents_.forward(latents_), ln_context_.forward(context), false, attention));
  lat = add(lat, ffn_.forward(ln_ffn_.forward(lat)));
  return VisualTokens{proj_.forward(lat), origin};
}

VisualTokens Connector::pixel_shuffle(const Tensor& hidden, std::size_t grid_h, std::size_t grid_w, int origin) const {
  require_kind(ConnectorKind::pixel_shuffle, "pixel_shuffle");
  require_width(hidden, "pixel_shuffle");
  return VisualTokens{proj_.forward(pixel_shuffle_reindex(hidden, grid_h, grid_w, cfg_.shuffle_factor)), origin};
}

void Connector::attach_adapters(const AdapterConfig& cfg, Rng& rng) { proj_.attach_adapter(cfg, rng); }

void Connector::collect(const std::string& prefix, ParamList& out) const {
  if (cfg_.kind == ConnectorKind::perceiver) {
    out.push_back({prefix + ".latents", latents_, ParamRole::fresh});
    ln_latents_.collect(prefix + ".ln_latents", ParamRole::fresh, out);
    ln_context_.collect(prefix + ".ln_context", ParamRole::fresh, out);
    attn_.collect(prefix + ".attn", ParamRole::fresh, out);
    ln_ffn_.collect(prefix + ".ln_ffn", ParamRole::fresh, out);
    ffn_.collect(prefix + ".ffn", ParamRole::fresh, out);
  }
  proj_.collect(prefix + ".proj", ParamRole::fresh, out);
}

}  // namespace vlmkit
