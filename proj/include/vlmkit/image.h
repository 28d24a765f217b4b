#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <utility>
#include <vector>

#include "vlmkit/tensor.h"

namespace vlmkit {

// RGB image, row-major, interleaved channels, values in [0, 1].
struct RawImage {
  static constexpr std::size_t kChannels = 3;

  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;

  RawImage() = default;
  RawImage(std::size_t w, std::size_t h);
  RawImage(std::size_t w, std::size_t h, std::vector<double> px);

  double& at(std::size_t x, std::size_t y, std::size_t c) { return pixels[(y * width + x) * kChannels + c]; }
  double at(std::size_t x, std::size_t y, std::size_t c) const {
    return pixels[(y * width + x) * kChannels + c];
  }
  std::size_t long_side() const { return std::max(width, height); }

  friend bool operator==(const RawImage&, const RawImage&) = default;
};

struct TileConfig {
  std::size_t tile_side = 364;
  // Per-axis split granularity; held equal to tile_side.
  std::size_t split_threshold = 364;
  std::size_t max_long_side = 1820;

  void validate() const;
  std::size_t max_tiles_per_axis() const { return max_long_side / tile_side; }
};

struct TileGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<RawImage> tiles;  // row-major
  RawImage global_image;

  std::size_t image_count() const { return tiles.size() + 1; }
};

struct PatchSequence {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t patch_side = 0;
  Tensor patches;  // [grid_h*grid_w x patch_side^2*3]

  std::size_t count() const { return grid_h * grid_w; }
  std::size_t patch_dim() const { return patch_side * patch_side * RawImage::kChannels; }
};

// Bilinear resampling with half-pixel centers and edge clamping.
RawImage resize(const RawImage& img, std::size_t out_w, std::size_t out_h);
RawImage resize_longest_side(const RawImage& img, std::size_t target);

// (rows, cols) of the tile matrix covering a width x height image.
std::pair<std::size_t, std::size_t> compute_tile_grid_dims(std::size_t width, std::size_t height,
                                                           const TileConfig& cfg);

TileGrid split_into_tiles(const RawImage& img, const TileConfig& cfg);

// Caps the longest side at cfg.max_long_side, then splits.
TileGrid preprocess_image(const RawImage& img, const TileConfig& cfg);

PatchSequence patchify(const RawImage& tile, std::size_t patch_side);
RawImage unpatchify(const PatchSequence& seq);

// PNG (8/16-bit, any colour type) and binary PPM (P6).
RawImage load_image(const std::filesystem::path& path);
void save_ppm(const RawImage& img, const std::filesystem::path& path);
void save_png(const RawImage& img, const std::filesystem::path& path);

}  // namespace vlmkit
