#include "vlmkit/image.h"

#include <png.h>

#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

namespace vlmkit {

RawImage::RawImage(std::size_t w, std::size_t h) : RawImage(w, h, std::vector<double>(w * h * kChannels, 0.0)) {}

RawImage::RawImage(std::size_t w, std::size_t h, std::vector<double> px)
    : width(w), height(h), pixels(std::move(px)) {
  if (w < 1 || h < 1) throw ShapeError("image dimensions must be >= 1");
  if (pixels.size() != w * h * kChannels) {
    throw ShapeError("image pixel count " + std::to_string(pixels.size()) + " does not match " +
                     std::to_string(w) + "x" + std::to_string(h) + "x3");
  }
}

void TileConfig::validate() const {
  if (tile_side == 0) throw ConfigError("tile_side must be > 0");
  if (split_threshold != tile_side) {
    throw ConfigError("split threshold (" + std::to_string(split_threshold) + ") must equal tile_side (" +
                      std::to_string(tile_side) + ")");
  }
  if (max_long_side == 0 || max_long_side % tile_side != 0) {
    throw ConfigError("max_long_side " + std::to_string(max_long_side) + " must be a positive multiple of tile_side " +
                      std::to_string(tile_side));
  }
}

RawImage resize(const RawImage& img, std::size_t out_w, std::size_t out_h) {
  if (out_w < 1 || out_h < 1) throw ShapeError("resize: target dimensions must be >= 1");
  if (out_w == img.width && out_h == img.height) return img;
  RawImage out(out_w, out_h);
  const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
  const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
  const double max_x = static_cast<double>(img.width - 1);
  const double max_y = static_cast<double>(img.height - 1);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, max_y);
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, max_x);
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < RawImage::kChannels; ++c) {
        const double top = img.at(x0, y0, c) * (1.0 - wx) + img.at(x1, y0, c) * wx;
        const double bottom = img.at(x0, y1, c) * (1.0 - wx) + img.at(x1, y1, c) * wx;
        out.at(x, y, c) = top * (1.0 - wy) + bottom * wy;
      }
    }
  }
  return out;
}

RawImage resize_longest_side(const RawImage& img, std::size_t target) {
  if (target < 1) throw ParameterError("resize_longest_side: target must be >= 1");
  const double w = static_cast<double>(img.width), h = static_cast<double>(img.height);
  std::size_t out_w, out_h;
  if (img.width >= img.height) {
    out_w = target;
    out_h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(h * static_cast<double>(target) / w)));
  } else {
    out_h = target;
    out_w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(w * static_cast<double>(target) / h)));
  }
  return resize(img, out_w, out_h);
}

std::pair<std::size_t, std::size_t> compute_tile_grid_dims(std::size_t width, std::size_t height,
                                                           const TileConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.split_threshold;
  const std::size_t cap = cfg.max_tiles_per_axis();
  auto axis = [&](std::size_t extent) { return std::clamp<std::size_t>((extent + n - 1) / n, 1, cap); };
  return {axis(height), axis(width)};
}

TileGrid split_into_tiles(const RawImage& img, const TileConfig& cfg) {
  const auto [rows, cols] = compute_tile_grid_dims(img.width, img.height, cfg);
  const std::size_t side = cfg.tile_side;
  const RawImage stretched = resize(img, cols * side, rows * side);
  TileGrid grid;
  grid.rows = rows;
  grid.cols = cols;
  grid.tiles.reserve(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      RawImage tile(side, side);
      for (std::size_t y = 0; y < side; ++y) {
        const double* src = &stretched.pixels[((r * side + y) * stretched.width + c * side) * RawImage::kChannels];
        std::copy_n(src, side * RawImage::kChannels, &tile.pixels[y * side * RawImage::kChannels]);
      }
      grid.tiles.push_back(std::move(tile));
    }
  }
  grid.global_image = resize(img, side, side);
  return grid;
}

TileGrid preprocess_image(const RawImage& img, const TileConfig& cfg) {
  cfg.validate();
  if (img.long_side() > cfg.max_long_side) return split_into_tiles(resize_longest_side(img, cfg.max_long_side), cfg);
  return split_into_tiles(img, cfg);
}

PatchSequence patchify(const RawImage& tile, std::size_t patch_side) {
  if (patch_side == 0 || tile.width % patch_side != 0 || tile.height % patch_side != 0) {
    throw DivisibilityError("patchify: tile " + std::to_string(tile.width) + "x" + std::to_string(tile.height) +
                            " is not divisible by patch side " + std::to_string(patch_side));
  }
  PatchSequence seq;
  seq.grid_h = tile.height / patch_side;
  seq.grid_w = tile.width / patch_side;
  seq.patch_side = patch_side;
  const std::size_t dim = seq.patch_dim();
  std::vector<double> out(seq.count() * dim);
  const std::size_t row_len = patch_side * RawImage::kChannels;
  for (std::size_t gy = 0; gy < seq.grid_h; ++gy) {
    for (std::size_t gx = 0; gx < seq.grid_w; ++gx) {
      double* dst = &out[(gy * seq.grid_w + gx) * dim];
      for (std::size_t py = 0; py < patch_side; ++py) {
        const double* src = &tile.pixels[((gy * patch_side + py) * tile.width + gx * patch_side) * RawImage::kChannels];
        std::copy_n(src, row_len, dst + py * row_len);
      }
    }
  }
  seq.patches = Tensor::from({seq.count(), dim}, std::move(out));
  return seq;
}

RawImage unpatchify(const PatchSequence& seq) {
  const std::size_t p = seq.patch_side;
  RawImage img(seq.grid_w * p, seq.grid_h * p);
  const std::size_t dim = seq.patch_dim();
  const std::size_t row_len = p * RawImage::kChannels;
  const auto src = seq.patches.data();
  for (std::size_t gy = 0; gy < seq.grid_h; ++gy) {
    for (std::size_t gx = 0; gx < seq.grid_w; ++gx) {
      const double* patch = src.data() + (gy * seq.grid_w + gx) * dim;
      for (std::size_t py = 0; py < p; ++py) {
        double* dst = &img.pixels[((gy * p + py) * img.width + gx * p) * RawImage::kChannels];
        std::copy_n(patch + py * row_len, row_len, dst);
      }
    }
  }
  return img;
}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open image " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

RawImage decode_ppm(const std::string& bytes, const std::filesystem::path& path) {
  std::size_t pos = 2;
  auto next_int = [&]() -> std::size_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    std::size_t v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
      any = true;
    }
    if (!any) throw FormatError("malformed PPM header in " + path.string());
    return v;
  };
  const std::size_t w = next_int(), h = next_int(), maxval = next_int();
  ++pos;  // single whitespace before raster
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw FormatError("bad PPM header in " + path.string());
  const std::size_t bps = maxval > 255 ? 2 : 1;
  const std::size_t n = w * h * RawImage::kChannels;
  if (bytes.size() < pos + n * bps) throw FormatError("truncated PPM raster in " + path.string());
  std::vector<double> px(n);
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t v = bps == 1 ? raw[i] : (static_cast<std::size_t>(raw[2 * i]) << 8) | raw[2 * i + 1];
    px[i] = static_cast<double>(v) / static_cast<double>(maxval);
  }
  return RawImage(w, h, std::move(px));
}

RawImage decode_png(const std::string& bytes, const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw FormatError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw FormatError("cannot decode PNG " + path.string() + ": " + msg);
  }
  std::vector<double> px(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) px[i] = static_cast<double>(buf[i]) / 255.0;
  return RawImage(image.width, image.height, std::move(px));
}

unsigned char quantize(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

RawImage load_image(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), "\x89PNG\r\n\x1a\n", 8) == 0) return decode_png(bytes, path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes, path);
  throw FormatError("unsupported image format: " + path.string());
}

void save_ppm(const RawImage& img, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::string raster(img.pixels.size(), '\0');
  for (std::size_t i = 0; i < img.pixels.size(); ++i) raster[i] = static_cast<char>(quantize(img.pixels[i]));
  os.write(raster.data(), static_cast<std::streamsize>(raster.size()));
  if (!os) throw IoError("short write to " + path.string());
}

void save_png(const RawImage& img, const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(img.pixels.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = quantize(img.pixels[i]);
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

}  // namespace vlmkit
