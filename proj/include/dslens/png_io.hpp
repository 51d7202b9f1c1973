#pragma once

// 8-bit PNG read/write through libpng. Link PNG::PNG when including this.

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "dslens/error.hpp"
#include "dslens/image.hpp"
#include "dslens/tensor.hpp"

namespace dslens {

inline void write_png(const std::string& path, const Tensor& pixels) {
  if (pixels.rank() != 3 || pixels.dim(0) != 3)
    throw DimensionError("write_png: expected [3,H,W], got " + shape_str(pixels.shape()));
  const auto h = static_cast<png_uint_32>(pixels.dim(1));
  const auto w = static_cast<png_uint_32>(pixels.dim(2));
  std::vector<std::uint8_t> rgb(std::size_t(h) * w * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) rgb[(y * w + x) * 3 + c] = to_byte(pixels.at(c, y, x));

  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = w;
  img.height = h;
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, rgb.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot write PNG '" + path + "': " + msg);
  }
}

// Returns pixels in [0, 1]; the alpha channel, if any, goes to *alpha as [H, W].
inline Tensor read_png(const std::string& path, Tensor* alpha = nullptr) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw FormatError("PNG '" + path + "': " + std::string(img.message), 0);
  img.format = PNG_FORMAT_RGBA;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw FormatError("PNG '" + path + "': " + msg, 0);
  }
  const std::size_t h = img.height, w = img.width;
  Tensor out({3, h, w});
  if (alpha) *alpha = Tensor({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::uint8_t* p = &buf[(y * w + x) * 4];
      for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = p[c] / 255.0f;
      if (alpha) alpha->at(y, x) = p[3] / 255.0f;
    }
  return out;
}

inline bool has_extension(const std::string& path, const std::string& ext) {
  if (path.size() < ext.size()) return false;
  std::string tail = path.substr(path.size() - ext.size());
  for (auto& ch : tail) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return tail == ext;
}

// PNG or PNM by extension.
inline Tensor read_image(const std::string& path, Tensor* alpha = nullptr) {
  if (has_extension(path, ".png")) return read_png(path, alpha);
  Tensor px = read_pnm(path);
  if (alpha) *alpha = Tensor::full({px.dim(1), px.dim(2)}, 1.0f);
  return px;
}

inline void write_image(const std::string& path, const Tensor& pixels) {
  if (has_extension(path, ".png")) write_png(path, pixels);
  else write_ppm(path, pixels);
}

}  // namespace dslens
