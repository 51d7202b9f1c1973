#pragma once

// Images are [3, H, W] float tensors. Pixel space is [0, 1]; the model
// consumes standardized images (x - mean) / std per channel.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dslens/binary_io.hpp"
#include "dslens/error.hpp"
#include "dslens/tensor.hpp"

namespace dslens {

struct Normalization {
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> std{0.5f, 0.5f, 0.5f};
};

inline Tensor standardize(const Tensor& pixels, const Normalization& n = {}) {
  if (pixels.rank() != 3 || pixels.dim(0) != 3)
    throw DimensionError("standardize: expected [3,H,W], got " + shape_str(pixels.shape()));
  Tensor out = pixels;
  const std::size_t plane = pixels.dim(1) * pixels.dim(2);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      out[c * plane + i] = (pixels[c * plane + i] - n.mean[c]) / n.std[c];
  return out;
}

inline Tensor unstandardize(const Tensor& image, const Normalization& n = {}) {
  Tensor out = image;
  const std::size_t plane = image.dim(1) * image.dim(2);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      out[c * plane + i] = image[c * plane + i] * n.std[c] + n.mean[c];
  return out;
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// Binary PPM (P6, maxval 255).
inline std::vector<std::uint8_t> encode_ppm(const Tensor& pixels) {
  if (pixels.rank() != 3 || pixels.dim(0) != 3)
    throw DimensionError("encode_ppm: expected [3,H,W], got " + shape_str(pixels.shape()));
  const std::size_t h = pixels.dim(1), w = pixels.dim(2);
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.push_back(to_byte(pixels.at(c, y, x)));
  return out;
}

// Reads P6 (binary) and P3 (ASCII) pixmaps; also P5/P2 greymaps, replicated
// to three channels.
inline Tensor decode_pnm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& m) -> void { throw FormatError("PNM: " + m, pos); };
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_ws();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) fail("expected a number");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > 1u << 24) fail("number too large");
    }
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P') fail("bad magic");
  const char kind = static_cast<char>(bytes[1]);
  if (kind != '6' && kind != '3' && kind != '5' && kind != '2') fail("unsupported PNM variant");
  pos = 2;
  const std::size_t w = number(), h = number(), maxval = number();
  if (w == 0 || h == 0) fail("zero-sized image");
  if (maxval == 0 || maxval > 65535) fail("bad maxval");
  const bool colour = kind == '6' || kind == '3';
  const bool binary = kind == '6' || kind == '5';
  const std::size_t channels = colour ? 3 : 1;
  const std::size_t bps = maxval > 255 ? 2 : 1;
  Tensor out({3, h, w});
  if (binary) ++pos;  // single whitespace after maxval
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        std::size_t v;
        if (binary) {
          if (pos + bps > bytes.size()) fail("truncated pixel data");
          v = bps == 2 ? (std::size_t(bytes[pos]) << 8) | bytes[pos + 1] : bytes[pos];
          pos += bps;
        } else {
          v = number();
        }
        if (v > maxval) fail("sample exceeds maxval");
        const float f = float(v) / float(maxval);
        if (colour) out.at(c, y, x) = f;
        else
          for (std::size_t k = 0; k < 3; ++k) out.at(k, y, x) = f;
      }
  return out;
}

inline void write_ppm(const std::string& path, const Tensor& pixels) {
  write_file_bytes(path, encode_ppm(pixels));
}

inline Tensor read_pnm(const std::string& path) { return decode_pnm(read_file_bytes(path)); }

// Overlay with per-pixel coverage in [0, 1].
struct OverlayImage {
  Tensor rgb;   // [3, h, w] pixel space
  Tensor mask;  // [h, w]
};

}  // namespace dslens
