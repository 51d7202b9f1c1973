#pragma once

// Embedding -> image decoding. The linear decoder is a ridge-regression
// stand-in for a diffusion decoder; DSLE files hand embeddings to an
// external one.
//
// DSLE layout (little-endian):
//   "DSLE"  u16 version  u32 d_embed  f32 values[d_embed]
//   u32 metadata_count, then per entry: u32 key_len, key, u32 value_len, value

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dslens/binary_io.hpp"
#include "dslens/error.hpp"
#include "dslens/image.hpp"
#include "dslens/tensor.hpp"

namespace dslens {

inline constexpr char kEmbeddingMagic[4] = {'D', 'S', 'L', 'E'};
inline constexpr std::uint16_t kEmbeddingVersion = 1;
inline constexpr int kDefaultDiffusionSteps = 25;

enum class DecoderKind : std::uint8_t { kLinear, kExternalExport };

struct DecoderSpec {
  DecoderKind kind = DecoderKind::kLinear;
  std::size_t image_size = 0;
  Tensor matrix;  // [d_embed, 3 * image_size^2]
  Tensor bias;    // [3 * image_size^2]
  std::string export_dir;

  std::size_t d_embed() const { return matrix.empty() ? 0 : matrix.dim(0); }

  static DecoderSpec external(std::string dir) {
    DecoderSpec s;
    s.kind = DecoderKind::kExternalExport;
    s.export_dir = std::move(dir);
    return s;
  }
};

struct DecoderPair {
  Tensor embedding;  // [d_embed]
  Tensor image;      // [3, S, S], pixel space
};

// Ridge regression with an unpenalized bias: minimizes
//   sum_i |e_i W + b - y_i|^2 + ridge |W|^2
// through the normal equations, accumulated in pair order and solved by
// Cholesky in double precision.
inline DecoderSpec fit_linear_decoder(const std::vector<DecoderPair>& pairs, double ridge) {
  if (pairs.empty()) throw ValidationError("fit_linear_decoder: no training pairs");
  if (!(ridge >= 0.0) || !std::isfinite(ridge))
    throw ValidationError("fit_linear_decoder: ridge must be finite and >= 0");
  const std::size_t d = pairs[0].embedding.numel();
  const Shape img_shape = pairs[0].image.shape();
  if (img_shape.size() != 3 || img_shape[0] != 3 || img_shape[1] != img_shape[2])
    throw DimensionError("fit_linear_decoder: images must be [3,S,S], got " + shape_str(img_shape));
  const std::size_t out = pairs[0].image.numel();
  const std::size_t n = d + 1;

  std::vector<double> gram(n * n, 0.0), rhs(n * out, 0.0), a(n);
  for (const auto& p : pairs) {
    if (p.embedding.numel() != d || p.image.shape() != img_shape)
      throw DimensionError("fit_linear_decoder: inconsistent pair shapes");
    for (std::size_t i = 0; i < d; ++i) a[i] = p.embedding[i];
    a[d] = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) gram[i * n + j] += a[i] * a[j];
      double* r = &rhs[i * out];
      for (std::size_t k = 0; k < out; ++k) r[k] += a[i] * double(p.image[k]);
    }
  }
  for (std::size_t i = 0; i < d; ++i) gram[i * n + i] += ridge;

  // Cholesky: gram = L L^T.
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, gram[i * n + i]);
  const double tol = 1e-10 * std::max(max_diag, 1.0);
  std::vector<double> L(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double s = gram[j * n + j];
    for (std::size_t k = 0; k < j; ++k) s -= L[j * n + k] * L[j * n + k];
    if (s <= tol)
      throw SingularityError("fit_linear_decoder: normal equations are singular; use ridge > 0");
    L[j * n + j] = std::sqrt(s);
    for (std::size_t i = j + 1; i < n; ++i) {
      double t = gram[i * n + j];
      for (std::size_t k = 0; k < j; ++k) t -= L[i * n + k] * L[j * n + k];
      L[i * n + j] = t / L[j * n + j];
    }
  }
  // Forward then back substitution, all output columns at once.
  std::vector<double> x = rhs;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k)
      for (std::size_t c = 0; c < out; ++c) x[i * out + c] -= L[i * n + k] * x[k * out + c];
    for (std::size_t c = 0; c < out; ++c) x[i * out + c] /= L[i * n + i];
  }
  for (std::size_t ii = n; ii-- > 0;) {
    for (std::size_t k = ii + 1; k < n; ++k)
      for (std::size_t c = 0; c < out; ++c) x[ii * out + c] -= L[k * n + ii] * x[k * out + c];
    for (std::size_t c = 0; c < out; ++c) x[ii * out + c] /= L[ii * n + ii];
  }

  DecoderSpec spec;
  spec.kind = DecoderKind::kLinear;
  spec.image_size = img_shape[1];
  spec.matrix = Tensor({d, out});
  spec.bias = Tensor({out});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t c = 0; c < out; ++c) spec.matrix.at(i, c) = static_cast<float>(x[i * out + c]);
  for (std::size_t c = 0; c < out; ++c) spec.bias[c] = static_cast<float>(x[d * out + c]);
  return spec;
}

// Affine map without the pixel clamp.
inline Tensor decode_unclamped(const DecoderSpec& spec, const Tensor& embedding) {
  if (spec.kind != DecoderKind::kLinear)
    throw UnsupportedError("decode: external-export decoders cannot decode; export the embedding instead");
  if (embedding.numel() != spec.d_embed())
    throw DimensionError("decode: embedding width " + std::to_string(embedding.numel()) +
                         " does not match decoder width " + std::to_string(spec.d_embed()));
  Tensor y = matmul(embedding.reshaped({1, embedding.numel()}), spec.matrix);
  add_row_bias(y, spec.bias);
  return y.reshaped({3, spec.image_size, spec.image_size});
}

inline Tensor decode(const DecoderSpec& spec, const Tensor& embedding) {
  Tensor y = decode_unclamped(spec, embedding);
  for (float& v : y.data()) v = std::clamp(v, 0.0f, 1.0f);
  return y;
}

struct EmbeddingFile {
  Tensor embedding;
  std::map<std::string, std::string> metadata;
};

inline std::map<std::string, std::string> default_embedding_metadata() {
  return {{"diffusion_steps", std::to_string(kDefaultDiffusionSteps)}};
}

inline std::vector<std::uint8_t> encode_embedding(const Tensor& embedding,
                                                  const std::map<std::string, std::string>& metadata =
                                                      default_embedding_metadata()) {
  if (embedding.rank() != 1) throw DimensionError("embedding must be rank 1, got " + shape_str(embedding.shape()));
  ByteWriter out;
  out.bytes(kEmbeddingMagic, 4);
  out.u16(kEmbeddingVersion);
  out.u32(static_cast<std::uint32_t>(embedding.numel()));
  for (float v : embedding.data()) out.f32(v);
  out.u32(static_cast<std::uint32_t>(metadata.size()));
  for (const auto& [k, v] : metadata) {
    out.u32(static_cast<std::uint32_t>(k.size()));
    out.str(k);
    out.u32(static_cast<std::uint32_t>(v.size()));
    out.str(v);
  }
  return out.buffer();
}

inline EmbeddingFile decode_embedding(const std::vector<std::uint8_t>& bytes,
                                      std::optional<std::size_t> expected_d_embed = std::nullopt) {
  ByteReader in(bytes, "DSLE");
  if (in.str(4, "magic") != std::string(kEmbeddingMagic, 4)) in.fail_at("bad magic", 0);
  const std::size_t version_at = in.offset();
  if (in.u16("version") != kEmbeddingVersion) in.fail_at("unsupported version", version_at);
  const std::size_t d = in.u32("d_embed");
  if (d == 0) in.fail("d_embed is zero");
  if (expected_d_embed && d != *expected_d_embed)
    throw DimensionError("DSLE: header d_embed " + std::to_string(d) + " does not match expected " +
                         std::to_string(*expected_d_embed));
  in.need(d * 4, "embedding values");
  EmbeddingFile f;
  f.embedding = Tensor({d});
  for (auto& v : f.embedding.data()) v = in.f32("embedding values");
  const std::size_t count = in.u32("metadata count");
  for (std::size_t i = 0; i < count; ++i) {
    std::string k = in.str(in.u32("metadata key length"), "metadata key");
    std::string v = in.str(in.u32("metadata value length"), "metadata value");
    f.metadata[std::move(k)] = std::move(v);
  }
  if (!in.at_end()) in.fail("trailing bytes");
  return f;
}

inline void export_embedding(const Tensor& embedding, const std::string& path,
                             const std::map<std::string, std::string>& metadata = default_embedding_metadata()) {
  write_file_bytes(path, encode_embedding(embedding, metadata));
}

inline Tensor import_embedding(const std::string& path,
                               std::optional<std::size_t> expected_d_embed = std::nullopt) {
  return decode_embedding(read_file_bytes(path), expected_d_embed).embedding;
}

}  // namespace dslens
