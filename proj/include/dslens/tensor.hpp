#pragma once

// Dense row-major float32 tensors and the handful of kernels the ViT
// forward pass needs. Every kernel is a pure function with a fixed
// summation order, so repeated calls agree bit-for-bit.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dslens/error.hpp"

namespace dslens {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  if (s.empty()) return 0;
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_numel(shape_), 0.0f);
  }

  Tensor(Shape shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_numel(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  static Tensor full(Shape shape, float value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor vector(std::initializer_list<float> values) {
    return Tensor({values.size()}, std::vector<float>(values));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<float> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Size of the last axis; the "feature" width for row-wise ops.
  std::size_t last_dim() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const { return last_dim() ? numel() / last_dim() : 0; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  float& at(std::size_t a, std::size_t b, std::size_t c) {
    return data_[(a * shape_[1] + b) * shape_[2] + c];
  }
  float at(std::size_t a, std::size_t b, std::size_t c) const {
    return data_[(a * shape_[1] + b) * shape_[2] + c];
  }

  // Row r viewed over the last axis.
  std::span<float> row(std::size_t r) {
    return std::span<float>(data_).subspan(r * last_dim(), last_dim());
  }
  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(data_).subspan(r * last_dim(), last_dim());
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    for (auto d : shape_)
      if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<float> data_;
};

// Bitwise equality, distinguishing -0.0f from 0.0f and comparing NaN payloads.
inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto da = a.data();
  auto db = b.data();
  return std::equal(da.begin(), da.end(), db.begin(), [](float x, float y) {
    return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
  });
}

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](float v) { return std::isfinite(v); });
}

inline float max_abs(const Tensor& t) {
  float m = 0.0f;
  for (float v : t.data()) m = std::max(m, std::fabs(v));
  return m;
}

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  float m = 0.0f;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

inline double l2_norm(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += double(x) * double(x);
  return std::sqrt(s);
}

inline double l2_norm(const Tensor& t) { return l2_norm(t.data()); }

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(a.shape()));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
  return out;
}

inline Tensor scale(const Tensor& a, float s) {
  Tensor out = a;
  for (float& v : out.data()) v *= s;
  return out;
}

inline void add_inplace(Tensor& acc, const Tensor& b) {
  detail::require_same_shape(acc, b, "add_inplace");
  for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += b[i];
}

// Adds a length-n vector to every row of a [..., n] tensor.
inline void add_row_bias(Tensor& x, const Tensor& bias) {
  if (bias.numel() != x.last_dim())
    throw DimensionError("row bias of shape " + shape_str(bias.shape()) +
                         " does not fit rows of " + shape_str(x.shape()));
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[j];
  }
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  Tensor out({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

// Columns [begin, end) of a matrix.
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_rank(a, 2, "slice_cols");
  if (begin >= end || end > a.dim(1))
    throw DimensionError("slice_cols: bad range for shape " + shape_str(a.shape()));
  Tensor out({a.dim(0), end - begin});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    std::copy_n(a.row(i).begin() + begin, end - begin, out.row(i).begin());
  return out;
}

// Rows [begin, end) of a matrix.
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_rank(a, 2, "slice_rows");
  if (begin >= end || end > a.dim(0))
    throw DimensionError("slice_rows: bad range for shape " + shape_str(a.shape()));
  const std::size_t w = a.dim(1);
  return Tensor({end - begin, w}, std::vector<float>(a.data().begin() + begin * w,
                                                     a.data().begin() + end * w));
}

inline Tensor slice_vector(const Tensor& v, std::size_t begin, std::size_t end) {
  if (begin >= end || end > v.numel())
    throw DimensionError("slice_vector: bad range for shape " + shape_str(v.shape()));
  return Tensor({end - begin}, std::vector<float>(v.data().begin() + begin, v.data().begin() + end));
}

// [m,k] x [k,n]. Each output entry accumulates in double over k, left to right.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a.at(i, p);
      auto brow = b.row(p);
      for (std::size_t j = 0; j < n; ++j) acc[j] += aip * double(brow[j]);
    }
    auto orow = out.row(i);
    for (std::size_t j = 0; j < n; ++j) orow[j] = static_cast<float>(acc[j]);
  }
  return out;
}

inline constexpr float kDefaultLayerNormEps = 1e-5f;

// Normalizes each vector along the last axis to zero mean and unit
// population variance, then applies gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         float eps = kDefaultLayerNormEps) {
  const std::size_t d = x.last_dim();
  if (d == 0) throw DimensionError("layer_norm: empty feature dimension");
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                         shape_str(beta.shape()) + " do not match last dim of " +
                         shape_str(x.shape()));
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    double mean = 0.0;
    for (float v : in) mean += v;
    mean /= double(d);
    double var = 0.0;
    for (float v : in) var += (v - mean) * (v - mean);
    var /= double(d);
    const double inv = 1.0 / std::sqrt(var + double(eps));
    for (std::size_t j = 0; j < d; ++j)
      o[j] = static_cast<float>((in[j] - mean) * inv * gamma[j] + beta[j]);
  }
  return out;
}

inline Tensor softmax(const Tensor& x) {
  const std::size_t n = x.last_dim();
  if (n == 0) throw DimensionError("softmax: empty axis");
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    const float mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    std::vector<double> e(n);
    for (std::size_t j = 0; j < n; ++j) {
      e[j] = std::exp(double(in[j]) - double(mx));
      sum += e[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] = static_cast<float>(e[j] / sum);
  }
  return out;
}

inline float gelu(float x) {
  const double xd = x;
  return static_cast<float>(0.5 * xd * (1.0 + std::erf(xd / std::sqrt(2.0))));
}

// Exact erf formulation, not the tanh approximation.
inline Tensor gelu(const Tensor& x) {
  Tensor out = x;
  for (float& v : out.data()) v = gelu(v);
  return out;
}

inline double dot(std::span<const float> u, std::span<const float> v) {
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += double(u[i]) * double(v[i]);
  return s;
}

inline double cosine_similarity(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size())
    throw DimensionError("cosine_similarity: length " + std::to_string(u.size()) + " vs " +
                         std::to_string(v.size()));
  const double nu = l2_norm(u), nv = l2_norm(v);
  if (nu == 0.0 || nv == 0.0) throw DegenerateVectorError("cosine_similarity: zero-norm vector");
  return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

inline double cosine_similarity(const Tensor& u, const Tensor& v) {
  return cosine_similarity(u.data(), v.data());
}

// Seeded generator: std::mt19937_64 for the bit stream (fully specified by
// the standard) and Box-Muller for normals, so sample streams do not depend
// on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 bits of resolution.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw SamplingError("Rng::below: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do r = next_u64();
    while (r >= limit);
    return r % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(theta);
    has_spare_ = true;
    return radius * std::cos(theta);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// SplitMix64 finalizer; used to derive independent child seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline Tensor gaussian_sample(Rng& rng, Shape shape, float mean, float stddev) {
  if (!(stddev >= 0.0f)) throw ValidationError("gaussian_sample: std must be >= 0");
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = static_cast<float>(double(mean) + double(stddev) * rng.normal());
  return t;
}

}  // namespace dslens
