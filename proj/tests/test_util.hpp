#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include "dslens/dslens.hpp"

namespace dslens::testing {

inline Tensor random_tensor(std::uint64_t seed, Shape shape, float stddev = 1.0f) {
  Rng rng(seed);
  return gaussian_sample(rng, std::move(shape), 0.0f, stddev);
}

// Standardized-space image for `cfg`.
inline Tensor random_image(std::uint64_t seed, const ModelConfig& cfg) {
  return random_tensor(seed, {kImageChannels, cfg.image_size, cfg.image_size});
}

// |a - b| / max(|b|, floor), elementwise max.
inline double max_rel_err(const Tensor& a, const Tensor& b, double floor = 1e-6) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(double(a[i]) - double(b[i])) / std::max(std::abs(double(b[i])), floor));
  return m;
}

// Relative error of the whole tensor: |a - b| / |b|.
inline double norm_rel_err(const Tensor& a, const Tensor& b) {
  return l2_norm(sub(a, b)) / std::max(l2_norm(b), 1e-30);
}

inline std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "dslens_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

}  // namespace dslens::testing
