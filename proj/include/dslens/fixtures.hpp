#pragma once

// Synthetic images for demos and tests: smooth near-grey textures standing in
// for natural photos, and a saturated magenta "flower" overlay.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "dslens/evaluation.hpp"
#include "dslens/image.hpp"
#include "dslens/tensor.hpp"
#include "dslens/weights_io.hpp"

namespace dslens {

// Sum of a few random low-frequency gratings in luminance plus faint
// per-channel tint. Pixel space, values in [0, 1].
inline Tensor synthetic_base_image(std::uint64_t seed, std::size_t size) {
  Rng rng(seed);
  constexpr int kWaves = 4;
  double fx[kWaves], fy[kWaves], phase[kWaves], amp[kWaves];
  for (int k = 0; k < kWaves; ++k) {
    fx[k] = (rng.uniform() * 2.0 - 1.0) * 3.0;
    fy[k] = (rng.uniform() * 2.0 - 1.0) * 3.0;
    phase[k] = rng.uniform() * 2.0 * std::numbers::pi;
    amp[k] = 0.08 + 0.1 * rng.uniform();
  }
  const double base = 0.35 + 0.3 * rng.uniform();
  double tint[3];
  for (double& t : tint) t = (rng.uniform() * 2.0 - 1.0) * 0.03;
  Tensor img({3, size, size});
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double lum = base;
      const double u = double(x) / double(size), v = double(y) / double(size);
      for (int k = 0; k < kWaves; ++k)
        lum += amp[k] * std::sin(2.0 * std::numbers::pi * (fx[k] * u + fy[k] * v) + phase[k]);
      for (std::size_t c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(std::clamp(lum + tint[c], 0.0, 1.0));
    }
  return img;
}

// Magenta disc with a soft one-pixel rim; mask is the coverage.
inline OverlayImage flower_overlay(std::size_t size) {
  OverlayImage ov{Tensor({3, size, size}), Tensor({size, size})};
  const double r = size / 2.0, cx = (size - 1) / 2.0;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double d = std::hypot(double(x) - cx, double(y) - cx);
      ov.mask.at(y, x) = static_cast<float>(std::clamp(r - d, 0.0, 1.0));
      ov.rgb.at(0, y, x) = 0.95f;
      ov.rgb.at(1, y, x) = 0.05f;
      ov.rgb.at(2, y, x) = 0.9f;
    }
  return ov;
}

// Overlay placement that covers patches 5, 6, 9, 10 of the reference config.
inline OverlayConfig default_overlay_config(std::size_t image_size = 32) {
  OverlayConfig cfg;
  cfg.overlay = flower_overlay(image_size / 2);
  cfg.row = image_size / 4;
  cfg.col = image_size / 4;
  return cfg;
}

// The overlay alone on a neutral grey background.
inline Tensor overlay_on_neutral(const OverlayConfig& cfg, std::size_t image_size) {
  return composite_overlay(Tensor::full({3, image_size, image_size}, 0.5f), cfg);
}

// Planted model plus overlayed copies of synthetic base images, all
// standardized and ready to feed to the model.
struct PlantedFixture {
  PlantedSpec spec;
  Weights w;
  OverlayConfig overlay;
  CorruptionConfig corruption;
  std::vector<Tensor> originals;
  std::vector<Tensor> overlayed;
  Tensor overlay_reference;  // clean embedding of the overlay on grey
};

inline PlantedFixture make_planted_fixture(std::uint64_t model_seed = 1, std::size_t n_images = 5,
                                           std::uint64_t image_seed = 100,
                                           const PlantedSpec& spec = PlantedSpec{}) {
  PlantedFixture f;
  f.spec = spec;
  f.w = generate_planted_model(spec, model_seed);
  const std::size_t size = spec.base.image_size;
  f.overlay = default_overlay_config(size);
  f.corruption = CorruptionConfig{7, 0.0f, 1.0f};
  for (std::size_t i = 0; i < n_images; ++i) {
    const Tensor base = synthetic_base_image(image_seed + i, size);
    f.originals.push_back(standardize(base));
    f.overlayed.push_back(standardize(composite_overlay(base, f.overlay)));
  }
  f.overlay_reference = run_with_cache(standardize(overlay_on_neutral(f.overlay, size)), f.w).embedding;
  return f;
}

}  // namespace dslens
