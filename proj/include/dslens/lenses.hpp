#pragma once

// Diffusion Lens (final readout of a residual or submodule state) and
// Diffusion Steering Lens, plus similarity ranking of sites.

#include <algorithm>
#include <string>
#include <vector>

#include "dslens/decoder.hpp"
#include "dslens/error.hpp"
#include "dslens/image.hpp"
#include "dslens/intervention.hpp"
#include "dslens/model.hpp"
#include "dslens/tensor.hpp"

namespace dslens {

inline constexpr std::size_t kDefaultTopK = 6;
inline constexpr std::size_t kReportTopK = 10;

enum class LensKind : std::uint8_t { kDsl, kDiffusionLens };

inline const char* lens_kind_name(LensKind k) { return k == LensKind::kDsl ? "dsl" : "dl"; }

inline LensKind parse_lens_kind(const std::string& s) {
  if (s == "dsl") return LensKind::kDsl;
  if (s == "dl" || s == "diffusion-lens") return LensKind::kDiffusionLens;
  throw ValidationError("unknown lens kind '" + s + "' (expected dsl or dl)");
}

struct LensResult {
  Site site;
  Tensor embedding;
  double similarity_to_input = 0.0;
};

// Cosine similarity, with a zero-norm lens embedding scored as 0.
inline double lens_similarity(const Tensor& lens_embedding, const Tensor& reference) {
  if (l2_norm(lens_embedding) == 0.0) return 0.0;
  return cosine_similarity(lens_embedding, reference);
}

inline Tensor diffusion_lens(const ActivationCache& cache, std::size_t layer, const Weights& w) {
  validate_site(Site::resid_post(layer), w.config);
  return final_readout(cache.at(Site::resid_post(layer)), w);
}

// The submodule output read out as if it were a residual state on its own.
inline Tensor diffusion_lens_submodule(const ActivationCache& cache, const Site& site, const Weights& w) {
  validate_site(site, w.config);
  if (site.kind == SiteKind::kFinalEmbedding) throw SiteError("diffusion lens needs a token-level site");
  return final_readout(cache.at(site), w);
}

inline LensResult dsl_lens(const DslContext& ctx, const Site& site, float alpha, const Weights& w,
                           TokenScope scope = TokenScope::kAll) {
  LensResult r{site, dsl_forward(ctx, site, alpha, w, scope), 0.0};
  r.similarity_to_input = lens_similarity(r.embedding, ctx.clean_embedding);
  return r;
}

inline LensResult dsl_lens(const Tensor& image, const CorruptionConfig& corruption, const Site& site,
                           float alpha, const Weights& w) {
  return dsl_lens(prepare_dsl(image, corruption, w), site, alpha, w);
}

inline LensResult lens(LensKind kind, const DslContext& ctx, const Site& site, float alpha,
                       const Weights& w, TokenScope scope = TokenScope::kAll) {
  if (kind == LensKind::kDsl) return dsl_lens(ctx, site, alpha, w, scope);
  LensResult r{site, diffusion_lens_submodule(*ctx.clean, site, w), 0.0};
  r.similarity_to_input = lens_similarity(r.embedding, ctx.clean_embedding);
  return r;
}

// Descending similarity; ties by site address (layer, then head) ascending.
inline void sort_by_similarity(std::vector<LensResult>& results) {
  std::sort(results.begin(), results.end(), [](const LensResult& a, const LensResult& b) {
    if (a.similarity_to_input != b.similarity_to_input)
      return a.similarity_to_input > b.similarity_to_input;
    return a.site < b.site;
  });
}

inline std::vector<LensResult> rank_sites_by_similarity(const DslContext& ctx,
                                                        const std::vector<Site>& sites, float alpha,
                                                        const Weights& w, std::size_t k,
                                                        LensKind kind = LensKind::kDsl,
                                                        TokenScope scope = TokenScope::kAll) {
  if (sites.empty()) throw ValidationError("rank_sites_by_similarity: empty site list");
  if (k > sites.size())
    throw ValidationError("rank_sites_by_similarity: k = " + std::to_string(k) + " exceeds " +
                          std::to_string(sites.size()) + " sites");
  std::vector<LensResult> results;
  results.reserve(sites.size());
  for (const auto& s : sites) results.push_back(lens(kind, ctx, s, alpha, w, scope));
  sort_by_similarity(results);
  results.resize(k);
  return results;
}

inline std::vector<LensResult> rank_sites_by_similarity(const Tensor& image,
                                                        const CorruptionConfig& corruption,
                                                        const std::vector<Site>& sites, float alpha,
                                                        const Weights& w, std::size_t k = kDefaultTopK) {
  return rank_sites_by_similarity(prepare_dsl(image, corruption, w), sites, alpha, w, k);
}

// Similarity measured after decoding the lens embedding to pixels and
// encoding it again, for comparison with image-space measurements.
inline double reencoded_similarity(const Tensor& lens_embedding, const Tensor& reference_embedding,
                                   const DecoderSpec& decoder, const Weights& w,
                                   const Normalization& norm = {}) {
  const Tensor pixels = decode(decoder, lens_embedding);
  const Tensor again = run_with_cache(standardize(pixels, norm), w).embedding;
  return lens_similarity(again, reference_embedding);
}

}  // namespace dslens
