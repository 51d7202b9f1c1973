#pragma once

// Interventional checks of the lenses:
//   Eval 1  per-head ablation effect vs lens similarity, correlated.
//   Eval 2  cumulative head ablation on overlayed images, comparing a
//           lens-based selection with an ACDC-like greedy selection and a
//           matched random baseline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dslens/binary_io.hpp"
#include "dslens/error.hpp"
#include "dslens/image.hpp"
#include "dslens/intervention.hpp"
#include "dslens/kv_text.hpp"
#include "dslens/lenses.hpp"
#include "dslens/model.hpp"
#include "dslens/tensor.hpp"

namespace dslens {

inline constexpr double kDefaultSelectionThreshold = 0.5;
// Tuned on the default planted fixture: the smallest round value at which the
// greedy pass keeps every planted head (see tests/evaluation_test.cpp).
inline constexpr double kDefaultAcdcTau = 1.0;
inline constexpr std::size_t kDefaultRandomRepeats = 50;

// ---------------------------------------------------------------------------
// Overlays

struct OverlayConfig {
  OverlayImage overlay;
  std::size_t row = 0;
  std::size_t col = 0;
  float scale = 1.0f;
  float opacity = 1.0f;

  std::size_t scaled_height() const {
    return static_cast<std::size_t>(std::lround(overlay.rgb.dim(1) * double(scale)));
  }
  std::size_t scaled_width() const {
    return static_cast<std::size_t>(std::lround(overlay.rgb.dim(2) * double(scale)));
  }
};

// Alpha-blends the nearest-neighbour-scaled overlay onto `base` (pixel space).
inline Tensor composite_overlay(const Tensor& base, const OverlayConfig& cfg) {
  if (base.rank() != 3 || base.dim(0) != 3)
    throw DimensionError("composite_overlay: base must be [3,H,W], got " + shape_str(base.shape()));
  const auto& ov = cfg.overlay;
  if (ov.rgb.rank() != 3 || ov.rgb.dim(0) != 3 || ov.mask.rank() != 2 ||
      ov.mask.dim(0) != ov.rgb.dim(1) || ov.mask.dim(1) != ov.rgb.dim(2))
    throw DimensionError("composite_overlay: overlay must be [3,h,w] with an [h,w] mask");
  if (!(cfg.scale > 0.0f) || !std::isfinite(cfg.scale))
    throw PlacementError("composite_overlay: scale must be > 0");
  if (!(cfg.opacity > 0.0f && cfg.opacity <= 1.0f))
    throw PlacementError("composite_overlay: opacity must be in (0, 1]");
  const std::size_t sh = cfg.scaled_height(), sw = cfg.scaled_width();
  if (sh == 0 || sw == 0 || cfg.row + sh > base.dim(1) || cfg.col + sw > base.dim(2))
    throw PlacementError("composite_overlay: " + std::to_string(sh) + "x" + std::to_string(sw) +
                         " overlay at (" + std::to_string(cfg.row) + "," + std::to_string(cfg.col) +
                         ") does not fit a " + std::to_string(base.dim(1)) + "x" +
                         std::to_string(base.dim(2)) + " image");
  Tensor out = base;
  const std::size_t oh = ov.rgb.dim(1), ow = ov.rgb.dim(2);
  for (std::size_t y = 0; y < sh; ++y) {
    const std::size_t sy = std::min(oh - 1, static_cast<std::size_t>((y + 0.5) / cfg.scale));
    for (std::size_t x = 0; x < sw; ++x) {
      const std::size_t sx = std::min(ow - 1, static_cast<std::size_t>((x + 0.5) / cfg.scale));
      const float a = cfg.opacity * std::clamp(ov.mask.at(sy, sx), 0.0f, 1.0f);
      if (a == 0.0f) continue;
      for (std::size_t c = 0; c < 3; ++c) {
        float& px = out.at(c, cfg.row + y, cfg.col + x);
        px = a == 1.0f ? ov.rgb.at(c, sy, sx) : px * (1.0f - a) + ov.rgb.at(c, sy, sx) * a;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablation

// Where ablated activations come from. kZero carries no cache.
struct AblationSource {
  AblationMode mode = AblationMode::kZero;
  CachePtr cache;
};

// corrupt: the corrupted run on noise shaped like the images;
// mean:    the elementwise mean of clean runs over `reference_images`.
inline AblationSource make_ablation_source(AblationMode mode, const Weights& w,
                                           const CorruptionConfig& corruption,
                                           const std::vector<Tensor>& reference_images) {
  AblationSource src{mode, nullptr};
  const ModelConfig& c = w.config;
  const Shape shape{kImageChannels, c.image_size, c.image_size};
  if (mode == AblationMode::kCorruptSource) {
    src.cache = std::make_shared<const ActivationCache>(
        run_with_cache(corrupt_image(corruption, shape), w).cache);
  } else if (mode == AblationMode::kMeanSource) {
    if (reference_images.empty()) throw ValidationError("mean ablation needs reference images");
    std::vector<CachePtr> caches;
    for (const auto& img : reference_images)
      caches.push_back(std::make_shared<const ActivationCache>(run_with_cache(img, w).cache));
    src.cache = std::make_shared<const ActivationCache>(mean_cache(caches));
  }
  return src;
}

inline InterventionSpec ablation_spec(const std::vector<Site>& sites, const AblationSource& src) {
  InterventionSpec spec;
  for (const auto& s : sites) spec.add(AblateEdit{s, src.mode, {ablation_mode_name(src.mode), src.cache}});
  return spec;
}

inline Tensor ablated_embedding(const Tensor& image, const std::vector<Site>& sites,
                                const AblationSource& src, const Weights& w) {
  return run_with_interventions(image, w, ablation_spec(sites, src)).embedding;
}

// 1 - cos(clean output, output with `site` ablated). Measured by rerunning.
inline double ablation_effect(const Tensor& image, const Tensor& clean_embedding, const Site& site,
                              const AblationSource& src, const Weights& w) {
  return 1.0 - cosine_similarity(clean_embedding, ablated_embedding(image, {site}, src, w));
}

inline double ablation_effect(const Tensor& image, const Site& site, const AblationSource& src,
                              const Weights& w) {
  return ablation_effect(image, run_with_cache(image, w).embedding, site, src, w);
}

// ---------------------------------------------------------------------------
// Correlation

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DimensionError("pearson: length mismatch");
  if (x.size() < 2) throw CorrelationError("correlation undefined for fewer than 2 points");
  const double n = double(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw CorrelationError("correlation undefined: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Average ranks for ties.
inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = (double(i) + double(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(ranks(x), ranks(y));
}

// ---------------------------------------------------------------------------
// Eval 1

struct Eval1Record {
  std::size_t image = 0;
  Site site;
  double viz_similarity = 0.0;
  double ablation_effect = 0.0;
  LensKind lens_kind = LensKind::kDsl;
};

struct Eval1Result {
  std::vector<Eval1Record> records;
  double pearson_r = 0.0;
  double spearman_r = 0.0;
};

// One record per (image, site), sorted by image then site.
inline Eval1Result eval1(const std::vector<Tensor>& images, std::vector<Site> sites, LensKind kind,
                         float alpha, const AblationSource& src, const CorruptionConfig& corruption,
                         const Weights& w) {
  if (images.empty() || sites.empty()) throw ValidationError("eval1: images and sites must be non-empty");
  std::sort(sites.begin(), sites.end());
  Eval1Result out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const DslContext ctx = prepare_dsl(images[i], corruption, w);
    for (const auto& s : sites) {
      Eval1Record r;
      r.image = i;
      r.site = s;
      r.lens_kind = kind;
      r.viz_similarity = lens(kind, ctx, s, alpha, w).similarity_to_input;
      r.ablation_effect = ablation_effect(images[i], ctx.clean_embedding, s, src, w);
      out.records.push_back(r);
    }
  }
  std::vector<double> xs, ys;
  for (const auto& r : out.records) {
    xs.push_back(r.viz_similarity);
    ys.push_back(r.ablation_effect);
  }
  out.pearson_r = pearson(xs, ys);
  out.spearman_r = spearman(xs, ys);
  return out;
}

// ---------------------------------------------------------------------------
// Head selections

enum class SelectionProvenance : std::uint8_t { kSimilarityThreshold, kExternalFile, kAcdcLike, kRandom };

struct HeadSelection {
  std::vector<Site> sites;
  SelectionProvenance provenance = SelectionProvenance::kExternalFile;
  std::uint64_t seed = 0;
  std::size_t repeat = 0;

  void validate(const ModelConfig& cfg) const {
    std::set<Site> seen;
    for (const auto& s : sites) {
      if (s.kind != SiteKind::kHeadOut) throw ValidationError("head selection contains non-head site " + s.str());
      validate_site(s, cfg);
      if (!seen.insert(s).second) throw ValidationError("head selection lists " + s.str() + " twice");
    }
  }
};

// Layer descending, then head index descending.
inline std::vector<Site> eval2_order(std::vector<Site> sites) {
  std::sort(sites.begin(), sites.end(), [](const Site& a, const Site& b) {
    if (a.layer != b.layer) return a.layer > b.layer;
    return a.head > b.head;
  });
  return sites;
}

// Heads whose DSL embedding on the overlayed image has cosine >= threshold
// with the overlay's reference embedding, in eval-2 order.
inline HeadSelection select_heads_by_overlay_similarity(const Tensor& overlayed_image,
                                                        const Tensor& overlay_ref_embedding,
                                                        const std::vector<Site>& sites, float alpha,
                                                        double threshold,
                                                        const CorruptionConfig& corruption,
                                                        const Weights& w) {
  if (!std::isfinite(threshold)) throw ValidationError("selection threshold must be finite");
  const DslContext ctx = prepare_dsl(overlayed_image, corruption, w);
  HeadSelection sel;
  sel.provenance = SelectionProvenance::kSimilarityThreshold;
  for (const auto& s : sites) {
    if (s.kind != SiteKind::kHeadOut) throw ValidationError("selection candidate " + s.str() + " is not a head");
    if (lens_similarity(dsl_forward(ctx, s, alpha, w), overlay_ref_embedding) >= threshold)
      sel.sites.push_back(s);
  }
  sel.sites = eval2_order(std::move(sel.sites));
  return sel;
}

// Line-oriented "layer,head" text with '#' comments.
inline std::string to_text(const HeadSelection& sel) {
  std::ostringstream os;
  os << "# layer,head\n";
  for (const auto& s : sel.sites) os << s.layer << ',' << s.head << '\n';
  return os.str();
}

inline HeadSelection parse_head_selection(const std::string& text, const ModelConfig& cfg) {
  HeadSelection sel;
  sel.provenance = SelectionProvenance::kExternalFile;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw ValidationError("selection line " + std::to_string(lineno) + ": expected 'layer,head'");
    try {
      sel.sites.push_back(Site::head_out(parse_u64(trim(line.substr(0, comma)), "layer"),
                                         parse_u64(trim(line.substr(comma + 1)), "head")));
    } catch (const ConfigError& e) {
      throw ValidationError("selection line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  sel.validate(cfg);
  return sel;
}

inline void save_head_selection(const HeadSelection& sel, const std::string& path) {
  write_file_text(path, to_text(sel));
}

inline HeadSelection load_head_selection(const std::string& path, const ModelConfig& cfg) {
  return parse_head_selection(read_file_text(path), cfg);
}

// ---------------------------------------------------------------------------
// Eval 2

struct TrajectoryPoint {
  std::size_t step = 0;
  double sim_to_original = 0.0;
  double sim_to_overlayed = 0.0;
};

struct Eval2Inputs {
  Tensor overlayed_image;
  Tensor original_image;
  Tensor overlayed_embedding;
  Tensor original_embedding;
};

inline Eval2Inputs prepare_eval2(const Tensor& overlayed_image, const Tensor& original_image,
                                 const Weights& w) {
  return {overlayed_image, original_image, run_with_cache(overlayed_image, w).embedding,
          run_with_cache(original_image, w).embedding};
}

inline TrajectoryPoint trajectory_point(std::size_t step, const Tensor& embedding, const Eval2Inputs& in) {
  return {step, cosine_similarity(embedding, in.original_embedding),
          cosine_similarity(embedding, in.overlayed_embedding)};
}

// Point k: the first k heads of the selection, in eval-2 order, ablated
// together on the overlayed image.
inline std::vector<TrajectoryPoint> eval2_trajectory(const Eval2Inputs& in, const HeadSelection& selection,
                                                     const AblationSource& src, const Weights& w) {
  selection.validate(w.config);
  const std::vector<Site> order = eval2_order(selection.sites);
  std::vector<TrajectoryPoint> points;
  points.push_back(trajectory_point(0, in.overlayed_embedding, in));
  for (std::size_t k = 1; k <= order.size(); ++k) {
    const std::vector<Site> prefix(order.begin(), order.begin() + k);
    points.push_back(trajectory_point(k, ablated_embedding(in.overlayed_image, prefix, src, w), in));
  }
  return points;
}

inline std::vector<TrajectoryPoint> eval2_trajectory(const Tensor& overlayed_image,
                                                     const Tensor& original_image,
                                                     const HeadSelection& selection,
                                                     const AblationSource& src, const Weights& w) {
  return eval2_trajectory(prepare_eval2(overlayed_image, original_image, w), selection, src, w);
}

// Greedy pass over `candidates` in eval-2 order. A head is kept iff ablating
// it on top of the heads kept so far raises similarity to the original
// output and lowers similarity to the overlayed output by at most tau.
inline HeadSelection acdc_like_select(const Eval2Inputs& in, double tau, const AblationSource& src,
                                      const Weights& w, std::vector<Site> candidates) {
  if (!(tau >= 0.0)) throw ValidationError("acdc-like selection: tau must be >= 0");
  HeadSelection sel;
  sel.provenance = SelectionProvenance::kAcdcLike;
  TrajectoryPoint current = trajectory_point(0, in.overlayed_embedding, in);
  for (const auto& s : eval2_order(std::move(candidates))) {
    std::vector<Site> trial = sel.sites;
    trial.push_back(s);
    const TrajectoryPoint p = trajectory_point(trial.size(), ablated_embedding(in.overlayed_image, trial, src, w), in);
    const bool gains_target = p.sim_to_original > current.sim_to_original;
    const bool within_tau = current.sim_to_overlayed - p.sim_to_overlayed <= tau;
    if (gains_target && within_tau) {
      sel.sites = std::move(trial);
      current = p;
    }
  }
  return sel;
}

inline HeadSelection acdc_like_select(const Tensor& overlayed_image, const Tensor& original_image,
                                      double tau, const AblationSource& src, const Weights& w) {
  return acdc_like_select(prepare_eval2(overlayed_image, original_image, w), tau, src, w,
                          head_sites(w.config));
}

struct RandomBaselineOptions {
  // Match the DSL selection's total size instead of its per-layer counts.
  bool global_matching = false;
  // When a layer's complement is too small, draw the shortfall from the
  // complement over all layers.
  bool allow_fallback = true;
};

// Draws a random selection matched to `dsl` from the heads of `all_sites`
// that `dsl` does not contain.
inline HeadSelection sample_random_selection(const HeadSelection& dsl, const std::vector<Site>& all_sites,
                                             std::uint64_t seed, const RandomBaselineOptions& opt) {
  const std::set<Site> chosen_by_dsl(dsl.sites.begin(), dsl.sites.end());
  std::vector<Site> global;
  std::map<std::size_t, std::vector<Site>> per_layer;
  for (const auto& s : std::set<Site>(all_sites.begin(), all_sites.end())) {
    if (s.kind != SiteKind::kHeadOut || chosen_by_dsl.count(s)) continue;
    global.push_back(s);
    per_layer[s.layer].push_back(s);
  }
  Rng rng(seed);
  auto draw = [&rng](std::vector<Site>& pool, std::size_t n, std::vector<Site>& into) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
      std::swap(pool[i], pool[j]);
      into.push_back(pool[i]);
    }
  };

  HeadSelection sel;
  sel.provenance = SelectionProvenance::kRandom;
  sel.seed = seed;
  if (opt.global_matching) {
    if (global.size() < dsl.sites.size()) throw SamplingError("random baseline: complement too small");
    draw(global, dsl.sites.size(), sel.sites);
    return sel;
  }
  std::map<std::size_t, std::size_t> quota;
  for (const auto& s : dsl.sites) ++quota[s.layer];
  std::size_t shortfall = 0;
  for (const auto& [layer, n] : quota) {
    auto& pool = per_layer[layer];
    const std::size_t take = std::min(n, pool.size());
    if (take < n && !opt.allow_fallback)
      throw SamplingError("random baseline: layer " + std::to_string(layer) + " has only " +
                          std::to_string(pool.size()) + " non-selected heads for a quota of " +
                          std::to_string(n));
    draw(pool, take, sel.sites);
    shortfall += n - take;
  }
  if (shortfall) {
    const std::set<Site> taken(sel.sites.begin(), sel.sites.end());
    std::vector<Site> rest;
    for (const auto& s : global)
      if (!taken.count(s)) rest.push_back(s);
    std::sort(rest.begin(), rest.end());
    if (rest.size() < shortfall) throw SamplingError("random baseline: global complement too small");
    draw(rest, shortfall, sel.sites);
  }
  return sel;
}

struct RandomTrajectory {
  std::size_t repeat = 0;
  HeadSelection selection;
  std::vector<TrajectoryPoint> points;
};

inline std::vector<RandomTrajectory> random_baseline(const HeadSelection& dsl, const std::vector<Site>& all_sites,
                                                     const std::vector<std::uint64_t>& repeat_seeds,
                                                     const Eval2Inputs& in, const AblationSource& src,
                                                     const Weights& w, const RandomBaselineOptions& opt = {}) {
  std::vector<RandomTrajectory> out;
  for (std::size_t r = 0; r < repeat_seeds.size(); ++r) {
    RandomTrajectory t;
    t.repeat = r;
    t.selection = sample_random_selection(dsl, all_sites, repeat_seeds[r], opt);
    t.selection.repeat = r;
    t.points = eval2_trajectory(in, t.selection, src, w);
    out.push_back(std::move(t));
  }
  return out;
}

inline std::vector<std::uint64_t> repeat_seeds(std::uint64_t seed, std::size_t repeats) {
  std::vector<std::uint64_t> s(repeats);
  for (std::size_t r = 0; r < repeats; ++r) s[r] = mix_seed(seed, r);
  return s;
}

inline std::vector<RandomTrajectory> random_baseline(const HeadSelection& dsl, const std::vector<Site>& all_sites,
                                                     std::size_t repeats, std::uint64_t seed,
                                                     const Eval2Inputs& in, const AblationSource& src,
                                                     const Weights& w, const RandomBaselineOptions& opt = {}) {
  return random_baseline(dsl, all_sites, repeat_seeds(seed, repeats), in, src, w, opt);
}

}  // namespace dslens
