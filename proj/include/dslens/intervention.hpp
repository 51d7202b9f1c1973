#pragma once

// Corrupted runs, steering, patching, ablation and the composed
// Diffusion Steering Lens (DSL) forward pass.
//
// DSL for a submodule site s:
//   1. clean run on the image       -> x   = clean[s]
//   2. run on a Gaussian-noise image -> x*  = corrupt[s], o* at every
//      downstream submodule site
//   3. rerun on the noise image with s set to x* + alpha (x - x*) and every
//      downstream head/MLP output patched to its corrupted value.
// Only the direct path from s to the readout then differs from the corrupted
// run, which is what dsl_closed_form() computes analytically.

#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "dslens/error.hpp"
#include "dslens/model.hpp"
#include "dslens/tensor.hpp"

namespace dslens {

inline constexpr float kDefaultAlpha = 100.0f;
// Steering coefficients at or below this are known to give noisy lenses.
inline constexpr float kStableAlphaThreshold = 10.0f;

struct CorruptionConfig {
  std::uint64_t seed = 0;
  float mean = 0.0f;
  float std = 1.0f;
};

// Pure-noise image; independent of any clean image.
inline Tensor corrupt_image(const CorruptionConfig& cfg, const Shape& image_shape) {
  if (!(cfg.std >= 0.0f)) throw ValidationError("corruption std must be >= 0");
  Rng rng(cfg.seed);
  return gaussian_sample(rng, image_shape, cfg.mean, cfg.std);
}

// x_corrupt + alpha * (x_clean - x_corrupt), evaluated in double and rounded
// once, so alpha = 0 and alpha = 1 reproduce the endpoints.
inline Tensor steer(const Tensor& x_clean, const Tensor& x_corrupt, float alpha) {
  if (x_clean.shape() != x_corrupt.shape())
    throw DimensionError("steer: clean shape " + shape_str(x_clean.shape()) +
                         " vs corrupted shape " + shape_str(x_corrupt.shape()));
  Tensor out(x_corrupt.shape());
  const double a = alpha;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double c = x_corrupt[i];
    out[i] = static_cast<float>(c + a * (double(x_clean[i]) - c));
  }
  return out;
}

enum class TokenScope : std::uint8_t { kAll, kClassToken };
enum class AblationMode : std::uint8_t { kZero, kCorruptSource, kMeanSource };

inline const char* ablation_mode_name(AblationMode m) {
  switch (m) {
    case AblationMode::kZero: return "zero";
    case AblationMode::kCorruptSource: return "corrupt";
    case AblationMode::kMeanSource: return "mean";
  }
  return "?";
}

inline AblationMode parse_ablation_mode(const std::string& s) {
  if (s == "zero") return AblationMode::kZero;
  if (s == "corrupt" || s == "corrupt-source") return AblationMode::kCorruptSource;
  if (s == "mean" || s == "mean-source") return AblationMode::kMeanSource;
  throw ValidationError("unknown ablation mode '" + s + "' (expected zero, corrupt or mean)");
}

using CachePtr = std::shared_ptr<const ActivationCache>;

// A cache together with the name it is referred to by in spec files.
struct CacheRef {
  std::string name;
  CachePtr cache;
};

struct SteerEdit {
  Site site;
  float alpha = kDefaultAlpha;
  CacheRef clean;
  CacheRef corrupt;
  TokenScope scope = TokenScope::kAll;
};

struct PatchEdit {
  Site site;
  CacheRef source;
  TokenScope scope = TokenScope::kAll;
};

// kZero needs no source; the other modes read the replacement from `source`.
struct AblateEdit {
  Site site;
  AblationMode mode = AblationMode::kZero;
  CacheRef source;
  TokenScope scope = TokenScope::kAll;
};

using Edit = std::variant<SteerEdit, PatchEdit, AblateEdit>;

inline const Site& edit_site(const Edit& e) {
  return std::visit([](const auto& x) -> const Site& { return x.site; }, e);
}

inline TokenScope edit_scope(const Edit& e) {
  return std::visit([](const auto& x) { return x.scope; }, e);
}

// Ordered set of edits, at most one per site.
class InterventionSpec {
 public:
  InterventionSpec() = default;

  InterventionSpec& add(Edit e) {
    const Site s = edit_site(e);
    if (index_.count(s)) throw InterventionError("duplicate edit for site " + s.str());
    index_.emplace(s, edits_.size());
    edits_.push_back(std::move(e));
    return *this;
  }

  const std::vector<Edit>& edits() const { return edits_; }
  bool empty() const { return edits_.empty(); }
  std::size_t size() const { return edits_.size(); }

  const Edit* find(const Site& s) const {
    auto it = index_.find(s);
    return it == index_.end() ? nullptr : &edits_[it->second];
  }

  // Sites valid for `cfg`, finite alphas, sources present and holding the site.
  void validate(const ModelConfig& cfg) const {
    for (const auto& e : edits_) {
      const Site& s = edit_site(e);
      validate_site(s, cfg);
      auto need = [&](const CacheRef& ref, const char* role) {
        if (!ref.cache)
          throw InterventionError("edit at site " + s.str() + ": missing " + role + " cache");
        if (!ref.cache->contains(s))
          throw InterventionError("edit at site " + s.str() + ": " + role + " cache '" + ref.name +
                                  "' has no entry for the site");
      };
      std::visit(
          [&](const auto& x) {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, SteerEdit>) {
              if (!std::isfinite(x.alpha))
                throw InterventionError("steer at site " + s.str() + ": alpha not finite");
              need(x.clean, "clean");
              need(x.corrupt, "corrupted");
            } else if constexpr (std::is_same_v<T, PatchEdit>) {
              need(x.source, "source");
            } else {
              if (x.mode != AblationMode::kZero) need(x.source, "ablation source");
            }
          },
          e);
    }
  }

 private:
  std::vector<Edit> edits_;
  std::map<Site, std::size_t> index_;
};

namespace detail {

class InterventionHook final : public SiteHook {
 public:
  explicit InterventionHook(const InterventionSpec& spec) : spec_(spec) {}

  bool edits(const Site& s) const override { return spec_.find(s) != nullptr; }

  bool overwrites(const Site& s) const override {
    const Edit* e = spec_.find(s);
    return e && edit_scope(*e) == TokenScope::kAll;
  }

  void apply(const Site& s, Tensor& activation) const override {
    const Edit& e = *spec_.find(s);
    const Tensor replacement = std::visit(
        [&](const auto& x) -> Tensor {
          using T = std::decay_t<decltype(x)>;
          if constexpr (std::is_same_v<T, SteerEdit>) {
            return steer(x.clean.cache->at(s), x.corrupt.cache->at(s), x.alpha);
          } else if constexpr (std::is_same_v<T, PatchEdit>) {
            return x.source.cache->at(s);
          } else {
            if (x.mode == AblationMode::kZero) return Tensor(activation.shape());
            return x.source.cache->at(s);
          }
        },
        e);
    if (replacement.shape() != activation.shape())
      throw InterventionError("edit at site " + s.str() + ": source shape " +
                              shape_str(replacement.shape()) + " does not match activation " +
                              shape_str(activation.shape()));
    if (edit_scope(e) == TokenScope::kAll || activation.rank() != 2) {
      activation = replacement;
    } else {
      std::copy(replacement.row(0).begin(), replacement.row(0).end(), activation.row(0).begin());
    }
  }

 private:
  const InterventionSpec& spec_;
};

}  // namespace detail

// Forward pass in which every edited site's activation is replaced before it
// is added to the residual stream. The cache records post-edit values.
inline ForwardResult run_with_interventions(const Tensor& image, const Weights& w,
                                            const InterventionSpec& spec) {
  spec.validate(w.config);
  if (spec.empty()) return run_with_cache(image, w);
  detail::InterventionHook hook(spec);
  return run_with_hook(image, w, &hook);
}

// Head and MLP sites that read a residual stream affected by `site`. Sibling
// heads of the same layer read resid_pre and are excluded.
inline std::vector<Site> downstream_sites(const Site& site, const ModelConfig& cfg) {
  validate_site(site, cfg);
  if (!site.is_submodule())
    throw SiteError("downstream_sites: " + site.str() + " is not a head or MLP output");
  std::vector<Site> out;
  if (site.kind == SiteKind::kHeadOut) out.push_back(Site::mlp_out(site.layer));
  for (std::size_t l = site.layer + 1; l < cfg.n_layers; ++l) {
    for (std::size_t h = 0; h < cfg.n_heads; ++h) out.push_back(Site::head_out(l, h));
    out.push_back(Site::mlp_out(l));
  }
  return out;
}

// Clean and corrupted runs shared by every DSL evaluation on one image.
struct DslContext {
  Tensor image;
  Tensor noise_image;
  CachePtr clean;
  CachePtr corrupt;
  Tensor clean_embedding;
  Tensor corrupt_embedding;
};

inline DslContext prepare_dsl(const Tensor& image, const CorruptionConfig& corruption,
                              const Weights& w) {
  DslContext ctx;
  ctx.image = image;
  ctx.noise_image = corrupt_image(corruption, image.shape());
  auto clean = run_with_cache(image, w);
  auto corrupt = run_with_cache(ctx.noise_image, w);
  ctx.clean_embedding = clean.embedding;
  ctx.corrupt_embedding = corrupt.embedding;
  ctx.clean = std::make_shared<const ActivationCache>(std::move(clean.cache));
  ctx.corrupt = std::make_shared<const ActivationCache>(std::move(corrupt.cache));
  return ctx;
}

inline InterventionSpec dsl_spec(const DslContext& ctx, const Site& site, float alpha,
                                 const ModelConfig& cfg, TokenScope scope = TokenScope::kAll) {
  if (!site.is_submodule())
    throw SiteError("DSL site " + site.str() + " must be a head or MLP output");
  InterventionSpec spec;
  spec.add(SteerEdit{site, alpha, {"clean", ctx.clean}, {"corrupt", ctx.corrupt}, scope});
  for (const Site& d : downstream_sites(site, cfg))
    spec.add(PatchEdit{d, {"corrupt", ctx.corrupt}, TokenScope::kAll});
  return spec;
}

// Full DSL pass; the returned cache holds the pre-readout residual at
// resid_post of the last layer.
inline ForwardResult dsl_run(const DslContext& ctx, const Site& site, float alpha, const Weights& w,
                             TokenScope scope = TokenScope::kAll) {
  return run_with_interventions(ctx.noise_image, w, dsl_spec(ctx, site, alpha, w.config, scope));
}

inline Tensor dsl_forward(const DslContext& ctx, const Site& site, float alpha, const Weights& w,
                          TokenScope scope = TokenScope::kAll) {
  return dsl_run(ctx, site, alpha, w, scope).embedding;
}

inline Tensor dsl_forward(const Tensor& image, const CorruptionConfig& corruption, const Site& site,
                          float alpha, const Weights& w) {
  return dsl_forward(prepare_dsl(image, corruption, w), site, alpha, w);
}

// Analytic counterpart of dsl_forward: with every downstream output patched,
// the final residual is corrupt[resid_post(last)] + alpha (clean[s] - corrupt[s]).
inline Tensor dsl_closed_form_residual(const ActivationCache& clean, const ActivationCache& corrupt,
                                       const Site& site, float alpha, const Weights& w) {
  const Site last = Site::resid_post(w.config.n_layers - 1);
  const Tensor& base = corrupt.at(last);
  const Tensor& x = clean.at(site);
  const Tensor& xs = corrupt.at(site);
  Tensor out = base;
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = static_cast<float>(double(base[i]) + double(alpha) * (double(x[i]) - double(xs[i])));
  return out;
}

inline Tensor dsl_closed_form(const ActivationCache& clean, const ActivationCache& corrupt,
                              const Site& site, float alpha, const Weights& w) {
  return final_readout(dsl_closed_form_residual(clean, corrupt, site, alpha, w), w);
}

// Elementwise mean of several caches over their common sites; the source for
// mean-ablation.
inline ActivationCache mean_cache(const std::vector<CachePtr>& caches) {
  if (caches.empty()) throw CacheError("mean_cache: no caches");
  ActivationCache out;
  for (const auto& [site, first] : *caches.front()) {
    std::vector<double> acc(first.numel(), 0.0);
    bool everywhere = true;
    for (const auto& c : caches) {
      if (!c->contains(site)) {
        everywhere = false;
        break;
      }
      const Tensor& t = c->at(site);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += t[i];
    }
    if (!everywhere) continue;
    Tensor m(first.shape());
    for (std::size_t i = 0; i < acc.size(); ++i) m[i] = static_cast<float>(acc[i] / caches.size());
    out.put(site, std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text serialization. One edit per line, whitespace-separated key=value pairs:
//
//   edit=steer site=head_out layer=2 head=1 alpha=100 clean=clean corrupt=corrupt scope=all
//   edit=patch site=mlp_out layer=3 source=corrupt
//   edit=ablate site=head_out layer=0 head=3 mode=zero
//
// Cache fields name caches resolved by the caller on load. '#' starts a comment.

using CacheResolver = std::function<CachePtr(const std::string&)>;

inline std::string format_float(double v) {
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

inline std::string to_text(const InterventionSpec& spec) {
  std::ostringstream os;
  os << "# dslens intervention spec v1\n";
  for (const auto& e : spec.edits()) {
    const Site& s = edit_site(e);
    std::ostringstream site;
    site << "site=" << site_kind_name(s.kind);
    if (s.kind != SiteKind::kFinalEmbedding) site << " layer=" << s.layer;
    if (s.has_head()) site << " head=" << s.head;
    const char* scope = edit_scope(e) == TokenScope::kAll ? "all" : "class";
    std::visit(
        [&](const auto& x) {
          using T = std::decay_t<decltype(x)>;
          if constexpr (std::is_same_v<T, SteerEdit>) {
            os << "edit=steer " << site.str() << " alpha=" << format_float(x.alpha)
               << " clean=" << x.clean.name << " corrupt=" << x.corrupt.name;
          } else if constexpr (std::is_same_v<T, PatchEdit>) {
            os << "edit=patch " << site.str() << " source=" << x.source.name;
          } else {
            os << "edit=ablate " << site.str() << " mode=" << ablation_mode_name(x.mode);
            if (x.mode != AblationMode::kZero) os << " source=" << x.source.name;
          }
        },
        e);
    os << " scope=" << scope << '\n';
  }
  return os.str();
}

inline InterventionSpec parse_intervention_spec(const std::string& text, const CacheResolver& resolve) {
  InterventionSpec spec;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::map<std::string, std::string> kv;
    std::string tok;
    while (fields >> tok) {
      auto eq = tok.find('=');
      if (eq == std::string::npos)
        throw ValidationError("intervention spec line " + std::to_string(lineno) +
                              ": expected key=value, got '" + tok + "'");
      kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    if (kv.empty()) continue;
    auto get = [&](const std::string& k) -> const std::string& {
      auto it = kv.find(k);
      if (it == kv.end())
        throw ValidationError("intervention spec line " + std::to_string(lineno) + ": missing '" + k + "'");
      return it->second;
    };
    auto to_index = [&](const std::string& k) {
      const std::string& v = get(k);
      std::size_t pos = 0;
      unsigned long n = 0;
      try {
        n = std::stoul(v, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos != v.size() || v.empty() || v[0] == '-')
        throw ValidationError("intervention spec line " + std::to_string(lineno) + ": bad " + k +
                              " '" + v + "'");
      return static_cast<std::size_t>(n);
    };
    Site site;
    site.kind = parse_site_kind(get("site"));
    if (site.kind != SiteKind::kFinalEmbedding) site.layer = to_index("layer");
    if (site.has_head()) site.head = to_index("head");
    TokenScope scope = TokenScope::kAll;
    if (kv.count("scope")) {
      if (kv["scope"] == "class") scope = TokenScope::kClassToken;
      else if (kv["scope"] != "all")
        throw ValidationError("intervention spec line " + std::to_string(lineno) + ": bad scope");
    }
    auto ref = [&](const std::string& k) { return CacheRef{get(k), resolve(get(k))}; };
    const std::string& kind = get("edit");
    if (kind == "steer") {
      float alpha = 0.0f;
      try {
        alpha = std::stof(get("alpha"));
      } catch (const std::exception&) {
        throw ValidationError("intervention spec line " + std::to_string(lineno) + ": bad alpha");
      }
      spec.add(SteerEdit{site, alpha, ref("clean"), ref("corrupt"), scope});
    } else if (kind == "patch") {
      spec.add(PatchEdit{site, ref("source"), scope});
    } else if (kind == "ablate") {
      AblateEdit a{site, parse_ablation_mode(get("mode")), {}, scope};
      if (a.mode != AblationMode::kZero) a.source = ref("source");
      spec.add(std::move(a));
    } else {
      throw ValidationError("intervention spec line " + std::to_string(lineno) +
                            ": unknown edit kind '" + kind + "'");
    }
  }
  return spec;
}

}  // namespace dslens
