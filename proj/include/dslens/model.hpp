#pragma once

// Pre-LN ViT image encoder with per-head residual decomposition.
//
// Per layer l:
//   resid_mid  = resid_pre + sum_h head_out(l, h)
//   resid_post = resid_mid + mlp_out(l)
// Every one of those tensors is a named Site and is captured in the
// ActivationCache. A SiteHook may rewrite any site's activation before it
// is added to the residual stream; the intervention module builds on that.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "dslens/error.hpp"
#include "dslens/tensor.hpp"

namespace dslens {

inline constexpr std::size_t kImageChannels = 3;

// Only pre-LN is implemented; the field exists so weight files record it.
enum class LnPlacement : std::uint32_t { kPre = 0 };

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_head = 16;
  std::size_t d_mlp = 128;
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t d_embed = 32;
  float ln_eps = kDefaultLayerNormEps;
  LnPlacement ln_placement = LnPlacement::kPre;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t n_patches() const { return grid() * grid(); }
  std::size_t n_tokens() const { return 1 + n_patches(); }
  std::size_t patch_dim() const { return kImageChannels * patch_size * patch_size; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string(name) + " must be >= 1");
    };
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_model, "d_model");
    positive(d_head, "d_head");
    positive(d_mlp, "d_mlp");
    positive(image_size, "image_size");
    positive(patch_size, "patch_size");
    positive(d_embed, "d_embed");
    if (image_size % patch_size != 0)
      throw ConfigError("patch_size (" + std::to_string(patch_size) +
                        ") must divide image_size (" + std::to_string(image_size) + ")");
    if (n_heads * d_head != d_model)
      throw ConfigError("n_heads * d_head (" + std::to_string(n_heads) + " * " +
                        std::to_string(d_head) + ") must equal d_model (" +
                        std::to_string(d_model) + ")");
    if (!(ln_eps >= 0.0f) || !std::isfinite(ln_eps)) throw ConfigError("ln_eps must be finite and >= 0");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Reference toy configuration used throughout the tests.
inline ModelConfig reference_config() { return ModelConfig{}; }

struct LayerWeights {
  Tensor ln1_gamma, ln1_beta;  // [d_model]
  // Fused projections; head h owns columns [h*d_head, (h+1)*d_head) of the
  // query/key/value matrices and the matching rows of w_o.
  Tensor w_q, w_k, w_v;  // [d_model, d_model]
  Tensor b_q, b_k, b_v;  // [d_model]
  Tensor w_o;            // [d_model, d_model]
  Tensor b_o;            // [d_model], attributed to head 0
  Tensor ln2_gamma, ln2_beta;
  Tensor w_in;   // [d_model, d_mlp]
  Tensor b_in;   // [d_mlp]
  Tensor w_out;  // [d_mlp, d_model]
  Tensor b_out;  // [d_model]
};

struct Weights {
  ModelConfig config;
  Tensor patch_w;    // [patch_dim, d_model]
  Tensor patch_b;    // [d_model]
  Tensor class_token;  // [d_model]
  Tensor pos_embed;  // [n_tokens, d_model]
  std::vector<LayerWeights> layers;
  Tensor lnf_gamma, lnf_beta;  // [d_model]
  Tensor proj;                 // [d_model, d_embed]

  // Calls f(name, tensor) for every tensor in canonical order.
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f("patch_w", self.patch_w);
    f("patch_b", self.patch_b);
    f("class_token", self.class_token);
    f("pos_embed", self.pos_embed);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      f(p + "ln1_gamma", L.ln1_gamma);
      f(p + "ln1_beta", L.ln1_beta);
      f(p + "w_q", L.w_q);
      f(p + "b_q", L.b_q);
      f(p + "w_k", L.w_k);
      f(p + "b_k", L.b_k);
      f(p + "w_v", L.w_v);
      f(p + "b_v", L.b_v);
      f(p + "w_o", L.w_o);
      f(p + "b_o", L.b_o);
      f(p + "ln2_gamma", L.ln2_gamma);
      f(p + "ln2_beta", L.ln2_beta);
      f(p + "w_in", L.w_in);
      f(p + "b_in", L.b_in);
      f(p + "w_out", L.w_out);
      f(p + "b_out", L.b_out);
    }
    f("lnf_gamma", self.lnf_gamma);
    f("lnf_beta", self.lnf_beta);
    f("proj", self.proj);
  }

  template <typename F>
  void for_each_tensor(F&& f) { visit(*this, std::forward<F>(f)); }
  template <typename F>
  void for_each_tensor(F&& f) const { visit(*this, std::forward<F>(f)); }

  // Expected shape of every named tensor under `cfg`.
  static std::map<std::string, Shape> expected_shapes(const ModelConfig& cfg) {
    const std::size_t d = cfg.d_model;
    std::map<std::string, Shape> s{
        {"patch_w", {cfg.patch_dim(), d}}, {"patch_b", {d}},
        {"class_token", {d}},               {"pos_embed", {cfg.n_tokens(), d}},
        {"lnf_gamma", {d}},                 {"lnf_beta", {d}},
        {"proj", {d, cfg.d_embed}},
    };
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      for (const char* n : {"ln1_gamma", "ln1_beta", "b_q", "b_k", "b_v", "b_o", "ln2_gamma",
                            "ln2_beta", "b_out"})
        s[p + n] = {d};
      for (const char* n : {"w_q", "w_k", "w_v", "w_o"}) s[p + n] = {d, d};
      s[p + "w_in"] = {d, cfg.d_mlp};
      s[p + "b_in"] = {cfg.d_mlp};
      s[p + "w_out"] = {cfg.d_mlp, d};
    }
    return s;
  }

  // Zero-filled weights with unit LN gains.
  static Weights zeros(const ModelConfig& cfg) {
    cfg.validate();
    Weights w;
    w.config = cfg;
    w.layers.resize(cfg.n_layers);
    const auto shapes = expected_shapes(cfg);
    w.for_each_tensor([&](const std::string& name, Tensor& t) {
      t = Tensor(shapes.at(name));
      if (name.ends_with("gamma")) std::fill(t.data().begin(), t.data().end(), 1.0f);
    });
    return w;
  }

  void validate() const {
    config.validate();
    if (layers.size() != config.n_layers)
      throw ValidationError("weights hold " + std::to_string(layers.size()) +
                            " layers but config says " + std::to_string(config.n_layers));
    const auto shapes = expected_shapes(config);
    for_each_tensor([&](const std::string& name, const Tensor& t) {
      if (t.shape() != shapes.at(name))
        throw ValidationError("tensor " + name + " has shape " + shape_str(t.shape()) +
                              ", config requires " + shape_str(shapes.at(name)));
      if (!all_finite(t)) throw ValidationError("tensor " + name + " has non-finite entries");
    });
  }
};

enum class SiteKind : std::uint8_t {
  kResidPre = 0,
  kHeadOut = 1,
  kResidMid = 2,
  kMlpOut = 3,
  kResidPost = 4,
  kFinalEmbedding = 5,
};

inline const char* site_kind_name(SiteKind k) {
  switch (k) {
    case SiteKind::kResidPre: return "resid_pre";
    case SiteKind::kHeadOut: return "head_out";
    case SiteKind::kResidMid: return "resid_mid";
    case SiteKind::kMlpOut: return "mlp_out";
    case SiteKind::kResidPost: return "resid_post";
    case SiteKind::kFinalEmbedding: return "final_embedding";
  }
  return "?";
}

inline SiteKind parse_site_kind(const std::string& s) {
  for (int k = 0; k <= 5; ++k)
    if (s == site_kind_name(static_cast<SiteKind>(k))) return static_cast<SiteKind>(k);
  throw SiteError("unknown site kind '" + s + "'");
}

// A hook location. `head` is meaningful only for kHeadOut and `layer` is
// ignored for kFinalEmbedding; the factories keep unused fields at 0.
struct Site {
  SiteKind kind = SiteKind::kResidPre;
  std::size_t layer = 0;
  std::size_t head = 0;

  static Site resid_pre(std::size_t l) { return {SiteKind::kResidPre, l, 0}; }
  static Site head_out(std::size_t l, std::size_t h) { return {SiteKind::kHeadOut, l, h}; }
  static Site resid_mid(std::size_t l) { return {SiteKind::kResidMid, l, 0}; }
  static Site mlp_out(std::size_t l) { return {SiteKind::kMlpOut, l, 0}; }
  static Site resid_post(std::size_t l) { return {SiteKind::kResidPost, l, 0}; }
  static Site final_embedding() { return {SiteKind::kFinalEmbedding, 0, 0}; }

  bool is_submodule() const { return kind == SiteKind::kHeadOut || kind == SiteKind::kMlpOut; }
  bool has_head() const { return kind == SiteKind::kHeadOut; }

  std::string str() const {
    switch (kind) {
      case SiteKind::kHeadOut: return "L" + std::to_string(layer) + "H" + std::to_string(head);
      case SiteKind::kFinalEmbedding: return "final_embedding";
      default: return "L" + std::to_string(layer) + "." + site_kind_name(kind);
    }
  }

  // Total order used as the cache key: computation order, heads by index.
  friend bool operator<(const Site& a, const Site& b) {
    auto key = [](const Site& s) {
      const bool fin = s.kind == SiteKind::kFinalEmbedding;
      return std::tuple(fin, fin ? 0 : s.layer, static_cast<int>(s.kind), s.has_head() ? s.head : 0);
    };
    return key(a) < key(b);
  }
  friend bool operator==(const Site& a, const Site& b) { return !(a < b) && !(b < a); }
};

// Causal (computation) order: a strict weak order in which the heads of one
// layer are mutually unordered.
inline bool precedes(const Site& a, const Site& b) {
  auto key = [](const Site& s) {
    const bool fin = s.kind == SiteKind::kFinalEmbedding;
    return std::tuple(fin, fin ? 0 : s.layer, static_cast<int>(s.kind));
  };
  return key(a) < key(b);
}

inline void validate_site(const Site& s, const ModelConfig& cfg) {
  if (s.kind == SiteKind::kFinalEmbedding) return;
  if (s.layer >= cfg.n_layers)
    throw SiteError("site " + s.str() + ": layer out of range [0, " +
                    std::to_string(cfg.n_layers) + ")");
  if (s.has_head() && s.head >= cfg.n_heads)
    throw SiteError("site " + s.str() + ": head out of range [0, " +
                    std::to_string(cfg.n_heads) + ")");
}

// Every site of the model, in cache order.
inline std::vector<Site> all_sites(const ModelConfig& cfg) {
  std::vector<Site> out;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    out.push_back(Site::resid_pre(l));
    for (std::size_t h = 0; h < cfg.n_heads; ++h) out.push_back(Site::head_out(l, h));
    out.push_back(Site::resid_mid(l));
    out.push_back(Site::mlp_out(l));
    out.push_back(Site::resid_post(l));
  }
  out.push_back(Site::final_embedding());
  return out;
}

inline std::vector<Site> head_sites(const ModelConfig& cfg) {
  std::vector<Site> out;
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (std::size_t h = 0; h < cfg.n_heads; ++h) out.push_back(Site::head_out(l, h));
  return out;
}

inline std::vector<Site> mlp_sites(const ModelConfig& cfg) {
  std::vector<Site> out;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) out.push_back(Site::mlp_out(l));
  return out;
}

class ActivationCache {
 public:
  using Map = std::map<Site, Tensor>;

  void put(const Site& s, Tensor t) { map_.insert_or_assign(s, std::move(t)); }
  bool contains(const Site& s) const { return map_.count(s) != 0; }
  const Tensor& at(const Site& s) const {
    auto it = map_.find(s);
    if (it == map_.end()) throw CacheError("activation cache has no entry for site " + s.str());
    return it->second;
  }
  std::size_t size() const { return map_.size(); }
  Map::const_iterator begin() const { return map_.begin(); }
  Map::const_iterator end() const { return map_.end(); }

  friend bool bitwise_equal(const ActivationCache& a, const ActivationCache& b) {
    if (a.size() != b.size()) return false;
    for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib)
      if (!(ia->first == ib->first) || !bitwise_equal(ia->second, ib->second)) return false;
    return true;
  }

 private:
  Map map_;
};

// Edits activations during a forward pass.
class SiteHook {
 public:
  virtual ~SiteHook() = default;
  virtual bool edits(const Site& s) const = 0;
  // True when apply() overwrites every element, so computing the site first
  // would be wasted work.
  virtual bool overwrites(const Site& s) const = 0;
  virtual void apply(const Site& s, Tensor& activation) const = 0;
};

struct ForwardResult {
  Tensor embedding;  // [d_embed]
  ActivationCache cache;
};

// image: [3, image_size, image_size], already standardized.
// Patch p (row-major over the grid) becomes token p + 1; its input vector is
// the patch pixels flattened in (channel, row, col) order.
inline Tensor patch_embed(const Tensor& image, const Weights& w) {
  const auto& cfg = w.config;
  const Shape expected{kImageChannels, cfg.image_size, cfg.image_size};
  if (image.shape() != expected)
    throw DimensionError("patch_embed: image shape " + shape_str(image.shape()) +
                         " does not match expected " + shape_str(expected));
  const std::size_t ps = cfg.patch_size, g = cfg.grid();
  Tensor patches({cfg.n_patches(), cfg.patch_dim()});
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx) {
      auto row = patches.row(gy * g + gx);
      std::size_t k = 0;
      for (std::size_t c = 0; c < kImageChannels; ++c)
        for (std::size_t y = 0; y < ps; ++y)
          for (std::size_t x = 0; x < ps; ++x) row[k++] = image.at(c, gy * ps + y, gx * ps + x);
    }
  Tensor proj = matmul(patches, w.patch_w);
  add_row_bias(proj, w.patch_b);

  Tensor tokens({cfg.n_tokens(), cfg.d_model});
  std::copy(w.class_token.data().begin(), w.class_token.data().end(), tokens.row(0).begin());
  for (std::size_t p = 0; p < cfg.n_patches(); ++p)
    std::copy(proj.row(p).begin(), proj.row(p).end(), tokens.row(p + 1).begin());
  add_inplace(tokens, w.pos_embed);
  return tokens;
}

namespace detail {

inline void require_resid_shape(const Tensor& x, const ModelConfig& cfg, const char* op) {
  if (x.rank() != 2 || x.dim(1) != cfg.d_model)
    throw DimensionError(std::string(op) + ": residual shape " + shape_str(x.shape()) +
                         " is not [n_tokens, " + std::to_string(cfg.d_model) + "]");
}

// Head h's contribution given the already-normalized residual.
inline Tensor head_output_from_normed(std::size_t l, std::size_t h, const Tensor& normed,
                                      const Weights& w) {
  const auto& cfg = w.config;
  const auto& L = w.layers[l];
  const std::size_t c0 = h * cfg.d_head, c1 = c0 + cfg.d_head;

  Tensor q = matmul(normed, slice_cols(L.w_q, c0, c1));
  add_row_bias(q, slice_vector(L.b_q, c0, c1));
  Tensor k = matmul(normed, slice_cols(L.w_k, c0, c1));
  add_row_bias(k, slice_vector(L.b_k, c0, c1));
  Tensor v = matmul(normed, slice_cols(L.w_v, c0, c1));
  add_row_bias(v, slice_vector(L.b_v, c0, c1));

  Tensor scores = matmul(q, transpose(k));
  const float inv_sqrt = static_cast<float>(1.0 / std::sqrt(double(cfg.d_head)));
  for (float& s : scores.data()) s *= inv_sqrt;
  Tensor mixed = matmul(softmax(scores), v);
  Tensor out = matmul(mixed, slice_rows(L.w_o, c0, c1));
  if (h == 0) add_row_bias(out, L.b_o);
  return out;
}

inline Tensor mlp_output_from_normed(std::size_t l, const Tensor& normed, const Weights& w) {
  const auto& L = w.layers[l];
  Tensor hidden = matmul(normed, L.w_in);
  add_row_bias(hidden, L.b_in);
  Tensor out = matmul(gelu(hidden), L.w_out);
  add_row_bias(out, L.b_out);
  return out;
}

}  // namespace detail

// Head h's additive contribution to the residual stream at layer l:
// pre-LN, single-head attention over all tokens, then the head's rows of the
// output projection. The output-projection bias is attributed to head 0 so
// that the heads sum exactly to the full attention output.
inline Tensor head_output(std::size_t l, std::size_t h, const Tensor& x_pre, const Weights& w) {
  validate_site(Site::head_out(l, h), w.config);
  detail::require_resid_shape(x_pre, w.config, "head_output");
  const auto& L = w.layers[l];
  return detail::head_output_from_normed(l, h, layer_norm(x_pre, L.ln1_gamma, L.ln1_beta, w.config.ln_eps), w);
}

inline Tensor mlp_output(std::size_t l, const Tensor& x_mid, const Weights& w) {
  validate_site(Site::mlp_out(l), w.config);
  detail::require_resid_shape(x_mid, w.config, "mlp_output");
  const auto& L = w.layers[l];
  return detail::mlp_output_from_normed(l, layer_norm(x_mid, L.ln2_gamma, L.ln2_beta, w.config.ln_eps), w);
}

// Final LN on the class-token row, then the output projection. The lenses
// reuse this on intermediate residual states.
inline Tensor final_readout(const Tensor& resid, const Weights& w) {
  detail::require_resid_shape(resid, w.config, "final_readout");
  Tensor cls({1, w.config.d_model}, std::vector<float>(resid.row(0).begin(), resid.row(0).end()));
  Tensor normed = layer_norm(cls, w.lnf_gamma, w.lnf_beta, w.config.ln_eps);
  return matmul(normed, w.proj).reshaped({w.config.d_embed});
}

namespace detail {

class ForwardRunner {
 public:
  ForwardRunner(const Weights& w, const SiteHook* hook) : w_(w), hook_(hook) {}

  template <typename Compute>
  Tensor visit(const Site& site, Compute&& compute, const Shape& shape) {
    Tensor t;
    if (hook_ && hook_->edits(site)) {
      t = hook_->overwrites(site) ? Tensor(shape) : compute();
      hook_->apply(site, t);
      if (t.shape() != shape)
        throw InterventionError("edit at site " + site.str() + " produced shape " +
                                shape_str(t.shape()) + ", expected " + shape_str(shape));
    } else {
      t = compute();
    }
    if (!all_finite(t)) throw NumericError("non-finite activation at site " + site.str());
    result_.cache.put(site, t);
    return t;
  }

  ForwardResult run(Tensor resid, std::size_t start_layer) {
    const auto& cfg = w_.config;
    const Shape resid_shape{cfg.n_tokens(), cfg.d_model};
    require_resid_shape(resid, cfg, "forward");
    for (std::size_t l = start_layer; l < cfg.n_layers; ++l) {
      const auto& L = w_.layers[l];
      Tensor x_pre = visit(Site::resid_pre(l), [&] { return resid; }, resid_shape);

      std::optional<Tensor> normed;
      Tensor x_mid = x_pre;
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        Tensor o = visit(
            Site::head_out(l, h),
            [&] {
              if (!normed) normed = layer_norm(x_pre, L.ln1_gamma, L.ln1_beta, cfg.ln_eps);
              return head_output_from_normed(l, h, *normed, w_);
            },
            resid_shape);
        add_inplace(x_mid, o);
      }
      x_mid = visit(Site::resid_mid(l), [&] { return x_mid; }, resid_shape);

      Tensor m = visit(
          Site::mlp_out(l),
          [&] {
            return mlp_output_from_normed(l, layer_norm(x_mid, L.ln2_gamma, L.ln2_beta, cfg.ln_eps), w_);
          },
          resid_shape);
      Tensor x_post = add(x_mid, m);
      resid = visit(Site::resid_post(l), [&] { return x_post; }, resid_shape);
    }
    result_.embedding = visit(Site::final_embedding(), [&] { return final_readout(resid, w_); },
                              Shape{cfg.d_embed});
    return std::move(result_);
  }

 private:
  const Weights& w_;
  const SiteHook* hook_;
  ForwardResult result_;
};

}  // namespace detail

// Runs layers [start_layer, n_layers) on a residual state, recording every
// visited site. Used to resume a pass from a cached ResidPre.
inline ForwardResult run_from_layer(const Tensor& resid_pre, std::size_t start_layer,
                                    const Weights& w, const SiteHook* hook = nullptr) {
  if (start_layer >= w.config.n_layers)
    throw SiteError("run_from_layer: start layer " + std::to_string(start_layer) + " out of range");
  return detail::ForwardRunner(w, hook).run(resid_pre, start_layer);
}

inline ForwardResult run_with_hook(const Tensor& image, const Weights& w, const SiteHook* hook) {
  return detail::ForwardRunner(w, hook).run(patch_embed(image, w), 0);
}

inline ForwardResult run_with_cache(const Tensor& image, const Weights& w) {
  return run_with_hook(image, w, nullptr);
}

}  // namespace dslens
