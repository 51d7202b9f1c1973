#pragma once

// Experiment configuration: a key = value file with command-line overrides.
// Every run writes the resolved config next to its outputs so it can be
// replayed with `--config <out>/config.txt`.
//
// Keys (defaults in brackets):
//   model                    DSLW file
//   images                   comma-separated PNG/PPM paths
//   corruption_seed [0]  corruption_mean [0]  corruption_std [1]
//   alpha [100]  lens [dsl]  scope [all|cls]
//   sites [heads]            heads | mlps | submodules | resid | list of l:h and l:mlp
//   overlay [flower]         "flower" or an RGBA PNG path
//   overlay_row/overlay_col  [image_size / 4]   overlay_scale [1]  overlay_opacity [1]
//   threshold [0.5]  tau [1]  repeats [50]  seed [0]  mode [zero]  global_matching [false]
//   selection                head-selection file; replaces threshold selection
//   out [out]  top_k [6]
//   norm_mean [0.5,0.5,0.5]  norm_std [0.5,0.5,0.5]
//   decoder_synthetic [64]   synthetic images added to the decoder training set
//   decoder_images           extra decoder training images
//   ridge [0.001]
//   embeddings               DSLE files for `decode`

#include <array>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dslens/error.hpp"
#include "dslens/evaluation.hpp"
#include "dslens/image.hpp"
#include "dslens/intervention.hpp"
#include "dslens/kv_text.hpp"
#include "dslens/lenses.hpp"
#include "dslens/model.hpp"

namespace dslens {

struct ExperimentConfig {
  std::string model;
  std::vector<std::string> images;
  CorruptionConfig corruption;
  float alpha = kDefaultAlpha;
  LensKind lens = LensKind::kDsl;
  TokenScope scope = TokenScope::kAll;
  std::string sites = "heads";
  std::string overlay = "flower";
  std::optional<std::size_t> overlay_row, overlay_col;
  float overlay_scale = 1.0f;
  float overlay_opacity = 1.0f;
  double threshold = kDefaultSelectionThreshold;
  double tau = kDefaultAcdcTau;
  std::size_t repeats = kDefaultRandomRepeats;
  std::uint64_t seed = 0;
  AblationMode mode = AblationMode::kZero;
  bool global_matching = false;
  std::string selection;
  std::string out = "out";
  std::size_t top_k = kDefaultTopK;
  Normalization norm;
  std::size_t decoder_synthetic = 64;
  std::vector<std::string> decoder_images;
  double ridge = 1e-3;
  std::vector<std::string> embeddings;
};

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string join(const std::vector<std::string>& items, const std::string& sep = ",") {
  std::string s;
  for (std::size_t i = 0; i < items.size(); ++i) s += (i ? sep : "") + items[i];
  return s;
}

namespace detail {

inline std::vector<std::string> list_value(const std::string& v) {
  std::vector<std::string> out;
  for (auto& item : split(v, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

inline std::array<float, 3> triple_value(const std::string& v, const std::string& key) {
  const auto items = list_value(v);
  if (items.size() == 1) {
    const float x = float(parse_real(items[0], key));
    return {x, x, x};
  }
  if (items.size() != 3) throw ConfigError("'" + key + "': expected one or three numbers");
  return {float(parse_real(items[0], key)), float(parse_real(items[1], key)),
          float(parse_real(items[2], key))};
}

inline std::string triple_text(const std::array<float, 3>& t) {
  return format_real(t[0]) + "," + format_real(t[1]) + "," + format_real(t[2]);
}

}  // namespace detail

// Applies one key. Unknown keys and malformed values are ConfigErrors.
inline void set_config_key(ExperimentConfig& c, const std::string& key, const std::string& value) {
  using detail::list_value;
  const std::string& v = value;
  if (key == "model") c.model = v;
  else if (key == "images") c.images = list_value(v);
  else if (key == "corruption_seed") c.corruption.seed = parse_u64(v, key);
  else if (key == "corruption_mean") c.corruption.mean = float(parse_real(v, key));
  else if (key == "corruption_std") c.corruption.std = float(parse_real(v, key));
  else if (key == "alpha") c.alpha = float(parse_real(v, key));
  else if (key == "lens") c.lens = parse_lens_kind(v);
  else if (key == "scope") {
    if (v == "all") c.scope = TokenScope::kAll;
    else if (v == "cls") c.scope = TokenScope::kClassToken;
    else throw ConfigError("'scope': expected all or cls, got '" + v + "'");
  } else if (key == "sites") c.sites = v;
  else if (key == "overlay") c.overlay = v;
  else if (key == "overlay_row") c.overlay_row = parse_u64(v, key);
  else if (key == "overlay_col") c.overlay_col = parse_u64(v, key);
  else if (key == "overlay_scale") c.overlay_scale = float(parse_real(v, key));
  else if (key == "overlay_opacity") c.overlay_opacity = float(parse_real(v, key));
  else if (key == "threshold") c.threshold = parse_real(v, key);
  else if (key == "tau") c.tau = parse_real(v, key);
  else if (key == "repeats") c.repeats = parse_u64(v, key);
  else if (key == "seed") c.seed = parse_u64(v, key);
  else if (key == "mode") {
    try {
      c.mode = parse_ablation_mode(v);
    } catch (const ValidationError& e) {
      throw ConfigError(std::string("'mode': ") + e.what());
    }
  } else if (key == "global_matching") c.global_matching = parse_bool(v, key);
  else if (key == "selection") c.selection = v;
  else if (key == "out") c.out = v;
  else if (key == "top_k") c.top_k = parse_u64(v, key);
  else if (key == "norm_mean") c.norm.mean = detail::triple_value(v, key);
  else if (key == "norm_std") c.norm.std = detail::triple_value(v, key);
  else if (key == "decoder_synthetic") c.decoder_synthetic = parse_u64(v, key);
  else if (key == "decoder_images") c.decoder_images = list_value(v);
  else if (key == "ridge") c.ridge = parse_real(v, key);
  else if (key == "embeddings") c.embeddings = list_value(v);
  else throw ConfigError("unknown config key '" + key + "'");
}

inline ExperimentConfig parse_experiment_config(const std::string& text, ExperimentConfig base = {}) {
  for (const auto& [k, v] : parse_kv_text(text, "config")) set_config_key(base, k, v);
  return base;
}

// Resolved form; parse_experiment_config(to_text(c)) == c.
inline std::string to_text(const ExperimentConfig& c) {
  std::ostringstream os;
  auto kv = [&](const char* k, const std::string& v) { os << k << " = " << v << "\n"; };
  os << "# dslens experiment config\n";
  kv("model", c.model);
  kv("images", join(c.images));
  kv("corruption_seed", std::to_string(c.corruption.seed));
  kv("corruption_mean", format_real(c.corruption.mean));
  kv("corruption_std", format_real(c.corruption.std));
  kv("alpha", format_real(c.alpha));
  kv("lens", lens_kind_name(c.lens));
  kv("scope", c.scope == TokenScope::kAll ? "all" : "cls");
  kv("sites", c.sites);
  kv("overlay", c.overlay);
  if (c.overlay_row) kv("overlay_row", std::to_string(*c.overlay_row));
  if (c.overlay_col) kv("overlay_col", std::to_string(*c.overlay_col));
  kv("overlay_scale", format_real(c.overlay_scale));
  kv("overlay_opacity", format_real(c.overlay_opacity));
  kv("threshold", format_real(c.threshold));
  kv("tau", format_real(c.tau));
  kv("repeats", std::to_string(c.repeats));
  kv("seed", std::to_string(c.seed));
  kv("mode", ablation_mode_name(c.mode));
  kv("global_matching", c.global_matching ? "true" : "false");
  kv("selection", c.selection);
  kv("out", c.out);
  kv("top_k", std::to_string(c.top_k));
  kv("norm_mean", detail::triple_text(c.norm.mean));
  kv("norm_std", detail::triple_text(c.norm.std));
  kv("decoder_synthetic", std::to_string(c.decoder_synthetic));
  kv("decoder_images", join(c.decoder_images));
  kv("ridge", format_real(c.ridge));
  kv("embeddings", join(c.embeddings));
  return os.str();
}

// Checks that need no files or model.
inline void validate_experiment_config(const ExperimentConfig& c) {
  if (!std::isfinite(c.alpha)) throw ConfigError("alpha must be finite");
  if (!(c.corruption.std >= 0.0f)) throw ConfigError("corruption_std must be >= 0");
  if (!(c.overlay_scale > 0.0f)) throw ConfigError("overlay_scale must be > 0");
  if (!(c.overlay_opacity > 0.0f && c.overlay_opacity <= 1.0f))
    throw ConfigError("overlay_opacity must be in (0, 1]");
  if (c.threshold < -1.0 || c.threshold > 1.0) throw ConfigError("threshold must be in [-1, 1]");
  if (!(c.tau >= 0.0)) throw ConfigError("tau must be >= 0");
  if (!(c.ridge >= 0.0)) throw ConfigError("ridge must be >= 0");
  for (int i = 0; i < 3; ++i)
    if (!(c.norm.std[i] > 0.0f)) throw ConfigError("norm_std entries must be > 0");
  if (c.top_k == 0) throw ConfigError("top_k must be >= 1");
}

// Site filter: heads | mlps | submodules | resid | comma list of "l:h" / "l:mlp".
// `resid` means the residual stream after each layer.
inline std::vector<Site> resolve_sites(const std::string& filter, const ModelConfig& cfg) {
  if (filter == "heads") return head_sites(cfg);
  if (filter == "mlps") return mlp_sites(cfg);
  if (filter == "resid") {
    std::vector<Site> out;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) out.push_back(Site::resid_post(l));
    return out;
  }
  if (filter == "submodules") {
    std::vector<Site> out = head_sites(cfg);
    for (const auto& s : mlp_sites(cfg)) out.push_back(s);
    std::sort(out.begin(), out.end());
    return out;
  }
  std::vector<Site> out;
  std::set<Site> seen;
  for (const auto& item : detail::list_value(filter)) {
    const auto colon = item.find(':');
    if (colon == std::string::npos)
      throw ConfigError("site '" + item + "': expected layer:head or layer:mlp");
    const std::size_t layer = parse_u64(trim(item.substr(0, colon)), "sites");
    const std::string rest = trim(item.substr(colon + 1));
    const Site s = rest == "mlp" ? Site::mlp_out(layer) : Site::head_out(layer, parse_u64(rest, "sites"));
    validate_site(s, cfg);
    if (!seen.insert(s).second) throw ConfigError("site " + s.str() + " listed twice");
    out.push_back(s);
  }
  if (out.empty()) throw ConfigError("site filter '" + filter + "' selects nothing");
  return out;
}

}  // namespace dslens
