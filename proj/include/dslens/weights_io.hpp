#pragma once

// DSLW weight files, seeded random models, and the planted-circuit fixture.
//
// DSLW layout (all little-endian):
//   "DSLW"  u16 version
//   u32 n_layers n_heads d_model d_head d_mlp image_size patch_size d_embed
//   u32 ln_placement  f32 ln_eps
//   u32 tensor_count
//   per tensor: u32 name_len, name, u32 rank, u32 dims[rank],
//               f32 data[prod(dims)], u32 fnv1a(name, rank, dims, data)

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dslens/binary_io.hpp"
#include "dslens/error.hpp"
#include "dslens/kv_text.hpp"
#include "dslens/model.hpp"
#include "dslens/tensor.hpp"

namespace dslens {

inline constexpr char kWeightsMagic[4] = {'D', 'S', 'L', 'W'};
inline constexpr std::uint16_t kWeightsVersion = 1;
inline constexpr float kDefaultInitScale = 0.02f;

inline std::vector<std::uint8_t> encode_weights(const Weights& w) {
  w.validate();
  const auto& c = w.config;
  ByteWriter out;
  out.bytes(kWeightsMagic, 4);
  out.u16(kWeightsVersion);
  for (std::size_t v : {c.n_layers, c.n_heads, c.d_model, c.d_head, c.d_mlp, c.image_size,
                        c.patch_size, c.d_embed})
    out.u32(static_cast<std::uint32_t>(v));
  out.u32(static_cast<std::uint32_t>(c.ln_placement));
  out.f32(c.ln_eps);
  std::uint32_t count = 0;
  w.for_each_tensor([&](const std::string&, const Tensor&) { ++count; });
  out.u32(count);
  w.for_each_tensor([&](const std::string& name, const Tensor& t) {
    out.u32(static_cast<std::uint32_t>(name.size()));
    const std::size_t name_at = out.size();
    out.str(name);
    out.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) out.u32(static_cast<std::uint32_t>(d));
    for (float v : t.data()) out.f32(v);
    out.u32(fnv1a(out.buffer().data() + name_at, out.size() - name_at));
  });
  return out.buffer();
}

inline Weights decode_weights(const std::vector<std::uint8_t>& bytes) {
  ByteReader in(bytes, "DSLW");
  if (in.str(4, "magic") != std::string(kWeightsMagic, 4)) in.fail_at("bad magic", 0);
  const std::size_t version_at = in.offset();
  if (in.u16("version") != kWeightsVersion) in.fail_at("unsupported version", version_at);

  ModelConfig c;
  for (std::size_t* f : {&c.n_layers, &c.n_heads, &c.d_model, &c.d_head, &c.d_mlp, &c.image_size,
                         &c.patch_size, &c.d_embed})
    *f = in.u32("config");
  const std::size_t placement_at = in.offset();
  if (in.u32("ln_placement") != 0) in.fail_at("unknown layer-norm placement", placement_at);
  c.ln_eps = in.f32("ln_eps");
  c.validate();

  Weights w;
  w.config = c;
  w.layers.resize(c.n_layers);
  std::map<std::string, Tensor> tensors;
  const std::uint32_t count = in.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t name_len = in.u32("tensor name length");
    const std::size_t name_at = in.offset();
    const std::string name = in.str(name_len, "tensor name");
    const std::size_t rank = in.u32("rank of " + name);
    if (rank == 0 || rank > 4) in.fail("tensor " + name + ": bad rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = in.u32("dims of " + name);
      if (d == 0) in.fail("tensor " + name + ": zero dimension");
      numel *= d;
      if (numel > in.remaining()) in.fail("tensor " + name + ": dimensions exceed file size");
    }
    in.need(numel * 4 + 4, "data of " + name);
    std::vector<float> data(numel);
    for (auto& v : data) v = in.f32("data of " + name);
    const std::size_t sum_at = in.offset();
    const std::uint32_t expected = fnv1a(bytes.data() + name_at, sum_at - name_at);
    if (in.u32("checksum of " + name) != expected)
      in.fail_at("checksum mismatch in tensor " + name, sum_at);
    if (!tensors.emplace(name, Tensor(shape, std::move(data))).second)
      in.fail("duplicate tensor " + name);
  }
  if (!in.at_end()) in.fail("trailing bytes after last tensor");

  const auto shapes = Weights::expected_shapes(c);
  w.for_each_tensor([&](const std::string& name, Tensor& t) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ValidationError("weight file lacks tensor " + name);
    if (it->second.shape() != shapes.at(name))
      throw ValidationError("tensor " + name + " has shape " + shape_str(it->second.shape()) +
                            " but the file's config requires " + shape_str(shapes.at(name)));
    t = std::move(it->second);
    tensors.erase(it);
  });
  if (!tensors.empty()) throw ValidationError("weight file has unknown tensor " + tensors.begin()->first);
  w.validate();
  return w;
}

inline void save_weights(const Weights& w, const std::string& path) {
  write_file_bytes(path, encode_weights(w));
}

inline Weights load_weights(const std::string& path) { return decode_weights(read_file_bytes(path)); }

inline bool bitwise_equal(const Weights& a, const Weights& b) {
  if (!(a.config == b.config) || a.layers.size() != b.layers.size()) return false;
  std::vector<const Tensor*> ta, tb;
  a.for_each_tensor([&](const std::string&, const Tensor& t) { ta.push_back(&t); });
  b.for_each_tensor([&](const std::string&, const Tensor& t) { tb.push_back(&t); });
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (!bitwise_equal(*ta[i], *tb[i])) return false;
  return true;
}

// Matrices ~ N(0, 1) * init_scale / sqrt(fan_in) (fan_in = rows); vectors
// (biases, class token, positional embeddings) ~ N(0, 1) * init_scale; layer
// norms start at gamma = 1, beta = 0. Tensors are drawn in canonical order
// from one stream seeded with `seed`.
inline Weights generate_random_model(const ModelConfig& cfg, std::uint64_t seed,
                                     float init_scale = kDefaultInitScale) {
  Weights w = Weights::zeros(cfg);
  Rng rng(seed);
  w.for_each_tensor([&](const std::string& name, Tensor& t) {
    if (name.ends_with("gamma") || name.ends_with("beta")) return;
    const double fan_in = t.rank() == 2 && name != "pos_embed" ? double(t.dim(0)) : 1.0;
    const double s = double(init_scale) / std::sqrt(fan_in);
    for (float& v : t.data()) v = static_cast<float>(s * rng.normal());
  });
  return w;
}

// ---------------------------------------------------------------------------
// Planted-circuit fixture.
//
// Residual dimensions 0..7 are reserved:
//   0, 1  region flag (+f, -f) set by the positional embedding of overlay-region tokens
//   2, 3  chroma feature (+c, -c) written by the patch projection, where
//         c = mean(R) - 2 mean(G) + mean(B) over the patch (standardized pixels)
//   4, 5  overlay channel (+o, -o), written only by planted heads
// Each planted head attends from every token to the region-flagged tokens,
// reads the chroma feature and writes it into the overlay channel. All other
// heads and MLPs are damped and never write the reserved dimensions. The
// output projection maps the overlay channel onto embedding axis 0 and the
// free dimensions onto axes 1.. only.

struct PlantedSpec {
  ModelConfig base = reference_config();
  std::vector<Site> planted_sites{Site::head_out(2, 1), Site::head_out(3, 2)};
  std::vector<std::size_t> overlay_region{5, 6, 9, 10};
  float strength = 2.0f;
  float damping = 0.4f;
  float class_scale = 0.3f;  // class token and its position row, free dims

  void validate() const {
    base.validate();
    if (base.d_model < 16) throw ConfigError("planted model needs d_model >= 16");
    if (base.d_embed < 2) throw ConfigError("planted model needs d_embed >= 2");
    if (overlay_region.empty()) throw ConfigError("planted spec: overlay region is empty");
    if (planted_sites.empty()) throw ConfigError("planted spec: no planted sites");
    std::set<std::size_t> region;
    for (auto p : overlay_region) {
      if (p >= base.n_patches())
        throw ConfigError("planted spec: overlay patch " + std::to_string(p) +
                          " outside the patch grid of " + std::to_string(base.n_patches()));
      if (!region.insert(p).second)
        throw ConfigError("planted spec: duplicate overlay patch " + std::to_string(p));
    }
    std::set<Site> seen;
    for (const auto& s : planted_sites) {
      if (s.kind != SiteKind::kHeadOut) throw ConfigError("planted site " + s.str() + " is not a head");
      validate_site(s, base);
      if (!seen.insert(s).second) throw ConfigError("duplicate planted site " + s.str());
    }
    if (!(strength > 0.0f) || !std::isfinite(strength))
      throw ConfigError("planted spec: strength must be > 0");
    if (!(damping >= 0.0f) || !std::isfinite(damping))
      throw ConfigError("planted spec: damping must be >= 0");
    if (!(class_scale >= 0.0f) || !std::isfinite(class_scale))
      throw ConfigError("planted spec: class_scale must be >= 0");
  }
};

namespace planted {
inline constexpr std::size_t kFlagPos = 0, kFlagNeg = 1, kFeatPos = 2, kFeatNeg = 3;
inline constexpr std::size_t kOverlayPos = 4, kOverlayNeg = 5, kReserved = 8;
inline constexpr float kFlag = 3.0f;
inline constexpr float kQueryGain = 8.0f;
}  // namespace planted

// Embedding direction the overlay channel is projected onto.
inline Tensor planted_overlay_direction(const ModelConfig& cfg) {
  Tensor d({cfg.d_embed});
  d[0] = 1.0f;
  return d;
}

inline Weights generate_planted_model(const PlantedSpec& spec, std::uint64_t seed) {
  using namespace planted;
  spec.validate();
  const ModelConfig& cfg = spec.base;
  Weights w = generate_random_model(cfg, seed, 1.0f);
  const std::size_t d = cfg.d_model;

  auto zero_cols = [&](Tensor& m, std::size_t end) {
    for (std::size_t r = 0; r < m.dim(0); ++r)
      for (std::size_t c = 0; c < end; ++c) m.at(r, c) = 0.0f;
  };
  auto zero_head = [&](Tensor& v, std::size_t end) {
    for (std::size_t c = 0; c < end; ++c) v[c] = 0.0f;
  };

  // Patch projection: chroma feature into dims 2/3, nothing else reserved.
  zero_cols(w.patch_w, kReserved);
  zero_head(w.patch_b, kReserved);
  const std::size_t area = cfg.patch_size * cfg.patch_size;
  const float chroma[kImageChannels] = {1.0f, -2.0f, 1.0f};
  for (std::size_t c = 0; c < kImageChannels; ++c)
    for (std::size_t k = 0; k < area; ++k) {
      w.patch_w.at(c * area + k, kFeatPos) = chroma[c] / float(area);
      w.patch_w.at(c * area + k, kFeatNeg) = -chroma[c] / float(area);
    }

  zero_head(w.class_token, kReserved);
  zero_cols(w.pos_embed, kReserved);
  // The class token's own state is shared by every readout.
  for (auto& v : w.class_token.data()) v *= spec.class_scale;
  for (auto& v : w.pos_embed.row(0)) v *= spec.class_scale;
  for (auto p : spec.overlay_region) {
    w.pos_embed.at(p + 1, kFlagPos) = kFlag;
    w.pos_embed.at(p + 1, kFlagNeg) = -kFlag;
  }

  const std::set<Site> planted(spec.planted_sites.begin(), spec.planted_sites.end());
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    auto& L = w.layers[l];
    std::fill(L.ln1_gamma.data().begin(), L.ln1_gamma.data().end(), 1.0f);
    std::fill(L.ln2_gamma.data().begin(), L.ln2_gamma.data().end(), 1.0f);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const std::size_t c0 = h * cfg.d_head, c1 = c0 + cfg.d_head;
      if (planted.count(Site::head_out(l, h))) {
        for (std::size_t r = 0; r < d; ++r)
          for (std::size_t c = c0; c < c1; ++c) L.w_q.at(r, c) = L.w_k.at(r, c) = L.w_v.at(r, c) = 0.0f;
        for (std::size_t c = c0; c < c1; ++c) L.b_q[c] = L.b_k[c] = L.b_v[c] = 0.0f;
        L.b_q[c0] = kQueryGain;
        L.w_k.at(kFlagPos, c0) = 1.0f;
        L.w_k.at(kFlagNeg, c0) = -1.0f;
        L.w_v.at(kFeatPos, c0) = 1.0f;
        L.w_v.at(kFeatNeg, c0) = -1.0f;
        for (std::size_t r = c0; r < c1; ++r)
          for (std::size_t c = 0; c < d; ++c) L.w_o.at(r, c) = 0.0f;
        L.w_o.at(c0, kOverlayPos) = spec.strength;
        L.w_o.at(c0, kOverlayNeg) = -spec.strength;
      } else {
        for (std::size_t r = c0; r < c1; ++r)
          for (std::size_t c = 0; c < d; ++c)
            L.w_o.at(r, c) = c < kReserved ? 0.0f : L.w_o.at(r, c) * spec.damping;
      }
    }
    for (std::size_t c = 0; c < d; ++c) L.b_o[c] = c < kReserved ? 0.0f : L.b_o[c] * spec.damping;
    for (std::size_t r = 0; r < cfg.d_mlp; ++r)
      for (std::size_t c = 0; c < d; ++c)
        L.w_out.at(r, c) = c < kReserved ? 0.0f : L.w_out.at(r, c) * spec.damping;
    for (std::size_t c = 0; c < d; ++c) L.b_out[c] = c < kReserved ? 0.0f : L.b_out[c] * spec.damping;
  }

  // Readout: overlay channel -> axis 0, free dims -> axes 1.., reserved others -> nothing.
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < cfg.d_embed; ++c) {
      if (r < kReserved || c == 0) w.proj.at(r, c) = 0.0f;
    }
  w.proj.at(kOverlayPos, 0) = 1.0f;
  w.proj.at(kOverlayNeg, 0) = -1.0f;
  w.validate();
  return w;
}

inline std::string format_site_list(const std::vector<Site>& sites) {
  std::string s;
  for (std::size_t i = 0; i < sites.size(); ++i)
    s += (i ? "," : "") + std::to_string(sites[i].layer) + ":" + std::to_string(sites[i].head);
  return s;
}

inline std::vector<Site> parse_head_list(const std::string& v, const std::string& key) {
  std::vector<Site> out;
  for (const auto& item : split(v, ',')) {
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("'" + key + "': expected layer:head, got '" + item + "'");
    out.push_back(Site::head_out(parse_u64(trim(item.substr(0, colon)), key),
                                 parse_u64(trim(item.substr(colon + 1)), key)));
  }
  return out;
}

// Planted spec text form (key = value):
//   layers heads d_model d_mlp image_size patch_size d_embed  (model shape; d_head derived)
//   planted = 2:1, 3:2       overlay_region = 5, 6, 9, 10
//   strength = 2             damping = 0.4             class_scale = 0.3
inline std::string to_text(const PlantedSpec& s) {
  std::ostringstream os;
  os << "# dslens planted-circuit spec\n"
     << "layers = " << s.base.n_layers << "\nheads = " << s.base.n_heads
     << "\nd_model = " << s.base.d_model << "\nd_mlp = " << s.base.d_mlp
     << "\nimage_size = " << s.base.image_size << "\npatch_size = " << s.base.patch_size
     << "\nd_embed = " << s.base.d_embed << "\nplanted = " << format_site_list(s.planted_sites)
     << "\noverlay_region = ";
  for (std::size_t i = 0; i < s.overlay_region.size(); ++i) os << (i ? "," : "") << s.overlay_region[i];
  os << "\nstrength = " << s.strength << "\ndamping = " << s.damping
     << "\nclass_scale = " << s.class_scale << "\n";
  return os.str();
}

inline PlantedSpec parse_planted_spec(const std::string& text) {
  const auto kv = parse_kv_text(text, "planted spec");
  PlantedSpec s;
  auto num = [&](const char* k, std::size_t& field) {
    if (auto it = kv.find(k); it != kv.end()) field = parse_u64(it->second, k);
  };
  num("layers", s.base.n_layers);
  num("heads", s.base.n_heads);
  num("d_model", s.base.d_model);
  num("d_mlp", s.base.d_mlp);
  num("image_size", s.base.image_size);
  num("patch_size", s.base.patch_size);
  num("d_embed", s.base.d_embed);
  if (s.base.n_heads == 0) throw ConfigError("heads must be >= 1");
  s.base.d_head = s.base.d_model / s.base.n_heads;
  if (s.base.d_head * s.base.n_heads != s.base.d_model)
    throw ConfigError("heads (" + std::to_string(s.base.n_heads) + ") must divide d_model (" +
                      std::to_string(s.base.d_model) + ")");
  if (auto it = kv.find("planted"); it != kv.end()) s.planted_sites = parse_head_list(it->second, "planted");
  if (auto it = kv.find("overlay_region"); it != kv.end()) {
    s.overlay_region.clear();
    for (const auto& p : split(it->second, ','))
      if (!p.empty()) s.overlay_region.push_back(parse_u64(p, "overlay_region"));
  }
  if (auto it = kv.find("strength"); it != kv.end()) s.strength = float(parse_real(it->second, "strength"));
  if (auto it = kv.find("damping"); it != kv.end()) s.damping = float(parse_real(it->second, "damping"));
  if (auto it = kv.find("class_scale"); it != kv.end())
    s.class_scale = float(parse_real(it->second, "class_scale"));
  for (const auto& [k, v] : kv) {
    static const std::set<std::string> known{"layers", "heads", "d_model", "d_mlp", "image_size",
                                             "patch_size", "d_embed", "planted", "overlay_region",
                                             "strength", "damping", "class_scale"};
    if (!known.count(k)) throw ConfigError("planted spec: unknown key '" + k + "'");
  }
  s.validate();
  return s;
}

}  // namespace dslens
