// dslens: command-line front end.
//
//   dslens gen    --out model.dslw [--planted SPEC|default] [shape flags] [--samples DIR]
//   dslens lens   --model M --images a.png,b.png [--sites heads] [--lens dsl] --out DIR
//   dslens eval1  --model M --images ... --out DIR
//   dslens eval2  --model M --images ... [--selection FILE] --out DIR
//   dslens export --model M --images ... --site 2:1 --out DIR
//   dslens decode --model M --embeddings x.dsle --out DIR
//
// Exit codes: 0 success, 1 invalid input, 2 runtime/numeric failure, 3 I/O.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dslens/dslens.hpp"
#include "dslens/png_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dslens;

namespace {

// Flag overrides, applied in command-line order on top of --config.
using Overrides = std::vector<std::pair<std::string, std::string>>;

void add_key(CLI::App* app, Overrides& ov, const std::string& flag, const std::string& key,
             const std::string& help) {
  app->add_option_function<std::string>(
      flag, [&ov, key](const std::string& v) { ov.emplace_back(key, v); }, help);
}

void add_list_key(CLI::App* app, Overrides& ov, const std::string& flag, const std::string& key,
                  const std::string& help) {
  app->add_option_function<std::vector<std::string>>(
         flag, [&ov, key](const std::vector<std::string>& v) { ov.emplace_back(key, join(v)); }, help)
      ->delimiter(',');
}

struct Common {
  std::string config_path;
  Overrides overrides;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "key = value experiment config");
  auto& ov = c.overrides;
  add_key(app, ov, "--model", "model", "DSLW model file");
  add_list_key(app, ov, "--image,--images", "images", "input images (PNG or PPM)");
  add_key(app, ov, "--alpha", "alpha", "steering coefficient");
  add_key(app, ov, "--seed", "seed", "seed for random baselines and synthetic decoder data");
  add_key(app, ov, "--corruption-seed", "corruption_seed", "seed of the noise image");
  add_list_key(app, ov, "--site", "sites", "site(s) as layer:head or layer:mlp");
  add_key(app, ov, "--sites", "sites", "heads | mlps | submodules | resid | l:h,...");
  add_key(app, ov, "--lens", "lens", "dsl or dl");
  add_key(app, ov, "--scope", "scope", "steer all tokens or only the class token (all|cls)");
  add_key(app, ov, "--mode", "mode", "ablation mode: zero, corrupt or mean");
  add_key(app, ov, "--tau", "tau", "ACDC-like source-loss threshold");
  add_key(app, ov, "--repeats", "repeats", "random-baseline repeats");
  add_key(app, ov, "--threshold", "threshold", "overlay-similarity selection threshold");
  add_key(app, ov, "--selection", "selection", "head-selection file (layer,head lines)");
  add_key(app, ov, "--overlay", "overlay", "overlay: flower or an RGBA PNG");
  add_key(app, ov, "--out", "out", "output directory");
  add_key(app, ov, "--top-k", "top_k", "number of top sites to report and decode");
  add_key(app, ov, "--ridge", "ridge", "ridge penalty of the linear decoder");
  add_list_key(app, ov, "--embedding,--embeddings", "embeddings", "DSLE files to decode");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg;
  if (!c.config_path.empty()) cfg = parse_experiment_config(read_file_text(c.config_path));
  for (const auto& [k, v] : c.overrides) set_config_key(cfg, k, v);
  validate_experiment_config(cfg);
  return cfg;
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + " is required");
  if (!fs::is_regular_file(path)) throw IoError(what + " '" + path + "' not found");
}

void require_inputs(const ExperimentConfig& cfg, bool images) {
  require_file(cfg.model, "model");
  if (images) {
    if (cfg.images.empty()) throw ConfigError("at least one image is required");
    for (const auto& p : cfg.images) require_file(p, "image");
  }
  if (!cfg.selection.empty()) require_file(cfg.selection, "selection file");
  if (cfg.overlay != "flower") require_file(cfg.overlay, "overlay");
  for (const auto& p : cfg.decoder_images) require_file(p, "decoder image");
  for (const auto& p : cfg.embeddings) require_file(p, "embedding");
}

void prepare_out(const ExperimentConfig& cfg) {
  std::error_code ec;
  fs::create_directories(cfg.out, ec);
  if (ec) throw IoError("cannot create output directory '" + cfg.out + "': " + ec.message());
  write_file_text((fs::path(cfg.out) / "config.txt").string(), to_text(cfg));
}

std::string out_path(const ExperimentConfig& cfg, const std::string& name) {
  return (fs::path(cfg.out) / name).string();
}

void warn_alpha(float alpha) {
  if (alpha <= kStableAlphaThreshold)
    std::cerr << "warning: alpha = " << format_real(alpha) << " is at or below "
              << format_real(kStableAlphaThreshold) << "; lens outputs may be unreliable\n";
}

// Pixel-space image at the model's resolution.
Tensor load_pixels(const std::string& path, const ModelConfig& mc) {
  Tensor px = read_image(path);
  if (px.dim(1) != mc.image_size || px.dim(2) != mc.image_size)
    throw DimensionError("image '" + path + "' is " + std::to_string(px.dim(2)) + "x" +
                         std::to_string(px.dim(1)) + "; the model expects " + std::to_string(mc.image_size) +
                         "x" + std::to_string(mc.image_size));
  return px;
}

std::vector<Tensor> load_inputs(const ExperimentConfig& cfg, const ModelConfig& mc) {
  std::vector<Tensor> out;
  for (const auto& p : cfg.images) out.push_back(standardize(load_pixels(p, mc), cfg.norm));
  return out;
}

std::string site_slug(const Site& s) {
  std::string slug = s.str();
  for (auto& ch : slug)
    if (ch == '.') ch = '_';
  return slug;
}

// Linear decoder fitted on clean embeddings of synthetic images plus any
// user-supplied ones.
DecoderSpec fit_decoder(const ExperimentConfig& cfg, const Weights& w) {
  std::vector<DecoderPair> pairs;
  auto add = [&](const Tensor& pixels) {
    pairs.push_back({run_with_cache(standardize(pixels, cfg.norm), w).embedding, pixels});
  };
  for (std::size_t i = 0; i < cfg.decoder_synthetic; ++i)
    add(synthetic_base_image(mix_seed(cfg.seed, i), w.config.image_size));
  for (const auto& p : cfg.decoder_images) add(load_pixels(p, w.config));
  for (const auto& p : cfg.images) add(load_pixels(p, w.config));
  if (pairs.empty()) throw ConfigError("decoder needs training images (decoder_synthetic or decoder_images)");
  return fit_linear_decoder(pairs, cfg.ridge);
}

AblationSource ablation_source(const ExperimentConfig& cfg, const Weights& w,
                               const std::vector<Tensor>& references) {
  return make_ablation_source(cfg.mode, w, cfg.corruption, references);
}

json config_json(const ExperimentConfig& cfg) {
  return {{"alpha", cfg.alpha},
          {"lens", lens_kind_name(cfg.lens)},
          {"mode", ablation_mode_name(cfg.mode)},
          {"corruption_seed", cfg.corruption.seed},
          {"images", cfg.images}};
}

void write_json(const std::string& path, const json& j) { write_file_text(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------

struct GenOptions {
  std::string out;
  std::string planted;
  std::string samples;
  std::size_t sample_count = 4;
  std::uint64_t seed = 0;
  float init_scale = kDefaultInitScale;
  ModelConfig mc;
};

int cmd_gen(const GenOptions& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  Weights w;
  std::string kind;
  if (!o.planted.empty()) {
    const PlantedSpec spec = o.planted == "default" ? PlantedSpec{} : parse_planted_spec(read_file_text(o.planted));
    w = generate_planted_model(spec, o.seed);
    kind = "planted (" + format_site_list(spec.planted_sites) + ")";
  } else {
    o.mc.validate();
    w = generate_random_model(o.mc, o.seed, o.init_scale);
    kind = "random";
  }
  if (const fs::path parent = fs::path(o.out).parent_path(); !parent.empty()) {
    std::error_code ec;
    fs::create_directories(parent, ec);
    if (ec) throw IoError("cannot create directory '" + parent.string() + "': " + ec.message());
  }
  save_weights(w, o.out);
  const ModelConfig& c = w.config;
  std::cout << "wrote " << o.out << ": " << kind << " model, seed " << o.seed << "\n"
            << "  layers " << c.n_layers << ", heads " << c.n_heads << ", d_model " << c.d_model << ", d_head "
            << c.d_head << ", d_mlp " << c.d_mlp << "\n"
            << "  image " << c.image_size << "x" << c.image_size << ", patch " << c.patch_size << ", d_embed "
            << c.d_embed << "\n";

  if (!o.samples.empty()) {
    fs::create_directories(o.samples);
    const OverlayConfig ov = default_overlay_config(c.image_size);
    for (std::size_t i = 0; i < o.sample_count; ++i) {
      const Tensor base = synthetic_base_image(mix_seed(o.seed, i), c.image_size);
      write_png((fs::path(o.samples) / ("base_" + std::to_string(i) + ".png")).string(), base);
      write_png((fs::path(o.samples) / ("overlayed_" + std::to_string(i) + ".png")).string(),
                composite_overlay(base, ov));
    }
    write_png((fs::path(o.samples) / "overlay_on_grey.png").string(), overlay_on_neutral(ov, c.image_size));
    std::cout << "wrote " << o.sample_count << " sample image pairs to " << o.samples << "\n";
  }
  return 0;
}

int cmd_lens(const ExperimentConfig& cfg) {
  require_inputs(cfg, true);
  const Weights w = load_weights(cfg.model);
  const std::vector<Site> sites = resolve_sites(cfg.sites, w.config);
  const bool resid = cfg.sites == "resid";
  if (!resid && cfg.lens == LensKind::kDsl) warn_alpha(cfg.alpha);
  const std::vector<Tensor> images = load_inputs(cfg, w.config);
  const std::size_t k = std::min(cfg.top_k, sites.size());
  prepare_out(cfg);
  const DecoderSpec decoder = fit_decoder(cfg, w);
  fs::create_directories(out_path(cfg, "decoded"));
  fs::create_directories(out_path(cfg, "embeddings"));

  std::string csv = "image,lens,site,kind,layer,head,similarity,rank\n";
  json summary = config_json(cfg);
  summary["top_k"] = k;
  summary["per_image"] = json::array();
  for (std::size_t i = 0; i < images.size(); ++i) {
    const DslContext ctx = prepare_dsl(images[i], cfg.corruption, w);
    std::vector<LensResult> results;
    for (const auto& s : sites) {
      if (resid) {
        LensResult r{s, diffusion_lens(*ctx.clean, s.layer, w), 0.0};
        r.similarity_to_input = lens_similarity(r.embedding, ctx.clean_embedding);
        results.push_back(std::move(r));
      } else {
        results.push_back(lens(cfg.lens, ctx, s, cfg.alpha, w, cfg.scope));
      }
    }
    std::vector<LensResult> ranked = results;
    sort_by_similarity(ranked);
    std::map<Site, std::size_t> rank_of;
    for (std::size_t r = 0; r < ranked.size(); ++r) rank_of[ranked[r].site] = r + 1;
    const char* lens_name = resid ? "dl" : lens_kind_name(cfg.lens);
    for (const auto& r : results)
      csv += std::to_string(i) + "," + lens_name + "," + r.site.str() + "," + site_kind_name(r.site.kind) + "," +
             std::to_string(r.site.layer) + "," + (r.site.has_head() ? std::to_string(r.site.head) : "") + "," +
             format_real(r.similarity_to_input) + "," + std::to_string(rank_of[r.site]) + "\n";

    json top = json::array();
    const std::string stem = "img" + std::to_string(i);
    write_png(out_path(cfg, "decoded/" + stem + "_input.png"), unstandardize(images[i], cfg.norm));
    for (std::size_t r = 0; r < k; ++r) {
      const std::string name = stem + "_" + site_slug(ranked[r].site);
      std::map<std::string, std::string> meta = default_embedding_metadata();
      meta["site"] = ranked[r].site.str();
      meta["lens"] = lens_name;
      export_embedding(ranked[r].embedding, out_path(cfg, "embeddings/" + name + ".dsle"), meta);
      write_png(out_path(cfg, "decoded/" + name + ".png"), decode(decoder, ranked[r].embedding));
      top.push_back({{"rank", r + 1}, {"site", ranked[r].site.str()}, {"similarity", ranked[r].similarity_to_input}});
    }
    summary["per_image"].push_back({{"image", cfg.images[i]}, {"top", top}});
  }
  write_file_text(out_path(cfg, "lens.csv"), csv);
  write_json(out_path(cfg, "summary.json"), summary);
  std::cout << "lens: " << images.size() << " image(s) x " << sites.size() << " site(s) -> " << cfg.out << "\n";
  return 0;
}

int cmd_eval1(const ExperimentConfig& cfg) {
  require_inputs(cfg, true);
  const Weights w = load_weights(cfg.model);
  const std::vector<Site> sites = resolve_sites(cfg.sites, w.config);
  for (const auto& s : sites)
    if (!s.is_submodule()) throw ConfigError("eval1 needs head or MLP sites, got " + s.str());
  if (cfg.lens == LensKind::kDsl) warn_alpha(cfg.alpha);
  const std::vector<Tensor> images = load_inputs(cfg, w.config);
  prepare_out(cfg);
  const AblationSource src = ablation_source(cfg, w, images);
  const Eval1Result res = eval1(images, sites, cfg.lens, cfg.alpha, src, cfg.corruption, w);

  std::string csv = "image,site,lens,viz_similarity,ablation_effect\n";
  for (const auto& r : res.records)
    csv += std::to_string(r.image) + "," + r.site.str() + "," + lens_kind_name(r.lens_kind) + "," +
           format_real(r.viz_similarity) + "," + format_real(r.ablation_effect) + "\n";
  write_file_text(out_path(cfg, "eval1.csv"), csv);
  json summary = config_json(cfg);
  summary["records"] = res.records.size();
  summary["pearson_r"] = res.pearson_r;
  summary["spearman_r"] = res.spearman_r;
  write_json(out_path(cfg, "summary.json"), summary);
  std::cout << "eval1: " << res.records.size() << " records, pearson r = " << format_real(res.pearson_r)
            << ", spearman r = " << format_real(res.spearman_r) << "\n";
  return 0;
}

OverlayConfig overlay_config(const ExperimentConfig& cfg, std::size_t image_size) {
  OverlayConfig ov = default_overlay_config(image_size);
  if (cfg.overlay != "flower") {
    Tensor alpha;
    ov.overlay.rgb = read_image(cfg.overlay, &alpha);
    ov.overlay.mask = alpha;
  }
  if (cfg.overlay_row) ov.row = *cfg.overlay_row;
  if (cfg.overlay_col) ov.col = *cfg.overlay_col;
  ov.scale = cfg.overlay_scale;
  ov.opacity = cfg.overlay_opacity;
  return ov;
}

json endpoint_stats(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean = v.empty() ? 0.0 : mean / double(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = v.size() > 1 ? std::sqrt(var / double(v.size() - 1)) : 0.0;
  return {{"mean", mean}, {"std", sd}, {"n", v.size()}};
}

int cmd_eval2(const ExperimentConfig& cfg) {
  require_inputs(cfg, true);
  const Weights w = load_weights(cfg.model);
  warn_alpha(cfg.alpha);
  const std::size_t size = w.config.image_size;
  const OverlayConfig ov = overlay_config(cfg, size);
  std::vector<Tensor> originals, overlayed;
  for (const auto& p : cfg.images) {
    const Tensor px = load_pixels(p, w.config);
    originals.push_back(standardize(px, cfg.norm));
    overlayed.push_back(standardize(composite_overlay(px, ov), cfg.norm));
  }
  std::optional<HeadSelection> external;
  if (!cfg.selection.empty()) external = load_head_selection(cfg.selection, w.config);
  prepare_out(cfg);

  const Tensor ref = run_with_cache(standardize(overlay_on_neutral(ov, size), cfg.norm), w).embedding;
  const AblationSource src = ablation_source(cfg, w, originals);
  const std::vector<Site> heads = head_sites(w.config);
  RandomBaselineOptions ropt;
  ropt.global_matching = cfg.global_matching;

  std::string csv = "image,strategy,repeat,step,sim_to_original,sim_to_overlayed\n";
  auto emit = [&](std::size_t img, const char* strategy, std::size_t repeat, const std::vector<TrajectoryPoint>& pts) {
    for (const auto& p : pts)
      csv += std::to_string(img) + "," + strategy + "," + std::to_string(repeat) + "," + std::to_string(p.step) +
             "," + format_real(p.sim_to_original) + "," + format_real(p.sim_to_overlayed) + "\n";
  };
  json summary = config_json(cfg);
  summary["tau"] = cfg.tau;
  summary["threshold"] = cfg.threshold;
  summary["repeats"] = cfg.repeats;
  summary["selection_source"] = external ? "file" : "threshold";
  summary["per_image"] = json::array();
  std::vector<double> dsl_end, acdc_end, random_end;
  for (std::size_t i = 0; i < originals.size(); ++i) {
    const std::string stem = "img" + std::to_string(i);
    write_png(out_path(cfg, stem + "_overlayed.png"), unstandardize(overlayed[i], cfg.norm));
    const Eval2Inputs in = prepare_eval2(overlayed[i], originals[i], w);
    const HeadSelection dsl =
        external ? *external
                 : select_heads_by_overlay_similarity(overlayed[i], ref, heads, cfg.alpha, cfg.threshold,
                                                      cfg.corruption, w);
    const HeadSelection acdc = acdc_like_select(in, cfg.tau, src, w, heads);
    save_head_selection(dsl, out_path(cfg, stem + "_selection_dsl.txt"));
    save_head_selection(acdc, out_path(cfg, stem + "_selection_acdc.txt"));

    const auto dsl_traj = eval2_trajectory(in, dsl, src, w);
    const auto acdc_traj = eval2_trajectory(in, acdc, src, w);
    emit(i, "dsl", 0, dsl_traj);
    emit(i, "acdc", 0, acdc_traj);
    std::vector<double> rnd;
    for (const auto& t : random_baseline(dsl, heads, cfg.repeats, mix_seed(cfg.seed, i), in, src, w, ropt)) {
      emit(i, "random", t.repeat, t.points);
      rnd.push_back(t.points.back().sim_to_original);
      random_end.push_back(rnd.back());
    }
    dsl_end.push_back(dsl_traj.back().sim_to_original);
    acdc_end.push_back(acdc_traj.back().sim_to_original);
    summary["per_image"].push_back({{"image", cfg.images[i]},
                                    {"dsl_selection", format_site_list(eval2_order(dsl.sites))},
                                    {"acdc_selection", format_site_list(acdc.sites)},
                                    {"start_sim_to_original", dsl_traj.front().sim_to_original},
                                    {"dsl_endpoint", dsl_end.back()},
                                    {"acdc_endpoint", acdc_end.back()},
                                    {"random_endpoint", endpoint_stats(rnd)}});
  }
  summary["endpoints"] = {{"dsl", endpoint_stats(dsl_end)},
                          {"acdc", endpoint_stats(acdc_end)},
                          {"random", endpoint_stats(random_end)}};
  write_file_text(out_path(cfg, "trajectories.csv"), csv);
  write_json(out_path(cfg, "summary.json"), summary);
  std::cout << "eval2: " << originals.size() << " image(s); mean endpoint sim_to_original dsl "
            << format_real(summary["endpoints"]["dsl"]["mean"].get<double>()) << ", acdc "
            << format_real(summary["endpoints"]["acdc"]["mean"].get<double>()) << ", random "
            << format_real(summary["endpoints"]["random"]["mean"].get<double>()) << "\n";
  return 0;
}

int cmd_export(const ExperimentConfig& cfg) {
  require_inputs(cfg, true);
  const Weights w = load_weights(cfg.model);
  const std::vector<Site> sites = resolve_sites(cfg.sites, w.config);
  const bool resid = cfg.sites == "resid";
  if (!resid && cfg.lens == LensKind::kDsl) warn_alpha(cfg.alpha);
  const std::vector<Tensor> images = load_inputs(cfg, w.config);
  prepare_out(cfg);
  std::size_t n = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const DslContext ctx = prepare_dsl(images[i], cfg.corruption, w);
    const std::string stem = "img" + std::to_string(i);
    std::map<std::string, std::string> meta = default_embedding_metadata();
    meta["image"] = cfg.images[i];
    meta["site"] = "input";
    export_embedding(ctx.clean_embedding, out_path(cfg, stem + "_input.dsle"), meta);
    for (const auto& s : sites) {
      const Tensor e = resid ? diffusion_lens(*ctx.clean, s.layer, w) : lens(cfg.lens, ctx, s, cfg.alpha, w, cfg.scope).embedding;
      meta["site"] = s.str();
      meta["lens"] = resid ? "dl" : lens_kind_name(cfg.lens);
      meta["alpha"] = format_real(cfg.alpha);
      export_embedding(e, out_path(cfg, stem + "_" + site_slug(s) + ".dsle"), meta);
      ++n;
    }
  }
  std::cout << "export: " << n << " lens embedding(s) and " << images.size() << " input embedding(s) -> "
            << cfg.out << "\n";
  return 0;
}

int cmd_decode(const ExperimentConfig& cfg) {
  require_inputs(cfg, false);
  if (cfg.embeddings.empty()) throw ConfigError("decode needs --embeddings");
  const Weights w = load_weights(cfg.model);
  std::vector<Tensor> embeddings;
  for (const auto& p : cfg.embeddings) embeddings.push_back(import_embedding(p, w.config.d_embed));
  prepare_out(cfg);
  const DecoderSpec decoder = fit_decoder(cfg, w);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    const std::string stem = fs::path(cfg.embeddings[i]).stem().string();
    write_png(out_path(cfg, stem + ".png"), decode(decoder, embeddings[i]));
  }
  std::cout << "decode: " << embeddings.size() << " image(s) -> " << cfg.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dslens: Diffusion Steering Lens toolkit for vision transformers"};
  app.require_subcommand(1);

  GenOptions gen;
  auto* g = app.add_subcommand("gen", "generate a random or planted-circuit model");
  g->add_option("--out", gen.out, "output DSLW file")->required();
  g->add_option("--seed", gen.seed, "model seed");
  g->add_option("--planted", gen.planted, "planted spec file, or 'default'");
  g->add_option("--layers", gen.mc.n_layers);
  g->add_option("--heads", gen.mc.n_heads);
  g->add_option("--d-model", gen.mc.d_model);
  g->add_option("--d-mlp", gen.mc.d_mlp);
  g->add_option("--image-size", gen.mc.image_size);
  g->add_option("--patch-size", gen.mc.patch_size);
  g->add_option("--d-embed", gen.mc.d_embed);
  g->add_option("--init-scale", gen.init_scale);
  g->add_option("--samples", gen.samples, "also write synthetic sample images here");
  g->add_option("--sample-count", gen.sample_count);

  Common lens_c, eval1_c, eval2_c, export_c, decode_c;
  auto* l = app.add_subcommand("lens", "diffusion lens / DSL sweep with decoded top-k images");
  auto* e1 = app.add_subcommand("eval1", "correlate lens similarity with ablation effect");
  auto* e2 = app.add_subcommand("eval2", "sequential head ablation on overlayed images");
  auto* ex = app.add_subcommand("export", "write lens embeddings as DSLE files");
  auto* de = app.add_subcommand("decode", "decode DSLE embeddings to PNG with a linear decoder");
  add_common(l, lens_c);
  add_common(e1, eval1_c);
  add_common(e2, eval2_c);
  add_common(ex, export_c);
  add_common(de, decode_c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*g) {
      // d_head follows from the other shape flags.
      if (gen.mc.n_heads == 0) throw ConfigError("--heads must be >= 1");
      gen.mc.d_head = gen.mc.d_model / gen.mc.n_heads;
      if (gen.mc.d_head * gen.mc.n_heads != gen.mc.d_model)
        throw ConfigError("n_heads (" + std::to_string(gen.mc.n_heads) + ") must divide d_model (" +
                          std::to_string(gen.mc.d_model) + ")");
      return cmd_gen(gen);
    }
    if (*l) return cmd_lens(resolve(lens_c));
    if (*e1) return cmd_eval1(resolve(eval1_c));
    if (*e2) return cmd_eval2(resolve(eval2_c));
    if (*ex) return cmd_export(resolve(export_c));
    if (*de) return cmd_decode(resolve(decode_c));
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
