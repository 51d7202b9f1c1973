#include <gtest/gtest.h>

#include <map>
#include <set>

#include "test_util.hpp"

using namespace dslens;
using namespace dslens::testing;

namespace {

OverlayConfig solid_overlay(std::size_t h, std::size_t w, float mask_value) {
  OverlayConfig cfg;
  cfg.overlay.rgb = Tensor::full({3, h, w}, 0.9f);
  cfg.overlay.mask = Tensor::full({h, w}, mask_value);
  return cfg;
}

const PlantedFixture& fixture() {
  static const PlantedFixture f = make_planted_fixture();
  return f;
}

std::set<Site> planted_set() {
  const auto& p = fixture().spec.planted_sites;
  return {p.begin(), p.end()};
}

bool contains_all(const std::vector<Site>& sites, const std::set<Site>& want) {
  const std::set<Site> have(sites.begin(), sites.end());
  return std::includes(have.begin(), have.end(), want.begin(), want.end());
}

}  // namespace

TEST(Overlay, OpaqueCoverageReplacesPixels) {
  const Tensor base = Tensor::full({3, 8, 8}, 0.2f);
  OverlayConfig cfg = solid_overlay(3, 2, 1.0f);
  cfg.row = 4;
  cfg.col = 5;
  const Tensor out = composite_overlay(base, cfg);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x) {
        const bool inside = y >= 4 && y < 7 && x >= 5 && x < 7;
        EXPECT_EQ(out.at(c, y, x), inside ? 0.9f : 0.2f);
      }
}

TEST(Overlay, TransparentMaskLeavesBaseBitwise) {
  const Tensor base = random_tensor(3, {3, 8, 8});
  EXPECT_TRUE(bitwise_equal(composite_overlay(base, solid_overlay(8, 8, 0.0f)), base));
}

TEST(Overlay, OpacityBlendsLinearly) {
  const Tensor base = Tensor::full({3, 4, 4}, 0.1f);
  OverlayConfig cfg = solid_overlay(4, 4, 1.0f);
  cfg.opacity = 0.25f;
  EXPECT_FLOAT_EQ(composite_overlay(base, cfg)[0], 0.1f * 0.75f + 0.9f * 0.25f);
  cfg.opacity = 1e-6f;
  EXPECT_NEAR(composite_overlay(base, cfg)[0], 0.1f, 1e-6);
  cfg.opacity = 0.0f;
  EXPECT_THROW(composite_overlay(base, cfg), PlacementError);
}

TEST(Overlay, ScaleAndPlacementChecks) {
  const Tensor base = Tensor::full({3, 8, 8}, 0.0f);
  OverlayConfig cfg = solid_overlay(2, 2, 1.0f);
  cfg.scale = 2.0f;
  const Tensor out = composite_overlay(base, cfg);
  EXPECT_EQ(out.at(0, 3, 3), 0.9f);
  EXPECT_EQ(out.at(0, 4, 4), 0.0f);
  cfg.row = 5;
  EXPECT_THROW(composite_overlay(base, cfg), PlacementError);
  cfg.row = 0;
  cfg.scale = 0.0f;
  EXPECT_THROW(composite_overlay(base, cfg), PlacementError);
  EXPECT_THROW(composite_overlay(Tensor({8, 8}), solid_overlay(2, 2, 1.0f)), DimensionError);
}

TEST(Correlation, MatchesHandComputedValues) {
  EXPECT_DOUBLE_EQ(pearson({1, 2, 3}, {2, 4, 6}), 1.0);
  EXPECT_DOUBLE_EQ(pearson({1, 2, 3}, {3, 2, 1}), -1.0);
  // x = 1..5, y = 2,1,4,3,5: sxy = 8, sxx = syy = 10.
  EXPECT_NEAR(pearson({1, 2, 3, 4, 5}, {2, 1, 4, 3, 5}), 0.8, 1e-15);
  // Monotone but nonlinear.
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {1, 8, 27, 64}), 1.0);
  EXPECT_EQ(ranks({10, 20, 20, 5}), (std::vector<double>{2, 3.5, 3.5, 1}));
  EXPECT_THROW(pearson({1}, {1}), CorrelationError);
  EXPECT_THROW(pearson({1, 1, 1}, {1, 2, 3}), CorrelationError);
  EXPECT_THROW(pearson({1, 2}, {1, 2, 3}), DimensionError);
}

TEST(Ablation, RerunMatchesLastLayerCacheArithmetic) {
  const Weights w = generate_random_model(reference_config(), 17, 0.3f);
  const Tensor img = random_image(2, w.config);
  const auto clean = run_with_cache(img, w);
  const std::size_t last = w.config.n_layers - 1;
  const AblationSource zero{};
  for (std::size_t h = 0; h < w.config.n_heads; ++h) {
    const Tensor mid = sub(clean.cache.at(Site::resid_mid(last)), clean.cache.at(Site::head_out(last, h)));
    const Tensor post = add(mid, mlp_output(last, mid, w));
    const Tensor want = final_readout(post, w);
    EXPECT_LT(norm_rel_err(ablated_embedding(img, {Site::head_out(last, h)}, zero, w), want), 1e-5);
    EXPECT_NEAR(ablation_effect(img, Site::head_out(last, h), zero, w),
                1.0 - cosine_similarity(clean.embedding, want), 1e-5);
  }
}

TEST(Ablation, SourcesAreBuiltFromTheirRuns) {
  const Weights w = generate_random_model(reference_config(), 17, 0.3f);
  const Tensor a = random_image(1, w.config), b = random_image(2, w.config);
  const CorruptionConfig corruption{4, 0.0f, 1.0f};
  EXPECT_EQ(make_ablation_source(AblationMode::kZero, w, corruption, {}).cache, nullptr);
  const auto corrupt = make_ablation_source(AblationMode::kCorruptSource, w, corruption, {});
  const Shape shape{3, 32, 32};
  EXPECT_TRUE(bitwise_equal(corrupt.cache->at(Site::mlp_out(1)),
                            run_with_cache(corrupt_image(corruption, shape), w).cache.at(Site::mlp_out(1))));
  const auto mean = make_ablation_source(AblationMode::kMeanSource, w, corruption, {a, b});
  const Tensor want = scale(add(run_with_cache(a, w).cache.at(Site::head_out(0, 0)),
                                run_with_cache(b, w).cache.at(Site::head_out(0, 0))),
                            0.5f);
  EXPECT_LT(max_abs_diff(mean.cache->at(Site::head_out(0, 0)), want), 1e-6);
  EXPECT_THROW(make_ablation_source(AblationMode::kMeanSource, w, corruption, {}), ValidationError);
}

TEST(Eval1, RecordsAreSortedAndOrderIndependent) {
  const Weights w = generate_random_model(reference_config(), 5, 0.3f);
  const std::vector<Tensor> imgs{random_image(1, w.config), random_image(2, w.config)};
  const std::vector<Site> sites{Site::head_out(3, 1), Site::head_out(0, 2), Site::mlp_out(1)};
  std::vector<Site> reversed(sites.rbegin(), sites.rend());
  const CorruptionConfig corruption{9, 0.0f, 1.0f};
  const auto a = eval1(imgs, sites, LensKind::kDsl, 100.0f, {}, corruption, w);
  const auto b = eval1(imgs, reversed, LensKind::kDsl, 100.0f, {}, corruption, w);
  ASSERT_EQ(a.records.size(), 6u);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].site, b.records[i].site);
    EXPECT_EQ(a.records[i].viz_similarity, b.records[i].viz_similarity);
    EXPECT_EQ(a.records[i].ablation_effect, b.records[i].ablation_effect);
  }
  EXPECT_EQ(a.records[0].site, Site::head_out(0, 2));
  EXPECT_EQ(a.records[3].image, 1u);
  EXPECT_EQ(a.pearson_r, b.pearson_r);
  EXPECT_THROW(eval1({}, sites, LensKind::kDsl, 100.0f, {}, corruption, w), ValidationError);
}

TEST(Eval1, PlantedHeadsDominate) {
  const auto& f = fixture();
  const auto planted = planted_set();
  const auto r = eval1(f.overlayed, head_sites(f.w.config), LensKind::kDsl, 100.0f, {}, f.corruption, f.w);
  for (std::size_t i = 0; i < f.overlayed.size(); ++i) {
    double min_planted = 1e9, max_other = -1e9;
    for (const auto& rec : r.records) {
      if (rec.image != i) continue;
      if (planted.count(rec.site)) min_planted = std::min(min_planted, rec.ablation_effect);
      else max_other = std::max(max_other, rec.ablation_effect);
    }
    EXPECT_GT(min_planted, max_other) << "image " << i;
  }
  EXPECT_GT(r.pearson_r, 0.5);
  // Recorded value for model seed 1, images 100..104, corruption seed 7.
  EXPECT_NEAR(r.pearson_r, 0.895990290, 1e-6);
  EXPECT_GT(r.spearman_r, 0.0);
}

TEST(Selection, TextRoundTripPreservesOrder) {
  const ModelConfig c = reference_config();
  HeadSelection sel;
  sel.sites = {Site::head_out(1, 3), Site::head_out(3, 0), Site::head_out(0, 2)};
  const HeadSelection back = parse_head_selection(to_text(sel), c);
  EXPECT_EQ(back.sites, sel.sites);
  EXPECT_EQ(back.provenance, SelectionProvenance::kExternalFile);
  const std::string path = temp_path("sel.txt");
  save_head_selection(sel, path);
  EXPECT_EQ(load_head_selection(path, c).sites, sel.sites);
  EXPECT_TRUE(parse_head_selection("# nothing\n\n", c).sites.empty());
  EXPECT_EQ(parse_head_selection(" 2 , 1  # note\n", c).sites, std::vector<Site>{Site::head_out(2, 1)});
}

TEST(Selection, RejectsBadFiles) {
  const ModelConfig c = reference_config();
  EXPECT_THROW(parse_head_selection("1,1\n1,1\n", c), ValidationError);
  EXPECT_THROW(parse_head_selection("4,0\n", c), ValidationError);
  EXPECT_THROW(parse_head_selection("0,4\n", c), ValidationError);
  EXPECT_THROW(parse_head_selection("0 1\n", c), ValidationError);
  EXPECT_THROW(parse_head_selection("a,1\n", c), ValidationError);
  EXPECT_THROW(load_head_selection(temp_path("no_selection.txt"), c), IoError);
}

TEST(Selection, ThresholdPicksThePlantedHeads) {
  const auto& f = fixture();
  for (const auto& img : f.overlayed) {
    const HeadSelection sel = select_heads_by_overlay_similarity(
        img, f.overlay_reference, head_sites(f.w.config), 100.0f, kDefaultSelectionThreshold, f.corruption, f.w);
    EXPECT_EQ(std::set<Site>(sel.sites.begin(), sel.sites.end()), planted_set());
    EXPECT_EQ(sel.sites, eval2_order(sel.sites));
  }
}

TEST(Eval2, OrderIsLayerThenHeadDescending) {
  const auto o = eval2_order({Site::head_out(1, 0), Site::head_out(3, 1), Site::head_out(1, 2), Site::head_out(3, 3)});
  EXPECT_EQ(o, (std::vector<Site>{Site::head_out(3, 3), Site::head_out(3, 1), Site::head_out(1, 2),
                                  Site::head_out(1, 0)}));
}

TEST(Eval2, TrajectoryShapeAndInvariance) {
  const auto& f = fixture();
  const Eval2Inputs in = prepare_eval2(f.overlayed[0], f.originals[0], f.w);
  const auto empty = eval2_trajectory(in, HeadSelection{}, {}, f.w);
  ASSERT_EQ(empty.size(), 1u);
  EXPECT_NEAR(empty[0].sim_to_overlayed, 1.0, 1e-12);

  HeadSelection a, b;
  a.sites = {Site::head_out(0, 1), Site::head_out(3, 2), Site::head_out(2, 1)};
  b.sites = {Site::head_out(2, 1), Site::head_out(0, 1), Site::head_out(3, 2)};
  const auto ta = eval2_trajectory(in, a, {}, f.w), tb = eval2_trajectory(in, b, {}, f.w);
  ASSERT_EQ(ta.size(), 4u);
  for (std::size_t k = 0; k < ta.size(); ++k) {
    EXPECT_EQ(ta[k].step, k);
    EXPECT_EQ(ta[k].sim_to_original, tb[k].sim_to_original);
    EXPECT_EQ(ta[k].sim_to_overlayed, tb[k].sim_to_overlayed);
  }
  // First point ablates L3H2 alone.
  const Tensor one = ablated_embedding(f.overlayed[0], {Site::head_out(3, 2)}, {}, f.w);
  EXPECT_EQ(ta[1].sim_to_original, cosine_similarity(one, in.original_embedding));
}

TEST(Acdc, TauBounds) {
  const auto& f = fixture();
  const Eval2Inputs in = prepare_eval2(f.overlayed[0], f.originals[0], f.w);
  const auto all = head_sites(f.w.config);
  const HeadSelection none = acdc_like_select(in, 0.0, {}, f.w, all);
  // Every accepted step must not lower sim_to_overlayed at tau 0; none can
  // raise sim_to_original without doing so here.
  for (const auto& p : eval2_trajectory(in, none, {}, f.w)) EXPECT_GE(p.sim_to_overlayed, 1.0 - 1e-9);
  const HeadSelection loose = acdc_like_select(in, 1e9, {}, f.w, all);
  const auto t = eval2_trajectory(in, loose, {}, f.w);
  for (std::size_t k = 1; k < t.size(); ++k) EXPECT_GT(t[k].sim_to_original, t[k - 1].sim_to_original);
  EXPECT_THROW(acdc_like_select(in, -1.0, {}, f.w, all), ValidationError);
}

// The default tau was chosen here: removing the overlay costs about 0.8 of
// source similarity on this fixture, so small values reject the planted heads.
TEST(Acdc, DefaultTauRecoversThePlantedHeads) {
  const auto& f = fixture();
  const auto planted = planted_set();
  std::size_t recovered_default = 0, recovered_small = 0;
  for (std::size_t i = 0; i < f.overlayed.size(); ++i) {
    const Eval2Inputs in = prepare_eval2(f.overlayed[i], f.originals[i], f.w);
    recovered_default += contains_all(acdc_like_select(in, kDefaultAcdcTau, {}, f.w, head_sites(f.w.config)).sites, planted);
    recovered_small += contains_all(acdc_like_select(in, 0.05, {}, f.w, head_sites(f.w.config)).sites, planted);
  }
  EXPECT_EQ(recovered_default, f.overlayed.size());
  EXPECT_EQ(recovered_small, 0u);
}

TEST(RandomBaseline, MatchesPerLayerQuotasAndAvoidsDsl) {
  const ModelConfig c = reference_config();
  HeadSelection dsl;
  dsl.sites = {Site::head_out(3, 2), Site::head_out(2, 1), Site::head_out(2, 0)};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const HeadSelection r = sample_random_selection(dsl, head_sites(c), seed, {});
    std::map<std::size_t, int> per_layer;
    for (const auto& s : r.sites) {
      ++per_layer[s.layer];
      EXPECT_EQ(std::count(dsl.sites.begin(), dsl.sites.end(), s), 0);
    }
    EXPECT_EQ(per_layer, (std::map<std::size_t, int>{{2, 2}, {3, 1}}));
    EXPECT_NO_THROW(r.validate(c));
  }
  const auto a = sample_random_selection(dsl, head_sites(c), 7, {});
  EXPECT_EQ(a.sites, sample_random_selection(dsl, head_sites(c), 7, {}).sites);

  RandomBaselineOptions global;
  global.global_matching = true;
  const auto g = sample_random_selection(dsl, head_sites(c), 7, global);
  EXPECT_EQ(g.sites.size(), 3u);
}

TEST(RandomBaseline, DrawsAreExchangeable) {
  const ModelConfig c = reference_config();
  HeadSelection dsl;
  dsl.sites = {Site::head_out(1, 0)};
  std::map<Site, int> counts;
  const int n = 6000;
  for (int seed = 0; seed < n; ++seed) ++counts[sample_random_selection(dsl, head_sites(c), seed, {}).sites[0]];
  ASSERT_EQ(counts.size(), 3u);
  // Each of the three complement heads: expected n/3, sd ~ 36.
  for (const auto& [site, k] : counts) EXPECT_NEAR(k, n / 3.0, 200.0) << site.str();
}

TEST(RandomBaseline, FallbackAndSamplingErrors) {
  const ModelConfig c = reference_config();
  HeadSelection dsl;
  dsl.sites = {Site::head_out(1, 0), Site::head_out(1, 1), Site::head_out(1, 2)};
  HeadSelection full = dsl;
  full.sites.push_back(Site::head_out(1, 3));
  full.sites.push_back(Site::head_out(0, 0));
  // Layer 1 has no heads left, so the whole quota comes from elsewhere.
  const auto r = sample_random_selection(full, head_sites(c), 3, {});
  EXPECT_EQ(r.sites.size(), 5u);
  std::size_t layer0 = 0;
  for (const auto& s : r.sites) {
    EXPECT_NE(s.layer, 1u);
    layer0 += s.layer == 0;
  }
  EXPECT_GE(layer0, 1u);
  RandomBaselineOptions strict;
  strict.allow_fallback = false;
  EXPECT_THROW(sample_random_selection(full, head_sites(c), 3, strict), SamplingError);
  HeadSelection two;
  two.sites = {Site::head_out(1, 0), Site::head_out(1, 1)};
  EXPECT_NO_THROW(sample_random_selection(two, head_sites(c), 3, strict));
  EXPECT_THROW(sample_random_selection(dsl, head_sites(c), 3, strict), SamplingError);

  HeadSelection huge;
  huge.sites = head_sites(c);
  huge.sites.resize(10);
  EXPECT_THROW(sample_random_selection(huge, head_sites(c), 1, {}), SamplingError);
}

TEST(RandomBaseline, RepeatsAreSeededIndependently) {
  const auto& f = fixture();
  const Eval2Inputs in = prepare_eval2(f.overlayed[0], f.originals[0], f.w);
  HeadSelection dsl;
  dsl.sites = f.spec.planted_sites;
  const auto a = random_baseline(dsl, head_sites(f.w.config), 4, 11, in, {}, f.w);
  const auto b = random_baseline(dsl, head_sites(f.w.config), 4, 11, in, {}, f.w);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t r = 0; r < a.size(); ++r) {
    EXPECT_EQ(a[r].selection.sites, b[r].selection.sites);
    EXPECT_EQ(a[r].points.back().sim_to_original, b[r].points.back().sim_to_original);
    EXPECT_EQ(a[r].points.size(), dsl.sites.size() + 1);
  }
  EXPECT_EQ(repeat_seeds(11, 3), repeat_seeds(11, 3));
  EXPECT_NE(repeat_seeds(11, 2)[0], repeat_seeds(11, 2)[1]);
}
