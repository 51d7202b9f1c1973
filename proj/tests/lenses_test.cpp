#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace dslens;
using namespace dslens::testing;

namespace {

struct Fixture {
  Weights w = generate_random_model(reference_config(), 8, 0.3f);
  Tensor image = random_image(12, w.config);
  DslContext ctx = prepare_dsl(image, CorruptionConfig{3, 0.0f, 1.0f}, w);
};

}  // namespace

TEST(DiffusionLens, LastLayerIsTheEmbedding) {
  Fixture f;
  const std::size_t last = f.w.config.n_layers - 1;
  EXPECT_TRUE(bitwise_equal(diffusion_lens(*f.ctx.clean, last, f.w), f.ctx.clean_embedding));
  EXPECT_THROW(diffusion_lens(*f.ctx.clean, f.w.config.n_layers, f.w), SiteError);
}

TEST(DiffusionLens, SubmoduleReadsOutTheSiteAlone) {
  Fixture f;
  const Site s = Site::head_out(1, 2);
  const LensResult r = lens(LensKind::kDiffusionLens, f.ctx, s, 100.0f, f.w);
  EXPECT_TRUE(bitwise_equal(r.embedding, final_readout(f.ctx.clean->at(s), f.w)));
  EXPECT_DOUBLE_EQ(r.similarity_to_input, cosine_similarity(r.embedding, f.ctx.clean_embedding));
}

TEST(DslLens, AlphaZeroScoresTheCorruptedRun) {
  Fixture f;
  const double want = cosine_similarity(f.ctx.corrupt_embedding, f.ctx.clean_embedding);
  for (const auto& s : head_sites(f.w.config))
    EXPECT_DOUBLE_EQ(dsl_lens(f.ctx, s, 0.0f, f.w).similarity_to_input, want) << s.str();
}

TEST(DslLens, ImageOverloadMatchesContext) {
  Fixture f;
  const Site s = Site::mlp_out(2);
  const LensResult a = dsl_lens(f.ctx, s, 100.0f, f.w);
  const LensResult b = dsl_lens(f.image, CorruptionConfig{3, 0.0f, 1.0f}, s, 100.0f, f.w);
  EXPECT_TRUE(bitwise_equal(a.embedding, b.embedding));
}

TEST(LensSimilarity, ZeroNormScoresZero) {
  EXPECT_EQ(lens_similarity(Tensor({4}), Tensor::vector({1, 2, 3, 4})), 0.0);
  EXPECT_DOUBLE_EQ(lens_similarity(Tensor::vector({1, 0}), Tensor::vector({1, 1})), std::sqrt(0.5));
}

TEST(Ranking, MatchesFullSortAndRespectsK) {
  Fixture f;
  const auto sites = head_sites(f.w.config);
  const auto top = rank_sites_by_similarity(f.ctx, sites, 100.0f, f.w, 5);
  ASSERT_EQ(top.size(), 5u);
  std::vector<double> all;
  for (const auto& s : sites) all.push_back(dsl_lens(f.ctx, s, 100.0f, f.w).similarity_to_input);
  std::sort(all.rbegin(), all.rend());
  for (std::size_t i = 0; i < top.size(); ++i) EXPECT_EQ(top[i].similarity_to_input, all[i]);
  EXPECT_EQ(rank_sites_by_similarity(f.ctx, sites, 100.0f, f.w, sites.size()).size(), sites.size());
  EXPECT_THROW(rank_sites_by_similarity(f.ctx, sites, 100.0f, f.w, sites.size() + 1), ValidationError);
  EXPECT_THROW(rank_sites_by_similarity(f.ctx, {}, 100.0f, f.w, 0), ValidationError);
}

TEST(Ranking, TiesBreakByLayerThenHead) {
  std::vector<LensResult> r{{Site::head_out(2, 0), {}, 0.5},
                            {Site::head_out(0, 3), {}, 0.5},
                            {Site::head_out(0, 1), {}, 0.5},
                            {Site::head_out(1, 0), {}, 0.9}};
  sort_by_similarity(r);
  EXPECT_EQ(r[0].site, Site::head_out(1, 0));
  EXPECT_EQ(r[1].site, Site::head_out(0, 1));
  EXPECT_EQ(r[2].site, Site::head_out(0, 3));
  EXPECT_EQ(r[3].site, Site::head_out(2, 0));
}

TEST(Ranking, PlantedHeadsRankFirst) {
  const PlantedFixture f = make_planted_fixture();
  const std::set<Site> planted(f.spec.planted_sites.begin(), f.spec.planted_sites.end());
  for (const auto& img : f.overlayed) {
    const auto top = rank_sites_by_similarity(img, f.corruption, head_sites(f.w.config), 100.0f, f.w, 1);
    EXPECT_TRUE(planted.count(top[0].site)) << top[0].site.str();
  }
}

TEST(LensKind, Parse) {
  EXPECT_EQ(parse_lens_kind("dsl"), LensKind::kDsl);
  EXPECT_EQ(parse_lens_kind("dl"), LensKind::kDiffusionLens);
  EXPECT_THROW(parse_lens_kind("logit"), ValidationError);
}
