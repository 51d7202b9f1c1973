#include <gtest/gtest.h>

#include <fstream>

#include "test_util.hpp"

using namespace dslens;
using namespace dslens::testing;

namespace {

// Pairs generated by a known affine map.
std::vector<DecoderPair> affine_pairs(const Tensor& m, const Tensor& b, std::size_t n, std::size_t size) {
  std::vector<DecoderPair> pairs;
  for (std::size_t i = 0; i < n; ++i) {
    DecoderPair p;
    p.embedding = random_tensor(100 + i, {m.dim(0)});
    Tensor y = matmul(p.embedding.reshaped({1, m.dim(0)}), m);
    add_row_bias(y, b);
    p.image = y.reshaped({3, size, size});
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace

TEST(LinearDecoder, RecoversAffineMap) {
  const std::size_t d = 6, size = 4, out = 3 * size * size;
  const Tensor m = random_tensor(1, {d, out}, 0.2f), b = random_tensor(2, {out}, 0.1f);
  const DecoderSpec spec = fit_linear_decoder(affine_pairs(m, b, 40, size), 0.0);
  EXPECT_LT(max_abs_diff(spec.matrix, m), 1e-4);
  EXPECT_LT(max_abs_diff(spec.bias, b), 1e-4);
  const Tensor e = random_tensor(9, {d});
  const Tensor got = decode_unclamped(spec, e);
  Tensor want = matmul(e.reshaped({1, d}), m);
  add_row_bias(want, b);
  EXPECT_LT(max_abs_diff(got.reshaped({out}), want.reshaped({out})), 1e-4);
}

TEST(LinearDecoder, RidgeShrinksWeights) {
  const std::size_t d = 5, size = 2;
  const Tensor m = random_tensor(3, {d, 12}), b({12});
  const auto pairs = affine_pairs(m, b, 30, size);
  EXPECT_LT(l2_norm(fit_linear_decoder(pairs, 100.0).matrix), l2_norm(fit_linear_decoder(pairs, 0.0).matrix));
}

TEST(LinearDecoder, SingularWithoutRidge) {
  const Tensor m = random_tensor(3, {8, 12}), b({12});
  const auto pairs = affine_pairs(m, b, 4, 2);  // fewer pairs than unknowns
  EXPECT_THROW(fit_linear_decoder(pairs, 0.0), SingularityError);
  EXPECT_NO_THROW(fit_linear_decoder(pairs, 1e-3));
  EXPECT_THROW(fit_linear_decoder({}, 1.0), ValidationError);
  EXPECT_THROW(fit_linear_decoder(pairs, -1.0), ValidationError);
}

TEST(LinearDecoder, DecodeClampsAndChecksWidth) {
  DecoderSpec spec;
  spec.image_size = 1;
  spec.matrix = Tensor({2, 3});
  spec.bias = Tensor::vector({-1.0f, 0.25f, 7.0f});
  const Tensor img = decode(spec, Tensor::vector({3.0f, 4.0f}));
  EXPECT_EQ(img.shape(), (Shape{3, 1, 1}));
  EXPECT_EQ(img[0], 0.0f);
  EXPECT_EQ(img[1], 0.25f);
  EXPECT_EQ(img[2], 1.0f);
  EXPECT_THROW(decode(spec, Tensor({5})), DimensionError);
  EXPECT_THROW(decode(DecoderSpec::external("/tmp"), Tensor({2})), UnsupportedError);
}

TEST(EmbeddingFile, RoundTripIsBitwise) {
  const Tensor e = random_tensor(5, {16});
  const std::map<std::string, std::string> meta{{"site", "L2.H1"}, {"alpha", "100"}};
  const EmbeddingFile f = decode_embedding(encode_embedding(e, meta));
  EXPECT_TRUE(bitwise_equal(f.embedding, e));
  EXPECT_EQ(f.metadata, meta);

  const std::string path = temp_path("round_trip.dsle");
  export_embedding(e, path);
  EXPECT_TRUE(bitwise_equal(import_embedding(path, 16), e));
  EXPECT_EQ(decode_embedding(read_file_bytes(path)).metadata.at("diffusion_steps"), "25");
}

TEST(EmbeddingFile, FormatErrors) {
  const auto good = encode_embedding(random_tensor(5, {8}));
  auto bad = good;
  bad[0] = 'X';
  try {
    decode_embedding(bad);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  bad = good;
  bad[4] = 9;  // version
  EXPECT_THROW(decode_embedding(bad), FormatError);
  for (std::size_t cut : {std::size_t(3), std::size_t(12), good.size() - 1}) {
    const std::vector<std::uint8_t> t(good.begin(), good.begin() + cut);
    EXPECT_THROW(decode_embedding(t), FormatError) << cut;
  }
  auto trailing = good;
  trailing.push_back(0);
  EXPECT_THROW(decode_embedding(trailing), FormatError);
  EXPECT_THROW(decode_embedding(good, 9), DimensionError);
  EXPECT_THROW(encode_embedding(Tensor({2, 2})), DimensionError);
  EXPECT_THROW(import_embedding(temp_path("does_not_exist.dsle")), IoError);
}
