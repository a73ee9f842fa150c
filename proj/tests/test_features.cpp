#include <gtest/gtest.h>

#include "omgseg/decoder.hpp"
#include "omgseg/features.hpp"
#include "omgseg/synthdata.hpp"
#include "test_util.hpp"

namespace omgseg {
namespace {

ModelConfig tiny(int dim = 8) {
  ModelConfig c;
  c.dim = dim;
  c.num_queries = 4;
  c.num_layers = 3;
  c.heads = 2;
  c.pixel_ffn = 16;
  c.decoder_ffn = 16;
  c.backbone_channels = {16, 12, 8};
  return c;
}

Image noise_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w);
  for (auto& v : img.rgb) v = static_cast<float>(rng.uniform());
  return img;
}

TEST(Backbone, LevelSizes) {
  const OmgSegModel model(ModelConfig{});
  const auto f = model.extract({noise_image(128, 128, 1)});
  EXPECT_EQ(f.levels[0].height, 4);
  EXPECT_EQ(f.levels[0].width, 4);
  EXPECT_EQ(f.levels[1].height, 8);
  EXPECT_EQ(f.levels[2].height, 16);
  EXPECT_EQ(f.levels[2].width, 16);
  EXPECT_EQ(f.levels[0].data.cols(), 128);
  EXPECT_EQ(f.levels[1].data.cols(), 64);
  EXPECT_EQ(f.levels[2].data.cols(), 32);
}

TEST(Backbone, PadsToMultipleOf32) {
  const OmgSegModel model(tiny());
  const auto f = model.extract({noise_image(40, 70, 1)});
  EXPECT_EQ(f.input_height, 40);
  EXPECT_EQ(f.levels[2].height, 8);
  EXPECT_EQ(f.levels[2].width, 12);
}

TEST(Backbone, DeterministicAndReadOnly) {
  const OmgSegModel model(tiny());
  const auto before = model.params().checksum(FrozenBackbone::kPrefix);
  const Clip clip{noise_image(64, 64, 2)};
  const auto a = model.extract(clip), b = model.extract(clip);
  for (int j = 0; j < 3; ++j) EXPECT_EQ(a.levels[j].data, b.levels[j].data);
  EXPECT_EQ(model.params().checksum(FrozenBackbone::kPrefix), before);
  for (const auto* p : model.params().all())
    if (p->name.rfind(FrozenBackbone::kPrefix, 0) == 0) EXPECT_FALSE(p->trainable) << p->name;
}

TEST(Backbone, EmptyInputRejected) {
  const OmgSegModel model(tiny());
  EXPECT_THROW(model.extract({}), ShapeError);
  EXPECT_THROW(model.extract({Image(0, 0)}), ShapeError);
}

TEST(Backbone, FramesExtractedIndependently) {
  const OmgSegModel model(tiny());
  const auto a = noise_image(64, 64, 3), b = noise_image(64, 64, 4);
  const auto clip = model.extract({a, b});
  const auto fb = model.extract({b});
  const auto& lv = clip.levels[2];
  const auto cells = lv.height * lv.width;
  EXPECT_EQ(ad::Matrix(lv.data.bottomRows(cells)), fb.levels[2].data);
}

TEST(PixelDecoder, ZeroInitResidualsPassProjectedInput) {
  const OmgSegModel model(tiny(8));
  const auto frozen = model.extract({noise_image(64, 64, 5)});
  const auto fused = model.fuse(frozen);
  const auto& store = model.params();
  for (int j = 0; j < 3; ++j) {
    const auto name = std::string(PixelDecoder::kPrefix) + "proj" + std::to_string(j + 1);
    ad::Matrix expect = frozen.levels[j].data * store.get(name + ".weight").value;
    expect.rowwise() += store.get(name + ".bias").value.row(0);
    expect += fused.positions[j];
    expect.rowwise() += store.get(std::string(PixelDecoder::kPrefix) + "level_embed").value.row(j);
    EXPECT_LT((fused.levels[j].data - expect).cwiseAbs().maxCoeff(), 1e-12) << "level " << j;
    EXPECT_EQ(fused.levels[j].data.cols(), 8);
  }
}

TEST(PixelDecoder, TokenCountOverClip) {
  const OmgSegModel model(ModelConfig{});
  const auto frozen = model.extract({noise_image(128, 128, 6), noise_image(128, 128, 7)});
  ad::Tape tape(false);
  PixelDecoder pd(model.config());
  const auto g = pd.fuse(tape, model.params(), model.positions(), frozen);
  EXPECT_EQ(g.tokens, 2u * (4 * 4 + 8 * 8 + 16 * 16));
  for (int j = 0; j < 3; ++j) EXPECT_EQ(g.levels[j].cols(), 64);
}

TEST(PixelDecoder, AttentionMixesLevels) {
  OmgSegModel model(tiny(8));
  auto& o = model.params().get("pixel.r0.o.weight").value;
  Rng rng(1);
  for (Eigen::Index k = 0; k < o.size(); ++k) o.data()[k] = rng.normal();
  auto frozen = model.extract({noise_image(64, 64, 8)});
  const auto base = model.fuse(frozen);
  frozen.levels[0].data.array() += 1.0;
  const auto moved = model.fuse(frozen);
  EXPECT_GT((moved.levels[2].data - base.levels[2].data).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(ClassEmbeddings, UnitRowsAndDeterministic) {
  const HashTextEncoder enc(64, 3);
  const auto vocab = full_vocabulary(ShapeWorldConfig{});
  const auto a = class_embeddings(vocab, enc), b = class_embeddings(vocab, enc);
  EXPECT_EQ(a.class_rows, b.class_rows);
  for (Eigen::Index i = 0; i < a.class_rows.rows(); ++i) EXPECT_NEAR(a.class_rows.row(i).norm(), 1.0, 1e-12);
  EXPECT_EQ(a.rows(), vocab.size() + 1);
}

TEST(ClassEmbeddings, DistinctNamesDiffer) {
  const HashTextEncoder enc(64, 0);
  Rng rng(9);
  const std::vector<std::string> words{"red", "green", "blue", "circle", "square", "triangle", "sky",
                                       "ground", "cat", "dog", "tree", "car", "road", "wall"};
  int checked = 0;
  while (checked < 100) {
    const auto& a = words[static_cast<std::size_t>(rng.uniform_int(0, 13))];
    const auto& b = words[static_cast<std::size_t>(rng.uniform_int(0, 13))];
    const auto& c = words[static_cast<std::size_t>(rng.uniform_int(0, 13))];
    const std::string n1 = a + " " + b, n2 = a + " " + c;
    if (b == c) continue;
    const auto e = class_embeddings(ClassVocabulary({n1, n2}, {true, true}), enc);
    EXPECT_LT(e.class_rows.row(0).dot(e.class_rows.row(1)), 1.0 - 1e-9) << n1 << " / " << n2;
    ++checked;
  }
}

TEST(ClassEmbeddings, RejectsEmptyVocabulary) {
  const HashTextEncoder enc(16, 0);
  EXPECT_THROW(class_embeddings(ClassVocabulary{}, enc), ConfigError);
}

TEST(TextEncoder, NormalizesCaseAndPunctuation) {
  const HashTextEncoder enc(32, 1);
  EXPECT_EQ(enc.encode("Red Circle."), enc.encode("red circle"));
  EXPECT_NEAR(enc.encode("a b c").norm(), 1.0, 1e-12);
}

TEST(PositionEncoder, TimeTermZeroAtStart) {
  const PositionEncoder pos(64, 3.0, 1);
  EXPECT_EQ(pos.encode_t(0), Eigen::RowVectorXd::Zero(64));
  EXPECT_GT(pos.encode_t(1).cwiseAbs().maxCoeff(), 1e-3);
  const auto one = pos.encode_grid(1, 4, 4, 8, 32, 32);
  const auto two = pos.encode_grid(2, 4, 4, 8, 32, 32);
  EXPECT_EQ(ad::Matrix(two.topRows(16)), one);
  EXPECT_NE(ad::Matrix(two.bottomRows(16)), one);
}

TEST(PositionEncoder, DistantPointsDiffer) {
  const OmgSegModel model(ModelConfig{});
  const auto a = model.positions().encode_xy(0.25, 0.25), b = model.positions().encode_xy(0.75, 0.75);
  ASSERT_EQ(a.size(), 64);
  int differ = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) differ += std::abs(a(i) - b(i)) > 1e-3;
  EXPECT_GE(differ, 32);
}

TEST(PoolLevel3, AveragesCoveredCells) {
  const OmgSegModel model(tiny());
  const auto f = model.extract({noise_image(32, 32, 10)});
  const auto mask = testing::rect(32, 32, 0, 0, 8, 16);  // cells (0,0) and (0,1)
  const auto pooled = pool_level3(f, mask);
  ASSERT_TRUE(pooled);
  const auto& d = f.levels[2].data;
  EXPECT_LT((*pooled - 0.5 * (d.row(0) + d.row(1))).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_FALSE(pool_level3(f, BinaryMask(32, 32)));
  EXPECT_THROW(pool_level3(f, BinaryMask(16, 16)), DimensionMismatch);
}

TEST(VisualProjection, RidgeFitRecoversLinearMap) {
  OmgSegModel model(tiny());
  const HashTextEncoder enc(8, 0);
  const auto embeds = class_embeddings(ClassVocabulary({"a", "b", "c"}, {true, true, true}), enc);
  std::vector<AlignmentExample> ex;
  Rng rng(2);
  for (int i = 0; i < 60; ++i) {
    Eigen::RowVectorXd x = Eigen::RowVectorXd::Zero(8);
    const int k = i % 3;
    x(k) = 1.0;
    for (int c = 0; c < 8; ++c) x(c) += 0.01 * rng.normal();
    ex.push_back({x, k});
  }
  const auto before = model.params().checksum("pixel.");
  fit_visual_projection(model.params(), ex, embeds, 1e-6);
  EXPECT_EQ(model.params().checksum("pixel."), before);
  const FrozenBackbone bb(model.config());
  for (int k = 0; k < 3; ++k) {
    Eigen::RowVectorXd x = Eigen::RowVectorXd::Zero(8);
    x(k) = 1.0;
    const auto y = bb.project(model.params(), x);
    Eigen::Index best = 0;
    (embeds.class_rows * y.transpose()).maxCoeff(&best);
    EXPECT_EQ(best, k);
  }
  EXPECT_THROW(fit_visual_projection(model.params(), {}, embeds), DataError);
}

TEST(ModelConfig, JsonValidation) {
  auto j = nlohmann::json(ModelConfig{});
  EXPECT_EQ(nlohmann::json(j.get<ModelConfig>()), j);
  j["dim"] = 7;
  EXPECT_THROW(j.get<ModelConfig>(), ConfigError);
  j = nlohmann::json(ModelConfig{});
  j["heads"] = 5;
  EXPECT_THROW(j.get<ModelConfig>(), ConfigError);
  j = nlohmann::json(ModelConfig{});
  j["unknown"] = true;
  EXPECT_THROW(j.get<ModelConfig>(), ConfigError);
}

}  // namespace
}  // namespace omgseg
