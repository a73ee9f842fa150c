#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "omgseg/decoder.hpp"
#include "omgseg/synthdata.hpp"
#include "test_util.hpp"

namespace omgseg {
namespace {

ModelConfig tiny(std::uint64_t seed = 7) {
  ModelConfig c;
  c.dim = 16;
  c.num_queries = 5;
  c.num_layers = 3;
  c.heads = 2;
  c.pixel_ffn = 16;
  c.decoder_ffn = 24;
  c.backbone_channels = {16, 12, 8};
  c.seed = seed;
  return c;
}

Image noise_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w);
  for (auto& v : img.rgb) v = static_cast<float>(rng.uniform());
  return img;
}

class DecoderTest : public ::testing::Test {
 protected:
  DecoderTest() : model(tiny()), image(noise_image(64, 64, 1)) {
    vocab = ClassVocabulary({"red circle", "blue square", "sky"}, {true, true, false});
    rows = model.embeddings(vocab).class_rows;
  }

  PredictionSet run(const std::vector<VisualPrompt>& prompts, DecodeMode mode, const DecoderOptions& o = {}) {
    return model.forward({image}, prompts, rows, mode, o);
  }

  OmgSegModel model;
  Image image;
  ClassVocabulary vocab;
  ad::Matrix rows;
};

void expect_rows_equal(const PredictionSet& a, int ra, const PredictionSet& b, int rb) {
  ASSERT_EQ(a.layers.size(), b.layers.size());
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    EXPECT_EQ(a.layers[l].mask_logits.row(ra), b.layers[l].mask_logits.row(rb)) << "layer " << l;
    EXPECT_EQ(a.layers[l].class_logits.row(ra), b.layers[l].class_logits.row(rb)) << "layer " << l;
    EXPECT_EQ(a.layers[l].queries.row(ra), b.layers[l].queries.row(rb)) << "layer " << l;
  }
}

TEST_F(DecoderTest, DeepSupervisionSlots) {
  const auto p = run({}, DecodeMode::image);
  EXPECT_EQ(p.layers.size(), 4u);
  EXPECT_EQ(p.num_semantic, 5);
  EXPECT_EQ(p.num_location, 0);
  EXPECT_EQ(p.final_layer().class_logits.cols(), vocab.size() + 1);
  const OmgSegModel full(ModelConfig{});
  const auto q = full.forward({noise_image(128, 128, 2)}, {}, full.embeddings(vocab).class_rows, DecodeMode::image);
  EXPECT_EQ(q.layers.size(), 10u);
  EXPECT_EQ(q.grid_height, 16);
  EXPECT_EQ(q.grid_width, 16);
  EXPECT_EQ(q.final_layer().mask_logits.cols(), 256);
}

TEST_F(DecoderTest, PointAndBoxEncodeToQueryShape) {
  ad::Tape tape(false);
  const auto enc = encode_prompts(tape, model.params(), model.positions(),
                                  {VisualPrompt::point(0.2, 0.4), VisualPrompt::box(0.1, 0.1, 0.6, 0.5)});
  EXPECT_EQ(enc.content.rows(), 2);
  EXPECT_EQ(enc.content.cols(), model.config().dim);
  EXPECT_EQ(enc.anchors.cols(), model.config().dim);
  const auto none = encode_prompts(tape, model.params(), model.positions(), {});
  EXPECT_EQ(none.content.rows(), 0);
}

TEST_F(DecoderTest, InvalidPromptJsonRejected) {
  const auto j = nlohmann::json{{"kind", "point_positive"}, {"coords", {1.5, 0.2}}};
  EXPECT_THROW(j.get<VisualPrompt>(), CoordOutOfRange);
}

TEST_F(DecoderTest, ModeContracts) {
  EXPECT_THROW(run({}, DecodeMode::interactive), ShapeError);
  EXPECT_THROW(run({VisualPrompt::point(0.5, 0.5)}, DecodeMode::image), ShapeError);
  EXPECT_THROW(model.forward({image, image}, {}, rows, DecodeMode::image), ShapeError);
  EXPECT_THROW(model.forward({image}, {}, ad::Matrix::Ones(2, 3), DecodeMode::image), ShapeError);
}

TEST_F(DecoderTest, JointWithoutPromptsIsSemanticOnly) {
  const auto a = run({}, DecodeMode::image), b = run({}, DecodeMode::joint);
  for (int r = 0; r < a.num_semantic; ++r) expect_rows_equal(a, r, b, r);
}

TEST_F(DecoderTest, AddingPromptLeavesOthersUnchanged) {
  const auto p1 = VisualPrompt::point(0.2, 0.2);
  const auto p2 = VisualPrompt::box(0.55, 0.55, 0.95, 0.9);
  const auto one = run({p1}, DecodeMode::interactive);
  const auto two = run({p1, p2}, DecodeMode::interactive);
  const auto rev = run({p2, p1}, DecodeMode::interactive);
  expect_rows_equal(one, 0, two, 0);
  expect_rows_equal(one, 0, rev, 1);
  const auto single2 = run({p2}, DecodeMode::interactive);
  expect_rows_equal(single2, 0, two, 1);
}

TEST_F(DecoderTest, SamePromptTwiceGivesSameRows) {
  const auto p = VisualPrompt::point(0.4, 0.7);
  const auto two = run({p, p}, DecodeMode::interactive);
  expect_rows_equal(two, 0, two, 1);
}

TEST_F(DecoderTest, SharedSelfAttentionBreaksIndependence) {
  DecoderOptions mixed;
  mixed.isolate_location_queries = false;
  const auto p1 = VisualPrompt::point(0.2, 0.2);
  const auto p2 = VisualPrompt::box(0.55, 0.55, 0.95, 0.9);
  const auto one = run({p1}, DecodeMode::interactive, mixed);
  const auto two = run({p1, p2}, DecodeMode::interactive, mixed);
  EXPECT_NE(one.final_layer().mask_logits.row(0), two.final_layer().mask_logits.row(0));
}

TEST_F(DecoderTest, JointMatchesInteractiveForLocationQueries) {
  const std::vector<VisualPrompt> prompts{VisualPrompt::point(0.3, 0.6), VisualPrompt::box(0.1, 0.2, 0.5, 0.5)};
  const auto inter = run(prompts, DecodeMode::interactive);
  const auto joint = run(prompts, DecodeMode::joint);
  ASSERT_EQ(joint.num_semantic, 5);
  for (int i = 0; i < 2; ++i) expect_rows_equal(inter, i, joint, joint.num_semantic + i);
  const auto image = run({}, DecodeMode::image);
  for (int r = 0; r < 5; ++r) expect_rows_equal(image, r, joint, r);
}

TEST_F(DecoderTest, SingleFrameClipMatchesImage) {
  const auto a = run({}, DecodeMode::image), b = run({}, DecodeMode::video);
  ASSERT_EQ(b.frames, 1);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    EXPECT_EQ(a.layers[l].mask_logits, b.layers[l].mask_logits);
    EXPECT_EQ(a.layers[l].class_logits, b.layers[l].class_logits);
  }
}

TEST_F(DecoderTest, ClipMasksStackFrames) {
  const auto p = model.forward({image, noise_image(64, 64, 3)}, {}, rows, DecodeMode::video);
  EXPECT_EQ(p.frames, 2);
  EXPECT_EQ(p.final_layer().mask_logits.cols(), 2 * 8 * 8);
}

TEST_F(DecoderTest, ClassRowScaleLeavesArgmax) {
  const auto a = run({}, DecodeMode::image);
  const auto b = model.forward({image}, {}, ad::Matrix(rows * 2.0), DecodeMode::image);
  const auto& la = a.final_layer().class_logits;
  const auto& lb = b.final_layer().class_logits;
  for (Eigen::Index r = 0; r < la.rows(); ++r) {
    Eigen::Index ia = 0, ib = 0;
    la.row(r).maxCoeff(&ia);
    lb.row(r).maxCoeff(&ib);
    EXPECT_EQ(ia, ib);
    EXPECT_LT((la.row(r) - lb.row(r)).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST_F(DecoderTest, SemanticQueryPermutationEquivariance) {
  const auto base = run({}, DecodeMode::image);
  const std::vector<int> perm{3, 0, 4, 1, 2};
  for (const char* name : {"queries.content", "queries.pos"}) {
    auto& v = model.params().get(name).value;
    ad::Matrix p(v.rows(), v.cols());
    for (int i = 0; i < 5; ++i) p.row(i) = v.row(perm[i]);
    v = p;
  }
  const auto moved = run({}, DecodeMode::image);
  for (std::size_t l = 0; l < base.layers.size(); ++l)
    for (int i = 0; i < 5; ++i) {
      EXPECT_LT((moved.layers[l].mask_logits.row(i) - base.layers[l].mask_logits.row(perm[i])).cwiseAbs().maxCoeff(),
                1e-9);
      EXPECT_LT(
          (moved.layers[l].class_logits.row(i) - base.layers[l].class_logits.row(perm[i])).cwiseAbs().maxCoeff(),
          1e-9);
    }
}

TEST_F(DecoderTest, ModesReadTheSameDecoderTensors) {
  std::set<std::string> shared;
  for (const auto& n : model.decoder_parameter_names(DecodeMode::image))
    if (n.starts_with("decoder.") || n.starts_with("head.")) shared.insert(n);
  EXPECT_FALSE(shared.empty());
  for (auto mode : {DecodeMode::video, DecodeMode::interactive, DecodeMode::joint}) {
    std::set<std::string> s;
    for (const auto& n : model.decoder_parameter_names(mode))
      if (n.starts_with("decoder.") || n.starts_with("head.")) s.insert(n);
    EXPECT_EQ(s, shared) << to_string(mode);
  }
  // the tape reads the stored tensors in place for every mode
  for (auto mode : {DecodeMode::image, DecodeMode::video, DecodeMode::interactive}) {
    ad::Tape tape;
    const auto prompts =
        mode == DecodeMode::interactive ? std::vector<VisualPrompt>{VisualPrompt::point(0.5, 0.5)} : std::vector<VisualPrompt>{};
    const auto g = model.build(tape, model.extract({image}), prompts, rows, mode);
    tape.backward(ad::sum(g.layers.back().mask_logits));
    const auto& w = model.params().get("decoder.l2.ffn2.weight");
    ASSERT_NE(tape.param_grad(w), nullptr) << to_string(mode);
  }
}

TEST(DecoderParams, SharedSmallerThanDecoupled) {
  for (const auto& cfg : {ModelConfig{}, tiny()}) {
    const auto r = params_report(cfg);
    EXPECT_LT(r.shared_total, r.decoupled_total);
    EXPECT_EQ(r.decoupled_total - r.shared_total, 2 * decoder_and_head_closed_form(cfg));
    const OmgSegModel m(cfg);
    EXPECT_EQ(m.params().count("decoder.") + m.params().count("head."), decoder_and_head_closed_form(cfg));
    EXPECT_EQ(r.shared_total, m.params().count());
  }
}

TEST(DecoderFinite, RandomInputsOverSeeds) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const OmgSegModel model(tiny(seed));
    Rng rng(seed);
    const auto vocab = full_vocabulary(ShapeWorldConfig{});
    const auto rows = model.embeddings(vocab).class_rows;
    const double x = rng.uniform(), y = rng.uniform();
    const std::vector<VisualPrompt> prompts{VisualPrompt::point(x, y),
                                            VisualPrompt::box(0.5 * x, 0.5 * y, 0.5 + 0.5 * x, 0.5 + 0.5 * y)};
    const auto p = model.forward({noise_image(32, 32, seed)}, prompts, rows, DecodeMode::joint);
    for (const auto& l : p.layers) {
      ASSERT_TRUE(l.mask_logits.allFinite()) << "seed " << seed;
      ASSERT_TRUE(l.class_logits.allFinite()) << "seed " << seed;
      ASSERT_TRUE(l.queries.allFinite()) << "seed " << seed;
    }
  }
}

}  // namespace
}  // namespace omgseg
