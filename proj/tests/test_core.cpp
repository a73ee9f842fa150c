#include <gtest/gtest.h>

#include <sstream>

#include "omgseg/core.hpp"
#include "test_util.hpp"

namespace omgseg {
namespace {

using testing::pattern;
using testing::random_mask;
using testing::rect;

TEST(Rle, EncodeExamples) {
  EXPECT_EQ(encode_rle(BinaryMask(2, 2)), "2 2 4");
  EXPECT_EQ(encode_rle(BinaryMask(2, 2, true)), "2 2 0 4");
  EXPECT_EQ(encode_rle(pattern(2, 2, {1, 0, 0, 1})), "2 2 0 1 2 1");
}

TEST(Rle, DecodeAllFalse) {
  const auto m = decode_rle("2 2 4");
  EXPECT_EQ(m.height(), 2);
  EXPECT_EQ(m.width(), 2);
  EXPECT_EQ(m.area(), 0);
}

TEST(Rle, DecodeRejectsBadRuns) {
  EXPECT_THROW(decode_rle("2 2 3"), MalformedRLE);
  EXPECT_THROW(decode_rle("2 2 5"), MalformedRLE);
  EXPECT_THROW(decode_rle("2 2"), MalformedRLE);
  EXPECT_THROW(decode_rle("2 x 4"), MalformedRLE);
  EXPECT_THROW(decode_rle("0 2 0"), MalformedRLE);
  EXPECT_THROW(decode_rle("2 2 -1 5"), MalformedRLE);
}

TEST(Rle, RandomRoundTrip) {
  Rng rng(11);
  for (int i = 0; i < 100; ++i) {
    const int h = rng.uniform_int(1, 24), w = rng.uniform_int(1, 24);
    const auto m = random_mask(h, w, rng, rng.uniform());
    ASSERT_EQ(decode_rle(encode_rle(m)), m) << "trial " << i;
  }
}

TEST(Rle, RunsAlternateAndSum) {
  Rng rng(3);
  const auto m = random_mask(9, 13, rng, 0.3);
  std::istringstream in(encode_rle(m));
  int h = 0, w = 0;
  in >> h >> w;
  long total = 0;
  bool fg = false;
  std::size_t pos = 0;
  long run = 0;
  while (in >> run) {
    for (long k = 0; k < run; ++k) ASSERT_EQ(m[pos++], fg);
    total += run;
    fg = !fg;
  }
  EXPECT_EQ(total, h * w);
}

TEST(MaskIou, Examples) {
  const auto a = rect(4, 4, 0, 0, 2, 4);  // upper half
  const auto b = rect(4, 4, 0, 0, 4, 2);  // left half
  EXPECT_DOUBLE_EQ(mask_iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(mask_iou(rect(4, 4, 0, 0, 1, 1), rect(4, 4, 3, 3, 4, 4)), 0.0);
  EXPECT_NEAR(mask_iou(a, b), 4.0 / 12.0, 1e-12);
  EXPECT_DOUBLE_EQ(mask_iou(BinaryMask(3, 3), BinaryMask(3, 3)), 1.0);
  EXPECT_THROW(mask_iou(BinaryMask(3, 3), BinaryMask(3, 4)), DimensionMismatch);
}

TEST(MaskIou, SymmetricAndMonotone) {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    auto a = random_mask(8, 8, rng), b = random_mask(8, 8, rng);
    EXPECT_DOUBLE_EQ(mask_iou(a, b), mask_iou(b, a));
    const double before = mask_iou(a, b);
    const auto p = static_cast<std::size_t>(rng.uniform_int(0, 63));
    a.set(p, true);
    b.set(p, true);
    EXPECT_GE(mask_iou(a, b), before - 1e-15);
  }
}

TEST(TubeIou, CountsAllFrames) {
  TubeMask a({rect(4, 4, 0, 0, 2, 2), rect(4, 4, 0, 0, 2, 2)});
  TubeMask b({rect(4, 4, 0, 0, 2, 2), BinaryMask(4, 4)});
  EXPECT_DOUBLE_EQ(tube_iou(a, b), 0.5);
  EXPECT_THROW(tube_iou(a, TubeMask({rect(4, 4, 0, 0, 1, 1)})), DimensionMismatch);
}

TEST(ValidatePanoptic, Examples) {
  using Kind = PanopticViolation::Kind;
  const auto es = testing::entity_set(4, 4, {testing::stuff(rect(4, 4, 0, 0, 2, 4), 0),
                                             testing::thing(rect(4, 4, 2, 0, 4, 4), 1, 1)});
  EXPECT_TRUE(validate_panoptic(es).empty());

  const auto overlap = testing::entity_set(4, 4, {testing::stuff(rect(4, 4, 0, 0, 3, 4), 0),
                                                  testing::thing(rect(4, 4, 2, 0, 4, 4), 1, 1)});
  const auto v = validate_panoptic(overlap);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0], (PanopticViolation{Kind::overlap, 0, 1}));

  auto bad_stuff = es;
  bad_stuff.entities[0].instance_id = 3;
  const auto s = validate_panoptic(bad_stuff);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].kind, Kind::stuff_id);

  auto dup = testing::entity_set(4, 4, {testing::thing(rect(4, 4, 0, 0, 1, 1), 1, 2),
                                        testing::thing(rect(4, 4, 3, 3, 4, 4), 1, 2)});
  ASSERT_EQ(validate_panoptic(dup).size(), 1u);
  EXPECT_EQ(validate_panoptic(dup)[0].kind, Kind::duplicate_thing_id);
}

TEST(VisualPrompt, ArityAndRange) {
  EXPECT_EQ(VisualPrompt::point(0.2, 0.3).coords().size(), 2u);
  EXPECT_EQ(VisualPrompt::box(0.1, 0.1, 0.5, 0.6).coords().size(), 4u);
  EXPECT_THROW(VisualPrompt(PromptKind::box, {0.5, 0.1, 0.4, 0.6}), CoordOutOfRange);
  EXPECT_THROW(VisualPrompt(PromptKind::point_positive, {0.1, 0.2, 0.3}), CoordOutOfRange);
  EXPECT_THROW(VisualPrompt::point(1.2, 0.3), CoordOutOfRange);
}

TEST(ClassVocabulary, RejectsDuplicates) {
  EXPECT_THROW(ClassVocabulary({"a", "a"}, {true, true}), DuplicateClassName);
  const ClassVocabulary v({"a", "b"}, {true, false});
  EXPECT_EQ(v.index_of("b"), 1);
  EXPECT_FALSE(v.index_of("c"));
}

TEST(PanopticMap, PartitionViolations) {
  PanopticMap pm{2, 2, {0, 1, 1, 2}, {{1, 0, 0.9}, {2, 1, 0.8}}};
  EXPECT_TRUE(pm.partition_violations().empty());
  pm.segment_ids[0] = 3;
  EXPECT_FALSE(pm.partition_violations().empty());
  pm.segment_ids[0] = 0;
  pm.segments.push_back({1, 0, 0.5});
  EXPECT_FALSE(pm.partition_violations().empty());
}

TEST(CoreJson, RoundTrips) {
  const auto es = testing::entity_set(4, 4, {testing::stuff(rect(4, 4, 0, 0, 2, 4), 0),
                                             testing::thing(rect(4, 4, 2, 0, 4, 4), 1, 1)});
  EXPECT_EQ(nlohmann::json(es).get<EntitySet>(), es);
  const auto ts = to_tubes(es);
  EXPECT_EQ(nlohmann::json(ts).get<TubeEntitySet>(), ts);
  const auto p = VisualPrompt::box(0.1, 0.2, 0.3, 0.4);
  EXPECT_EQ(nlohmann::json(p).get<VisualPrompt>(), p);
  const ClassVocabulary v({"a", "b"}, {true, false});
  EXPECT_EQ(nlohmann::json(v).get<ClassVocabulary>(), v);
  const PanopticMap pm{2, 2, {0, 1, 1, 2}, {{1, 0, 0.5}, {2, 1, 0.25}}};
  EXPECT_EQ(nlohmann::json(pm).get<PanopticMap>(), pm);
  EXPECT_EQ(nlohmann::json(rect(3, 3, 0, 0, 1, 1)).get<std::string>(), "3 3 0 1 8");
}

}  // namespace
}  // namespace omgseg
