#include <gtest/gtest.h>

#include "omgseg/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace omgseg;
using namespace omgseg::testing;

namespace {

TubeEntity tube(std::vector<BinaryMask> frames, int cls, int id, bool is_thing) {
  return {TubeMask(std::move(frames)), cls, id, is_thing};
}

// Two 4x4 things on a stuff background; the prediction swaps their tracks from frame 2.
std::pair<TubeEntitySet, TubeEntitySet> swap_case() {
  const int h = 8, w = 12;
  const auto a = rect(h, w, 0, 0, 4, 4), b = rect(h, w, 4, 6, 8, 10);
  BinaryMask bg(h, w);
  for (std::size_t i = 0; i < bg.size(); ++i) bg.set(i, !a[i] && !b[i]);
  TubeEntitySet gt{3, h, w, {tube({a, a, a}, 1, 1, true), tube({b, b, b}, 1, 2, true), tube({bg, bg, bg}, 0, 0, false)}};
  TubeEntitySet pred{3, h, w, {tube({a, a, b}, 1, 1, true), tube({b, b, a}, 1, 2, true), tube({bg, bg, bg}, 0, 0, false)}};
  return {pred, gt};
}

}  // namespace

TEST(Pq, HandComputedCase) {
  const auto top = rect(8, 8, 0, 0, 4, 8), bottom = rect(8, 8, 4, 0, 8, 8);
  const auto gt = entity_set(8, 8, {thing(top, 1, 1), stuff(bottom, 0)});
  const auto pred = entity_set(8, 8, {thing(rect(8, 8, 0, 0, 6, 8), 1, 1), stuff(rect(8, 8, 6, 0, 8, 8), 0)});
  // thing IoU 32/48 matches; stuff IoU exactly 0.5 does not
  const auto r = pq(pred, gt);
  EXPECT_NEAR(r.value, (2.0 / 3.0 + 0.0) / 2.0, 1e-12);
  EXPECT_EQ(r.tp, 1);
  EXPECT_EQ(r.fp, 1);
  EXPECT_EQ(r.fn, 1);
}

TEST(Pq, PerfectAndEmpty) {
  const auto gt = entity_set(8, 8, {thing(rect(8, 8, 0, 0, 4, 4), 1, 1), stuff(rect(8, 8, 4, 0, 8, 8), 0)});
  EXPECT_DOUBLE_EQ(pq(gt, gt).value, 1.0);
  EXPECT_DOUBLE_EQ(pq(entity_set(8, 8, {}), gt).value, 0.0);
  EXPECT_DOUBLE_EQ(pq(entity_set(8, 8, {}), entity_set(8, 8, {})).value, 1.0);
}

TEST(Pq, PredictionsOnVoidAreIgnored) {
  const auto gt = entity_set(8, 8, {thing(rect(8, 8, 0, 0, 4, 4), 1, 1)});
  const auto pred = entity_set(8, 8, {thing(rect(8, 8, 0, 0, 4, 4), 1, 1), thing(rect(8, 8, 4, 4, 8, 8), 2, 2)});
  EXPECT_DOUBLE_EQ(pq(pred, gt).value, 1.0);
}

TEST(Pq, MatchesOracleOnRandomCases) {
  Rng rng(11);
  int partial = 0;
  for (int i = 0; i < 200; ++i) {
    const auto [pred, gt] = oracle::random_panoptic_case(rng);
    const double want = oracle::pq(pred, gt);
    EXPECT_NEAR(pq(pred, gt).value, want, 1e-9) << "case " << i;
    partial += want > 0 && want < 1;
  }
  EXPECT_GT(partial, 100);
}

TEST(Miou, Examples) {
  const ClassVocabulary v({"bg", "a"}, {false, true});
  EXPECT_DOUBLE_EQ(miou({0, 1, 1, 0}, {0, 1, 1, 0}, v).value, 1.0);
  EXPECT_DOUBLE_EQ(miou({1, 1, 0, 0}, {0, 0, 1, 1}, v).value, 0.0);
  // class 1 is absent from the ground truth and does not enter the mean
  EXPECT_DOUBLE_EQ(miou({0, 0, 1, 1}, {0, 0, 0, 0}, v).value, 0.5);
  EXPECT_DOUBLE_EQ(miou({0, 0, 1, 1}, {0, 0, -1, -1}, v).value, 1.0);
  EXPECT_THROW(miou({0}, {0, 0}, v), DimensionMismatch);
}

TEST(Vpq, SingleWindowEqualsFramePqMean) {
  Rng rng(5);
  for (int i = 0; i < 30; ++i) {
    const auto [pred, gt] = oracle::random_video_case(rng, 4);
    double mean = 0;
    for (int t = 0; t < 4; ++t) {
      EntitySet p{gt.height, gt.width, {}}, g{gt.height, gt.width, {}};
      for (const auto& e : pred.entities)
        if (e.mask.frame(t).any()) p.entities.push_back({e.mask.frame(t), e.class_id, e.instance_id, e.is_thing});
      for (const auto& e : gt.entities)
        if (e.mask.frame(t).any()) g.entities.push_back({e.mask.frame(t), e.class_id, e.instance_id, e.is_thing});
      mean += pq(p, g).value / 4;
    }
    EXPECT_NEAR(vpq(pred, gt, {1}).value, mean, 1e-12);
  }
}

TEST(Vpq, IdentitySwapCostsLongWindows) {
  const auto [pred, gt] = swap_case();
  const auto r = vpq(pred, gt, {1, 2});
  EXPECT_DOUBLE_EQ(r.extra.at("vpq_1"), 1.0);
  // window [0,1] is perfect; in [1,2] neither thing matches and only stuff scores
  EXPECT_DOUBLE_EQ(r.extra.at("vpq_2"), 0.75);
  EXPECT_DOUBLE_EQ(r.value, 0.875);
  EXPECT_THROW(vpq(pred, gt, {4}), WindowTooLarge);
}

TEST(Vpq, MatchesOracleOnRandomCases) {
  Rng rng(17);
  int partial = 0;
  for (int i = 0; i < 100; ++i) {
    const auto [pred, gt] = oracle::random_video_case(rng, 4);
    const double want = oracle::vpq(pred, gt, {1, 2, 4});
    EXPECT_NEAR(vpq(pred, gt, {1, 2, 4}).value, want, 1e-9) << "case " << i;
    partial += want > 0 && want < 1;
  }
  EXPECT_GT(partial, 50);
}

TEST(IdSwitches, CountsTrackChanges) {
  const auto [pred, gt] = swap_case();
  EXPECT_EQ(id_switches(pred, gt), 2);
  EXPECT_EQ(id_switches(gt, gt), 0);
}

TEST(Boundary, InnerRing) {
  const auto b = boundary(rect(6, 6, 1, 1, 5, 5));
  EXPECT_EQ(b.area(), 12);
  EXPECT_FALSE(b.at(2, 2));
  EXPECT_TRUE(boundary(rect(4, 4, 0, 0, 4, 4)).at(0, 0));
  EXPECT_EQ(boundary_radius(480, 640), 7);
}

TEST(Jf, PerfectAndEmpty) {
  const TubeMask g({rect(16, 16, 2, 2, 10, 10)});
  EXPECT_DOUBLE_EQ(jf({g}, {g}).value, 1.0);
  EXPECT_DOUBLE_EQ(jf({TubeMask(1, 16, 16)}, {g}).value, 0.0);
}

TEST(Jf, DilatedSquareMatchesOracle) {
  const TubeMask g({rect(32, 32, 8, 8, 24, 24)});
  const TubeMask p({rect(32, 32, 7, 7, 25, 25)});
  const auto r = jf({p}, {g});
  EXPECT_NEAR(r.extra.at("j"), 256.0 / 324.0, 1e-12);
  // radius ceil(0.008 * 45.25) = 1 reaches only the straight sides, not the corners
  EXPECT_NEAR(r.value, oracle::jf({p}, {g}), 1e-12);
  EXPECT_LT(r.extra.at("f"), 1.0);
}

TEST(Jf, MatchesOracleOnRandomCases) {
  Rng rng(23);
  for (int i = 0; i < 60; ++i) {
    const int h = rng.uniform_int(8, 80), w = rng.uniform_int(8, 80);
    std::vector<TubeMask> p, g;
    for (int o = 0; o < 2; ++o) {
      std::vector<BinaryMask> pf, gf;
      for (int t = 0; t < 2; ++t) {
        const int y0 = rng.uniform_int(0, h / 2), x0 = rng.uniform_int(0, w / 2);
        const int y1 = rng.uniform_int(y0 + 1, h), x1 = rng.uniform_int(x0 + 1, w);
        gf.push_back(rect(h, w, y0, x0, y1, x1));
        auto m = rect(h, w, std::max(0, y0 + rng.uniform_int(-2, 2)), std::max(0, x0 + rng.uniform_int(-2, 2)), y1, x1);
        for (std::size_t k = 0; k < m.size(); ++k)
          if (rng.uniform() < 0.02) m.set(k, !m[k]);
        pf.push_back(m);
      }
      p.emplace_back(pf);
      g.emplace_back(gf);
    }
    EXPECT_NEAR(jf(p, g).value, oracle::jf(p, g), 1e-9) << "case " << i;
  }
}

TEST(MaskAp, PerfectAndWrongClass) {
  const auto m = rect(10, 10, 2, 2, 6, 6);
  EXPECT_DOUBLE_EQ(mask_ap({{{m, 1, 0.9}}}, {{{m, 1}}}).value, 1.0);
  EXPECT_DOUBLE_EQ(mask_ap({{{m, 2, 0.9}}}, {{{m, 1}}}).value, 0.0);
}

TEST(MaskAp, TwoInstancesHandComputed) {
  const int h = 20, w = 20;
  const auto g1 = rect(h, w, 0, 0, 5, 5);    // 25 px
  const auto g2 = rect(h, w, 10, 0, 15, 10);  // 50 px
  auto p1 = g1;
  p1.set(0, 0, false);  // IoU 24/25
  auto p2 = g2;
  for (int x = 0; x < 10; ++x) p2.set(10, x, false);
  for (int x = 0; x < 10; ++x) p2.set(11, x, false);
  p2.set(12, 0, false);  // IoU 29/50
  const std::vector<std::vector<ScoredInstance>> pred{{{p1, 1, 0.9}, {p2, 1, 0.8}}};
  const std::vector<std::vector<GtInstance>> gt{{{g1, 1}, {g2, 1}}};
  // both match at 0.50 and 0.55; above that the first detection alone covers recall 0.5
  const double expected = (2.0 + 8.0 * 51.0 / 101.0) / 10.0;
  EXPECT_NEAR(mask_ap(pred, gt).value, expected, 1e-12);
  EXPECT_NEAR(oracle::mask_ap(pred, gt), expected, 1e-12);
}

TEST(MaskAp, MatchesOracleOnRandomCases) {
  Rng rng(31);
  int partial = 0;
  for (int i = 0; i < 100; ++i) {
    const int images = rng.uniform_int(1, 3);
    std::vector<std::vector<ScoredInstance>> pred(static_cast<std::size_t>(images));
    std::vector<std::vector<GtInstance>> gt(static_cast<std::size_t>(images));
    for (int im = 0; im < images; ++im) {
      const int h = 12, w = 12;
      for (int k = rng.uniform_int(0, 3); k > 0; --k) {
        const int y0 = rng.uniform_int(0, 8), x0 = rng.uniform_int(0, 8);
        const int cls = rng.uniform_int(1, 2);
        const auto g = rect(h, w, y0, x0, y0 + rng.uniform_int(2, 4), x0 + rng.uniform_int(2, 4));
        gt[static_cast<std::size_t>(im)].push_back({g, cls});
        for (int d = rng.uniform_int(0, 2); d > 0; --d) {
          auto m = g;
          for (std::size_t q = 0; q < m.size(); ++q)
            if (rng.uniform() < 0.08) m.set(q, !m[q]);
          const int pc = rng.uniform() < 0.8 ? cls : rng.uniform_int(1, 3);
          // coarse scores make ties, exercising the stable order
          pred[static_cast<std::size_t>(im)].push_back({m, pc, rng.uniform_int(1, 5) / 5.0});
        }
      }
    }
    const double want = oracle::mask_ap(pred, gt);
    EXPECT_NEAR(mask_ap(pred, gt).value, want, 1e-9) << "case " << i;
    partial += want > 0 && want < 1;
  }
  EXPECT_GT(partial, 30);
}
