#pragma once

// Slow reference implementations of the metrics and random case generators,
// shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <vector>

#include "omgseg/core.hpp"
#include "omgseg/metrics.hpp"
#include "omgseg/rng.hpp"

namespace omgseg::oracle {

// Label grid: -1 void, otherwise an index into `classes`.
struct LabelGrid {
  int height = 0;
  int width = 0;
  std::vector<int> labels;
  std::vector<int> classes;
};

inline EntitySet to_entity_set(const LabelGrid& g) {
  EntitySet es{g.height, g.width, {}};
  for (std::size_t k = 0; k < g.classes.size(); ++k) {
    BinaryMask m(g.height, g.width);
    for (std::size_t i = 0; i < g.labels.size(); ++i) m.set(i, g.labels[i] == static_cast<int>(k));
    if (!m.any()) continue;
    const bool thing = g.classes[k] > 0;
    es.entities.push_back({m, g.classes[k], thing ? static_cast<int>(k) + 1 : 0, thing});
  }
  return es;
}

inline void paint(LabelGrid& g, int y0, int x0, int y1, int x1, int label) {
  for (int y = std::max(0, y0); y < std::min(g.height, y1); ++y)
    for (int x = std::max(0, x0); x < std::min(g.width, x1); ++x) g.labels[static_cast<std::size_t>(y * g.width + x)] = label;
}

// Stuff class 0 background, up to four thing rectangles of classes 1..3, a
// void patch, and a prediction made by shifting, relabeling and flipping.
inline std::pair<EntitySet, EntitySet> random_panoptic_case(Rng& rng, int max_side = 16) {
  const int h = rng.uniform_int(4, max_side), w = rng.uniform_int(4, max_side);
  LabelGrid gt{h, w, std::vector<int>(static_cast<std::size_t>(h * w), 0), {0}};
  LabelGrid pred = gt;
  const int n = rng.uniform_int(1, 4);
  for (int k = 0; k < n; ++k) {
    const int cls = rng.uniform_int(1, 3);
    const int y0 = rng.uniform_int(0, h - 2), x0 = rng.uniform_int(0, w - 2);
    const int y1 = rng.uniform_int(y0 + 1, h), x1 = rng.uniform_int(x0 + 1, w);
    gt.classes.push_back(cls);
    paint(gt, y0, x0, y1, x1, k + 1);
    const int dy = rng.uniform_int(-1, 1), dx = rng.uniform_int(-1, 1);
    pred.classes.push_back(rng.uniform() < 0.2 ? rng.uniform_int(1, 3) : cls);
    if (rng.uniform() < 0.85) paint(pred, y0 + dy, x0 + dx, y1 + dy, x1 + dx, k + 1);
  }
  if (rng.uniform() < 0.5) {
    const int y0 = rng.uniform_int(0, h - 1), x0 = rng.uniform_int(0, w - 1);
    paint(gt, y0, x0, y0 + rng.uniform_int(1, 3), x0 + rng.uniform_int(1, 3), -1);
  }
  for (auto& l : pred.labels)
    if (rng.uniform() < 0.05) l = rng.uniform_int(-1, static_cast<int>(pred.classes.size()) - 1);
  return {to_entity_set(pred), to_entity_set(gt)};
}

struct PqCounts {
  double iou = 0;
  int tp = 0, fp = 0, fn = 0;
};

// Segments are lists of per-frame masks; every pair's IoU is counted pixel by pixel.
struct Segment {
  std::vector<const BinaryMask*> frames;
  int class_id = 0;
  long area() const {
    long a = 0;
    for (const auto* f : frames) a += f->area();
    return a;
  }
};

inline double pq_segments(const std::vector<Segment>& pred, const std::vector<Segment>& gt) {
  auto covered_by_gt = [&](std::size_t f, std::size_t i) {
    for (const auto& g : gt)
      if ((*g.frames[f])[i]) return true;
    return false;
  };
  std::map<int, PqCounts> per;
  std::vector<bool> pred_hit(pred.size(), false);
  for (const auto& g : gt) {
    if (g.area() == 0) continue;
    bool hit = false;
    for (std::size_t p = 0; p < pred.size(); ++p) {
      if (pred[p].class_id != g.class_id || pred[p].area() == 0) continue;
      long inter = 0, uni = 0;
      for (std::size_t f = 0; f < g.frames.size(); ++f)
        for (std::size_t i = 0; i < g.frames[f]->size(); ++i) {
          const bool a = (*pred[p].frames[f])[i], b = (*g.frames[f])[i];
          inter += a && b;
          // prediction pixels on void do not count towards the union
          uni += b || (a && covered_by_gt(f, i));
        }
      const double iou = static_cast<double>(inter) / static_cast<double>(uni);
      if (iou > 0.5) {
        per[g.class_id].iou += iou;
        ++per[g.class_id].tp;
        pred_hit[p] = true;
        hit = true;
      }
    }
    if (!hit) ++per[g.class_id].fn;
  }
  for (std::size_t p = 0; p < pred.size(); ++p) {
    const long a = pred[p].area();
    if (pred_hit[p] || a == 0) continue;
    long on_void = 0;
    for (std::size_t f = 0; f < pred[p].frames.size(); ++f)
      for (std::size_t i = 0; i < pred[p].frames[f]->size(); ++i)
        on_void += (*pred[p].frames[f])[i] && !covered_by_gt(f, i);
    if (2 * on_void > a) continue;
    ++per[pred[p].class_id].fp;
  }
  if (per.empty()) return 1.0;
  double s = 0;
  for (const auto& [c, v] : per) s += v.iou / (v.tp + 0.5 * v.fp + 0.5 * v.fn);
  return s / static_cast<double>(per.size());
}

inline double pq(const EntitySet& pred, const EntitySet& gt) {
  std::vector<Segment> p, g;
  for (const auto& e : pred.entities) p.push_back({{&e.mask}, e.class_id});
  for (const auto& e : gt.entities) g.push_back({{&e.mask}, e.class_id});
  return pq_segments(p, g);
}

inline double vpq(const TubeEntitySet& pred, const TubeEntitySet& gt, const std::vector<int>& windows) {
  double total = 0;
  for (int k : windows) {
    double sum = 0;
    int count = 0;
    for (int s = 0; s + k <= gt.frames; ++s) {
      auto slice = [&](const TubeEntitySet& ts) {
        std::vector<Segment> out;
        for (const auto& e : ts.entities) {
          Segment seg{{}, e.class_id};
          for (int t = s; t < s + k; ++t) seg.frames.push_back(&e.mask.frame(t));
          out.push_back(seg);
        }
        return out;
      };
      sum += pq_segments(slice(pred), slice(gt));
      ++count;
    }
    total += sum / count;
  }
  return total / static_cast<double>(windows.size());
}

// Random clip cases: every frame is an independent panoptic case of one size.
inline std::pair<TubeEntitySet, TubeEntitySet> random_video_case(Rng& rng, int frames) {
  const int h = rng.uniform_int(4, 12), w = rng.uniform_int(4, 12);
  // labels persist over frames so tubes exist; each frame moves things by up to a pixel
  LabelGrid base{h, w, {}, {0}};
  const int n = rng.uniform_int(1, 3);
  struct Box {
    int y0, x0, y1, x1;
  };
  std::vector<Box> boxes;
  for (int k = 0; k < n; ++k) {
    base.classes.push_back(rng.uniform_int(1, 2));
    const int y0 = rng.uniform_int(0, h - 2), x0 = rng.uniform_int(0, w - 2);
    boxes.push_back({y0, x0, rng.uniform_int(y0 + 1, h), rng.uniform_int(x0 + 1, w)});
  }
  std::vector<int> pred_classes = base.classes;
  for (std::size_t k = 1; k < pred_classes.size(); ++k)
    if (rng.uniform() < 0.15) pred_classes[k] = rng.uniform_int(1, 2);
  const bool swap = n >= 2 && rng.uniform() < 0.3;
  const int swap_at = rng.uniform_int(1, std::max(1, frames - 1));
  std::vector<LabelGrid> gf, pf;
  for (int t = 0; t < frames; ++t) {
    LabelGrid g{h, w, std::vector<int>(static_cast<std::size_t>(h * w), 0), base.classes};
    LabelGrid p{h, w, std::vector<int>(static_cast<std::size_t>(h * w), 0), pred_classes};
    for (int k = 0; k < n; ++k) {
      const auto b = boxes[static_cast<std::size_t>(k)];
      paint(g, b.y0 + t, b.x0, b.y1 + t, b.x1, k + 1);
      int label = k + 1;
      if (swap && t >= swap_at && k < 2) label = 2 - k;
      const int dy = rng.uniform_int(-1, 1);
      paint(p, b.y0 + t + dy, b.x0, b.y1 + t + dy, b.x1, label);
    }
    if (rng.uniform() < 0.3) paint(g, 0, 0, 1, rng.uniform_int(1, w), -1);
    for (auto& l : p.labels)
      if (rng.uniform() < 0.04) l = rng.uniform_int(0, n);
    gf.push_back(g);
    pf.push_back(p);
  }
  auto tubes = [&](const std::vector<LabelGrid>& fs) {
    TubeEntitySet ts{frames, h, w, {}};
    for (std::size_t k = 0; k < fs.front().classes.size(); ++k) {
      std::vector<BinaryMask> masks;
      for (const auto& f : fs) {
        BinaryMask m(h, w);
        for (std::size_t i = 0; i < f.labels.size(); ++i) m.set(i, f.labels[i] == static_cast<int>(k));
        masks.push_back(m);
      }
      TubeEntity e{TubeMask(masks), fs.front().classes[k], 0, fs.front().classes[k] > 0};
      if (e.is_thing) e.instance_id = static_cast<int>(k);
      if (e.mask.area() > 0) ts.entities.push_back(std::move(e));
    }
    return ts;
  };
  return {tubes(pf), tubes(gf)};
}

inline BinaryMask inner_boundary(const BinaryMask& m) {
  BinaryMask eroded(m.height(), m.width());
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) {
      bool all = true;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          all = all && yy >= 0 && yy < m.height() && xx >= 0 && xx < m.width() && m.at(yy, xx);
        }
      eroded.set(y, x, all);
    }
  BinaryMask b(m.height(), m.width());
  for (std::size_t i = 0; i < m.size(); ++i) b.set(i, m[i] && !eroded[i]);
  return b;
}

// O(n^2) adjacency plus Kuhn's augmenting paths.
inline double boundary_f(const BinaryMask& pred, const BinaryMask& gt) {
  const auto bp = inner_boundary(pred), bg = inner_boundary(gt);
  std::vector<std::pair<int, int>> ps, gs;
  for (int y = 0; y < gt.height(); ++y)
    for (int x = 0; x < gt.width(); ++x) {
      if (bp.at(y, x)) ps.emplace_back(y, x);
      if (bg.at(y, x)) gs.emplace_back(y, x);
    }
  if (ps.empty() && gs.empty()) return 1.0;
  if (ps.empty() || gs.empty()) return 0.0;
  const double r = std::ceil(0.008 * std::sqrt(static_cast<double>(gt.height() * gt.height() + gt.width() * gt.width())));
  std::vector<std::vector<int>> adj(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (std::size_t j = 0; j < gs.size(); ++j) {
      const double dy = ps[i].first - gs[j].first, dx = ps[i].second - gs[j].second;
      if (std::sqrt(dy * dy + dx * dx) <= r + 1e-12) adj[i].push_back(static_cast<int>(j));
    }
  std::vector<int> owner(gs.size(), -1);
  std::vector<char> seen;
  std::function<bool(int)> augment = [&](int u) {
    for (int v : adj[static_cast<std::size_t>(u)]) {
      if (seen[static_cast<std::size_t>(v)]) continue;
      seen[static_cast<std::size_t>(v)] = 1;
      if (owner[static_cast<std::size_t>(v)] < 0 || augment(owner[static_cast<std::size_t>(v)])) {
        owner[static_cast<std::size_t>(v)] = u;
        return true;
      }
    }
    return false;
  };
  int matched = 0;
  for (std::size_t u = 0; u < ps.size(); ++u) {
    seen.assign(gs.size(), 0);
    matched += augment(static_cast<int>(u));
  }
  const double p = static_cast<double>(matched) / static_cast<double>(ps.size());
  const double rc = static_cast<double>(matched) / static_cast<double>(gs.size());
  return p + rc > 0 ? 2 * p * rc / (p + rc) : 0.0;
}

inline double jf(const std::vector<TubeMask>& pred, const std::vector<TubeMask>& gt) {
  if (gt.empty()) return 1.0;
  double j = 0, f = 0;
  for (std::size_t o = 0; o < gt.size(); ++o) {
    double jo = 0, fo = 0;
    for (int t = 0; t < gt[o].frames(); ++t) {
      jo += omgseg::mask_iou(pred[o].frame(t), gt[o].frame(t));
      fo += oracle::boundary_f(pred[o].frame(t), gt[o].frame(t));
    }
    j += jo / gt[o].frames();
    f += fo / gt[o].frames();
  }
  return 0.5 * (j + f) / static_cast<double>(gt.size());
}

// Every score-prefix is re-matched greedily from scratch; interpolated
// precision at recall r is the best precision over prefixes reaching r.
inline double mask_ap(const std::vector<std::vector<ScoredInstance>>& pred,
                      const std::vector<std::vector<GtInstance>>& gt) {
  std::map<int, int> npos;
  for (const auto& img : gt)
    for (const auto& g : img) ++npos[g.class_id];
  if (npos.empty()) return 0.0;
  double total = 0;
  for (const auto& [cls, n] : npos) {
    struct Det {
      double score;
      std::size_t img, k;
    };
    std::vector<Det> dets;
    for (std::size_t i = 0; i < pred.size(); ++i)
      for (std::size_t k = 0; k < pred[i].size(); ++k)
        if (pred[i][k].class_id == cls) dets.push_back({pred[i][k].score, i, k});
    std::stable_sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) { return a.score > b.score; });
    double cls_ap = 0;
    for (int ti = 0; ti < 10; ++ti) {
      const double thr = std::min(0.5 + 0.05 * ti, 1 - 1e-10);
      std::vector<std::pair<double, double>> pr;  // (recall, precision) per prefix
      for (std::size_t len = 1; len <= dets.size(); ++len) {
        std::map<std::pair<std::size_t, std::size_t>, bool> used;
        int tp = 0;
        for (std::size_t d = 0; d < len; ++d) {
          const auto& det = dets[d];
          double best = thr;
          long m = -1;
          for (std::size_t g = 0; g < gt[det.img].size(); ++g) {
            if (gt[det.img][g].class_id != cls || used[{det.img, g}]) continue;
            const double iou = mask_iou(pred[det.img][det.k].mask, gt[det.img][g].mask);
            if (iou >= best) {
              best = iou;
              m = static_cast<long>(g);
            }
          }
          if (m >= 0) {
            used[{det.img, static_cast<std::size_t>(m)}] = true;
            ++tp;
          }
        }
        pr.emplace_back(static_cast<double>(tp) / n, static_cast<double>(tp) / static_cast<double>(len));
      }
      double ap = 0;
      for (int ri = 0; ri <= 100; ++ri) {
        double best = 0;
        for (const auto& [rec, prec] : pr)
          if (rec >= ri / 100.0) best = std::max(best, prec);
        ap += best;
      }
      cls_ap += ap / 101.0;
    }
    total += cls_ap / 10.0;
  }
  return total / static_cast<double>(npos.size());
}

}  // namespace omgseg::oracle
