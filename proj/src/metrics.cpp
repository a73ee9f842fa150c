#include "omgseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <queue>
#include <tuple>
#include <unordered_map>

namespace omgseg {

void to_json(nlohmann::json& j, const MetricReport& r) {
  nlohmann::json pc = nlohmann::json::object();
  for (const auto& [c, v] : r.per_class) pc[std::to_string(c)] = v;
  j = {{"name", r.name}, {"value", r.value}, {"per_class", pc}, {"tp", r.tp}, {"fp", r.fp}, {"fn", r.fn},
       {"extra", r.extra}};
}

namespace {

struct ClassStats {
  int tp = 0, fp = 0, fn = 0;
  double iou = 0;
};

// Segments given as label arrays over a shared pixel space (-1 = none).
struct Labeled {
  std::vector<int> labels;
  std::vector<int> classes;
};

void stamp(Labeled& l, const BinaryMask& m, std::size_t offset) {
  const int id = static_cast<int>(l.classes.size()) - 1;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!m[i]) continue;
    int& slot = l.labels[offset + i];
    if (slot >= 0) throw DataError("overlapping segments");
    slot = id;
  }
}

std::map<int, ClassStats> pq_stats(const Labeled& pred, const Labeled& gt) {
  const std::size_t np = pred.classes.size(), ng = gt.classes.size();
  std::vector<long> pa(np, 0), ga(ng, 0), pvoid(np, 0);
  std::map<std::pair<int, int>, long> inter;
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const int p = pred.labels[i], g = gt.labels[i];
    if (p >= 0) ++pa[static_cast<std::size_t>(p)];
    if (g >= 0) ++ga[static_cast<std::size_t>(g)];
    if (p >= 0 && g < 0) ++pvoid[static_cast<std::size_t>(p)];
    if (p >= 0 && g >= 0) ++inter[{p, g}];
  }
  std::map<int, ClassStats> stats;
  std::vector<bool> pm(np, false), gm(ng, false);
  for (const auto& [key, n] : inter) {
    const auto [p, g] = key;
    if (pred.classes[static_cast<std::size_t>(p)] != gt.classes[static_cast<std::size_t>(g)]) continue;
    const double uni = static_cast<double>(pa[static_cast<std::size_t>(p)] + ga[static_cast<std::size_t>(g)] - n -
                                           pvoid[static_cast<std::size_t>(p)]);
    const double iou = static_cast<double>(n) / uni;
    if (iou > 0.5) {
      auto& s = stats[gt.classes[static_cast<std::size_t>(g)]];
      ++s.tp;
      s.iou += iou;
      pm[static_cast<std::size_t>(p)] = true;
      gm[static_cast<std::size_t>(g)] = true;
    }
  }
  for (std::size_t g = 0; g < ng; ++g)
    if (!gm[g] && ga[g] > 0) ++stats[gt.classes[g]].fn;
  for (std::size_t p = 0; p < np; ++p) {
    if (pm[p] || pa[p] == 0) continue;
    if (static_cast<double>(pvoid[p]) / static_cast<double>(pa[p]) > 0.5) continue;
    ++stats[pred.classes[p]].fp;
  }
  return stats;
}

MetricReport pq_report(const std::map<int, ClassStats>& stats) {
  MetricReport r;
  r.name = "pq";
  double sum = 0, sq = 0, rq = 0;
  int n = 0;
  for (const auto& [c, s] : stats) {
    const double denom = s.tp + 0.5 * s.fp + 0.5 * s.fn;
    if (denom == 0) continue;
    const double v = s.iou / denom;
    r.per_class[c] = v;
    sum += v;
    sq += s.tp > 0 ? s.iou / s.tp : 0.0;
    rq += s.tp / denom;
    ++n;
    r.tp += s.tp;
    r.fp += s.fp;
    r.fn += s.fn;
  }
  // Nothing to find and nothing predicted counts as perfect.
  r.value = n > 0 ? sum / n : 1.0;
  r.extra["sq"] = n > 0 ? sq / n : 1.0;
  r.extra["rq"] = n > 0 ? rq / n : 1.0;
  r.extra["classes"] = n;
  return r;
}

Labeled label_entities(const EntitySet& es) {
  Labeled l;
  l.labels.assign(static_cast<std::size_t>(es.height) * static_cast<std::size_t>(es.width), -1);
  for (const auto& e : es.entities) {
    if (e.mask.height() != es.height || e.mask.width() != es.width) throw DimensionMismatch("entity mask size");
    l.classes.push_back(e.class_id);
    stamp(l, e.mask, 0);
  }
  return l;
}

}  // namespace

MetricReport pq(const EntitySet& pred, const EntitySet& gt) {
  if (pred.height != gt.height || pred.width != gt.width) throw DimensionMismatch("pq: prediction size");
  return pq_report(pq_stats(label_entities(pred), label_entities(gt)));
}

MetricReport pq(const std::vector<EntitySet>& pred, const std::vector<EntitySet>& gt) {
  if (pred.size() != gt.size()) throw DimensionMismatch("pq: image counts differ");
  std::map<int, ClassStats> total;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (pred[i].height != gt[i].height || pred[i].width != gt[i].width) throw DimensionMismatch("pq: prediction size");
    for (const auto& [c, s] : pq_stats(label_entities(pred[i]), label_entities(gt[i]))) {
      auto& t = total[c];
      t.tp += s.tp;
      t.fp += s.fp;
      t.fn += s.fn;
      t.iou += s.iou;
    }
  }
  return pq_report(total);
}

EntitySet to_entities(const PanopticMap& pm, const ClassVocabulary& vocab) {
  EntitySet es{pm.height, pm.width, {}};
  for (const auto& s : pm.segments) {
    if (s.class_id < 0 || s.class_id >= vocab.size()) throw IndexError("class id outside vocabulary");
    es.entities.push_back({pm.segment_mask(s.id), s.class_id, s.id, vocab.is_thing(s.class_id)});
  }
  return es;
}

MetricReport pq(const PanopticMap& pred, const EntitySet& gt, const ClassVocabulary& vocab) {
  if (pred.height != gt.height || pred.width != gt.width) throw DimensionMismatch("pq: prediction size");
  return pq(to_entities(pred, vocab), gt);
}

std::vector<int> semantic_map(const EntitySet& es) {
  std::vector<int> out(static_cast<std::size_t>(es.height) * static_cast<std::size_t>(es.width), -1);
  for (const auto& e : es.entities)
    for (std::size_t i = 0; i < e.mask.size(); ++i)
      if (e.mask[i]) out[i] = e.class_id;
  return out;
}

std::vector<int> semantic_map(const PanopticMap& pm) {
  std::unordered_map<int, int> cls;
  for (const auto& s : pm.segments) cls[s.id] = s.class_id;
  std::vector<int> out(pm.segment_ids.size(), -1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int id = pm.segment_ids[i];
    if (id == 0) continue;
    auto it = cls.find(id);
    if (it != cls.end()) out[i] = it->second;
  }
  return out;
}

MetricReport miou(const std::vector<int>& pred, const std::vector<int>& gt, const ClassVocabulary& vocab) {
  if (pred.size() != gt.size()) throw DimensionMismatch("miou: map sizes differ");
  const auto n = static_cast<std::size_t>(vocab.size());
  std::vector<long> inter(n, 0), uni(n, 0), present(n, 0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const int g = gt[i], p = pred[i];
    if (g < 0) continue;
    if (g >= vocab.size() || p >= vocab.size()) throw IndexError("miou: class id outside vocabulary");
    ++present[static_cast<std::size_t>(g)];
    if (p == g) {
      ++inter[static_cast<std::size_t>(g)];
      ++uni[static_cast<std::size_t>(g)];
    } else {
      ++uni[static_cast<std::size_t>(g)];
      if (p >= 0) ++uni[static_cast<std::size_t>(p)];
    }
  }
  MetricReport r;
  r.name = "miou";
  double sum = 0;
  for (std::size_t c = 0; c < n; ++c) {
    if (present[c] == 0) continue;
    const double v = static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
    r.per_class[static_cast<int>(c)] = v;
    sum += v;
  }
  r.value = r.per_class.empty() ? 1.0 : sum / static_cast<double>(r.per_class.size());
  return r;
}

MetricReport vpq(const TubeEntitySet& pred, const TubeEntitySet& gt, const std::vector<int>& windows) {
  if (pred.frames != gt.frames || pred.height != gt.height || pred.width != gt.width)
    throw DimensionMismatch("vpq: prediction size");
  if (windows.empty()) throw ConfigError("vpq: no window sizes");
  const std::size_t hw = static_cast<std::size_t>(gt.height) * static_cast<std::size_t>(gt.width);
  MetricReport r;
  r.name = "vpq";
  double total = 0;
  for (int k : windows) {
    if (k < 1 || k > gt.frames) throw WindowTooLarge("vpq: window " + std::to_string(k) + " for " +
                                                     std::to_string(gt.frames) + " frames");
    double sum = 0;
    int count = 0;
    for (int s = 0; s + k <= gt.frames; ++s) {
      auto label = [&](const TubeEntitySet& ts) {
        Labeled l;
        l.labels.assign(hw * static_cast<std::size_t>(k), -1);
        for (const auto& e : ts.entities) {
          if (e.mask.frames() != ts.frames) throw DimensionMismatch("vpq: tube length");
          l.classes.push_back(e.class_id);
          for (int t = 0; t < k; ++t) stamp(l, e.mask.frame(s + t), hw * static_cast<std::size_t>(t));
        }
        return l;
      };
      const auto rep = pq_report(pq_stats(label(pred), label(gt)));
      sum += rep.value;
      ++count;
    }
    const double v = sum / count;
    r.extra["vpq_" + std::to_string(k)] = v;
    total += v;
  }
  r.value = total / static_cast<double>(windows.size());
  return r;
}

BinaryMask boundary(const BinaryMask& m) {
  const int h = m.height(), w = m.width();
  BinaryMask b(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!m.at(y, x)) continue;
      bool interior = true;
      for (int dy = -1; dy <= 1 && interior; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w || !m.at(yy, xx)) {
            interior = false;
            break;
          }
        }
      if (!interior) b.set(y, x, true);
    }
  return b;
}

int boundary_radius(int height, int width) {
  return static_cast<int>(std::ceil(0.008 * std::hypot(static_cast<double>(height), static_cast<double>(width))));
}

namespace {

// Hopcroft-Karp maximum matching; adj lists right-vertex ids per left vertex.
int max_matching(const std::vector<std::vector<int>>& adj, int right) {
  const int left = static_cast<int>(adj.size());
  constexpr int kInf = std::numeric_limits<int>::max();
  std::vector<int> ml(static_cast<std::size_t>(left), -1), mr(static_cast<std::size_t>(right), -1),
      dist(static_cast<std::size_t>(left));
  auto bfs = [&] {
    std::queue<int> q;
    bool found = false;
    for (int u = 0; u < left; ++u) {
      if (ml[static_cast<std::size_t>(u)] < 0) {
        dist[static_cast<std::size_t>(u)] = 0;
        q.push(u);
      } else {
        dist[static_cast<std::size_t>(u)] = kInf;
      }
    }
    while (!q.empty()) {
      const int u = q.front();
      q.pop();
      for (int v : adj[static_cast<std::size_t>(u)]) {
        const int w = mr[static_cast<std::size_t>(v)];
        if (w < 0) {
          found = true;
        } else if (dist[static_cast<std::size_t>(w)] == kInf) {
          dist[static_cast<std::size_t>(w)] = dist[static_cast<std::size_t>(u)] + 1;
          q.push(w);
        }
      }
    }
    return found;
  };
  std::function<bool(int)> dfs = [&](int u) {
    for (int v : adj[static_cast<std::size_t>(u)]) {
      const int w = mr[static_cast<std::size_t>(v)];
      if (w < 0 || (dist[static_cast<std::size_t>(w)] == dist[static_cast<std::size_t>(u)] + 1 && dfs(w))) {
        ml[static_cast<std::size_t>(u)] = v;
        mr[static_cast<std::size_t>(v)] = u;
        return true;
      }
    }
    dist[static_cast<std::size_t>(u)] = kInf;
    return false;
  };
  int matched = 0;
  while (bfs())
    for (int u = 0; u < left; ++u)
      if (ml[static_cast<std::size_t>(u)] < 0 && dfs(u)) ++matched;
  return matched;
}

double frame_iou(const BinaryMask& a, const BinaryMask& b) {
  long inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

double boundary_f(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.height() != gt.height() || pred.width() != gt.width()) throw DimensionMismatch("boundary_f: sizes");
  const int h = gt.height(), w = gt.width();
  const BinaryMask bp = boundary(pred), bg = boundary(gt);
  std::vector<int> gid(bg.size(), -1);
  int ng = 0;
  for (std::size_t i = 0; i < bg.size(); ++i)
    if (bg[i]) gid[i] = ng++;
  const int r = boundary_radius(h, w);
  std::vector<std::vector<int>> adj;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!bp.at(y, x)) continue;
      auto& a = adj.emplace_back();
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w || dy * dy + dx * dx > r * r) continue;
          const int g = gid[static_cast<std::size_t>(yy * w + xx)];
          if (g >= 0) a.push_back(g);
        }
    }
  const int np = static_cast<int>(adj.size());
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;
  const double m = max_matching(adj, ng);
  const double p = m / np, rc = m / ng;
  return p + rc > 0 ? 2 * p * rc / (p + rc) : 0.0;
}

MetricReport jf(const std::vector<TubeMask>& pred, const std::vector<TubeMask>& gt) {
  if (pred.size() != gt.size()) throw DimensionMismatch("jf: object counts differ");
  MetricReport r;
  r.name = "jf";
  double jsum = 0, fsum = 0;
  for (std::size_t o = 0; o < gt.size(); ++o) {
    if (pred[o].frames() != gt[o].frames()) throw DimensionMismatch("jf: tube length");
    double j = 0, f = 0;
    for (int t = 0; t < gt[o].frames(); ++t) {
      if (pred[o].frame(t).size() != gt[o].frame(t).size()) throw DimensionMismatch("jf: frame size");
      j += frame_iou(pred[o].frame(t), gt[o].frame(t));
      f += boundary_f(pred[o].frame(t), gt[o].frame(t));
    }
    j /= gt[o].frames();
    f /= gt[o].frames();
    r.per_class[static_cast<int>(o)] = 0.5 * (j + f);
    jsum += j;
    fsum += f;
  }
  const double n = gt.empty() ? 1.0 : static_cast<double>(gt.size());
  r.extra["j"] = gt.empty() ? 1.0 : jsum / n;
  r.extra["f"] = gt.empty() ? 1.0 : fsum / n;
  r.value = 0.5 * (r.extra["j"] + r.extra["f"]);
  return r;
}

MetricReport mask_ap(const std::vector<std::vector<ScoredInstance>>& pred,
                     const std::vector<std::vector<GtInstance>>& gt) {
  if (pred.size() != gt.size()) throw DimensionMismatch("mask_ap: image counts differ");
  std::map<int, int> gt_count;
  for (const auto& img : gt)
    for (const auto& g : img) ++gt_count[g.class_id];

  MetricReport r;
  r.name = "mask_ap";
  double total = 0, ap50 = 0, ap75 = 0;
  for (const auto& [cls, npos] : gt_count) {
    // (score, image, index) sorted by descending score, stable.
    std::vector<std::tuple<double, std::size_t, std::size_t>> dets;
    for (std::size_t i = 0; i < pred.size(); ++i)
      for (std::size_t k = 0; k < pred[i].size(); ++k)
        if (pred[i][k].class_id == cls) dets.emplace_back(pred[i][k].score, i, k);
    std::stable_sort(dets.begin(), dets.end(),
                     [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });
    // IoU cache per detection against the same-class gts of its image.
    std::vector<std::vector<std::pair<std::size_t, double>>> ious(dets.size());
    for (std::size_t d = 0; d < dets.size(); ++d) {
      const auto [s, i, k] = dets[d];
      for (std::size_t g = 0; g < gt[i].size(); ++g)
        if (gt[i][g].class_id == cls) ious[d].emplace_back(g, frame_iou(pred[i][k].mask, gt[i][g].mask));
    }
    double cls_ap = 0;
    for (int ti = 0; ti < 10; ++ti) {
      const double thr = 0.5 + 0.05 * ti;
      std::vector<std::vector<bool>> used(gt.size());
      for (std::size_t i = 0; i < gt.size(); ++i) used[i].assign(gt[i].size(), false);
      std::vector<double> prec, rec;
      int tp = 0, fp = 0;
      for (std::size_t d = 0; d < dets.size(); ++d) {
        const std::size_t img = std::get<1>(dets[d]);
        double best = std::min(thr, 1 - 1e-10);
        long m = -1;
        for (const auto& [g, iou] : ious[d]) {
          if (used[img][g] || iou < best) continue;
          best = iou;
          m = static_cast<long>(g);
        }
        if (m >= 0) {
          used[img][static_cast<std::size_t>(m)] = true;
          ++tp;
        } else {
          ++fp;
        }
        rec.push_back(static_cast<double>(tp) / npos);
        prec.push_back(static_cast<double>(tp) / (tp + fp));
      }
      for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
      double ap = 0;
      for (int ri = 0; ri <= 100; ++ri) {
        const double rt = ri / 100.0;
        const auto it = std::lower_bound(rec.begin(), rec.end(), rt);
        if (it != rec.end()) ap += prec[static_cast<std::size_t>(it - rec.begin())];
      }
      ap /= 101.0;
      cls_ap += ap;
      if (ti == 0) ap50 += ap;
      if (ti == 5) ap75 += ap;
    }
    cls_ap /= 10.0;
    r.per_class[cls] = cls_ap;
    total += cls_ap;
  }
  const double n = static_cast<double>(gt_count.size());
  r.value = n > 0 ? total / n : 0.0;
  r.extra["ap50"] = n > 0 ? ap50 / n : 0.0;
  r.extra["ap75"] = n > 0 ? ap75 / n : 0.0;
  return r;
}

int id_switches(const TubeEntitySet& pred, const TubeEntitySet& gt) {
  if (pred.frames != gt.frames || pred.height != gt.height || pred.width != gt.width)
    throw DimensionMismatch("id_switches: prediction size");
  std::vector<int> last(gt.entities.size(), -1);
  int switches = 0;
  for (int t = 0; t < gt.frames; ++t) {
    for (std::size_t g = 0; g < gt.entities.size(); ++g) {
      const auto& ge = gt.entities[g];
      if (!ge.is_thing || !ge.mask.frame(t).any()) continue;
      int best = -1;
      double best_iou = 0.5;
      for (std::size_t p = 0; p < pred.entities.size(); ++p) {
        const auto& pe = pred.entities[p];
        if (!pe.is_thing) continue;
        const double iou = frame_iou(pe.mask.frame(t), ge.mask.frame(t));
        if (iou > best_iou) {
          best_iou = iou;
          best = static_cast<int>(p);
        }
      }
      if (best < 0) continue;
      if (last[g] >= 0 && last[g] != best) ++switches;
      last[g] = best;
    }
  }
  return switches;
}

}  // namespace omgseg
