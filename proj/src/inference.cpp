#include "omgseg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "omgseg/io.hpp"
#include "omgseg/training.hpp"

namespace omgseg {

void validate(const InferenceConfig& c) {
  auto unit = [](double v, const char* name) {
    if (!(v >= 0 && v <= 1)) throw ConfigError(std::string("infer.") + name + " must be in [0,1]");
  };
  unit(c.mask_threshold, "mask_threshold");
  unit(c.score_threshold, "score_threshold");
  unit(c.overlap_keep, "overlap_keep");
  unit(c.ov_alpha, "ov_alpha");
  unit(c.vos_min_iou, "vos_min_iou");
  if (!(c.link_threshold >= -1 && c.link_threshold <= 1)) throw ConfigError("infer.link_threshold must be in [-1,1]");
}

void to_json(nlohmann::json& j, const InferenceConfig& c) {
  j = {{"mask_threshold", c.mask_threshold}, {"score_threshold", c.score_threshold},
       {"overlap_keep", c.overlap_keep},     {"link_threshold", c.link_threshold},
       {"ov_alpha", c.ov_alpha},             {"vos_min_iou", c.vos_min_iou}};
}

void from_json(const nlohmann::json& j, InferenceConfig& c) {
  io::reject_unknown_keys(
      j, {"mask_threshold", "score_threshold", "overlap_keep", "link_threshold", "ov_alpha", "vos_min_iou"}, "infer");
  try {
    c.mask_threshold = j.value("mask_threshold", c.mask_threshold);
    c.score_threshold = j.value("score_threshold", c.score_threshold);
    c.overlap_keep = j.value("overlap_keep", c.overlap_keep);
    c.link_threshold = j.value("link_threshold", c.link_threshold);
    c.ov_alpha = j.value("ov_alpha", c.ov_alpha);
    c.vos_min_iou = j.value("vos_min_iou", c.vos_min_iou);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("infer: ") + e.what());
  }
  validate(c);
}

ad::Matrix upsample_logits(const Eigen::Ref<const Eigen::RowVectorXd>& grid_row, int frame, int gh, int gw,
                           int stride, int height, int width) {
  const Eigen::Index base = static_cast<Eigen::Index>(frame) * gh * gw;
  if (base + gh * gw > grid_row.size()) throw ShapeError("upsample: frame out of range");
  ad::Matrix out(height, width);
  std::vector<int> x0(static_cast<std::size_t>(width)), x1(static_cast<std::size_t>(width));
  std::vector<double> wx(static_cast<std::size_t>(width));
  for (int x = 0; x < width; ++x) {
    const double g = std::clamp((x + 0.5) / stride - 0.5, 0.0, static_cast<double>(gw - 1));
    x0[static_cast<std::size_t>(x)] = static_cast<int>(std::floor(g));
    x1[static_cast<std::size_t>(x)] = std::min(x0[static_cast<std::size_t>(x)] + 1, gw - 1);
    wx[static_cast<std::size_t>(x)] = g - x0[static_cast<std::size_t>(x)];
  }
  for (int y = 0; y < height; ++y) {
    const double g = std::clamp((y + 0.5) / stride - 0.5, 0.0, static_cast<double>(gh - 1));
    const int y0 = static_cast<int>(std::floor(g));
    const int y1 = std::min(y0 + 1, gh - 1);
    const double wy = g - y0;
    for (int x = 0; x < width; ++x) {
      const auto xi = static_cast<std::size_t>(x);
      auto v = [&](int yy, int xx) { return grid_row(base + static_cast<Eigen::Index>(yy) * gw + xx); };
      const double top = (1 - wx[xi]) * v(y0, x0[xi]) + wx[xi] * v(y0, x1[xi]);
      const double bot = (1 - wx[xi]) * v(y1, x0[xi]) + wx[xi] * v(y1, x1[xi]);
      out(y, x) = (1 - wy) * top + wy * bot;
    }
  }
  return out;
}

namespace {

constexpr int kMaskStride = 8;

double logit_of(double p) { return std::log(p) - std::log1p(-p); }

BinaryMask threshold_mask(const ad::Matrix& logits, double threshold) {
  const double cut = threshold <= 0 ? -INFINITY : threshold >= 1 ? INFINITY : logit_of(threshold);
  BinaryMask m(static_cast<int>(logits.rows()), static_cast<int>(logits.cols()));
  for (Eigen::Index i = 0; i < logits.size(); ++i) m.set(static_cast<std::size_t>(i), logits.data()[i] > cut);
  return m;
}

}  // namespace

std::vector<BinaryMask> query_masks(const PredictionSet& p, int row, double threshold) {
  std::vector<BinaryMask> out;
  const auto& m = p.final_layer().mask_logits;
  for (int t = 0; t < p.frames; ++t)
    out.push_back(threshold_mask(
        upsample_logits(m.row(row), t, p.grid_height, p.grid_width, kMaskStride, p.input_height, p.input_width),
        threshold));
  return out;
}

ad::Matrix class_probabilities(const ad::Matrix& logits) {
  ad::Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Eigen::RowVectorXd e = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}

MergeResult panoptic_merge(const PredictionSet& p, const ClassVocabulary& vocab, const InferenceConfig& cfg,
                           bool class_agnostic) {
  const int ns = p.num_semantic;
  const auto& fin = p.final_layer();
  const int k = static_cast<int>(fin.class_logits.cols()) - 1;
  if (k != vocab.size()) throw DimensionMismatch("class logits do not match the vocabulary");
  const int h = p.input_height, w = p.input_width, frames = p.frames;
  const ad::Matrix probs = class_probabilities(fin.class_logits);
  const double cut = logit_of(std::clamp(cfg.mask_threshold, 1e-12, 1 - 1e-12));

  struct Candidate {
    int query;
    int cls;
    double score;
    std::vector<ad::Matrix> logits;
  };
  std::vector<Candidate> cands;
  for (int q = 0; q < ns; ++q) {
    Candidate c{q, 0, 0, {}};
    Eigen::Index arg = 0;
    const double best = probs.row(q).head(k).maxCoeff(&arg);
    c.cls = static_cast<int>(arg);
    const double prob = class_agnostic ? 1.0 - probs(q, k) : best;
    double fg = 0;
    long long n = 0;
    for (int t = 0; t < frames; ++t) {
      c.logits.push_back(upsample_logits(fin.mask_logits.row(q), t, p.grid_height, p.grid_width, kMaskStride, h, w));
      for (Eigen::Index i = 0; i < c.logits.back().size(); ++i) {
        const double z = c.logits.back().data()[i];
        if (z > cut) {
          fg += ad::sigmoid(z);
          ++n;
        }
      }
    }
    c.score = n > 0 ? prob * fg / static_cast<double>(n) : 0.0;
    cands.push_back(std::move(c));
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });

  std::vector<std::vector<int>> ids(static_cast<std::size_t>(frames), std::vector<int>(static_cast<std::size_t>(h * w), 0));
  MergeResult r;
  for (const auto& c : cands) {
    if (c.score < cfg.score_threshold) continue;
    long long area = 0, free = 0;
    for (int t = 0; t < frames; ++t) {
      const auto& z = c.logits[static_cast<std::size_t>(t)];
      for (Eigen::Index i = 0; i < z.size(); ++i) {
        if (z.data()[i] > cut) {
          ++area;
          free += ids[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)] == 0;
        }
      }
    }
    if (area == 0 || static_cast<double>(free) / static_cast<double>(area) < cfg.overlap_keep) continue;
    const bool thing = class_agnostic || vocab.is_thing(c.cls);
    MergedSegment* seg = nullptr;
    if (!thing) {
      for (auto& s : r.segments)
        if (!s.is_thing && s.class_id == c.cls) seg = &s;
    }
    if (!seg) {
      MergedSegment s;
      s.id = static_cast<int>(r.segments.size()) + 1;
      s.query = c.query;
      s.class_id = c.cls;
      s.is_thing = thing;
      s.score = c.score;
      s.masks.assign(static_cast<std::size_t>(frames), BinaryMask(h, w));
      r.segments.push_back(std::move(s));
      seg = &r.segments.back();
    }
    for (int t = 0; t < frames; ++t) {
      const auto& z = c.logits[static_cast<std::size_t>(t)];
      auto& grid = ids[static_cast<std::size_t>(t)];
      for (Eigen::Index i = 0; i < z.size(); ++i) {
        if (z.data()[i] > cut && grid[static_cast<std::size_t>(i)] == 0) {
          grid[static_cast<std::size_t>(i)] = seg->id;
          seg->masks[static_cast<std::size_t>(t)].set(static_cast<std::size_t>(i), true);
        }
      }
    }
  }
  for (int t = 0; t < frames; ++t) {
    PanopticMap pm;
    pm.height = h;
    pm.width = w;
    pm.segment_ids = ids[static_cast<std::size_t>(t)];
    for (const auto& s : r.segments)
      if (s.masks[static_cast<std::size_t>(t)].any()) pm.segments.push_back({s.id, s.class_id, s.score});
    r.frames.push_back(std::move(pm));
  }
  return r;
}

std::vector<std::pair<int, int>> link_queries(const ad::Matrix& prev, const ad::Matrix& cur, double threshold) {
  std::vector<std::pair<int, int>> out;
  if (prev.rows() == 0 || cur.rows() == 0) return out;
  if (prev.cols() != cur.cols()) throw DimensionMismatch("link: embedding widths differ");
  auto normed = [](const ad::Matrix& m) {
    ad::Matrix n = m;
    for (Eigen::Index i = 0; i < n.rows(); ++i) {
      const double len = n.row(i).norm();
      if (len > 0) n.row(i) /= len;
    }
    return n;
  };
  const Eigen::MatrixXd sim = normed(prev) * normed(cur).transpose();
  const auto match = hungarian_match(-sim);
  for (const auto& [a, b] : match.pairs)
    if (sim(a, b) >= threshold) out.emplace_back(a, b);
  return out;
}

void ClipLinker::link(const MergeResult& clip, const ad::Matrix& final_queries, int start_frame) {
  std::vector<int> prev_idx, cur_idx;
  for (int i = 0; i < static_cast<int>(tubes_.size()); ++i)
    if (tubes_[static_cast<std::size_t>(i)].is_thing && tubes_[static_cast<std::size_t>(i)].last_clip == clip_ - 1 && clip_ > 0)
      prev_idx.push_back(i);
  for (int s = 0; s < static_cast<int>(clip.segments.size()); ++s)
    if (clip.segments[static_cast<std::size_t>(s)].is_thing) cur_idx.push_back(s);

  ad::Matrix prev(static_cast<Eigen::Index>(prev_idx.size()), final_queries.cols());
  ad::Matrix cur(static_cast<Eigen::Index>(cur_idx.size()), final_queries.cols());
  for (std::size_t i = 0; i < prev_idx.size(); ++i)
    prev.row(static_cast<Eigen::Index>(i)) = tubes_[static_cast<std::size_t>(prev_idx[i])].embeddings.back();
  for (std::size_t i = 0; i < cur_idx.size(); ++i)
    cur.row(static_cast<Eigen::Index>(i)) = final_queries.row(clip.segments[static_cast<std::size_t>(cur_idx[i])].query);

  std::vector<int> assigned(clip.segments.size(), -1);
  for (const auto& [a, b] : link_queries(prev, cur, threshold_))
    assigned[static_cast<std::size_t>(cur_idx[static_cast<std::size_t>(b)])] = prev_idx[static_cast<std::size_t>(a)];

  for (std::size_t s = 0; s < clip.segments.size(); ++s) {
    const auto& seg = clip.segments[s];
    if (!seg.is_thing && clip_ > 0) {
      for (int i = 0; i < static_cast<int>(tubes_.size()); ++i) {
        const auto& t = tubes_[static_cast<std::size_t>(i)];
        if (!t.is_thing && t.class_id == seg.class_id && t.last_clip == clip_ - 1) assigned[s] = i;
      }
    }
    const Eigen::RowVectorXd emb = final_queries.row(seg.query);
    if (assigned[s] >= 0) {
      auto& t = tubes_[static_cast<std::size_t>(assigned[s])];
      t.masks.insert(t.masks.end(), seg.masks.begin(), seg.masks.end());
      t.embeddings.push_back(emb);
      t.score = std::max(t.score, seg.score);
      t.last_clip = clip_;
    } else {
      TrackedTube t;
      t.track_id = next_id_++;
      t.class_id = seg.class_id;
      t.is_thing = seg.is_thing;
      t.start_frame = start_frame;
      t.masks = seg.masks;
      t.embeddings.push_back(emb);
      t.score = seg.score;
      t.last_clip = clip_;
      tubes_.push_back(std::move(t));
    }
  }
  ++clip_;
}

ClipLinker::ClipLinker(double threshold, std::vector<TrackedTube> prev, int clip_index)
    : threshold_(threshold), tubes_(std::move(prev)), clip_(clip_index) {
  for (const auto& t : tubes_) next_id_ = std::max(next_id_, t.track_id + 1);
}

std::vector<TrackedTube> link_clips(std::vector<TrackedTube> prev, const MergeResult& clip,
                                    const ad::Matrix& final_queries, int start_frame, int clip_index,
                                    double threshold) {
  ClipLinker linker(threshold, std::move(prev), clip_index);
  linker.link(clip, final_queries, start_frame);
  return linker.tubes();
}

std::vector<PanopticMap> VideoResult::panoptic() const {
  std::vector<PanopticMap> out;
  for (int t = 0; t < frames; ++t) {
    PanopticMap pm;
    pm.height = height;
    pm.width = width;
    pm.segment_ids.assign(static_cast<std::size_t>(height * width), 0);
    for (const auto& tube : tubes) {
      const int k = t - tube.start_frame;
      if (k < 0 || k >= static_cast<int>(tube.masks.size())) continue;
      const auto& m = tube.masks[static_cast<std::size_t>(k)];
      if (!m.any()) continue;
      for (std::size_t i = 0; i < m.size(); ++i)
        if (m[i]) pm.segment_ids[i] = tube.track_id;
      pm.segments.push_back({tube.track_id, tube.class_id, tube.score});
    }
    out.push_back(std::move(pm));
  }
  return out;
}

TubeEntitySet VideoResult::entities() const {
  TubeEntitySet ts{frames, height, width, {}};
  for (const auto& tube : tubes) {
    TubeEntity* target = nullptr;
    if (!tube.is_thing)
      for (auto& e : ts.entities)
        if (!e.is_thing && e.class_id == tube.class_id) target = &e;
    if (!target) {
      ts.entities.push_back({TubeMask(frames, height, width), tube.class_id, tube.is_thing ? tube.track_id : 0, tube.is_thing});
      target = &ts.entities.back();
    }
    for (std::size_t k = 0; k < tube.masks.size(); ++k) {
      auto& dst = target->mask.frame(tube.start_frame + static_cast<int>(k));
      const auto& src = tube.masks[k];
      for (std::size_t i = 0; i < src.size(); ++i)
        if (src[i]) dst.set(i, true);
    }
  }
  return ts;
}

VideoResult infer_video(const OmgSegModel& model, const Clip& video, const ClassVocabulary& vocab, int clip_frames,
                        const InferenceConfig& cfg, bool class_agnostic) {
  if (video.empty()) throw ShapeError("empty video");
  if (clip_frames < 1) throw ConfigError("clip length must be >= 1");
  const auto rows = model.embeddings(vocab).class_rows;
  ClipLinker linker(cfg.link_threshold);
  const int total = static_cast<int>(video.size());
  for (int start = 0; start < total; start += clip_frames) {
    const int len = std::min(clip_frames, total - start);
    Clip clip(video.begin() + start, video.begin() + start + len);
    const auto pred = model.forward(clip, {}, rows, DecodeMode::video);
    const auto merged = panoptic_merge(pred, vocab, cfg, class_agnostic);
    linker.link(merged, pred.final_layer().queries, start);
  }
  VideoResult r;
  r.tubes = linker.tubes();
  r.frames = total;
  r.height = video.front().height;
  r.width = video.front().width;
  return r;
}

std::vector<VosObject> vos_track(const std::vector<BinaryMask>& first_frame_gt, const VideoResult& video,
                                 double min_iou) {
  std::vector<int> cand;
  for (int i = 0; i < static_cast<int>(video.tubes.size()); ++i)
    if (video.tubes[static_cast<std::size_t>(i)].start_frame == 0) cand.push_back(i);
  std::vector<VosObject> out(first_frame_gt.size());
  if (cand.empty() || first_frame_gt.empty()) return out;
  Eigen::MatrixXd iou(static_cast<Eigen::Index>(first_frame_gt.size()), static_cast<Eigen::Index>(cand.size()));
  for (std::size_t g = 0; g < first_frame_gt.size(); ++g)
    for (std::size_t c = 0; c < cand.size(); ++c)
      iou(static_cast<Eigen::Index>(g), static_cast<Eigen::Index>(c)) =
          mask_iou(first_frame_gt[g], video.tubes[static_cast<std::size_t>(cand[c])].masks.front());
  const auto match = hungarian_match(-iou);
  for (const auto& [g, c] : match.pairs) {
    const double v = iou(g, c);
    auto& obj = out[static_cast<std::size_t>(g)];
    obj.first_frame_iou = v;
    if (v < min_iou) continue;
    const auto& tube = video.tubes[static_cast<std::size_t>(cand[static_cast<std::size_t>(c)])];
    TubeMask tm(video.frames, video.height, video.width);
    for (std::size_t k = 0; k < tube.masks.size(); ++k) tm.frame(tube.start_frame + static_cast<int>(k)) = tube.masks[k];
    obj.tube = std::move(tm);
    obj.track_id = tube.track_id;
  }
  return out;
}

int OVScores::argmax() const {
  Eigen::Index i = 0;
  fused.maxCoeff(&i);
  return static_cast<int>(i);
}

Eigen::RowVectorXd pooled_scores(const OmgSegModel& model, const BinaryMask& mask, const MultiScaleFeatures& frozen,
                                 const ClassEmbeddingMatrix& embeds, int frame) {
  const auto k = embeds.class_rows.rows();
  const auto feat = pool_level3(frozen, mask, frame);
  if (!feat) return Eigen::RowVectorXd::Constant(k, 1.0 / static_cast<double>(k));
  Eigen::RowVectorXd e = FrozenBackbone(model.config()).project(model.params(), *feat);
  const double n = e.norm();
  if (n > 0) e /= n;
  Eigen::RowVectorXd cos(k);
  for (Eigen::Index i = 0; i < k; ++i) cos(i) = embeds.class_rows.row(i).dot(e) / std::max(embeds.class_rows.row(i).norm(), 1e-12);
  Eigen::RowVectorXd z = model.config().pool_logit_scale * cos;
  Eigen::RowVectorXd ex = (z.array() - z.maxCoeff()).exp();
  return ex / ex.sum();
}

OVScores openvocab_classify(const OmgSegModel& model, const Eigen::Ref<const Eigen::RowVectorXd>& class_logits,
                            const BinaryMask& mask, const MultiScaleFeatures& frozen,
                            const ClassEmbeddingMatrix& embeds, double alpha, int frame) {
  const auto k = embeds.class_rows.rows();
  if (class_logits.size() != k + 1) throw DimensionMismatch("class logits do not match the class rows");
  if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("ov alpha must be in [0,1]");
  OVScores s;
  s.alpha = alpha;
  const Eigen::RowVectorXd z = class_logits.head(k);
  Eigen::RowVectorXd ex = (z.array() - z.maxCoeff()).exp();
  s.learned = ex / ex.sum();
  s.pooled = pooled_scores(model, mask, frozen, embeds, frame);
  if (alpha == 0.0) {
    s.fused = s.learned;
  } else if (alpha == 1.0) {
    s.fused = s.pooled;
  } else {
    s.fused = (s.learned.array().pow(1 - alpha) * s.pooled.array().pow(alpha)).matrix();
    const double sum = s.fused.sum();
    if (sum > 0) {
      s.fused /= sum;
    } else {
      s.fused = s.learned;
    }
  }
  return s;
}

std::vector<InteractiveResult> interactive_segment(const OmgSegModel& model, const MultiScaleFeatures& frozen,
                                                   const FusedFeatures& fused,
                                                   const std::vector<VisualPrompt>& prompts,
                                                   const ClassEmbeddingMatrix& embeds, const InferenceConfig& cfg) {
  if (prompts.empty()) throw ShapeError("interactive segmentation needs at least one prompt");
  const auto pred = model.forward_fused(fused, prompts, embeds.class_rows, DecodeMode::interactive);
  std::vector<InteractiveResult> out;
  for (int i = 0; i < static_cast<int>(prompts.size()); ++i) {
    const int row = pred.num_semantic + i;
    InteractiveResult r;
    r.mask = query_masks(pred, row, cfg.mask_threshold).front();
    r.scores = openvocab_classify(model, pred.final_layer().class_logits.row(row), r.mask, frozen, embeds, cfg.ov_alpha);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace omgseg
