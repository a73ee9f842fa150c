#pragma once

#include <optional>
#include <vector>

#include "omgseg/core.hpp"
#include "omgseg/decoder.hpp"
#include "omgseg/features.hpp"

namespace omgseg {

struct InferenceConfig {
  double mask_threshold = 0.5;
  double score_threshold = 0.3;
  double overlap_keep = 0.8;
  double link_threshold = 0.2;
  double ov_alpha = 0.5;
  double vos_min_iou = 0.1;
};

void validate(const InferenceConfig& c);
void to_json(nlohmann::json& j, const InferenceConfig& c);
void from_json(const nlohmann::json& j, InferenceConfig& c);

/// Bilinear (half-pixel centers) upsampling of frame `frame` of a stacked
/// stride-s logit row, cropped to height x width.
ad::Matrix upsample_logits(const Eigen::Ref<const Eigen::RowVectorXd>& grid_row, int frame, int grid_height,
                           int grid_width, int stride, int height, int width);
/// Per-frame full-resolution masks of one query row: sigmoid > threshold.
std::vector<BinaryMask> query_masks(const PredictionSet& p, int row, double threshold = 0.5);

/// Row-wise softmax of class logits.
ad::Matrix class_probabilities(const ad::Matrix& logits);

struct MergedSegment {
  int id = 0;
  int query = 0;
  int class_id = 0;
  bool is_thing = false;
  double score = 0;
  std::vector<BinaryMask> masks;  // per frame, disjoint from other segments
};

struct MergeResult {
  std::vector<PanopticMap> frames;
  std::vector<MergedSegment> segments;
};

/// Greedy score-ordered pixel claiming over the semantic queries of `p`.
/// class ids index `vocab`; with class_agnostic every kept query becomes a
/// thing scored by objectness.
MergeResult panoptic_merge(const PredictionSet& p, const ClassVocabulary& vocab, const InferenceConfig& cfg = {},
                           bool class_agnostic = false);

/// Injective cosine-similarity assignment: (prev index, cur index) pairs with
/// similarity >= threshold.
std::vector<std::pair<int, int>> link_queries(const ad::Matrix& prev, const ad::Matrix& cur, double threshold);

struct TrackedTube {
  int track_id = 0;
  int class_id = 0;
  bool is_thing = false;
  int start_frame = 0;
  std::vector<BinaryMask> masks;  // contiguous from start_frame
  std::vector<Eigen::RowVectorXd> embeddings;  // one per clip
  double score = 0;
  int last_clip = -1;
};

/// Near-online clip linker. Things follow query-embedding matching; stuff
/// links by class identity.
class ClipLinker {
 public:
  explicit ClipLinker(double threshold = 0.2) : threshold_(threshold) {}
  /// Resumes from tubes produced by earlier clips; `clip_index` is the next clip.
  ClipLinker(double threshold, std::vector<TrackedTube> prev, int clip_index);
  /// Adds the merged segments of the next clip (frames [start, start + T)).
  void link(const MergeResult& clip, const ad::Matrix& final_queries, int start_frame);
  const std::vector<TrackedTube>& tubes() const { return tubes_; }
  int clips() const { return clip_; }

 private:
  double threshold_;
  std::vector<TrackedTube> tubes_;
  int next_id_ = 1;
  int clip_ = 0;
};

/// One linking step from an existing tube list.
std::vector<TrackedTube> link_clips(std::vector<TrackedTube> prev, const MergeResult& clip,
                                    const ad::Matrix& final_queries, int start_frame, int clip_index,
                                    double threshold);

struct VideoResult {
  std::vector<TrackedTube> tubes;
  int frames = 0;
  int height = 0;
  int width = 0;
  /// Per-frame panoptic maps with segment id = track id.
  std::vector<PanopticMap> panoptic() const;
  /// Tracks as entities (stuff instance 0, things numbered by track).
  TubeEntitySet entities() const;
};

/// Splits the video into consecutive clips of `clip_frames`, merges each and
/// links them.
VideoResult infer_video(const OmgSegModel& model, const Clip& video, const ClassVocabulary& vocab, int clip_frames,
                        const InferenceConfig& cfg = {}, bool class_agnostic = false);

struct VosObject {
  std::optional<TubeMask> tube;  // nullopt: no prediction above the IoU floor
  double first_frame_iou = 0;
  int track_id = 0;
};

/// Hungarian IoU matching of predicted first-frame masks to the given
/// first-frame ground truth; matched tracks become per-object tubes.
std::vector<VosObject> vos_track(const std::vector<BinaryMask>& first_frame_gt, const VideoResult& video,
                                 double min_iou = 0.1);

struct OVScores {
  Eigen::RowVectorXd learned;
  Eigen::RowVectorXd pooled;
  Eigen::RowVectorXd fused;
  double alpha = 0.5;
  int argmax() const;
};

/// learned^(1-alpha) * pooled^alpha, renormalized. Pooled comes from the
/// frozen level-3 features inside `mask`; uniform when the mask is empty.
OVScores openvocab_classify(const OmgSegModel& model, const Eigen::Ref<const Eigen::RowVectorXd>& class_logits,
                            const BinaryMask& mask, const MultiScaleFeatures& frozen,
                            const ClassEmbeddingMatrix& embeds, double alpha, int frame = 0);
/// Pooled score alone (softmax of scaled cosine to the class rows).
Eigen::RowVectorXd pooled_scores(const OmgSegModel& model, const BinaryMask& mask, const MultiScaleFeatures& frozen,
                                 const ClassEmbeddingMatrix& embeds, int frame = 0);

struct InteractiveResult {
  BinaryMask mask;
  OVScores scores;
};

/// Interactive decode over cached features; one result per prompt, in order.
std::vector<InteractiveResult> interactive_segment(const OmgSegModel& model, const MultiScaleFeatures& frozen,
                                                   const FusedFeatures& fused,
                                                   const std::vector<VisualPrompt>& prompts,
                                                   const ClassEmbeddingMatrix& embeds, const InferenceConfig& cfg = {});

}  // namespace omgseg
