#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "omgseg/ad.hpp"
#include "omgseg/decoder.hpp"
#include "omgseg/synthdata.hpp"

namespace omgseg {

struct LossWeights {
  double cls = 2.0;
  double ce = 5.0;
  double dice = 5.0;
  double no_object = 0.1;
  double dice_eps = 1.0;
};

void validate(const LossWeights& w);

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (query, target), sorted by query
  std::vector<int> unmatched;              // queries without a target
};

/// Global-minimum assignment for a rectangular cost matrix (rows = queries).
/// min(rows, cols) pairs are produced.
MatchResult hungarian_match(const Eigen::MatrixXd& cost);
double assignment_cost(const Eigen::MatrixXd& cost, const MatchResult& m);

// Value-level losses on one stride-8 logit row and its target row.
double dice_loss(const Eigen::Ref<const Eigen::RowVectorXd>& logits, const Eigen::Ref<const Eigen::RowVectorXd>& gt,
                 double eps = 1.0);
double mask_ce_loss(const Eigen::Ref<const Eigen::RowVectorXd>& logits,
                    const Eigen::Ref<const Eigen::RowVectorXd>& gt);
/// CE of one class-logit row; `weight` scales it (0.1 for no-object targets).
double cls_loss(const Eigen::Ref<const Eigen::RowVectorXd>& logits, int target, double weight = 1.0);
double match_cost(const Eigen::Ref<const Eigen::RowVectorXd>& class_logits,
                  const Eigen::Ref<const Eigen::RowVectorXd>& mask_logits, int target_class,
                  const Eigen::Ref<const Eigen::RowVectorXd>& target_mask, const LossWeights& w,
                  bool class_agnostic = false);

enum class TargetDownsample { fraction, majority };
std::string_view to_string(TargetDownsample d);
TargetDownsample target_downsample_from_string(std::string_view s);

/// One row per entity: per-frame stride-`stride` grids stacked over T.
/// `fraction` keeps the covered area share, `majority` thresholds it at 1/2.
ad::Matrix downsample_targets(const TubeEntitySet& ts, int grid_height, int grid_width, int stride,
                              TargetDownsample mode);

struct LossTargets {
  ad::Matrix masks;                   // G x (T * cells)
  std::vector<int> classes;           // G, index into the class rows used for decoding
  std::vector<int> prompt_entities;   // target row for each location query
  bool class_agnostic = false;        // objectness instead of class identity
};

struct LossBreakdown {
  double total = 0;
  double cls = 0;   // unweighted sums over layers
  double ce = 0;
  double dice = 0;
  std::vector<MatchResult> matches;  // per layer
};

struct LossOutput {
  ad::Var total;
  LossBreakdown breakdown;
};

/// Deep-supervised weighted loss; every layer gets its own matching.
/// Location queries use the given prompt -> target pairing.
LossOutput total_loss(const DecoderGraph& g, const LossTargets& t, const LossWeights& w);

struct GradCheckResult {
  double max_rel_error = 0;
  int checked = 0;
  std::string worst;
};

/// Central differences against tape gradients for up to `max_params`
/// randomly chosen scalars of the named (trainable) parameters.
GradCheckResult grad_check(const std::function<ad::Var(ad::Tape&)>& loss_fn, ad::ParameterStore& store,
                           const std::vector<std::string>& names, int max_params = 200, double h = 1e-5,
                           std::uint64_t seed = 0);

enum class SourceKind { image, pseudo_video, video, interactive, vos };
std::string_view to_string(SourceKind k);
SourceKind source_kind_from_string(std::string_view s);

struct TrainConfig {
  int steps = 1500;
  double lr = 1e-3;
  double lr_final_fraction = 0.1;  // cosine decay to lr * this
  int warmup_steps = 50;
  std::string optimizer = "rmsprop";  // rmsprop | adagrad | sgd
  double rms_decay = 0.99;
  double epsilon = 1e-8;
  double clip_norm = 1.0;
  LossWeights weights;
  int clip_frames = 2;
  double pseudo_shift = 0.1;
  int max_prompts = 4;
  TargetDownsample downsample = TargetDownsample::fraction;
  std::uint64_t seed = 0;
  int log_every = 10;
};

void validate(const TrainConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainingSource {
  std::string name;
  SourceKind kind = SourceKind::image;
  int ratio = 1;
  std::vector<SampleRecord> samples;
};

struct StepRecord {
  int step = 0;
  std::string source;
  double loss = 0;
  double cls = 0;
  double ce = 0;
  double dice = 0;
  double lr = 0;
  double grad_norm = 0;
  double ms = 0;
};
void to_json(nlohmann::json& j, const StepRecord& r);

/// Single-loop joint trainer over balanced sources. Only trainable
/// parameters are updated; the frozen backbone never enters the optimizer.
class Trainer {
 public:
  Trainer(OmgSegModel& model, TrainConfig cfg, std::vector<TrainingSource> sources, ClassVocabulary full_vocab,
          ClassVocabulary train_vocab);

  StepRecord step();
  /// Runs the remaining steps; writes one JSON line per logged step.
  std::vector<StepRecord> run(std::ostream* log = nullptr, const std::function<void(const StepRecord&)>& cb = {});
  int steps_done() const { return step_; }
  double lr_at(int step) const;

  struct Prepared {
    MultiScaleFeatures frozen;
    LossTargets targets;
    std::vector<VisualPrompt> prompts;
    DecodeMode mode = DecodeMode::image;
  };
  /// Builds the decoder input and targets for a sampled item.
  Prepared prepare(int source, int index, std::uint64_t draw_seed);

 private:
  const MultiScaleFeatures& frame_features(int source, int index, int frame, const Image& img);
  void apply_gradients(const ad::Tape& tape, double lr, double& grad_norm);

  OmgSegModel& model_;
  TrainConfig cfg_;
  std::vector<TrainingSource> sources_;
  ClassVocabulary full_vocab_;
  ClassVocabulary train_vocab_;
  std::vector<int> full_to_train_;
  ad::Matrix class_rows_;
  BalancedSampler sampler_;
  int step_ = 0;
  std::vector<std::vector<std::vector<std::optional<MultiScaleFeatures>>>> cache_;  // source, sample, frame
  std::vector<std::vector<std::optional<SampleRecord>>> pseudo_;  // pseudo-video per sample
  std::unordered_map<const ad::Parameter*, ad::Matrix> accum_;
};

/// Fits the frozen visual projection to text embeddings of ground-truth
/// regions of `corpus` (class ids index `vocab`). Stands in for image-text
/// pretraining of the backbone, so the corpus may contain classes the
/// segmenter never trains on.
void align_visual_projection(OmgSegModel& model, const std::vector<SampleRecord>& corpus,
                             const ClassVocabulary& vocab, double ridge = 1e-3);

/// Stacks per-frame features of one clip (frames extracted independently).
MultiScaleFeatures stack_frames(const std::vector<const MultiScaleFeatures*>& frames);

}  // namespace omgseg
