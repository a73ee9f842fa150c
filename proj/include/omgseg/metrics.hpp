#pragma once

#include <map>
#include <string>
#include <vector>

#include "omgseg/core.hpp"

namespace omgseg {

struct MetricReport {
  std::string name;
  double value = 0;
  std::map<int, double> per_class;
  int tp = 0;
  int fp = 0;
  int fn = 0;
  std::map<std::string, double> extra;
};

void to_json(nlohmann::json& j, const MetricReport& r);

/// Segments of a panoptic map as entities (instance id = segment id).
EntitySet to_entities(const PanopticMap& pm, const ClassVocabulary& vocab);

/// Panoptic quality; pixels outside every ground-truth entity are void.
MetricReport pq(const PanopticMap& pred, const EntitySet& gt, const ClassVocabulary& vocab);
/// Same, with predictions given as entities.
MetricReport pq(const EntitySet& pred, const EntitySet& gt);
/// Dataset PQ: matches are counted per image, statistics pooled over images.
MetricReport pq(const std::vector<EntitySet>& pred, const std::vector<EntitySet>& gt);

/// Semantic maps hold a class id per pixel, -1 for void / unlabeled. Averages
/// over the classes present in the ground truth.
MetricReport miou(const std::vector<int>& pred, const std::vector<int>& gt, const ClassVocabulary& vocab);
std::vector<int> semantic_map(const EntitySet& es);
std::vector<int> semantic_map(const PanopticMap& pm);

/// Mean over window sizes k of the mean PQ over all k-frame windows, with
/// tube slices as segments. Throws WindowTooLarge when k > T.
MetricReport vpq(const TubeEntitySet& pred, const TubeEntitySet& gt, const std::vector<int>& windows = {1, 2, 4});

/// Region J and boundary F over paired object tubes (pred[i] vs gt[i]).
MetricReport jf(const std::vector<TubeMask>& pred, const std::vector<TubeMask>& gt);
/// Boundary F-measure of one frame with the standard tolerance radius.
double boundary_f(const BinaryMask& pred, const BinaryMask& gt);
/// Inner boundary: mask minus its 3x3 erosion (outside counts as background).
BinaryMask boundary(const BinaryMask& m);
int boundary_radius(int height, int width);

struct ScoredInstance {
  BinaryMask mask;
  int class_id = 0;
  double score = 0;
};
struct GtInstance {
  BinaryMask mask;
  int class_id = 0;
};

/// COCO-style mask AP over IoU thresholds 0.50:0.05:0.95 with 101-point
/// interpolation; the outer vectors index images.
MetricReport mask_ap(const std::vector<std::vector<ScoredInstance>>& pred,
                     const std::vector<std::vector<GtInstance>>& gt);

/// Thing identity switches: per frame, ground-truth things are matched to
/// predicted things at IoU > 0.5; a switch is a change of matched id.
int id_switches(const TubeEntitySet& pred, const TubeEntitySet& gt);

}  // namespace omgseg
