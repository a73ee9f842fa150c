#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "omgseg/inference.hpp"
#include "omgseg/metrics.hpp"
#include "omgseg/service.hpp"
#include "omgseg/synthdata.hpp"
#include "omgseg/training.hpp"

namespace omgseg {

struct SourceSpec {
  std::string name;
  SourceKind kind = SourceKind::image;
  int count = 16;
  int frames = 1;  // video and vos sources
  int ratio = 1;
  std::uint64_t seed = 0;
  std::string split = "train";  // train | eval
  ShapeWorldConfig world;
};

/// Corpus for fitting the frozen visual projection before training.
struct AlignmentSpec {
  bool enabled = true;
  int count = 200;
  std::uint64_t seed = 1000;
  double ridge = 1e-3;
  ShapeWorldConfig world;  // defaults to holdout_policy = include
  AlignmentSpec() { world.holdout_policy = HoldoutPolicy::include; }
};

struct EvalSpec {
  std::vector<int> vpq_windows{1, 2, 4};
};

struct RunConfig {
  ModelConfig model;
  std::vector<SourceSpec> sources;
  AlignmentSpec alignment;
  TrainConfig train;
  InferenceConfig infer;
  EvalSpec eval;
  ServiceConfig service;
};

void validate(const RunConfig& c);
void to_json(nlohmann::json& j, const RunConfig& c);
/// Unknown keys anywhere raise ConfigError.
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

/// Replaces every seed: model, training, alignment corpus and each source
/// (sources get distinct seeds derived from `seed`).
void override_seed(RunConfig& c, std::uint64_t seed);

SampleRecord generate_sample(const SourceSpec& s, int index);
std::vector<SampleRecord> generate_source(const SourceSpec& s);
/// Writes every source under out/<name>/.
void write_datasets(const RunConfig& c, const std::filesystem::path& out);
/// Throws DataError when the directory is missing or empty.
std::vector<SampleRecord> load_source(const std::filesystem::path& data_dir, const SourceSpec& s);

/// Class ids of samples index this vocabulary; every source must share it.
ClassVocabulary run_vocabulary(const RunConfig& c);

/// Fresh model with the visual projection aligned when enabled.
OmgSegModel build_model(const RunConfig& c);

struct TrainOutcome {
  std::vector<StepRecord> log;
  std::uint64_t backbone_before = 0;
  std::uint64_t backbone_after = 0;
  double seconds = 0;
};

/// Trains on the train-split sources; `data` holds one sample list per entry
/// of c.sources (eval entries may be empty).
TrainOutcome train_model(OmgSegModel& model, const RunConfig& c, const std::vector<std::vector<SampleRecord>>& data,
                         std::ostream* log = nullptr);

enum class Task { panoptic, vis, vps, vos, interactive, ov };
std::string_view to_string(Task t);
Task task_from_string(std::string_view s);
Task default_task(SourceKind k);

/// JSON prediction for one sample; class ids index `vocab`.
nlohmann::json predict(const OmgSegModel& model, Task task, const SampleRecord& sample, int index,
                       const ClassVocabulary& vocab, const RunConfig& c);

/// Metrics of a task over paired predictions and samples.
std::map<std::string, MetricReport> score(Task task, const std::vector<nlohmann::json>& preds,
                                          const std::vector<SampleRecord>& samples, const ClassVocabulary& vocab,
                                          const RunConfig& c);

/// Prompts used for interactive prediction: the sample's own, else derived
/// (box then center point per entity).
std::vector<PromptTarget> sample_prompts(const SampleRecord& s, int index);

}  // namespace omgseg
