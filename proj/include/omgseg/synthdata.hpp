#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "omgseg/core.hpp"
#include "omgseg/rng.hpp"

namespace omgseg {

enum class ShapeKind { circle, square, triangle };

std::string_view to_string(ShapeKind s);
ShapeKind shape_from_string(std::string_view s);

struct PaletteColor {
  std::string name;
  std::array<int, 3> rgb{0, 0, 0};  // 8-bit, so PNG round trips are exact
};

/// Which thing classes a generator may draw relative to the held-out set.
enum class HoldoutPolicy { exclude, include, require };

struct ShapeWorldConfig {
  int height = 128;
  int width = 128;
  int min_things = 1;
  int max_things = 3;
  std::vector<ShapeKind> shapes{ShapeKind::circle, ShapeKind::square, ShapeKind::triangle};
  std::vector<PaletteColor> colors{
      {"red", {220, 40, 40}}, {"green", {40, 180, 60}}, {"blue", {50, 80, 220}}};
  PaletteColor sky{"sky", {140, 195, 240}};
  PaletteColor ground{"ground", {125, 95, 55}};
  double horizon_min = 0.45;  // fraction of height
  double horizon_max = 0.6;
  double size_min = 0.14;  // shape radius as a fraction of min(H, W)
  double size_max = 0.22;
  double min_separation = 0.85;  // center distance >= this * (r_i + r_j) when placeable
  double velocity_min = 1.0;  // pixels / frame
  double velocity_max = 3.0;
  std::vector<std::string> holdout{"green triangle"};
  HoldoutPolicy holdout_policy = HoldoutPolicy::exclude;
  std::uint64_t seed = 0;
};

void validate(const ShapeWorldConfig& cfg);
void to_json(nlohmann::json& j, const ShapeWorldConfig& c);
/// Rejects unknown keys (ConfigError); missing keys keep defaults.
void from_json(const nlohmann::json& j, ShapeWorldConfig& c);

/// Thing classes ("<color> <shape>") followed by the stuff classes sky, ground.
ClassVocabulary full_vocabulary(const ShapeWorldConfig& cfg);
/// full_vocabulary without the held-out classes.
ClassVocabulary training_vocabulary(const ShapeWorldConfig& cfg);

struct PromptTarget {
  VisualPrompt prompt;
  int entity = 0;
  friend bool operator==(const PromptTarget&, const PromptTarget&) = default;
};

struct SampleRecord {
  std::string source;
  Clip frames;
  TubeEntitySet targets;  // class ids index full_vocabulary
  std::vector<PromptTarget> prompts;

  int num_frames() const { return static_cast<int>(frames.size()); }
  EntitySet image_targets() const { return frame_entities(targets, 0); }
  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

struct ThingLayout {
  ShapeKind shape = ShapeKind::circle;
  int class_id = 0;
  int instance_id = 0;
  std::array<int, 3> rgb{0, 0, 0};
  double cx = 0, cy = 0, radius = 0;
  double vx = 0, vy = 0;
};

/// Things are listed back to front.
struct SceneLayout {
  int height = 0;
  int width = 0;
  int horizon = 0;
  std::vector<ThingLayout> things;
};

SceneLayout draw_layout(const ShapeWorldConfig& cfg, Rng& rng);
void draw_velocities(const ShapeWorldConfig& cfg, SceneLayout& layout, Rng& rng);
/// Paints T frames; thing t is at center + t*velocity, wrapped on the torus.
/// draw_velocities rounds velocities to whole pixels per frame.
SampleRecord render_scene(const ShapeWorldConfig& cfg, const SceneLayout& layout, int frames);

SampleRecord gen_image_sample(const ShapeWorldConfig& cfg, std::uint64_t seed);
SampleRecord gen_video_sample(const ShapeWorldConfig& cfg, std::uint64_t seed, int frames);
/// Two-frame clip: the image and a wrapped translation of it by up to
/// shift_max * min(H, W) pixels per axis.
SampleRecord make_pseudo_video(const SampleRecord& image, double shift_max, std::uint64_t seed);
/// Per entity: a tight box prompt, then a positive point at the centroid
/// snapped to the nearest foreground pixel.
std::vector<PromptTarget> derive_prompts(const EntitySet& targets, std::uint64_t seed);

struct DatasetShare {
  std::string name;
  int size = 0;
  int ratio = 1;
};

struct SamplerDraw {
  std::string dataset;
  int dataset_index = 0;  // position in the shares list
  int index = 0;          // sample index within that dataset
};

/// Stratified round robin: every block of sum(ratio) draws holds each
/// dataset exactly `ratio` times in seeded order. Per-dataset indices walk
/// one seeded permutation, repeated.
class BalancedSampler {
 public:
  BalancedSampler(std::vector<DatasetShare> shares, std::uint64_t seed);
  SamplerDraw next();
  const std::vector<DatasetShare>& shares() const { return shares_; }

 private:
  void refill_block();

  std::vector<DatasetShare> shares_;
  Rng rng_;
  std::vector<std::vector<int>> permutations_;
  std::vector<std::size_t> cursors_;
  std::vector<int> block_;
  std::size_t block_pos_ = 0;
};

// On-disk layout: <dir>/<index>.json plus <index>_f<t>.png per frame.
void write_sample(const std::filesystem::path& dir, int index, const SampleRecord& s);
SampleRecord read_sample(const std::filesystem::path& json_path);
std::vector<SampleRecord> load_split(const std::filesystem::path& dir);

}  // namespace omgseg
