#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "omgseg/ad.hpp"
#include "omgseg/core.hpp"
#include "omgseg/rng.hpp"

namespace omgseg {

struct ModelConfig {
  int dim = 64;
  int num_queries = 20;
  int num_layers = 9;
  int heads = 4;
  int pixel_rounds = 2;
  int pixel_ffn = 128;
  int decoder_ffn = 256;
  std::array<int, 3> backbone_channels{128, 64, 32};  // levels 1..3 (strides 32, 16, 8)
  double fourier_scale = 3.0;
  double pool_logit_scale = 100.0;  // temperature of the mask-pooled open-vocabulary score
  std::uint64_t seed = 7;
};

void validate(const ModelConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

inline constexpr std::array<int, 3> kLevelStrides{32, 16, 8};

/// One pyramid level: tokens laid out as ((t * height) + y) * width + x.
struct FeatureLevel {
  int frames = 1;
  int height = 0;
  int width = 0;
  ad::Matrix data;  // tokens x channels
  int stride = 8;
};

/// Frozen features; level index 0..2 holds j = 1..3, level 2 is stride 8.
struct MultiScaleFeatures {
  int input_height = 0;
  int input_width = 0;
  std::array<FeatureLevel, 3> levels;
};

/// Fused pixel-decoder output with a common channel dim.
struct FusedFeatures {
  int input_height = 0;
  int input_width = 0;
  std::array<FeatureLevel, 3> levels;
  std::array<ad::Matrix, 3> positions;  // per-token 3D positional encodings
};

/// Rows are unit-norm class embeddings; the no-object row is learned.
struct ClassEmbeddingMatrix {
  ad::Matrix class_rows;           // K x D
  Eigen::RowVectorXd no_object;    // 1 x D
  int rows() const { return static_cast<int>(class_rows.rows()) + 1; }
};

/// Text encoder slot: the default hashes words to seeded Gaussian vectors.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual int dim() const = 0;
  virtual Eigen::RowVectorXd encode(std::string_view text) const = 0;
};

class HashTextEncoder final : public TextEncoder {
 public:
  HashTextEncoder(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {}
  int dim() const override { return dim_; }
  /// Normalized sum of per-word vectors (lowercase alphanumeric words).
  Eigen::RowVectorXd encode(std::string_view text) const override;

 private:
  int dim_;
  std::uint64_t seed_;
};

const std::vector<std::string>& prompt_templates();

/// Template-averaged, L2-normalized class rows; no-object row left zero.
ClassEmbeddingMatrix class_embeddings(const ClassVocabulary& vocab, const TextEncoder& encoder);

/// Fixed random-Fourier (x, y) encoding plus a sinusoidal time term that is
/// identically zero at t = 0.
class PositionEncoder {
 public:
  PositionEncoder() = default;
  PositionEncoder(int dim, double scale, std::uint64_t seed);
  explicit PositionEncoder(ad::Matrix frequencies) : freq_(std::move(frequencies)) {}

  int dim() const { return static_cast<int>(freq_.rows()) * 2; }
  const ad::Matrix& frequencies() const { return freq_; }
  Eigen::RowVectorXd encode_xy(double x, double y) const;
  Eigen::RowVectorXd encode_t(int t) const;
  /// Encodings for every token of a level grid.
  ad::Matrix encode_grid(int frames, int height, int width, int stride, int input_height,
                         int input_width) const;

 private:
  ad::Matrix freq_;  // (dim/2) x 2
};

/// Strided ReLU conv stack with seeded fixed weights plus a fixed visual
/// projection into the text-embedding space.
class FrozenBackbone {
 public:
  static constexpr const char* kPrefix = "backbone.";

  explicit FrozenBackbone(const ModelConfig& cfg) : cfg_(cfg) {}
  void init(ad::ParameterStore& store, Rng& rng) const;
  /// Zero-pads to a multiple of 32. Throws ShapeError on empty input.
  MultiScaleFeatures extract(const ad::ParameterStore& store, const Clip& clip) const;
  /// Projects pooled level-3 features (1 x C3) into embedding space (1 x D).
  Eigen::RowVectorXd project(const ad::ParameterStore& store, const Eigen::RowVectorXd& pooled) const;

 private:
  ModelConfig cfg_;
};

/// Ridge fit of the visual projection from mask-pooled level-3 features to
/// the text embedding of each region's class name.
struct AlignmentExample {
  Eigen::RowVectorXd pooled;
  int class_id = 0;
};
void fit_visual_projection(ad::ParameterStore& store, const std::vector<AlignmentExample>& examples,
                           const ClassEmbeddingMatrix& embeds, double ridge = 1e-3);

/// Mean of level-3 features over the cells a pixel mask covers by majority.
/// Returns nullopt when no cell is covered.
std::optional<Eigen::RowVectorXd> pool_level3(const MultiScaleFeatures& feats, const BinaryMask& mask,
                                              int frame = 0);

/// Per-level 1x1 projection then rounds of self-attention over the
/// concatenated tokens of all levels.
class PixelDecoder {
 public:
  static constexpr const char* kPrefix = "pixel.";

  struct Graph {
    std::array<ad::Var, 3> levels;
    std::array<ad::Matrix, 3> positions;
    std::array<std::array<int, 3>, 3> shapes;  // frames, height, width
    int input_height = 0;
    int input_width = 0;
    std::size_t tokens = 0;
  };

  explicit PixelDecoder(const ModelConfig& cfg) : cfg_(cfg) {}
  void init(ad::ParameterStore& store, Rng& rng) const;
  Graph fuse(ad::Tape& tape, const ad::ParameterStore& store, const PositionEncoder& pos,
             const MultiScaleFeatures& frozen) const;
  static FusedFeatures values(const Graph& g);
  /// Leaf graph over cached fused values.
  static Graph from_values(ad::Tape& tape, const FusedFeatures& fused);

 private:
  ModelConfig cfg_;
};

/// Glorot-uniform weight (in x out) and zero bias registered as <name>.weight / <name>.bias.
void add_linear(ad::ParameterStore& store, const std::string& name, int in, int out, Rng& rng,
                bool trainable = true, double gain = 1.0);
void add_layer_norm(ad::ParameterStore& store, const std::string& name, int dim);
ad::Var apply_linear(ad::Tape& tape, const ad::ParameterStore& store, const std::string& name, const ad::Var& x);
ad::Var apply_layer_norm(ad::Tape& tape, const ad::ParameterStore& store, const std::string& name,
                         const ad::Var& x);

}  // namespace omgseg
