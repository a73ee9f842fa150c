#pragma once

#include <memory>
#include <string>
#include <vector>

#include "omgseg/ad.hpp"
#include "omgseg/core.hpp"
#include "omgseg/features.hpp"

namespace omgseg {

enum class DecodeMode { image, video, interactive, joint };

std::string_view to_string(DecodeMode m);
DecodeMode decode_mode_from_string(std::string_view s);

struct DecoderOptions {
  /// Test-only: false lets location queries join the semantic self-attention.
  bool isolate_location_queries = true;
};

/// Per-layer graph outputs. Rows: semantic queries first, then one row per prompt.
struct LayerGraph {
  ad::Var mask_logits;   // rows x (T * gh * gw)
  ad::Var class_logits;  // rows x (K + 1)
  ad::Var queries;       // rows x D
};

struct DecoderGraph {
  std::vector<LayerGraph> layers;  // L + 1 slots, slot 0 from the initial queries
  int num_semantic = 0;
  int num_location = 0;
  int frames = 1;
  int grid_height = 0;
  int grid_width = 0;
  int input_height = 0;
  int input_width = 0;
};

struct PredictionSet {
  struct Layer {
    ad::Matrix mask_logits;
    ad::Matrix class_logits;
    ad::Matrix queries;
  };
  std::vector<Layer> layers;
  int num_semantic = 0;
  int num_location = 0;
  int frames = 1;
  int grid_height = 0;
  int grid_width = 0;
  int input_height = 0;
  int input_width = 0;

  const Layer& final_layer() const { return layers.back(); }
  int cells() const { return grid_height * grid_width; }
};

PredictionSet to_values(const DecoderGraph& g);

/// Location queries: Fourier(x, y) + type embedding for points, the sum of
/// both corner encodings + box embedding for boxes. Also returns the
/// positional part (anchor encoding) used alongside each query.
struct EncodedPrompts {
  ad::Var content;    // N_l x D (may have 0 rows)
  ad::Matrix anchors; // N_l x D
};
EncodedPrompts encode_prompts(ad::Tape& tape, const ad::ParameterStore& store, const PositionEncoder& pos,
                              const std::vector<VisualPrompt>& prompts);

/// Owns every parameter: frozen backbone, pixel decoder, queries, prompt
/// encoder, shared decoder layers and heads.
class OmgSegModel {
 public:
  explicit OmgSegModel(ModelConfig cfg);
  OmgSegModel(ModelConfig cfg, ad::ParameterStore params);

  const ModelConfig& config() const { return cfg_; }
  ad::ParameterStore& params() { return params_; }
  const ad::ParameterStore& params() const { return params_; }
  const PositionEncoder& positions() const { return pos_; }
  const TextEncoder& text_encoder() const { return *text_; }
  void set_text_encoder(std::shared_ptr<const TextEncoder> enc);

  MultiScaleFeatures extract(const Clip& clip) const;
  FusedFeatures fuse(const MultiScaleFeatures& frozen) const;
  /// Class rows from the text encoder plus the learned no-object row.
  ClassEmbeddingMatrix embeddings(const ClassVocabulary& vocab) const;

  /// Differentiable decode over a fused-feature graph. `class_rows` is K x D.
  DecoderGraph decode(ad::Tape& tape, const PixelDecoder::Graph& fused, const std::vector<VisualPrompt>& prompts,
                      const ad::Matrix& class_rows, DecodeMode mode, const DecoderOptions& opts = {}) const;
  /// Fuse + decode on one tape.
  DecoderGraph build(ad::Tape& tape, const MultiScaleFeatures& frozen, const std::vector<VisualPrompt>& prompts,
                     const ad::Matrix& class_rows, DecodeMode mode, const DecoderOptions& opts = {}) const;

  PredictionSet forward(const Clip& clip, const std::vector<VisualPrompt>& prompts, const ad::Matrix& class_rows,
                        DecodeMode mode, const DecoderOptions& opts = {}) const;
  PredictionSet forward_fused(const FusedFeatures& fused, const std::vector<VisualPrompt>& prompts,
                              const ad::Matrix& class_rows, DecodeMode mode, const DecoderOptions& opts = {}) const;

  /// Parameters read by the decoder for a mode (shared across modes by construction).
  std::vector<std::string> decoder_parameter_names(DecodeMode mode) const;

 private:
  void init();

  ModelConfig cfg_;
  ad::ParameterStore params_;
  PositionEncoder pos_;
  std::shared_ptr<const TextEncoder> text_;
};

struct ParamsReport {
  std::size_t backbone = 0;
  std::size_t pixel_decoder = 0;
  std::size_t queries_and_prompts = 0;
  std::size_t decoder_layers = 0;
  std::size_t heads = 0;
  std::size_t shared_total = 0;
  std::size_t decoupled_total = 0;
  std::size_t trainable_shared = 0;
};

/// Shared decoder vs one decoder+heads copy per task (image, video, interactive).
ParamsReport params_report(const ModelConfig& cfg);
/// Closed-form parameter count of all decoder layers plus heads.
std::size_t decoder_and_head_closed_form(const ModelConfig& cfg);

}  // namespace omgseg
