#include "omgseg/decoder.hpp"

#include <cmath>

namespace omgseg {

namespace {

constexpr std::uint64_t kTextSeed = 0x7465787431ULL;

std::string layer_prefix(int l) { return "decoder.l" + std::to_string(l) + "."; }

struct QueryGroup {
  ad::Var x;
  ad::Var qpos;
  ad::Matrix prev_mask;
  ad::Var mask_logits;
  ad::Var class_logits;
};

ad::Var mlp3(ad::Tape& tape, const ad::ParameterStore& store, const std::string& name, ad::Var x) {
  x = ad::relu(apply_linear(tape, store, name + "0", x));
  x = ad::relu(apply_linear(tape, store, name + "1", x));
  return apply_linear(tape, store, name + "2", x);
}

// Average-pools per-frame stride-8 logits onto a coarser level grid and
// marks keys whose pooled foreground probability is not above 0.5.
std::vector<std::uint8_t> blocked_keys(const ad::Matrix& mask, int frames, int gh, int gw, int lh, int lw) {
  const int fy = gh / lh, fx = gw / lw;
  const double inv = 1.0 / (fy * fx);
  const auto rows = mask.rows();
  const std::size_t keys = static_cast<std::size_t>(frames) * lh * lw;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(rows) * keys);
  for (Eigen::Index q = 0; q < rows; ++q) {
    std::size_t k = static_cast<std::size_t>(q) * keys;
    for (int t = 0; t < frames; ++t) {
      for (int y = 0; y < lh; ++y) {
        for (int x = 0; x < lw; ++x) {
          double s = 0;
          for (int dy = 0; dy < fy; ++dy)
            for (int dx = 0; dx < fx; ++dx)
              s += mask(q, (static_cast<Eigen::Index>(t) * gh + y * fy + dy) * gw + x * fx + dx);
          out[k++] = s * inv > 0.0 ? 0 : 1;
        }
      }
    }
  }
  return out;
}

}  // namespace

std::string_view to_string(DecodeMode m) {
  switch (m) {
    case DecodeMode::image: return "image";
    case DecodeMode::video: return "video";
    case DecodeMode::interactive: return "interactive";
    case DecodeMode::joint: return "joint";
  }
  return "image";
}

DecodeMode decode_mode_from_string(std::string_view s) {
  if (s == "image") return DecodeMode::image;
  if (s == "video") return DecodeMode::video;
  if (s == "interactive") return DecodeMode::interactive;
  if (s == "joint") return DecodeMode::joint;
  throw ConfigError("unknown decode mode: " + std::string(s));
}

PredictionSet to_values(const DecoderGraph& g) {
  PredictionSet p;
  p.num_semantic = g.num_semantic;
  p.num_location = g.num_location;
  p.frames = g.frames;
  p.grid_height = g.grid_height;
  p.grid_width = g.grid_width;
  p.input_height = g.input_height;
  p.input_width = g.input_width;
  for (const auto& l : g.layers) p.layers.push_back({l.mask_logits.value(), l.class_logits.value(), l.queries.value()});
  return p;
}

EncodedPrompts encode_prompts(ad::Tape& tape, const ad::ParameterStore& store, const PositionEncoder& pos,
                              const std::vector<VisualPrompt>& prompts) {
  const int d = pos.dim();
  EncodedPrompts out;
  ad::Matrix fourier(static_cast<Eigen::Index>(prompts.size()), d);
  out.anchors = ad::Matrix(static_cast<Eigen::Index>(prompts.size()), d);
  std::vector<int> types;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    // revalidate: default-constructed or deserialized prompts pass through here
    const auto& p = prompts[i];
    const auto c = p.coords();
    VisualPrompt checked(p.kind(), std::vector<double>(c.begin(), c.end()));
    const auto r = static_cast<Eigen::Index>(i);
    if (p.is_box()) {
      fourier.row(r) = pos.encode_xy(c[0], c[1]) + pos.encode_xy(c[2], c[3]);
    } else {
      fourier.row(r) = pos.encode_xy(c[0], c[1]);
    }
    const auto a = p.anchor();
    out.anchors.row(r) = pos.encode_xy(a[0], a[1]);
    types.push_back(static_cast<int>(p.kind()));
  }
  const auto type_rows = ad::gather_rows(tape.parameter(store.get("prompt.type_embed")), types);
  out.content = ad::add(tape.constant(std::move(fourier)), type_rows);
  return out;
}

OmgSegModel::OmgSegModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  validate(cfg_);
  init();
}

OmgSegModel::OmgSegModel(ModelConfig cfg, ad::ParameterStore params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  validate(cfg_);
  pos_ = PositionEncoder(params_.get("pos.freq").value);
  text_ = std::make_shared<HashTextEncoder>(cfg_.dim, kTextSeed);
  // every parameter the architecture expects must be present with its shape
  OmgSegModel fresh(cfg_);
  for (const auto* p : fresh.params().all()) {
    if (!params_.contains(p->name)) throw DataError("checkpoint lacks parameter " + p->name);
    const auto& v = params_.get(p->name).value;
    if (v.rows() != p->value.rows() || v.cols() != p->value.cols())
      throw DataError("checkpoint parameter has wrong shape: " + p->name);
  }
  if (params_.size() != fresh.params().size()) throw DataError("checkpoint has unexpected parameters");
}

void OmgSegModel::set_text_encoder(std::shared_ptr<const TextEncoder> enc) {
  if (!enc || enc->dim() != cfg_.dim) throw ConfigError("text encoder dim must equal model dim");
  text_ = std::move(enc);
}

void OmgSegModel::init() {
  Rng rng(cfg_.seed);
  const int d = cfg_.dim;
  text_ = std::make_shared<HashTextEncoder>(d, kTextSeed);
  FrozenBackbone(cfg_).init(params_, rng);
  pos_ = PositionEncoder(d, cfg_.fourier_scale, cfg_.seed);
  params_.add("pos.freq", pos_.frequencies(), false);
  PixelDecoder(cfg_).init(params_, rng);

  ad::Matrix content(cfg_.num_queries, d), qpos(cfg_.num_queries, d), types(3, d);
  for (Eigen::Index k = 0; k < content.size(); ++k) content.data()[k] = rng.normal();
  for (Eigen::Index k = 0; k < qpos.size(); ++k) qpos.data()[k] = rng.normal();
  for (Eigen::Index k = 0; k < types.size(); ++k) types.data()[k] = 0.5 * rng.normal();
  params_.add("queries.content", std::move(content));
  params_.add("queries.pos", std::move(qpos));
  params_.add("prompt.type_embed", std::move(types));

  for (int l = 0; l < cfg_.num_layers; ++l) {
    const std::string b = layer_prefix(l);
    add_layer_norm(params_, b + "ln_c", d);
    add_linear(params_, b + "cq", d, d, rng);
    add_linear(params_, b + "ck", d, d, rng);
    add_linear(params_, b + "cv", d, d, rng);
    add_linear(params_, b + "co", d, d, rng);
    add_layer_norm(params_, b + "ln_s", d);
    add_linear(params_, b + "sq", d, d, rng);
    add_linear(params_, b + "sk", d, d, rng);
    add_linear(params_, b + "sv", d, d, rng);
    add_linear(params_, b + "so", d, d, rng);
    add_layer_norm(params_, b + "ln_f", d);
    add_linear(params_, b + "ffn1", d, cfg_.decoder_ffn, rng);
    add_linear(params_, b + "ffn2", cfg_.decoder_ffn, d, rng);
  }
  add_layer_norm(params_, "head.ln", d);
  for (int i = 0; i < 3; ++i) add_linear(params_, "head.mask" + std::to_string(i), d, d, rng, true, i == 2 ? 0.5 : 1.0);
  for (int i = 0; i < 3; ++i) add_linear(params_, "head.cls" + std::to_string(i), d, d, rng);
  params_.add("head.logit_scale", ad::Matrix::Constant(1, 1, std::log(1.0 / 0.07)));
  ad::Matrix no_obj(1, d);
  for (Eigen::Index k = 0; k < no_obj.size(); ++k) no_obj.data()[k] = 0.1 * rng.normal();
  params_.add("head.no_object", std::move(no_obj));
}

MultiScaleFeatures OmgSegModel::extract(const Clip& clip) const { return FrozenBackbone(cfg_).extract(params_, clip); }

FusedFeatures OmgSegModel::fuse(const MultiScaleFeatures& frozen) const {
  ad::Tape tape(false);
  return PixelDecoder::values(PixelDecoder(cfg_).fuse(tape, params_, pos_, frozen));
}

ClassEmbeddingMatrix OmgSegModel::embeddings(const ClassVocabulary& vocab) const {
  auto m = class_embeddings(vocab, *text_);
  m.no_object = params_.get("head.no_object").value.row(0);
  return m;
}

DecoderGraph OmgSegModel::decode(ad::Tape& tape, const PixelDecoder::Graph& fused,
                                 const std::vector<VisualPrompt>& prompts, const ad::Matrix& class_rows,
                                 DecodeMode mode, const DecoderOptions& opts) const {
  const int d = cfg_.dim;
  if (class_rows.cols() != d || class_rows.rows() < 1) throw ShapeError("class rows must be K x D with K >= 1");
  const auto& top = fused.shapes[2];
  const int frames = top[0], gh = top[1], gw = top[2];
  if (mode == DecodeMode::image && frames != 1) throw ShapeError("image mode takes exactly one frame");
  const bool semantic = mode != DecodeMode::interactive;
  const bool location = mode == DecodeMode::interactive || mode == DecodeMode::joint;
  if (mode == DecodeMode::interactive && prompts.empty()) throw ShapeError("interactive mode needs prompts");
  if (!location && !prompts.empty()) throw ShapeError("prompts given to a semantic-only mode");

  DecoderGraph g;
  g.frames = frames;
  g.grid_height = gh;
  g.grid_width = gw;
  g.input_height = fused.input_height;
  g.input_width = fused.input_width;

  std::array<ad::Var, 3> mem = fused.levels;
  std::array<ad::Var, 3> mem_pos;
  for (int j = 0; j < 3; ++j) mem_pos[static_cast<std::size_t>(j)] = ad::add(mem[static_cast<std::size_t>(j)], tape.constant(fused.positions[static_cast<std::size_t>(j)]));
  const ad::Var pixel = mem[2];

  ad::Matrix rows_normed = class_rows;
  for (Eigen::Index k = 0; k < rows_normed.rows(); ++k) {
    const double n = rows_normed.row(k).norm();
    if (n > 0) rows_normed.row(k) /= n;
  }
  const ad::Var class_const = tape.constant(std::move(rows_normed));
  const ad::Var logit_scale = ad::exp(tape.parameter(params_.get("head.logit_scale")));
  const ad::Var no_object = tape.parameter(params_.get("head.no_object"));

  auto heads = [&](QueryGroup& q) {
    auto h = apply_layer_norm(tape, params_, "head.ln", q.x);
    q.mask_logits = ad::matmul_nt(mlp3(tape, params_, "head.mask", h), pixel);
    auto c = mlp3(tape, params_, "head.cls", h);
    auto sim = ad::scale_by(ad::matmul_nt(ad::row_normalize(c), class_const), logit_scale);
    q.class_logits = ad::concat_cols({sim, ad::matmul_nt(c, no_object)});
    q.prev_mask = q.mask_logits.value();
  };

  std::vector<QueryGroup> groups;
  if (semantic) {
    QueryGroup s;
    s.x = tape.parameter(params_.get("queries.content"));
    s.qpos = tape.parameter(params_.get("queries.pos"));
    groups.push_back(std::move(s));
    g.num_semantic = cfg_.num_queries;
  }
  if (location) {
    auto enc = encode_prompts(tape, params_, pos_, prompts);
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      QueryGroup q;
      q.x = ad::slice_rows(enc.content, static_cast<Eigen::Index>(i), 1);
      q.qpos = tape.constant(enc.anchors.row(static_cast<Eigen::Index>(i)));
      groups.push_back(std::move(q));
    }
    g.num_location = static_cast<int>(prompts.size());
  }

  auto emit = [&] {
    std::vector<ad::Var> m, c, x;
    for (auto& q : groups) {
      m.push_back(q.mask_logits);
      c.push_back(q.class_logits);
      x.push_back(q.x);
    }
    g.layers.push_back({ad::concat_rows(m), ad::concat_rows(c), ad::concat_rows(x)});
  };
  auto self_attention = [&](const std::string& b, ad::Var x, const ad::Var& qpos) {
    auto h = apply_layer_norm(tape, params_, b + "ln_s", x);
    auto hp = ad::add(h, qpos);
    auto a = ad::attention(apply_linear(tape, params_, b + "sq", hp), apply_linear(tape, params_, b + "sk", hp),
                           apply_linear(tape, params_, b + "sv", h), cfg_.heads);
    return ad::add(x, apply_linear(tape, params_, b + "so", a));
  };

  for (auto& q : groups) heads(q);
  emit();

  for (int l = 0; l < cfg_.num_layers; ++l) {
    const int j = l % 3;
    const std::string b = layer_prefix(l);
    const auto& shape = fused.shapes[static_cast<std::size_t>(j)];
    const auto k = apply_linear(tape, params_, b + "ck", mem_pos[static_cast<std::size_t>(j)]);
    const auto v = apply_linear(tape, params_, b + "cv", mem[static_cast<std::size_t>(j)]);

    for (auto& q : groups) {
      const auto blocked = blocked_keys(q.prev_mask, frames, gh, gw, shape[1], shape[2]);
      auto h = apply_layer_norm(tape, params_, b + "ln_c", q.x);
      auto query = apply_linear(tape, params_, b + "cq", ad::add(h, q.qpos));
      q.x = ad::add(q.x, apply_linear(tape, params_, b + "co", ad::attention(query, k, v, cfg_.heads, blocked)));
    }

    if (opts.isolate_location_queries || groups.size() == 1) {
      if (semantic) groups[0].x = self_attention(b, groups[0].x, groups[0].qpos);
    } else {
      std::vector<ad::Var> xs, ps;
      for (auto& q : groups) {
        xs.push_back(q.x);
        ps.push_back(q.qpos);
      }
      auto all = self_attention(b, ad::concat_rows(xs), ad::concat_rows(ps));
      Eigen::Index start = 0;
      for (auto& q : groups) {
        const auto n = q.x.rows();
        q.x = ad::slice_rows(all, start, n);
        start += n;
      }
    }

    for (auto& q : groups) {
      auto h = apply_layer_norm(tape, params_, b + "ln_f", q.x);
      q.x = ad::add(q.x, apply_linear(tape, params_, b + "ffn2", ad::relu(apply_linear(tape, params_, b + "ffn1", h))));
      heads(q);
    }
    emit();
  }
  return g;
}

DecoderGraph OmgSegModel::build(ad::Tape& tape, const MultiScaleFeatures& frozen,
                                const std::vector<VisualPrompt>& prompts, const ad::Matrix& class_rows,
                                DecodeMode mode, const DecoderOptions& opts) const {
  const auto fused = PixelDecoder(cfg_).fuse(tape, params_, pos_, frozen);
  return decode(tape, fused, prompts, class_rows, mode, opts);
}

PredictionSet OmgSegModel::forward(const Clip& clip, const std::vector<VisualPrompt>& prompts,
                                   const ad::Matrix& class_rows, DecodeMode mode, const DecoderOptions& opts) const {
  ad::Tape tape(false);
  return to_values(build(tape, extract(clip), prompts, class_rows, mode, opts));
}

PredictionSet OmgSegModel::forward_fused(const FusedFeatures& fused, const std::vector<VisualPrompt>& prompts,
                                         const ad::Matrix& class_rows, DecodeMode mode,
                                         const DecoderOptions& opts) const {
  ad::Tape tape(false);
  return to_values(decode(tape, PixelDecoder::from_values(tape, fused), prompts, class_rows, mode, opts));
}

std::vector<std::string> OmgSegModel::decoder_parameter_names(DecodeMode mode) const {
  std::vector<std::string> out;
  for (const auto* p : params_.all()) {
    const auto& n = p->name;
    const bool shared = n.starts_with("decoder.") || n.starts_with("head.");
    const bool sem = n.starts_with("queries.") && mode != DecodeMode::interactive;
    const bool loc = n.starts_with("prompt.") && (mode == DecodeMode::interactive || mode == DecodeMode::joint);
    if (shared || sem || loc) out.push_back(n);
  }
  return out;
}

ParamsReport params_report(const ModelConfig& cfg) {
  const OmgSegModel m(cfg);
  const auto& s = m.params();
  ParamsReport r;
  r.backbone = s.count(FrozenBackbone::kPrefix) + s.count("pos.");
  r.pixel_decoder = s.count(PixelDecoder::kPrefix);
  r.queries_and_prompts = s.count("queries.") + s.count("prompt.");
  r.decoder_layers = s.count("decoder.");
  r.heads = s.count("head.");
  r.shared_total = s.count();
  r.decoupled_total = r.shared_total + 2 * (r.decoder_layers + r.heads);
  for (const auto* p : s.all())
    if (p->trainable) r.trainable_shared += static_cast<std::size_t>(p->value.size());
  if (!(r.shared_total < r.decoupled_total)) throw ConfigError("shared decoder is not smaller than decoupled");
  return r;
}

std::size_t decoder_and_head_closed_form(const ModelConfig& cfg) {
  const std::size_t d = static_cast<std::size_t>(cfg.dim), f = static_cast<std::size_t>(cfg.decoder_ffn);
  const std::size_t per_layer = 3 * 2 * d + 8 * (d * d + d) + (d * f + f) + (f * d + d);
  const std::size_t heads = 2 * d + 6 * (d * d + d) + 1 + d;
  return static_cast<std::size_t>(cfg.num_layers) * per_layer + heads;
}

}  // namespace omgseg
