#include "omgseg/features.hpp"

#include <cctype>
#include <cmath>

#include "omgseg/io.hpp"

namespace omgseg {

void validate(const ModelConfig& c) {
  if (c.dim < 4 || c.dim % 2 != 0) throw ConfigError("model.dim must be an even number >= 4");
  if (c.heads < 1 || c.dim % c.heads != 0) throw ConfigError("model.heads must divide model.dim");
  if (c.num_queries < 1) throw ConfigError("model.num_queries must be >= 1");
  if (c.num_layers < 1) throw ConfigError("model.num_layers must be >= 1");
  if (c.pixel_rounds < 0) throw ConfigError("model.pixel_rounds must be >= 0");
  if (c.pixel_ffn < 1 || c.decoder_ffn < 1) throw ConfigError("ffn widths must be >= 1");
  for (int ch : c.backbone_channels)
    if (ch < 1) throw ConfigError("backbone channels must be >= 1");
  if (!(c.fourier_scale > 0) || !(c.pool_logit_scale > 0)) throw ConfigError("scales must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"dim", c.dim},
       {"num_queries", c.num_queries},
       {"num_layers", c.num_layers},
       {"heads", c.heads},
       {"pixel_rounds", c.pixel_rounds},
       {"pixel_ffn", c.pixel_ffn},
       {"decoder_ffn", c.decoder_ffn},
       {"backbone_channels", c.backbone_channels},
       {"fourier_scale", c.fourier_scale},
       {"pool_logit_scale", c.pool_logit_scale},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  io::reject_unknown_keys(j,
                          {"dim", "num_queries", "num_layers", "heads", "pixel_rounds", "pixel_ffn",
                           "decoder_ffn", "backbone_channels", "fourier_scale", "pool_logit_scale", "seed"},
                          "model");
  try {
    c.dim = j.value("dim", c.dim);
    c.num_queries = j.value("num_queries", c.num_queries);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.heads = j.value("heads", c.heads);
    c.pixel_rounds = j.value("pixel_rounds", c.pixel_rounds);
    c.pixel_ffn = j.value("pixel_ffn", c.pixel_ffn);
    c.decoder_ffn = j.value("decoder_ffn", c.decoder_ffn);
    c.backbone_channels = j.value("backbone_channels", c.backbone_channels);
    c.fourier_scale = j.value("fourier_scale", c.fourier_scale);
    c.pool_logit_scale = j.value("pool_logit_scale", c.pool_logit_scale);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  validate(c);
}

// ------------------------------------------------------------ text side

Eigen::RowVectorXd HashTextEncoder::encode(std::string_view text) const {
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(dim_);
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    Rng rng(mix_seed(seed_, fnv1a64(word)));
    for (int i = 0; i < dim_; ++i) out(i) += rng.normal();
    word.clear();
  };
  for (char ch : text) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    } else {
      flush();
    }
  }
  flush();
  const double n = out.norm();
  if (n > 0) out /= n;
  return out;
}

const std::vector<std::string>& prompt_templates() {
  static const std::vector<std::string> t{
      "a photo of a {}.",
      "a rendering of a {}.",
      "there is a {} in the scene.",
      "a picture showing the {}.",
  };
  return t;
}

ClassEmbeddingMatrix class_embeddings(const ClassVocabulary& vocab, const TextEncoder& encoder) {
  if (vocab.size() == 0) throw ConfigError("class vocabulary is empty");
  for (int i = 0; i < vocab.size(); ++i)
    for (int k = 0; k < i; ++k)
      if (vocab.name(i) == vocab.name(k)) throw DuplicateClassName(vocab.name(i));
  ClassEmbeddingMatrix m;
  m.class_rows = ad::Matrix::Zero(vocab.size(), encoder.dim());
  m.no_object = Eigen::RowVectorXd::Zero(encoder.dim());
  const auto& templates = prompt_templates();
  for (int i = 0; i < vocab.size(); ++i) {
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(encoder.dim());
    for (const auto& t : templates) {
      std::string s = t;
      s.replace(s.find("{}"), 2, vocab.name(i));
      acc += encoder.encode(s);
    }
    const double n = acc.norm();
    if (n == 0) throw ConfigError("class name has no words: '" + vocab.name(i) + "'");
    m.class_rows.row(i) = acc / n;
  }
  return m;
}

// ------------------------------------------------------------ positions

PositionEncoder::PositionEncoder(int dim, double scale, std::uint64_t seed) {
  if (dim < 2 || dim % 2 != 0) throw ConfigError("position encoding dim must be even");
  Rng rng(mix_seed(seed, 0x706f73ULL));
  freq_ = ad::Matrix(dim / 2, 2);
  for (Eigen::Index i = 0; i < freq_.size(); ++i) freq_.data()[i] = scale * rng.normal();
}

Eigen::RowVectorXd PositionEncoder::encode_xy(double x, double y) const {
  const auto half = freq_.rows();
  Eigen::RowVectorXd out(2 * half);
  for (Eigen::Index i = 0; i < half; ++i) {
    const double phase = 2.0 * M_PI * (freq_(i, 0) * x + freq_(i, 1) * y);
    out(i) = std::sin(phase);
    out(i + half) = std::cos(phase);
  }
  return out;
}

Eigen::RowVectorXd PositionEncoder::encode_t(int t) const {
  const auto half = freq_.rows();
  Eigen::RowVectorXd out(2 * half);
  for (Eigen::Index i = 0; i < half; ++i) {
    const double w = std::pow(100.0, -static_cast<double>(i) / static_cast<double>(half));
    out(i) = std::sin(w * t);
    out(i + half) = std::cos(w * t) - 1.0;
  }
  return out;
}

ad::Matrix PositionEncoder::encode_grid(int frames, int height, int width, int stride, int input_height,
                                        int input_width) const {
  ad::Matrix out(static_cast<Eigen::Index>(frames) * height * width, dim());
  Eigen::Index r = 0;
  for (int t = 0; t < frames; ++t) {
    const Eigen::RowVectorXd te = encode_t(t);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        out.row(r++) = encode_xy((x + 0.5) * stride / input_width, (y + 0.5) * stride / input_height) + te;
      }
    }
  }
  return out;
}

// ------------------------------------------------------------- backbone

namespace {

struct ConvSpec {
  int in;
  int out;
};

std::array<ConvSpec, 5> conv_specs(const ModelConfig& c) {
  const auto [c1, c2, c3] = c.backbone_channels;
  return {{{3, 16}, {16, 32}, {32, c3}, {c3, c2}, {c2, c1}}};
}

std::string conv_name(int i) { return std::string(FrozenBackbone::kPrefix) + "conv" + std::to_string(i); }

// 3x3, stride 2, zero padding 1, ReLU. Input and output are (h*w) x c.
ad::Matrix conv_s2(const ad::Matrix& x, int h, int w, const ad::Matrix& weight, const ad::Matrix& bias) {
  const int ho = h / 2, wo = w / 2;
  const auto cin = x.cols();
  ad::Matrix cols = ad::Matrix::Zero(static_cast<Eigen::Index>(ho) * wo, 9 * cin);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const Eigen::Index r = static_cast<Eigen::Index>(oy) * wo + ox;
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = 2 * oy + ky - 1;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = 2 * ox + kx - 1;
          if (ix < 0 || ix >= w) continue;
          cols.row(r).segment((ky * 3 + kx) * cin, cin) = x.row(static_cast<Eigen::Index>(iy) * w + ix);
        }
      }
    }
  }
  ad::Matrix out = cols * weight;
  out.rowwise() += bias.row(0);
  return out.cwiseMax(0.0);
}

}  // namespace

void FrozenBackbone::init(ad::ParameterStore& store, Rng& rng) const {
  const auto specs = conv_specs(cfg_);
  for (int i = 0; i < 5; ++i) {
    const auto [in, out] = specs[static_cast<std::size_t>(i)];
    ad::Matrix w(9 * in, out);
    const double sd = std::sqrt(2.0 / (9.0 * in));
    for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = sd * rng.normal();
    ad::Matrix b(1, out);
    for (Eigen::Index k = 0; k < b.size(); ++k) b.data()[k] = 0.1 * rng.normal();
    store.add(conv_name(i) + ".weight", std::move(w), false);
    store.add(conv_name(i) + ".bias", std::move(b), false);
  }
  const int c3 = cfg_.backbone_channels[2];
  ad::Matrix proj(c3 + 1, cfg_.dim);
  const double sd = 1.0 / std::sqrt(static_cast<double>(c3));
  for (Eigen::Index k = 0; k < proj.size(); ++k) proj.data()[k] = sd * rng.normal();
  store.add(std::string(kPrefix) + "visual_proj", std::move(proj), false);
}

MultiScaleFeatures FrozenBackbone::extract(const ad::ParameterStore& store, const Clip& clip) const {
  if (clip.empty()) throw ShapeError("empty input clip");
  const int h = clip.front().height, w = clip.front().width;
  if (h < 1 || w < 1) throw ShapeError("empty input image");
  for (const auto& f : clip)
    if (f.height != h || f.width != w) throw ShapeError("clip frames differ in size");
  const int hp = (h + 31) / 32 * 32, wp = (w + 31) / 32 * 32;
  const int frames = static_cast<int>(clip.size());

  MultiScaleFeatures out;
  out.input_height = h;
  out.input_width = w;
  for (int j = 0; j < 3; ++j) {
    auto& lv = out.levels[static_cast<std::size_t>(j)];
    lv.frames = frames;
    lv.stride = kLevelStrides[static_cast<std::size_t>(j)];
    lv.height = hp / lv.stride;
    lv.width = wp / lv.stride;
    lv.data = ad::Matrix(static_cast<Eigen::Index>(frames) * lv.height * lv.width, cfg_.backbone_channels[static_cast<std::size_t>(j)]);
  }

  for (int t = 0; t < frames; ++t) {
    const auto& img = clip[static_cast<std::size_t>(t)];
    ad::Matrix x = ad::Matrix::Zero(static_cast<Eigen::Index>(hp) * wp, 3);
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        for (int c = 0; c < 3; ++c) x(static_cast<Eigen::Index>(y) * wp + xx, c) = 2.0 * img.at(y, xx, c) - 1.0;
    int ch = hp, cw = wp;
    for (int i = 0; i < 5; ++i) {
      x = conv_s2(x, ch, cw, store.get(conv_name(i) + ".weight").value, store.get(conv_name(i) + ".bias").value);
      ch /= 2;
      cw /= 2;
      // conv2 -> stride 8 (level 3), conv3 -> stride 16, conv4 -> stride 32
      if (i >= 2) {
        auto& lv = out.levels[static_cast<std::size_t>(4 - i)];
        lv.data.middleRows(static_cast<Eigen::Index>(t) * ch * cw, static_cast<Eigen::Index>(ch) * cw) = x;
      }
    }
  }
  return out;
}

Eigen::RowVectorXd FrozenBackbone::project(const ad::ParameterStore& store, const Eigen::RowVectorXd& pooled) const {
  const auto& p = store.get(std::string(kPrefix) + "visual_proj").value;
  if (pooled.size() + 1 != p.rows()) throw ShapeError("pooled feature width mismatch");
  return pooled * p.topRows(p.rows() - 1) + p.bottomRows(1);
}

void fit_visual_projection(ad::ParameterStore& store, const std::vector<AlignmentExample>& examples,
                           const ClassEmbeddingMatrix& embeds, double ridge) {
  if (examples.empty()) throw DataError("no alignment examples");
  auto& p = store.get(std::string(FrozenBackbone::kPrefix) + "visual_proj");
  const auto c = p.value.rows();
  const auto n = static_cast<Eigen::Index>(examples.size());
  ad::Matrix x(n, c);
  ad::Matrix y(n, embeds.class_rows.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& e = examples[static_cast<std::size_t>(i)];
    if (e.pooled.size() + 1 != c) throw ShapeError("pooled feature width mismatch");
    x.row(i) << e.pooled, 1.0;
    y.row(i) = embeds.class_rows.row(e.class_id);
  }
  Eigen::MatrixXd gram = x.transpose() * x;
  const double lambda = ridge * gram.trace() / static_cast<double>(c);
  gram.diagonal().array() += lambda;
  p.value = gram.ldlt().solve(Eigen::MatrixXd(x.transpose() * y));
}

std::optional<Eigen::RowVectorXd> pool_level3(const MultiScaleFeatures& feats, const BinaryMask& mask, int frame) {
  const auto& lv = feats.levels[2];
  if (mask.height() != feats.input_height || mask.width() != feats.input_width)
    throw DimensionMismatch("pool mask does not match the input size");
  if (frame < 0 || frame >= lv.frames) throw IndexError("pool frame out of range");
  if (!mask.any()) return std::nullopt;
  const int s = lv.stride;
  Eigen::RowVectorXd majority = Eigen::RowVectorXd::Zero(lv.data.cols());
  Eigen::RowVectorXd soft = Eigen::RowVectorXd::Zero(lv.data.cols());
  double n_major = 0, w_soft = 0;
  for (int gy = 0; gy < lv.height; ++gy) {
    for (int gx = 0; gx < lv.width; ++gx) {
      int cnt = 0;
      for (int y = gy * s; y < std::min((gy + 1) * s, mask.height()); ++y)
        for (int x = gx * s; x < std::min((gx + 1) * s, mask.width()); ++x) cnt += mask.at(y, x);
      if (cnt == 0) continue;
      const auto row = lv.data.row((static_cast<Eigen::Index>(frame) * lv.height + gy) * lv.width + gx);
      soft += cnt * row;
      w_soft += cnt;
      if (2 * cnt > s * s) {
        majority += row;
        n_major += 1;
      }
    }
  }
  if (n_major > 0) return Eigen::RowVectorXd(majority / n_major);
  return Eigen::RowVectorXd(soft / w_soft);
}

// -------------------------------------------------------- pixel decoder

void add_linear(ad::ParameterStore& store, const std::string& name, int in, int out, Rng& rng, bool trainable,
                double gain) {
  ad::Matrix w(in, out);
  const double lim = gain * std::sqrt(6.0 / (in + out));
  for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = rng.uniform(-lim, lim);
  store.add(name + ".weight", std::move(w), trainable);
  store.add(name + ".bias", ad::Matrix::Zero(1, out), trainable);
}

void add_layer_norm(ad::ParameterStore& store, const std::string& name, int dim) {
  store.add(name + ".gamma", ad::Matrix::Ones(1, dim));
  store.add(name + ".beta", ad::Matrix::Zero(1, dim));
}

ad::Var apply_linear(ad::Tape& tape, const ad::ParameterStore& store, const std::string& name, const ad::Var& x) {
  return ad::linear(x, tape.parameter(store.get(name + ".weight")), tape.parameter(store.get(name + ".bias")));
}

ad::Var apply_layer_norm(ad::Tape& tape, const ad::ParameterStore& store, const std::string& name,
                         const ad::Var& x) {
  return ad::layer_norm(x, tape.parameter(store.get(name + ".gamma")), tape.parameter(store.get(name + ".beta")));
}

void PixelDecoder::init(ad::ParameterStore& store, Rng& rng) const {
  const std::string p = kPrefix;
  const int d = cfg_.dim;
  for (int j = 0; j < 3; ++j)
    add_linear(store, p + "proj" + std::to_string(j + 1), cfg_.backbone_channels[static_cast<std::size_t>(j)], d, rng);
  ad::Matrix lvl(3, d);
  for (Eigen::Index k = 0; k < lvl.size(); ++k) lvl.data()[k] = 0.1 * rng.normal();
  store.add(p + "level_embed", std::move(lvl));
  for (int r = 0; r < cfg_.pixel_rounds; ++r) {
    const std::string b = p + "r" + std::to_string(r) + ".";
    add_layer_norm(store, b + "ln1", d);
    add_linear(store, b + "q", d, d, rng);
    add_linear(store, b + "k", d, d, rng);
    add_linear(store, b + "v", d, d, rng);
    add_linear(store, b + "o", d, d, rng, true, 0.0);
    add_layer_norm(store, b + "ln2", d);
    add_linear(store, b + "ffn1", d, cfg_.pixel_ffn, rng);
    add_linear(store, b + "ffn2", cfg_.pixel_ffn, d, rng, true, 0.0);
  }
}

PixelDecoder::Graph PixelDecoder::fuse(ad::Tape& tape, const ad::ParameterStore& store, const PositionEncoder& pos,
                                       const MultiScaleFeatures& frozen) const {
  const std::string p = kPrefix;
  Graph g;
  g.input_height = frozen.input_height;
  g.input_width = frozen.input_width;
  const auto& lvl_embed = store.get(p + "level_embed");
  std::vector<ad::Var> tokens;
  std::vector<ad::Var> positions;
  std::array<Eigen::Index, 3> counts{};
  for (int j = 0; j < 3; ++j) {
    const auto& lv = frozen.levels[static_cast<std::size_t>(j)];
    g.shapes[static_cast<std::size_t>(j)] = {lv.frames, lv.height, lv.width};
    ad::Matrix pe = pos.encode_grid(lv.frames, lv.height, lv.width, lv.stride, frozen.input_height,
                                    frozen.input_width);
    auto x = apply_linear(tape, store, p + "proj" + std::to_string(j + 1), tape.constant(lv.data));
    x = ad::add(x, tape.constant(pe));
    x = ad::add_row(x, ad::slice_rows(tape.parameter(lvl_embed), j, 1));
    counts[static_cast<std::size_t>(j)] = x.rows();
    tokens.push_back(x);
    positions.push_back(tape.constant(pe));
    g.positions[static_cast<std::size_t>(j)] = std::move(pe);
  }
  auto x = ad::concat_rows(tokens);
  const auto pe = ad::concat_rows(positions);
  g.tokens = static_cast<std::size_t>(x.rows());
  for (int r = 0; r < cfg_.pixel_rounds; ++r) {
    const std::string b = p + "r" + std::to_string(r) + ".";
    auto h = apply_layer_norm(tape, store, b + "ln1", x);
    auto hp = ad::add(h, pe);
    auto q = apply_linear(tape, store, b + "q", hp);
    auto k = apply_linear(tape, store, b + "k", hp);
    auto v = apply_linear(tape, store, b + "v", h);
    x = ad::add(x, apply_linear(tape, store, b + "o", ad::attention(q, k, v, cfg_.heads)));
    h = apply_layer_norm(tape, store, b + "ln2", x);
    x = ad::add(x, apply_linear(tape, store, b + "ffn2", ad::relu(apply_linear(tape, store, b + "ffn1", h))));
  }
  Eigen::Index start = 0;
  for (int j = 0; j < 3; ++j) {
    g.levels[static_cast<std::size_t>(j)] = ad::slice_rows(x, start, counts[static_cast<std::size_t>(j)]);
    start += counts[static_cast<std::size_t>(j)];
  }
  return g;
}

FusedFeatures PixelDecoder::values(const Graph& g) {
  FusedFeatures f;
  f.input_height = g.input_height;
  f.input_width = g.input_width;
  for (int j = 0; j < 3; ++j) {
    auto& lv = f.levels[static_cast<std::size_t>(j)];
    const auto& s = g.shapes[static_cast<std::size_t>(j)];
    lv.frames = s[0];
    lv.height = s[1];
    lv.width = s[2];
    lv.stride = kLevelStrides[static_cast<std::size_t>(j)];
    lv.data = g.levels[static_cast<std::size_t>(j)].value();
    f.positions[static_cast<std::size_t>(j)] = g.positions[static_cast<std::size_t>(j)];
  }
  return f;
}

PixelDecoder::Graph PixelDecoder::from_values(ad::Tape& tape, const FusedFeatures& fused) {
  Graph g;
  g.input_height = fused.input_height;
  g.input_width = fused.input_width;
  for (int j = 0; j < 3; ++j) {
    const auto& lv = fused.levels[static_cast<std::size_t>(j)];
    g.shapes[static_cast<std::size_t>(j)] = {lv.frames, lv.height, lv.width};
    g.levels[static_cast<std::size_t>(j)] = tape.constant(lv.data);
    g.positions[static_cast<std::size_t>(j)] = fused.positions[static_cast<std::size_t>(j)];
    g.tokens += static_cast<std::size_t>(lv.data.rows());
  }
  return g;
}

}  // namespace omgseg
