#include "omgseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "omgseg/io.hpp"

namespace omgseg {

void validate(const LossWeights& w) {
  if (w.cls < 0 || w.ce < 0 || w.dice < 0) throw ConfigError("loss weights must be non-negative");
  if (w.cls + w.ce + w.dice <= 0) throw ConfigError("at least one loss weight must be positive");
  if (w.no_object < 0 || w.dice_eps < 0) throw ConfigError("no_object weight and dice eps must be non-negative");
}

// ------------------------------------------------------------ matching

namespace {

// Shortest augmenting path with potentials; requires rows <= cols.
std::vector<int> assign_rows(const Eigen::MatrixXd& a) {
  const int n = static_cast<int>(a.rows()), m = static_cast<int>(a.cols());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(m + 1), 0.0);
  std::vector<int> p(static_cast<std::size_t>(m + 1), 0), way(static_cast<std::size_t>(m + 1), 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(m + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = a(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j)
    if (p[static_cast<std::size_t>(j)] != 0) row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return row_to_col;
}

}  // namespace

MatchResult hungarian_match(const Eigen::MatrixXd& cost) {
  if (!cost.allFinite()) throw ShapeError("hungarian_match: non-finite cost");
  const int rows = static_cast<int>(cost.rows()), cols = static_cast<int>(cost.cols());
  MatchResult r;
  std::vector<int> row_to_col(static_cast<std::size_t>(rows), -1);
  if (rows > 0 && cols > 0) {
    if (rows <= cols) {
      row_to_col = assign_rows(cost);
    } else {
      const auto col_to_row = assign_rows(cost.transpose());
      for (int c = 0; c < cols; ++c) row_to_col[static_cast<std::size_t>(col_to_row[static_cast<std::size_t>(c)])] = c;
    }
  }
  for (int q = 0; q < rows; ++q) {
    const int c = row_to_col[static_cast<std::size_t>(q)];
    if (c >= 0) {
      r.pairs.emplace_back(q, c);
    } else {
      r.unmatched.push_back(q);
    }
  }
  return r;
}

double assignment_cost(const Eigen::MatrixXd& cost, const MatchResult& m) {
  double s = 0;
  for (const auto& [q, t] : m.pairs) s += cost(q, t);
  return s;
}

// -------------------------------------------------------------- losses

double dice_loss(const Eigen::Ref<const Eigen::RowVectorXd>& logits, const Eigen::Ref<const Eigen::RowVectorXd>& gt,
                 double eps) {
  if (logits.size() != gt.size()) throw ShapeError("dice_loss: grid size mismatch");
  return ad::dice_value(logits, gt, eps);
}

double mask_ce_loss(const Eigen::Ref<const Eigen::RowVectorXd>& logits,
                    const Eigen::Ref<const Eigen::RowVectorXd>& gt) {
  if (logits.size() != gt.size() || logits.size() == 0) throw ShapeError("mask_ce_loss: grid size mismatch");
  return ad::sigmoid_cross_entropy_value(logits, gt);
}

double cls_loss(const Eigen::Ref<const Eigen::RowVectorXd>& logits, int target, double weight) {
  if (target < 0 || target >= logits.size()) throw IndexError("cls_loss: target out of range");
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return weight * (lse - logits(target));
}

namespace {

Eigen::RowVectorXd softmax(const Eigen::Ref<const Eigen::RowVectorXd>& z) {
  Eigen::RowVectorXd e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

}  // namespace

double match_cost(const Eigen::Ref<const Eigen::RowVectorXd>& class_logits,
                  const Eigen::Ref<const Eigen::RowVectorXd>& mask_logits, int target_class,
                  const Eigen::Ref<const Eigen::RowVectorXd>& target_mask, const LossWeights& w,
                  bool class_agnostic) {
  const auto p = softmax(class_logits);
  const double prob = class_agnostic ? 1.0 - p(p.size() - 1) : p(target_class);
  return -w.cls * prob + w.ce * mask_ce_loss(mask_logits, target_mask) +
         w.dice * dice_loss(mask_logits, target_mask, w.dice_eps);
}

std::string_view to_string(TargetDownsample d) { return d == TargetDownsample::fraction ? "fraction" : "majority"; }

TargetDownsample target_downsample_from_string(std::string_view s) {
  if (s == "fraction") return TargetDownsample::fraction;
  if (s == "majority") return TargetDownsample::majority;
  throw ConfigError("unknown target downsample mode: " + std::string(s));
}

ad::Matrix downsample_targets(const TubeEntitySet& ts, int gh, int gw, int stride, TargetDownsample mode) {
  const int cells = gh * gw;
  ad::Matrix out = ad::Matrix::Zero(static_cast<Eigen::Index>(ts.entities.size()), static_cast<Eigen::Index>(ts.frames) * cells);
  const double area = static_cast<double>(stride) * stride;
  for (std::size_t e = 0; e < ts.entities.size(); ++e) {
    const auto& tube = ts.entities[e].mask;
    for (int t = 0; t < ts.frames; ++t) {
      const auto& m = tube.frame(t);
      for (int y = 0; y < m.height(); ++y) {
        for (int x = 0; x < m.width(); ++x) {
          if (m.at(y, x)) out(static_cast<Eigen::Index>(e), t * cells + (y / stride) * gw + x / stride) += 1.0;
        }
      }
    }
  }
  out /= area;
  if (mode == TargetDownsample::majority) out = (out.array() > 0.5).cast<double>().matrix();
  return out;
}

LossOutput total_loss(const DecoderGraph& g, const LossTargets& t, const LossWeights& w) {
  validate(w);
  if (g.layers.empty()) throw ShapeError("total_loss: empty prediction set");
  const int ns = g.num_semantic, nl = g.num_location;
  const auto n_targets = static_cast<int>(t.masks.rows());
  if (static_cast<int>(t.classes.size()) != n_targets) throw ShapeError("total_loss: class/mask count mismatch");
  if (static_cast<int>(t.prompt_entities.size()) != nl) throw ShapeError("total_loss: prompt pairing size mismatch");
  for (int e : t.prompt_entities)
    if (e < 0 || e >= n_targets) throw IndexError("total_loss: prompt target out of range");
  auto& tape = g.layers.front().mask_logits.tape();

  LossOutput out;
  std::vector<ad::Var> terms;
  for (const auto& layer : g.layers) {
    const auto& mv = layer.mask_logits.value();
    const auto& cv = layer.class_logits.value();
    if (mv.cols() != t.masks.cols() && n_targets > 0) throw ShapeError("total_loss: mask grid mismatch");
    const int no_obj = static_cast<int>(cv.cols()) - 1;
    for (int c : t.classes)
      if (!t.class_agnostic && (c < 0 || c >= no_obj)) throw IndexError("total_loss: class out of range");

    // class-agnostic mode scores objectness: logsumexp(classes) vs no-object
    auto class_view = [&](const ad::Var& rows) {
      if (!t.class_agnostic) return rows;
      const auto k = rows.cols() - 1;
      return ad::concat_cols({ad::logsumexp_rows(ad::slice_cols(rows, 0, k)), ad::slice_cols(rows, k, 1)});
    };
    auto target_class = [&](int c) { return t.class_agnostic ? 0 : c; };
    const int view_no_obj = t.class_agnostic ? 1 : no_obj;

    ad::Var cls_term, ce_term, dice_term;
    auto accumulate = [](ad::Var& acc, const ad::Var& v) { acc = acc.valid() ? ad::add(acc, v) : v; };

    MatchResult match;
    if (ns > 0) {
      Eigen::MatrixXd cost(ns, n_targets);
      for (int q = 0; q < ns; ++q)
        for (int e = 0; e < n_targets; ++e)
          cost(q, e) = match_cost(cv.row(q), mv.row(q), t.classes[static_cast<std::size_t>(e)], t.masks.row(e), w,
                                  t.class_agnostic);
      match = hungarian_match(cost);
      std::vector<int> targets(static_cast<std::size_t>(ns), view_no_obj);
      std::vector<double> weights(static_cast<std::size_t>(ns), w.no_object);
      for (const auto& [q, e] : match.pairs) {
        targets[static_cast<std::size_t>(q)] = target_class(t.classes[static_cast<std::size_t>(e)]);
        weights[static_cast<std::size_t>(q)] = 1.0;
      }
      const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
      const auto sem_cls = class_view(ad::slice_rows(layer.class_logits, 0, ns));
      accumulate(cls_term, ad::cross_entropy(sem_cls, targets, weights, std::max(wsum, 1e-12)));
      if (!match.pairs.empty()) {
        std::vector<int> qs, es;
        for (const auto& [q, e] : match.pairs) {
          qs.push_back(q);
          es.push_back(e);
        }
        ad::Matrix tm(static_cast<Eigen::Index>(es.size()), t.masks.cols());
        for (std::size_t i = 0; i < es.size(); ++i) tm.row(static_cast<Eigen::Index>(i)) = t.masks.row(es[i]);
        const auto pm = ad::gather_rows(layer.mask_logits, qs);
        const double norm = static_cast<double>(qs.size());
        accumulate(ce_term, ad::sigmoid_cross_entropy(pm, tm, norm));
        accumulate(dice_term, ad::dice(pm, tm, w.dice_eps, norm));
      }
    }
    if (nl > 0) {
      std::vector<int> qs, targets;
      ad::Matrix tm(nl, t.masks.cols());
      for (int i = 0; i < nl; ++i) {
        const int e = t.prompt_entities[static_cast<std::size_t>(i)];
        qs.push_back(ns + i);
        targets.push_back(target_class(t.classes[static_cast<std::size_t>(e)]));
        tm.row(i) = t.masks.row(e);
      }
      const auto loc_cls = class_view(ad::slice_rows(layer.class_logits, ns, nl));
      accumulate(cls_term, ad::cross_entropy(loc_cls, targets, std::vector<double>(static_cast<std::size_t>(nl), 1.0),
                                             static_cast<double>(nl)));
      const auto pm = ad::slice_rows(layer.mask_logits, ns, nl);
      accumulate(ce_term, ad::sigmoid_cross_entropy(pm, tm, nl));
      accumulate(dice_term, ad::dice(pm, tm, w.dice_eps, nl));
    }
    out.breakdown.matches.push_back(std::move(match));
    if (cls_term.valid()) {
      out.breakdown.cls += cls_term.scalar();
      terms.push_back(ad::scale(cls_term, w.cls));
    }
    if (ce_term.valid()) {
      out.breakdown.ce += ce_term.scalar();
      terms.push_back(ad::scale(ce_term, w.ce));
    }
    if (dice_term.valid()) {
      out.breakdown.dice += dice_term.scalar();
      terms.push_back(ad::scale(dice_term, w.dice));
    }
  }
  if (terms.empty()) {
    out.total = tape.constant(ad::Matrix::Zero(1, 1));
  } else {
    out.total = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) out.total = ad::add(out.total, terms[i]);
  }
  out.breakdown.total = out.total.scalar();
  return out;
}

// ----------------------------------------------------------- grad check

GradCheckResult grad_check(const std::function<ad::Var(ad::Tape&)>& loss_fn, ad::ParameterStore& store,
                           const std::vector<std::string>& names, int max_params, double h, std::uint64_t seed) {
  std::vector<std::pair<ad::Parameter*, Eigen::Index>> slots;
  for (const auto& n : names) {
    auto& p = store.get(n);
    if (!p.trainable) continue;
    for (Eigen::Index i = 0; i < p.value.size(); ++i) slots.emplace_back(&p, i);
  }
  Rng rng(seed);
  rng.shuffle(slots);
  if (static_cast<int>(slots.size()) > max_params) slots.resize(static_cast<std::size_t>(max_params));

  ad::Tape tape(true);
  const auto loss = loss_fn(tape);
  tape.backward(loss);

  GradCheckResult r;
  for (auto [p, i] : slots) {
    const auto* g = tape.param_grad(*p);
    const double analytic = g ? g->data()[i] : 0.0;
    const double orig = p->value.data()[i];
    p->value.data()[i] = orig + h;
    double up;
    {
      ad::Tape t(false);
      up = loss_fn(t).scalar();
    }
    p->value.data()[i] = orig - h;
    double down;
    {
      ad::Tape t(false);
      down = loss_fn(t).scalar();
    }
    p->value.data()[i] = orig;
    const double numeric = (up - down) / (2 * h);
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst = p->name + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic) +
                " numeric=" + std::to_string(numeric);
    }
    ++r.checked;
  }
  return r;
}

// -------------------------------------------------------------- trainer

std::string_view to_string(SourceKind k) {
  switch (k) {
    case SourceKind::image: return "image";
    case SourceKind::pseudo_video: return "pseudo_video";
    case SourceKind::video: return "video";
    case SourceKind::interactive: return "interactive";
    case SourceKind::vos: return "vos";
  }
  return "image";
}

SourceKind source_kind_from_string(std::string_view s) {
  for (auto k : {SourceKind::image, SourceKind::pseudo_video, SourceKind::video, SourceKind::interactive, SourceKind::vos})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown source kind: " + std::string(s));
}

void validate(const TrainConfig& c) {
  if (c.steps < 1) throw ConfigError("train.steps must be >= 1");
  if (!(c.lr > 0)) throw ConfigError("train.lr must be positive");
  if (c.lr_final_fraction < 0 || c.lr_final_fraction > 1) throw ConfigError("train.lr_final_fraction must be in [0,1]");
  if (c.warmup_steps < 0) throw ConfigError("train.warmup_steps must be >= 0");
  if (c.optimizer != "rmsprop" && c.optimizer != "adagrad" && c.optimizer != "sgd")
    throw ConfigError("train.optimizer must be rmsprop, adagrad or sgd");
  if (!(c.rms_decay > 0 && c.rms_decay < 1)) throw ConfigError("train.rms_decay must be in (0,1)");
  if (!(c.clip_norm > 0)) throw ConfigError("train.clip_norm must be positive");
  if (c.clip_frames < 1) throw ConfigError("train.clip_frames must be >= 1");
  if (c.pseudo_shift < 0 || c.pseudo_shift > 0.5) throw ConfigError("train.pseudo_shift must be in [0,0.5]");
  if (c.max_prompts < 1) throw ConfigError("train.max_prompts must be >= 1");
  if (c.log_every < 1) throw ConfigError("train.log_every must be >= 1");
  validate(c.weights);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"steps", c.steps},
       {"lr", c.lr},
       {"lr_final_fraction", c.lr_final_fraction},
       {"warmup_steps", c.warmup_steps},
       {"optimizer", c.optimizer},
       {"rms_decay", c.rms_decay},
       {"epsilon", c.epsilon},
       {"clip_norm", c.clip_norm},
       {"loss_weights",
        {{"cls", c.weights.cls}, {"ce", c.weights.ce}, {"dice", c.weights.dice}, {"no_object", c.weights.no_object}}},
       {"clip_frames", c.clip_frames},
       {"pseudo_shift", c.pseudo_shift},
       {"max_prompts", c.max_prompts},
       {"target_downsample", to_string(c.downsample)},
       {"seed", c.seed},
       {"log_every", c.log_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  io::reject_unknown_keys(j,
                          {"steps", "lr", "lr_final_fraction", "warmup_steps", "optimizer", "rms_decay", "epsilon",
                           "clip_norm", "loss_weights", "clip_frames", "pseudo_shift", "max_prompts",
                           "target_downsample", "seed", "log_every"},
                          "train");
  try {
    c.steps = j.value("steps", c.steps);
    c.lr = j.value("lr", c.lr);
    c.lr_final_fraction = j.value("lr_final_fraction", c.lr_final_fraction);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.optimizer = j.value("optimizer", c.optimizer);
    c.rms_decay = j.value("rms_decay", c.rms_decay);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    if (j.contains("loss_weights")) {
      const auto& w = j.at("loss_weights");
      io::reject_unknown_keys(w, {"cls", "ce", "dice", "no_object"}, "train.loss_weights");
      c.weights.cls = w.value("cls", c.weights.cls);
      c.weights.ce = w.value("ce", c.weights.ce);
      c.weights.dice = w.value("dice", c.weights.dice);
      c.weights.no_object = w.value("no_object", c.weights.no_object);
    }
    c.clip_frames = j.value("clip_frames", c.clip_frames);
    c.pseudo_shift = j.value("pseudo_shift", c.pseudo_shift);
    c.max_prompts = j.value("max_prompts", c.max_prompts);
    if (j.contains("target_downsample"))
      c.downsample = target_downsample_from_string(j.at("target_downsample").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.log_every = j.value("log_every", c.log_every);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  validate(c);
}

void to_json(nlohmann::json& j, const StepRecord& r) {
  j = {{"step", r.step}, {"source", r.source}, {"loss", r.loss}, {"cls", r.cls},  {"ce", r.ce},
       {"dice", r.dice}, {"lr", r.lr},         {"grad_norm", r.grad_norm},      {"ms", r.ms}};
}

MultiScaleFeatures stack_frames(const std::vector<const MultiScaleFeatures*>& frames) {
  if (frames.empty()) throw ShapeError("no frames to stack");
  MultiScaleFeatures out = *frames.front();
  for (int j = 0; j < 3; ++j) {
    auto& lv = out.levels[static_cast<std::size_t>(j)];
    const auto per = lv.data.rows();
    lv.frames = static_cast<int>(frames.size());
    lv.data.resize(per * lv.frames, lv.data.cols());
    for (std::size_t f = 0; f < frames.size(); ++f) {
      const auto& src = frames[f]->levels[static_cast<std::size_t>(j)];
      if (src.frames != 1 || src.data.rows() != per) throw ShapeError("stack_frames: frame shape mismatch");
      lv.data.middleRows(static_cast<Eigen::Index>(f) * per, per) = src.data;
    }
  }
  return out;
}

namespace {

std::vector<DatasetShare> shares_of(const std::vector<TrainingSource>& sources) {
  std::vector<DatasetShare> out;
  for (const auto& s : sources) out.push_back({s.name, static_cast<int>(s.samples.size()), s.ratio});
  return out;
}

}  // namespace

Trainer::Trainer(OmgSegModel& model, TrainConfig cfg, std::vector<TrainingSource> sources, ClassVocabulary full_vocab,
                 ClassVocabulary train_vocab)
    : model_(model),
      cfg_(std::move(cfg)),
      sources_(std::move(sources)),
      full_vocab_(std::move(full_vocab)),
      train_vocab_(std::move(train_vocab)),
      sampler_((validate(cfg_), shares_of(sources_)), mix_seed(cfg_.seed, 0x5a3)) {
  if (sources_.empty()) throw ConfigError("no training sources");
  for (int c = 0; c < full_vocab_.size(); ++c) {
    const auto idx = train_vocab_.index_of(full_vocab_.name(c));
    full_to_train_.push_back(idx ? *idx : -1);
  }
  class_rows_ = model_.embeddings(train_vocab_).class_rows;
  for (const auto& s : sources_) {
    std::vector<std::vector<std::optional<MultiScaleFeatures>>> per;
    for (const auto& rec : s.samples) {
      const int frames = s.kind == SourceKind::pseudo_video ? 2 : rec.num_frames();
      per.emplace_back(static_cast<std::size_t>(frames));
      if ((s.kind == SourceKind::image || s.kind == SourceKind::interactive || s.kind == SourceKind::pseudo_video) &&
          rec.num_frames() != 1)
        throw DataError("source '" + s.name + "' needs single-frame samples");
    }
    cache_.push_back(std::move(per));
    pseudo_.emplace_back(s.samples.size());
  }
}

const MultiScaleFeatures& Trainer::frame_features(int source, int index, int frame, const Image& img) {
  auto& slot = cache_[static_cast<std::size_t>(source)][static_cast<std::size_t>(index)][static_cast<std::size_t>(frame)];
  if (!slot) slot = model_.extract(Clip{img});
  return *slot;
}

Trainer::Prepared Trainer::prepare(int source, int index, std::uint64_t draw_seed) {
  const auto& src = sources_[static_cast<std::size_t>(source)];
  const auto& rec = src.samples.at(static_cast<std::size_t>(index));
  Prepared p;
  TubeEntitySet tubes;
  std::vector<const MultiScaleFeatures*> frames;
  Rng rng(draw_seed);

  switch (src.kind) {
    case SourceKind::image:
    case SourceKind::interactive: {
      frames.push_back(&frame_features(source, index, 0, rec.frames[0]));
      tubes = to_tubes(rec.image_targets());
      p.mode = src.kind == SourceKind::image ? DecodeMode::image : DecodeMode::joint;
      break;
    }
    case SourceKind::pseudo_video: {
      auto& pv = pseudo_[static_cast<std::size_t>(source)][static_cast<std::size_t>(index)];
      if (!pv) pv = make_pseudo_video(rec, cfg_.pseudo_shift, mix_seed(cfg_.seed, static_cast<std::uint64_t>(index)));
      for (int t = 0; t < 2; ++t) frames.push_back(&frame_features(source, index, t, pv->frames[static_cast<std::size_t>(t)]));
      tubes = pv->targets;
      p.mode = DecodeMode::video;
      break;
    }
    case SourceKind::video:
    case SourceKind::vos: {
      const int total = rec.num_frames();
      const int len = std::min(cfg_.clip_frames, total);
      const int start = rng.uniform_int(0, total - len);
      for (int t = start; t < start + len; ++t)
        frames.push_back(&frame_features(source, index, t, rec.frames[static_cast<std::size_t>(t)]));
      tubes = TubeEntitySet{len, rec.targets.height, rec.targets.width, {}};
      for (const auto& e : rec.targets.entities) {
        std::vector<BinaryMask> fm(e.mask.all().begin() + start, e.mask.all().begin() + start + len);
        TubeEntity te{TubeMask(std::move(fm)), e.class_id, e.instance_id, e.is_thing};
        if (te.mask.area() > 0) tubes.entities.push_back(std::move(te));
      }
      p.mode = DecodeMode::video;
      p.targets.class_agnostic = src.kind == SourceKind::vos;
      break;
    }
  }
  p.frozen = frames.size() == 1 ? *frames.front() : stack_frames(frames);
  const auto& top = p.frozen.levels[2];
  p.targets.masks = downsample_targets(tubes, top.height, top.width, top.stride, cfg_.downsample);
  for (const auto& e : tubes.entities) {
    const int c = full_to_train_.at(static_cast<std::size_t>(e.class_id));
    if (c < 0) throw DataError("training sample uses class '" + full_vocab_.name(e.class_id) + "' outside the training vocabulary");
    p.targets.classes.push_back(c);
  }
  if (src.kind == SourceKind::interactive) {
    auto prompts = rec.prompts.empty() ? derive_prompts(rec.image_targets(), static_cast<std::uint64_t>(index)) : rec.prompts;
    rng.shuffle(prompts);
    if (static_cast<int>(prompts.size()) > cfg_.max_prompts) prompts.resize(static_cast<std::size_t>(cfg_.max_prompts));
    for (const auto& pt : prompts) {
      p.prompts.push_back(pt.prompt);
      p.targets.prompt_entities.push_back(pt.entity);
    }
  }
  return p;
}

double Trainer::lr_at(int step) const {
  if (cfg_.warmup_steps > 0 && step < cfg_.warmup_steps)
    return cfg_.lr * static_cast<double>(step + 1) / cfg_.warmup_steps;
  const double span = std::max(1, cfg_.steps - cfg_.warmup_steps);
  const double progress = std::clamp((step - cfg_.warmup_steps) / span, 0.0, 1.0);
  const double lo = cfg_.lr * cfg_.lr_final_fraction;
  return lo + 0.5 * (cfg_.lr - lo) * (1.0 + std::cos(M_PI * progress));
}

void Trainer::apply_gradients(const ad::Tape& tape, double lr, double& grad_norm) {
  auto grads = tape.param_grads();
  double sq = 0;
  for (const auto& [p, g] : grads)
    if (p->trainable) sq += g->squaredNorm();
  grad_norm = std::sqrt(sq);
  const double clip = grad_norm > cfg_.clip_norm ? cfg_.clip_norm / grad_norm : 1.0;
  const double t = static_cast<double>(step_ + 1);
  for (const auto& [cp, g] : grads) {
    if (!cp->trainable) continue;
    auto& p = model_.params().get(cp->name);
    const ad::Matrix gc = *g * clip;
    if (cfg_.optimizer == "sgd") {
      p.value -= lr * gc;
      continue;
    }
    auto [it, fresh] = accum_.try_emplace(cp, ad::Matrix::Zero(gc.rows(), gc.cols()));
    auto& acc = it->second;
    if (cfg_.optimizer == "adagrad") {
      acc += gc.cwiseAbs2();
      p.value.array() -= lr * gc.array() / (acc.array().sqrt() + cfg_.epsilon);
    } else {
      acc = cfg_.rms_decay * acc + (1 - cfg_.rms_decay) * gc.cwiseAbs2();
      const double bias = 1.0 - std::pow(cfg_.rms_decay, t);
      p.value.array() -= lr * gc.array() / ((acc.array() / bias).sqrt() + cfg_.epsilon);
    }
  }
}

StepRecord Trainer::step() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto draw = sampler_.next();
  auto prep = prepare(draw.dataset_index, draw.index, mix_seed(cfg_.seed, static_cast<std::uint64_t>(step_) + 1));
  ad::Tape tape(true);
  const auto graph = model_.build(tape, prep.frozen, prep.prompts, class_rows_, prep.mode);
  const auto loss = total_loss(graph, prep.targets, cfg_.weights);
  tape.backward(loss.total);
  StepRecord r;
  r.step = step_;
  r.source = draw.dataset;
  r.loss = loss.breakdown.total;
  r.cls = loss.breakdown.cls;
  r.ce = loss.breakdown.ce;
  r.dice = loss.breakdown.dice;
  r.lr = lr_at(step_);
  apply_gradients(tape, r.lr, r.grad_norm);
  ++step_;
  r.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::vector<StepRecord> Trainer::run(std::ostream* log, const std::function<void(const StepRecord&)>& cb) {
  std::vector<StepRecord> out;
  while (step_ < cfg_.steps) {
    auto r = step();
    if (log && (r.step % cfg_.log_every == 0 || step_ == cfg_.steps)) *log << nlohmann::json(r).dump() << '\n';
    if (cb) cb(r);
    out.push_back(std::move(r));
  }
  return out;
}

void align_visual_projection(OmgSegModel& model, const std::vector<SampleRecord>& corpus,
                             const ClassVocabulary& vocab, double ridge) {
  std::vector<AlignmentExample> examples;
  for (const auto& s : corpus) {
    const auto frozen = model.extract(s.frames);
    for (const auto& e : s.targets.entities) {
      if (e.class_id < 0 || e.class_id >= vocab.size()) throw DataError("alignment class id outside vocabulary");
      for (int t = 0; t < e.mask.frames(); ++t)
        if (auto pooled = pool_level3(frozen, e.mask.frame(t), t)) examples.push_back({*pooled, e.class_id});
    }
  }
  fit_visual_projection(model.params(), examples, model.embeddings(vocab), ridge);
}

}  // namespace omgseg
