#include "omgseg/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <set>

#include "omgseg/io.hpp"
#include "omgseg/rng.hpp"

namespace omgseg {

using nlohmann::json;

namespace {

void source_from_json(const json& j, SourceSpec& s) {
  io::reject_unknown_keys(j, {"name", "kind", "count", "frames", "ratio", "seed", "split", "world"}, "data.sources[]");
  s.name = j.at("name").get<std::string>();
  s.kind = source_kind_from_string(j.value("kind", std::string(to_string(s.kind))));
  s.count = j.value("count", s.count);
  s.frames = j.value("frames", s.frames);
  s.ratio = j.value("ratio", s.ratio);
  s.seed = j.value("seed", s.seed);
  s.split = j.value("split", s.split);
  if (j.contains("world")) s.world = j.at("world").get<ShapeWorldConfig>();
}

json source_to_json(const SourceSpec& s) {
  return {{"name", s.name},   {"kind", std::string(to_string(s.kind))}, {"count", s.count}, {"frames", s.frames},
          {"ratio", s.ratio}, {"seed", s.seed}, {"split", s.split}, {"world", s.world}};
}

bool is_video(SourceKind k) { return k == SourceKind::video || k == SourceKind::vos; }

}  // namespace

void validate(const RunConfig& c) {
  validate(c.model);
  validate(c.train);
  validate(c.infer);
  validate(c.service);
  validate(c.alignment.world);
  if (c.alignment.enabled && c.alignment.count < 1) throw ConfigError("data.alignment.count must be >= 1");
  if (!(c.alignment.ridge > 0)) throw ConfigError("data.alignment.ridge must be > 0");
  if (c.eval.vpq_windows.empty()) throw ConfigError("eval.vpq_windows must not be empty");
  for (int k : c.eval.vpq_windows)
    if (k < 1) throw ConfigError("eval.vpq_windows entries must be >= 1");
  std::set<std::string> names;
  for (const auto& s : c.sources) {
    if (s.name.empty() || s.name.find('/') != std::string::npos || s.name == "." || s.name == "..")
      throw ConfigError("data source names must be plain directory names");
    if (!names.insert(s.name).second) throw ConfigError("duplicate data source " + s.name);
    if (s.count < 1) throw ConfigError("data source " + s.name + ": count must be >= 1");
    if (s.ratio < 1) throw ConfigError("data source " + s.name + ": ratio must be >= 1");
    if (s.frames < 1) throw ConfigError("data source " + s.name + ": frames must be >= 1");
    if (!is_video(s.kind) && s.frames != 1) throw ConfigError("data source " + s.name + ": only video sources have frames > 1");
    if (s.split != "train" && s.split != "eval") throw ConfigError("data source " + s.name + ": split must be train or eval");
    validate(s.world);
    if (full_vocabulary(s.world) != full_vocabulary(c.sources.front().world))
      throw ConfigError("data sources must share one class vocabulary");
  }
}

void to_json(json& j, const RunConfig& c) {
  json sources = json::array();
  for (const auto& s : c.sources) sources.push_back(source_to_json(s));
  j = {{"model", c.model},
       {"data",
        {{"sources", sources},
         {"alignment",
          {{"enabled", c.alignment.enabled},
           {"count", c.alignment.count},
           {"seed", c.alignment.seed},
           {"ridge", c.alignment.ridge},
           {"world", c.alignment.world}}}}},
       {"train", c.train},
       {"infer", c.infer},
       {"eval", {{"vpq_windows", c.eval.vpq_windows}}},
       {"service", c.service}};
}

void from_json(const json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  io::reject_unknown_keys(j, {"model", "data", "train", "infer", "eval", "service"}, "config");
  try {
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("data")) {
      const auto& d = j.at("data");
      io::reject_unknown_keys(d, {"sources", "alignment"}, "data");
      c.sources.clear();
      for (const auto& s : d.value("sources", json::array())) source_from_json(s, c.sources.emplace_back());
      if (d.contains("alignment")) {
        const auto& a = d.at("alignment");
        io::reject_unknown_keys(a, {"enabled", "count", "seed", "ridge", "world"}, "data.alignment");
        c.alignment.enabled = a.value("enabled", c.alignment.enabled);
        c.alignment.count = a.value("count", c.alignment.count);
        c.alignment.seed = a.value("seed", c.alignment.seed);
        c.alignment.ridge = a.value("ridge", c.alignment.ridge);
        if (a.contains("world")) c.alignment.world = a.at("world").get<ShapeWorldConfig>();
      }
    }
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("infer")) c.infer = j.at("infer").get<InferenceConfig>();
    if (j.contains("eval")) {
      io::reject_unknown_keys(j.at("eval"), {"vpq_windows"}, "eval");
      c.eval.vpq_windows = j.at("eval").value("vpq_windows", c.eval.vpq_windows);
    }
    if (j.contains("service")) c.service = j.at("service").get<ServiceConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  validate(c);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  json j;
  try {
    j = io::read_json(path);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return j.get<RunConfig>();
}

void override_seed(RunConfig& c, std::uint64_t seed) {
  c.model.seed = seed;
  c.train.seed = seed;
  c.alignment.seed = mix_seed(seed, 0xa1);
  c.alignment.world.seed = seed;
  for (std::size_t i = 0; i < c.sources.size(); ++i) {
    c.sources[i].seed = mix_seed(seed, i + 1);
    c.sources[i].world.seed = seed;
  }
}

SampleRecord generate_sample(const SourceSpec& s, int index) {
  const auto seed = mix_seed(s.seed, static_cast<std::uint64_t>(index));
  auto rec = is_video(s.kind) ? gen_video_sample(s.world, seed, s.frames) : gen_image_sample(s.world, seed);
  rec.source = s.name;
  return rec;
}

std::vector<SampleRecord> generate_source(const SourceSpec& s) {
  std::vector<SampleRecord> out;
  out.reserve(static_cast<std::size_t>(s.count));
  for (int i = 0; i < s.count; ++i) out.push_back(generate_sample(s, i));
  return out;
}

void write_datasets(const RunConfig& c, const std::filesystem::path& out) {
  for (const auto& s : c.sources) {
    const auto dir = out / s.name;
    for (int i = 0; i < s.count; ++i) write_sample(dir, i, generate_sample(s, i));
  }
}

std::vector<SampleRecord> load_source(const std::filesystem::path& data_dir, const SourceSpec& s) {
  const auto dir = data_dir / s.name;
  if (!std::filesystem::is_directory(dir)) throw DataError("missing dataset directory " + dir.string());
  auto samples = load_split(dir);
  if (samples.empty()) throw DataError("empty dataset directory " + dir.string());
  return samples;
}

ClassVocabulary run_vocabulary(const RunConfig& c) {
  if (c.sources.empty()) return full_vocabulary(ShapeWorldConfig{});
  return full_vocabulary(c.sources.front().world);
}

OmgSegModel build_model(const RunConfig& c) {
  OmgSegModel model(c.model);
  if (c.alignment.enabled) {
    SourceSpec spec;
    spec.name = "alignment";
    spec.count = c.alignment.count;
    spec.seed = c.alignment.seed;
    spec.world = c.alignment.world;
    align_visual_projection(model, generate_source(spec), full_vocabulary(c.alignment.world), c.alignment.ridge);
  }
  return model;
}

TrainOutcome train_model(OmgSegModel& model, const RunConfig& c, const std::vector<std::vector<SampleRecord>>& data,
                         std::ostream* log) {
  if (data.size() != c.sources.size()) throw DataError("one sample list per data source expected");
  std::vector<TrainingSource> sources;
  for (std::size_t i = 0; i < c.sources.size(); ++i) {
    const auto& s = c.sources[i];
    if (s.split != "train") continue;
    if (data[i].empty()) throw DataError("no samples for data source " + s.name);
    sources.push_back({s.name, s.kind, s.ratio, data[i]});
  }
  if (sources.empty()) throw ConfigError("no training sources");
  const auto& world = c.sources.front().world;

  TrainOutcome out;
  out.backbone_before = model.params().checksum(FrozenBackbone::kPrefix);
  const auto t0 = std::chrono::steady_clock::now();
  Trainer trainer(model, c.train, std::move(sources), full_vocabulary(world), training_vocabulary(world));
  out.log = trainer.run(log);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.backbone_after = model.params().checksum(FrozenBackbone::kPrefix);
  return out;
}

std::string_view to_string(Task t) {
  switch (t) {
    case Task::panoptic: return "panoptic";
    case Task::vis: return "vis";
    case Task::vps: return "vps";
    case Task::vos: return "vos";
    case Task::interactive: return "interactive";
    case Task::ov: return "ov";
  }
  return "panoptic";
}

Task task_from_string(std::string_view s) {
  for (auto t : {Task::panoptic, Task::vis, Task::vps, Task::vos, Task::interactive, Task::ov})
    if (to_string(t) == s) return t;
  throw ConfigError("unknown task: " + std::string(s));
}

Task default_task(SourceKind k) {
  switch (k) {
    case SourceKind::image: return Task::panoptic;
    case SourceKind::pseudo_video:
    case SourceKind::video: return Task::vps;
    case SourceKind::vos: return Task::vos;
    case SourceKind::interactive: return Task::interactive;
  }
  return Task::panoptic;
}

std::vector<PromptTarget> sample_prompts(const SampleRecord& s, int index) {
  if (!s.prompts.empty()) return s.prompts;
  return derive_prompts(s.image_targets(), static_cast<std::uint64_t>(index));
}

namespace {

json interactive_prediction(const OmgSegModel& model, const SampleRecord& sample, int index,
                            const ClassVocabulary& vocab, const InferenceConfig& cfg, bool points_only) {
  auto targets = sample_prompts(sample, index);
  if (points_only) std::erase_if(targets, [](const PromptTarget& p) { return p.prompt.is_box(); });
  std::vector<VisualPrompt> prompts;
  for (const auto& t : targets) prompts.push_back(t.prompt);
  const Clip first{sample.frames.front()};
  const auto frozen = model.extract(first);
  const auto fused = model.fuse(frozen);
  const auto embeds = model.embeddings(vocab);
  const auto results = interactive_segment(model, frozen, fused, prompts, embeds, cfg);
  json items = json::array();
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    Eigen::Index learned = 0, pooled = 0;
    r.scores.learned.maxCoeff(&learned);
    r.scores.pooled.maxCoeff(&pooled);
    items.push_back({{"prompt", targets[i].prompt},
                     {"entity", targets[i].entity},
                     {"mask", encode_rle(r.mask)},
                     {"class_id", r.scores.argmax()},
                     {"score", r.scores.fused(r.scores.argmax())},
                     {"learned_class", static_cast<int>(learned)},
                     {"pooled_class", static_cast<int>(pooled)}});
  }
  return items;
}

}  // namespace

json predict(const OmgSegModel& model, Task task, const SampleRecord& sample, int index, const ClassVocabulary& vocab,
             const RunConfig& c) {
  json out{{"task", std::string(to_string(task))}, {"index", index}, {"vocabulary", vocab.names()}};
  switch (task) {
    case Task::panoptic: {
      const auto pred = model.forward({sample.frames.front()}, {}, model.embeddings(vocab).class_rows, DecodeMode::image);
      const auto merged = panoptic_merge(pred, vocab, c.infer);
      json inst = json::array();
      for (const auto& s : merged.segments)
        if (s.is_thing) inst.push_back({{"mask", encode_rle(s.masks.front())}, {"class_id", s.class_id}, {"score", s.score}});
      out["panoptic"] = merged.frames.front();
      out["instances"] = inst;
      break;
    }
    case Task::vps:
    case Task::vis: {
      const auto video = infer_video(model, sample.frames, vocab, c.train.clip_frames, c.infer);
      auto tubes = video.entities();
      if (task == Task::vis) std::erase_if(tubes.entities, [](const TubeEntity& e) { return !e.is_thing; });
      out["tubes"] = tubes;
      break;
    }
    case Task::vos: {
      std::vector<BinaryMask> first;
      for (const auto& e : sample.targets.entities)
        if (e.is_thing && e.mask.frame(0).any()) first.push_back(e.mask.frame(0));
      const auto video = infer_video(model, sample.frames, vocab, c.train.clip_frames, c.infer, true);
      json objs = json::array();
      for (const auto& o : vos_track(first, video, c.infer.vos_min_iou)) {
        if (o.tube)
          objs.push_back({{"tube", *o.tube}, {"first_frame_iou", o.first_frame_iou}, {"track_id", o.track_id}});
        else
          objs.push_back({{"tube", nullptr}, {"first_frame_iou", o.first_frame_iou}});
      }
      out["objects"] = objs;
      break;
    }
    case Task::interactive:
      out["prompts"] = interactive_prediction(model, sample, index, vocab, c.infer, false);
      break;
    case Task::ov:
      out["prompts"] = interactive_prediction(model, sample, index, vocab, c.infer, true);
      break;
  }
  return out;
}

namespace {

// Maps prediction class ids (indexing the prediction's vocabulary) into `vocab`.
std::vector<int> class_map(const json& pred, const ClassVocabulary& vocab) {
  std::vector<int> m;
  for (const auto& n : pred.at("vocabulary")) {
    const auto k = vocab.index_of(n.get<std::string>());
    if (!k) throw DataError("prediction class '" + n.get<std::string>() + "' is not in the ground-truth vocabulary");
    m.push_back(*k);
  }
  return m;
}

int mapped(const std::vector<int>& m, int id) {
  if (id < 0 || id >= static_cast<int>(m.size())) throw DataError("prediction class id out of range");
  return m[static_cast<std::size_t>(id)];
}

MetricReport interactive_report(const std::vector<json>& preds, const std::vector<SampleRecord>& samples, bool box) {
  MetricReport r;
  r.name = box ? "box_iou" : "point_iou";
  double sum = 0, lo = 1;
  int n = 0, good = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto gt = samples[i].image_targets();
    for (const auto& p : preds[i].at("prompts")) {
      if (p.at("prompt").get<VisualPrompt>().is_box() != box) continue;
      const int e = p.at("entity").get<int>();
      if (e < 0 || e >= static_cast<int>(gt.entities.size())) throw DataError("prompt entity out of range");
      const double iou = mask_iou(decode_rle(p.at("mask").get<std::string>()), gt.entities[static_cast<std::size_t>(e)].mask);
      sum += iou;
      lo = std::min(lo, iou);
      good += iou >= 0.9;
      ++n;
    }
  }
  r.value = n > 0 ? sum / n : 0.0;
  r.tp = good;
  r.fn = n - good;
  r.extra["min"] = n > 0 ? lo : 0.0;
  r.extra["count"] = n;
  r.extra["fraction_ge_0.9"] = n > 0 ? static_cast<double>(good) / n : 0.0;
  return r;
}

}  // namespace

std::map<std::string, MetricReport> score(Task task, const std::vector<json>& preds,
                                          const std::vector<SampleRecord>& samples, const ClassVocabulary& vocab,
                                          const RunConfig& c) {
  if (preds.size() != samples.size()) throw DataError("prediction and sample counts differ");
  std::map<std::string, MetricReport> out;
  switch (task) {
    case Task::panoptic: {
      std::vector<EntitySet> pe, ge;
      std::vector<int> psem, gsem;
      std::vector<std::vector<ScoredInstance>> pi;
      std::vector<std::vector<GtInstance>> gi;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto m = class_map(preds[i], vocab);
        auto pm = preds[i].at("panoptic").get<PanopticMap>();
        for (auto& s : pm.segments) s.class_id = mapped(m, s.class_id);
        pe.push_back(to_entities(pm, vocab));
        ge.push_back(samples[i].image_targets());
        const auto ps = semantic_map(pe.back()), gs = semantic_map(ge.back());
        psem.insert(psem.end(), ps.begin(), ps.end());
        gsem.insert(gsem.end(), gs.begin(), gs.end());
        auto& pl = pi.emplace_back();
        for (const auto& in : preds[i].at("instances"))
          pl.push_back({decode_rle(in.at("mask").get<std::string>()), mapped(m, in.at("class_id").get<int>()),
                        in.at("score").get<double>()});
        auto& gl = gi.emplace_back();
        for (const auto& e : ge.back().entities)
          if (e.is_thing) gl.push_back({e.mask, e.class_id});
      }
      out["pq"] = pq(pe, ge);
      out["miou"] = miou(psem, gsem, vocab);
      out["mask_ap"] = mask_ap(pi, gi);
      break;
    }
    case Task::vps:
    case Task::vis: {
      double total = 0;
      int switches = 0;
      std::map<std::string, double> per_k;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto m = class_map(preds[i], vocab);
        auto pt = preds[i].at("tubes").get<TubeEntitySet>();
        for (auto& e : pt.entities) e.class_id = mapped(m, e.class_id);
        auto gt = samples[i].targets;
        if (task == Task::vis) std::erase_if(gt.entities, [](const TubeEntity& e) { return !e.is_thing; });
        std::vector<int> windows;
        for (int k : c.eval.vpq_windows)
          if (k <= gt.frames) windows.push_back(k);
        if (windows.empty()) windows.push_back(gt.frames);
        const auto r = vpq(pt, gt, windows);
        total += r.value;
        for (const auto& [k, v] : r.extra) per_k[k] += v;
        switches += id_switches(pt, gt);
      }
      MetricReport r;
      r.name = "vpq";
      r.value = preds.empty() ? 0.0 : total / static_cast<double>(preds.size());
      for (const auto& [k, v] : per_k) r.extra[k] = v / static_cast<double>(preds.size());
      out["vpq"] = r;
      MetricReport s;
      s.name = "id_switches";
      s.value = switches;
      out["id_switches"] = s;
      break;
    }
    case Task::vos: {
      std::vector<TubeMask> pt, gt;
      int failures = 0;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        std::vector<const TubeEntity*> objs;
        for (const auto& e : samples[i].targets.entities)
          if (e.is_thing && e.mask.frame(0).any()) objs.push_back(&e);
        const auto& po = preds[i].at("objects");
        if (po.size() != objs.size()) throw DataError("vos prediction object count differs from ground truth");
        for (std::size_t k = 0; k < objs.size(); ++k) {
          gt.push_back(objs[k]->mask);
          if (po[k].at("tube").is_null()) {
            ++failures;
            pt.emplace_back(objs[k]->mask.frames(), objs[k]->mask.height(), objs[k]->mask.width());
          } else {
            pt.push_back(po[k].at("tube").get<TubeMask>());
          }
        }
      }
      out["jf"] = jf(pt, gt);
      out["jf"].extra["failures"] = failures;
      break;
    }
    case Task::interactive:
      out["point_iou"] = interactive_report(preds, samples, false);
      out["box_iou"] = interactive_report(preds, samples, true);
      break;
    case Task::ov: {
      int n = 0, fused = 0, pooled = 0, learned = 0;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto m = class_map(preds[i], vocab);
        const auto gt = samples[i].image_targets();
        for (const auto& p : preds[i].at("prompts")) {
          const int want = gt.entities.at(p.at("entity").get<std::size_t>()).class_id;
          fused += mapped(m, p.at("class_id").get<int>()) == want;
          pooled += mapped(m, p.at("pooled_class").get<int>()) == want;
          learned += mapped(m, p.at("learned_class").get<int>()) == want;
          ++n;
        }
      }
      MetricReport r;
      r.name = "ov_accuracy";
      r.value = n > 0 ? static_cast<double>(fused) / n : 0.0;
      r.tp = fused;
      r.fn = n - fused;
      r.extra["pooled"] = n > 0 ? static_cast<double>(pooled) / n : 0.0;
      r.extra["learned"] = n > 0 ? static_cast<double>(learned) / n : 0.0;
      out["ov_accuracy"] = r;
      break;
    }
  }
  return out;
}

}  // namespace omgseg
