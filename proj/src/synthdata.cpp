#include "omgseg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "omgseg/io.hpp"

namespace omgseg {

using nlohmann::json;

std::string_view to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
  }
  return "circle";
}

ShapeKind shape_from_string(std::string_view s) {
  if (s == "circle") return ShapeKind::circle;
  if (s == "square") return ShapeKind::square;
  if (s == "triangle") return ShapeKind::triangle;
  throw ConfigError("unknown shape kind: " + std::string(s));
}

void validate(const ShapeWorldConfig& c) {
  if (c.height < 32 || c.width < 32) throw ConfigError("image_size must be >= 32x32");
  if (c.colors.empty()) throw ConfigError("thing color palette is empty");
  if (c.shapes.empty()) throw ConfigError("shape list is empty");
  if (c.min_things < 0 || c.max_things < c.min_things)
    throw ConfigError("num_things_range must satisfy 0 <= min <= max");
  if (!(c.size_min > 0 && c.size_max >= c.size_min && c.size_max < 0.5))
    throw ConfigError("size range must satisfy 0 < min <= max < 0.5");
  if (!(c.horizon_min >= 0 && c.horizon_max <= 1 && c.horizon_min <= c.horizon_max))
    throw ConfigError("horizon range must lie in [0,1]");
  if (c.velocity_min < 0 || c.velocity_max < c.velocity_min)
    throw ConfigError("velocity range must satisfy 0 <= min <= max");
  auto vocab = full_vocabulary(c);
  for (const auto& h : c.holdout) {
    if (!vocab.index_of(h) || !vocab.is_thing(*vocab.index_of(h)))
      throw ConfigError("holdout class is not a thing class: " + h);
  }
  if (c.holdout_policy == HoldoutPolicy::require && (c.holdout.empty() || c.max_things < 1))
    throw ConfigError("holdout_policy=require needs a holdout class and max_things >= 1");
}

namespace {

json color_json(const PaletteColor& p) { return json{{"name", p.name}, {"rgb", p.rgb}}; }

PaletteColor color_from(const json& j) {
  io::reject_unknown_keys(j, {"name", "rgb"}, "color");
  PaletteColor p{j.at("name").get<std::string>(), j.at("rgb").get<std::array<int, 3>>()};
  for (int v : p.rgb) {
    if (v < 0 || v > 255) throw ConfigError("color channel outside [0,255]");
  }
  return p;
}

std::string_view policy_name(HoldoutPolicy p) {
  switch (p) {
    case HoldoutPolicy::exclude: return "exclude";
    case HoldoutPolicy::include: return "include";
    case HoldoutPolicy::require: return "require";
  }
  return "exclude";
}

}  // namespace

void to_json(json& j, const ShapeWorldConfig& c) {
  json colors = json::array();
  for (const auto& p : c.colors) colors.push_back(color_json(p));
  json shapes = json::array();
  for (auto s : c.shapes) shapes.push_back(std::string(to_string(s)));
  j = json{{"image_size", {c.height, c.width}},
           {"num_things_range", {c.min_things, c.max_things}},
           {"shapes", shapes},
           {"colors", colors},
           {"sky", color_json(c.sky)},
           {"ground", color_json(c.ground)},
           {"horizon_range", {c.horizon_min, c.horizon_max}},
           {"size_range", {c.size_min, c.size_max}},
           {"min_separation", c.min_separation},
           {"velocity_range", {c.velocity_min, c.velocity_max}},
           {"holdout", c.holdout},
           {"holdout_policy", std::string(policy_name(c.holdout_policy))},
           {"seed", c.seed}};
}

void from_json(const json& j, ShapeWorldConfig& c) {
  io::reject_unknown_keys(j,
                          {"image_size", "num_things_range", "shapes", "colors", "sky", "ground",
                           "horizon_range", "size_range", "min_separation", "velocity_range",
                           "holdout", "holdout_policy", "seed"},
                          "shapeworld config");
  try {
    if (j.contains("image_size")) {
      auto v = j.at("image_size").get<std::array<int, 2>>();
      c.height = v[0];
      c.width = v[1];
    }
    if (j.contains("num_things_range")) {
      auto v = j.at("num_things_range").get<std::array<int, 2>>();
      c.min_things = v[0];
      c.max_things = v[1];
    }
    if (j.contains("shapes")) {
      c.shapes.clear();
      for (const auto& s : j.at("shapes")) c.shapes.push_back(shape_from_string(s.get<std::string>()));
    }
    if (j.contains("colors")) {
      c.colors.clear();
      for (const auto& p : j.at("colors")) c.colors.push_back(color_from(p));
    }
    if (j.contains("sky")) c.sky = color_from(j.at("sky"));
    if (j.contains("ground")) c.ground = color_from(j.at("ground"));
    if (j.contains("horizon_range")) {
      auto v = j.at("horizon_range").get<std::array<double, 2>>();
      c.horizon_min = v[0];
      c.horizon_max = v[1];
    }
    if (j.contains("size_range")) {
      auto v = j.at("size_range").get<std::array<double, 2>>();
      c.size_min = v[0];
      c.size_max = v[1];
    }
    if (j.contains("min_separation")) c.min_separation = j.at("min_separation").get<double>();
    if (j.contains("velocity_range")) {
      auto v = j.at("velocity_range").get<std::array<double, 2>>();
      c.velocity_min = v[0];
      c.velocity_max = v[1];
    }
    if (j.contains("holdout")) c.holdout = j.at("holdout").get<std::vector<std::string>>();
    if (j.contains("holdout_policy")) {
      auto p = j.at("holdout_policy").get<std::string>();
      if (p == "exclude") c.holdout_policy = HoldoutPolicy::exclude;
      else if (p == "include") c.holdout_policy = HoldoutPolicy::include;
      else if (p == "require") c.holdout_policy = HoldoutPolicy::require;
      else throw ConfigError("unknown holdout_policy: " + p);
    }
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("shapeworld config: ") + e.what());
  }
}

ClassVocabulary full_vocabulary(const ShapeWorldConfig& cfg) {
  std::vector<std::string> names;
  std::vector<bool> things;
  for (const auto& color : cfg.colors) {
    for (auto shape : cfg.shapes) {
      names.push_back(color.name + " " + std::string(to_string(shape)));
      things.push_back(true);
    }
  }
  names.push_back(cfg.sky.name);
  things.push_back(false);
  names.push_back(cfg.ground.name);
  things.push_back(false);
  return ClassVocabulary(std::move(names), std::move(things));
}

ClassVocabulary training_vocabulary(const ShapeWorldConfig& cfg) {
  auto full = full_vocabulary(cfg);
  std::vector<std::string> names;
  std::vector<bool> things;
  for (int i = 0; i < full.size(); ++i) {
    if (std::find(cfg.holdout.begin(), cfg.holdout.end(), full.name(i)) != cfg.holdout.end())
      continue;
    names.push_back(full.name(i));
    things.push_back(full.is_thing(i));
  }
  return ClassVocabulary(std::move(names), std::move(things));
}

// ------------------------------------------------------------- rendering

namespace {

double wrap_delta(double d, double period) {
  return d - period * std::floor((d + 0.5 * period) / period);
}

bool inside(const ThingLayout& t, double cx, double cy, double px, double py, int h, int w) {
  const double dx = wrap_delta(px - cx, w);
  const double dy = wrap_delta(py - cy, h);
  const double r = t.radius;
  switch (t.shape) {
    case ShapeKind::circle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::square: return std::abs(dx) <= r && std::abs(dy) <= r;
    case ShapeKind::triangle: return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);
  }
  return false;
}

}  // namespace

SceneLayout draw_layout(const ShapeWorldConfig& cfg, Rng& rng) {
  validate(cfg);
  const auto vocab = full_vocabulary(cfg);
  SceneLayout layout;
  layout.height = cfg.height;
  layout.width = cfg.width;
  layout.horizon = static_cast<int>(
      std::lround(cfg.height * rng.uniform(cfg.horizon_min, cfg.horizon_max)));

  std::vector<int> allowed, held;
  const int n_things = static_cast<int>(cfg.colors.size() * cfg.shapes.size());
  for (int k = 0; k < n_things; ++k) {
    const bool is_held =
        std::find(cfg.holdout.begin(), cfg.holdout.end(), vocab.name(k)) != cfg.holdout.end();
    if (is_held) held.push_back(k);
    if (!is_held || cfg.holdout_policy != HoldoutPolicy::exclude) allowed.push_back(k);
  }
  if (allowed.empty()) throw ConfigError("no drawable thing classes");

  const int count = rng.uniform_int(cfg.min_things, cfg.max_things);
  const double side = std::min(cfg.height, cfg.width);
  for (int i = 0; i < count; ++i) {
    ThingLayout t;
    int cls = allowed[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(allowed.size()) - 1))];
    if (cfg.holdout_policy == HoldoutPolicy::require && i == 0)
      cls = held[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(held.size()) - 1))];
    t.class_id = cls;
    t.instance_id = i + 1;
    const auto& color = cfg.colors[static_cast<std::size_t>(cls) / cfg.shapes.size()];
    t.shape = cfg.shapes[static_cast<std::size_t>(cls) % cfg.shapes.size()];
    t.rgb = color.rgb;
    t.radius = side * rng.uniform(cfg.size_min, cfg.size_max);
    for (int attempt = 0; attempt < 64; ++attempt) {
      t.cx = rng.uniform(t.radius, cfg.width - t.radius);
      t.cy = rng.uniform(t.radius, cfg.height - t.radius);
      bool ok = true;
      for (const auto& o : layout.things) {
        const double d = std::hypot(t.cx - o.cx, t.cy - o.cy);
        if (d < cfg.min_separation * (t.radius + o.radius)) ok = false;
      }
      if (ok) break;
    }
    layout.things.push_back(t);
  }
  return layout;
}

void draw_velocities(const ShapeWorldConfig& cfg, SceneLayout& layout, Rng& rng) {
  for (auto& t : layout.things) {
    const double speed = rng.uniform(cfg.velocity_min, cfg.velocity_max);
    const double angle = rng.uniform(0.0, 2.0 * M_PI);
    // whole pixels per frame keep the rasterized area exact under translation
    t.vx = std::round(speed * std::cos(angle));
    t.vy = std::round(speed * std::sin(angle));
    if (t.vx == 0 && t.vy == 0) {
      if (std::abs(std::cos(angle)) >= std::abs(std::sin(angle)))
        t.vx = std::cos(angle) < 0 ? -1 : 1;
      else
        t.vy = std::sin(angle) < 0 ? -1 : 1;
    }
  }
}

SampleRecord render_scene(const ShapeWorldConfig& cfg, const SceneLayout& layout, int frames) {
  if (frames < 1) throw ConfigError("clip length must be >= 1");
  const int h = layout.height, w = layout.width;
  const auto vocab = full_vocabulary(cfg);
  const int sky_id = vocab.size() - 2;
  const int ground_id = vocab.size() - 1;
  const int n = static_cast<int>(layout.things.size());

  SampleRecord s;
  s.targets = TubeEntitySet{frames, h, w, {}};
  // owner per pixel: -2 sky, -1 ground, k thing index
  std::vector<std::vector<int>> owner(static_cast<std::size_t>(frames),
                                      std::vector<int>(static_cast<std::size_t>(h * w)));
  for (int t = 0; t < frames; ++t) {
    Image img(h, w);
    auto& own = owner[static_cast<std::size_t>(t)];
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        own[static_cast<std::size_t>(y * w + x)] = y < layout.horizon ? -2 : -1;
      }
    }
    for (int k = 0; k < n; ++k) {
      const auto& th = layout.things[static_cast<std::size_t>(k)];
      const double cx = th.cx + t * th.vx, cy = th.cy + t * th.vy;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          if (inside(th, cx, cy, x + 0.5, y + 0.5, h, w)) own[static_cast<std::size_t>(y * w + x)] = k;
        }
      }
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int o = own[static_cast<std::size_t>(y * w + x)];
        const auto& rgb = o == -2   ? cfg.sky.rgb
                          : o == -1 ? cfg.ground.rgb
                                    : layout.things[static_cast<std::size_t>(o)].rgb;
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(rgb[static_cast<std::size_t>(c)]) / 255.f;
      }
    }
    s.frames.push_back(std::move(img));
  }

  auto tube_of = [&](int label) {
    TubeMask m(frames, h, w);
    for (int t = 0; t < frames; ++t) {
      const auto& own = owner[static_cast<std::size_t>(t)];
      for (std::size_t p = 0; p < own.size(); ++p) m.frame(t).set(p, own[p] == label);
    }
    return m;
  };
  for (int k = 0; k < n; ++k) {
    auto m = tube_of(k);
    if (m.area() == 0) continue;  // fully occluded for the whole clip
    const auto& th = layout.things[static_cast<std::size_t>(k)];
    s.targets.entities.push_back({std::move(m), th.class_id, th.instance_id, true});
  }
  s.targets.entities.push_back({tube_of(-2), sky_id, 0, false});
  s.targets.entities.push_back({tube_of(-1), ground_id, 0, false});
  return s;
}

SampleRecord gen_image_sample(const ShapeWorldConfig& cfg, std::uint64_t seed) {
  Rng rng(mix_seed(cfg.seed, seed));
  auto layout = draw_layout(cfg, rng);
  auto s = render_scene(cfg, layout, 1);
  s.source = "image";
  return s;
}

SampleRecord gen_video_sample(const ShapeWorldConfig& cfg, std::uint64_t seed, int frames) {
  if (frames < 1) throw ConfigError("clip length must be >= 1");
  Rng rng(mix_seed(cfg.seed, seed));
  auto layout = draw_layout(cfg, rng);
  draw_velocities(cfg, layout, rng);
  auto s = render_scene(cfg, layout, frames);
  s.source = "video";
  return s;
}

SampleRecord make_pseudo_video(const SampleRecord& image, double shift_max, std::uint64_t seed) {
  if (image.num_frames() != 1) throw ShapeError("pseudo-video needs a single-frame sample");
  const auto& src = image.frames.front();
  const int h = src.height, w = src.width;
  const int s = static_cast<int>(std::floor(shift_max * std::min(h, w)));
  Rng rng(mix_seed(seed, 0x5eed));
  const int dx = rng.uniform_int(-s, s);
  const int dy = rng.uniform_int(-s, s);
  auto wrap = [](int v, int n) { return ((v % n) + n) % n; };

  SampleRecord out;
  out.source = image.source;
  out.prompts = image.prompts;
  Image moved(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int sy = wrap(y - dy, h), sx = wrap(x - dx, w);
      for (int c = 0; c < 3; ++c) moved.at(y, x, c) = src.at(sy, sx, c);
    }
  }
  out.frames = {src, std::move(moved)};
  out.targets = TubeEntitySet{2, h, w, {}};
  for (const auto& e : image.targets.entities) {
    const auto& m0 = e.mask.frame(0);
    BinaryMask m1(h, w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) m1.set(y, x, m0.at(wrap(y - dy, h), wrap(x - dx, w)));
    }
    out.targets.entities.push_back({TubeMask({m0, std::move(m1)}), e.class_id, e.instance_id, e.is_thing});
  }
  return out;
}

std::vector<PromptTarget> derive_prompts(const EntitySet& targets, std::uint64_t seed) {
  if (targets.entities.empty()) throw EmptyMask("derive_prompts: no entities");
  Rng rng(mix_seed(seed, 0x9e0));
  std::vector<PromptTarget> out;
  const int h = targets.height, w = targets.width;
  for (int i = 0; i < static_cast<int>(targets.entities.size()); ++i) {
    const auto& m = targets.entities[static_cast<std::size_t>(i)].mask;
    int x0 = w, y0 = h, x1 = -1, y1 = -1;
    double sx = 0, sy = 0;
    long long n = 0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (!m.at(y, x)) continue;
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
        sx += x + 0.5;
        sy += y + 0.5;
        ++n;
      }
    }
    if (n == 0) throw EmptyMask("entity " + std::to_string(i) + " has zero area");
    out.push_back({VisualPrompt::box(static_cast<double>(x0) / w, static_cast<double>(y0) / h,
                                     static_cast<double>(x1 + 1) / w,
                                     static_cast<double>(y1 + 1) / h),
                   i});
    const double cx = sx / static_cast<double>(n), cy = sy / static_cast<double>(n);
    double best = std::numeric_limits<double>::infinity();
    std::vector<std::pair<int, int>> ties;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (!m.at(y, x)) continue;
        const double d = (x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy);
        if (d < best - 1e-12) {
          best = d;
          ties.assign(1, {y, x});
        } else if (std::abs(d - best) <= 1e-12) {
          ties.emplace_back(y, x);
        }
      }
    }
    const auto [py, px] = ties[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(ties.size()) - 1))];
    out.push_back({VisualPrompt::point((px + 0.5) / w, (py + 0.5) / h, true), i});
  }
  return out;
}

// ---------------------------------------------------------------- sampler

BalancedSampler::BalancedSampler(std::vector<DatasetShare> shares, std::uint64_t seed)
    : shares_(std::move(shares)), rng_(mix_seed(seed, 0xba1a)) {
  if (shares_.empty()) throw ConfigError("balanced sampler needs at least one dataset");
  for (const auto& s : shares_) {
    if (s.ratio <= 0) throw ConfigError("dataset ratio must be positive: " + s.name);
    if (s.size <= 0) throw ConfigError("dataset is empty: " + s.name);
    std::vector<int> perm(static_cast<std::size_t>(s.size));
    std::iota(perm.begin(), perm.end(), 0);
    rng_.shuffle(perm);
    permutations_.push_back(std::move(perm));
  }
  cursors_.assign(shares_.size(), 0);
}

void BalancedSampler::refill_block() {
  block_.clear();
  for (std::size_t i = 0; i < shares_.size(); ++i)
    block_.insert(block_.end(), static_cast<std::size_t>(shares_[i].ratio), static_cast<int>(i));
  rng_.shuffle(block_);
  block_pos_ = 0;
}

SamplerDraw BalancedSampler::next() {
  if (block_pos_ >= block_.size()) refill_block();
  const int d = block_[block_pos_++];
  auto& cursor = cursors_[static_cast<std::size_t>(d)];
  const auto& perm = permutations_[static_cast<std::size_t>(d)];
  const int idx = perm[cursor % perm.size()];
  ++cursor;
  return {shares_[static_cast<std::size_t>(d)].name, d, idx};
}

// ------------------------------------------------------------------ disk

void write_sample(const std::filesystem::path& dir, int index, const SampleRecord& s) {
  std::filesystem::create_directories(dir);
  std::ostringstream stem;
  stem << std::setw(6) << std::setfill('0') << index;
  json frames = json::array();
  for (int t = 0; t < s.num_frames(); ++t) {
    const auto name = stem.str() + "_f" + std::to_string(t) + ".png";
    io::write_png(dir / name, s.frames[static_cast<std::size_t>(t)]);
    frames.push_back(name);
  }
  json prompts = json::array();
  for (const auto& p : s.prompts) prompts.push_back({{"prompt", p.prompt}, {"entity", p.entity}});
  io::write_json(dir / (stem.str() + ".json"),
                 json{{"source", s.source}, {"frames", frames}, {"targets", s.targets},
                      {"prompts", prompts}},
                 -1);
}

SampleRecord read_sample(const std::filesystem::path& json_path) {
  const auto j = io::read_json(json_path);
  SampleRecord s;
  try {
    s.source = j.at("source").get<std::string>();
    for (const auto& f : j.at("frames"))
      s.frames.push_back(io::read_png(json_path.parent_path() / f.get<std::string>()));
    s.targets = j.at("targets").get<TubeEntitySet>();
    for (const auto& p : j.at("prompts"))
      s.prompts.push_back({p.at("prompt").get<VisualPrompt>(), p.at("entity").get<int>()});
  } catch (const json::exception& e) {
    throw DataError(json_path.string() + ": " + e.what());
  }
  if (s.num_frames() != s.targets.frames) throw DataError(json_path.string() + ": frame count mismatch");
  for (const auto& p : s.prompts) {
    if (p.entity < 0 || p.entity >= static_cast<int>(s.targets.entities.size()))
      throw DataError(json_path.string() + ": prompt references missing entity");
  }
  return s;
}

std::vector<SampleRecord> load_split(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("missing dataset directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<SampleRecord> out;
  for (const auto& f : files) out.push_back(read_sample(f));
  return out;
}

}  // namespace omgseg
