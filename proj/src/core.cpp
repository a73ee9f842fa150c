#include "omgseg/core.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <set>
#include <sstream>

namespace omgseg {

using nlohmann::json;

BinaryMask::BinaryMask(int height, int width, bool fill)
    : height_(height), width_(width) {
  if (height < 1 || width < 1) throw ShapeError("mask dimensions must be >= 1");
  data_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width),
               fill ? 1 : 0);
}

BinaryMask::BinaryMask(int height, int width, std::vector<std::uint8_t> data)
    : height_(height), width_(width), data_(std::move(data)) {
  if (height < 1 || width < 1) throw ShapeError("mask dimensions must be >= 1");
  if (data_.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width))
    throw ShapeError("mask data length != height*width");
  for (auto& v : data_) v = v ? 1 : 0;
}

int BinaryMask::area() const {
  int n = 0;
  for (auto v : data_) n += v;
  return n;
}

TubeMask::TubeMask(std::vector<BinaryMask> frames) : frames_(std::move(frames)) {
  if (frames_.empty()) throw ShapeError("tube needs at least one frame");
  for (const auto& f : frames_) {
    if (f.height() != frames_.front().height() || f.width() != frames_.front().width())
      throw ShapeError("tube frames differ in size");
  }
}

TubeMask::TubeMask(int frames, int height, int width) {
  if (frames < 1) throw ShapeError("tube needs at least one frame");
  frames_.assign(static_cast<std::size_t>(frames), BinaryMask(height, width));
}

int TubeMask::area() const {
  int n = 0;
  for (const auto& f : frames_) n += f.area();
  return n;
}

TubeEntitySet to_tubes(const EntitySet& es) {
  TubeEntitySet ts{1, es.height, es.width, {}};
  for (const auto& e : es.entities)
    ts.entities.push_back({TubeMask({e.mask}), e.class_id, e.instance_id, e.is_thing});
  return ts;
}

EntitySet frame_entities(const TubeEntitySet& ts, int t) {
  if (t < 0 || t >= ts.frames) throw IndexError("frame index out of range");
  EntitySet es{ts.height, ts.width, {}};
  for (const auto& e : ts.entities)
    es.entities.push_back({e.mask.frame(t), e.class_id, e.instance_id, e.is_thing});
  return es;
}

// ---------------------------------------------------------------- prompts

VisualPrompt::VisualPrompt(PromptKind kind, std::vector<double> coords)
    : kind_(kind), coords_(std::move(coords)) {
  const std::size_t want = kind == PromptKind::box ? 4 : 2;
  if (coords_.size() != want)
    throw CoordOutOfRange("prompt expects " + std::to_string(want) + " coordinates");
  for (double c : coords_) {
    if (!(c >= 0.0 && c <= 1.0)) throw CoordOutOfRange("prompt coordinate outside [0,1]");
  }
  if (kind == PromptKind::box && !(coords_[0] < coords_[2] && coords_[1] < coords_[3]))
    throw CoordOutOfRange("box requires x1<x2 and y1<y2");
}

VisualPrompt VisualPrompt::point(double x, double y, bool positive) {
  return {positive ? PromptKind::point_positive : PromptKind::point_negative, {x, y}};
}

VisualPrompt VisualPrompt::box(double x1, double y1, double x2, double y2) {
  return {PromptKind::box, {x1, y1, x2, y2}};
}

std::array<double, 2> VisualPrompt::anchor() const {
  if (is_box()) return {0.5 * (coords_[0] + coords_[2]), 0.5 * (coords_[1] + coords_[3])};
  return {coords_[0], coords_[1]};
}

std::string_view to_string(PromptKind kind) {
  switch (kind) {
    case PromptKind::point_positive: return "point_positive";
    case PromptKind::point_negative: return "point_negative";
    case PromptKind::box: return "box";
  }
  return "point_positive";
}

PromptKind prompt_kind_from_string(std::string_view s) {
  if (s == "point_positive") return PromptKind::point_positive;
  if (s == "point_negative") return PromptKind::point_negative;
  if (s == "box") return PromptKind::box;
  throw CoordOutOfRange("unknown prompt kind: " + std::string(s));
}

// ------------------------------------------------------------- vocabulary

ClassVocabulary::ClassVocabulary(std::vector<std::string> names, std::vector<bool> thing_flags)
    : names_(std::move(names)), thing_flags_(std::move(thing_flags)) {
  if (names_.size() != thing_flags_.size())
    throw ConfigError("vocabulary names and thing flags differ in length");
  std::set<std::string> seen;
  for (const auto& n : names_) {
    if (!seen.insert(n).second) throw DuplicateClassName("duplicate class name: " + n);
  }
}

std::optional<int> ClassVocabulary::index_of(std::string_view name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) return std::nullopt;
  return static_cast<int>(it - names_.begin());
}

// --------------------------------------------------------------- panoptic

BinaryMask PanopticMap::segment_mask(int id) const {
  BinaryMask m(height, width);
  for (std::size_t i = 0; i < segment_ids.size(); ++i) m.set(i, segment_ids[i] == id);
  return m;
}

std::vector<std::string> PanopticMap::partition_violations() const {
  std::vector<std::string> out;
  if (segment_ids.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
    out.push_back("grid size != height*width");
    return out;
  }
  std::map<int, int> table;
  for (const auto& s : segments) {
    if (s.id == 0) out.push_back("segment table uses reserved id 0");
    if (++table[s.id] > 1) out.push_back("segment id " + std::to_string(s.id) + " listed twice");
  }
  std::set<int> used;
  for (int v : segment_ids) {
    if (v == 0) continue;
    if (!table.contains(v)) {
      if (used.insert(v).second)
        out.push_back("grid id " + std::to_string(v) + " missing from table");
    } else {
      used.insert(v);
    }
  }
  for (const auto& [id, n] : table) {
    if (id != 0 && !used.contains(id))
      out.push_back("segment " + std::to_string(id) + " has no pixels");
  }
  return out;
}

// -------------------------------------------------------------------- rle

RLEString encode_rle(const BinaryMask& mask) {
  std::ostringstream os;
  os << mask.height() << ' ' << mask.width();
  bool current = false;
  std::size_t run = 0;
  for (auto v : mask.data()) {
    if ((v != 0) == current) {
      ++run;
    } else {
      os << ' ' << run;
      current = !current;
      run = 1;
    }
  }
  os << ' ' << run;
  return os.str();
}

BinaryMask decode_rle(std::string_view s) {
  std::vector<long long> nums;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && s[i] == ' ') ++i;
    if (i >= s.size()) break;
    long long v = 0;
    auto [ptr, ec] = std::from_chars(s.data() + i, s.data() + s.size(), v);
    if (ec != std::errc() || v < 0) throw MalformedRLE("bad token in RLE string");
    i = static_cast<std::size_t>(ptr - s.data());
    if (i < s.size() && s[i] != ' ') throw MalformedRLE("bad separator in RLE string");
    nums.push_back(v);
  }
  if (nums.size() < 3) throw MalformedRLE("RLE needs height, width and runs");
  const long long h = nums[0], w = nums[1];
  if (h < 1 || w < 1 || h > (1 << 20) || w > (1 << 20)) throw MalformedRLE("bad RLE dimensions");
  long long total = 0;
  for (std::size_t k = 2; k < nums.size(); ++k) total += nums[k];
  if (total != h * w) throw MalformedRLE("RLE runs do not sum to height*width");
  std::vector<std::uint8_t> data;
  data.reserve(static_cast<std::size_t>(total));
  bool fg = false;
  for (std::size_t k = 2; k < nums.size(); ++k) {
    data.insert(data.end(), static_cast<std::size_t>(nums[k]), fg ? 1 : 0);
    fg = !fg;
  }
  return BinaryMask(static_cast<int>(h), static_cast<int>(w), std::move(data));
}

// -------------------------------------------------------------------- iou

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.height() != b.height() || a.width() != b.width())
    throw DimensionMismatch("mask_iou: dimension mismatch");
  long long inter = 0, uni = 0;
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) {
    inter += da[i] & db[i];
    uni += da[i] | db[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double tube_iou(const TubeMask& a, const TubeMask& b) {
  if (a.frames() != b.frames()) throw DimensionMismatch("tube_iou: frame count mismatch");
  long long inter = 0, uni = 0;
  for (int t = 0; t < a.frames(); ++t) {
    const auto& fa = a.frame(t);
    const auto& fb = b.frame(t);
    if (fa.height() != fb.height() || fa.width() != fb.width())
      throw DimensionMismatch("tube_iou: dimension mismatch");
    auto da = fa.data(), db = fb.data();
    for (std::size_t i = 0; i < da.size(); ++i) {
      inter += da[i] & db[i];
      uni += da[i] | db[i];
    }
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ------------------------------------------------------------- validation

std::vector<PanopticViolation> validate_panoptic(const TubeEntitySet& ts) {
  using Kind = PanopticViolation::Kind;
  std::vector<PanopticViolation> out;
  const auto n = static_cast<int>(ts.entities.size());
  for (int i = 0; i < n; ++i) {
    const auto& m = ts.entities[i].mask;
    if (m.frames() != ts.frames || m.height() != ts.height || m.width() != ts.width)
      out.push_back({Kind::dimension, i, -1});
  }
  if (!out.empty()) return out;

  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      bool overlap = false;
      for (int t = 0; t < ts.frames && !overlap; ++t) {
        auto a = ts.entities[i].mask.frame(t).data();
        auto b = ts.entities[j].mask.frame(t).data();
        for (std::size_t p = 0; p < a.size(); ++p) {
          if (a[p] & b[p]) {
            overlap = true;
            break;
          }
        }
      }
      if (overlap) out.push_back({Kind::overlap, i, j});
    }
  }
  std::map<int, int> thing_ids;
  for (int i = 0; i < n; ++i) {
    const auto& e = ts.entities[i];
    if (!e.is_thing) {
      if (e.instance_id != 0) out.push_back({Kind::stuff_id, i, -1});
      continue;
    }
    if (e.instance_id <= 0) {
      out.push_back({Kind::thing_id_zero, i, -1});
      continue;
    }
    auto [it, fresh] = thing_ids.emplace(e.instance_id, i);
    if (!fresh) out.push_back({Kind::duplicate_thing_id, it->second, i});
  }
  return out;
}

std::vector<PanopticViolation> validate_panoptic(const EntitySet& es) {
  return validate_panoptic(to_tubes(es));
}

// ------------------------------------------------------------------- json

void to_json(json& j, const BinaryMask& m) { j = encode_rle(m); }
void from_json(const json& j, BinaryMask& m) { m = decode_rle(j.get<std::string>()); }

void to_json(json& j, const TubeMask& m) { j = m.all(); }
void from_json(const json& j, TubeMask& m) { m = TubeMask(j.get<std::vector<BinaryMask>>()); }

void to_json(json& j, const Entity& e) {
  j = json{{"mask", e.mask}, {"class_id", e.class_id}, {"instance_id", e.instance_id},
           {"is_thing", e.is_thing}};
}
void from_json(const json& j, Entity& e) {
  e.mask = j.at("mask").get<BinaryMask>();
  e.class_id = j.at("class_id").get<int>();
  e.instance_id = j.at("instance_id").get<int>();
  e.is_thing = j.at("is_thing").get<bool>();
}

void to_json(json& j, const EntitySet& es) {
  j = json{{"height", es.height}, {"width", es.width}, {"entities", es.entities}};
}
void from_json(const json& j, EntitySet& es) {
  es.height = j.at("height").get<int>();
  es.width = j.at("width").get<int>();
  es.entities = j.at("entities").get<std::vector<Entity>>();
}

void to_json(json& j, const TubeEntity& e) {
  j = json{{"tube", e.mask}, {"class_id", e.class_id}, {"instance_id", e.instance_id},
           {"is_thing", e.is_thing}};
}
void from_json(const json& j, TubeEntity& e) {
  e.mask = j.at("tube").get<TubeMask>();
  e.class_id = j.at("class_id").get<int>();
  e.instance_id = j.at("instance_id").get<int>();
  e.is_thing = j.at("is_thing").get<bool>();
}

void to_json(json& j, const TubeEntitySet& ts) {
  j = json{{"frames", ts.frames}, {"height", ts.height}, {"width", ts.width},
           {"entities", ts.entities}};
}
void from_json(const json& j, TubeEntitySet& ts) {
  ts.frames = j.at("frames").get<int>();
  ts.height = j.at("height").get<int>();
  ts.width = j.at("width").get<int>();
  ts.entities = j.at("entities").get<std::vector<TubeEntity>>();
}

void to_json(json& j, const VisualPrompt& p) {
  j = json{{"kind", std::string(to_string(p.kind()))},
           {"coords", std::vector<double>(p.coords().begin(), p.coords().end())}};
}
void from_json(const json& j, VisualPrompt& p) {
  if (!j.is_object() || !j.contains("kind") || !j.contains("coords"))
    throw CoordOutOfRange("prompt needs kind and coords");
  p = VisualPrompt(prompt_kind_from_string(j.at("kind").get<std::string>()),
                   j.at("coords").get<std::vector<double>>());
}

void to_json(json& j, const ClassVocabulary& v) {
  j = json{{"names", v.names()}, {"thing_flags", v.thing_flags()}};
}
void from_json(const json& j, ClassVocabulary& v) {
  v = ClassVocabulary(j.at("names").get<std::vector<std::string>>(),
                      j.at("thing_flags").get<std::vector<bool>>());
}

void to_json(json& j, const PanopticMap& p) {
  json segs = json::array();
  for (const auto& s : p.segments) {
    segs.push_back({{"id", s.id}, {"class_id", s.class_id}, {"score", s.score},
                    {"mask", encode_rle(p.segment_mask(s.id))}});
  }
  j = json{{"height", p.height}, {"width", p.width}, {"segments", segs}};
}
void from_json(const json& j, PanopticMap& p) {
  p.height = j.at("height").get<int>();
  p.width = j.at("width").get<int>();
  p.segment_ids.assign(static_cast<std::size_t>(p.height) * static_cast<std::size_t>(p.width), 0);
  p.segments.clear();
  for (const auto& s : j.at("segments")) {
    PanopticSegment seg{s.at("id").get<int>(), s.at("class_id").get<int>(),
                        s.at("score").get<double>()};
    auto m = decode_rle(s.at("mask").get<std::string>());
    if (m.height() != p.height || m.width() != p.width)
      throw DimensionMismatch("panoptic segment mask size mismatch");
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!m[i]) continue;
      if (p.segment_ids[i] != 0) throw DataError("panoptic segments overlap");
      p.segment_ids[i] = seg.id;
    }
    p.segments.push_back(seg);
  }
}

}  // namespace omgseg
