#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace omgseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define OMGSEG_DECLARE_ERROR(Name)          \
  class Name : public Error {               \
   public:                                  \
    using Error::Error;                     \
  }

OMGSEG_DECLARE_ERROR(MalformedRLE);
OMGSEG_DECLARE_ERROR(DimensionMismatch);
OMGSEG_DECLARE_ERROR(ShapeError);
OMGSEG_DECLARE_ERROR(ConfigError);
OMGSEG_DECLARE_ERROR(DataError);
OMGSEG_DECLARE_ERROR(EmptyMask);
OMGSEG_DECLARE_ERROR(CoordOutOfRange);
OMGSEG_DECLARE_ERROR(DuplicateClassName);
OMGSEG_DECLARE_ERROR(IndexError);
OMGSEG_DECLARE_ERROR(WindowTooLarge);

#undef OMGSEG_DECLARE_ERROR

/// Row-major boolean grid. Stored as bytes so spans can be handed out.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int height, int width, bool fill = false);
  BinaryMask(int height, int width, std::vector<std::uint8_t> data);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }
  bool empty_grid() const { return data_.empty(); }

  bool at(int y, int x) const { return data_[index(y, x)] != 0; }
  bool operator[](std::size_t i) const { return data_[i] != 0; }
  void set(int y, int x, bool v) { data_[index(y, x)] = v ? 1 : 0; }
  void set(std::size_t i, bool v) { data_[i] = v ? 1 : 0; }

  std::span<const std::uint8_t> data() const { return data_; }
  int area() const;
  bool any() const { return area() > 0; }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  std::size_t index(int y, int x) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Ordered frames of equal size, T >= 1.
class TubeMask {
 public:
  TubeMask() = default;
  explicit TubeMask(std::vector<BinaryMask> frames);
  TubeMask(int frames, int height, int width);

  int frames() const { return static_cast<int>(frames_.size()); }
  int height() const { return frames_.empty() ? 0 : frames_.front().height(); }
  int width() const { return frames_.empty() ? 0 : frames_.front().width(); }
  const BinaryMask& frame(int t) const { return frames_.at(static_cast<std::size_t>(t)); }
  BinaryMask& frame(int t) { return frames_.at(static_cast<std::size_t>(t)); }
  const std::vector<BinaryMask>& all() const { return frames_; }
  int area() const;

  friend bool operator==(const TubeMask&, const TubeMask&) = default;

 private:
  std::vector<BinaryMask> frames_;
};

struct Entity {
  BinaryMask mask;
  int class_id = 0;
  int instance_id = 0;
  bool is_thing = false;
  friend bool operator==(const Entity&, const Entity&) = default;
};

struct EntitySet {
  int height = 0;
  int width = 0;
  std::vector<Entity> entities;
  friend bool operator==(const EntitySet&, const EntitySet&) = default;
};

struct TubeEntity {
  TubeMask mask;
  int class_id = 0;
  int instance_id = 0;
  bool is_thing = false;
  friend bool operator==(const TubeEntity&, const TubeEntity&) = default;
};

struct TubeEntitySet {
  int frames = 1;
  int height = 0;
  int width = 0;
  std::vector<TubeEntity> entities;
  friend bool operator==(const TubeEntitySet&, const TubeEntitySet&) = default;
};

TubeEntitySet to_tubes(const EntitySet& es);
/// Slice frame `t` of every tube.
EntitySet frame_entities(const TubeEntitySet& ts, int t);

enum class PromptKind { point_positive, point_negative, box };

/// Point or box prompt in normalized [0,1] image coordinates.
class VisualPrompt {
 public:
  VisualPrompt() = default;
  static VisualPrompt point(double x, double y, bool positive = true);
  static VisualPrompt box(double x1, double y1, double x2, double y2);
  /// Validates arity and range; throws CoordOutOfRange.
  VisualPrompt(PromptKind kind, std::vector<double> coords);

  PromptKind kind() const { return kind_; }
  bool is_box() const { return kind_ == PromptKind::box; }
  std::span<const double> coords() const { return coords_; }
  /// Point location, or the box center.
  std::array<double, 2> anchor() const;

  friend bool operator==(const VisualPrompt&, const VisualPrompt&) = default;

 private:
  PromptKind kind_ = PromptKind::point_positive;
  std::vector<double> coords_{0.5, 0.5};
};

std::string_view to_string(PromptKind kind);
PromptKind prompt_kind_from_string(std::string_view s);

class ClassVocabulary {
 public:
  ClassVocabulary() = default;
  ClassVocabulary(std::vector<std::string> names, std::vector<bool> thing_flags);

  int size() const { return static_cast<int>(names_.size()); }
  const std::string& name(int i) const { return names_.at(static_cast<std::size_t>(i)); }
  bool is_thing(int i) const { return thing_flags_.at(static_cast<std::size_t>(i)); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<bool>& thing_flags() const { return thing_flags_; }
  std::optional<int> index_of(std::string_view name) const;

  friend bool operator==(const ClassVocabulary&, const ClassVocabulary&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<bool> thing_flags_;
};

struct PanopticSegment {
  int id = 0;
  int class_id = 0;
  double score = 0.0;
  friend bool operator==(const PanopticSegment&, const PanopticSegment&) = default;
};

/// Segment-id grid (0 = void) plus the segment table.
struct PanopticMap {
  int height = 0;
  int width = 0;
  std::vector<int> segment_ids;
  std::vector<PanopticSegment> segments;

  int at(int y, int x) const { return segment_ids[static_cast<std::size_t>(y * width + x)]; }
  BinaryMask segment_mask(int id) const;
  /// Empty when every nonzero id has exactly one table entry and vice versa.
  std::vector<std::string> partition_violations() const;
  friend bool operator==(const PanopticMap&, const PanopticMap&) = default;
};

using RLEString = std::string;

RLEString encode_rle(const BinaryMask& mask);
BinaryMask decode_rle(std::string_view s);

double mask_iou(const BinaryMask& a, const BinaryMask& b);
double tube_iou(const TubeMask& a, const TubeMask& b);

struct PanopticViolation {
  enum class Kind { overlap, stuff_id, duplicate_thing_id, thing_id_zero, dimension };
  Kind kind;
  int first = -1;
  int second = -1;
  friend bool operator==(const PanopticViolation&, const PanopticViolation&) = default;
};

std::vector<PanopticViolation> validate_panoptic(const EntitySet& es);
std::vector<PanopticViolation> validate_panoptic(const TubeEntitySet& ts);

/// Interleaved RGB in [0,1], row-major.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> rgb;

  Image() = default;
  Image(int h, int w) : height(h), width(w), rgb(static_cast<std::size_t>(h * w * 3), 0.f) {}
  float& at(int y, int x, int c) { return rgb[static_cast<std::size_t>((y * width + x) * 3 + c)]; }
  float at(int y, int x, int c) const { return rgb[static_cast<std::size_t>((y * width + x) * 3 + c)]; }
  friend bool operator==(const Image&, const Image&) = default;
};

using Clip = std::vector<Image>;

// JSON (masks travel as RLE strings).
void to_json(nlohmann::json& j, const BinaryMask& m);
void from_json(const nlohmann::json& j, BinaryMask& m);
void to_json(nlohmann::json& j, const TubeMask& m);
void from_json(const nlohmann::json& j, TubeMask& m);
void to_json(nlohmann::json& j, const Entity& e);
void from_json(const nlohmann::json& j, Entity& e);
void to_json(nlohmann::json& j, const EntitySet& es);
void from_json(const nlohmann::json& j, EntitySet& es);
void to_json(nlohmann::json& j, const TubeEntity& e);
void from_json(const nlohmann::json& j, TubeEntity& e);
void to_json(nlohmann::json& j, const TubeEntitySet& ts);
void from_json(const nlohmann::json& j, TubeEntitySet& ts);
void to_json(nlohmann::json& j, const VisualPrompt& p);
void from_json(const nlohmann::json& j, VisualPrompt& p);
void to_json(nlohmann::json& j, const ClassVocabulary& v);
void from_json(const nlohmann::json& j, ClassVocabulary& v);
void to_json(nlohmann::json& j, const PanopticMap& p);
void from_json(const nlohmann::json& j, PanopticMap& p);

}  // namespace omgseg
