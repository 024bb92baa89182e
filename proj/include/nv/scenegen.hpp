#pragma once

// Procedural shape scenes. A SceneSpec is the ground truth; the rendered
// image, caption, QA pairs and statements are views of it, and the predicate
// evaluator checks any of those texts back against the spec.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nv/image.hpp"

namespace nv {

enum class ShapeKind { Circle, Square, Triangle };
enum class ColorKind { Red, Green, Blue, Yellow };
enum class SizeKind { Small, Large };

inline constexpr std::array kAllShapes{ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle};
inline constexpr std::array kAllColors{ColorKind::Red, ColorKind::Green, ColorKind::Blue,
                                       ColorKind::Yellow};

std::string_view to_string(ShapeKind s);
std::string_view to_string(ColorKind c);
std::string_view to_string(SizeKind s);
std::optional<ShapeKind> parse_shape(std::string_view word);
std::optional<ColorKind> parse_color(std::string_view word);
std::optional<SizeKind> parse_size(std::string_view word);

// 8-bit RGB of each color.
std::array<std::uint8_t, 3> color_rgb(ColorKind c);

inline constexpr int kGridCells = 4;   // 4 x 4 placement grid
inline constexpr int kCellPixels = 8;  // 32 x 32 image
inline constexpr std::size_t kSceneImageSize = kGridCells * kCellPixels;

struct SceneObject {
  ShapeKind shape = ShapeKind::Circle;
  ColorKind color = ColorKind::Red;
  int row = 0;
  int col = 0;
  SizeKind size = SizeKind::Large;
  bool operator==(const SceneObject&) const = default;
};

// 1-3 objects with distinct shapes and distinct cells, ordered by (row, col).
struct SceneSpec {
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;
  bool operator==(const SceneSpec&) const = default;

  const SceneObject* find(ShapeKind shape) const;
};

// Throws InvalidArgument when the spec breaks its invariants.
void validate_scene(const SceneSpec& scene);

SceneSpec generate_scene(std::uint64_t seed);

// White background; large objects fill their 8x8 cell, small ones the
// centered 4x4.
Image render_scene(const SceneSpec& scene);

// "a {size} {color} {shape}" for the first object by shape order, followed by
// "{relation} a {size} {color} {shape}" for the second when there is one.
std::string caption_of(const SceneSpec& scene, std::uint64_t seed = 0);

// Relation of a to b: above/below when rows differ, else left of/right of.
std::string_view relation_between(const SceneObject& a, const SceneObject& b);

enum class QAKind { Count, Color, Shape, Position, Compare };
std::string_view to_string(QAKind k);
std::optional<QAKind> parse_qa_kind(std::string_view s);

struct QAPair {
  std::string question;
  std::string answer;
  QAKind kind = QAKind::Count;
  bool operator==(const QAPair&) const = default;
};

std::vector<QAPair> qa_pairs_of(const SceneSpec& scene);

struct Statement {
  std::string text;
  bool truth = false;
  bool operator==(const Statement&) const = default;
};

// True statements are read off the spec; false ones swap a color or a
// relation. CannotFalsify when no statement with the wanted truth exists.
Statement statement_of(const SceneSpec& scene, bool want_truth, std::uint64_t seed);

// Predicate evaluator. Each throws ParseError on text outside its grammar.
bool caption_holds(const SceneSpec& scene, std::string_view caption);
std::string answer_from_spec(const SceneSpec& scene, std::string_view question);
bool statement_holds(const SceneSpec& scene, std::string_view statement);

enum class AugmentPolicy { Identity, HFlip, Jitter };
// Throws UnknownPolicy.
AugmentPolicy parse_policy(std::string_view name);
std::string_view to_string(AugmentPolicy p);

// hflip mirrors pixels and columns; jitter adds uniform noise in +-10/255 per
// channel, clamped to [0,1], and leaves the spec alone.
std::pair<Image, SceneSpec> augment(const Image& image, const SceneSpec& scene,
                                    AugmentPolicy policy, std::uint64_t seed);

}  // namespace nv
