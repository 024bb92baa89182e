#include "nv/scenegen.hpp"

#include <algorithm>
#include <random>
#include <sstream>

#include "nv/error.hpp"
#include "nv/vocab.hpp"

namespace nv {

namespace {

// Portable draws: mt19937_64 output is specified by the standard, the
// distribution classes are not.
std::size_t pick(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

double unit(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }

std::vector<std::string> words_of(std::string_view text) {
  std::istringstream in(normalize_text(text));
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(std::move(w));
  return out;
}

[[noreturn]] void parse_fail(std::string_view what, std::string_view text) {
  throw Error(Errc::ParseError, std::string(what) + ": \"" + std::string(text) + "\"");
}

std::string describe(const SceneObject& o) {
  return "a " + std::string(to_string(o.size)) + " " + std::string(to_string(o.color)) + " " +
         std::string(to_string(o.shape));
}

std::vector<SceneObject> by_shape(const SceneSpec& scene) {
  auto objs = scene.objects;
  std::stable_sort(objs.begin(), objs.end(),
                   [](const auto& a, const auto& b) { return a.shape < b.shape; });
  return objs;
}

bool relation_holds(const SceneObject& a, const SceneObject& b, std::string_view rel) {
  if (rel == "above") return a.row < b.row;
  if (rel == "below") return a.row > b.row;
  if (rel == "left of") return a.col < b.col;
  if (rel == "right of") return a.col > b.col;
  return false;
}

std::string_view opposite(std::string_view rel) {
  if (rel == "above") return "below";
  if (rel == "below") return "above";
  if (rel == "left of") return "right of";
  return "left of";
}

// Consumes a relation ("above", "below", "left of", "right of") at w[i].
std::optional<std::string> take_relation(const std::vector<std::string>& w, std::size_t& i) {
  if (i < w.size() && (w[i] == "above" || w[i] == "below")) return w[i++];
  if (i + 1 < w.size() && (w[i] == "left" || w[i] == "right") && w[i + 1] == "of") {
    i += 2;
    return w[i - 2] + " of";
  }
  return std::nullopt;
}

struct Described {
  SizeKind size;
  ColorKind color;
  ShapeKind shape;
};

// "a {size} {color} {shape}" at w[i].
std::optional<Described> take_described(const std::vector<std::string>& w, std::size_t& i) {
  if (i + 4 > w.size() || w[i] != "a") return std::nullopt;
  const auto size = parse_size(w[i + 1]);
  const auto color = parse_color(w[i + 2]);
  const auto shape = parse_shape(w[i + 3]);
  if (!size || !color || !shape) return std::nullopt;
  i += 4;
  return Described{*size, *color, *shape};
}

bool matches(const SceneObject* o, const Described& d) {
  return o && o->size == d.size && o->color == d.color && o->shape == d.shape;
}

const char* kCountWords[] = {"zero", "one", "two", "three"};

std::string quadrant(const SceneObject& o) {
  return std::string(o.row < kGridCells / 2 ? "top" : "bottom") + " " +
         (o.col < kGridCells / 2 ? "left" : "right");
}

}  // namespace

std::string_view to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Square: return "square";
    case ShapeKind::Triangle: return "triangle";
  }
  return "?";
}

std::string_view to_string(ColorKind c) {
  switch (c) {
    case ColorKind::Red: return "red";
    case ColorKind::Green: return "green";
    case ColorKind::Blue: return "blue";
    case ColorKind::Yellow: return "yellow";
  }
  return "?";
}

std::string_view to_string(SizeKind s) { return s == SizeKind::Small ? "small" : "large"; }

std::optional<ShapeKind> parse_shape(std::string_view w) {
  for (auto s : kAllShapes)
    if (to_string(s) == w) return s;
  return std::nullopt;
}

std::optional<ColorKind> parse_color(std::string_view w) {
  for (auto c : kAllColors)
    if (to_string(c) == w) return c;
  return std::nullopt;
}

std::optional<SizeKind> parse_size(std::string_view w) {
  if (w == "small") return SizeKind::Small;
  if (w == "large") return SizeKind::Large;
  return std::nullopt;
}

std::array<std::uint8_t, 3> color_rgb(ColorKind c) {
  switch (c) {
    case ColorKind::Red: return {230, 25, 25};
    case ColorKind::Green: return {25, 170, 50};
    case ColorKind::Blue: return {25, 60, 230};
    case ColorKind::Yellow: return {240, 210, 20};
  }
  return {0, 0, 0};
}

const SceneObject* SceneSpec::find(ShapeKind shape) const {
  for (const auto& o : objects)
    if (o.shape == shape) return &o;
  return nullptr;
}

void validate_scene(const SceneSpec& scene) {
  auto fail = [](const std::string& m) { throw Error(Errc::InvalidArgument, m); };
  if (scene.objects.empty() || scene.objects.size() > 3) fail("scenes hold 1-3 objects");
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& a = scene.objects[i];
    if (a.row < 0 || a.row >= kGridCells || a.col < 0 || a.col >= kGridCells)
      fail("object outside the grid");
    for (std::size_t j = i + 1; j < scene.objects.size(); ++j) {
      const auto& b = scene.objects[j];
      if (a.shape == b.shape) fail("two objects share a shape");
      if (a.row == b.row && a.col == b.col) fail("two objects share a cell");
      if (std::pair(a.row, a.col) > std::pair(b.row, b.col)) fail("objects not in (row, col) order");
    }
  }
}

SceneSpec generate_scene(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SceneSpec scene;
  scene.seed = seed;
  const std::size_t count = 1 + pick(rng, 3);
  std::vector<ShapeKind> shapes(kAllShapes.begin(), kAllShapes.end());
  std::vector<int> cells(kGridCells * kGridCells);
  for (int i = 0; i < kGridCells * kGridCells; ++i) cells[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(shapes[i], shapes[i + pick(rng, shapes.size() - i)]);
    std::swap(cells[i], cells[i + pick(rng, cells.size() - i)]);
    SceneObject o;
    o.shape = shapes[i];
    o.color = kAllColors[pick(rng, kAllColors.size())];
    o.row = cells[i] / kGridCells;
    o.col = cells[i] % kGridCells;
    o.size = pick(rng, 2) ? SizeKind::Large : SizeKind::Small;
    scene.objects.push_back(o);
  }
  std::sort(scene.objects.begin(), scene.objects.end(),
            [](const auto& a, const auto& b) { return std::pair(a.row, a.col) < std::pair(b.row, b.col); });
  return scene;
}

Image render_scene(const SceneSpec& scene) {
  Image img = Image::filled(kSceneImageSize, kSceneImageSize, 1.0f);
  for (const auto& o : scene.objects) {
    const int s = o.size == SizeKind::Large ? kCellPixels : kCellPixels / 2;
    const int top = o.row * kCellPixels + (kCellPixels - s) / 2;
    const int left = o.col * kCellPixels + (kCellPixels - s) / 2;
    const auto rgb = color_rgb(o.color);
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const double cy = y + 0.5, cx = x + 0.5, half = s / 2.0;
        bool inside = true;
        if (o.shape == ShapeKind::Circle)
          inside = (cy - half) * (cy - half) + (cx - half) * (cx - half) <= half * half;
        else if (o.shape == ShapeKind::Triangle)
          inside = std::abs(cx - half) <= cy / 2.0;
        if (!inside) continue;
        for (std::size_t k = 0; k < 3; ++k)
          img.at(top + y, left + x, k) = static_cast<float>(rgb[k] / 255.0);
      }
    }
  }
  return img;
}

std::string_view relation_between(const SceneObject& a, const SceneObject& b) {
  if (a.row != b.row) return a.row < b.row ? "above" : "below";
  return a.col < b.col ? "left of" : "right of";
}

std::string caption_of(const SceneSpec& scene, std::uint64_t /*seed*/) {
  const auto objs = by_shape(scene);
  if (objs.empty()) throw Error(Errc::InvalidArgument, "cannot caption an empty scene");
  auto text = describe(objs[0]);
  if (objs.size() > 1) text += " " + std::string(relation_between(objs[0], objs[1])) + " " + describe(objs[1]);
  return text;
}

std::string_view to_string(QAKind k) {
  switch (k) {
    case QAKind::Count: return "count";
    case QAKind::Color: return "color";
    case QAKind::Shape: return "shape";
    case QAKind::Position: return "position";
    case QAKind::Compare: return "compare";
  }
  return "?";
}

std::optional<QAKind> parse_qa_kind(std::string_view s) {
  for (auto k : {QAKind::Count, QAKind::Color, QAKind::Shape, QAKind::Position, QAKind::Compare})
    if (to_string(k) == s) return k;
  return std::nullopt;
}

std::vector<QAPair> qa_pairs_of(const SceneSpec& scene) {
  std::vector<QAPair> out;
  if (scene.objects.empty()) return out;
  const auto& first = scene.objects[0];
  const auto color_count = [&](ColorKind c) {
    return std::count_if(scene.objects.begin(), scene.objects.end(),
                         [&](const auto& o) { return o.color == c; });
  };
  const auto q_count = "how many " + std::string(to_string(first.color)) + " shapes";
  const auto q_color = "what color is the " + std::string(to_string(first.shape));
  out.push_back({q_count, answer_from_spec(scene, q_count), QAKind::Count});
  out.push_back({q_color, answer_from_spec(scene, q_color), QAKind::Color});
  for (const auto& o : scene.objects) {
    if (color_count(o.color) != 1) continue;
    const auto q = "what shape is the " + std::string(to_string(o.color)) + " object";
    out.push_back({q, answer_from_spec(scene, q), QAKind::Shape});
    break;
  }
  const auto q_where = "where is the " + std::string(to_string(first.shape));
  out.push_back({q_where, answer_from_spec(scene, q_where), QAKind::Position});
  if (scene.objects.size() > 1) {
    const auto q = "is the " + std::string(to_string(scene.objects[0].shape)) + " bigger than the " +
                   std::string(to_string(scene.objects[1].shape));
    out.push_back({q, answer_from_spec(scene, q), QAKind::Compare});
  }
  return out;
}

Statement statement_of(const SceneSpec& scene, bool want_truth, std::uint64_t seed) {
  // Candidate true statements, each with its single-edit falsification.
  struct Candidate {
    std::string truth;
    std::vector<std::string> falsified;
  };
  std::vector<Candidate> cands;
  auto recolor = [&](const std::string& prefix, ColorKind own, const std::string& suffix) {
    std::vector<std::string> out;
    for (auto c : kAllColors)
      if (c != own) out.push_back(prefix + std::string(to_string(c)) + suffix);
    return out;
  };
  for (const auto& o : scene.objects) {
    const std::string shape(to_string(o.shape));
    cands.push_back({"the " + shape + " is " + std::string(to_string(o.color)),
                     recolor("the " + shape + " is ", o.color, "")});
  }
  for (std::size_t i = 0; i < scene.objects.size(); ++i)
    for (std::size_t j = i + 1; j < scene.objects.size(); ++j) {
      const auto& a = scene.objects[i];
      const auto& b = scene.objects[j];
      const auto head = "the " + std::string(to_string(a.shape)) + " is ";
      const auto tail = " the " + std::string(to_string(b.shape));
      const auto rel = relation_between(a, b);
      cands.push_back({head + std::string(rel) + tail, {head + std::string(opposite(rel)) + tail}});
    }
  for (const auto& o : scene.objects)
    cands.push_back({"there is a " + std::string(to_string(o.color)) + " " + std::string(to_string(o.shape)),
                     recolor("there is a ", o.color, " " + std::string(to_string(o.shape)))});
  if (cands.empty())
    throw Error(Errc::CannotFalsify, "no statement can be formed about an empty scene");

  std::mt19937_64 rng(seed ^ (want_truth ? 0x9e3779b97f4a7c15ull : 0x5851f42d4c957f2dull));
  const std::size_t start = pick(rng, cands.size());
  for (std::size_t t = 0; t < cands.size(); ++t) {
    const auto& c = cands[(start + t) % cands.size()];
    if (want_truth) {
      if (statement_holds(scene, c.truth)) return {c.truth, true};
      continue;
    }
    const std::size_t off = pick(rng, c.falsified.size());
    for (std::size_t k = 0; k < c.falsified.size(); ++k) {
      const auto& text = c.falsified[(off + k) % c.falsified.size()];
      if (!statement_holds(scene, text)) return {text, false};
    }
  }
  throw Error(Errc::CannotFalsify, "no single edit makes a false statement about this scene");
}

bool caption_holds(const SceneSpec& scene, std::string_view caption) {
  const auto w = words_of(caption);
  std::size_t i = 0;
  const auto first = take_described(w, i);
  if (!first) parse_fail("not a caption", caption);
  const auto* a = scene.find(first->shape);
  if (i == w.size()) return matches(a, *first);
  const auto rel = take_relation(w, i);
  const auto second = rel ? take_described(w, i) : std::nullopt;
  if (!second || i != w.size()) parse_fail("not a caption", caption);
  const auto* b = scene.find(second->shape);
  return matches(a, *first) && matches(b, *second) && a != b && relation_holds(*a, *b, *rel);
}

std::string answer_from_spec(const SceneSpec& scene, std::string_view question) {
  const auto w = words_of(question);
  auto absent = [&] {
    throw Error(Errc::InvalidArgument, "question presupposes a missing object: \"" +
                                           std::string(question) + "\"");
  };
  if (w.size() == 4 && w[0] == "how" && w[1] == "many" && w[3] == "shapes") {
    const auto c = parse_color(w[2]);
    if (!c) parse_fail("unknown color", question);
    const auto n = std::count_if(scene.objects.begin(), scene.objects.end(),
                                 [&](const auto& o) { return o.color == *c; });
    return kCountWords[n];
  }
  if (w.size() == 5 && w[0] == "what" && w[1] == "color" && w[2] == "is" && w[3] == "the") {
    const auto s = parse_shape(w[4]);
    if (!s) parse_fail("unknown shape", question);
    const auto* o = scene.find(*s);
    if (!o) absent();
    return std::string(to_string(o->color));
  }
  if (w.size() == 6 && w[0] == "what" && w[1] == "shape" && w[2] == "is" && w[3] == "the" &&
      w[5] == "object") {
    const auto c = parse_color(w[4]);
    if (!c) parse_fail("unknown color", question);
    const SceneObject* found = nullptr;
    for (const auto& o : scene.objects) {
      if (o.color != *c) continue;
      if (found) throw Error(Errc::InvalidArgument, "more than one " + w[4] + " object");
      found = &o;
    }
    if (!found) absent();
    return std::string(to_string(found->shape));
  }
  if (w.size() == 4 && w[0] == "where" && w[1] == "is" && w[2] == "the") {
    const auto s = parse_shape(w[3]);
    if (!s) parse_fail("unknown shape", question);
    const auto* o = scene.find(*s);
    if (!o) absent();
    return quadrant(*o);
  }
  if (w.size() == 7 && w[0] == "is" && w[1] == "the" && w[3] == "bigger" && w[4] == "than" &&
      w[5] == "the") {
    const auto s1 = parse_shape(w[2]), s2 = parse_shape(w[6]);
    if (!s1 || !s2) parse_fail("unknown shape", question);
    const auto *a = scene.find(*s1), *b = scene.find(*s2);
    if (!a || !b) absent();
    return a->size == SizeKind::Large && b->size == SizeKind::Small ? "yes" : "no";
  }
  parse_fail("not a question", question);
}

bool statement_holds(const SceneSpec& scene, std::string_view statement) {
  const auto w = words_of(statement);
  if (w.size() == 4 && w[0] == "the" && w[2] == "is") {
    const auto s = parse_shape(w[1]);
    const auto c = parse_color(w[3]);
    if (!s || !c) parse_fail("not a statement", statement);
    const auto* o = scene.find(*s);
    return o && o->color == *c;
  }
  if (w.size() == 5 && w[0] == "there" && w[1] == "is" && w[2] == "a") {
    const auto c = parse_color(w[3]);
    const auto s = parse_shape(w[4]);
    if (!s || !c) parse_fail("not a statement", statement);
    const auto* o = scene.find(*s);
    return o && o->color == *c;
  }
  if (w.size() >= 6 && w[0] == "the" && w[2] == "is") {
    std::size_t i = 3;
    const auto rel = take_relation(w, i);
    const auto s1 = parse_shape(w[1]);
    if (!rel || !s1 || i + 2 != w.size() || w[i] != "the") parse_fail("not a statement", statement);
    const auto s2 = parse_shape(w[i + 1]);
    if (!s2) parse_fail("not a statement", statement);
    const auto *a = scene.find(*s1), *b = scene.find(*s2);
    return a && b && a != b && relation_holds(*a, *b, *rel);
  }
  parse_fail("not a statement", statement);
}

AugmentPolicy parse_policy(std::string_view name) {
  if (name == "identity") return AugmentPolicy::Identity;
  if (name == "hflip") return AugmentPolicy::HFlip;
  if (name == "jitter") return AugmentPolicy::Jitter;
  throw Error(Errc::UnknownPolicy, "unknown augmentation policy \"" + std::string(name) + "\"");
}

std::string_view to_string(AugmentPolicy p) {
  switch (p) {
    case AugmentPolicy::Identity: return "identity";
    case AugmentPolicy::HFlip: return "hflip";
    case AugmentPolicy::Jitter: return "jitter";
  }
  return "?";
}

std::pair<Image, SceneSpec> augment(const Image& image, const SceneSpec& scene,
                                    AugmentPolicy policy, std::uint64_t seed) {
  switch (policy) {
    case AugmentPolicy::Identity:
      return {image, scene};
    case AugmentPolicy::HFlip: {
      Image out = image;
      for (std::size_t r = 0; r < image.height; ++r)
        for (std::size_t c = 0; c < image.width; ++c)
          for (std::size_t k = 0; k < image.channels; ++k)
            out.at(r, c, k) = image.at(r, image.width - 1 - c, k);
      SceneSpec spec = scene;
      for (auto& o : spec.objects) o.col = kGridCells - 1 - o.col;
      std::sort(spec.objects.begin(), spec.objects.end(), [](const auto& a, const auto& b) {
        return std::pair(a.row, a.col) < std::pair(b.row, b.col);
      });
      return {out, spec};
    }
    case AugmentPolicy::Jitter: {
      std::mt19937_64 rng(seed);
      Image out = image;
      for (auto& v : out.pixels) {
        const double noise = (2.0 * unit(rng) - 1.0) * 10.0 / 255.0;
        v = static_cast<float>(std::clamp(v + noise, 0.0, 1.0));
      }
      return {out, scene};
    }
  }
  throw Error(Errc::UnknownPolicy, "unknown augmentation policy");
}

}  // namespace nv
