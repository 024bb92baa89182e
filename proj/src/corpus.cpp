#include "nv/corpus.hpp"

#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "nv/error.hpp"

namespace nv {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IOError, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !out.write(bytes.data(), static_cast<std::streamsize>(bytes.size())))
    throw Error(Errc::IOError, "cannot write " + path.string());
}

template <typename T, typename Parse>
T parse_enum(const ojson& j, Parse parse, const char* what) {
  const auto v = parse(j.get<std::string>());
  if (!v) throw Error(Errc::ParseError, std::string("bad ") + what + " " + j.dump());
  return *v;
}

void write_split(const fs::path& dir, const std::vector<SceneRecord>& records) {
  std::error_code ec;
  fs::create_directories(dir / "img", ec);
  if (ec) throw Error(Errc::IOError, "cannot create " + (dir / "img").string());
  std::string lines;
  for (const auto& r : records) {
    lines += encode_record(r) + "\n";
    write_ppm(dir / r.image, render_scene(r.spec));
  }
  write_file(dir / "scenes.jsonl", lines);
}

}  // namespace

bool has_holdout_combo(const SceneSpec& scene) {
  for (const auto& o : scene.objects)
    for (const auto& [s, c] : kHoldoutCombos)
      if (o.shape == s && o.color == c) return true;
  return false;
}

SceneRecord make_record(std::size_t id, const std::string& split, const SceneSpec& spec) {
  SceneRecord r;
  r.id = id;
  r.split = split;
  r.spec = spec;
  r.caption = caption_of(spec, spec.seed);
  r.qa = qa_pairs_of(spec);
  r.statements = {statement_of(spec, true, spec.seed), statement_of(spec, false, spec.seed)};
  r.image = "img/" + std::to_string(id) + ".ppm";
  return r;
}

std::string encode_record(const SceneRecord& r) {
  ojson j;
  j["id"] = r.id;
  j["split"] = r.split;
  j["seed"] = r.spec.seed;
  j["objects"] = ojson::array();
  for (const auto& o : r.spec.objects)
    j["objects"].push_back({{"shape", to_string(o.shape)},
                            {"color", to_string(o.color)},
                            {"row", o.row},
                            {"col", o.col},
                            {"size", to_string(o.size)}});
  j["caption"] = r.caption;
  j["qa"] = ojson::array();
  for (const auto& q : r.qa) j["qa"].push_back({{"q", q.question}, {"a", q.answer}, {"kind", to_string(q.kind)}});
  j["statements"] = ojson::array();
  for (const auto& s : r.statements) j["statements"].push_back({{"text", s.text}, {"truth", s.truth}});
  j["image"] = r.image;
  return j.dump();
}

SceneRecord decode_record(const std::string& line) {
  try {
    const auto j = ojson::parse(line);
    SceneRecord r;
    r.id = j.at("id").get<std::size_t>();
    r.split = j.at("split").get<std::string>();
    r.spec.seed = j.value("seed", std::uint64_t{0});
    for (const auto& o : j.at("objects")) {
      SceneObject obj;
      obj.shape = parse_enum<ShapeKind>(o.at("shape"), parse_shape, "shape");
      obj.color = parse_enum<ColorKind>(o.at("color"), parse_color, "color");
      obj.size = parse_enum<SizeKind>(o.at("size"), parse_size, "size");
      obj.row = o.at("row").get<int>();
      obj.col = o.at("col").get<int>();
      r.spec.objects.push_back(obj);
    }
    r.caption = j.at("caption").get<std::string>();
    for (const auto& q : j.at("qa"))
      r.qa.push_back({q.at("q").get<std::string>(), q.at("a").get<std::string>(),
                      parse_enum<QAKind>(q.at("kind"), parse_qa_kind, "kind")});
    for (const auto& s : j.at("statements"))
      r.statements.push_back({s.at("text").get<std::string>(), s.at("truth").get<bool>()});
    r.image = j.at("image").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, std::string("bad scene record: ") + e.what());
  }
}

void build_corpus(const fs::path& out, std::size_t n_train, std::size_t n_eval, std::uint64_t seed) {
  if (n_train == 0 || n_eval == 0) throw Error(Errc::InvalidArgument, "both splits need at least one scene");
  std::mt19937_64 train_seeds(seed);
  std::mt19937_64 eval_seeds(seed ^ 0xa0761d6478bd642full);

  std::vector<SceneRecord> train, eval;
  std::vector<SceneSpec> seen;
  auto duplicate = [&](const SceneSpec& s) {
    for (const auto& t : seen)
      if (t.objects == s.objects) return true;
    return false;
  };
  while (train.size() < n_train) {
    const auto spec = generate_scene(train_seeds());
    if (has_holdout_combo(spec) || duplicate(spec)) continue;
    seen.push_back(spec);
    train.push_back(make_record(train.size(), "train", spec));
  }
  while (eval.size() < n_eval) {
    const auto spec = generate_scene(eval_seeds());
    if (eval.size() % 2 == 0 && !has_holdout_combo(spec)) continue;
    if (duplicate(spec)) continue;
    seen.push_back(spec);
    eval.push_back(make_record(eval.size(), "eval", spec));
  }

  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Error(Errc::IOError, "cannot create " + out.string());
  Vocabulary::builtin().save(out / "vocab.txt");
  write_split(out / "train", train);
  write_split(out / "eval", eval);
}

CorpusSplit load_split(const fs::path& root, const std::string& split) {
  const auto dir = root / split;
  const auto file = dir / "scenes.jsonl";
  if (!fs::is_regular_file(file))
    throw Error(Errc::MissingCorpus, "no corpus split at " + dir.string());
  CorpusSplit out;
  out.name = split;
  std::istringstream in(read_file(file));
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    out.records.push_back(decode_record(line));
    out.images.push_back(read_ppm(dir / out.records.back().image));
  }
  return out;
}

Vocabulary load_corpus_vocab(const fs::path& root) {
  const auto file = root / "vocab.txt";
  if (!fs::is_regular_file(file)) throw Error(Errc::MissingCorpus, "no vocab.txt in " + root.string());
  return Vocabulary::load(file);
}

std::uint64_t corpus_fingerprint(const fs::path& root) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& rel : {fs::path("vocab.txt"), fs::path("train") / "scenes.jsonl",
                          fs::path("eval") / "scenes.jsonl"}) {
    if (!fs::is_regular_file(root / rel)) continue;
    for (unsigned char c : read_file(root / rel)) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

}  // namespace nv
