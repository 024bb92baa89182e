#include "nv/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "nv/error.hpp"

namespace nv {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using json = nlohmann::json;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

void put_floats(std::string& out, std::span<const float> data) {
  const auto at = out.size();
  out.resize(at + data.size() * sizeof(float));
  std::memcpy(out.data() + at, data.data(), data.size() * sizeof(float));
}

json config_json(const MEDConfig& c) {
  return {{"d_model", c.d_model},       {"n_heads", c.n_heads},
          {"n_layers", c.n_layers},     {"ffn_dim", c.ffn_dim},
          {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
          {"image_size", c.image_size}, {"image_channels", c.image_channels},
          {"patch_size", c.patch_size}, {"proj_dim", c.proj_dim},
          {"temperature_init", c.temperature_init}, {"seed", c.seed}};
}

MEDConfig config_from(const json& j) {
  MEDConfig c;
  c.d_model = j.at("d_model");
  c.n_heads = j.at("n_heads");
  c.n_layers = j.at("n_layers");
  c.ffn_dim = j.at("ffn_dim");
  c.vocab_size = j.at("vocab_size");
  c.max_len = j.at("max_len");
  c.image_size = j.at("image_size");
  c.image_channels = j.at("image_channels");
  c.patch_size = j.at("patch_size");
  c.proj_dim = j.at("proj_dim");
  c.temperature_init = j.at("temperature_init");
  c.seed = j.at("seed");
  return c;
}

}  // namespace

AdamState AdamState::zeros_like(const MEDParams& params) {
  AdamState s;
  for (const auto& t : params.tensors()) {
    s.m.emplace_back(t.size(), 0.0f);
    s.v.emplace_back(t.size(), 0.0f);
  }
  return s;
}

Checkpoint Checkpoint::fresh(const MEDConfig& config) {
  Checkpoint c;
  c.config = config;
  c.params = MEDParams::init(config);
  c.stage = "init";
  return c;
}

std::string encode_checkpoint(const Checkpoint& ck) {
  json header;
  header["config"] = config_json(ck.config);
  header["step"] = ck.step;
  header["stage"] = ck.stage;
  header["corpus_fingerprint"] = ck.corpus_fingerprint;
  header["heads"] = {{"statement", ck.statement_head_trained}};
  header["vocab"] = ck.vocab.tokens();
  json tensors = json::array();
  for (std::size_t i = 0; i < ck.params.count(); ++i)
    tensors.push_back({{"name", ck.params.names()[i]}, {"shape", ck.params.at(i).shape()}});
  header["tensors"] = std::move(tensors);
  header["optimizer"] = {{"moments", !ck.optimizer.empty()}, {"step", ck.optimizer.step}};

  const auto text = header.dump();
  std::string out = "MEDK";
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& t : ck.params.tensors()) put_floats(out, t.data());
  if (!ck.optimizer.empty()) {
    for (const auto& m : ck.optimizer.m) put_floats(out, m);
    for (const auto& v : ck.optimizer.v) put_floats(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "MEDK") != 0)
    throw Error(Errc::BadMagic, "not a checkpoint (expected MEDK magic)");
  if (bytes.size() < 12) throw Error(Errc::TruncatedFile, "checkpoint preamble cut short");
  const auto version = get_u32(bytes, 4);
  if (version != kCheckpointVersion)
    throw Error(Errc::UnsupportedVersion, "checkpoint version " + std::to_string(version));
  const std::size_t header_len = get_u32(bytes, 8);
  if (bytes.size() < 12 + header_len) throw Error(Errc::TruncatedFile, "checkpoint header cut short");

  Checkpoint ck;
  std::size_t cursor = 12 + header_len;
  auto take = [&](std::size_t n) {
    if (bytes.size() - cursor < n * sizeof(float))
      throw Error(Errc::TruncatedFile, "checkpoint tensor data cut short");
    std::vector<float> v(n);
    std::memcpy(v.data(), bytes.data() + cursor, n * sizeof(float));
    cursor += n * sizeof(float);
    return v;
  };
  try {
    const auto header = json::parse(bytes.substr(12, header_len));
    ck.config = config_from(header.at("config"));
    ck.step = header.at("step");
    ck.stage = header.value("stage", "");
    ck.corpus_fingerprint = header.at("corpus_fingerprint");
    ck.statement_head_trained = header.at("heads").at("statement");
    ck.vocab = Vocabulary(header.at("vocab").get<std::vector<std::string>>());
    for (const auto& t : header.at("tensors")) {
      Shape shape = t.at("shape").get<Shape>();
      auto data = take(numel(shape));
      ck.params.add(t.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
    }
    const auto& opt = header.at("optimizer");
    ck.optimizer.step = opt.at("step");
    if (opt.at("moments").get<bool>()) {
      for (const auto& t : ck.params.tensors()) ck.optimizer.m.push_back(take(t.size()));
      for (const auto& t : ck.params.tensors()) ck.optimizer.v.push_back(take(t.size()));
    }
  } catch (const json::exception& e) {
    throw Error(Errc::ParseError, std::string("bad checkpoint header: ") + e.what());
  }
  if (cursor != bytes.size()) throw Error(Errc::ParseError, "trailing bytes after checkpoint data");
  return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !out.write(bytes.data(), static_cast<std::streamsize>(bytes.size())))
    throw Error(Errc::IOError, "cannot write checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IOError, "cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace nv
