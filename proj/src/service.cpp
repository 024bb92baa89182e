#include "nv/service.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "httplib.h"
#include "nv/error.hpp"
#include "nv/inference.hpp"
#include "nv/scenegen.hpp"

namespace nv {

namespace {

using json = nlohmann::json;

constexpr std::size_t kMaxApiPixels = 1 << 20;

int status_for(Errc code) {
  switch (code) {
    case Errc::MissingHead: return 409;
    case Errc::UnknownModule: return 404;
    case Errc::ParseError:
    case Errc::InvalidArgument:
    case Errc::BadImageShape:
    case Errc::TooLong:
    case Errc::EmptyQuestion:
    case Errc::NegativeEcho:
    case Errc::MissingRoleToken:
    case Errc::OutOfRange:
      return 400;
    default: return 500;
  }
}

ApiResponse error_response(int status, std::string_view code, const std::string& message) {
  return {status, {{"error", {{"code", code}, {"message", message}}}}};
}

ApiResponse not_found(std::string_view method, std::string_view path) {
  return error_response(404, "NotFound", "no route for " + std::string(method) + " " + std::string(path));
}

[[noreturn]] void bad(const std::string& message) { throw Error(Errc::ParseError, message); }

json parse_object(std::string_view body) {
  auto j = json::parse(body.begin(), body.end(), nullptr, false);
  if (j.is_discarded()) bad("body is not valid JSON");
  if (!j.is_object()) bad("body must be a JSON object");
  return j;
}

const json& field(const json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end()) bad(std::string("missing field \"") + key + "\"");
  return *it;
}

std::string string_field(const json& j, const char* key) {
  const auto& v = field(j, key);
  if (!v.is_string()) bad(std::string("\"") + key + "\" must be a string");
  return v.get<std::string>();
}

double number_field(const json& j, const char* key) {
  const auto& v = field(j, key);
  if (!v.is_number()) bad(std::string("\"") + key + "\" must be a number");
  return v.get<double>();
}

bool bool_field(const json& j, const char* key) {
  const auto& v = field(j, key);
  if (!v.is_boolean()) bad(std::string("\"") + key + "\" must be a boolean");
  return v.get<bool>();
}

json scene_to_api(const SceneSpec& spec) {
  json objects = json::array();
  for (const auto& o : spec.objects)
    objects.push_back({{"shape", to_string(o.shape)},
                       {"color", to_string(o.color)},
                       {"size", to_string(o.size)},
                       {"row", o.row},
                       {"col", o.col}});
  return {{"seed", spec.seed}, {"objects", objects}};
}

json modules_json(const DeviceState& s) {
  json m = json::object();
  for (auto mod : kAllModules) m[std::string(to_string(mod))] = to_string(s.health.at(mod));
  return m;
}

// Inference over one camera frame.
class FramePerception : public PerceptionBackend {
 public:
  FramePerception(const Checkpoint& ckpt, const Image& frame) : ckpt_(ckpt), frame_(frame) {}

  std::string describe_scene() override { return caption_image(frame_, ckpt_); }

  // The first object phrase of the caption ("a large red circle").
  std::string identify_object() override {
    std::istringstream caption(caption_image(frame_, ckpt_));
    std::string word, out;
    for (int i = 0; i < 4 && caption >> word; ++i) out += (i ? " " : "") + word;
    return out;
  }

  PerceptionVerdict verify(const std::string& statement) override {
    const auto v = verify_statement(frame_, statement, ckpt_);
    return {v.truth, v.confidence};
  }

 private:
  const Checkpoint& ckpt_;
  const Image& frame_;
};

}  // namespace

Image image_from_api(const json& j) {
  if (!j.is_object()) bad("image must be an object");
  const auto& w = field(j, "width");
  const auto& h = field(j, "height");
  const auto& rgb = field(j, "rgb");
  if (!w.is_number_integer() || !h.is_number_integer()) bad("image width and height must be integers");
  const auto wi = w.get<std::int64_t>(), hi = h.get<std::int64_t>();
  if (wi <= 0 || hi <= 0 || wi * hi > std::int64_t(kMaxApiPixels)) bad("image size out of range");
  if (!rgb.is_array() || rgb.size() != std::size_t(wi * hi * 3)) bad("rgb length must be width * height * 3");
  Image img;
  img.height = std::size_t(hi);
  img.width = std::size_t(wi);
  img.pixels.reserve(rgb.size());
  for (const auto& v : rgb) {
    if (!v.is_number_integer()) bad("rgb values must be integers");
    const auto x = v.get<std::int64_t>();
    if (x < 0 || x > 255) bad("rgb values must be in 0..255");
    img.pixels.push_back(float(x) / 255.0f);
  }
  return img;
}

json image_to_api(const Image& image) {
  if (image.channels != 3) throw Error(Errc::BadImageShape, "ApiImage carries RGB only");
  std::vector<int> rgb;
  rgb.reserve(image.pixels.size());
  for (float v : image.pixels) rgb.push_back(int(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  return {{"width", image.width}, {"height", image.height}, {"rgb", rgb}};
}

Service::Service(Checkpoint checkpoint, GridWorld world)
    : ckpt_(std::move(checkpoint)),
      world_(std::move(world)),
      default_frame_(quantize8(render_scene(generate_scene(0)))) {
  world_.validate();
}

DeviceState Service::state() const {
  std::lock_guard lock(mu_);
  return state_;
}

ApiResponse Service::route(std::string_view method, std::string_view target, std::string_view body) {
  const auto q = target.find('?');
  const auto path = target.substr(0, q);
  const auto query = q == std::string_view::npos ? std::string_view{} : target.substr(q + 1);
  std::lock_guard lock(mu_);
  try {
    return route_unlocked(method, path, query, body);
  } catch (const Error& e) {
    return error_response(status_for(e.code()), to_string(e.code()), e.what());
  } catch (const std::exception& e) {
    return error_response(500, "Internal", e.what());
  }
}

ApiResponse Service::route_unlocked(std::string_view method, std::string_view path,
                                    std::string_view query, std::string_view body) {
  const bool get = method == "GET", post = method == "POST";
  auto perception_guard = [&]() -> std::optional<ApiResponse> {
    if (state_.mode == Mode::Failsafe)
      return error_response(503, "Failsafe", "device is in failsafe mode");
    if (state_.health.at(Module::Perception) == Health::Failed)
      return error_response(503, "ModuleFailed", "perception module is failed");
    return std::nullopt;
  };

  if (path == "/api/status") {
    if (!get) return not_found(method, path);
    return {200,
            {{"mode", to_string(state_.mode)},
             {"modules", modules_json(state_)},
             {"checkpoint_step", ckpt_.step},
             {"statement_head", ckpt_.statement_head_trained},
             {"events", state_.events}}};
  }

  if (path == "/api/scene/random") {
    if (!get) return not_found(method, path);
    std::uint64_t seed = 0;
    for (std::string_view rest = query; !rest.empty();) {
      const auto amp = rest.find('&');
      const auto kv = rest.substr(0, amp);
      rest = amp == std::string_view::npos ? std::string_view{} : rest.substr(amp + 1);
      if (kv.substr(0, 5) != "seed=") continue;
      const auto v = kv.substr(5);
      const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), seed);
      if (ec != std::errc{} || ptr != v.data() + v.size() || v.empty())
        bad("seed must be a non-negative integer");
    }
    const auto spec = generate_scene(seed);
    return {200,
            {{"scene_id", "scene-" + std::to_string(seed)},
             {"image", image_to_api(render_scene(spec))},
             {"spec", scene_to_api(spec)}}};
  }

  if (path == "/api/caption" || path == "/api/vqa" || path == "/api/reason") {
    if (!post) return not_found(method, path);
    const auto j = parse_object(body);
    const auto image = image_from_api(field(j, "image"));
    std::string text;
    if (path == "/api/vqa") text = string_field(j, "question");
    if (path == "/api/reason") text = string_field(j, "statement");
    if (auto blocked = perception_guard()) return *blocked;
    if (path == "/api/caption") return {200, {{"caption", caption_image(image, ckpt_)}}};
    if (path == "/api/vqa") return {200, {{"answer", answer_question(image, text, ckpt_)}}};
    const auto v = verify_statement(image, text, ckpt_);
    return {200, {{"truth", v.truth}, {"confidence", v.confidence}}};
  }

  if (path == "/api/command") {
    if (!post) return not_found(method, path);
    const auto j = parse_object(body);
    const auto text = string_field(j, "text");
    const auto frame = j.contains("image") ? image_from_api(j["image"]) : default_frame_;
    // A malformed frame is the caller's fault and must not fail the perception module.
    if (frame.height != ckpt_.config.image_size || frame.width != ckpt_.config.image_size)
      throw Error(Errc::BadImageShape, "frame must be " + std::to_string(ckpt_.config.image_size) +
                                           "x" + std::to_string(ckpt_.config.image_size));
    FramePerception perception(ckpt_, frame);
    const auto intent = parse_command(text);
    auto result = dispatch(intent, state_, world_, perception,
                           [this] { return echo_time_for(distance_ahead(world_)); });
    state_ = std::move(result.state);
    return {200,
            {{"intent", to_string(intent.kind)}, {"response", result.response}, {"mode", to_string(state_.mode)}}};
  }

  if (path == "/api/range") {
    if (!post) return not_found(method, path);
    const auto j = parse_object(body);
    const auto t = number_field(j, "echo_time_us");
    const double threshold = j.contains("threshold_m") ? number_field(j, "threshold_m") : kDefaultAlertThreshold;
    if (state_.health.at(Module::Ranging) == Health::Failed)
      return error_response(503, "ModuleFailed", "ranging module is failed");
    const auto d = estimate_distance(t);
    const auto a = obstacle_alert(d, threshold);
    return {200, {{"distance_m", d}, {"alert", a.alert}, {"message", a.message}}};
  }

  constexpr std::string_view kModulePrefix = "/api/module/", kHealthSuffix = "/health";
  if (path.size() > kModulePrefix.size() + kHealthSuffix.size() && path.starts_with(kModulePrefix) &&
      path.ends_with(kHealthSuffix)) {
    if (!post) return not_found(method, path);
    const auto name = path.substr(kModulePrefix.size(),
                                  path.size() - kModulePrefix.size() - kHealthSuffix.size());
    const auto module = parse_module(name);
    const auto j = parse_object(body);
    const bool healthy = bool_field(j, "healthy");
    state_ = set_module_health(std::move(state_), module, healthy ? Health::Healthy : Health::Failed);
    return {200, {{"mode", to_string(state_.mode)}, {"modules", modules_json(state_)}}};
  }

  return not_found(method, path);
}

void run_server(Service& service, const ServeOptions& options) {
  httplib::Server server;
  if (!options.static_dir.empty() && !server.set_mount_point("/", options.static_dir))
    throw Error(Errc::IOError, "static directory " + options.static_dir + " does not exist");
  auto handle = [&service](const httplib::Request& req, httplib::Response& res) {
    auto target = req.path;
    if (!req.params.empty()) {
      target += '?';
      bool first = true;
      for (const auto& [k, v] : req.params) {
        if (!first) target += '&';
        first = false;
        target += k + "=" + v;
      }
    }
    const auto r = service.route(req.method, target, req.body);
    res.status = r.status;
    res.set_content(r.body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace),
                    "application/json");
  };
  server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return;
    const auto r = not_found(req.method, req.path);
    res.set_content(r.body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace),
                    "application/json");
  });
  server.Get(R"(/api/.*)", handle);
  server.Post(R"(/api/.*)", handle);
  server.Put(R"(/api/.*)", handle);
  server.Delete(R"(/api/.*)", handle);
  if (!server.bind_to_port(options.host, options.port))
    throw Error(Errc::IOError, "cannot bind " + options.host + ":" + std::to_string(options.port));
  server.listen_after_bind();
}

}  // namespace nv
