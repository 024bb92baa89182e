#pragma once

// HTTP/JSON facade over inference and the device simulator. route() is the
// whole API and is usable without a socket; run_server() binds it to HTTP.

#include <mutex>
#include <string>
#include <string_view>

#include "json.hpp"
#include "nv/checkpoint.hpp"
#include "nv/device.hpp"
#include "nv/image.hpp"

namespace nv {

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

// ApiImage {width, height, rgb:[0..255 ints]} <-> Image. Throws ParseError.
Image image_from_api(const nlohmann::json& j);
nlohmann::json image_to_api(const Image& image);

class Service {
 public:
  Service(Checkpoint checkpoint, GridWorld world);

  // Never throws; every failure becomes {"error": {"code", "message"}}.
  ApiResponse route(std::string_view method, std::string_view target, std::string_view body);

  DeviceState state() const;

 private:
  ApiResponse route_unlocked(std::string_view method, std::string_view path, std::string_view query,
                             std::string_view body);

  Checkpoint ckpt_;
  GridWorld world_;
  Image default_frame_;
  DeviceState state_;
  mutable std::mutex mu_;
};

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string static_dir;  // optional console build to serve at /
};

// Blocks until the process is stopped. Throws IOError when the port cannot be
// bound.
void run_server(Service& service, const ServeOptions& options);

}  // namespace nv
