#include "nv/device.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "nv/error.hpp"
#include "nv/vocab.hpp"

namespace nv {

namespace {

using json = nlohmann::json;

bool starts_with(std::string_view s, std::string_view p) { return s.substr(0, p.size()) == p; }

std::vector<std::string> words_of(std::string_view text) {
  std::istringstream in(normalize_text(text));
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

constexpr std::array<Cell, 4> kSteps{{{-1, 0}, {0, 1}, {1, 0}, {0, -1}}};  // N E S W

Cell step(Cell c, Heading h) {
  const auto d = kSteps[static_cast<int>(h)];
  return {c.r + d.r, c.c + d.c};
}

// BFS parents from the agent; unreachable cells keep {-1,-1}.
std::vector<Cell> bfs(const GridWorld& w) {
  std::vector<Cell> parent(std::size_t(w.width * w.height), Cell{-1, -1});
  auto idx = [&](Cell c) { return std::size_t(c.r * w.width + c.c); };
  std::deque<Cell> queue{w.agent};
  parent[idx(w.agent)] = w.agent;
  while (!queue.empty()) {
    const auto cur = queue.front();
    queue.pop_front();
    for (int h = 0; h < 4; ++h) {
      const auto next = step(cur, static_cast<Heading>(h));
      if (!w.in_bounds(next) || w.blocked(next) || parent[idx(next)].r >= 0) continue;
      parent[idx(next)] = cur;
      queue.push_back(next);
    }
  }
  return parent;
}

std::optional<std::vector<Cell>> shortest_path(const GridWorld& w, Cell goal) {
  const auto parent = bfs(w);
  auto idx = [&](Cell c) { return std::size_t(c.r * w.width + c.c); };
  if (!w.in_bounds(goal) || parent[idx(goal)].r < 0) return std::nullopt;
  std::vector<Cell> path{goal};
  while (!(path.back() == w.agent)) path.push_back(parent[idx(path.back())]);
  std::reverse(path.begin(), path.end());
  return path;
}

Heading direction(Cell from, Cell to) {
  for (int h = 0; h < 4; ++h)
    if (step(from, static_cast<Heading>(h)) == to) return static_cast<Heading>(h);
  throw Error(Errc::InvalidArgument, "cells are not adjacent");
}

std::string turn_between(Heading from, Heading to) {
  switch ((static_cast<int>(to) - static_cast<int>(from) + 4) % 4) {
    case 1: return "turn right";
    case 2: return "turn around";
    case 3: return "turn left";
  }
  return "";
}

std::string forward(int n) { return "forward " + std::to_string(n) + (n == 1 ? " step" : " steps"); }

std::string meters(double d) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", d);
  return buf;
}

std::string capability(Module m) {
  switch (m) {
    case Module::Perception: return "scene perception";
    case Module::Navigation: return "navigation";
    case Module::Ranging: return "distance ranging";
  }
  return "";
}

std::string failsafe_response(const GridWorld& world) {
  std::string out = "Warning: the device is in failsafe mode. ";
  try {
    const auto name = nearest_safe_place(world);
    out += "Go to the " + name + ": " + join(plan_route(world, name), ", ") + ".";
  } catch (const Error&) {
    out += "No safe place is reachable; stay where you are and call for help.";
  }
  return out;
}

const char* kHelp =
    "You can say: what is that, describe the scene, navigate to a place, how far is it, "
    "or ask whether something is true, such as is the circle red.";

}  // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(IntentKind k) {
  switch (k) {
    case IntentKind::DescribeScene: return "DescribeScene";
    case IntentKind::IdentifyObject: return "IdentifyObject";
    case IntentKind::Navigate: return "Navigate";
    case IntentKind::RangeCheck: return "RangeCheck";
    case IntentKind::VerifyStatement: return "VerifyStatement";
    case IntentKind::Help: return "Help";
    case IntentKind::Unknown: return "Unknown";
  }
  return "Unknown";
}

Intent parse_command(std::string_view text) {
  Intent in;
  in.raw = std::string(text);
  const auto t = normalize_text(text);
  if (t == "what is that" || starts_with(t, "what is that ")) {
    in.kind = IntentKind::IdentifyObject;
  } else if (starts_with(t, "navigate to ") && t.size() > 12) {
    in.kind = IntentKind::Navigate;
    in.destination = t.substr(12);
  } else if (t == "describe" || starts_with(t, "describe ")) {
    in.kind = IntentKind::DescribeScene;
  } else if (t == "how far" || starts_with(t, "how far ")) {
    in.kind = IntentKind::RangeCheck;
  } else if (starts_with(t, "is ")) {
    in.kind = IntentKind::VerifyStatement;
  } else if (t == "help" || starts_with(t, "help ")) {
    in.kind = IntentKind::Help;
  }
  return in;
}

std::string question_to_statement(std::string_view text) {
  auto w = words_of(text);
  if (w.size() >= 3 && w[0] == "is") {
    if (w[1] == "there") return "there is " + join({w.begin() + 2, w.end()}, " ");
    if (w[1] == "the" && w.size() >= 4)
      return "the " + w[2] + " is " + join({w.begin() + 3, w.end()}, " ");
  }
  return join(w, " ");
}

double estimate_distance(double echo_time_us) {
  if (!(echo_time_us >= 0.0)) throw Error(Errc::NegativeEcho, "echo time must be >= 0 microseconds");
  return kSpeedOfSound * (echo_time_us * 1e-6) / 2.0;
}

double echo_time_for(double distance_m) { return 2.0 * distance_m / kSpeedOfSound * 1e6; }

ObstacleAlert obstacle_alert(double distance_m, double threshold_m) {
  if (distance_m < threshold_m) return {true, "Obstacle ahead at " + meters(distance_m) + " meters."};
  return {false, "The path ahead is clear for " + meters(distance_m) + " meters."};
}

std::string_view to_string(Heading h) {
  switch (h) {
    case Heading::N: return "N";
    case Heading::E: return "E";
    case Heading::S: return "S";
    case Heading::W: return "W";
  }
  return "N";
}

std::optional<Heading> parse_heading(std::string_view s) {
  for (auto h : {Heading::N, Heading::E, Heading::S, Heading::W})
    if (to_string(h) == s) return h;
  return std::nullopt;
}

bool GridWorld::blocked(Cell c) const { return std::find(walls.begin(), walls.end(), c) != walls.end(); }

void GridWorld::validate() const {
  auto fail = [](const std::string& m) { throw Error(Errc::InvalidArgument, m); };
  if (width <= 0 || height <= 0 || width > 1024 || height > 1024) fail("grid size out of range");
  for (const auto& w : walls)
    if (!in_bounds(w)) fail("wall outside the grid");
  if (!in_bounds(agent) || blocked(agent)) fail("agent must stand on a free cell");
  for (const auto& [name, cell] : waypoints) {
    if (name.empty()) fail("waypoint names must be non-empty");
    if (!in_bounds(cell) || blocked(cell)) fail("waypoint \"" + name + "\" must be a free cell");
  }
}

GridWorld GridWorld::from_json(const std::string& text) {
  GridWorld w;
  try {
    const auto j = json::parse(text);
    w.width = j.at("width");
    w.height = j.at("height");
    w.walls.clear();
    for (const auto& c : j.value("walls", json::array())) w.walls.push_back({c.at(0), c.at(1)});
    const auto& a = j.at("agent");
    w.agent = {a.at("r"), a.at("c")};
    const auto h = parse_heading(a.value("heading", "N"));
    if (!h) throw Error(Errc::ParseError, "heading must be one of N, E, S, W");
    w.heading = *h;
    const auto waypoints = j.value("waypoints", json::object());
    for (const auto& [name, c] : waypoints.items())
      w.waypoints[normalize_text(name)] = {c.at(0), c.at(1)};
  } catch (const json::exception& e) {
    throw Error(Errc::ParseError, std::string("bad world file: ") + e.what());
  }
  w.validate();
  return w;
}

GridWorld GridWorld::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IOError, "cannot read world " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::string GridWorld::to_json() const {
  json j;
  j["width"] = width;
  j["height"] = height;
  j["walls"] = json::array();
  for (const auto& c : walls) j["walls"].push_back({c.r, c.c});
  j["agent"] = {{"r", agent.r}, {"c", agent.c}, {"heading", to_string(heading)}};
  j["waypoints"] = json::object();
  for (const auto& [name, c] : waypoints) j["waypoints"][name] = {c.r, c.c};
  return j.dump();
}

std::optional<std::size_t> path_length(const GridWorld& world, Cell goal) {
  const auto p = shortest_path(world, goal);
  if (!p) return std::nullopt;
  return p->size() - 1;
}

std::vector<std::string> plan_route(const GridWorld& world, std::string_view dest) {
  const auto it = world.waypoints.find(normalize_text(dest));
  if (it == world.waypoints.end())
    throw Error(Errc::UnknownWaypoint, "no waypoint named \"" + std::string(dest) + "\"");
  const auto path = shortest_path(world, it->second);
  if (!path) throw Error(Errc::NoPath, "\"" + it->first + "\" cannot be reached");
  std::vector<std::string> out;
  auto heading = world.heading;
  for (std::size_t i = 1; i < path->size();) {
    const auto dir = direction((*path)[i - 1], (*path)[i]);
    if (dir != heading) out.push_back(turn_between(heading, dir));
    heading = dir;
    int run = 0;
    while (i < path->size() && direction((*path)[i - 1], (*path)[i]) == dir) {
      ++run;
      ++i;
    }
    out.push_back(forward(run));
  }
  out.push_back("you have arrived");
  return out;
}

Pose replay_instructions(const GridWorld& world, const std::vector<std::string>& instructions) {
  Pose pose{world.agent, world.heading};
  for (const auto& ins : instructions) {
    const auto w = words_of(ins);
    const int h = static_cast<int>(pose.heading);
    if (w.size() == 2 && w[0] == "turn" && w[1] == "right") pose.heading = static_cast<Heading>((h + 1) % 4);
    else if (w.size() == 2 && w[0] == "turn" && w[1] == "left") pose.heading = static_cast<Heading>((h + 3) % 4);
    else if (w.size() == 2 && w[0] == "turn" && w[1] == "around") pose.heading = static_cast<Heading>((h + 2) % 4);
    else if (w.size() == 3 && w[0] == "forward") {
      const int n = std::stoi(w[1]);
      for (int k = 0; k < n; ++k) {
        pose.cell = step(pose.cell, pose.heading);
        if (!world.in_bounds(pose.cell) || world.blocked(pose.cell))
          throw Error(Errc::InvalidArgument, "instruction walks into an obstacle");
      }
    } else if (ins != "you have arrived") {
      throw Error(Errc::InvalidArgument, "unknown instruction \"" + ins + "\"");
    }
  }
  return pose;
}

std::string nearest_safe_place(const GridWorld& world) {
  std::optional<std::pair<std::size_t, std::string>> best;
  bool any = false;
  for (const auto& [name, cell] : world.waypoints) {
    if (!starts_with(name, "safe place")) continue;
    any = true;
    const auto len = path_length(world, cell);
    if (len && (!best || std::pair(*len, name) < *best)) best = std::pair(*len, name);
  }
  if (!any) throw Error(Errc::UnknownWaypoint, "no safe place is defined");
  if (!best) throw Error(Errc::NoPath, "no safe place is reachable");
  return best->second;
}

double distance_ahead(const GridWorld& world) {
  int cells = 0;
  for (auto c = step(world.agent, world.heading); world.in_bounds(c) && !world.blocked(c);
       c = step(c, world.heading))
    ++cells;
  // Distance to the obstacle face: the free cells plus half of the agent's own.
  return (cells + 0.5) * kCellMeters;
}

std::string_view to_string(Module m) {
  switch (m) {
    case Module::Perception: return "perception";
    case Module::Navigation: return "navigation";
    case Module::Ranging: return "ranging";
  }
  return "?";
}

std::string_view to_string(Health h) { return h == Health::Healthy ? "healthy" : "failed"; }

std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::Operational: return "Operational";
    case Mode::Degraded: return "Degraded";
    case Mode::Failsafe: return "Failsafe";
  }
  return "?";
}

Module parse_module(std::string_view name) {
  for (auto m : kAllModules)
    if (to_string(m) == name) return m;
  throw Error(Errc::UnknownModule, "unknown module \"" + std::string(name) + "\"");
}

Mode mode_for(const std::map<Module, Health>& health) {
  auto failed = [&](Module m) {
    const auto it = health.find(m);
    return it != health.end() && it->second == Health::Failed;
  };
  const bool p = failed(Module::Perception), n = failed(Module::Navigation), r = failed(Module::Ranging);
  if (!p && !n && !r) return Mode::Operational;
  if (p && n) return Mode::Failsafe;
  return Mode::Degraded;
}

DeviceState set_module_health(DeviceState state, Module module, Health health) {
  state.health[module] = health;
  const auto before = state.mode;
  state.mode = mode_for(state.health);
  state.events.push_back(std::string(to_string(module)) + " " + std::string(to_string(health)) +
                         "; mode " + std::string(to_string(before)) + " -> " +
                         std::string(to_string(state.mode)));
  return state;
}

std::optional<Module> module_for(IntentKind kind) {
  switch (kind) {
    case IntentKind::DescribeScene:
    case IntentKind::IdentifyObject:
    case IntentKind::VerifyStatement: return Module::Perception;
    case IntentKind::Navigate: return Module::Navigation;
    case IntentKind::RangeCheck: return Module::Ranging;
    default: return std::nullopt;
  }
}

namespace {

DispatchResult fail_module(DeviceState state, std::optional<Module> module, const std::exception& e) {
  if (!module) return {std::string("Sorry, something went wrong: ") + e.what(), std::move(state)};
  auto next = set_module_health(std::move(state), *module, Health::Failed);
  next.events.push_back(std::string(to_string(*module)) + " error: " + e.what());
  return {"Sorry, " + capability(*module) + " failed and has been switched off.", std::move(next)};
}

}  // namespace

DispatchResult dispatch(const Intent& intent, DeviceState state, const GridWorld& world,
                        PerceptionBackend& perception, const EchoSource& echo) {
  if (state.mode == Mode::Failsafe) return {failsafe_response(world), std::move(state)};
  const auto module = module_for(intent.kind);
  if (module && state.health.at(*module) == Health::Failed)
    return {"Sorry, " + capability(*module) + " is unavailable right now.", std::move(state)};

  try {
    switch (intent.kind) {
      case IntentKind::DescribeScene:
        return {"The scene shows " + perception.describe_scene() + ".", std::move(state)};
      case IntentKind::IdentifyObject:
        return {"I see " + perception.identify_object(), std::move(state)};
      case IntentKind::VerifyStatement: {
        const auto statement = question_to_statement(intent.raw);
        const auto v = perception.verify(statement);
        char conf[32];
        std::snprintf(conf, sizeof conf, "%.2f", v.confidence);
        return {std::string(v.truth ? "Yes, " : "No, it is not true that ") + statement +
                    " (confidence " + conf + ").",
                std::move(state)};
      }
      case IntentKind::Navigate:
        try {
          return {"To reach " + intent.destination + ": " + join(plan_route(world, intent.destination), ", ") + ".",
                  std::move(state)};
        } catch (const Error& e) {
          if (e.code() == Errc::UnknownWaypoint)
            return {"I do not know where " + intent.destination + " is.", std::move(state)};
          if (e.code() == Errc::NoPath)
            return {"I cannot find a path to " + intent.destination + ".", std::move(state)};
          throw;
        }
      case IntentKind::RangeCheck: {
        const auto d = estimate_distance(echo());
        return {obstacle_alert(d).message, std::move(state)};
      }
      case IntentKind::Help:
        return {kHelp, std::move(state)};
      case IntentKind::Unknown:
        return {"Sorry, I did not understand that. Say help for a list of commands.", std::move(state)};
    }
  } catch (const Error& e) {
    if (e.code() != Errc::MissingHead) return fail_module(std::move(state), module, e);
    return {"Sorry, this model cannot check statements yet.", std::move(state)};
  } catch (const std::exception& e) {
    return fail_module(std::move(state), module, e);
  }
  return {"", std::move(state)};
}

}  // namespace nv
