#include <deque>
#include <random>
#include <stdexcept>

#include "doctest.h"
#include "nv/device.hpp"
#include "nv/error.hpp"
#include "test_util.hpp"

using namespace nv;
using nv::testing::code_of;

namespace {

struct StubPerception : PerceptionBackend {
  bool broken = false;
  std::string describe_scene() override {
    if (broken) throw std::runtime_error("camera unplugged");
    return "a large red circle above a small blue square";
  }
  std::string identify_object() override {
    if (broken) throw std::runtime_error("camera unplugged");
    return "a large red circle";
  }
  PerceptionVerdict verify(const std::string& statement) override {
    if (broken) throw std::runtime_error("camera unplugged");
    return {statement == "the circle is red", 0.93};
  }
};

GridWorld open_world() {
  GridWorld w;
  w.agent = {8, 8};
  w.heading = Heading::N;
  w.waypoints = {{"the front door", {0, 8}}, {"safe place", {15, 0}}, {"kitchen", {8, 12}}};
  return w;
}

// Independent BFS distance oracle.
int bfs_distance(const GridWorld& w, Cell goal) {
  std::vector<int> dist(std::size_t(w.width * w.height), -1);
  auto at = [&](Cell c) -> int& { return dist[std::size_t(c.r * w.width + c.c)]; };
  std::deque<Cell> q{w.agent};
  at(w.agent) = 0;
  while (!q.empty()) {
    auto c = q.front();
    q.pop_front();
    for (auto [dr, dc] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
      Cell n{c.r + dr, c.c + dc};
      if (n.r < 0 || n.c < 0 || n.r >= w.height || n.c >= w.width || w.blocked(n) || at(n) >= 0) continue;
      at(n) = at(c) + 1;
      q.push_back(n);
    }
  }
  return at(goal);
}

int forward_total(const std::vector<std::string>& ins) {
  int total = 0;
  for (const auto& s : ins)
    if (s.rfind("forward ", 0) == 0) total += std::stoi(s.substr(8));
  return total;
}

}  // namespace

TEST_CASE("parse_command rule table") {
  CHECK(parse_command("What is that?").kind == IntentKind::IdentifyObject);
  const auto nav = parse_command("Navigate to the front door");
  CHECK(nav.kind == IntentKind::Navigate);
  CHECK(nav.destination == "the front door");
  CHECK(nav.raw == "Navigate to the front door");
  CHECK(parse_command("blorp").kind == IntentKind::Unknown);
  CHECK(parse_command("Describe the scene").kind == IntentKind::DescribeScene);
  CHECK(parse_command("how far is the wall").kind == IntentKind::RangeCheck);
  CHECK(parse_command("Is the circle red?").kind == IntentKind::VerifyStatement);
  CHECK(parse_command("help").kind == IntentKind::Help);
  CHECK(parse_command("").kind == IntentKind::Unknown);
  // Navigate never carries an empty destination.
  CHECK(parse_command("navigate to").kind == IntentKind::Unknown);
  CHECK(parse_command("navigate to   ").kind == IntentKind::Unknown);
  CHECK(parse_command("whatever is that").kind == IntentKind::Unknown);
}

TEST_CASE("question_to_statement") {
  CHECK(question_to_statement("Is the circle red?") == "the circle is red");
  CHECK(question_to_statement("is the square left of the triangle") == "the square is left of the triangle");
  CHECK(question_to_statement("Is there a blue square?") == "there is a blue square");
}

TEST_CASE("estimate_distance") {
  CHECK(estimate_distance(0) == 0.0);
  CHECK(std::abs(estimate_distance(5831) - 1.000) <= 1e-3);
  CHECK(std::abs(estimate_distance(58310) - 10.00) <= 1e-2);
  CHECK(code_of([] { estimate_distance(-1); }) == Errc::NegativeEcho);
  CHECK(code_of([] { estimate_distance(std::nan("")); }) == Errc::NegativeEcho);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double t = double(rng() % 1000000) + double(rng() >> 11) * 0x1.0p-53;
    CHECK(estimate_distance(2 * t) == 2 * estimate_distance(t));
  }
  CHECK(std::abs(estimate_distance(echo_time_for(2.5)) - 2.5) < 1e-12);
}

TEST_CASE("obstacle_alert") {
  CHECK(obstacle_alert(0.5).alert);
  CHECK_FALSE(obstacle_alert(1.0).alert);
  CHECK(obstacle_alert(1.5, 2.0).alert);
  CHECK(obstacle_alert(0.54).message.find("0.5 meters") != std::string::npos);
  CHECK(obstacle_alert(3.26).message.find("3.3 meters") != std::string::npos);
}

TEST_CASE("plan_route examples") {
  GridWorld w;
  w.agent = {5, 2};
  w.heading = Heading::E;
  w.waypoints = {{"here", {5, 2}}, {"end", {5, 5}}, {"box", {0, 0}}};
  // Corridor: walls on both sides of row 5 from column 2 to 5, closed behind.
  for (int c = 1; c <= 6; ++c) {
    w.walls.push_back({4, c});
    w.walls.push_back({6, c});
  }
  w.walls.push_back({5, 1});
  w.walls.push_back({5, 6});
  CHECK(plan_route(w, "here") == std::vector<std::string>{"you have arrived"});
  CHECK(plan_route(w, "end") == std::vector<std::string>{"forward 3 steps", "you have arrived"});
  CHECK(code_of([&] { plan_route(w, "box"); }) == Errc::NoPath);
  CHECK(code_of([&] { plan_route(w, "moon"); }) == Errc::UnknownWaypoint);

  w.heading = Heading::W;
  CHECK(plan_route(w, "end") == std::vector<std::string>{"turn around", "forward 3 steps", "you have arrived"});
  w.heading = Heading::N;
  CHECK(plan_route(w, "end") == std::vector<std::string>{"turn right", "forward 3 steps", "you have arrived"});
  w.heading = Heading::S;
  CHECK(plan_route(w, "end").front() == "turn left");
}

TEST_CASE("plan_route uses singular step and normalizes names") {
  auto w = open_world();
  w.waypoints["next door"] = {7, 8};
  CHECK(plan_route(w, "Next Door") == std::vector<std::string>{"forward 1 step", "you have arrived"});
}

TEST_CASE("plan_route matches BFS and replays to the destination on random grids") {
  std::mt19937_64 rng(17);
  int reachable = 0, unreachable = 0;
  for (int trial = 0; trial < 100; ++trial) {
    GridWorld w;
    std::vector<Cell> free;
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 16; ++c) {
        if (rng() % 100 < 28) w.walls.push_back({r, c});
        else free.push_back({r, c});
      }
    w.agent = free[rng() % free.size()];
    w.heading = static_cast<Heading>(rng() % 4);
    const Cell goal = free[rng() % free.size()];
    w.waypoints["goal"] = goal;
    w.validate();
    const int oracle = bfs_distance(w, goal);
    if (oracle < 0) {
      ++unreachable;
      CHECK(code_of([&] { plan_route(w, "goal"); }) == Errc::NoPath);
      CHECK_FALSE(path_length(w, goal).has_value());
      continue;
    }
    ++reachable;
    const auto ins = plan_route(w, "goal");
    CHECK(forward_total(ins) == oracle);
    CHECK(path_length(w, goal) == std::size_t(oracle));
    CHECK(ins.back() == "you have arrived");
    const auto pose = replay_instructions(w, ins);
    CHECK(pose.cell == goal);
  }
  CHECK(reachable > 50);
  CHECK(unreachable > 0);
}

TEST_CASE("replay rejects walking into walls") {
  GridWorld w;
  w.agent = {0, 0};
  w.heading = Heading::N;
  CHECK(code_of([&] { replay_instructions(w, {"forward 1 step"}); }) == Errc::InvalidArgument);
  CHECK(code_of([&] { replay_instructions(w, {"dance"}); }) == Errc::InvalidArgument);
}

TEST_CASE("nearest safe place") {
  GridWorld w;
  w.agent = {0, 0};
  w.waypoints = {{"safe place b", {0, 3}}, {"safe place a", {3, 0}}, {"safe place far", {9, 9}}};
  CHECK(nearest_safe_place(w) == "safe place a");
  w.waypoints.erase("safe place a");
  CHECK(nearest_safe_place(w) == "safe place b");
  w.waypoints = {{"door", {1, 1}}};
  CHECK(code_of([&] { nearest_safe_place(w); }) == Errc::UnknownWaypoint);
  w.waypoints = {{"safe place", {5, 5}}};
  w.walls = {{4, 5}, {6, 5}, {5, 4}, {5, 6}};
  CHECK(code_of([&] { nearest_safe_place(w); }) == Errc::NoPath);
}

TEST_CASE("distance_ahead") {
  GridWorld w;
  w.agent = {5, 5};
  w.heading = Heading::E;
  w.walls = {{5, 8}};
  CHECK(distance_ahead(w) == doctest::Approx(2.5 * kCellMeters));
  w.heading = Heading::N;
  CHECK(distance_ahead(w) == doctest::Approx(5.5 * kCellMeters));
}

TEST_CASE("GridWorld JSON") {
  const auto w = GridWorld::from_json(
      R"({"width":16,"height":16,"walls":[[1,1],[2,2]],"agent":{"r":0,"c":0,"heading":"E"},)"
      R"("waypoints":{"Front Door":[3,3],"safe place":[15,15]}})");
  CHECK(w.walls.size() == 2);
  CHECK(w.heading == Heading::E);
  CHECK(w.waypoints.at("front door") == Cell{3, 3});
  const auto back = GridWorld::from_json(w.to_json());
  CHECK(back.walls == w.walls);
  CHECK(back.agent == w.agent);
  CHECK(back.waypoints == w.waypoints);
  CHECK(code_of([] { GridWorld::from_json("{"); }) == Errc::ParseError);
  CHECK(code_of([] { GridWorld::from_json(R"({"width":16,"height":16,"agent":{"r":0,"c":0,"heading":"Q"}})"); }) ==
        Errc::ParseError);
  // Agent on a wall and waypoint off-grid violate the type invariants.
  CHECK(code_of([] {
          GridWorld::from_json(R"({"width":4,"height":4,"walls":[[0,0]],"agent":{"r":0,"c":0}})");
        }) == Errc::InvalidArgument);
  CHECK(code_of([] {
          GridWorld::from_json(R"({"width":4,"height":4,"agent":{"r":0,"c":0},"waypoints":{"x":[9,9]}})");
        }) == Errc::InvalidArgument);
}

TEST_CASE("mode table over all 8 health combinations") {
  for (int mask = 0; mask < 8; ++mask) {
    std::map<Module, Health> h;
    for (int i = 0; i < 3; ++i) h[kAllModules[i]] = (mask >> i) & 1 ? Health::Failed : Health::Healthy;
    const bool p = mask & 1, n = mask & 2, r = mask & 4;
    Mode expected = Mode::Degraded;
    if (!p && !n && !r) expected = Mode::Operational;
    if ((p && n && r) || (p && n)) expected = Mode::Failsafe;
    CHECK(mode_for(h) == expected);
  }
}

TEST_CASE("set_module_health transitions and events") {
  DeviceState s;
  s = set_module_health(s, Module::Ranging, Health::Failed);
  CHECK(s.mode == Mode::Degraded);
  s = set_module_health(s, Module::Perception, Health::Failed);
  s = set_module_health(s, Module::Navigation, Health::Failed);
  CHECK(s.mode == Mode::Failsafe);
  for (auto m : kAllModules) s = set_module_health(s, m, Health::Healthy);
  CHECK(s.mode == Mode::Operational);
  CHECK(s.events.size() == 6);
  CHECK(parse_module("navigation") == Module::Navigation);
  CHECK(code_of([] { parse_module("radar"); }) == Errc::UnknownModule);
}

TEST_CASE("dispatch examples") {
  StubPerception cam;
  const auto world = open_world();
  EchoSource echo = [] { return 5831.0; };
  DeviceState s;

  auto r = dispatch(parse_command("What is that?"), s, world, cam, echo);
  CHECK(r.response == "I see a large red circle");

  r = dispatch(parse_command("Navigate to the front door"), s, world, cam, echo);
  CHECK(r.response == "To reach the front door: forward 8 steps, you have arrived.");

  r = dispatch(parse_command("how far"), s, world, cam, [] { return 2915.5; });
  CHECK(r.response.find("Obstacle ahead at 0.5 meters") == 0);

  r = dispatch(parse_command("is the circle red"), s, world, cam, echo);
  CHECK(r.response.rfind("Yes", 0) == 0);
  CHECK(r.response.find("0.93") != std::string::npos);
  r = dispatch(parse_command("is the circle blue"), s, world, cam, echo);
  CHECK(r.response.rfind("No", 0) == 0);

  r = dispatch(parse_command("navigate to the moon"), s, world, cam, echo);
  CHECK(r.response.find("do not know") != std::string::npos);
  CHECK(r.state.mode == Mode::Operational);

  CHECK(dispatch(parse_command("blorp"), s, world, cam, echo).response.find("help") != std::string::npos);
  CHECK(dispatch(parse_command("help"), s, world, cam, echo).response.find("navigate") != std::string::npos);
}

TEST_CASE("perception failed still navigates") {
  StubPerception cam;
  auto s = set_module_health({}, Module::Perception, Health::Failed);
  auto r = dispatch(parse_command("Navigate to the front door"), s, open_world(), cam, [] { return 0.0; });
  CHECK(r.response.find("forward 8 steps") != std::string::npos);
  r = dispatch(parse_command("What is that?"), s, open_world(), cam, [] { return 0.0; });
  CHECK(r.response.find("scene perception") != std::string::npos);
}

TEST_CASE("failsafe answers every intent with a warning and the safe-place route") {
  StubPerception cam;
  DeviceState s;
  s = set_module_health(s, Module::Perception, Health::Failed);
  s = set_module_health(s, Module::Navigation, Health::Failed);
  const auto world = open_world();
  const auto route = plan_route(world, "safe place");
  for (const char* cmd : {"What is that?", "navigate to the kitchen", "how far", "is the circle red", "help", "blorp"}) {
    const auto r = dispatch(parse_command(cmd), s, world, cam, [] { return 1000.0; });
    CHECK(r.response.rfind("Warning", 0) == 0);
    for (const auto& step : route) CHECK(r.response.find(step) != std::string::npos);
  }
}

TEST_CASE("backend errors fail only the owning module") {
  const auto world = open_world();
  {
    StubPerception cam;
    cam.broken = true;
    auto r = dispatch(parse_command("describe the scene"), {}, world, cam, [] { return 0.0; });
    CHECK(r.response.find("scene perception") != std::string::npos);
    CHECK(r.state.health.at(Module::Perception) == Health::Failed);
    CHECK(r.state.health.at(Module::Navigation) == Health::Healthy);
    CHECK(r.state.health.at(Module::Ranging) == Health::Healthy);
    CHECK(r.state.mode == Mode::Degraded);
  }
  {
    StubPerception cam;
    auto r = dispatch(parse_command("how far"), {}, world, cam, []() -> double { throw std::runtime_error("no echo"); });
    CHECK(r.response.find("distance ranging") != std::string::npos);
    CHECK(r.state.health.at(Module::Ranging) == Health::Failed);
    CHECK(r.state.health.at(Module::Perception) == Health::Healthy);
    r = dispatch(parse_command("how far"), {}, world, cam, [] { return -5.0; });
    CHECK(r.state.health.at(Module::Ranging) == Health::Failed);
  }
}

TEST_CASE("failure isolation matrix") {
  const auto world = open_world();
  const std::map<Module, std::vector<std::string>> served = {
      {Module::Perception, {"What is that?", "describe the scene", "is the circle red"}},
      {Module::Navigation, {"navigate to the front door", "navigate to the kitchen", "navigate to nowhere"}},
      {Module::Ranging, {"how far"}},
  };
  EchoSource echo = [] { return 4000.0; };
  for (auto a : kAllModules) {
    const auto failed = set_module_health({}, a, Health::Failed);
    for (auto b : kAllModules) {
      for (const auto& cmd : served.at(b)) {
        StubPerception cam;
        const auto healthy = dispatch(parse_command(cmd), {}, world, cam, echo);
        const auto degraded = dispatch(parse_command(cmd), failed, world, cam, echo);
        CAPTURE(cmd);
        if (a == b) {
          CHECK(degraded.response.rfind("Sorry", 0) == 0);
        } else {
          CHECK(degraded.response == healthy.response);
          CHECK(degraded.state.health == failed.health);
        }
      }
    }
  }
}
