#pragma once

// Headgear control layer: command intents, ultrasonic ranging, grid
// navigation, module health with failsafe, and the dispatcher tying them to a
// perception backend.

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace nv {

// ---------------------------------------------------------------------------
// Commands

enum class IntentKind { DescribeScene, IdentifyObject, Navigate, RangeCheck, VerifyStatement, Help, Unknown };
std::string_view to_string(IntentKind k);

struct Intent {
  IntentKind kind = IntentKind::Unknown;
  std::string destination;  // Navigate only, never empty there
  std::string raw;
};

Intent parse_command(std::string_view text);

// "is the circle red" -> "the circle is red"; other text is normalized and
// returned as is.
std::string question_to_statement(std::string_view text);

// ---------------------------------------------------------------------------
// Ranging

inline constexpr double kSpeedOfSound = 343.0;  // m/s
inline constexpr double kDefaultAlertThreshold = 1.0;

// Round trip: 343 m/s * t / 2. Throws NegativeEcho.
double estimate_distance(double echo_time_us);
double echo_time_for(double distance_m);

struct ObstacleAlert {
  bool alert = false;
  std::string message;
};
// alert iff distance < threshold.
ObstacleAlert obstacle_alert(double distance_m, double threshold_m = kDefaultAlertThreshold);

// ---------------------------------------------------------------------------
// Navigation

enum class Heading { N, E, S, W };
std::string_view to_string(Heading h);
std::optional<Heading> parse_heading(std::string_view s);

struct Cell {
  int r = 0;
  int c = 0;
  bool operator==(const Cell&) const = default;
  auto operator<=>(const Cell&) const = default;
};

inline constexpr double kCellMeters = 0.5;

struct GridWorld {
  int width = 16;
  int height = 16;
  std::vector<Cell> walls;
  Cell agent;
  Heading heading = Heading::N;
  std::map<std::string, Cell> waypoints;

  bool in_bounds(Cell c) const { return c.r >= 0 && c.r < height && c.c >= 0 && c.c < width; }
  bool blocked(Cell c) const;
  // Throws InvalidArgument.
  void validate() const;

  static GridWorld from_json(const std::string& text);  // ParseError / InvalidArgument
  static GridWorld load(const std::string& path);
  std::string to_json() const;
};

// Spoken-style instructions along a BFS shortest path (neighbor order N, E,
// S, W). Throws UnknownWaypoint and NoPath.
std::vector<std::string> plan_route(const GridWorld& world, std::string_view dest);
// Length of the BFS shortest path, or nullopt when unreachable.
std::optional<std::size_t> path_length(const GridWorld& world, Cell goal);

struct Pose {
  Cell cell;
  Heading heading = Heading::N;
};
// Executes instructions from the agent's pose; throws InvalidArgument when one
// walks into a wall or off the grid.
Pose replay_instructions(const GridWorld& world, const std::vector<std::string>& instructions);

// Nearest waypoint named "safe place..." by path length, ties by name.
// Throws UnknownWaypoint (none defined) and NoPath (none reachable).
std::string nearest_safe_place(const GridWorld& world);

// Meters to the first wall or grid edge straight ahead of the agent.
double distance_ahead(const GridWorld& world);

// ---------------------------------------------------------------------------
// Device state

enum class Module { Perception, Navigation, Ranging };
inline constexpr std::array kAllModules{Module::Perception, Module::Navigation, Module::Ranging};
enum class Health { Healthy, Failed };
enum class Mode { Operational, Degraded, Failsafe };

std::string_view to_string(Module m);
std::string_view to_string(Health h);
std::string_view to_string(Mode m);
// Throws UnknownModule.
Module parse_module(std::string_view name);

struct DeviceState {
  std::map<Module, Health> health{{Module::Perception, Health::Healthy},
                                  {Module::Navigation, Health::Healthy},
                                  {Module::Ranging, Health::Healthy}};
  Mode mode = Mode::Operational;
  std::vector<std::string> events;
};

// Operational iff all healthy; Failsafe iff all failed or perception and
// navigation both failed; Degraded otherwise.
Mode mode_for(const std::map<Module, Health>& health);

DeviceState set_module_health(DeviceState state, Module module, Health health);

// ---------------------------------------------------------------------------
// Dispatch

struct PerceptionVerdict {
  bool truth = false;
  double confidence = 0.0;
};

// Perception over the current camera frame. Any exception marks the
// perception module failed.
class PerceptionBackend {
 public:
  virtual ~PerceptionBackend() = default;
  virtual std::string describe_scene() = 0;
  virtual std::string identify_object() = 0;
  virtual PerceptionVerdict verify(const std::string& statement) = 0;
};

// Echo time source for RangeCheck; exceptions mark ranging failed.
using EchoSource = std::function<double()>;

struct DispatchResult {
  std::string response;
  DeviceState state;
};

// Module serving an intent, if any.
std::optional<Module> module_for(IntentKind kind);

DispatchResult dispatch(const Intent& intent, DeviceState state, const GridWorld& world,
                        PerceptionBackend& perception, const EchoSource& echo);

}  // namespace nv
