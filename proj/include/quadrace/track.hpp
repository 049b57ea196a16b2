#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "quadrace/dynamics.hpp"

namespace quadrace {

// Vertical square gate. The normal (cos yaw, sin yaw, 0) points in the
// direction of valid passage.
struct Gate {
  Vec3 center = Vec3::Zero();
  double yaw = 0.0;
  double half_size = 0.75;

  Vec3 normal() const;
  // Rotation from the gate frame to the world frame (yaw only).
  Mat3 rotation() const;
};

// Axis-aligned flight volume: x in [-sx/2, sx/2], y in [-sy/2, sy/2] and
// z in [-sz, 0) with z = 0 the ground plane (NED, z down).
struct Bounds {
  Vec3 size{10.0, 10.0, 7.0};

  bool contains(const Vec3& p) const;
};

struct Track {
  std::vector<Gate> gates;
  Bounds bounds;

  // Throws std::invalid_argument on an empty track or gates outside bounds.
  void validate() const;
  std::size_t next_index(std::size_t i) const { return (i + 1) % gates.size(); }
};

enum class CrossingKind { None, Passed, Missed };

struct CrossingEvent {
  CrossingKind kind = CrossingKind::None;
  Vec3 crossing_point = Vec3::Zero();
};

// Detects the segment p_prev -> p_curr crossing the (infinite) gate plane.
// Forward crossings inside the aperture are Passed; any other crossing,
// including a reverse one, is Missed.
CrossingEvent check_crossing(const Vec3& p_prev, const Vec3& p_curr, const Gate& gate);

// True when p has left the flight volume or touched the ground.
bool out_of_bounds(const Vec3& p, const Track& track);

// Seven-gate figure-eight layout shipped as data/track_figure8.json.
Track default_figure8();

Track load_track(const std::filesystem::path& path);
void save_track(const Track& track, const std::filesystem::path& path);
nlohmann::json track_to_json(const Track& track);
Track track_from_json(const nlohmann::json& j);

}  // namespace quadrace
