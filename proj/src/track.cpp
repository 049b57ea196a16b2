#include "quadrace/track.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "quadrace/errors.hpp"

namespace quadrace {

Vec3 Gate::normal() const { return {std::cos(yaw), std::sin(yaw), 0.0}; }

Mat3 Gate::rotation() const {
  return Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
}

bool Bounds::contains(const Vec3& p) const {
  return std::abs(p.x()) < 0.5 * size.x() && std::abs(p.y()) < 0.5 * size.y() &&
         p.z() < 0.0 && p.z() > -size.z();
}

void Track::validate() const {
  if (gates.empty()) throw std::invalid_argument("track needs at least one gate");
  for (const Gate& g : gates) {
    if (!(g.half_size > 0.0)) throw std::invalid_argument("gate half_size must be positive");
    if (!bounds.contains(g.center)) {
      throw std::invalid_argument("gate center outside the track bounds");
    }
  }
}

CrossingEvent check_crossing(const Vec3& p_prev, const Vec3& p_curr, const Gate& gate) {
  const Vec3 n = gate.normal();
  const double d_prev = (p_prev - gate.center).dot(n);
  const double d_curr = (p_curr - gate.center).dot(n);
  const bool forward = d_prev < 0.0 && d_curr >= 0.0;
  const bool reverse = d_prev > 0.0 && d_curr <= 0.0;
  if (!forward && !reverse) return {};

  const double t = d_prev / (d_prev - d_curr);
  CrossingEvent ev;
  ev.crossing_point = p_prev + t * (p_curr - p_prev);
  const Vec3 offset = ev.crossing_point - gate.center;
  const Vec3 lateral(-std::sin(gate.yaw), std::cos(gate.yaw), 0.0);
  const bool inside = std::abs(offset.dot(lateral)) <= gate.half_size &&
                      std::abs(offset.z()) <= gate.half_size;
  ev.kind = (forward && inside) ? CrossingKind::Passed : CrossingKind::Missed;
  return ev;
}

bool out_of_bounds(const Vec3& p, const Track& track) { return !track.bounds.contains(p); }

Track default_figure8() {
  // Gates on the curve (3.5 cos t, 2.5 sin 2t) at t = pi/2 + k pi/4, skipping
  // the second pass through the crossing. Headings follow the curve tangent.
  Track track;
  const double z = -1.5;
  track.gates = {
      {{0.0, 0.0, z}, -2.1815},
      {{-2.475, -2.5, z}, -3.1416},
      {{-3.5, 0.0, z}, 1.5708},
      {{-2.475, 2.5, z}, 0.0},
      {{2.475, -2.5, z}, 0.0},
      {{3.5, 0.0, z}, 1.5708},
      {{2.475, 2.5, z}, 3.1416},
  };
  for (Gate& g : track.gates) g.yaw = wrap_angle(g.yaw);
  track.validate();
  return track;
}

nlohmann::json track_to_json(const Track& track) {
  nlohmann::json j;
  j["bounds"] = {track.bounds.size.x(), track.bounds.size.y(), track.bounds.size.z()};
  j["gates"] = nlohmann::json::array();
  for (const Gate& g : track.gates) {
    j["gates"].push_back({{"center", {g.center.x(), g.center.y(), g.center.z()}},
                          {"yaw", g.yaw},
                          {"half_size", g.half_size}});
  }
  return j;
}

Track track_from_json(const nlohmann::json& j) {
  Track track;
  try {
    if (j.contains("bounds")) {
      const auto b = j.at("bounds").get<std::vector<double>>();
      if (b.size() != 3) throw std::invalid_argument("bounds must have 3 entries");
      track.bounds.size = Vec3(b[0], b[1], b[2]);
    }
    for (const auto& jg : j.at("gates")) {
      const auto c = jg.at("center").get<std::vector<double>>();
      if (c.size() != 3) throw std::invalid_argument("gate center must have 3 entries");
      Gate g;
      g.center = Vec3(c[0], c[1], c[2]);
      g.yaw = wrap_angle(jg.at("yaw").get<double>());
      g.half_size = jg.value("half_size", 0.75);
      track.gates.push_back(g);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("malformed track: ") + e.what());
  }
  track.validate();
  return track;
}

Track load_track(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  return track_from_json(j);
}

void save_track(const Track& track, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << track_to_json(track).dump(2) << '\n';
}

}  // namespace quadrace
