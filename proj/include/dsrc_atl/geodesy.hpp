/*
 * Copyright (C) 2026 The DSRC-ATL Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy of
 * the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS, WITHOUT
 * WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied. See the
 * License for the specific language governing permissions and limitations under
 * the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsrc_atl/bsm.hpp"

namespace dsrc_atl
{

inline constexpr double kEarthRadiusM = 6'371'000.0;

struct GeoPoint
{
  double lat = 0.0;
  double lon = 0.0;

  friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

struct Approach
{
  int id = 0;
  double inbound_heading = 0.0;  // direction of travel toward the intersection
  GeoPoint stop_line;
  double approach_length_m = 300.0;
  int phase_id = 0;
};

struct IntersectionGeometry
{
  GeoPoint center;
  std::vector<Approach> approaches;
  double detection_radius_m = 50.0;
  double area_of_interest_radius_m = 100.0;

  const Approach& approach(int id) const
  {
    for (const auto& a : approaches) {
      if (a.id == id) return a;
    }
    throw std::out_of_range("unknown approach id " + std::to_string(id));
  }
};

/// A BSM attributed to an approach of the intersection.
struct Detection
{
  int approach_id = 0;
  double distance_to_stop_m = 0.0;
  double speed_ms = 0.0;
  std::uint32_t temp_id = 0;
  std::uint64_t time_ms = 0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

class GeometryError : public std::invalid_argument
{
public:
  using std::invalid_argument::invalid_argument;
};

namespace detail
{
inline double to_rad(double deg) { return deg * std::numbers::pi / 180.0; }
inline double to_deg(double rad) { return rad * 180.0 / std::numbers::pi; }
}  // namespace detail

/// Normalizes any angle to [0, 360).
inline double wrap_degrees(double deg)
{
  double w = std::fmod(deg, 360.0);
  if (w < 0) w += 360.0;
  if (w >= 360.0) w -= 360.0;
  return w;
}

/// Smallest absolute difference between two headings, in [0, 180].
inline double angular_difference(double a_deg, double b_deg)
{
  double d = std::fabs(wrap_degrees(a_deg) - wrap_degrees(b_deg));
  return d > 180.0 ? 360.0 - d : d;
}

/// Haversine distance on a sphere of radius kEarthRadiusM.
inline double great_circle_distance(const GeoPoint& a, const GeoPoint& b)
{
  using detail::to_rad;
  const double dlat = to_rad(b.lat - a.lat);
  const double dlon = to_rad(b.lon - a.lon);
  const double s1 = std::sin(dlat / 2);
  const double s2 = std::sin(dlon / 2);
  double h = s1 * s1 + std::cos(to_rad(a.lat)) * std::cos(to_rad(b.lat)) * s2 * s2;
  h = std::clamp(h, 0.0, 1.0);
  return 2.0 * kEarthRadiusM * std::asin(std::sqrt(h));
}

/// Initial great-circle bearing from `a` to `b`, clockwise from north.
inline double bearing(const GeoPoint& a, const GeoPoint& b)
{
  using detail::to_deg;
  using detail::to_rad;
  if (a == b) throw GeometryError("bearing of coincident points is undefined");
  const double phi1 = to_rad(a.lat);
  const double phi2 = to_rad(b.lat);
  const double dlon = to_rad(b.lon - a.lon);
  const double y = std::sin(dlon) * std::cos(phi2);
  const double x = std::cos(phi1) * std::sin(phi2) - std::sin(phi1) * std::cos(phi2) * std::cos(dlon);
  return wrap_degrees(to_deg(std::atan2(y, x)));
}

/// Point reached by travelling `distance_m` from `origin` along `bearing_deg`.
inline GeoPoint destination_point(const GeoPoint& origin, double bearing_deg, double distance_m)
{
  using detail::to_deg;
  using detail::to_rad;
  const double delta = distance_m / kEarthRadiusM;
  const double theta = to_rad(bearing_deg);
  const double phi1 = to_rad(origin.lat);
  const double lambda1 = to_rad(origin.lon);
  const double phi2 =
      std::asin(std::sin(phi1) * std::cos(delta) + std::cos(phi1) * std::sin(delta) * std::cos(theta));
  const double lambda2 =
      lambda1 + std::atan2(std::sin(theta) * std::sin(delta) * std::cos(phi1),
                           std::cos(delta) - std::sin(phi1) * std::sin(phi2));
  double lon = to_deg(lambda2);
  lon = std::fmod(lon + 540.0, 360.0) - 180.0;
  return {to_deg(phi2), lon};
}

/// Signed distance of `p` past the stop line of `a`, measured along the
/// inbound direction. Negative while the vehicle is still approaching.
inline double distance_past_stop_line(const GeoPoint& p, const Approach& a)
{
  const double d = great_circle_distance(a.stop_line, p);
  if (d == 0.0) return 0.0;
  const double rel = detail::to_rad(bearing(a.stop_line, p) - a.inbound_heading);
  return d * std::cos(rel);
}

/// Vehicles further than this past their stop line have left the approach.
inline constexpr double kDepartedToleranceM = 0.5;

/**
 * Attributes a BSM to the approach whose inbound heading best matches the
 * vehicle heading. Returns nothing when the sender is outside the area of
 * interest, no approach lies within the 45 degree heading cone, or the
 * sender is already past the matched approach's stop line.
 */
inline std::optional<Detection> classify_bsm(const BasicSafetyMessage& m,
                                             const IntersectionGeometry& g)
{
  constexpr double kHeadingConeDeg = 45.0;
  const GeoPoint pos{m.latitude_deg(), m.longitude_deg()};
  if (great_circle_distance(pos, g.center) > g.area_of_interest_radius_m) return std::nullopt;

  const double heading = m.heading_deg();
  const Approach* best = nullptr;
  double best_diff = 0.0;
  for (const auto& a : g.approaches) {
    const double diff = angular_difference(heading, a.inbound_heading);
    if (diff > kHeadingConeDeg) continue;
    if (best == nullptr || diff < best_diff || (diff == best_diff && a.id < best->id)) {
      best = &a;
      best_diff = diff;
    }
  }
  if (best == nullptr) return std::nullopt;
  if (distance_past_stop_line(pos, *best) > kDepartedToleranceM) return std::nullopt;

  Detection d;
  d.approach_id = best->id;
  d.distance_to_stop_m = great_circle_distance(pos, best->stop_line);
  d.speed_ms = m.speed_ms();
  d.temp_id = m.temp_id;
  d.time_ms = m.time_ms;
  return d;
}

/// Throws GeometryError describing the first violated invariant.
inline void validate(const IntersectionGeometry& g)
{
  if (std::abs(g.center.lat) > 90.0 || std::abs(g.center.lon) > 180.0) {
    throw GeometryError("center out of range");
  }
  if (g.approaches.size() < 2) throw GeometryError("geometry needs at least two approaches");
  if (!(g.detection_radius_m > 0.0)) throw GeometryError("detection_radius_m must be > 0");
  if (g.detection_radius_m > g.area_of_interest_radius_m) {
    throw GeometryError("detection_radius_m exceeds area_of_interest_radius_m");
  }
  std::set<int> ids;
  for (const auto& a : g.approaches) {
    if (!ids.insert(a.id).second) throw GeometryError("duplicate approach id " + std::to_string(a.id));
    if (!(a.inbound_heading >= 0.0 && a.inbound_heading < 360.0)) {
      throw GeometryError("approach " + std::to_string(a.id) + ": inbound_heading outside [0,360)");
    }
    if (!(a.approach_length_m > 0.0)) {
      throw GeometryError("approach " + std::to_string(a.id) + ": approach_length_m must be > 0");
    }
  }
}

/**
 * Two-avenue intersection used by the default experiments: approach 1 is the
 * northbound major avenue served by phase 1, approach 2 the eastbound minor
 * avenue served by phase 2. Stop lines sit 10 m upstream of the center.
 */
inline IntersectionGeometry default_geometry()
{
  IntersectionGeometry g;
  g.center = {40.452995, -79.937500};
  constexpr double kStopLineOffsetM = 10.0;
  Approach major{1, 0.0, destination_point(g.center, 180.0, kStopLineOffsetM), 300.0, 1};
  Approach minor{2, 90.0, destination_point(g.center, 270.0, kStopLineOffsetM), 300.0, 2};
  g.approaches = {major, minor};
  return g;
}

inline void to_json(nlohmann::json& j, const GeoPoint& p) { j = {{"lat", p.lat}, {"lon", p.lon}}; }

inline void from_json(const nlohmann::json& j, GeoPoint& p)
{
  j.at("lat").get_to(p.lat);
  j.at("lon").get_to(p.lon);
}

inline void to_json(nlohmann::json& j, const Approach& a)
{
  j = {{"id", a.id},
       {"inbound_heading", a.inbound_heading},
       {"stop_line", a.stop_line},
       {"approach_length_m", a.approach_length_m},
       {"phase_id", a.phase_id}};
}

inline void from_json(const nlohmann::json& j, Approach& a)
{
  j.at("id").get_to(a.id);
  j.at("inbound_heading").get_to(a.inbound_heading);
  j.at("stop_line").get_to(a.stop_line);
  j.at("approach_length_m").get_to(a.approach_length_m);
  j.at("phase_id").get_to(a.phase_id);
}

inline void to_json(nlohmann::json& j, const IntersectionGeometry& g)
{
  j = {{"center", g.center},
       {"detection_radius_m", g.detection_radius_m},
       {"area_of_interest_radius_m", g.area_of_interest_radius_m},
       {"approaches", g.approaches}};
}

inline void from_json(const nlohmann::json& j, IntersectionGeometry& g)
{
  j.at("center").get_to(g.center);
  g.detection_radius_m = j.value("detection_radius_m", 50.0);
  g.area_of_interest_radius_m = j.value("area_of_interest_radius_m", 100.0);
  j.at("approaches").get_to(g.approaches);
}

inline IntersectionGeometry load_geometry(const std::string& path)
{
  std::ifstream in(path);
  if (!in) throw GeometryError("cannot open geometry file: " + path);
  IntersectionGeometry g;
  try {
    g = nlohmann::json::parse(in).get<IntersectionGeometry>();
  } catch (const nlohmann::json::exception& e) {
    throw GeometryError("invalid geometry file " + path + ": " + e.what());
  }
  validate(g);
  return g;
}

}  // namespace dsrc_atl
