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
#include <cstdio>
#include <deque>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "dsrc_atl/bsm.hpp"
#include "dsrc_atl/channel.hpp"
#include "dsrc_atl/geodesy.hpp"
#include "dsrc_atl/rsu_engine.hpp"
#include "dsrc_atl/signal_control.hpp"

namespace dsrc_atl
{

class ConfigError : public std::invalid_argument
{
public:
  ConfigError(const std::string& field, const std::string& what)
      : std::invalid_argument(field + ": " + what), field_(field)
  {
  }

  const std::string& field() const { return field_; }

private:
  std::string field_;
};

/// Relative demand of each approach, in geometry order ("4:1").
struct SplitRatio
{
  std::vector<double> shares = {4.0, 1.0};

  friend bool operator==(const SplitRatio&, const SplitRatio&) = default;
};

inline SplitRatio parse_split_ratio(const std::string& text)
{
  SplitRatio r;
  r.shares.clear();
  std::size_t start = 0;
  while (true) {
    const auto colon = text.find(':', start);
    const std::string part = text.substr(start, colon == std::string::npos ? std::string::npos : colon - start);
    std::size_t used = 0;
    double value = 0.0;
    try {
      value = std::stod(part, &used);
    } catch (const std::exception&) {
      throw ConfigError("split_ratio", "cannot parse '" + text + "'");
    }
    if (used != part.size()) throw ConfigError("split_ratio", "cannot parse '" + text + "'");
    if (!(value > 0.0) || !std::isfinite(value)) {
      throw ConfigError("split_ratio", "every share must be > 0 in '" + text + "'");
    }
    r.shares.push_back(value);
    if (colon == std::string::npos) break;
    start = colon + 1;
  }
  if (r.shares.size() < 2) throw ConfigError("split_ratio", "need at least two shares in '" + text + "'");
  return r;
}

inline std::string format_split_ratio(const SplitRatio& r)
{
  std::string s;
  for (std::size_t i = 0; i < r.shares.size(); ++i) {
    if (i) s += ':';
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", r.shares[i]);
    s += buf;
  }
  return s;
}

struct DemandConfig
{
  double total_flow_vph = 1500.0;
  SplitRatio split_ratio;
  double penetration = 0.0;
  std::uint64_t seed = 1;
  double duration_s = 3600.0;
  double warmup_s = 300.0;
};

struct DynamicsConfig
{
  double v_free_ms = 13.9;
  double accel_ms2 = 2.0;
  double decel_ms2 = 4.5;
  double headway_spacing_m = 7.5;
  double dt_s = 0.1;
  double stop_speed_threshold_ms = 0.1;
};

inline void validate(const DemandConfig& d)
{
  if (!(d.total_flow_vph >= 0.0)) throw ConfigError("total_flow_vph", "must be >= 0");
  if (d.split_ratio.shares.size() < 2) throw ConfigError("split_ratio", "need at least two shares");
  for (double s : d.split_ratio.shares) {
    if (!(s > 0.0)) throw ConfigError("split_ratio", "every share must be > 0");
  }
  if (!(d.penetration >= 0.0 && d.penetration <= 1.0)) throw ConfigError("penetration", "must be in [0, 1]");
  if (!(d.duration_s > 0.0)) throw ConfigError("duration_s", "must be > 0");
  if (!(d.warmup_s >= 0.0 && d.warmup_s < d.duration_s)) {
    throw ConfigError("warmup_s", "must be in [0, duration_s)");
  }
}

inline void validate(const DynamicsConfig& d)
{
  if (!(d.v_free_ms > 0)) throw ConfigError("v_free_ms", "must be > 0");
  if (!(d.accel_ms2 > 0)) throw ConfigError("accel_ms2", "must be > 0");
  if (!(d.decel_ms2 > 0)) throw ConfigError("decel_ms2", "must be > 0");
  if (!(d.headway_spacing_m > 0)) throw ConfigError("headway_spacing_m", "must be > 0");
  if (!(d.dt_s > 0 && d.dt_s <= 0.5)) throw ConfigError("dt_s", "must be in (0, 0.5]");
  if (!(d.stop_speed_threshold_ms > 0)) throw ConfigError("stop_speed_threshold_ms", "must be > 0");
}

struct Arrival
{
  double time_s = 0.0;
  bool equipped = false;

  friend bool operator==(const Arrival&, const Arrival&) = default;
};

/**
 * Poisson arrivals per approach. Approach i receives
 * total_flow * share_i / sum(shares) vehicles per hour. Arrival times and
 * equipment draws come from separate streams, so changing the penetration
 * never moves an arrival and equipment is monotone in penetration.
 */
inline std::vector<std::vector<Arrival>> generate_arrivals(const DemandConfig& d)
{
  validate(d);
  double share_sum = 0.0;
  for (double s : d.split_ratio.shares) share_sum += s;

  std::vector<std::vector<Arrival>> out(d.split_ratio.shares.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double rate_per_s = d.total_flow_vph * d.split_ratio.shares[i] / share_sum / 3600.0;
    if (!(rate_per_s > 0.0)) continue;
    std::seed_seq time_seq{static_cast<std::uint64_t>(d.seed), static_cast<std::uint64_t>(i), std::uint64_t{0}};
    std::seed_seq equip_seq{static_cast<std::uint64_t>(d.seed), static_cast<std::uint64_t>(i), std::uint64_t{1}};
    Rng time_rng(time_seq);
    Rng equip_rng(equip_seq);
    double t = 0.0;
    while (true) {
      t += -std::log1p(-uniform01(time_rng)) / rate_per_s;
      if (t >= d.duration_s) break;
      out[i].push_back({t, uniform01(equip_rng) < d.penetration});
    }
  }
  return out;
}

struct SimVehicle
{
  std::uint32_t id = 0;
  int approach_id = 0;
  double position_m = 0.0;  // upstream of the stop line
  double speed_ms = 0.0;
  bool equipped = false;
  double arrival_time_s = 0.0;
  std::optional<double> crossed_time_s;
  double accumulated_wait_s = 0.0;
};

namespace detail
{

// Highest speed from which the vehicle can still stop within `gap_m`,
// counting this step's travel and braking at `decel` afterwards.
inline double safe_speed(double gap_m, double decel, double dt)
{
  if (gap_m <= 0.0) return 0.0;
  return decel * (-dt / 2.0 + std::sqrt(dt * dt / 4.0 + 2.0 * gap_m / decel));
}

}  // namespace detail

/**
 * Bounded-acceleration car following. The vehicle keeps to the larger of
 * (a) its leader's position plus the spacing and (b) the stop line, unless
 * the signal is green or the vehicle can no longer stop for the line. A
 * position below zero means the stop line was crossed.
 */
inline SimVehicle vehicle_step(SimVehicle v, const SimVehicle* leader, bool signal_is_green,
                               const DynamicsConfig& dyn)
{
  const double dt = dyn.dt_s;
  double speed = std::min(v.speed_ms + dyn.accel_ms2 * dt, dyn.v_free_ms);
  double floor_m = -std::numeric_limits<double>::infinity();

  auto keep_behind = [&](double obstacle_m, double braking_credit_m) {
    const double gap = v.position_m - obstacle_m;
    speed = std::min({speed, detail::safe_speed(gap + braking_credit_m, dyn.decel_ms2, dt), std::max(gap, 0.0) / dt});
    floor_m = std::max(floor_m, obstacle_m);
  };

  if (leader != nullptr) {
    // the leader needs this much road to stop, so the follower may use it too
    const double leader_stop_m = leader->speed_ms * leader->speed_ms / (2.0 * dyn.decel_ms2);
    keep_behind(leader->position_m + dyn.headway_spacing_m, leader_stop_m);
  }
  if (!signal_is_green && v.position_m >= 0.0) {
    const double slowest_next = std::max(0.0, v.speed_ms - dyn.decel_ms2 * dt);
    if (slowest_next <= detail::safe_speed(v.position_m, dyn.decel_ms2, dt) + 1e-9) keep_behind(0.0, 0.0);
  }
  speed = std::max(speed, 0.0);

  double position = v.position_m - speed * dt;
  if (position < floor_m) position = std::max(floor_m, v.position_m);
  v.position_m = position;
  v.speed_ms = speed;
  if (speed < dyn.stop_speed_threshold_ms) v.accumulated_wait_s += dt;
  return v;
}

enum class ControllerKind
{
  Atl,
  Pretimed,
  Vtl,
};

inline const char* to_string(ControllerKind c)
{
  switch (c) {
    case ControllerKind::Atl: return "atl";
    case ControllerKind::Pretimed: return "pretimed";
    case ControllerKind::Vtl: return "vtl";
  }
  return "unknown";
}

inline ControllerKind parse_controller(const std::string& s)
{
  if (s == "atl") return ControllerKind::Atl;
  if (s == "pretimed" || s == "tl") return ControllerKind::Pretimed;
  if (s == "vtl") return ControllerKind::Vtl;
  throw ConfigError("controller", "expected atl|pretimed|vtl, got '" + s + "'");
}

struct VehicleRecord
{
  std::uint32_t id = 0;
  int approach_id = 0;
  bool equipped = false;
  double arrival_time_s = 0.0;
  double crossed_time_s = 0.0;
  double wait_s = 0.0;

  friend bool operator==(const VehicleRecord&, const VehicleRecord&) = default;
};

struct RunMetrics
{
  double mean_wait_all_s = 0.0;
  double mean_wait_equipped_s = 0.0;
  double mean_wait_unequipped_s = 0.0;
  std::size_t vehicles_completed = 0;
  std::size_t vehicles_generated = 0;
  std::size_t vehicles_in_system = 0;  // still queued or driving at the horizon
  std::size_t measured_equipped = 0;
  std::size_t measured_unequipped = 0;
  std::size_t red_crossings = 0;
  double min_spacing_m = std::numeric_limits<double>::infinity();
  std::vector<VehicleRecord> per_vehicle;  // vehicles that entered the metric window

  friend bool operator==(const RunMetrics&, const RunMetrics&) = default;
};

/// One received BSM datagram, timestamped relative to simulation start.
struct BsmTraceRecord
{
  std::int64_t offset_ms = 0;
  BsmFrame frame{};
};

struct RunResult
{
  RunMetrics metrics;
  CommandTrace trace;
  std::vector<BsmTraceRecord> bsm_trace;  // filled when requested
};

struct SimOptions
{
  bool record_bsm_trace = false;
  double detection_staleness_s = 1.0;
};

/// Emission phase of a vehicle's BSM schedule within one transmit period.
inline std::int64_t bsm_offset_ms(std::uint32_t vehicle_id, std::int64_t period_ms)
{
  return static_cast<std::int64_t>((static_cast<std::uint64_t>(vehicle_id) * 17u) %
                                   static_cast<std::uint64_t>(period_ms));
}

/**
 * Closed-loop single-intersection run. Each tick moves every vehicle, lets
 * equipped vehicles broadcast through the channel into the roadside pipeline,
 * steps the selected controller and retires vehicles that crossed.
 *
 * `arrivals[i]` feeds geometry approach i. Metrics cover vehicles arriving at
 * or after warmup_s that crossed before duration_s.
 */
inline RunResult run_simulation(const IntersectionGeometry& geometry,
                                const std::vector<std::vector<Arrival>>& arrivals,
                                const DemandConfig& demand, const DynamicsConfig& dyn,
                                const SignalTiming& timing, const std::optional<ChannelModel>& channel,
                                ControllerKind controller, const SimOptions& options = {})
{
  validate(geometry);
  validate(dyn);
  validate(timing);
  validate(demand);
  if (controller == ControllerKind::Atl && !channel) {
    throw ConfigError("channel", "the atl controller needs a channel model");
  }
  if (channel) validate(*channel);
  if (arrivals.size() != geometry.approaches.size()) {
    throw ConfigError("split_ratio", "one demand share per approach is required");
  }
  const PhaseBinding binding = phase_binding(geometry, timing);

  struct Lane
  {
    const Approach* approach;
    std::vector<SimVehicle> vehicles;  // front (nearest the stop line) first
    std::deque<SimVehicle> backlog;    // arrived but not yet able to enter
    std::vector<SimVehicle> departing; // past the stop line, still broadcasting
    std::size_t next_arrival = 0;
  };

  // Vehicle ids follow global arrival order.
  std::vector<std::vector<std::uint32_t>> ids(arrivals.size());
  {
    std::vector<std::tuple<double, std::size_t, std::size_t>> order;
    for (std::size_t i = 0; i < arrivals.size(); ++i) {
      for (std::size_t k = 0; k < arrivals[i].size(); ++k) order.emplace_back(arrivals[i][k].time_s, i, k);
      ids[i].resize(arrivals[i].size());
    }
    std::sort(order.begin(), order.end());
    std::uint32_t next_id = 1;
    for (const auto& [t, i, k] : order) ids[i][k] = next_id++;
  }

  std::vector<Lane> lanes;
  for (const auto& a : geometry.approaches) lanes.push_back({&a, {}, {}, {}, 0});
  const double departure_range_m = 2.0 * geometry.area_of_interest_radius_m;

  RunResult result;
  RunMetrics& m = result.metrics;
  for (const auto& lane_arrivals : arrivals) {
    m.vehicles_generated += static_cast<std::size_t>(
        std::count_if(lane_arrivals.begin(), lane_arrivals.end(),
                      [&](const Arrival& a) { return a.time_s < demand.duration_s; }));
  }

  std::optional<RsuEngine> engine;
  if (controller == ControllerKind::Atl) {
    engine.emplace(geometry, timing, options.detection_staleness_s);
  }
  SignalState state = SignalState::initial(timing);
  result.trace.record(state);

  Rng channel_rng([&] {
    std::seed_seq seq{static_cast<std::uint64_t>(demand.seed), std::uint64_t{0xC4A77E1}};
    return Rng(seq);
  }());
  const std::int64_t period_ms = channel ? std::max<std::int64_t>(1, to_ms(channel->tx_period_s)) : 100;
  const std::int64_t dt_ms = to_ms(dyn.dt_s);
  const std::int64_t horizon_ms = to_ms(demand.duration_s);

  double wait_all = 0.0, wait_eq = 0.0, wait_uneq = 0.0;
  std::vector<std::vector<std::uint8_t>> inbox;

  auto retire = [&](const SimVehicle& v, double crossed_s) {
    ++m.vehicles_completed;
    if (v.arrival_time_s < demand.warmup_s) return;
    m.per_vehicle.push_back({v.id, v.approach_id, v.equipped, v.arrival_time_s, crossed_s, v.accumulated_wait_s});
    wait_all += v.accumulated_wait_s;
    if (v.equipped) {
      ++m.measured_equipped;
      wait_eq += v.accumulated_wait_s;
    } else {
      ++m.measured_unequipped;
      wait_uneq += v.accumulated_wait_s;
    }
  };

  for (std::int64_t now_ms = dt_ms; now_ms <= horizon_ms; now_ms += dt_ms) {
    const std::int64_t prev_ms = now_ms - dt_ms;
    const double now_s = now_ms / 1000.0;

    // (a) movement under the signal shown during this tick
    for (auto& lane : lanes) {
      const int phase = binding.at(lane.approach->id);
      const bool green = state.is_green(phase);
      const bool may_clear = green || (state.interval == Interval::Yellow && state.active_phase_id == phase);
      for (auto& v : lane.departing) {
        v.speed_ms = std::min(v.speed_ms + dyn.accel_ms2 * dyn.dt_s, dyn.v_free_ms);
        v.position_m -= v.speed_ms * dyn.dt_s;
      }
      std::erase_if(lane.departing, [&](const SimVehicle& v) { return v.position_m < -departure_range_m; });

      std::vector<SimVehicle> kept;
      kept.reserve(lane.vehicles.size());
      const SimVehicle* leader = nullptr;
      for (const auto& v : lane.vehicles) {
        SimVehicle next = vehicle_step(v, leader, green, dyn);
        if (next.position_m < 0.0) {
          if (!may_clear) ++m.red_crossings;
          next.crossed_time_s = now_s;
          retire(next, now_s);
          if (next.equipped && engine) lane.departing.push_back(next);
          continue;
        }
        kept.push_back(next);
        leader = &kept.back();
      }
      lane.vehicles = std::move(kept);
      for (std::size_t k = 1; k < lane.vehicles.size(); ++k) {
        m.min_spacing_m = std::min(m.min_spacing_m, lane.vehicles[k].position_m - lane.vehicles[k - 1].position_m);
      }

      // arrivals join the backlog, then enter while the entry is clear
      const std::size_t index = static_cast<std::size_t>(lane.approach - geometry.approaches.data());
      const auto& lane_arrivals = arrivals[index];
      while (lane.next_arrival < lane_arrivals.size() && lane_arrivals[lane.next_arrival].time_s < now_s) {
        const auto& a = lane_arrivals[lane.next_arrival];
        SimVehicle v;
        v.id = ids[index][lane.next_arrival];
        v.approach_id = lane.approach->id;
        v.equipped = a.equipped;
        v.arrival_time_s = a.time_s;
        v.position_m = lane.approach->approach_length_m;
        v.speed_ms = dyn.v_free_ms;
        lane.backlog.push_back(v);
        ++lane.next_arrival;
      }
      for (auto& v : lane.backlog) {
        if (v.arrival_time_s < prev_ms / 1000.0) v.accumulated_wait_s += dyn.dt_s;
      }
      while (!lane.backlog.empty()) {
        const double entry = lane.approach->approach_length_m;
        double gap = std::numeric_limits<double>::infinity();
        if (!lane.vehicles.empty()) gap = entry - (lane.vehicles.back().position_m + dyn.headway_spacing_m);
        if (gap < 0.0) break;
        SimVehicle v = lane.backlog.front();
        lane.backlog.pop_front();
        v.speed_ms = std::min(dyn.v_free_ms, detail::safe_speed(gap, dyn.decel_ms2, dyn.dt_s));
        lane.vehicles.push_back(v);
      }
    }

    // (b) BSM broadcast of equipped vehicles during (prev, now]
    if (engine) {
      inbox.clear();
      for (const auto& lane : lanes) {
        const Approach& a = *lane.approach;
        auto broadcast = [&](const SimVehicle& v) {
          if (!v.equipped) return;
          const std::int64_t offset = bsm_offset_ms(v.id, period_ms);
          std::int64_t first = prev_ms + ((offset - prev_ms) % period_ms + period_ms) % period_ms;
          for (std::int64_t e = first; e < now_ms; e += period_ms) {
            const GeoPoint pos = destination_point(a.stop_line, wrap_degrees(a.inbound_heading + 180.0), v.position_m);
            VehicleSnapshot snap{pos.lat, pos.lon, v.speed_ms, a.inbound_heading, v.id, static_cast<std::uint64_t>(e)};
            const BsmFrame frame = encode_bsm(bsm_from_snapshot(snap));
            if (!sample_reception(*channel, great_circle_distance(pos, geometry.center), channel_rng)) continue;
            inbox.emplace_back(frame.begin(), frame.end());
            if (options.record_bsm_trace) result.bsm_trace.push_back({e, frame});
          }
        };
        for (const auto& v : lane.vehicles) broadcast(v);
        for (const auto& v : lane.departing) broadcast(v);
      }
    }

    // (c) controller
    switch (controller) {
      case ControllerKind::Atl:
        engine->tick_frames(inbox, dyn.dt_s);
        state = engine->state();
        break;
      case ControllerKind::Pretimed:
        state = pretimed_step(state, timing, dyn.dt_s).state;
        break;
      case ControllerKind::Vtl: {
        std::vector<Detection> perfect;
        for (const auto& lane : lanes) {
          for (const auto& v : lane.vehicles) {
            if (v.position_m <= geometry.detection_radius_m) {
              perfect.push_back({lane.approach->id, v.position_m, v.speed_ms, v.id, static_cast<std::uint64_t>(now_ms)});
            }
          }
        }
        state = vtl_step(state, timing, binding, perfect, dyn.dt_s).state;
        break;
      }
    }
    result.trace.record(state);
  }

  for (const auto& lane : lanes) m.vehicles_in_system += lane.vehicles.size() + lane.backlog.size();
  for (std::size_t i = 0; i < lanes.size(); ++i) m.vehicles_in_system += arrivals[i].size() - lanes[i].next_arrival;
  // arrivals at or beyond the horizon were never generated
  for (const auto& lane_arrivals : arrivals) {
    m.vehicles_in_system -= static_cast<std::size_t>(
        std::count_if(lane_arrivals.begin(), lane_arrivals.end(),
                      [&](const Arrival& a) { return a.time_s >= demand.duration_s; }));
  }

  const std::size_t measured = m.measured_equipped + m.measured_unequipped;
  m.mean_wait_all_s = measured ? wait_all / measured : 0.0;
  m.mean_wait_equipped_s = m.measured_equipped ? wait_eq / m.measured_equipped : 0.0;
  m.mean_wait_unequipped_s = m.measured_unequipped ? wait_uneq / m.measured_unequipped : 0.0;
  return result;
}

/// Run with Poisson demand generated from `demand`.
inline RunResult run_simulation(const IntersectionGeometry& geometry, const DemandConfig& demand,
                                const DynamicsConfig& dyn, const SignalTiming& timing,
                                const std::optional<ChannelModel>& channel, ControllerKind controller,
                                const SimOptions& options = {})
{
  validate(demand);
  if (demand.split_ratio.shares.size() != geometry.approaches.size()) {
    throw ConfigError("split_ratio", "one share per approach is required");
  }
  return run_simulation(geometry, generate_arrivals(demand), demand, dyn, timing, channel, controller, options);
}

}  // namespace dsrc_atl
