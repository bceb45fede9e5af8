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

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "dsrc_atl/bsm.hpp"
#include "dsrc_atl/geodesy.hpp"
#include "dsrc_atl/signal_control.hpp"

namespace dsrc_atl
{

struct RsuCounters
{
  std::uint64_t received = 0;
  std::uint64_t malformed = 0;
  std::uint64_t filtered = 0;
  std::uint64_t detections = 0;
  std::uint64_t commands = 0;
  std::uint64_t dropped = 0;

  friend bool operator==(const RsuCounters&, const RsuCounters&) = default;
};

/// Freshest detection per temporary ID, forgotten once it goes stale.
class DetectionTracker
{
public:
  void update(const Detection& d, std::int64_t now_ms)
  {
    auto [it, inserted] = tracks_.try_emplace(d.temp_id, Track{d, now_ms});
    if (!inserted && d.time_ms >= it->second.detection.time_ms) it->second = Track{d, now_ms};
  }

  /// A newer BSM that no longer classifies means the vehicle left the approach.
  void forget(std::uint32_t temp_id, std::uint64_t bsm_time_ms)
  {
    auto it = tracks_.find(temp_id);
    if (it != tracks_.end() && bsm_time_ms >= it->second.detection.time_ms) tracks_.erase(it);
  }

  void evict_older_than(std::int64_t now_ms, std::int64_t window_ms)
  {
    std::erase_if(tracks_, [&](const auto& kv) { return now_ms - kv.second.seen_ms > window_ms; });
  }

  /// Tracked detections within `radius_m` of their stop line, by temp_id.
  std::vector<Detection> within(double radius_m) const
  {
    std::vector<Detection> out;
    for (const auto& [id, track] : tracks_) {
      if (track.detection.distance_to_stop_m <= radius_m) out.push_back(track.detection);
    }
    return out;
  }

  std::size_t size() const { return tracks_.size(); }

private:
  struct Track
  {
    Detection detection;
    std::int64_t seen_ms;
  };
  std::map<std::uint32_t, Track> tracks_;
};

/**
 * The roadside computation pipeline without any I/O: decode, localize,
 * track and decide. Time advances only through tick(), so feeding the same
 * datagrams into the same ticks always yields the same commands.
 */
class RsuEngine
{
public:
  RsuEngine(IntersectionGeometry geometry, SignalTiming timing, double staleness_s = 1.0)
      : geometry_(std::move(geometry)),
        timing_(std::move(timing)),
        binding_(checked_binding(geometry_, timing_)),
        staleness_ms_(to_ms(staleness_s)),
        state_(SignalState::initial(timing_))
  {
    trace_.record(state_);
  }

  /// Command for the phase that is green when the service starts.
  PhaseCommand initial_command() const
  {
    return {state_.active_phase_id, static_cast<std::uint64_t>(state_.clock_ms)};
  }

  /**
   * Advances the controller by `dt_s`. `datagrams` are the frames received
   * since the previous tick; they are stamped with this tick's time.
   */
  std::optional<PhaseCommand> tick(std::span<const std::span<const std::uint8_t>> datagrams, double dt_s)
  {
    const std::int64_t now_ms = state_.clock_ms + to_ms(dt_s);
    for (auto frame : datagrams) ingest(frame, now_ms);
    return step(now_ms, dt_s);
  }

  /// Same as tick() for callers holding owned frames.
  std::optional<PhaseCommand> tick_frames(std::span<const std::vector<std::uint8_t>> frames, double dt_s)
  {
    const std::int64_t now_ms = state_.clock_ms + to_ms(dt_s);
    for (const auto& f : frames) ingest(f, now_ms);
    return step(now_ms, dt_s);
  }

  const SignalState& state() const { return state_; }
  const RsuCounters& counters() const { return counters_; }
  RsuCounters& counters() { return counters_; }
  const CommandTrace& trace() const { return trace_; }
  const IntersectionGeometry& geometry() const { return geometry_; }
  const SignalTiming& timing() const { return timing_; }
  const DetectionTracker& tracker() const { return tracker_; }

private:
  static PhaseBinding checked_binding(const IntersectionGeometry& g, const SignalTiming& t)
  {
    validate(g);
    validate(t);
    return phase_binding(g, t);
  }

  void ingest(std::span<const std::uint8_t> frame, std::int64_t now_ms)
  {
    ++counters_.received;
    auto decoded = decode_bsm(frame);
    if (std::holds_alternative<DecodeError>(decoded)) {
      ++counters_.malformed;
      return;
    }
    const auto& bsm = std::get<BasicSafetyMessage>(decoded);
    auto detection = classify_bsm(bsm, geometry_);
    if (!detection) {
      ++counters_.filtered;
      tracker_.forget(bsm.temp_id, bsm.time_ms);
      return;
    }
    ++counters_.detections;
    tracker_.update(*detection, now_ms);
  }

  std::optional<PhaseCommand> step(std::int64_t now_ms, double dt_s)
  {
    tracker_.evict_older_than(now_ms, staleness_ms_);
    const auto active = tracker_.within(geometry_.detection_radius_m);
    auto result = atl_step(state_, timing_, binding_, active, dt_s);
    state_ = result.state;
    trace_.record(state_);
    if (result.command) ++counters_.commands;
    return result.command;
  }

  IntersectionGeometry geometry_;
  SignalTiming timing_;
  PhaseBinding binding_;
  std::int64_t staleness_ms_;
  SignalState state_;
  DetectionTracker tracker_;
  RsuCounters counters_;
  CommandTrace trace_;
};

}  // namespace dsrc_atl
