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
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsrc_atl/geodesy.hpp"

namespace dsrc_atl
{

enum class Interval
{
  Green,
  Yellow,
  AllRed,
};

inline const char* to_string(Interval i)
{
  switch (i) {
    case Interval::Green: return "Green";
    case Interval::Yellow: return "Yellow";
    case Interval::AllRed: return "AllRed";
  }
  return "Unknown";
}

struct PhaseSplit
{
  int phase_id = 0;
  double green_s = 0.0;
};

/// Interval durations. The order of `pretimed_green_s` is the fixed cycle order.
struct SignalTiming
{
  double min_green_s = 5.0;
  double yellow_s = 3.0;
  double all_red_s = 1.0;
  std::vector<PhaseSplit> pretimed_green_s = {{1, 40.0}, {2, 10.0}};

  double green_for(int phase_id) const
  {
    for (const auto& p : pretimed_green_s) {
      if (p.phase_id == phase_id) return p.green_s;
    }
    throw std::out_of_range("no pretimed split for phase " + std::to_string(phase_id));
  }

  int next_phase(int phase_id) const
  {
    for (std::size_t i = 0; i < pretimed_green_s.size(); ++i) {
      if (pretimed_green_s[i].phase_id == phase_id) {
        return pretimed_green_s[(i + 1) % pretimed_green_s.size()].phase_id;
      }
    }
    throw std::out_of_range("no pretimed split for phase " + std::to_string(phase_id));
  }

  double cycle_length_s() const
  {
    double total = 0.0;
    for (const auto& p : pretimed_green_s) total += p.green_s + yellow_s + all_red_s;
    return total;
  }
};

class SignalError : public std::invalid_argument
{
public:
  using std::invalid_argument::invalid_argument;
};

inline std::int64_t to_ms(double seconds) { return std::llround(seconds * 1000.0); }

inline void validate(const SignalTiming& t)
{
  if (!(t.min_green_s > 0 && t.yellow_s > 0 && t.all_red_s > 0)) {
    throw SignalError("signal durations must be > 0");
  }
  if (t.pretimed_green_s.size() < 2) throw SignalError("at least two phases are required");
  std::set<int> ids;
  for (const auto& p : t.pretimed_green_s) {
    if (!ids.insert(p.phase_id).second) throw SignalError("duplicate phase " + std::to_string(p.phase_id));
    if (p.green_s < t.min_green_s) {
      throw SignalError("pretimed green of phase " + std::to_string(p.phase_id) + " is below min_green_s");
    }
  }
}

/// Which phase serves each approach.
using PhaseBinding = std::map<int, int>;

inline PhaseBinding phase_binding(const IntersectionGeometry& g, const SignalTiming& t)
{
  PhaseBinding binding;
  std::set<int> served;
  for (const auto& a : g.approaches) {
    const bool planned = std::any_of(t.pretimed_green_s.begin(), t.pretimed_green_s.end(),
                                     [&](const PhaseSplit& p) { return p.phase_id == a.phase_id; });
    if (!planned) {
      throw SignalError("approach " + std::to_string(a.id) + " uses phase " + std::to_string(a.phase_id) +
                        " which has no pretimed split");
    }
    binding[a.id] = a.phase_id;
    served.insert(a.phase_id);
  }
  for (const auto& p : t.pretimed_green_s) {
    if (!served.count(p.phase_id)) {
      throw SignalError("phase " + std::to_string(p.phase_id) + " serves no approach");
    }
  }
  return binding;
}

struct SignalState
{
  int active_phase_id = 1;
  Interval interval = Interval::Green;
  std::int64_t interval_elapsed_ms = 0;
  std::optional<int> pending_phase_id;  // set during Yellow and AllRed
  std::int64_t clock_ms = 0;

  double interval_elapsed_s() const { return interval_elapsed_ms / 1000.0; }
  double clock_s() const { return clock_ms / 1000.0; }

  bool is_green(int phase_id) const { return interval == Interval::Green && active_phase_id == phase_id; }

  friend bool operator==(const SignalState&, const SignalState&) = default;

  /// Green on the first phase of the cycle at time zero.
  static SignalState initial(const SignalTiming& t)
  {
    SignalState s;
    s.active_phase_id = t.pretimed_green_s.front().phase_id;
    return s;
  }
};

struct PhaseCommand
{
  int phase_id = 0;
  std::uint64_t issue_time_ms = 0;

  friend bool operator==(const PhaseCommand&, const PhaseCommand&) = default;
};

struct StepResult
{
  SignalState state;
  std::optional<PhaseCommand> command;
};

namespace detail
{

inline void begin_yellow(SignalState& s, int pending)
{
  s.interval = Interval::Yellow;
  s.interval_elapsed_ms = 0;
  s.pending_phase_id = pending;
}

// Advances the clock. Returns true when the state is mid-clearance, in which
// case clearance progress (and a possible Green command) is already applied.
inline bool advance_clearance(SignalState& s, const SignalTiming& t, double dt_s,
                              std::optional<PhaseCommand>& command)
{
  if (!(dt_s > 0.0)) throw SignalError("dt_s must be > 0");
  const std::int64_t dt_ms = to_ms(dt_s);
  if (dt_ms <= 0) throw SignalError("dt_s must be at least 1 ms");
  s.interval_elapsed_ms += dt_ms;
  s.clock_ms += dt_ms;

  switch (s.interval) {
    case Interval::Green:
      return false;
    case Interval::Yellow:
      if (s.interval_elapsed_ms >= to_ms(t.yellow_s)) {
        s.interval = Interval::AllRed;
        s.interval_elapsed_ms = 0;
      }
      return true;
    case Interval::AllRed:
      if (s.interval_elapsed_ms >= to_ms(t.all_red_s)) {
        s.active_phase_id = s.pending_phase_id.value();
        s.pending_phase_id.reset();
        s.interval = Interval::Green;
        s.interval_elapsed_ms = 0;
        command = PhaseCommand{s.active_phase_id, static_cast<std::uint64_t>(s.clock_ms)};
      }
      return true;
  }
  return true;
}

inline void pretimed_decision(SignalState& s, const SignalTiming& t)
{
  if (s.interval_elapsed_ms >= to_ms(t.green_for(s.active_phase_id))) {
    begin_yellow(s, t.next_phase(s.active_phase_id));
  }
}

// The phase decision on a Green interval, shared by the ATL and VTL controllers.
inline void demand_decision(SignalState& s, const SignalTiming& t, const PhaseBinding& binding,
                            std::span<const Detection> detections)
{
  bool green_demand = false;
  const Detection* nearest_red = nullptr;
  int nearest_red_phase = 0;
  for (const auto& d : detections) {
    auto it = binding.find(d.approach_id);
    if (it == binding.end()) {
      throw SignalError("detection on unknown approach " + std::to_string(d.approach_id));
    }
    const int phase = it->second;
    if (phase == s.active_phase_id) {
      green_demand = true;
      continue;
    }
    if (nearest_red == nullptr || d.distance_to_stop_m < nearest_red->distance_to_stop_m ||
        (d.distance_to_stop_m == nearest_red->distance_to_stop_m &&
         d.approach_id < nearest_red->approach_id)) {
      nearest_red = &d;
      nearest_red_phase = phase;
    }
  }

  if (nearest_red == nullptr || green_demand) {
    pretimed_decision(s, t);
    return;
  }
  if (s.interval_elapsed_ms >= to_ms(t.min_green_s)) begin_yellow(s, nearest_red_phase);
}

}  // namespace detail

/// Fixed-time plan: each phase in cycle order gets its pretimed green, then
/// yellow and all-red clearance.
inline StepResult pretimed_step(SignalState s, const SignalTiming& t, double dt_s)
{
  std::optional<PhaseCommand> command;
  if (!detail::advance_clearance(s, t, dt_s, command)) detail::pretimed_decision(s, t);
  return {s, command};
}

/**
 * DSRC-actuated phase decision. With no detections, or with any detection on
 * an approach of the green phase, the plan runs pre-timed. When every
 * detection is on red approaches the controller switches once min green has
 * elapsed, toward the phase of the nearest detected vehicle.
 *
 * `detections` must already be restricted to the detection radius.
 */
inline StepResult atl_step(SignalState s, const SignalTiming& t, const PhaseBinding& binding,
                           std::span<const Detection> detections, double dt_s)
{
  std::optional<PhaseCommand> command;
  if (!detail::advance_clearance(s, t, dt_s, command)) {
    detail::demand_decision(s, t, binding, detections);
  }
  return {s, command};
}

/**
 * Perfect-information baseline. Runs the same decision as atl_step but is fed
 * every vehicle in the detection zone, so an empty green approach with demand
 * elsewhere gaps out as soon as min green is met.
 */
inline StepResult vtl_step(SignalState s, const SignalTiming& t, const PhaseBinding& binding,
                           std::span<const Detection> all_vehicles, double dt_s)
{
  return atl_step(std::move(s), t, binding, all_vehicles, dt_s);
}

// Command trace ----------------------------------------------------------

struct TraceEntry
{
  std::int64_t time_ms = 0;
  int phase_id = 0;
  Interval interval = Interval::Green;

  friend bool operator==(const TraceEntry&, const TraceEntry&) = default;
};

/// Records one entry per interval change of a controller.
class CommandTrace
{
public:
  void record(const SignalState& s)
  {
    if (!entries_.empty() && entries_.back().phase_id == s.active_phase_id &&
        entries_.back().interval == s.interval) {
      return;
    }
    entries_.push_back({s.clock_ms, s.active_phase_id, s.interval});
  }

  const std::vector<TraceEntry>& entries() const { return entries_; }

  /// Green activations only, as they would be sent to the TCB.
  std::vector<PhaseCommand> commands() const
  {
    std::vector<PhaseCommand> out;
    for (const auto& e : entries_) {
      if (e.interval == Interval::Green) out.push_back({e.phase_id, static_cast<std::uint64_t>(e.time_ms)});
    }
    return out;
  }

  friend bool operator==(const CommandTrace&, const CommandTrace&) = default;

private:
  std::vector<TraceEntry> entries_;
};

/// `<sim_time_s>,<phase_id>,<interval>` per line.
inline void write_trace(std::ostream& out, std::span<const TraceEntry> entries)
{
  char buf[64];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "%lld.%03lld,%d,%s\n", static_cast<long long>(e.time_ms / 1000),
                  static_cast<long long>(e.time_ms % 1000), e.phase_id, to_string(e.interval));
    out << buf;
  }
}

/**
 * Checks the safety invariants of a command trace: every Green is followed
 * by Yellow then AllRed of the same phase before a different phase turns
 * Green, with each interval at least as long as configured. The last entry
 * may be cut off by the end of the run. Returns one message per violation.
 */
inline std::vector<std::string> verify_trace(std::span<const TraceEntry> entries, const SignalTiming& t)
{
  std::vector<std::string> violations;
  auto fail = [&](std::size_t i, const std::string& what) {
    violations.push_back("entry " + std::to_string(i) + " at " + std::to_string(entries[i].time_ms) +
                         " ms: " + what);
  };
  for (std::size_t i = 1; i < entries.size(); ++i) {
    const auto& prev = entries[i - 1];
    const auto& cur = entries[i];
    const std::int64_t duration = cur.time_ms - prev.time_ms;
    switch (prev.interval) {
      case Interval::Green:
        if (cur.interval != Interval::Yellow || cur.phase_id != prev.phase_id) {
          fail(i, "Green not followed by Yellow of the same phase");
        }
        if (duration < to_ms(t.min_green_s)) fail(i, "Green shorter than min green");
        break;
      case Interval::Yellow:
        if (cur.interval != Interval::AllRed || cur.phase_id != prev.phase_id) {
          fail(i, "Yellow not followed by AllRed");
        }
        if (duration < to_ms(t.yellow_s)) fail(i, "Yellow shorter than configured");
        break;
      case Interval::AllRed:
        if (cur.interval != Interval::Green || cur.phase_id == prev.phase_id) {
          fail(i, "AllRed not followed by Green of another phase");
        }
        if (duration < to_ms(t.all_red_s)) fail(i, "AllRed shorter than configured");
        break;
    }
  }
  return violations;
}

inline void to_json(nlohmann::json& j, const SignalTiming& t)
{
  nlohmann::json splits = nlohmann::json::array();
  for (const auto& p : t.pretimed_green_s) splits.push_back({{"phase_id", p.phase_id}, {"green_s", p.green_s}});
  j = {{"min_green_s", t.min_green_s},
       {"yellow_s", t.yellow_s},
       {"all_red_s", t.all_red_s},
       {"pretimed_green_s", splits}};
}

inline void from_json(const nlohmann::json& j, SignalTiming& t)
{
  SignalTiming d;
  t.min_green_s = j.value("min_green_s", d.min_green_s);
  t.yellow_s = j.value("yellow_s", d.yellow_s);
  t.all_red_s = j.value("all_red_s", d.all_red_s);
  if (j.contains("pretimed_green_s")) {
    t.pretimed_green_s.clear();
    for (const auto& p : j.at("pretimed_green_s")) {
      t.pretimed_green_s.push_back({p.at("phase_id").get<int>(), p.at("green_s").get<double>()});
    }
  } else {
    t.pretimed_green_s = d.pretimed_green_s;
  }
}

}  // namespace dsrc_atl
