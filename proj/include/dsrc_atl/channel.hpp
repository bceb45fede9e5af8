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
#include <cstddef>
#include <cstdint>
#include <limits>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

namespace dsrc_atl
{

/**
 * Distance-dependent BSM reception. Reception is certain up to
 * reliable_range_m, then falls linearly to p_at_cutoff at cutoff_range_m and
 * keeps falling at the same slope beyond it, floored at 1 %.
 */
struct ChannelModel
{
  double tx_period_s = 0.1;
  double reliable_range_m = 100.0;
  double cutoff_range_m = 150.0;
  double p_at_cutoff = 0.5;
  double rsu_mount_height_m = 2.5;  // metadata only

  /// Loss-free channel at any distance an intersection cares about.
  static ChannelModel transparent()
  {
    ChannelModel c;
    c.reliable_range_m = 1e9;
    c.cutoff_range_m = 2e9;
    c.p_at_cutoff = 1.0;
    return c;
  }
};

struct IpgStats
{
  double distance_bin_m = 0.0;
  std::size_t sample_count = 0;
  double mean_ipg_s = 0.0;
  double max_ipg_s = 0.0;
};

class ChannelError : public std::invalid_argument
{
public:
  using std::invalid_argument::invalid_argument;
};

/// Deterministic generator used for every stochastic draw in the project.
using Rng = std::mt19937_64;

/// Uniform draw in [0, 1) from the top 53 bits, identical on every platform.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline void validate(const ChannelModel& c)
{
  if (!(c.tx_period_s > 0.0)) throw ChannelError("tx_period_s must be > 0");
  if (!(c.reliable_range_m > 0.0 && c.reliable_range_m < c.cutoff_range_m)) {
    throw ChannelError("require 0 < reliable_range_m < cutoff_range_m");
  }
  if (!(c.p_at_cutoff > 0.0 && c.p_at_cutoff <= 1.0)) throw ChannelError("p_at_cutoff must be in (0, 1]");
}

inline double reception_probability(const ChannelModel& c, double distance_m)
{
  if (!(distance_m >= 0.0)) throw ChannelError("distance must be >= 0");
  if (distance_m <= c.reliable_range_m) return 1.0;
  const double slope = (1.0 - c.p_at_cutoff) / (c.cutoff_range_m - c.reliable_range_m);
  const double linear = 1.0 - slope * (distance_m - c.reliable_range_m);
  if (distance_m <= c.cutoff_range_m) return linear;
  constexpr double kFloor = 0.01;
  return std::max(linear, std::min(kFloor, c.p_at_cutoff));
}

/// One Bernoulli trial; always consumes exactly one draw from `rng`.
inline bool sample_reception(const ChannelModel& c, double distance_m, Rng& rng)
{
  return uniform01(rng) < reception_probability(c, distance_m);
}

/// Mean gap between receptions under independent per-packet loss.
inline double expected_ipg(const ChannelModel& c, double distance_m)
{
  return c.tx_period_s / reception_probability(c, distance_m);
}

inline IpgStats analyze_ipg_trace(std::span<const double> receive_times, double distance_bin_m)
{
  if (receive_times.size() < 2) throw ChannelError("IPG analysis needs at least two receptions");
  IpgStats s;
  s.distance_bin_m = distance_bin_m;
  s.sample_count = receive_times.size() - 1;
  double sum = 0.0;
  for (std::size_t i = 1; i < receive_times.size(); ++i) {
    const double gap = receive_times[i] - receive_times[i - 1];
    if (gap < 0.0) throw ChannelError("receive times must be sorted ascending");
    sum += gap;
    s.max_ipg_s = std::max(s.max_ipg_s, gap);
  }
  s.mean_ipg_s = sum / static_cast<double>(s.sample_count);
  return s;
}

/**
 * Transmits at the model's period from a fixed distance until `gaps + 1`
 * packets have been received and returns the reception times.
 */
inline std::vector<double> simulate_receptions(const ChannelModel& c, double distance_m,
                                               std::size_t gaps, Rng& rng)
{
  std::vector<double> times;
  times.reserve(gaps + 1);
  for (std::uint64_t k = 0; times.size() < gaps + 1; ++k) {
    if (sample_reception(c, distance_m, rng)) times.push_back(static_cast<double>(k) * c.tx_period_s);
  }
  return times;
}

/// Writes `distance_m,p_rx,expected_ipg_s,measured_ipg_s` rows.
inline void write_channel_curve(std::ostream& out, const ChannelModel& c,
                                std::span<const double> distances, std::size_t gaps_per_point,
                                std::uint64_t seed)
{
  Rng rng(seed);
  out << "distance_m,p_rx,expected_ipg_s,measured_ipg_s\n";
  const auto old_precision = out.precision(6);
  for (double d : distances) {
    const auto times = simulate_receptions(c, d, gaps_per_point, rng);
    const auto stats = analyze_ipg_trace(times, d);
    out << d << ',' << reception_probability(c, d) << ',' << expected_ipg(c, d) << ','
        << stats.mean_ipg_s << '\n';
  }
  out.precision(old_precision);
}

inline void to_json(nlohmann::json& j, const ChannelModel& c)
{
  j = {{"tx_period_s", c.tx_period_s},
       {"reliable_range_m", c.reliable_range_m},
       {"cutoff_range_m", c.cutoff_range_m},
       {"p_at_cutoff", c.p_at_cutoff},
       {"rsu_mount_height_m", c.rsu_mount_height_m}};
}

inline void from_json(const nlohmann::json& j, ChannelModel& c)
{
  ChannelModel d;
  c.tx_period_s = j.value("tx_period_s", d.tx_period_s);
  c.reliable_range_m = j.value("reliable_range_m", d.reliable_range_m);
  c.cutoff_range_m = j.value("cutoff_range_m", d.cutoff_range_m);
  c.p_at_cutoff = j.value("p_at_cutoff", d.p_at_cutoff);
  c.rsu_mount_height_m = j.value("rsu_mount_height_m", d.rsu_mount_height_m);
}

}  // namespace dsrc_atl
