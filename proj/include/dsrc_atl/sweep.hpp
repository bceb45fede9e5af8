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
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <optional>
#include <ostream>
#include <thread>
#include <vector>

#include "dsrc_atl/traffic_sim.hpp"

namespace dsrc_atl
{

/// Everything one run needs except the controller, penetration and seed.
struct ExperimentBase
{
  IntersectionGeometry geometry = default_geometry();
  DemandConfig demand;
  DynamicsConfig dynamics;
  SignalTiming timing;
  ChannelModel channel;
};

struct SweepRow
{
  double penetration = 0.0;
  ControllerKind controller = ControllerKind::Atl;
  std::uint64_t seed = 0;
  RunMetrics metrics;
};

struct Summary
{
  std::size_t n = 0;
  double mean = 0.0;
  double ci95_halfwidth = 0.0;
};

struct SweepCell
{
  double penetration = 0.0;
  ControllerKind controller = ControllerKind::Atl;
  Summary wait_all;
  Summary wait_equipped;    // over seeds with at least one measured equipped vehicle
  Summary wait_unequipped;  // likewise for unequipped
  double mean_vehicles_completed = 0.0;
};

struct SweepResult
{
  std::vector<SweepRow> rows;
  std::vector<SweepCell> cells;

  const SweepCell& cell(double penetration, ControllerKind controller) const
  {
    for (const auto& c : cells) {
      if (c.controller == controller && std::abs(c.penetration - penetration) < 1e-9) return c;
    }
    throw std::out_of_range("no sweep cell for that penetration and controller");
  }
};

/// Two-sided 95 % Student t quantile.
inline double t_quantile_95(std::size_t dof)
{
  static constexpr double table[] = {0,      12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
                                     2.201, 2.179,  2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086, 2.080,
                                     2.074, 2.069,  2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042};
  if (dof == 0) return 0.0;
  if (dof < std::size(table)) return table[dof];
  return 1.960;
}

inline Summary summarize(const std::vector<double>& xs)
{
  Summary s;
  s.n = xs.size();
  if (xs.empty()) return s;
  double sum = 0.0;
  for (double x : xs) sum += x;
  s.mean = sum / xs.size();
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    const double sd = std::sqrt(ss / (xs.size() - 1));
    s.ci95_halfwidth = t_quantile_95(xs.size() - 1) * sd / std::sqrt(static_cast<double>(xs.size()));
  }
  return s;
}

inline RunMetrics run_once(const ExperimentBase& base, ControllerKind controller, double penetration,
                           std::uint64_t seed)
{
  DemandConfig demand = base.demand;
  demand.penetration = penetration;
  demand.seed = seed;
  auto result = run_simulation(base.geometry, demand, base.dynamics, base.timing, base.channel, controller);
  result.metrics.per_vehicle.clear();
  return result.metrics;
}

/**
 * For every penetration and seed, one run each of the actuated controller and
 * the pre-timed and perfect-information baselines. Runs are independent and
 * spread over `workers` threads; the result order does not depend on it.
 */
inline SweepResult sweep_penetration(const ExperimentBase& base, const std::vector<double>& penetrations,
                                     const std::vector<std::uint64_t>& seeds, unsigned workers = 0)
{
  if (seeds.empty()) throw ConfigError("seeds", "at least one replication is required");
  for (double p : penetrations) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("penetrations", "values must be in [0, 1]");
  }
  static constexpr ControllerKind kControllers[] = {ControllerKind::Atl, ControllerKind::Pretimed,
                                                    ControllerKind::Vtl};
  SweepResult out;
  for (double p : penetrations) {
    for (auto c : kControllers) {
      for (auto seed : seeds) out.rows.push_back({p, c, seed, {}});
    }
  }

  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min<unsigned>(workers, static_cast<unsigned>(out.rows.size()));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < out.rows.size(); i = next++) {
      try {
        auto& row = out.rows[i];
        row.metrics = run_once(base, row.controller, row.penetration, row.seed);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  if (failure) std::rethrow_exception(failure);

  for (double p : penetrations) {
    for (auto c : kControllers) {
      std::vector<double> all, eq, uneq, completed;
      for (const auto& row : out.rows) {
        if (row.controller != c || row.penetration != p) continue;
        all.push_back(row.metrics.mean_wait_all_s);
        if (row.metrics.measured_equipped) eq.push_back(row.metrics.mean_wait_equipped_s);
        if (row.metrics.measured_unequipped) uneq.push_back(row.metrics.mean_wait_unequipped_s);
        completed.push_back(static_cast<double>(row.metrics.vehicles_completed));
      }
      SweepCell cell{p, c, summarize(all), summarize(eq), summarize(uneq), summarize(completed).mean};
      out.cells.push_back(cell);
    }
  }
  return out;
}

/**
 * Share of the full-penetration gain already reached at `penetration`:
 * (W_TL - W_ATL(p)) / (W_TL - W_ATL(1)). NaN when there is no gain at 1.
 */
inline double improvement_fraction(const SweepResult& r, double penetration)
{
  const double tl = r.cell(penetration, ControllerKind::Pretimed).wait_all.mean;
  const double at_p = r.cell(penetration, ControllerKind::Atl).wait_all.mean;
  const double at_full = r.cell(1.0, ControllerKind::Atl).wait_all.mean;
  const double full_gain = r.cell(1.0, ControllerKind::Pretimed).wait_all.mean - at_full;
  if (full_gain == 0.0) return std::nan("");
  return (tl - at_p) / full_gain;
}

inline void write_sweep_rows(std::ostream& out, const SweepResult& r)
{
  out << "penetration,controller,seed,mean_wait_all_s,mean_wait_equipped_s,mean_wait_unequipped_s,vehicles_completed\n";
  char buf[256];
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "%.3f,%s,%llu,%.6f,%.6f,%.6f,%zu\n", row.penetration, to_string(row.controller),
                  static_cast<unsigned long long>(row.seed), row.metrics.mean_wait_all_s,
                  row.metrics.mean_wait_equipped_s, row.metrics.mean_wait_unequipped_s,
                  row.metrics.vehicles_completed);
    out << buf;
  }
}

/// One row per (penetration, controller) cell; seed holds the replication count.
inline void write_sweep_aggregate(std::ostream& out, const SweepResult& r)
{
  out << "penetration,controller,seed,mean_wait_all_s,mean_wait_equipped_s,mean_wait_unequipped_s,"
         "vehicles_completed,ci95_halfwidth_s\n";
  char buf[256];
  for (const auto& c : r.cells) {
    std::snprintf(buf, sizeof buf, "%.3f,%s,%zu,%.6f,%.6f,%.6f,%.1f,%.6f\n", c.penetration, to_string(c.controller),
                  c.wait_all.n, c.wait_all.mean, c.wait_equipped.mean, c.wait_unequipped.mean,
                  c.mean_vehicles_completed, c.wait_all.ci95_halfwidth);
    out << buf;
  }
}

}  // namespace dsrc_atl
