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
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsrc_atl/sweep.hpp"

namespace dsrc_atl
{

inline void to_json(nlohmann::json& j, const DemandConfig& d)
{
  j = {{"total_flow_vph", d.total_flow_vph},
       {"split_ratio", format_split_ratio(d.split_ratio)},
       {"penetration", d.penetration},
       {"seed", d.seed},
       {"duration_s", d.duration_s},
       {"warmup_s", d.warmup_s}};
}

/// `split_ratio` may be a "4:1" string or an array of shares.
inline void from_json(const nlohmann::json& j, DemandConfig& d)
{
  DemandConfig def;
  d.total_flow_vph = j.value("total_flow_vph", def.total_flow_vph);
  if (j.contains("split_ratio")) {
    const auto& r = j.at("split_ratio");
    if (r.is_string()) {
      d.split_ratio = parse_split_ratio(r.get<std::string>());
    } else if (r.is_array()) {
      d.split_ratio.shares = r.get<std::vector<double>>();
    } else {
      throw ConfigError("split_ratio", "expected a string like \"4:1\" or an array");
    }
  } else {
    d.split_ratio = def.split_ratio;
  }
  d.penetration = j.value("penetration", def.penetration);
  d.seed = j.value("seed", def.seed);
  d.duration_s = j.value("duration_s", def.duration_s);
  d.warmup_s = j.value("warmup_s", def.warmup_s);
}

inline void to_json(nlohmann::json& j, const DynamicsConfig& d)
{
  j = {{"v_free_ms", d.v_free_ms},
       {"accel_ms2", d.accel_ms2},
       {"decel_ms2", d.decel_ms2},
       {"headway_spacing_m", d.headway_spacing_m},
       {"dt_s", d.dt_s},
       {"stop_speed_threshold_ms", d.stop_speed_threshold_ms}};
}

inline void from_json(const nlohmann::json& j, DynamicsConfig& d)
{
  DynamicsConfig def;
  d.v_free_ms = j.value("v_free_ms", def.v_free_ms);
  d.accel_ms2 = j.value("accel_ms2", def.accel_ms2);
  d.decel_ms2 = j.value("decel_ms2", def.decel_ms2);
  d.headway_spacing_m = j.value("headway_spacing_m", def.headway_spacing_m);
  d.dt_s = j.value("dt_s", def.dt_s);
  d.stop_speed_threshold_ms = j.value("stop_speed_threshold_ms", def.stop_speed_threshold_ms);
}

/**
 * Reads a JSON document into T. Unreadable files, malformed JSON and type
 * mismatches all surface as ConfigError naming `field`.
 */
template <typename T>
T load_json_file(const std::string& path, const std::string& field)
{
  std::ifstream in(path);
  if (!in) throw ConfigError(field, "cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(field, "invalid JSON in '" + path + "': " + e.what());
  }
}

/// File references and run selection of one CLI invocation.
struct ExperimentFiles
{
  std::optional<std::string> geometry_path;
  std::optional<std::string> demand_path;
  std::optional<std::string> dynamics_path;
  std::optional<std::string> timing_path;
  std::optional<std::string> channel_path;
  ControllerKind controller = ControllerKind::Atl;
  std::string out_path;
  std::vector<std::uint64_t> seeds;
};

/// Rethrows every component's validation failure as a ConfigError.
inline void validate_experiment(const ExperimentBase& base)
{
  try {
    validate(base.geometry);
    validate(base.timing);
    phase_binding(base.geometry, base.timing);
    validate(base.channel);
  } catch (const GeometryError& e) {
    throw ConfigError("geometry", e.what());
  } catch (const SignalError& e) {
    throw ConfigError("timing", e.what());
  } catch (const ChannelError& e) {
    throw ConfigError("channel", e.what());
  }
  validate(base.demand);
  validate(base.dynamics);
  if (base.demand.split_ratio.shares.size() != base.geometry.approaches.size()) {
    throw ConfigError("split_ratio", "one share per approach is required");
  }
}

/// Defaults overlaid with every referenced file, validated as a whole.
inline ExperimentBase load_experiment_base(const ExperimentFiles& files)
{
  ExperimentBase base;
  if (files.geometry_path) {
    try {
      base.geometry = load_geometry(*files.geometry_path);
    } catch (const GeometryError& e) {
      throw ConfigError("geometry", e.what());
    }
  }
  if (files.demand_path) base.demand = load_json_file<DemandConfig>(*files.demand_path, "demand");
  if (files.dynamics_path) base.dynamics = load_json_file<DynamicsConfig>(*files.dynamics_path, "dynamics");
  if (files.timing_path) base.timing = load_json_file<SignalTiming>(*files.timing_path, "timing");
  if (files.channel_path) base.channel = load_json_file<ChannelModel>(*files.channel_path, "channel");
  validate_experiment(base);
  return base;
}

inline ExperimentBase load_experiment(const ExperimentFiles& files)
{
  if (files.seeds.empty()) throw ConfigError("seeds", "at least one seed is required");
  return load_experiment_base(files);
}

}  // namespace dsrc_atl
