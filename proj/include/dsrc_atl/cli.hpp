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
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dsrc_atl/config.hpp"
#include "dsrc_atl/rsu_service.hpp"
#include "dsrc_atl/sweep.hpp"

namespace dsrc_atl::cli
{

enum ExitCode : int
{
  kOk = 0,
  kRuntimeError = 1,
  kConfigError = 2,
};

namespace detail
{

struct CommonOptions
{
  std::string geometry, demand, dynamics, timing, channel;
  std::optional<double> duration, warmup;
  std::optional<std::uint64_t> seed;
  std::vector<std::uint64_t> seeds;
  std::optional<std::size_t> replications;
  std::string out = "-";
};

inline void add_common(CLI::App& app, CommonOptions& o)
{
  app.add_option("--geometry", o.geometry, "intersection geometry JSON");
  app.add_option("--demand", o.demand, "demand config JSON");
  app.add_option("--dynamics", o.dynamics, "vehicle dynamics JSON");
  app.add_option("--timing", o.timing, "signal timing JSON");
  app.add_option("--channel", o.channel, "channel model JSON");
  app.add_option("--duration", o.duration, "simulated horizon in seconds");
  app.add_option("--warmup", o.warmup, "seconds excluded from metrics");
  app.add_option("--seed", o.seed, "single seed (or first seed with --replications)");
  app.add_option("--seeds", o.seeds, "comma separated seed list")->delimiter(',');
  app.add_option("--replications", o.replications, "number of consecutive seeds");
  app.add_option("--out", o.out, "output CSV path, '-' for standard output");
}

inline std::optional<std::string> non_empty(const std::string& s)
{
  return s.empty() ? std::nullopt : std::optional<std::string>(s);
}

inline std::vector<std::uint64_t> resolve_seeds(const CommonOptions& o, std::uint64_t fallback)
{
  if (!o.seeds.empty()) {
    if (o.seed || o.replications) throw ConfigError("seeds", "--seeds excludes --seed and --replications");
    return o.seeds;
  }
  const std::uint64_t first = o.seed.value_or(fallback);
  const std::size_t n = o.replications.value_or(1);
  if (n == 0) throw ConfigError("replications", "must be >= 1");
  std::vector<std::uint64_t> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(first + i);
  return out;
}

inline ExperimentBase load_base(const CommonOptions& o, std::vector<std::uint64_t>& seeds)
{
  ExperimentFiles files;
  files.geometry_path = non_empty(o.geometry);
  files.demand_path = non_empty(o.demand);
  files.dynamics_path = non_empty(o.dynamics);
  files.timing_path = non_empty(o.timing);
  files.channel_path = non_empty(o.channel);
  files.out_path = o.out;
  ExperimentBase base = load_experiment_base(files);
  if (o.duration) base.demand.duration_s = *o.duration;
  if (o.warmup) base.demand.warmup_s = *o.warmup;
  seeds = resolve_seeds(o, base.demand.seed);
  validate_experiment(base);
  return base;
}

// Output goes to `fallback` for "-", otherwise to a freshly written file.
class Output
{
public:
  Output(const std::string& path, std::ostream& fallback) : stream_(&fallback)
  {
    if (path != "-") {
      file_.open(path, std::ios::binary | std::ios::trunc);
      if (!file_) throw std::runtime_error("cannot write '" + path + "'");
      stream_ = &file_;
    }
  }

  std::ostream& stream() { return *stream_; }

  void close()
  {
    stream_->flush();
    if (!*stream_) throw std::runtime_error("write failed");
    if (file_.is_open()) file_.close();
  }

private:
  std::ofstream file_;
  std::ostream* stream_;
};

inline std::string sibling(const std::string& path, const std::string& suffix)
{
  if (path == "-" || path.empty()) return {};
  std::filesystem::path p(path);
  return (p.parent_path() / (p.stem().string() + suffix)).string();
}

inline void write_json(const std::string& path, const nlohmann::json& j)
{
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + path + "'");
  f << j.dump(2) << '\n';
  if (!f) throw std::runtime_error("write failed for '" + path + "'");
}

inline nlohmann::json metrics_json(const RunMetrics& m)
{
  return {{"mean_wait_all_s", m.mean_wait_all_s},
          {"mean_wait_equipped_s", m.mean_wait_equipped_s},
          {"mean_wait_unequipped_s", m.mean_wait_unequipped_s},
          {"vehicles_completed", m.vehicles_completed},
          {"vehicles_generated", m.vehicles_generated},
          {"vehicles_in_system", m.vehicles_in_system},
          {"measured_equipped", m.measured_equipped},
          {"measured_unequipped", m.measured_unequipped},
          {"red_crossings", m.red_crossings}};
}

inline volatile std::sig_atomic_t g_interrupted = 0;

extern "C" inline void on_signal(int) { g_interrupted = 1; }

}  // namespace detail

struct SimulateOptions
{
  detail::CommonOptions common;
  std::string controller = "atl";
  std::optional<double> penetration;
  std::string summary;
  std::string trace_out;
  std::string bsm_trace;
};

inline int cmd_simulate(const SimulateOptions& o, std::ostream& out, std::ostream& err)
{
  std::vector<std::uint64_t> seeds;
  ExperimentBase base = detail::load_base(o.common, seeds);
  const ControllerKind controller = parse_controller(o.controller);
  if (o.penetration) base.demand.penetration = *o.penetration;
  validate(base.demand);
  if ((!o.trace_out.empty() || !o.bsm_trace.empty()) && seeds.size() != 1) {
    throw ConfigError("seeds", "trace export needs exactly one seed");
  }

  detail::Output csv(o.common.out, out);
  csv.stream() << "seed,controller,penetration,mean_wait_all_s,mean_wait_equipped_s,mean_wait_unequipped_s,"
                  "vehicles_completed,vehicles_generated\n";
  nlohmann::json runs = nlohmann::json::array();
  double sum = 0.0;
  for (auto seed : seeds) {
    DemandConfig demand = base.demand;
    demand.seed = seed;
    SimOptions options;
    options.record_bsm_trace = !o.bsm_trace.empty();
    const auto result = run_simulation(base.geometry, demand, base.dynamics, base.timing, base.channel, controller,
                                       options);
    const auto& m = result.metrics;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%llu,%s,%.3f,%.6f,%.6f,%.6f,%zu,%zu\n", static_cast<unsigned long long>(seed),
                  to_string(controller), demand.penetration, m.mean_wait_all_s, m.mean_wait_equipped_s,
                  m.mean_wait_unequipped_s, m.vehicles_completed, m.vehicles_generated);
    csv.stream() << buf;
    auto j = detail::metrics_json(m);
    j["seed"] = seed;
    runs.push_back(j);
    sum += m.mean_wait_all_s;

    if (!o.trace_out.empty()) {
      detail::Output t(o.trace_out, out);
      write_trace(t.stream(), result.trace.entries());
      t.close();
    }
    if (!o.bsm_trace.empty()) {
      detail::Output t(o.bsm_trace, out);
      write_bsm_trace(t.stream(), result.bsm_trace);
      t.close();
    }
  }
  csv.close();

  std::string summary = o.summary.empty() ? detail::sibling(o.common.out, ".summary.json") : o.summary;
  if (!summary.empty()) {
    nlohmann::json j = {{"controller", to_string(controller)},
                        {"penetration", base.demand.penetration},
                        {"seeds", seeds},
                        {"mean_wait_all_s", sum / static_cast<double>(seeds.size())},
                        {"demand", base.demand},
                        {"dynamics", base.dynamics},
                        {"timing", base.timing},
                        {"runs", runs}};
    detail::write_json(summary, j);
  }
  (void)err;
  return kOk;
}

struct SweepOptions
{
  detail::CommonOptions common;
  std::vector<double> penetrations = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::string aggregate;
  std::string summary;
  unsigned workers = 0;
};

inline int cmd_sweep(const SweepOptions& o, std::ostream& out, std::ostream& err)
{
  std::vector<std::uint64_t> seeds;
  const ExperimentBase base = detail::load_base(o.common, seeds);
  const auto result = sweep_penetration(base, o.penetrations, seeds, o.workers);

  detail::Output rows(o.common.out, out);
  write_sweep_rows(rows.stream(), result);
  rows.close();

  const std::string aggregate = o.aggregate.empty() ? detail::sibling(o.common.out, ".aggregate.csv") : o.aggregate;
  if (!aggregate.empty()) {
    detail::Output agg(aggregate, out);
    write_sweep_aggregate(agg.stream(), result);
    agg.close();
  } else {
    write_sweep_aggregate(err, result);
  }

  nlohmann::json fractions = nlohmann::json::object();
  const bool has_full = std::any_of(o.penetrations.begin(), o.penetrations.end(), [](double p) { return p == 1.0; });
  if (has_full) {
    for (double p : o.penetrations) {
      char key[32];
      std::snprintf(key, sizeof key, "%.3f", p);
      const double f = improvement_fraction(result, p);
      fractions[key] = std::isnan(f) ? nlohmann::json() : nlohmann::json(f);
    }
  }
  const std::string summary = o.summary.empty() ? detail::sibling(o.common.out, ".summary.json") : o.summary;
  if (!summary.empty()) {
    nlohmann::json j = {{"penetrations", o.penetrations}, {"seeds", seeds}, {"improvement_fraction", fractions}};
    if (fractions.contains("0.200")) j["improvement_fraction_at_0_2"] = fractions["0.200"];
    detail::write_json(summary, j);
  }
  return kOk;
}

struct ChannelOptions
{
  std::string channel;
  std::vector<double> distances = {25, 50, 75, 100, 125, 150};
  std::size_t samples = 10000;
  std::uint64_t seed = 1;
  std::string out = "-";
};

inline int cmd_channel(const ChannelOptions& o, std::ostream& out)
{
  ChannelModel c;
  if (!o.channel.empty()) c = load_json_file<ChannelModel>(o.channel, "channel");
  try {
    validate(c);
    for (double d : o.distances) reception_probability(c, d);
  } catch (const ChannelError& e) {
    throw ConfigError("channel", e.what());
  }
  if (o.samples == 0) throw ConfigError("samples", "must be >= 1");
  detail::Output csv(o.out, out);
  write_channel_curve(csv.stream(), c, o.distances, o.samples, o.seed);
  csv.close();
  return kOk;
}

struct RsuOptions
{
  std::string config;
  std::string listen, geometry, timing, tcb;
  std::optional<double> stats_interval;
  std::optional<double> run_for;
};

inline int cmd_rsu(const RsuOptions& o, std::ostream& out, std::ostream& err)
{
  RsuConfig cfg;
  if (!o.config.empty()) cfg = load_json_file<RsuConfig>(o.config, "config");
  if (!o.listen.empty()) cfg.listen = parse_endpoint(o.listen, "listen_endpoint");
  if (!o.geometry.empty()) cfg.geometry_path = o.geometry;
  if (!o.timing.empty()) cfg.timing = load_json_file<SignalTiming>(o.timing, "timing");
  if (!o.tcb.empty()) cfg.tcb_sink = o.tcb;
  if (o.stats_interval) cfg.stats_interval_s = *o.stats_interval;
  validate(cfg);

  std::unique_ptr<TcbSink> sink;
  if (cfg.tcb_sink == "stdout") {
    sink = std::make_unique<StreamTcbSink>(out);
  } else {
    sink = std::make_unique<TcpTcbSink>(parse_endpoint(cfg.tcb_sink, "tcb_sink"));
  }
  RsuService service(cfg, *sink, err);
  err << "listening on " << cfg.listen.host << ":" << service.port() << '\n' << std::flush;

  detail::g_interrupted = 0;
  auto previous_int = std::signal(SIGINT, detail::on_signal);
  auto previous_term = std::signal(SIGTERM, detail::on_signal);
  std::jthread loop([&](std::stop_token st) { service.run(st); });
  const auto started = SteadyClock::now();
  while (!detail::g_interrupted) {
    if (o.run_for && SteadyClock::now() - started >= std::chrono::duration<double>(*o.run_for)) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  loop.request_stop();
  loop.join();
  std::signal(SIGINT, previous_int);
  std::signal(SIGTERM, previous_term);
  err << format_stats(service.counters()) << " dropped=" << service.counters().dropped << '\n';
  return kOk;
}

struct ReplayOptions
{
  std::string trace;
  std::string endpoint = "127.0.0.1:47000";
};

inline int cmd_replay(const ReplayOptions& o, std::ostream& err)
{
  const Endpoint to = parse_endpoint(o.endpoint, "endpoint");
  std::ifstream in(o.trace);
  if (!in) throw ConfigError("trace", "cannot open '" + o.trace + "'");
  const auto lines = read_bsm_trace(in);
  const std::size_t sent = replay_trace(lines, to);
  err << "sent " << sent << " datagrams to " << to.to_string() << '\n';
  return kOk;
}

/// Entry point of the dsrc_atl tool; returns the process exit status.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
  CLI::App app{"DSRC-actuated traffic lights: simulation, analysis and roadside service"};
  app.require_subcommand(1);

  SimulateOptions sim;
  auto* s = app.add_subcommand("simulate", "run the closed-loop simulator once per seed");
  detail::add_common(*s, sim.common);
  s->add_option("--controller", sim.controller, "atl|pretimed|vtl");
  s->add_option("--penetration", sim.penetration, "equipped fraction in [0, 1]");
  s->add_option("--summary", sim.summary, "summary JSON path");
  s->add_option("--trace-out", sim.trace_out, "command trace output path");
  s->add_option("--bsm-trace", sim.bsm_trace, "received BSM datagram trace output path");

  SweepOptions sweep;
  auto* w = app.add_subcommand("sweep", "waiting time against penetration for atl, pretimed and vtl");
  detail::add_common(*w, sweep.common);
  w->add_option("--penetrations", sweep.penetrations, "comma separated penetrations")->delimiter(',');
  w->add_option("--aggregate", sweep.aggregate, "aggregate CSV path");
  w->add_option("--summary", sweep.summary, "summary JSON path");
  w->add_option("--workers", sweep.workers, "worker threads, 0 for all cores");

  ChannelOptions chan;
  auto* c = app.add_subcommand("channel", "reception curve and Monte Carlo inter-packet gaps");
  c->add_option("--channel", chan.channel, "channel model JSON");
  c->add_option("--distances", chan.distances, "comma separated distances in meters")->delimiter(',');
  c->add_option("--samples", chan.samples, "gaps measured per distance");
  c->add_option("--seed", chan.seed, "random seed");
  c->add_option("--out", chan.out, "output CSV path, '-' for standard output");

  RsuOptions rsu;
  auto* r = app.add_subcommand("rsu", "live roadside service");
  r->add_option("--config", rsu.config, "service config JSON");
  r->add_option("--listen", rsu.listen, "datagram endpoint host:port");
  r->add_option("--geometry", rsu.geometry, "intersection geometry JSON");
  r->add_option("--timing", rsu.timing, "signal timing JSON");
  r->add_option("--tcb", rsu.tcb, "'stdout' or host:port");
  r->add_option("--stats-interval", rsu.stats_interval, "seconds between STATS lines");
  r->add_option("--run-for", rsu.run_for, "stop after this many seconds");

  ReplayOptions replay;
  auto* p = app.add_subcommand("replay", "send a recorded datagram trace in real time");
  p->add_option("--trace", replay.trace, "trace file")->required();
  p->add_option("--endpoint", replay.endpoint, "destination host:port");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kConfigError;
  }

  try {
    if (*s) return cmd_simulate(sim, out, err);
    if (*w) return cmd_sweep(sweep, out, err);
    if (*c) return cmd_channel(chan, out);
    if (*r) return cmd_rsu(rsu, out, err);
    if (*p) return cmd_replay(replay, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const TraceParseError& e) {
    err << "trace error: " << e.what() << '\n';
    return kConfigError;
  } catch (const GeometryError& e) {
    err << "config error: geometry: " << e.what() << '\n';
    return kConfigError;
  } catch (const SignalError& e) {
    err << "config error: timing: " << e.what() << '\n';
    return kConfigError;
  } catch (const ChannelError& e) {
    err << "config error: channel: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kRuntimeError;
}

}  // namespace dsrc_atl::cli
