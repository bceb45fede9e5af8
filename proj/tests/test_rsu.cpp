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

#include <gtest/gtest.h>

#include <random>
#include <sstream>
#include <thread>

#include "dsrc_atl/rsu_service.hpp"

using namespace dsrc_atl;
using namespace std::chrono_literals;

namespace
{

// Frame of a vehicle `distance_m` upstream of approach `index`'s stop line.
std::vector<std::uint8_t> frame_at(std::size_t index, double distance_m, std::uint32_t id, std::uint64_t time_ms,
                                   double speed_ms = 8.0)
{
  const auto g = default_geometry();
  const Approach& a = g.approaches.at(index);
  const GeoPoint p = destination_point(a.stop_line, wrap_degrees(a.inbound_heading + 180.0), distance_m);
  const auto f = encode_bsm(bsm_from_snapshot({p.lat, p.lon, speed_ms, a.inbound_heading, id, time_ms}));
  return {f.begin(), f.end()};
}

std::vector<std::uint8_t> garbage(std::mt19937_64& rng)
{
  std::vector<std::uint8_t> f(rng() % 40);
  for (auto& b : f) b = static_cast<std::uint8_t>(rng());
  if (f.size() == kBsmFrameSize) f[0] = static_cast<std::uint8_t>(kBsmMagic ^ 0xFF);
  return f;
}

Detection det(std::uint32_t id, double distance, std::uint64_t time_ms)
{
  return {2, distance, 5.0, id, time_ms};
}

}  // namespace

// Tracker ---------------------------------------------------------------

TEST(DetectionTracker, KeepsFreshestPerVehicle)
{
  DetectionTracker t;
  t.update(det(7, 40.0, 1000), 1000);
  t.update(det(7, 45.0, 900), 1100);  // out of order, ignored
  ASSERT_EQ(t.size(), 1u);
  EXPECT_DOUBLE_EQ(t.within(100.0).at(0).distance_to_stop_m, 40.0);
  t.update(det(7, 30.0, 1200), 1200);
  EXPECT_DOUBLE_EQ(t.within(100.0).at(0).distance_to_stop_m, 30.0);
  t.update(det(8, 70.0, 1200), 1200);
  EXPECT_EQ(t.size(), 2u);
  EXPECT_EQ(t.within(50.0).size(), 1u);
}

TEST(DetectionTracker, ForgetOnlyForNewerMessages)
{
  DetectionTracker t;
  t.update(det(3, 10.0, 5000), 5000);
  t.forget(3, 4900);
  EXPECT_EQ(t.size(), 1u);
  t.forget(3, 5100);
  EXPECT_EQ(t.size(), 0u);
  t.forget(99, 1);
}

TEST(DetectionTracker, EvictsByReceptionAge)
{
  DetectionTracker t;
  t.update(det(1, 10.0, 0), 0);
  t.update(det(2, 10.0, 0), 600);
  t.evict_older_than(1000, 1000);
  EXPECT_EQ(t.size(), 2u);
  t.evict_older_than(1001, 1000);
  EXPECT_EQ(t.size(), 1u);
  t.evict_older_than(1601, 1000);
  EXPECT_EQ(t.size(), 0u);
}

// Engine ----------------------------------------------------------------

TEST(RsuEngine, IdleEngineFollowsFixedPlan)
{
  RsuEngine e(default_geometry(), SignalTiming{});
  SignalState s = SignalState::initial(SignalTiming{});
  EXPECT_EQ(e.initial_command(), (PhaseCommand{1, 0}));
  for (int k = 0; k < 1500; ++k) {
    e.tick_frames({}, 0.1);
    s = pretimed_step(s, SignalTiming{}, 0.1).state;
    ASSERT_EQ(e.state(), s) << k;
  }
  EXPECT_GT(e.counters().commands, 0u);
  EXPECT_EQ(e.counters().received, 0u);
}

TEST(RsuEngine, MinorVehicleEndsMajorGreen)
{
  RsuEngine e(default_geometry(), SignalTiming{});
  std::vector<PhaseCommand> commands;
  for (int k = 1; k <= 200; ++k) {
    const std::int64_t now = k * 100;
    std::vector<std::vector<std::uint8_t>> frames;
    if (now >= 6000 && now <= 8000) frames.push_back(frame_at(1, 30.0, 42, static_cast<std::uint64_t>(now), 0.0));
    if (auto c = e.tick_frames(frames, 0.1)) commands.push_back(*c);
  }
  ASSERT_FALSE(commands.empty());
  // detected at 6.0 s; yellow and all red follow before phase 2 opens
  EXPECT_EQ(commands.front(), (PhaseCommand{2, 10000}));
  EXPECT_EQ(e.counters().detections, 21u);
  EXPECT_EQ(e.counters().filtered, 0u);
  EXPECT_TRUE(verify_trace(e.trace().entries(), SignalTiming{}).empty());
}

TEST(RsuEngine, AgreesWithControllerFedDirectly)
{
  // Oracle: decode and classify outside the engine, then drive atl_step.
  const auto g = default_geometry();
  const SignalTiming t;
  const auto binding = phase_binding(g, t);
  RsuEngine e(g, t);
  SignalState s = SignalState::initial(t);
  std::map<std::uint32_t, std::pair<Detection, std::int64_t>> oracle;
  std::mt19937_64 rng(11);
  for (int k = 1; k <= 3000; ++k) {
    const std::int64_t now = k * 100;
    std::vector<std::vector<std::uint8_t>> frames;
    if (rng() % 4 == 0) {
      const auto index = static_cast<std::size_t>(rng() % 2);
      const double dist = std::uniform_real_distribution<double>(0.0, 120.0)(rng);
      frames.push_back(frame_at(index, dist, static_cast<std::uint32_t>(rng() % 5), static_cast<std::uint64_t>(now)));
    }
    for (const auto& f : frames) {
      const auto m = std::get<BasicSafetyMessage>(decode_bsm(f));
      if (auto d = classify_bsm(m, g)) {
        oracle[m.temp_id] = {*d, now};
      } else {
        oracle.erase(m.temp_id);
      }
    }
    std::erase_if(oracle, [&](const auto& kv) { return now - kv.second.second > 1000; });
    std::vector<Detection> active;
    for (const auto& [id, entry] : oracle) {
      if (entry.first.distance_to_stop_m <= g.detection_radius_m) active.push_back(entry.first);
    }
    s = atl_step(s, t, binding, active, 0.1).state;
    e.tick_frames(frames, 0.1);
    ASSERT_EQ(e.state(), s) << "tick " << k;
  }
}

TEST(RsuEngine, MalformedBurstIsCountedAndIgnored)
{
  RsuEngine e(default_geometry(), SignalTiming{});
  std::mt19937_64 rng(5);
  std::vector<std::vector<std::uint8_t>> burst;
  for (int i = 0; i < 1000; ++i) burst.push_back(garbage(rng));
  EXPECT_FALSE(e.tick_frames(burst, 0.1));
  for (int k = 0; k < 50; ++k) EXPECT_FALSE(e.tick_frames({}, 0.1));
  const auto& c = e.counters();
  EXPECT_EQ(c.received, 1000u);
  EXPECT_EQ(c.malformed, 1000u);
  EXPECT_EQ(c.detections + c.filtered, 0u);
  EXPECT_EQ(c.commands, 0u);
}

TEST(RsuEngine, FiltersVehiclesOutsideTheArea)
{
  RsuEngine e(default_geometry(), SignalTiming{});
  const std::vector<std::vector<std::uint8_t>> frames{frame_at(1, 250.0, 1, 100), frame_at(1, 80.0, 2, 100)};
  e.tick_frames(frames, 0.1);
  EXPECT_EQ(e.counters().filtered, 1u);
  EXPECT_EQ(e.counters().detections, 1u);
  // tracked but beyond the detection radius
  EXPECT_EQ(e.tracker().size(), 1u);
  EXPECT_TRUE(e.tracker().within(e.geometry().detection_radius_m).empty());
}

TEST(RsuEngine, StaleDetectionsExpire)
{
  RsuEngine e(default_geometry(), SignalTiming{}, 1.0);
  const std::vector<std::vector<std::uint8_t>> one{frame_at(1, 20.0, 9, 100)};
  e.tick_frames(one, 0.1);
  for (int k = 0; k < 10; ++k) e.tick_frames({}, 0.1);
  EXPECT_EQ(e.tracker().size(), 1u);
  e.tick_frames({}, 0.1);
  EXPECT_EQ(e.tracker().size(), 0u);
}

TEST(RsuEngine, Deterministic)
{
  auto run = [] {
    RsuEngine e(default_geometry(), SignalTiming{});
    std::mt19937_64 rng(3);
    for (int k = 1; k <= 2000; ++k) {
      std::vector<std::vector<std::uint8_t>> frames;
      if (rng() % 3 == 0) frames.push_back(frame_at(rng() % 2, 40.0, 1, static_cast<std::uint64_t>(k * 100)));
      if (rng() % 7 == 0) frames.push_back(garbage(rng));
      e.tick_frames(frames, 0.1);
    }
    return std::pair(e.trace(), e.counters());
  };
  EXPECT_EQ(run(), run());
}

// Formats ---------------------------------------------------------------

TEST(RsuFormats, PhaseAndStatsLines)
{
  EXPECT_EQ(format_phase_command({2, 1234}), "PHASE 2 1234\n");
  RsuCounters c{10, 2, 3, 5, 1, 0};
  EXPECT_EQ(format_stats(c), "STATS received=10 malformed=2 filtered=3 detections=5 commands=1");
}

TEST(RsuFormats, Endpoint)
{
  const auto e = parse_endpoint("127.0.0.1:47000");
  EXPECT_EQ(e.host, "127.0.0.1");
  EXPECT_EQ(e.port, 47000);
  EXPECT_EQ(e.to_string(), "127.0.0.1:47000");
  for (const char* bad : {"", "localhost", ":80", "host:", "host:70000", "host:12a", "host:-1"}) {
    EXPECT_THROW(parse_endpoint(bad), ConfigError) << bad;
  }
  try {
    parse_endpoint("x", "tcb_sink");
    FAIL();
  } catch (const ConfigError& err) {
    EXPECT_EQ(err.field(), "tcb_sink");
  }
}

TEST(RsuFormats, ConfigFromJson)
{
  const auto c = nlohmann::json::parse(R"({"listen_endpoint": "127.0.0.1:5000", "tcb_sink": "10.0.0.2:9000",
                                           "stats_interval_s": 2.5, "timing": {"min_green_s": 6.0}})")
                     .get<RsuConfig>();
  EXPECT_EQ(c.listen.port, 5000);
  EXPECT_EQ(c.tcb_sink, "10.0.0.2:9000");
  EXPECT_DOUBLE_EQ(c.stats_interval_s, 2.5);
  EXPECT_DOUBLE_EQ(c.timing.min_green_s, 6.0);
  EXPECT_NO_THROW(validate(c));

  RsuConfig bad;
  bad.stats_interval_s = 0.0;
  EXPECT_THROW(validate(bad), ConfigError);
  bad = {};
  bad.tcb_sink = "nowhere";
  EXPECT_THROW(validate(bad), ConfigError);
  bad = {};
  bad.timing.yellow_s = -1.0;
  EXPECT_THROW(validate(bad), ConfigError);
}

// Traces ----------------------------------------------------------------

TEST(BsmTrace, RoundTripsInOffsetOrder)
{
  std::vector<BsmTraceRecord> records;
  for (std::int64_t off : {100, 30, 170, 170, 250}) {
    BsmTraceRecord r;
    r.offset_ms = off;
    const auto f = frame_at(0, 20.0, static_cast<std::uint32_t>(off), static_cast<std::uint64_t>(off));
    std::copy(f.begin(), f.end(), r.frame.begin());
    records.push_back(r);
  }
  std::stringstream s;
  write_bsm_trace(s, records);
  const auto lines = read_bsm_trace(s);
  ASSERT_EQ(lines.size(), records.size());
  std::vector<std::int64_t> offsets;
  for (const auto& l : lines) offsets.push_back(l.offset_ms);
  EXPECT_EQ(offsets, (std::vector<std::int64_t>{30, 100, 170, 170, 250}));
  EXPECT_EQ(lines[0].bytes, std::vector<std::uint8_t>(records[1].frame.begin(), records[1].frame.end()));
}

TEST(BsmTrace, AcceptsCommentsBlanksAndCommas)
{
  std::istringstream in("# header\n\n0 b501\n5,00ff\r\n  7\tAB  \n");
  const auto lines = read_bsm_trace(in);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[1], (TraceLine{5, {0x00, 0xFF}}));
  EXPECT_EQ(lines[2].bytes, std::vector<std::uint8_t>{0xAB});
}

TEST(BsmTrace, ErrorsNameTheLine)
{
  const std::pair<const char*, std::size_t> cases[] = {
      {"0 b5\n10\n", 2},         {"0 b5 extra\n", 1},  {"# c\nx b5\n", 2}, {"0 b5\n1 zz\n", 2},
      {"5 b5\n4 b5\n", 2},       {"-3 b5\n", 1},       {"0 abc\n", 1},     {"1.5 b5\n", 1},
  };
  for (const auto& [text, line] : cases) {
    std::istringstream in(text);
    try {
      read_bsm_trace(in);
      ADD_FAILURE() << text;
    } catch (const TraceParseError& e) {
      EXPECT_EQ(e.line(), line) << text;
      EXPECT_NE(std::string(e.what()).find("line " + std::to_string(line)), std::string::npos);
    }
  }
}

// Queue and sinks -------------------------------------------------------

TEST(DatagramQueue, BoundaryLimitAndOverflow)
{
  DatagramQueue q(4);
  const auto t0 = SteadyClock::now();
  for (int i = 0; i < 6; ++i) q.push({t0 + std::chrono::milliseconds(i), {static_cast<std::uint8_t>(i)}});
  EXPECT_EQ(q.take_overflow(), 2u);
  EXPECT_EQ(q.take_overflow(), 0u);
  std::vector<std::vector<std::uint8_t>> out;
  EXPECT_EQ(q.drain_before(t0 + 3ms, 2, out), 1u);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[1], std::vector<std::uint8_t>{1});
  out.clear();
  EXPECT_EQ(q.drain_before(t0 + 10ms, 10, out), 0u);
  EXPECT_EQ(out, (std::vector<std::vector<std::uint8_t>>{{3}}));
}

TEST(TcbSink, BrokenStreamIsLoggedNotFatal)
{
  std::ostringstream dead;
  dead.setstate(std::ios::badbit);
  StreamTcbSink sink(dead);
  std::ostringstream log;
  EXPECT_FALSE(emit_phase_command({1, 0}, sink, log));
  EXPECT_NE(log.str().find("error"), std::string::npos);

  std::ostringstream good;
  StreamTcbSink ok(good);
  EXPECT_TRUE(emit_phase_command({2, 400}, ok, log));
  EXPECT_EQ(good.str(), "PHASE 2 400\n");
}

namespace
{

// Minimal TCP listener on an ephemeral loopback port.
struct TcpListener
{
  detail::FileDescriptor fd{::socket(AF_INET, SOCK_STREAM, 0)};
  std::uint16_t port = 0;

  TcpListener()
  {
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    EXPECT_EQ(::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr), 0);
    EXPECT_EQ(::listen(fd.get(), 4), 0);
    socklen_t len = sizeof addr;
    ::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&addr), &len);
    port = ntohs(addr.sin_port);
  }

  std::string accept_and_read(std::size_t bytes)
  {
    detail::FileDescriptor c(::accept(fd.get(), nullptr, nullptr));
    std::string got;
    char buf[256];
    while (got.size() < bytes) {
      const ssize_t n = ::recv(c.get(), buf, sizeof buf, 0);
      if (n <= 0) break;
      got.append(buf, static_cast<std::size_t>(n));
    }
    return got;
  }
};

}  // namespace

TEST(TcbSink, TcpDeliversLines)
{
  TcpListener listener;
  TcpTcbSink sink({"127.0.0.1", listener.port});
  std::ostringstream log;
  EXPECT_TRUE(emit_phase_command({1, 0}, sink, log));
  EXPECT_TRUE(emit_phase_command({2, 44000}, sink, log));
  EXPECT_EQ(listener.accept_and_read(24), "PHASE 1 0\nPHASE 2 44000\n");
}

TEST(TcbSink, TcpRefusedConnectionIsReported)
{
  std::uint16_t port;
  {
    TcpListener gone;
    port = gone.port;
  }
  TcpTcbSink sink({"127.0.0.1", port});
  std::ostringstream log;
  EXPECT_FALSE(emit_phase_command({1, 0}, sink, log));
  EXPECT_NE(log.str().find("not delivered"), std::string::npos);
}

TEST(UdpSocket, LoopbackDatagram)
{
  UdpSocket rx;
  rx.bind({"127.0.0.1", 0});
  ASSERT_NE(rx.local_port(), 0);
  UdpSocket tx;
  const std::vector<std::uint8_t> payload{1, 2, 3};
  tx.send_to(payload, detail::resolve_ipv4({"127.0.0.1", rx.local_port()}));
  EXPECT_EQ(rx.receive(1000ms), payload);
  EXPECT_FALSE(rx.receive(10ms));
}

// Live service ----------------------------------------------------------

namespace
{

RsuConfig loopback_config()
{
  RsuConfig c;
  c.listen = {"127.0.0.1", 0};
  c.stats_interval_s = 1.0;
  return c;
}

}  // namespace

TEST(RsuService, ReplayedTraceDrivesCommands)
{
  std::ostringstream tcb, log;
  StreamTcbSink sink(tcb);
  RsuService service(loopback_config(), sink, log);

  // minor vehicle parked 20 m from the line from 6.0 s to 8.0 s
  std::vector<TraceLine> lines;
  for (std::int64_t t = 5950; t <= 7950; t += 100) lines.push_back({t, frame_at(1, 20.0, 5, t, 0.0)});

  const auto epoch = SteadyClock::now() + 200ms;
  std::jthread rsu([&](std::stop_token st) { service.run(st, epoch); });
  EXPECT_EQ(replay_trace(lines, {"127.0.0.1", service.port()}, epoch), lines.size());
  std::this_thread::sleep_until(epoch + 11'500ms);
  rsu.request_stop();
  rsu.join();

  const auto commands = service.commands();
  ASSERT_GE(commands.size(), 2u);
  EXPECT_EQ(commands[0], (PhaseCommand{1, 0}));
  EXPECT_EQ(commands[1], (PhaseCommand{2, 10000}));
  const auto c = service.counters();
  EXPECT_EQ(c.received, lines.size());
  EXPECT_EQ(c.detections, lines.size());
  EXPECT_EQ(c.malformed, 0u);
  EXPECT_NE(tcb.str().find("PHASE 2 10000\n"), std::string::npos);
  EXPECT_NE(log.str().find("STATS received="), std::string::npos);
  EXPECT_TRUE(verify_trace(service.trace().entries(), SignalTiming{}).empty());
}

TEST(RsuService, SurvivesMalformedFloodAndBrokenSink)
{
  std::ostringstream dead, log;
  dead.setstate(std::ios::badbit);
  StreamTcbSink sink(dead);
  RsuService service(loopback_config(), sink, log);
  std::jthread rsu([&](std::stop_token st) { service.run(st); });

  std::mt19937_64 rng(17);
  UdpSocket tx;
  const auto to = detail::resolve_ipv4({"127.0.0.1", service.port()});
  for (int i = 0; i < 1000; ++i) {
    auto f = garbage(rng);
    if (f.empty()) f.push_back(0);
    tx.send_to(f, to);
    if (i % 100 == 99) std::this_thread::sleep_for(2ms);
  }
  std::this_thread::sleep_for(600ms);
  const std::int64_t before = service.ticks();
  std::this_thread::sleep_for(300ms);
  EXPECT_GT(service.ticks(), before);
  rsu.request_stop();
  rsu.join();

  const auto c = service.counters();
  EXPECT_EQ(c.received, 1000u);
  EXPECT_EQ(c.malformed, 1000u);
  EXPECT_EQ(c.commands, 0u);
  EXPECT_EQ(c.dropped, 0u);
  EXPECT_NE(log.str().find("not delivered"), std::string::npos);
}

TEST(RsuService, BackpressureIsCounted)
{
  RsuConfig cfg = loopback_config();
  cfg.max_datagrams_per_tick = 10;
  cfg.queue_capacity = 50;
  cfg.tick_s = 0.5;
  std::ostringstream tcb, log;
  StreamTcbSink sink(tcb);
  RsuService service(cfg, sink, log);
  const auto epoch = SteadyClock::now() + 100ms;
  std::jthread rsu([&](std::stop_token st) { service.run(st, epoch); });

  std::this_thread::sleep_until(epoch + 50ms);
  UdpSocket tx;
  const auto to = detail::resolve_ipv4({"127.0.0.1", service.port()});
  for (int i = 0; i < 200; ++i) tx.send_to(std::vector<std::uint8_t>{0x00}, to);
  std::this_thread::sleep_until(epoch + 1200ms);
  rsu.request_stop();
  rsu.join();

  const auto c = service.counters();
  // every datagram is either processed, discarded past the per-tick limit or refused by the queue
  EXPECT_EQ(c.malformed, 10u);
  EXPECT_EQ(c.dropped, 190u);
  EXPECT_EQ(c.received, 50u);
}

TEST(RsuService, RejectsBadConfig)
{
  std::ostringstream out;
  StreamTcbSink sink(out);
  RsuConfig c = loopback_config();
  c.tick_s = 0.0;
  EXPECT_THROW(RsuService(c, sink, out), ConfigError);
  c = loopback_config();
  c.geometry_path = "/nonexistent/geometry.json";
  EXPECT_THROW(RsuService(c, sink, out), ConfigError);
}
