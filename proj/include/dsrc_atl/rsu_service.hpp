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

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstdint>
#include <deque>
#include <istream>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <stop_token>
#include <string>
#include <system_error>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsrc_atl/config.hpp"
#include "dsrc_atl/rsu_engine.hpp"

namespace dsrc_atl
{

using SteadyClock = std::chrono::steady_clock;

struct Endpoint
{
  std::string host;
  std::uint16_t port = 0;

  std::string to_string() const { return host + ":" + std::to_string(port); }

  friend bool operator==(const Endpoint&, const Endpoint&) = default;
};

/// "host:port"; port may be 0 to let the system choose when binding.
inline Endpoint parse_endpoint(const std::string& text, const std::string& field = "endpoint")
{
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == text.size()) {
    throw ConfigError(field, "expected host:port, got '" + text + "'");
  }
  Endpoint e;
  e.host = text.substr(0, colon);
  const std::string port = text.substr(colon + 1);
  if (port.find_first_not_of("0123456789") != std::string::npos || port.size() > 5) {
    throw ConfigError(field, "invalid port in '" + text + "'");
  }
  const unsigned long value = std::stoul(port);
  if (value > 65535) throw ConfigError(field, "port out of range in '" + text + "'");
  e.port = static_cast<std::uint16_t>(value);
  return e;
}

struct RsuConfig
{
  Endpoint listen{"0.0.0.0", 47000};
  std::string geometry_path;  // empty selects the built-in intersection
  SignalTiming timing;
  std::string tcb_sink = "stdout";  // or host:port of a stream listener
  double stats_interval_s = 10.0;
  double staleness_s = 1.0;
  double tick_s = 0.1;
  std::size_t max_datagrams_per_tick = 1000;
  std::size_t queue_capacity = 16384;
};

inline void validate(const RsuConfig& c)
{
  if (c.tcb_sink != "stdout") parse_endpoint(c.tcb_sink, "tcb_sink");
  if (!(c.stats_interval_s > 0.0)) throw ConfigError("stats_interval_s", "must be > 0");
  if (!(c.staleness_s > 0.0)) throw ConfigError("staleness_s", "must be > 0");
  if (!(c.tick_s > 0.0)) throw ConfigError("tick_s", "must be > 0");
  if (c.max_datagrams_per_tick == 0) throw ConfigError("max_datagrams_per_tick", "must be > 0");
  if (c.queue_capacity == 0) throw ConfigError("queue_capacity", "must be > 0");
  try {
    validate(c.timing);
  } catch (const SignalError& e) {
    throw ConfigError("timing", e.what());
  }
}

inline void from_json(const nlohmann::json& j, RsuConfig& c)
{
  RsuConfig d;
  c.listen = parse_endpoint(j.value("listen_endpoint", d.listen.to_string()), "listen_endpoint");
  c.geometry_path = j.value("geometry_path", d.geometry_path);
  c.timing = j.contains("timing") ? j.at("timing").get<SignalTiming>() : d.timing;
  c.tcb_sink = j.value("tcb_sink", d.tcb_sink);
  c.stats_interval_s = j.value("stats_interval_s", d.stats_interval_s);
  c.staleness_s = j.value("staleness_s", d.staleness_s);
  c.tick_s = j.value("tick_s", d.tick_s);
  c.max_datagrams_per_tick = j.value("max_datagrams_per_tick", d.max_datagrams_per_tick);
  c.queue_capacity = j.value("queue_capacity", d.queue_capacity);
}

inline std::string format_phase_command(const PhaseCommand& cmd)
{
  return "PHASE " + std::to_string(cmd.phase_id) + " " + std::to_string(cmd.issue_time_ms) + "\n";
}

inline std::string format_stats(const RsuCounters& c)
{
  std::ostringstream s;
  s << "STATS received=" << c.received << " malformed=" << c.malformed << " filtered=" << c.filtered
    << " detections=" << c.detections << " commands=" << c.commands;
  return s.str();
}

// Sockets ----------------------------------------------------------------

namespace detail
{

inline sockaddr_in resolve_ipv4(const Endpoint& e)
{
  addrinfo hints{};
  hints.ai_family = AF_INET;
  addrinfo* res = nullptr;
  const int rc = ::getaddrinfo(e.host.c_str(), nullptr, &hints, &res);
  if (rc != 0 || res == nullptr) {
    throw std::runtime_error("cannot resolve '" + e.host + "': " + ::gai_strerror(rc));
  }
  sockaddr_in addr = *reinterpret_cast<const sockaddr_in*>(res->ai_addr);
  ::freeaddrinfo(res);
  addr.sin_port = htons(e.port);
  return addr;
}

class FileDescriptor
{
public:
  FileDescriptor() = default;
  explicit FileDescriptor(int fd) : fd_(fd) {}
  FileDescriptor(FileDescriptor&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  FileDescriptor& operator=(FileDescriptor&& o) noexcept
  {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~FileDescriptor() { reset(); }

  int get() const { return fd_; }
  explicit operator bool() const { return fd_ >= 0; }
  void reset()
  {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

private:
  int fd_ = -1;
};

}  // namespace detail

/// Bound datagram socket.
class UdpSocket
{
public:
  UdpSocket() : fd_(::socket(AF_INET, SOCK_DGRAM, 0))
  {
    if (!fd_) throw std::system_error(errno, std::generic_category(), "socket");
  }

  void bind(const Endpoint& e)
  {
    const int one = 1;
    ::setsockopt(fd_.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    const int rcvbuf = 4 << 20;
    ::setsockopt(fd_.get(), SOL_SOCKET, SO_RCVBUF, &rcvbuf, sizeof rcvbuf);
    sockaddr_in addr = detail::resolve_ipv4(e);
    if (::bind(fd_.get(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
      throw std::system_error(errno, std::generic_category(), "bind " + e.to_string());
    }
  }

  std::uint16_t local_port() const
  {
    sockaddr_in addr{};
    socklen_t len = sizeof addr;
    ::getsockname(fd_.get(), reinterpret_cast<sockaddr*>(&addr), &len);
    return ntohs(addr.sin_port);
  }

  void send_to(std::span<const std::uint8_t> bytes, const sockaddr_in& to) const
  {
    if (::sendto(fd_.get(), bytes.data(), bytes.size(), 0, reinterpret_cast<const sockaddr*>(&to), sizeof to) < 0) {
      throw std::system_error(errno, std::generic_category(), "sendto");
    }
  }

  /// Waits up to `timeout` for one datagram.
  std::optional<std::vector<std::uint8_t>> receive(std::chrono::milliseconds timeout) const
  {
    pollfd p{fd_.get(), POLLIN, 0};
    if (::poll(&p, 1, static_cast<int>(timeout.count())) <= 0) return std::nullopt;
    std::vector<std::uint8_t> buf(2048);
    const ssize_t n = ::recv(fd_.get(), buf.data(), buf.size(), 0);
    if (n < 0) return std::nullopt;
    buf.resize(static_cast<std::size_t>(n));
    return buf;
  }

private:
  detail::FileDescriptor fd_;
};

// Receive queue ----------------------------------------------------------

struct Datagram
{
  SteadyClock::time_point received;
  std::vector<std::uint8_t> bytes;
};

/// FIFO shared by the receiver and the controller tick. Pushes beyond the
/// capacity are refused and counted.
class DatagramQueue
{
public:
  explicit DatagramQueue(std::size_t capacity) : capacity_(capacity) {}

  bool push(Datagram d)
  {
    std::lock_guard lock(mutex_);
    if (items_.size() >= capacity_) {
      ++overflow_;
      return false;
    }
    items_.push_back(std::move(d));
    return true;
  }

  /**
   * Removes every datagram received before `boundary`. The first `limit` go
   * to `out`; the number discarded beyond that is returned.
   */
  std::size_t drain_before(SteadyClock::time_point boundary, std::size_t limit, std::vector<std::vector<std::uint8_t>>& out)
  {
    std::lock_guard lock(mutex_);
    std::size_t discarded = 0;
    while (!items_.empty() && items_.front().received < boundary) {
      if (out.size() < limit) {
        out.push_back(std::move(items_.front().bytes));
      } else {
        ++discarded;
      }
      items_.pop_front();
    }
    return discarded;
  }

  std::uint64_t take_overflow()
  {
    std::lock_guard lock(mutex_);
    return std::exchange(overflow_, 0);
  }

private:
  std::mutex mutex_;
  std::deque<Datagram> items_;
  std::size_t capacity_;
  std::uint64_t overflow_ = 0;
};

// TCB sinks --------------------------------------------------------------

class TcbSink
{
public:
  virtual ~TcbSink() = default;
  /// Writes one complete line or throws.
  virtual void write_line(const std::string& line) = 0;
};

class StreamTcbSink : public TcbSink
{
public:
  explicit StreamTcbSink(std::ostream& out) : out_(out) {}

  void write_line(const std::string& line) override
  {
    out_ << line << std::flush;
    if (!out_) throw std::runtime_error("TCB stream is not writable");
  }

private:
  std::ostream& out_;
};

/// Stream connection to a TCB bridge, reconnecting on the next line after a failure.
class TcpTcbSink : public TcbSink
{
public:
  explicit TcpTcbSink(Endpoint e) : endpoint_(std::move(e)) {}

  void write_line(const std::string& line) override
  {
    if (!fd_) connect();
    std::size_t sent = 0;
    while (sent < line.size()) {
      const ssize_t n = ::send(fd_.get(), line.data() + sent, line.size() - sent, MSG_NOSIGNAL);
      if (n <= 0) {
        const int err = errno;
        fd_.reset();
        throw std::system_error(err, std::generic_category(), "send to " + endpoint_.to_string());
      }
      sent += static_cast<std::size_t>(n);
    }
  }

private:
  void connect()
  {
    detail::FileDescriptor fd(::socket(AF_INET, SOCK_STREAM, 0));
    if (!fd) throw std::system_error(errno, std::generic_category(), "socket");
    const sockaddr_in addr = detail::resolve_ipv4(endpoint_);
    if (::connect(fd.get(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
      throw std::system_error(errno, std::generic_category(), "connect " + endpoint_.to_string());
    }
    fd_ = std::move(fd);
  }

  Endpoint endpoint_;
  detail::FileDescriptor fd_;
};

/// Returns false (after logging) when the sink refused the line.
inline bool emit_phase_command(const PhaseCommand& cmd, TcbSink& sink, std::ostream& log)
{
  try {
    sink.write_line(format_phase_command(cmd));
    return true;
  } catch (const std::exception& e) {
    log << "error: PHASE " << cmd.phase_id << " not delivered: " << e.what() << '\n' << std::flush;
    return false;
  }
}

// Service ----------------------------------------------------------------

inline IntersectionGeometry load_rsu_geometry(const RsuConfig& c)
{
  if (c.geometry_path.empty()) return default_geometry();
  try {
    return load_geometry(c.geometry_path);
  } catch (const GeometryError& e) {
    throw ConfigError("geometry_path", e.what());
  }
}

/**
 * Live roadside loop. A receiver thread queues datagrams with their arrival
 * time; the tick loop runs at start + k * tick_s and hands the engine every
 * datagram that arrived before its tick boundary.
 */
class RsuService
{
public:
  RsuService(const RsuConfig& config, TcbSink& sink, std::ostream& log)
      : config_(config),
        sink_(sink),
        log_(log),
        engine_([&] {
          validate(config);
          return RsuEngine(load_rsu_geometry(config), config.timing, config.staleness_s);
        }()),
        queue_(config.queue_capacity)
  {
    socket_.bind(config.listen);
  }

  std::uint16_t port() const { return socket_.local_port(); }

  /**
   * Runs until `stop` is requested. `start` anchors the tick schedule (and
   * so the logical clock) to a wall-clock instant; it defaults to now. Ticks
   * are processed at boundary + grace so late datagrams still make it.
   */
  void run(std::stop_token stop, std::optional<SteadyClock::time_point> start = std::nullopt)
  {
    const auto tick = std::chrono::duration_cast<SteadyClock::duration>(std::chrono::duration<double>(config_.tick_s));
    const auto grace = tick / 5;
    const auto epoch = start.value_or(SteadyClock::now());
    const std::int64_t stats_every_ms = std::max<std::int64_t>(1, to_ms(config_.stats_interval_s));

    std::jthread receiver([this](std::stop_token st) {
      while (!st.stop_requested()) {
        auto bytes = socket_.receive(std::chrono::milliseconds(20));
        if (bytes) queue_.push({SteadyClock::now(), std::move(*bytes)});
      }
    });

    std::this_thread::sleep_until(epoch);
    publish(engine_.initial_command());

    std::vector<std::vector<std::uint8_t>> frames;
    for (std::int64_t k = 1; !stop.stop_requested(); ++k) {
      const auto boundary = epoch + k * tick;
      std::this_thread::sleep_until(boundary + grace);
      if (stop.stop_requested()) break;
      frames.clear();
      const std::size_t discarded = queue_.drain_before(boundary, config_.max_datagrams_per_tick, frames);
      engine_.counters().dropped += discarded + queue_.take_overflow();
      engine_.counters().received += discarded;
      const auto command = engine_.tick_frames(frames, config_.tick_s);
      if (command) publish(*command);
      {
        std::lock_guard lock(mutex_);
        counters_ = engine_.counters();
        ticks_ = k;
      }
      if (engine_.state().clock_ms % stats_every_ms == 0) log_ << format_stats(engine_.counters()) << '\n' << std::flush;
    }
  }

  RsuCounters counters() const
  {
    std::lock_guard lock(mutex_);
    return counters_;
  }

  std::vector<PhaseCommand> commands() const
  {
    std::lock_guard lock(mutex_);
    return commands_;
  }

  std::int64_t ticks() const
  {
    std::lock_guard lock(mutex_);
    return ticks_;
  }

  /// Valid after run() returns.
  const CommandTrace& trace() const { return engine_.trace(); }

private:
  void publish(const PhaseCommand& cmd)
  {
    emit_phase_command(cmd, sink_, log_);
    std::lock_guard lock(mutex_);
    commands_.push_back(cmd);
  }

  RsuConfig config_;
  TcbSink& sink_;
  std::ostream& log_;
  RsuEngine engine_;
  UdpSocket socket_;
  DatagramQueue queue_;
  mutable std::mutex mutex_;
  RsuCounters counters_;
  std::vector<PhaseCommand> commands_;
  std::int64_t ticks_ = 0;
};

// Datagram traces --------------------------------------------------------

struct TraceLine
{
  std::int64_t offset_ms = 0;
  std::vector<std::uint8_t> bytes;

  friend bool operator==(const TraceLine&, const TraceLine&) = default;
};

class TraceParseError : public std::runtime_error
{
public:
  TraceParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line)
  {
  }

  std::size_t line() const { return line_; }

private:
  std::size_t line_;
};

/**
 * One datagram per line: `<offset_ms> <hex>` (a comma also separates).
 * Blank lines and lines starting with '#' are skipped. Offsets must not
 * decrease. The payload need not be a valid frame.
 */
inline std::vector<TraceLine> read_bsm_trace(std::istream& in)
{
  std::vector<TraceLine> out;
  std::string text;
  for (std::size_t n = 1; std::getline(in, text); ++n) {
    for (char& ch : text) {
      if (ch == ',' || ch == '\t' || ch == '\r') ch = ' ';
    }
    std::istringstream fields(text);
    std::string offset, hex, extra;
    if (!(fields >> offset) || offset.front() == '#') continue;
    if (!(fields >> hex)) throw TraceParseError(n, "missing frame bytes");
    if (fields >> extra) throw TraceParseError(n, "unexpected trailing field '" + extra + "'");
    TraceLine line;
    try {
      std::size_t used = 0;
      line.offset_ms = std::stoll(offset, &used);
      if (used != offset.size() || line.offset_ms < 0) throw std::invalid_argument("offset");
    } catch (const std::exception&) {
      throw TraceParseError(n, "invalid offset '" + offset + "'");
    }
    try {
      line.bytes = from_hex(hex);
    } catch (const std::invalid_argument& e) {
      throw TraceParseError(n, e.what());
    }
    if (!out.empty() && line.offset_ms < out.back().offset_ms) throw TraceParseError(n, "offsets decrease");
    out.push_back(std::move(line));
  }
  return out;
}

/// Records are written in offset order; ties keep their original order.
inline void write_bsm_trace(std::ostream& out, std::span<const BsmTraceRecord> records)
{
  std::vector<const BsmTraceRecord*> sorted;
  sorted.reserve(records.size());
  for (const auto& r : records) sorted.push_back(&r);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const BsmTraceRecord* a, const BsmTraceRecord* b) { return a->offset_ms < b->offset_ms; });
  out << "# offset_ms frame\n";
  for (const auto* r : sorted) out << r->offset_ms << ' ' << to_hex(r->frame) << '\n';
}

/// Sends each line as one datagram at `start + offset_ms`. Returns the number sent.
inline std::size_t replay_trace(std::span<const TraceLine> lines, const Endpoint& to,
                               std::optional<SteadyClock::time_point> start = std::nullopt,
                               std::stop_token stop = {})
{
  UdpSocket socket;
  const sockaddr_in addr = detail::resolve_ipv4(to);
  const auto epoch = start.value_or(SteadyClock::now());
  std::size_t sent = 0;
  for (const auto& line : lines) {
    if (stop.stop_requested()) break;
    std::this_thread::sleep_until(epoch + std::chrono::milliseconds(line.offset_ms));
    socket.send_to(line.bytes, addr);
    ++sent;
  }
  return sent;
}

}  // namespace dsrc_atl
