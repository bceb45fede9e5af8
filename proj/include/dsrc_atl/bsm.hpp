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

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace dsrc_atl
{

/**
 * One Basic Safety Message as carried on the wire. All fields are stored at
 * their transmitted resolution.
 */
struct BasicSafetyMessage
{
  std::uint32_t temp_id = 0;
  std::uint64_t time_ms = 0;         // carried as 32 bits on the wire
  std::int32_t latitude_e7 = 0;      // degrees * 1e7
  std::int32_t longitude_e7 = 0;     // degrees * 1e7
  std::uint16_t speed_002ms = 0;     // m/s * 50
  std::uint16_t heading_00125deg = 0;  // degrees * 80, clockwise from north

  friend bool operator==(const BasicSafetyMessage&, const BasicSafetyMessage&) = default;

  double latitude_deg() const { return latitude_e7 * 1e-7; }
  double longitude_deg() const { return longitude_e7 * 1e-7; }
  double speed_ms() const { return speed_002ms / 50.0; }
  double heading_deg() const { return heading_00125deg / 80.0; }
};

/// Vehicle state as seen by the simulator's BSM generator.
struct VehicleSnapshot
{
  double latitude_deg = 0.0;
  double longitude_deg = 0.0;
  double speed_ms = 0.0;
  double heading_deg = 0.0;
  std::uint32_t vehicle_id = 0;
  std::uint64_t clock_ms = 0;
};

inline constexpr std::size_t kBsmFrameSize = 23;
inline constexpr std::uint8_t kBsmMagic = 0xB5;
inline constexpr std::uint8_t kBsmVersion = 0x01;

inline constexpr std::int32_t kMaxLatitudeE7 = 900'000'000;
inline constexpr std::int32_t kMaxLongitudeE7 = 1'800'000'000;
inline constexpr std::uint16_t kHeadingModulus = 28800;
inline constexpr std::uint64_t kMaxTimeMs = 0xFFFF'FFFFull;

using BsmFrame = std::array<std::uint8_t, kBsmFrameSize>;

enum class DecodeError
{
  WrongMagic,
  WrongVersion,
  ShortFrame,
  BadChecksum,
  FieldOutOfRange,
};

inline const char* to_string(DecodeError e)
{
  switch (e) {
    case DecodeError::WrongMagic: return "WrongMagic";
    case DecodeError::WrongVersion: return "WrongVersion";
    case DecodeError::ShortFrame: return "ShortFrame";
    case DecodeError::BadChecksum: return "BadChecksum";
    case DecodeError::FieldOutOfRange: return "FieldOutOfRange";
  }
  return "Unknown";
}

/// Thrown when a message or snapshot cannot be represented on the wire.
class BsmRangeError : public std::invalid_argument
{
public:
  using std::invalid_argument::invalid_argument;
};

using DecodeResult = std::variant<BasicSafetyMessage, DecodeError>;

/// Empty string when `m` is encodable, otherwise the name of the offending field.
inline std::string invalid_field(const BasicSafetyMessage& m)
{
  if (m.latitude_e7 > kMaxLatitudeE7 || m.latitude_e7 < -kMaxLatitudeE7) return "latitude_e7";
  if (m.longitude_e7 > kMaxLongitudeE7 || m.longitude_e7 < -kMaxLongitudeE7) return "longitude_e7";
  if (m.heading_00125deg >= kHeadingModulus) return "heading_00125deg";
  if (m.time_ms > kMaxTimeMs) return "time_ms";
  return {};
}

namespace detail
{

template <typename T>
void put_be(std::uint8_t*& out, T value)
{
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (int shift = (sizeof(U) - 1) * 8; shift >= 0; shift -= 8) {
    *out++ = static_cast<std::uint8_t>((u >> shift) & 0xFFu);
  }
}

template <typename T>
T get_be(const std::uint8_t*& in)
{
  using U = std::make_unsigned_t<T>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    u = static_cast<U>((u << 8) | *in++);
  }
  return static_cast<T>(u);
}

inline std::uint8_t xor_checksum(std::span<const std::uint8_t> bytes)
{
  std::uint8_t c = 0;
  for (auto b : bytes) c ^= b;
  return c;
}

// Round half away from zero.
inline double round_half_away(double x)
{
  return x < 0 ? -std::floor(-x + 0.5) : std::floor(x + 0.5);
}

}  // namespace detail

/**
 * Serializes `m` into the fixed 23-byte frame:
 *
 *   0      magic 0xB5
 *   1      version 0x01
 *   2..5   temp_id
 *   6..9   time_ms (32 bits)
 *   10..13 latitude_e7
 *   14..17 longitude_e7
 *   18..19 speed_002ms
 *   20..21 heading_00125deg
 *   22     XOR of bytes 0..21
 *
 * Multi-byte fields are big-endian.
 */
inline BsmFrame encode_bsm(const BasicSafetyMessage& m)
{
  if (auto field = invalid_field(m); !field.empty()) {
    throw BsmRangeError("BSM field out of range: " + field);
  }
  BsmFrame frame{};
  std::uint8_t* out = frame.data();
  *out++ = kBsmMagic;
  *out++ = kBsmVersion;
  detail::put_be(out, m.temp_id);
  detail::put_be(out, static_cast<std::uint32_t>(m.time_ms));
  detail::put_be(out, m.latitude_e7);
  detail::put_be(out, m.longitude_e7);
  detail::put_be(out, m.speed_002ms);
  detail::put_be(out, m.heading_00125deg);
  frame[kBsmFrameSize - 1] =
      detail::xor_checksum(std::span<const std::uint8_t>(frame.data(), kBsmFrameSize - 1));
  return frame;
}

/// Parses a received datagram. Length is checked first, then magic, version,
/// checksum and field ranges; the first failing check determines the error.
/// A datagram of any length other than one frame reports ShortFrame.
inline DecodeResult decode_bsm(std::span<const std::uint8_t> bytes)
{
  if (bytes.size() != kBsmFrameSize) return DecodeError::ShortFrame;
  if (bytes[0] != kBsmMagic) return DecodeError::WrongMagic;
  if (bytes[1] != kBsmVersion) return DecodeError::WrongVersion;
  if (detail::xor_checksum(bytes.first(kBsmFrameSize - 1)) != bytes[kBsmFrameSize - 1]) {
    return DecodeError::BadChecksum;
  }
  const std::uint8_t* in = bytes.data() + 2;
  BasicSafetyMessage m;
  m.temp_id = detail::get_be<std::uint32_t>(in);
  m.time_ms = detail::get_be<std::uint32_t>(in);
  m.latitude_e7 = detail::get_be<std::int32_t>(in);
  m.longitude_e7 = detail::get_be<std::int32_t>(in);
  m.speed_002ms = detail::get_be<std::uint16_t>(in);
  m.heading_00125deg = detail::get_be<std::uint16_t>(in);
  if (!invalid_field(m).empty()) return DecodeError::FieldOutOfRange;
  return m;
}

/// Quantizes a simulated vehicle state to wire resolution.
inline BasicSafetyMessage bsm_from_snapshot(const VehicleSnapshot& v)
{
  if (!(v.speed_ms >= 0.0)) throw BsmRangeError("snapshot speed must be >= 0");
  if (!(v.heading_deg >= 0.0 && v.heading_deg < 360.0)) {
    throw BsmRangeError("snapshot heading must be in [0, 360)");
  }
  if (!(std::abs(v.latitude_deg) <= 90.0)) throw BsmRangeError("snapshot latitude out of range");
  if (!(std::abs(v.longitude_deg) <= 180.0)) throw BsmRangeError("snapshot longitude out of range");

  const double speed_q = detail::round_half_away(v.speed_ms * 50.0);
  if (speed_q > 65535.0) throw BsmRangeError("snapshot speed exceeds 1310.7 m/s");

  if (v.clock_ms > kMaxTimeMs) throw BsmRangeError("snapshot clock exceeds the 32-bit time field");

  BasicSafetyMessage m;
  m.temp_id = v.vehicle_id;
  m.time_ms = v.clock_ms;
  m.latitude_e7 = static_cast<std::int32_t>(detail::round_half_away(v.latitude_deg * 1e7));
  m.longitude_e7 = static_cast<std::int32_t>(detail::round_half_away(v.longitude_deg * 1e7));
  m.speed_002ms = static_cast<std::uint16_t>(speed_q);
  // 359.99999 degrees rounds up to a full turn.
  auto heading_q = static_cast<std::uint32_t>(detail::round_half_away(v.heading_deg * 80.0));
  m.heading_00125deg = static_cast<std::uint16_t>(heading_q % kHeadingModulus);
  return m;
}

inline std::string to_hex(std::span<const std::uint8_t> bytes)
{
  static constexpr char digits[] = "0123456789ABCDEF";
  std::string s;
  s.reserve(bytes.size() * 2);
  for (auto b : bytes) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 0x0F]);
  }
  return s;
}

/// Throws std::invalid_argument on odd length or non-hex characters.
inline std::vector<std::uint8_t> from_hex(std::string_view hex)
{
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  if (hex.size() % 2 != 0) throw std::invalid_argument("odd number of hex digits");
  std::vector<std::uint8_t> out;
  out.reserve(hex.size() / 2);
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    int hi = nibble(hex[i]);
    int lo = nibble(hex[i + 1]);
    if (hi < 0 || lo < 0) throw std::invalid_argument("invalid hex digit");
    out.push_back(static_cast<std::uint8_t>((hi << 4) | lo));
  }
  return out;
}

inline void to_json(nlohmann::json& j, const BasicSafetyMessage& m)
{
  j = nlohmann::json{{"temp_id", m.temp_id},
                     {"time_ms", m.time_ms},
                     {"latitude_e7", m.latitude_e7},
                     {"longitude_e7", m.longitude_e7},
                     {"speed_002ms", m.speed_002ms},
                     {"heading_00125deg", m.heading_00125deg}};
}

inline void from_json(const nlohmann::json& j, BasicSafetyMessage& m)
{
  j.at("temp_id").get_to(m.temp_id);
  j.at("time_ms").get_to(m.time_ms);
  j.at("latitude_e7").get_to(m.latitude_e7);
  j.at("longitude_e7").get_to(m.longitude_e7);
  j.at("speed_002ms").get_to(m.speed_002ms);
  j.at("heading_00125deg").get_to(m.heading_00125deg);
}

}  // namespace dsrc_atl
