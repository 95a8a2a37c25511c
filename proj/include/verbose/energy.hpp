#pragma once

#include <optional>
#include <string>

#include "json.hpp"

namespace verbose {

/// How a decode's energy is accounted.
struct MeterSpec {
  enum class Kind { power_proxy, external_command, none };
  Kind kind = Kind::power_proxy;
  double watts = 50.0;
  /// Shell command printing a cumulative joules counter; read before and after.
  std::string command;

  nlohmann::json to_json() const;
  static MeterSpec from_json(const nlohmann::json& j);
};

class EnergyMeter {
 public:
  explicit EnergyMeter(MeterSpec spec);

  const MeterSpec& spec() const { return spec_; }
  /// Call immediately before the measured decode.
  void begin();
  /// Joules consumed since begin(); empty for the null meter or when the
  /// external counter could not be read.
  std::optional<double> end(double latency_seconds);

 private:
  MeterSpec spec_;
  std::optional<double> start_;
};

/// Runs `command` through the shell and parses the first number it prints.
std::optional<double> read_counter(const std::string& command);

/// Where latency comes from. `wall` times the decode; `model` charges a fixed
/// cost per generated token, which makes reports byte-reproducible.
struct ClockSpec {
  enum class Kind { wall, model };
  Kind kind = Kind::wall;
  double seconds_per_token = 1e-3;
  double base_seconds = 1e-4;

  double model_latency(std::size_t tokens) const { return base_seconds + seconds_per_token * static_cast<double>(tokens); }

  nlohmann::json to_json() const;
  static ClockSpec from_json(const nlohmann::json& j);
};

}  // namespace verbose
