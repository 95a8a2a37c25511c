#include "verbose/energy.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <memory>
#include <stdexcept>

namespace verbose {

nlohmann::json MeterSpec::to_json() const {
  switch (kind) {
    case Kind::power_proxy:
      return {{"kind", "power_proxy"}, {"watts", watts}};
    case Kind::external_command:
      return {{"kind", "external_command"}, {"command", command}};
    case Kind::none:
      break;
  }
  return {{"kind", "null"}};
}

MeterSpec MeterSpec::from_json(const nlohmann::json& j) {
  MeterSpec m;
  const auto kind = j.value("kind", std::string("power_proxy"));
  if (kind == "power_proxy") {
    m.watts = j.value("watts", m.watts);
    if (!(m.watts >= 0.0)) throw std::invalid_argument("meter: watts must be >= 0");
  } else if (kind == "external_command") {
    m.kind = Kind::external_command;
    m.command = j.at("command").get<std::string>();
  } else if (kind == "null") {
    m.kind = Kind::none;
  } else {
    throw std::invalid_argument("meter: unknown kind " + kind);
  }
  return m;
}

EnergyMeter::EnergyMeter(MeterSpec spec) : spec_(std::move(spec)) {}

std::optional<double> read_counter(const std::string& command) {
  std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen(command.c_str(), "r"), pclose);
  if (!pipe) return std::nullopt;
  std::string text;
  std::array<char, 256> buf{};
  while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe.get())) text += buf.data();
  if (pclose(pipe.release()) != 0) return std::nullopt;
  for (std::size_t i = 0; i < text.size(); ++i) {
    char* stop = nullptr;
    const double v = std::strtod(text.c_str() + i, &stop);
    if (stop != text.c_str() + i && std::isfinite(v)) return v;
  }
  return std::nullopt;
}

void EnergyMeter::begin() {
  start_.reset();
  if (spec_.kind == MeterSpec::Kind::external_command) start_ = read_counter(spec_.command);
}

std::optional<double> EnergyMeter::end(double latency_seconds) {
  switch (spec_.kind) {
    case MeterSpec::Kind::power_proxy:
      return spec_.watts * latency_seconds;
    case MeterSpec::Kind::external_command: {
      if (!start_) return std::nullopt;
      const auto stop = read_counter(spec_.command);
      if (!stop || *stop < *start_) return std::nullopt;
      return *stop - *start_;
    }
    case MeterSpec::Kind::none:
      break;
  }
  return std::nullopt;
}

nlohmann::json ClockSpec::to_json() const {
  if (kind == Kind::wall) return {{"kind", "wall"}};
  return {{"kind", "model"}, {"seconds_per_token", seconds_per_token}, {"base_seconds", base_seconds}};
}

ClockSpec ClockSpec::from_json(const nlohmann::json& j) {
  ClockSpec c;
  const auto kind = j.value("kind", std::string("wall"));
  if (kind == "model") {
    c.kind = Kind::model;
    c.seconds_per_token = j.value("seconds_per_token", c.seconds_per_token);
    c.base_seconds = j.value("base_seconds", c.base_seconds);
    if (!(c.seconds_per_token > 0.0) || !(c.base_seconds > 0.0))
      throw std::invalid_argument("clock: model costs must be > 0");
  } else if (kind != "wall") {
    throw std::invalid_argument("clock: unknown kind " + kind);
  }
  return c;
}

}  // namespace verbose
