#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "verbose/victim.hpp"

namespace verbose {

namespace {
constexpr char kMagic[8] = {'V', 'R', 'B', 'C', 'K', 'P', 'T', '1'};
}

// Layout: 8-byte magic, u64 header length, JSON header (config with seed and
// vocabulary, parameter names and shapes), then every parameter as raw
// little-endian float64 in header order.
void save_checkpoint(const std::filesystem::path& file, const VictimModel& model) {
  static_assert(std::endian::native == std::endian::little);
  nlohmann::json params = nlohmann::json::array();
  model.params().visit([&](const std::string& name, const Matrix& m) {
    params.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  });
  const std::string header = nlohmann::json{{"format", 1}, {"config", model.config().to_json()}, {"params", params}}.dump();
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + file.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  model.params().visit([&](const std::string&, const Matrix& m) {
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  });
  if (!out) throw std::runtime_error("short write to checkpoint " + file.string());
}

VictimModel load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + file.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("not a checkpoint file: " + file.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1u << 26)) throw std::runtime_error("corrupt checkpoint header in " + file.string());
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  const auto h = nlohmann::json::parse(header);
  if (h.at("format").get<int>() != 1) throw std::runtime_error("unsupported checkpoint format");
  ModelConfig config = ModelConfig::from_json(h.at("config"));
  VictimModel model(config);
  ModelParams params = model.params();
  std::size_t i = 0;
  const auto& listed = h.at("params");
  params.visit([&](const std::string& name, Matrix& m) {
    if (i >= listed.size() || listed[i].at("name").get<std::string>() != name ||
        listed[i].at("rows").get<std::size_t>() != m.rows() || listed[i].at("cols").get<std::size_t>() != m.cols())
      throw std::runtime_error("checkpoint parameter table does not match config at " + name);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    ++i;
  });
  if (!in || i != listed.size()) throw std::runtime_error("truncated checkpoint " + file.string());
  return VictimModel(std::move(config), std::move(params));
}

}  // namespace verbose
