#pragma once

#include <bit>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "poi/config.hpp"
#include "poi/dataset.hpp"
#include "poi/model.hpp"
#include "poi/prior.hpp"

namespace poi {

inline constexpr const char* kCheckpointFormat = "poi-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline std::string param_file_name(const std::string& name) { return name + ".bin"; }

/// Writes manifest.json plus one little-endian float32 file per parameter.
inline void save_checkpoint(const std::filesystem::path& dir, const PoiModel& model, const RunConfig& cfg,
                            const AUPriorTable& table) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json params = nlohmann::json::array();
  for (const Param& p : model.params()) {
    const std::string file = param_file_name(p.name);
    std::ofstream os(dir / file, std::ios::binary);
    if (!os) throw IoError("cannot write " + (dir / file).string());
    for (double v : p.value.data) cache::put_f32(os, static_cast<float>(v));
    if (!os) throw IoError("short write to " + (dir / file).string());
    params.push_back({{"name", p.name}, {"group", to_string(p.group)}, {"shape", p.value.shape}, {"file", file}});
  }
  nlohmann::json manifest{
      {"format", kCheckpointFormat},
      {"version", kCheckpointVersion},
      {"dtype", "float32"},
      {"endianness", "little"},
      {"init", {{"scheme", "glorot_uniform"}, {"bias", "zeros"}, {"seed", model.seed()}}},
      {"config_hash", cfg.hash()},
      {"config", cfg.to_json()},
      {"prior_table", table.to_json()},
      {"parameters", params},
  };
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

struct LoadedCheckpoint {
  RunConfig config;
  AUPriorTable table;
  PoiModel model;
};

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("cannot open " + (dir / "manifest.json").string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest: " + std::string(e.what()));
  }
  if (m.value("format", "") != kCheckpointFormat || m.value("version", 0) != kCheckpointVersion)
    throw IoError("unsupported checkpoint format in " + dir.string());
  return m;
}

/// Rebuilds the model from the manifest and overwrites every parameter with
/// the stored values. Any name or shape disagreement is an error.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  const nlohmann::json m = read_manifest(dir);
  RunConfig cfg = RunConfig::from_json(m.at("config"));
  AUPriorTable table = AUPriorTable::from_json(m.at("prior_table"));
  PoiModel model(cfg.model, table, m.at("init").at("seed").get<std::uint64_t>());
  const auto& entries = m.at("parameters");
  if (entries.size() != model.params().size())
    throw DimensionError("checkpoint holds " + std::to_string(entries.size()) + " parameters, model expects " +
                         std::to_string(model.params().size()));
  std::size_t k = 0;
  for (Param& p : model.params()) {
    const auto& e = entries.at(k++);
    if (e.at("name").get<std::string>() != p.name)
      throw DimensionError("checkpoint parameter " + e.at("name").get<std::string>() + " does not match " + p.name);
    const auto shape = e.at("shape").get<Shape>();
    if (shape != p.value.shape)
      throw DimensionError("shape of " + p.name + " is " + to_string(shape) + ", model expects " +
                           to_string(p.value.shape));
    const auto path = dir / e.at("file").get<std::string>();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    for (double& v : p.value.data) v = cache::get_f32(is);
    if (!is) throw IoError("truncated parameter file " + path.string());
    is.peek();
    if (!is.eof()) throw IoError("oversized parameter file " + path.string());
  }
  return {std::move(cfg), std::move(table), std::move(model)};
}

}  // namespace poi
