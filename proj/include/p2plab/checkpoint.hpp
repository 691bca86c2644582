#pragma once
// Parameter checkpoints: a flat binary of float-64 arrays next to a JSON
// manifest listing tensor names, shapes, and byte offsets, plus run metadata
// (seed, config hash, library version).  Loading verifies the manifest
// against the destination ParamSet entry by entry.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "p2plab/nets.hpp"

#include <json.hpp>

#include "p2plab/common.hpp"

namespace p2plab {

namespace fs = std::filesystem;

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
};

// Writes <base>.bin and <base>.json.
inline void save_checkpoint(const fs::path& base, nets::ParamSet& ps,
                            const CheckpointMeta& meta) {
  fs::path bin = base;
  bin += ".bin";
  fs::path man = base;
  man += ".json";
  std::ofstream f(bin, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot write " + bin.string());
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (auto& it : ps.items) {
    f.write(reinterpret_cast<const char*>(it.m->a.data()),
            static_cast<std::streamsize>(it.m->size() * sizeof(double)));
    tensors.push_back({{"name", it.name},
                       {"rows", it.m->rows},
                       {"cols", it.m->cols},
                       {"offset", offset}});
    offset += it.m->size() * sizeof(double);
  }
  if (!f) throw DataError("checkpoint: write failed for " + bin.string());
  f.close();
  nlohmann::json j{{"version", kVersion},
                   {"seed", meta.seed},
                   {"config_hash", meta.config_hash},
                   {"dtype", "float64"},
                   {"tensors", tensors}};
  std::ofstream mf(man);
  if (!mf) throw DataError("checkpoint: cannot write " + man.string());
  mf << j.dump(2) << "\n";
}

inline CheckpointMeta load_checkpoint(const fs::path& base,
                                      nets::ParamSet& ps) {
  fs::path bin = base;
  bin += ".bin";
  fs::path man = base;
  man += ".json";
  std::ifstream mf(man);
  if (!mf) throw DataError("checkpoint: cannot read " + man.string());
  nlohmann::json j = nlohmann::json::parse(mf);
  const auto& tensors = j.at("tensors");
  if (tensors.size() != ps.items.size())
    throw DataError("checkpoint: manifest lists " +
                    std::to_string(tensors.size()) + " tensors, expected " +
                    std::to_string(ps.items.size()));
  std::ifstream f(bin, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot read " + bin.string());
  for (std::size_t i = 0; i < ps.items.size(); ++i) {
    auto& it = ps.items[i];
    const auto& tj = tensors[i];
    if (tj.at("name").get<std::string>() != it.name ||
        tj.at("rows").get<int>() != it.m->rows ||
        tj.at("cols").get<int>() != it.m->cols)
      throw DataError("checkpoint: manifest mismatch at " + it.name);
    f.seekg(static_cast<std::streamoff>(tj.at("offset").get<std::uint64_t>()));
    f.read(reinterpret_cast<char*>(it.m->a.data()),
           static_cast<std::streamsize>(it.m->size() * sizeof(double)));
    if (!f) throw DataError("checkpoint: short read at " + it.name);
  }
  CheckpointMeta meta;
  meta.seed = j.value("seed", std::uint64_t{0});
  meta.config_hash = j.value("config_hash", std::uint64_t{0});
  return meta;
}

}  // namespace p2plab
