#include <cstdio>
#include <fstream>

#include "hsi/hsio.hpp"
#include "hsi/preprocess.hpp"

namespace hsi {

namespace fs = std::filesystem;
using nlohmann::json;

std::string tile_stem(std::int64_t tile_id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "t%06lld", static_cast<long long>(tile_id));
  return buf;
}

void write_tile_archive(const fs::path& dir, std::span<const TileRecord> tiles, const json& extra) {
  if (tiles.empty()) throw DataError("write_tile_archive: no tiles");
  fs::create_directories(dir);
  const Index side = tiles.front().side();
  const Index channels = tiles.front().channels();

  json records = json::array();
  for (const TileRecord& t : tiles) {
    if (t.side() != side || t.channels() != channels || t.features.rows() != side * side) {
      throw DataError("write_tile_archive: tiles disagree on shape");
    }
    const std::string stem = tile_stem(t.tile_id);
    write_f32le(dir / (stem + ".feat.raw"), t.features.data(), static_cast<std::size_t>(t.features.size()));
    write_bytes(dir / (stem + ".lab.raw"), t.labels.data(), static_cast<std::size_t>(t.labels.size()));
    write_bytes(dir / (stem + ".pad.raw"), t.pad_mask.data(), static_cast<std::size_t>(t.pad_mask.size()));
    records.push_back({{"tile_id", t.tile_id},
                       {"source_image", t.source_image},
                       {"origin_row", t.origin_row},
                       {"origin_col", t.origin_col},
                       {"split", to_string(t.split)},
                       {"augmented", t.augmented}});
  }
  json manifest = extra;
  manifest["format"] = "hsi-tiles/1";
  manifest["tile_size"] = side;
  manifest["channels"] = channels;
  manifest["tiles"] = std::move(records);

  std::ofstream out(dir / "tiles.manifest.json", std::ios::binary);
  if (!out) throw DataError("cannot write " + (dir / "tiles.manifest.json").string());
  out << manifest.dump(2) << "\n";
}

std::vector<TileRecord> read_tile_archive(const fs::path& dir, json* manifest_out) {
  const fs::path manifest_path = dir / "tiles.manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed tile manifest: " + std::string(e.what()));
  }

  std::vector<TileRecord> tiles;
  try {
    const Index side = manifest.at("tile_size").get<Index>();
    const Index channels = manifest.at("channels").get<Index>();
    for (const json& rec : manifest.at("tiles")) {
      TileRecord t;
      t.tile_id = rec.at("tile_id").get<std::int64_t>();
      t.source_image = rec.at("source_image").get<std::string>();
      t.origin_row = rec.at("origin_row").get<Index>();
      t.origin_col = rec.at("origin_col").get<Index>();
      t.split = split_from_string(rec.at("split").get<std::string>());
      t.augmented = rec.at("augmented").get<bool>();
      if (t.augmented && t.split != Split::Train) {
        throw DataError("tile " + std::to_string(t.tile_id) + ": augmented tile outside the training split");
      }

      const std::string stem = tile_stem(t.tile_id);
      const auto feat = read_f32le(dir / (stem + ".feat.raw"));
      if (feat.size() != static_cast<std::size_t>(side * side * channels)) {
        throw DataError(stem + ".feat.raw: size does not match manifest");
      }
      t.features = Eigen::Map<const Eigen::MatrixXf>(feat.data(), side * side, channels);
      const auto lab = read_bytes(dir / (stem + ".lab.raw"));
      const auto pad = read_bytes(dir / (stem + ".pad.raw"));
      if (lab.size() != static_cast<std::size_t>(side * side) || pad.size() != lab.size()) {
        throw DataError(stem + ": label/pad raster size does not match manifest");
      }
      t.labels = Eigen::Map<const LabelMask>(lab.data(), side, side);
      t.pad_mask = Eigen::Map<const LabelMask>(pad.data(), side, side);
      for (std::size_t p = 0; p < lab.size(); ++p) {
        if (lab[p] > 1 || pad[p] > 1) throw DataError(stem + ": label/pad values must be 0 or 1");
        if (pad[p] && lab[p]) throw DataError(stem + ": padded pixel labelled oil");
      }
      tiles.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw DataError("malformed tile manifest: " + std::string(e.what()));
  }
  if (manifest_out) *manifest_out = std::move(manifest);
  return tiles;
}

}  // namespace hsi
