#pragma once

// On-disk dataset layout written by `dynaflow synth`:
//
//   world.geojson   road segments
//   world.json      generator parameters (the world is rebuilt from these)
//   speeds.csv      observed segment_id,day,hour,speed_kmh,n_samples
//   split.json      tile keys per split
//   tiles/<z_x_y>.png

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dynaflow/dataset.hpp"
#include "dynaflow/graph.hpp"
#include "dynaflow/image.hpp"
#include "dynaflow/trainer.hpp"

namespace dynaflow {

inline constexpr int kWorldFormatVersion = 1;

inline nlohmann::json synth_params_json(const SynthParams& p) {
  return {{"grid_n", p.grid_n},
          {"tile_zoom", p.tile_zoom},
          {"tile_size_px", p.tile_size_px},
          {"seed", p.seed},
          {"origin_lat", p.origin.lat},
          {"origin_lon", p.origin.lon},
          {"min_spacing_m", p.min_spacing_m},
          {"max_spacing_m", p.max_spacing_m},
          {"highway_fraction", p.highway_fraction},
          {"direction_asymmetry", p.direction_asymmetry},
          {"coverage", p.coverage},
          {"slow_zone_m", p.slow_zone_m},
          {"slow_zone_factor", p.slow_zone_factor}};
}

inline SynthParams synth_params_from_json(const nlohmann::json& j) {
  SynthParams p;
  p.grid_n = j.at("grid_n").get<int>();
  p.tile_zoom = j.at("tile_zoom").get<int>();
  p.tile_size_px = j.at("tile_size_px").get<int>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.origin = GeoPoint(j.at("origin_lat").get<double>(), j.at("origin_lon").get<double>());
  p.min_spacing_m = j.at("min_spacing_m").get<double>();
  p.max_spacing_m = j.at("max_spacing_m").get<double>();
  p.highway_fraction = j.at("highway_fraction").get<double>();
  p.direction_asymmetry = j.at("direction_asymmetry").get<double>();
  p.coverage = j.at("coverage").get<double>();
  p.slow_zone_m = j.at("slow_zone_m").get<double>();
  p.slow_zone_factor = j.at("slow_zone_factor").get<double>();
  return p;
}

inline nlohmann::json world_sidecar(const SynthWorld& w) {
  return {{"format", "dynaflow-world"},
          {"version", kWorldFormatVersion},
          {"params", synth_params_json(w.params)},
          {"texture_seed", w.texture_seed},
          {"segments", w.segments.size()}};
}

inline nlohmann::json split_json(const DatasetSplit& s) {
  auto keys = [](const std::vector<TileIndex>& v) {
    std::vector<std::string> out;
    for (const auto& t : v) out.push_back(t.key());
    return out;
  };
  return {{"train", keys(s.train)}, {"val", keys(s.val)}, {"test", keys(s.test)}};
}

inline DatasetSplit split_from_json(const nlohmann::json& j) {
  auto tiles = [&](const char* part) {
    std::vector<TileIndex> out;
    for (const auto& k : j.at(part)) out.push_back(TileIndex::parse(k.get<std::string>()));
    return out;
  };
  return {tiles("train"), tiles("val"), tiles("test")};
}

struct DataDir {
  std::filesystem::path root;

  std::filesystem::path world_geojson() const { return root / "world.geojson"; }
  std::filesystem::path world_json() const { return root / "world.json"; }
  std::filesystem::path speeds_csv() const { return root / "speeds.csv"; }
  std::filesystem::path split() const { return root / "split.json"; }
  std::filesystem::path tile_png(const TileIndex& t) const { return root / "tiles" / (t.key() + ".png"); }
};

inline void write_dataset(const DataDir& dir, const SynthWorld& w, const DatasetSplit& split) {
  std::filesystem::create_directories(dir.root / "tiles");
  write_json_file(dir.world_geojson().string(), world_geojson(w));
  write_json_file(dir.world_json().string(), world_sidecar(w));
  write_json_file(dir.split().string(), split_json(split));
  {
    std::ofstream f(dir.speeds_csv());
    if (!f) throw FormatError("cannot write " + dir.speeds_csv().string());
    write_speed_table_csv(f, w.speed_table());
  }
  const auto tiles = w.tiles();
  parallel_for(tiles.size(), [&](std::size_t i) {
    write_png(dir.tile_png(tiles[i]).string(), to_rgba(render_image(w, tiles[i], w.params.tile_size_px)));
  });
}

// Rebuilds the generator output from the sidecar and checks it against the
// stored texture seed and segment count.
inline SynthWorld load_world(const DataDir& dir) {
  const auto j = read_json_file(dir.world_json().string());
  if (j.value("format", "") != "dynaflow-world" || j.value("version", 0) != kWorldFormatVersion)
    throw FormatError("unsupported world sidecar");
  SynthWorld w = synth_city(synth_params_from_json(j.at("params")));
  if (w.texture_seed != j.at("texture_seed").get<std::uint64_t>() ||
      w.segments.size() != j.at("segments").get<std::size_t>())
    throw FormatError("world sidecar does not reproduce the stored world");
  return w;
}

inline SpeedTable load_speeds(const DataDir& dir) {
  std::ifstream f(dir.speeds_csv());
  if (!f) throw FormatError("cannot read " + dir.speeds_csv().string());
  return read_speed_table_csv(f);
}

inline std::vector<TileData> load_tiles(const DataDir& dir, const std::vector<TileIndex>& tiles,
                                        const std::vector<RoadSegment>& segments, const SpeedTable& table) {
  std::vector<TileData> out(tiles.size());
  parallel_for(tiles.size(), [&](std::size_t i) {
    out[i] = make_tile_data(tiles[i], rgb_image(read_png(dir.tile_png(tiles[i]).string())), segments, table);
  });
  return out;
}

}  // namespace dynaflow
