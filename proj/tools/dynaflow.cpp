// dynaflow: synthetic data, training, evaluation and routing from the
// command line.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 usage, 3 missing or unreadable
// artifact, 4 reference to an unknown node or tile.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynaflow/artifacts.hpp"
#include "dynaflow/dataset.hpp"
#include "dynaflow/graph.hpp"
#include "dynaflow/losses.hpp"
#include "dynaflow/model.hpp"
#include "dynaflow/raster.hpp"
#include "dynaflow/render.hpp"
#include "dynaflow/trainer.hpp"

namespace fs = std::filesystem;
using namespace dynaflow;

namespace {

constexpr int kExitError = 1;
constexpr int kExitUsage = 2;
constexpr int kExitMissing = 3;
constexpr int kExitBadReference = 4;

struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BadReference : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw MissingArtifact("missing artifact: " + p.string());
}

void require_dataset(const DataDir& d) {
  for (const auto& p : {d.world_geojson(), d.world_json(), d.speeds_csv(), d.split()}) require_file(p);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<TimeSlot> parse_slots(const std::string& s) {
  std::vector<TimeSlot> out;
  for (const auto& item : split_list(s)) {
    try {
      out.push_back(parse_slot(item));
    } catch (const BoundsError& e) {
      throw UsageError(e.what());
    }
  }
  return out;
}

TimeSlot parse_one_slot(const std::string& s) {
  const auto v = parse_slots(s);
  if (v.size() != 1) throw UsageError("expected exactly one day:hour slot, got '" + s + "'");
  return v.front();
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw UsageError("not a number: '" + item + "'");
    }
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

// ---------------------------------------------------------------------------
// Shared loading

struct Loaded {
  DataDir dir;
  SynthWorld world;
  SpeedTable table;
  DatasetSplit split;
};

Loaded load_dataset(const std::string& path) {
  Loaded l{DataDir{path}, {}, {}, {}};
  require_dataset(l.dir);
  l.world = load_world(l.dir);
  l.table = load_speeds(l.dir);
  l.split = split_from_json(read_json_file(l.dir.split().string()));
  return l;
}

std::vector<TileIndex> split_part(const Loaded& l, const std::string& name) {
  if (name == "train") return l.split.train;
  if (name == "val") return l.split.val;
  if (name == "test") return l.split.test;
  if (name == "all") {
    auto all = l.split.train;
    all.insert(all.end(), l.split.val.begin(), l.split.val.end());
    all.insert(all.end(), l.split.test.begin(), l.split.test.end());
    std::sort(all.begin(), all.end());
    return all;
  }
  throw UsageError("unknown split '" + name + "'");
}

std::vector<TileData> tiles_for(const Loaded& l, const std::vector<TileIndex>& tiles) {
  for (const auto& t : tiles) require_file(l.dir.tile_png(t));
  return load_tiles(l.dir, tiles, l.world.segments, l.table);
}

TrafficModel load_model(const std::string& path) {
  require_file(path);
  return load_checkpoint(path);
}

// Either a trained checkpoint or the ground-truth oracle.
struct PredictorSource {
  std::string checkpoint;
  bool oracle = false;
  std::string angles = "true";

  void add_options(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "Model checkpoint");
    app->add_flag("--oracle", oracle, "Use ground-truth speeds instead of a model");
    app->add_option("--angles", angles, "Angles used to compose speeds: true | predicted")
        ->check(CLI::IsMember({"true", "predicted"}));
  }

  void validate() const {
    if (oracle == !checkpoint.empty()) throw UsageError("give exactly one of --checkpoint or --oracle");
  }
};

struct PredictorHandle {
  std::optional<TrafficModel> model;
  std::unique_ptr<Predictor> predictor;
  int bins = kDefaultBins;
};

PredictorHandle make_predictor(const PredictorSource& src, const SpeedTable& table) {
  src.validate();
  PredictorHandle h;
  if (src.oracle) {
    h.predictor = std::make_unique<OraclePredictor>(table, kDefaultBins);
    return h;
  }
  h.model = load_model(src.checkpoint);
  h.bins = h.model->config.num_bins;
  h.predictor = std::make_unique<ModelPredictor>(
      *h.model, SpeedComposition::orientation_weighted,
      src.angles == "true" ? AngleSource::true_angles : AngleSource::predicted_argmax);
  return h;
}

// Segment speeds for one slot from a CSV with segment_id, day, hour and
// speed_kmh columns (the predict output or the dataset's speeds.csv).
std::map<std::string, double> read_slot_speeds(const std::string& path, std::optional<TimeSlot> slot) {
  require_file(path);
  std::ifstream f(path);
  std::string line;
  if (!std::getline(f, line)) throw FormatError(path + ": empty file");
  const auto header = detail::split_csv_line(line);
  auto col = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw FormatError(path + ": missing column " + name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto cid = col("segment_id"), cd = col("day"), ch = col("hour"), cs = col("speed_kmh");
  std::map<std::string, double> out;
  std::optional<TimeSlot> seen;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() < header.size()) throw FormatError(path + ": short row");
    const TimeSlot s(std::stoi(cells[cd]), std::stoi(cells[ch]));
    if (slot && s != *slot) continue;
    if (!slot && seen && s != *seen) throw UsageError(path + " holds several slots; pass --slot");
    seen = s;
    out[cells[cid]] = std::stod(cells[cs]);
  }
  if (out.empty()) throw FormatError(path + ": no speeds for the requested slot");
  return out;
}

RoadGraph load_graph(const DataDir& dir) {
  require_file(dir.world_geojson());
  const auto seg = read_segments_geojson(read_json_file(dir.world_geojson().string()));
  return build_graph(seg.segments, seg.ends);
}

void require_node(const RoadGraph& g, const std::string& id) {
  if (!g.find_node(id)) throw BadReference("unknown node '" + id + "'");
}

// ---------------------------------------------------------------------------
// Commands

struct SynthArgs {
  std::string out;
  SynthParams params;
  std::string ratios = "0.85,0.05,0.10";
  bool force = false;
};

int cmd_synth(const SynthArgs& a) {
  const auto r = parse_doubles(a.ratios);
  if (r.size() != 3) throw UsageError("--split-ratios needs three values");
  const DataDir dir{a.out};
  if (fs::exists(dir.root) && !fs::is_empty(dir.root) && !a.force)
    throw UsageError("output directory " + a.out + " is not empty; pass --force to overwrite");
  if (fs::exists(dir.root / "tiles"))
    for (const auto& e : fs::directory_iterator(dir.root / "tiles"))
      if (e.path().extension() == ".png") fs::remove(e.path());
  const auto world = synth_city(a.params);
  const auto split = split_tiles(world.tiles(), {r[0], r[1], r[2]}, a.params.seed);
  write_dataset(dir, world, split);
  std::cout << "wrote " << world.segments.size() << " segments, " << world.nodes.size() << " nodes, "
            << split.train.size() + split.val.size() + split.test.size() << " tiles (" << split.train.size() << '/'
            << split.val.size() << '/' << split.test.size() << ") to " << a.out << '\n';
  return 0;
}

struct RasterizeArgs {
  std::string data, out, tile, slot;
  int bins = kDefaultBins;
};

int cmd_rasterize(const RasterizeArgs& a) {
  const auto l = load_dataset(a.data);
  const TimeSlot slot = parse_one_slot(a.slot);
  std::vector<TileIndex> tiles = split_part(l, "all");
  if (!a.tile.empty()) {
    const auto t = TileIndex::parse(a.tile);
    if (std::find(tiles.begin(), tiles.end(), t) == tiles.end()) throw BadReference("unknown tile '" + a.tile + "'");
    tiles = {t};
  }
  fs::create_directories(a.out);
  for (const auto& t : tiles) {
    const auto frame = tile_pixel_frame(t, l.world.params.tile_size_px);
    const auto targets = make_targets(frame, l.world.segments, l.table, slot, a.bins);
    const fs::path base = fs::path(a.out) / t.key();
    write_png(base.string() + "_mask.png", render_mask(targets.mask));
    std::ofstream lab(base.string() + "_orientation.csv");
    write_orientation_labels(lab, targets.labels);
    std::ofstream sup(base.string() + "_supervision.txt");
    write_supervision(sup, targets.speed, slot, frame);
    write_png(base.string() + "_speed.png",
              render_speed_raster(supervision_raster(targets.speed, frame.rows, frame.cols)));
  }
  std::cout << "rasterized " << tiles.size() << " tiles at " << slot.day << ':' << slot.hour << '\n';
  return 0;
}

struct TrainArgs {
  std::string data, out, log;
  ModelConfig model;
  TrainConfig train;
  LossConfig loss;
  std::string aggregation = "region", composition = "orientation";
  bool no_image = false, no_location = false, no_time = false;
};

int cmd_train(TrainArgs a) {
  a.model.use_image = !a.no_image;
  a.model.use_location = !a.no_location;
  a.model.use_time = !a.no_time;
  a.loss.aggregation = a.aggregation == "region" ? SpeedAggregation::region : SpeedAggregation::replicate;
  a.loss.composition =
      a.composition == "orientation" ? SpeedComposition::orientation_weighted : SpeedComposition::uniform;
  a.model.validate();
  a.train.validate(a.model);
  a.loss.validate();
  const auto l = load_dataset(a.data);
  const auto train_tiles = tiles_for(l, l.split.train);
  const auto val_tiles = tiles_for(l, l.split.val);
  const std::string log_path = a.log.empty() ? a.out + ".log.csv" : a.log;
  std::ofstream log(log_path);
  if (!log) throw FormatError("cannot write " + log_path);
  const auto res = train(a.model, train_tiles, val_tiles, l.table, a.train, a.loss, &log);
  save_checkpoint(a.out, res.model);
  std::cout << "trained " << res.log.size() << " steps; best epoch " << res.best_epoch;
  if (!res.val_rmse.empty())
    std::cout << " (validation RMSE " << fmt(res.val_rmse[static_cast<std::size_t>(res.best_epoch)]) << " km/h)";
  std::cout << "\ncheckpoint " << a.out << "\nlog " << log_path << '\n';
  return 0;
}

struct EvalArgs {
  std::string data, split = "test", policy = "random", slots, out;
  std::uint64_t seed = 0;
  PredictorSource source;
};

int cmd_eval(const EvalArgs& a) {
  a.source.validate();
  if (!a.source.checkpoint.empty()) require_file(a.source.checkpoint);
  const auto l = load_dataset(a.data);
  const auto h = make_predictor(a.source, l.table);
  const auto tiles = tiles_for(l, split_part(l, a.split));
  const EvalPolicy policy =
      a.policy == "random" ? EvalPolicy::fixed_random(a.seed) : EvalPolicy::slot_list(parse_slots(a.slots));
  const auto rep = evaluate(*h.predictor, tiles, l.table, policy, h.bins);

  std::ostringstream csv;
  csv << "scope,day,hour,rmse,mae,r2,road_f1,orientation_top1,samples\n";
  auto r2s = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string("nan"); };
  csv << "all,,," << fmt(rep.speed.rmse) << ',' << fmt(rep.speed.mae) << ',' << r2s(rep.speed.r2) << ','
      << fmt(rep.road_f1) << ',' << fmt(rep.orientation_top1) << ',' << rep.speed.samples << '\n';
  for (const auto& s : rep.per_slot)
    csv << "slot," << s.slot.day << ',' << s.slot.hour << ',' << fmt(s.speed.rmse) << ',' << fmt(s.speed.mae) << ','
        << r2s(s.speed.r2) << ",,," << s.speed.samples << '\n';
  if (!a.out.empty()) {
    std::ofstream f(a.out);
    if (!f) throw FormatError("cannot write " + a.out);
    f << csv.str();
  }
  std::cout << "rmse " << fmt(rep.speed.rmse) << "\nmae " << fmt(rep.speed.mae) << "\nr2 " << r2s(rep.speed.r2)
            << "\nroad_f1 " << fmt(rep.road_f1) << "\norientation_top1 " << fmt(rep.orientation_top1)
            << "\nsamples " << rep.speed.samples << '\n';
  return 0;
}

struct PredictArgs {
  std::string data, split = "all", slots, out;
  PredictorSource source;
};

int cmd_predict(const PredictArgs& a) {
  a.source.validate();
  if (!a.source.checkpoint.empty()) require_file(a.source.checkpoint);
  const auto slots = parse_slots(a.slots);
  if (slots.empty()) throw UsageError("--slots is empty");
  const auto l = load_dataset(a.data);
  const auto h = make_predictor(a.source, l.table);
  const auto tiles = tiles_for(l, split_part(l, a.split));
  fs::create_directories(a.out);
  for (const auto& slot : slots) {
    const auto speeds = predict_segment_speeds(*h.predictor, tiles, slot);
    const fs::path p =
        fs::path(a.out) / ("speeds_d" + std::to_string(slot.day) + "_h" + std::to_string(slot.hour) + ".csv");
    std::ofstream f(p);
    if (!f) throw FormatError("cannot write " + p.string());
    f << "segment_id,day,hour,speed_kmh\n";
    for (const auto& [id, v] : speeds) f << id << ',' << slot.day << ',' << slot.hour << ',' << fmt(v) << '\n';
    std::cout << p.string() << ": " << speeds.size() << " segments\n";
  }
  return 0;
}

struct RouteArgs {
  std::string data, from, to, weight = "time", predictions, slot, out;
};

int cmd_route(const RouteArgs& a) {
  if (a.weight == "time" && a.predictions.empty()) throw UsageError("--weight time needs --predictions");
  std::optional<TimeSlot> slot;
  if (!a.slot.empty()) slot = parse_one_slot(a.slot);
  auto g = load_graph(DataDir{a.data});
  require_node(g, a.from);
  require_node(g, a.to);
  if (!a.predictions.empty()) assign_speeds(g, read_slot_speeds(a.predictions, slot));
  const auto route =
      shortest_path(g, a.from, a.to, a.weight == "length" ? RouteWeight::length : RouteWeight::time);
  nlohmann::json doc = route ? route_geojson(g, *route)
                             : nlohmann::json{{"type", "FeatureCollection"}, {"features", nlohmann::json::array()}};
  if (!a.out.empty()) write_json_file(a.out, doc);
  if (!route) {
    std::cout << "no route from " << a.from << " to " << a.to << '\n';
    return 0;
  }
  std::cout << "route " << route->nodes.size() - 1 << " edges, " << fmt(route->total_length_m) << " m";
  if (!std::isnan(route->total_time_s)) std::cout << ", " << fmt(route->total_time_s) << " s";
  std::cout << '\n';
  return 0;
}

struct IsochroneArgs {
  std::string data, from, budgets = "60,120,300", predictions, slot, out;
};

int cmd_isochrone(const IsochroneArgs& a) {
  std::optional<TimeSlot> slot;
  if (!a.slot.empty()) slot = parse_one_slot(a.slot);
  const auto budgets = parse_doubles(a.budgets);
  auto g = load_graph(DataDir{a.data});
  require_node(g, a.from);
  assign_speeds(g, read_slot_speeds(a.predictions, slot));
  IsochroneResult iso;
  try {
    iso = isochrone(g, a.from, budgets);
  } catch (const DomainError& e) {
    throw UsageError(e.what());
  }
  if (!a.out.empty()) write_json_file(a.out, isochrone_geojson(g, iso));
  for (const auto& level : iso.levels) std::cout << fmt(level.budget_s) << " s: " << level.nodes.size() << " nodes\n";
  return 0;
}

struct RenderArgs {
  std::string data, tile, slot, out;
  int stride = 8;
  PredictorSource source;
};

int cmd_render(const RenderArgs& a) {
  a.source.validate();
  if (!a.source.checkpoint.empty()) require_file(a.source.checkpoint);
  const TimeSlot slot = parse_one_slot(a.slot);
  const auto l = load_dataset(a.data);
  const auto key = TileIndex::parse(a.tile);
  const auto all = split_part(l, "all");
  if (std::find(all.begin(), all.end(), key) == all.end()) throw BadReference("unknown tile '" + a.tile + "'");
  const auto td = tiles_for(l, {key}).front();
  DensePrediction p;
  if (a.source.oracle) {
    p = dense_truth(td, l.table, slot);
  } else {
    const auto model = load_model(a.source.checkpoint);
    p = dense_prediction(model, td, slot);
  }
  fs::create_directories(a.out);
  const fs::path base = fs::path(a.out) / td.tile.key();
  write_png(base.string() + "_speed.png", render_speed_raster(p.speed));
  write_png(base.string() + "_flow.png", render_flow_field(td.image, p, a.stride));
  write_png(base.string() + "_errors.png", render_error_map(p.road_prob, road_mask(td.frame, td.segments)));
  std::cout << "rendered " << base.string() << "_{speed,flow,errors}.png\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Config files: a JSON object whose keys are option names of the
// subcommand. Values are appended as flags unless the same option already
// appears on the command line.

std::vector<std::string> merge_config(CLI::App& app, std::vector<std::string> args) {
  std::string config;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) config = args[i].substr(9);
  }
  if (config.empty() || args.empty()) return args;
  CLI::App* sub = nullptr;
  try {
    sub = app.get_subcommand(args.front());
  } catch (const CLI::OptionNotFound&) {
    throw UsageError("unknown command '" + args.front() + "'");
  }
  if (!fs::is_regular_file(config)) throw MissingArtifact("missing config file: " + config);
  const auto doc = read_json_file(config);
  if (!doc.is_object()) throw UsageError("config file must hold a JSON object");
  auto given = [&](const std::string& flag) {
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
  };
  std::vector<std::string> extra;
  for (const auto& [raw_key, value] : doc.items()) {
    std::string key = raw_key;
    std::replace(key.begin(), key.end(), '_', '-');
    const std::string flag = "--" + key;
    if (key == "config" || sub->get_option_no_throw(flag) == nullptr)
      throw UsageError("unknown config key '" + raw_key + "' for " + args.front());
    if (given(flag)) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) extra.push_back(flag);
    } else if (value.is_array()) {
      std::string joined;
      for (const auto& v : value) joined += (joined.empty() ? "" : ",") + (v.is_string() ? v.get<std::string>() : v.dump());
      extra.insert(extra.end(), {flag, joined});
    } else {
      extra.insert(extra.end(), {flag, value.is_string() ? value.get<std::string>() : value.dump()});
    }
  }
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynaflow: traffic speed modeling from overhead imagery"};
  app.require_subcommand(1);
  std::string config;
  auto add_config = [&](CLI::App* s) { s->add_option("--config", config, "JSON file with option values"); };

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "Generate a synthetic city dataset");
  s_synth->add_option("--out", synth.out, "Output directory")->required();
  s_synth->add_option("--grid-n", synth.params.grid_n, "Intersections per side");
  s_synth->add_option("--seed", synth.params.seed, "Random seed");
  s_synth->add_option("--tile-zoom", synth.params.tile_zoom, "Tile zoom level");
  s_synth->add_option("--tile-size", synth.params.tile_size_px, "Tile size in pixels");
  s_synth->add_option("--asymmetry", synth.params.direction_asymmetry, "Eastbound/westbound speed asymmetry");
  s_synth->add_option("--coverage", synth.params.coverage, "Fraction of observed (segment, slot) pairs");
  s_synth->add_option("--split-ratios", synth.ratios, "train,val,test fractions");
  s_synth->add_flag("--force", synth.force, "Overwrite an existing dataset");
  add_config(s_synth);

  RasterizeArgs ras;
  auto* s_ras = app.add_subcommand("rasterize", "Write road masks, orientation labels and speed supervision");
  s_ras->add_option("--data", ras.data, "Dataset directory")->required();
  s_ras->add_option("--out", ras.out, "Output directory")->required();
  s_ras->add_option("--slot", ras.slot, "day:hour")->required();
  s_ras->add_option("--tile", ras.tile, "Only this tile (z_x_y)");
  s_ras->add_option("--bins", ras.bins, "Orientation bins");
  add_config(s_ras);

  TrainArgs tr;
  auto* s_train = app.add_subcommand("train", "Train a model");
  s_train->add_option("--data", tr.data, "Dataset directory")->required();
  s_train->add_option("--out", tr.out, "Checkpoint path")->required();
  s_train->add_option("--log", tr.log, "Training log CSV (default <out>.log.csv)");
  s_train->add_option("--epochs", tr.train.epochs, "Passes over the training tiles");
  s_train->add_option("--batch-size", tr.train.batch_size, "Tiles per step");
  s_train->add_option("--crop", tr.train.crop_size, "Random crop size in pixels");
  s_train->add_option("--seed", tr.train.seed, "Random seed");
  s_train->add_option("--lr", tr.train.optimizer.lr, "Learning rate");
  s_train->add_option("--lookahead-k", tr.train.optimizer.lookahead_k, "Fast steps per slow update");
  s_train->add_option("--lookahead-alpha", tr.train.optimizer.lookahead_alpha, "Slow weight interpolation");
  s_train->add_option("--base-channels", tr.model.base_channels, "Channels of the first encoder stage");
  s_train->add_option("--depth", tr.model.encoder_depth, "Encoder stages");
  s_train->add_option("--bins", tr.model.num_bins, "Orientation bins");
  s_train->add_option("--embed-dim", tr.model.embed_dim, "Day and hour embedding width");
  s_train->add_option("--context-convs", tr.model.context_into_last_n_convs, "Speed-head convolutions that receive context");
  s_train->add_option("--speed-scale", tr.model.speed_scale_kmh, "Speed output scale in km/h");
  s_train->add_option("--initial-speed", tr.model.initial_speed_kmh, "Speed predicted at initialization");
  s_train->add_flag("--no-image", tr.no_image, "Metadata-only model");
  s_train->add_flag("--no-location", tr.no_location, "Drop the location input");
  s_train->add_flag("--no-time", tr.no_time, "Drop the day and hour inputs");
  s_train->add_option("--aggregation", tr.aggregation, "Speed supervision: region means or per-pixel replication")->check(CLI::IsMember({"region", "replicate"}));
  s_train->add_option("--composition", tr.composition, "Per-pixel speed from bins: orientation-weighted or uniform")->check(CLI::IsMember({"orientation", "uniform"}));
  s_train->add_option("--alpha-r", tr.loss.alpha_r, "Weight of the smoothness term");
  s_train->add_option("--delta", tr.loss.delta, "Charbonnier scale in km/h");
  s_train->add_option("--k", tr.loss.k, "Angular sharpness of the bin weights");
  add_config(s_train);

  EvalArgs ev;
  auto* s_eval = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  s_eval->add_option("--data", ev.data, "Dataset directory")->required();
  s_eval->add_option("--split", ev.split)->check(CLI::IsMember({"train", "val", "test", "all"}));
  s_eval->add_option("--policy", ev.policy, "random: one seeded slot per tile; slots: macro average over --slots")
      ->check(CLI::IsMember({"random", "slots"}));
  s_eval->add_option("--slots", ev.slots, "Comma-separated day:hour list");
  s_eval->add_option("--seed", ev.seed, "Seed for the per-tile slot draw");
  s_eval->add_option("--out", ev.out, "Metrics CSV");
  ev.source.add_options(s_eval);
  add_config(s_eval);

  PredictArgs pr;
  auto* s_pred = app.add_subcommand("predict", "Per-segment speeds for the given slots");
  s_pred->add_option("--data", pr.data, "Dataset directory")->required();
  s_pred->add_option("--slots", pr.slots, "Comma-separated day:hour list")->required();
  s_pred->add_option("--out", pr.out, "Output directory")->required();
  s_pred->add_option("--split", pr.split)->check(CLI::IsMember({"train", "val", "test", "all"}));
  pr.source.add_options(s_pred);
  add_config(s_pred);

  RouteArgs ro;
  auto* s_route = app.add_subcommand("route", "Shortest route by length or travel time");
  s_route->add_option("--data", ro.data, "Dataset directory")->required();
  s_route->add_option("--from", ro.from, "Start node id")->required();
  s_route->add_option("--to", ro.to, "Destination node id")->required();
  s_route->add_option("--weight", ro.weight, "Edge cost")->check(CLI::IsMember({"length", "time"}));
  s_route->add_option("--predictions", ro.predictions, "Segment speed CSV");
  s_route->add_option("--slot", ro.slot, "day:hour to select from the predictions");
  s_route->add_option("--out", ro.out, "Route GeoJSON");
  add_config(s_route);

  IsochroneArgs iso;
  auto* s_iso = app.add_subcommand("isochrone", "Nodes reachable within travel-time budgets");
  s_iso->add_option("--data", iso.data, "Dataset directory")->required();
  s_iso->add_option("--from", iso.from, "Start node id")->required();
  s_iso->add_option("--budgets", iso.budgets, "Comma-separated seconds, increasing");
  s_iso->add_option("--predictions", iso.predictions, "Segment speed CSV")->required();
  s_iso->add_option("--slot", iso.slot, "day:hour to select from the predictions");
  s_iso->add_option("--out", iso.out, "Isochrone GeoJSON");
  add_config(s_iso);

  RenderArgs rn;
  auto* s_render = app.add_subcommand("render", "Speed map, flow field and road error map for one tile");
  s_render->add_option("--data", rn.data, "Dataset directory")->required();
  s_render->add_option("--tile", rn.tile, "Tile key z_x_y")->required();
  s_render->add_option("--slot", rn.slot, "day:hour")->required();
  s_render->add_option("--out", rn.out, "Output directory")->required();
  s_render->add_option("--stride", rn.stride, "Flow-field sample spacing in pixels");
  rn.source.add_options(s_render);
  add_config(s_render);

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = merge_config(app, args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
    if (*s_synth) return cmd_synth(synth);
    if (*s_ras) return cmd_rasterize(ras);
    if (*s_train) return cmd_train(tr);
    if (*s_eval) return cmd_eval(ev);
    if (*s_pred) return cmd_predict(pr);
    if (*s_route) return cmd_route(ro);
    if (*s_iso) return cmd_isochrone(iso);
    if (*s_render) return cmd_render(rn);
    return kExitUsage;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const MissingArtifact& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitMissing;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitMissing;
  } catch (const BadReference& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitBadReference;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
}
