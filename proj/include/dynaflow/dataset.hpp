#pragma once

// Speed-record ingestion and day-of-week x hour-of-day aggregation, tile
// splitting, and the synthetic city that stands in for imagery plus probe
// data.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dynaflow/error.hpp"
#include "dynaflow/geo.hpp"
#include "dynaflow/image.hpp"
#include "dynaflow/rng.hpp"

namespace dynaflow {

inline constexpr int kDaysPerWeek = 7;
inline constexpr int kHoursPerDay = 24;
inline constexpr int kSlotsPerWeek = kDaysPerWeek * kHoursPerDay;
inline constexpr double kMphToKmh = 1.609344;

// (day-of-week, hour-of-day). Monday is day 0.
struct TimeSlot {
  int day = 0;
  int hour = 0;

  TimeSlot() = default;
  TimeSlot(int d, int h) : day(d), hour(h) {
    if (d < 0 || d >= kDaysPerWeek) throw BoundsError("day of week out of range");
    if (h < 0 || h >= kHoursPerDay) throw BoundsError("hour of day out of range");
  }
  int index() const { return day * kHoursPerDay + hour; }
  static TimeSlot from_index(int i) { return {i / kHoursPerDay, i % kHoursPerDay}; }

  friend bool operator==(const TimeSlot&, const TimeSlot&) = default;
  friend auto operator<=>(const TimeSlot&, const TimeSlot&) = default;
};

// Parses "day:hour" (e.g. "0:8").
inline TimeSlot parse_slot(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw UsageError("slot must be day:hour, got '" + s + "'");
  try {
    return {std::stoi(s.substr(0, colon)), std::stoi(s.substr(colon + 1))};
  } catch (const std::logic_error&) {
    throw UsageError("slot must be day:hour, got '" + s + "'");
  }
}

struct SpeedRecord {
  std::string segment_id;
  int day_of_week = 0;
  int hour_of_day = 0;
  double speed_kmh = 0.0;
  int n_samples = 1;
};

struct SlotStats {
  double mean_kmh = 0.0;
  int n_samples = 0;

  friend bool operator==(const SlotStats&, const SlotStats&) = default;
};

// Per-segment mean speed keyed by (day, hour). At most 168 entries per
// segment by construction.
class SpeedTable {
 public:
  using Key = std::tuple<std::string, int, int>;

  void set(const std::string& segment_id, TimeSlot slot, SlotStats stats) {
    if (!(stats.mean_kmh > 0.0)) throw DomainError("speed must be positive");
    if (stats.n_samples < 1) throw DomainError("sample count must be >= 1");
    entries_[{segment_id, slot.day, slot.hour}] = stats;
  }

  std::optional<SlotStats> find(const std::string& segment_id, TimeSlot slot) const {
    auto it = entries_.find({segment_id, slot.day, slot.hour});
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<SpeedRecord> records() const {
    std::vector<SpeedRecord> out;
    out.reserve(entries_.size());
    for (const auto& [k, v] : entries_)
      out.push_back({std::get<0>(k), std::get<1>(k), std::get<2>(k), v.mean_kmh, v.n_samples});
    return out;
  }

  std::vector<TimeSlot> slots_for(const std::string& segment_id) const {
    std::vector<TimeSlot> out;
    for (auto it = entries_.lower_bound({segment_id, 0, 0});
         it != entries_.end() && std::get<0>(it->first) == segment_id; ++it)
      out.emplace_back(std::get<1>(it->first), std::get<2>(it->first));
    return out;
  }

  std::vector<double> speeds_for(const std::string& segment_id) const {
    std::vector<double> out;
    for (auto it = entries_.lower_bound({segment_id, 0, 0});
         it != entries_.end() && std::get<0>(it->first) == segment_id; ++it)
      out.push_back(it->second.mean_kmh);
    return out;
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  friend bool operator==(const SpeedTable&, const SpeedTable&) = default;

 private:
  std::map<Key, SlotStats> entries_;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (ch == '"' && quoted && i + 1 < line.size() && line[i + 1] == '"') {
      cur.push_back('"');
      ++i;
    } else if (ch == '"') {
      quoted = !quoted;
    } else if (ch == ',' && !quoted) {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  std::size_t used = 0;
  double v;
  try {
    v = std::stod(s, &used);
  } catch (const std::logic_error&) {
    return std::nullopt;
  }
  if (used != s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

// Quotes a field holding a comma or quote, doubling embedded quotes.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out.push_back('"');
    out.push_back(ch);
  }
  return out + "\"";
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

// One hourly observation as published by Uber-Movement-style exports.
struct MovementRecord {
  std::string segment_id;
  int year = 0;
  int month = 0;
  int day = 0;
  int hour = 0;
  double speed_kmh = 0.0;
};

struct RowError {
  std::size_t line = 0;
  std::string message;
};

struct IngestResult {
  std::vector<MovementRecord> records;
  std::vector<RowError> errors;
};

// Accepts segment_id (or osm_way_id), year, month, day, hour and one of
// speed_kmh_mean, speed_kmh, speed_mph_mean (converted to km/h).
inline IngestResult ingest_movement_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("missing CSV header");
  const auto header = detail::split_csv_line(line);
  auto column = [&](std::initializer_list<const char*> names) -> std::optional<std::size_t> {
    for (const char* n : names)
      for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == n) return i;
    return std::nullopt;
  };
  const auto c_seg = column({"segment_id", "osm_way_id"});
  const auto c_year = column({"year"});
  const auto c_month = column({"month"});
  const auto c_day = column({"day"});
  const auto c_hour = column({"hour"});
  const auto c_kmh = column({"speed_kmh_mean", "speed_kmh"});
  const auto c_mph = column({"speed_mph_mean"});
  if (!c_seg) throw FormatError("missing required column: segment_id");
  if (!c_year || !c_month || !c_day || !c_hour)
    throw FormatError("missing required column: year/month/day/hour");
  if (!c_kmh && !c_mph) throw FormatError("missing required column: speed");
  const std::size_t c_speed = c_kmh ? *c_kmh : *c_mph;
  const double scale = c_kmh ? 1.0 : kMphToKmh;

  IngestResult result;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() < header.size()) {
      result.errors.push_back({line_no, "expected " + std::to_string(header.size()) + " fields"});
      continue;
    }
    const auto speed = detail::parse_number(f[c_speed]);
    const auto y = detail::parse_number(f[*c_year]);
    const auto mo = detail::parse_number(f[*c_month]);
    const auto d = detail::parse_number(f[*c_day]);
    const auto h = detail::parse_number(f[*c_hour]);
    if (!speed || *speed <= 0.0) {
      result.errors.push_back({line_no, "invalid speed '" + f[c_speed] + "'"});
      continue;
    }
    if (!y || !mo || !d || !h) {
      result.errors.push_back({line_no, "invalid timestamp fields"});
      continue;
    }
    result.records.push_back({f[*c_seg], static_cast<int>(*y), static_cast<int>(*mo),
                              static_cast<int>(*d), static_cast<int>(*h), *speed * scale});
  }
  return result;
}

// Monday = 0.
inline int day_of_week(int year, int month, int day) {
  using namespace std::chrono;
  const year_month_day ymd{std::chrono::year{year}, std::chrono::month{static_cast<unsigned>(month)},
                           std::chrono::day{static_cast<unsigned>(day)}};
  if (!ymd.ok()) throw DomainError("invalid calendar date");
  const weekday wd{sys_days{ymd}};
  return static_cast<int>((wd.c_encoding() + 6) % 7);
}

// Mean speed and record count per (segment, day-of-week, hour-of-day).
inline SpeedTable aggregate_speeds(const std::vector<MovementRecord>& records) {
  struct Acc {
    double sum = 0.0;
    int n = 0;
  };
  std::map<SpeedTable::Key, Acc> acc;
  for (const auto& r : records) {
    if (r.hour < 0 || r.hour >= kHoursPerDay) throw DomainError("hour out of range");
    auto& a = acc[{r.segment_id, day_of_week(r.year, r.month, r.day), r.hour}];
    a.sum += r.speed_kmh;
    ++a.n;
  }
  SpeedTable table;
  for (const auto& [k, a] : acc)
    table.set(std::get<0>(k), {std::get<1>(k), std::get<2>(k)}, {a.sum / a.n, a.n});
  return table;
}

inline void write_speed_table_csv(std::ostream& out, const SpeedTable& table) {
  out << "segment_id,day,hour,speed_kmh,n_samples\n";
  for (const auto& r : table.records())
    out << detail::csv_field(r.segment_id) << ',' << r.day_of_week << ',' << r.hour_of_day << ','
        << detail::format_double(r.speed_kmh) << ',' << r.n_samples << '\n';
}

inline SpeedTable read_speed_table_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("missing CSV header");
  const auto header = detail::split_csv_line(line);
  const std::vector<std::string> expected = {"segment_id", "day", "hour", "speed_kmh", "n_samples"};
  if (header.size() < 4 || !std::equal(header.begin(), header.begin() + 4, expected.begin()))
    throw FormatError("expected columns segment_id,day,hour,speed_kmh[,n_samples]");
  const bool has_count = header.size() >= 5 && header[4] == "n_samples";
  SpeedTable table;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = detail::split_csv_line(line);
    const auto d = detail::parse_number(f.size() > 1 ? f[1] : "");
    const auto h = detail::parse_number(f.size() > 2 ? f[2] : "");
    const auto v = detail::parse_number(f.size() > 3 ? f[3] : "");
    const auto n = has_count ? detail::parse_number(f.size() > 4 ? f[4] : "") : 1.0;
    if (!d || !h || !v || !n)
      throw FormatError("malformed speed table row at line " + std::to_string(line_no));
    table.set(f[0], {static_cast<int>(*d), static_cast<int>(*h)}, {*v, static_cast<int>(*n)});
  }
  return table;
}

// Nearest-rank 85th percentile.
inline double free_flow_speed(std::vector<double> speeds) {
  if (speeds.empty()) throw DomainError("free flow speed of an empty list");
  std::sort(speeds.begin(), speeds.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.85 * static_cast<double>(speeds.size())));
  return speeds[std::max<std::size_t>(rank, 1) - 1];
}

struct DatasetSplit {
  std::vector<TileIndex> train;
  std::vector<TileIndex> val;
  std::vector<TileIndex> test;
};

// Seeded shuffle, then largest-remainder apportionment so every part is
// within one tile of its configured share. Ties go to train, then val.
inline DatasetSplit split_tiles(std::vector<TileIndex> tiles, std::array<double, 3> ratios,
                                std::uint64_t seed) {
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9 ||
      *std::min_element(ratios.begin(), ratios.end()) < 0.0)
    throw DomainError("split ratios must be non-negative and sum to 1");
  DatasetSplit split;
  if (tiles.empty()) return split;
  std::sort(tiles.begin(), tiles.end());
  Rng rng(seed);
  rng.shuffle(tiles);

  const auto n = static_cast<double>(tiles.size());
  std::array<std::size_t, 3> count{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double ideal = ratios[i] * n;
    count[i] = static_cast<std::size_t>(std::floor(ideal + 1e-9));
    frac[i] = ideal - static_cast<double>(count[i]);
    assigned += count[i];
  }
  std::array<int, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b] + 1e-12; });
  for (std::size_t k = 0; assigned < tiles.size(); ++k, ++assigned) ++count[order[k % 3]];

  split.train.assign(tiles.begin(), tiles.begin() + static_cast<long>(count[0]));
  split.val.assign(tiles.begin() + static_cast<long>(count[0]),
                   tiles.begin() + static_cast<long>(count[0] + count[1]));
  split.test.assign(tiles.begin() + static_cast<long>(count[0] + count[1]), tiles.end());
  for (auto* part : {&split.train, &split.val, &split.test}) std::sort(part->begin(), part->end());
  return split;
}

// ---------------------------------------------------------------------------
// Synthetic city

enum class RoadClass { highway, residential };

inline const char* to_string(RoadClass c) {
  return c == RoadClass::highway ? "highway" : "residential";
}

inline RoadClass road_class_from_string(const std::string& s) {
  if (s == "highway") return RoadClass::highway;
  if (s == "residential") return RoadClass::residential;
  throw FormatError("unknown road class '" + s + "'");
}

struct SynthParams {
  int grid_n = 6;
  int tile_zoom = 21;
  int tile_size_px = 64;
  std::uint64_t seed = 1;
  GeoPoint origin{40.75, -73.99};
  double min_spacing_m = 20.0;
  double max_spacing_m = 60.0;
  double highway_fraction = 0.34;
  // Relative speed gain eastbound, loss westbound; 0 makes twins symmetric.
  double direction_asymmetry = 0.0;
  // Fraction of (segment, slot) pairs with observed data.
  double coverage = 1.0;
  // Traffic slows to slow_zone_factor within slow_zone_m of each
  // intersection; segment speeds are length-weighted means.
  double slow_zone_m = 6.0;
  double slow_zone_factor = 0.6;
};

struct SynthNode {
  std::string id;
  GeoPoint position;
};

struct SegmentInfo {
  RoadClass road_class = RoadClass::residential;
  std::string from;
  std::string to;
  double segment_factor = 1.0;
  double intersection_factor = 1.0;
  double location_factor = 1.0;
  double direction_factor = 1.0;
};

inline constexpr double kSynthMinSpeed = 5.0;
inline constexpr double kSynthMaxSpeed = 110.0;

inline double class_base_speed(RoadClass c) { return c == RoadClass::highway ? 88.0 : 42.0; }

// Weekday rush-hour dips at 08:00 and 17:00, a mild weekend midday slowdown
// and a small night-time bonus.
inline double diurnal_factor(RoadClass c, int day, int hour) {
  auto bump = [](double x, double w) { return std::exp(-x * x / (2.0 * w * w)); };
  const double night = (hour <= 5) ? 0.05 : 0.0;
  if (day < 5) {
    const double depth = c == RoadClass::highway ? 0.35 : 0.45;
    return 1.0 + night - depth * (bump(hour - 8.0, 1.3) + bump(hour - 17.0, 1.3));
  }
  return 1.0 + night - 0.12 * bump(hour - 13.0, 3.0);
}

struct SynthWorld {
  SynthParams params;
  std::vector<SynthNode> nodes;
  std::vector<RoadSegment> segments;
  std::map<std::string, SegmentInfo> info;
  std::uint64_t texture_seed = 0;

  const SegmentInfo& segment_info(const std::string& id) const {
    auto it = info.find(id);
    if (it == info.end()) throw BoundsError("unknown segment '" + id + "'");
    return it->second;
  }

  // Ground-truth speed in km/h, within [5, 110].
  double speed(const std::string& segment_id, TimeSlot slot) const {
    const auto& si = segment_info(segment_id);
    const double v = class_base_speed(si.road_class) * diurnal_factor(si.road_class, slot.day, slot.hour) *
                     si.segment_factor * si.intersection_factor * si.location_factor *
                     si.direction_factor;
    return std::clamp(v, kSynthMinSpeed, kSynthMaxSpeed);
  }

  // Observed slot means; (segment, slot) pairs are dropped when coverage < 1.
  SpeedTable speed_table() const {
    SpeedTable table;
    for (const auto& s : segments)
      for (int i = 0; i < kSlotsPerWeek; ++i) {
        if (params.coverage < 1.0) {
          const auto h = hash_combine(hash_combine(params.seed, fnv1a(s.id)),
                                      static_cast<std::uint64_t>(i));
          if (unit_from_bits(h) >= params.coverage) continue;
        }
        const auto slot = TimeSlot::from_index(i);
        table.set(s.id, slot, {speed(s.id, slot), 52});
      }
    return table;
  }

  // Tiles crossed by any segment centerline.
  std::vector<TileIndex> tiles() const {
    std::set<TileIndex> out;
    for (const auto& s : segments) {
      for (std::size_t i = 1; i < s.points.size(); ++i) {
        const auto& a = s.points[i - 1];
        const auto& b = s.points[i];
        const int steps = std::max(1, static_cast<int>(std::ceil(haversine_m(a, b))));
        for (int k = 0; k <= steps; ++k) {
          const double t = static_cast<double>(k) / steps;
          out.insert(latlon_to_tile({a.lat + t * (b.lat - a.lat), a.lon + t * (b.lon - a.lon)},
                                    params.tile_zoom));
        }
      }
    }
    return {out.begin(), out.end()};
  }
};

inline std::string grid_node_id(int row, int col) {
  return "r" + std::to_string(row) + "c" + std::to_string(col);
}

// Irregular street grid with twinned directed segments between adjacent
// intersections. Every street line is either highway or residential.
inline SynthWorld synth_city(const SynthParams& p) {
  if (p.grid_n < 2) throw DomainError("grid_n must be >= 2");
  if (!(p.min_spacing_m > 0.0) || p.max_spacing_m < p.min_spacing_m)
    throw DomainError("invalid grid spacing");
  SynthWorld w;
  w.params = p;
  Rng rng(hash_combine(p.seed, 0x5eed));
  w.texture_seed = rng.next();

  const int n = p.grid_n;
  std::vector<double> xs(n, 0.0), ys(n, 0.0);
  for (int i = 1; i < n; ++i) xs[i] = xs[i - 1] + rng.uniform(p.min_spacing_m, p.max_spacing_m);
  for (int i = 1; i < n; ++i) ys[i] = ys[i - 1] + rng.uniform(p.min_spacing_m, p.max_spacing_m);
  const double cx = xs.back() / 2.0;
  const double cy = ys.back() / 2.0;

  // row lines run east-west (index 0..n-1), column lines north-south
  std::vector<RoadClass> row_class(n), col_class(n);
  for (auto& c : row_class) c = rng.uniform() < p.highway_fraction ? RoadClass::highway : RoadClass::residential;
  for (auto& c : col_class) c = rng.uniform() < p.highway_fraction ? RoadClass::highway : RoadClass::residential;
  auto count_hw = [&] {
    return std::count(row_class.begin(), row_class.end(), RoadClass::highway) +
           std::count(col_class.begin(), col_class.end(), RoadClass::highway);
  };
  if (count_hw() == 0) row_class[n / 2] = RoadClass::highway;
  if (count_hw() == 2 * n) col_class[0] = RoadClass::residential;

  const PixelFrame local = make_frame(p.origin, 1.0, 1, 1);
  auto node_pos = [&](int r, int c) {
    const GeoPoint g = local.to_geo({xs[c] - cx, ys[r] - cy});
    return GeoPoint{g.lat, g.lon};
  };
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) w.nodes.push_back({grid_node_id(r, c), node_pos(r, c)});

  const double extent = std::max(xs.back(), ys.back());
  const double sigma = std::max(extent / 3.0, 1.0);

  auto add_pair = [&](int r0, int c0, int r1, int c1, RoadClass cls) {
    const std::string a = grid_node_id(r0, c0);
    const std::string b = grid_node_id(r1, c1);
    const std::string fwd_id = "s_" + a + "_" + b;
    const std::string rev_id = "s_" + b + "_" + a;
    auto fwd = make_segment(fwd_id, {node_pos(r0, c0), node_pos(r1, c1)}, rev_id);
    auto rev = reversed(fwd, rev_id);
    const double seg_len = fwd.length_m;
    const double mid_x = (xs[c0] + xs[c1]) / 2.0 - cx;
    const double mid_y = (ys[r0] + ys[r1]) / 2.0 - cy;
    const double d2 = mid_x * mid_x + mid_y * mid_y;
    const double loc = 1.0 - 0.12 * std::exp(-d2 / (2.0 * sigma * sigma));
    const double inter = 1.0 - (1.0 - p.slow_zone_factor) * std::min(2.0 * p.slow_zone_m, seg_len) / seg_len;
    for (const auto* s : {&fwd, &rev}) {
      SegmentInfo si;
      si.road_class = cls;
      si.from = s == &fwd ? a : b;
      si.to = s == &fwd ? b : a;
      si.segment_factor = rng.uniform(0.92, 1.08);
      si.intersection_factor = inter;
      si.location_factor = loc;
      const Vec2 dir = local.to_local(s->points.back()) - local.to_local(s->points.front());
      si.direction_factor = 1.0 + p.direction_asymmetry * std::cos(direction_to_angle(dir));
      w.info[s->id] = si;
    }
    w.segments.push_back(std::move(fwd));
    w.segments.push_back(std::move(rev));
  };
  for (int r = 0; r < n; ++r)
    for (int c = 0; c + 1 < n; ++c) add_pair(r, c, r, c + 1, row_class[r]);
  for (int c = 0; c < n; ++c)
    for (int r = 0; r + 1 < n; ++r) add_pair(r, c, r + 1, c, col_class[c]);
  return w;
}

// ---------------------------------------------------------------------------
// Synthetic overhead imagery

namespace detail {

inline double value_noise(std::uint64_t seed, double gx, double gy, double cell) {
  const double fx = gx / cell, fy = gy / cell;
  const auto x0 = static_cast<std::int64_t>(std::floor(fx));
  const auto y0 = static_cast<std::int64_t>(std::floor(fy));
  const double tx = fx - x0, ty = fy - y0;
  auto v = [&](std::int64_t x, std::int64_t y) {
    return unit_from_bits(hash_combine(hash_combine(seed, static_cast<std::uint64_t>(x)),
                                       static_cast<std::uint64_t>(y)));
  };
  const double sx = tx * tx * (3 - 2 * tx), sy = ty * ty * (3 - 2 * ty);
  const double top = v(x0, y0) + sx * (v(x0 + 1, y0) - v(x0, y0));
  const double bot = v(x0, y0 + 1) + sx * (v(x0 + 1, y0 + 1) - v(x0, y0 + 1));
  return top + sy * (bot - top);
}

}  // namespace detail

inline constexpr double kHighwayHalfWidthM = 3.5;
inline constexpr double kResidentialHalfWidthM = 2.0;

// Three-channel overhead image of a tile: textured ground, residential
// streets as narrow light strips, highways as wide dark strips with a center
// marking. Values lie in [0, 1].
inline Image render_image(const SynthWorld& world, const TileIndex& tile, int size_px) {
  if (size_px < 16) throw DomainError("size_px must be >= 16");
  const PixelFrame frame = tile_pixel_frame(tile, size_px);
  Image img(3, size_px, size_px);
  const auto seed = world.texture_seed;
  for (int r = 0; r < size_px; ++r) {
    for (int c = 0; c < size_px; ++c) {
      const double gx = static_cast<double>(tile.x) * size_px + c;
      const double gy = static_cast<double>(tile.y) * size_px + r;
      const double coarse = detail::value_noise(seed, gx, gy, 24.0);
      const double fine = detail::value_noise(seed ^ 0xabcdefULL, gx, gy, 3.0);
      const double grain = unit_from_bits(hash_combine(seed ^ 0x77ULL,
                                                       hash_combine(static_cast<std::uint64_t>(gx),
                                                                    static_cast<std::uint64_t>(gy))));
      img.at(0, r, c) = 0.22 + 0.18 * coarse + 0.08 * fine + 0.05 * grain;
      img.at(1, r, c) = 0.32 + 0.20 * coarse + 0.06 * fine + 0.05 * grain;
      img.at(2, r, c) = 0.16 + 0.10 * coarse + 0.06 * fine + 0.05 * grain;
    }
  }

  struct Stroke {
    Vec2 a, b;
    RoadClass cls;
  };
  std::vector<Stroke> strokes;
  for (const auto& s : world.segments) {
    if (s.twin_id && *s.twin_id < s.id) continue;  // twins share geometry
    const auto cls = world.segment_info(s.id).road_class;
    for (std::size_t i = 1; i < s.points.size(); ++i)
      strokes.push_back({frame.to_local(s.points[i - 1]), frame.to_local(s.points[i]), cls});
  }
  // highways drawn last so they cover residential crossings
  std::stable_sort(strokes.begin(), strokes.end(), [](const Stroke& x, const Stroke& y) {
    return x.cls == RoadClass::residential && y.cls == RoadClass::highway;
  });
  for (const auto& st : strokes) {
    const bool hw = st.cls == RoadClass::highway;
    const double half = hw ? kHighwayHalfWidthM : kResidentialHalfWidthM;
    const double pad = half / frame.meters_per_pixel + 1.0;
    const auto [r0, c0] = frame.to_raster(st.a);
    const auto [r1, c1] = frame.to_raster(st.b);
    const int rlo = std::max(0, static_cast<int>(std::floor(std::min(r0, r1) - pad)));
    const int rhi = std::min(size_px - 1, static_cast<int>(std::ceil(std::max(r0, r1) + pad)));
    const int clo = std::max(0, static_cast<int>(std::floor(std::min(c0, c1) - pad)));
    const int chi = std::min(size_px - 1, static_cast<int>(std::ceil(std::max(c0, c1) + pad)));
    for (int r = rlo; r <= rhi; ++r) {
      for (int c = clo; c <= chi; ++c) {
        const double d = detail::point_segment_distance(frame.pixel_center(r, c), st.a, st.b);
        if (d > half) continue;
        const double grain =
            0.03 * unit_from_bits(hash_combine(seed ^ 0x99ULL,
                                               hash_combine(static_cast<std::uint64_t>(r),
                                                            static_cast<std::uint64_t>(c))));
        if (hw && d < 0.25) {
          img.at(0, r, c) = 0.85 + grain;
          img.at(1, r, c) = 0.78 + grain;
          img.at(2, r, c) = 0.30 + grain;
        } else if (hw) {
          img.at(0, r, c) = img.at(1, r, c) = 0.18 + grain;
          img.at(2, r, c) = 0.21 + grain;
        } else {
          img.at(0, r, c) = img.at(1, r, c) = 0.62 + grain;
          img.at(2, r, c) = 0.58 + grain;
        }
      }
    }
  }
  return img;
}

}  // namespace dynaflow
