#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "dynaflow/dataset.hpp"

using namespace dynaflow;

namespace {

// Zeller's congruence, shifted so Monday = 0.
int zeller_monday0(int y, int m, int d) {
  if (m < 3) {
    m += 12;
    y -= 1;
  }
  const int k = y % 100, j = y / 100;
  const int h = (d + 13 * (m + 1) / 5 + k + k / 4 + j / 4 + 5 * j) % 7;  // 0 = Saturday
  return (h + 5) % 7;
}

std::vector<TileIndex> make_tiles(int n) {
  std::vector<TileIndex> t;
  for (int i = 0; i < n; ++i) t.emplace_back(i, 3, 10);
  return t;
}

}  // namespace

TEST(Dataset, IngestHeaderOnly) {
  std::istringstream in("segment_id,year,month,day,hour,speed_kmh_mean\n");
  const auto r = ingest_movement_csv(in);
  EXPECT_TRUE(r.records.empty());
  EXPECT_TRUE(r.errors.empty());
}

TEST(Dataset, IngestRowsAndErrors) {
  std::istringstream in(
      "segment_id,year,month,day,hour,speed_kmh_mean\n"
      "a,2024,1,1,8,30\n"
      "a,2024,1,2,8,NaN\n"
      "b,2024,1,3,9,45.5\n");
  const auto r = ingest_movement_csv(in);
  ASSERT_EQ(r.records.size(), 2u);
  ASSERT_EQ(r.errors.size(), 1u);
  EXPECT_EQ(r.errors[0].line, 3u);
  EXPECT_EQ(r.records[1].segment_id, "b");
  EXPECT_DOUBLE_EQ(r.records[1].speed_kmh, 45.5);

  std::istringstream three(
      "segment_id,year,month,day,hour,speed_kmh_mean\n"
      "a,2024,1,1,8,30\na,2024,1,1,9,31\na,2024,1,1,10,32\n");
  EXPECT_EQ(ingest_movement_csv(three).records.size(), 3u);
}

TEST(Dataset, IngestMphColumn) {
  std::istringstream in("osm_way_id,year,month,day,hour,speed_mph_mean\nw,2024,3,4,5,10\n");
  const auto r = ingest_movement_csv(in);
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_DOUBLE_EQ(r.records[0].speed_kmh, 16.09344);
}

TEST(Dataset, IngestMissingColumnIsFormatError) {
  std::istringstream in("segment_id,year,month,day,speed_kmh_mean\n");
  EXPECT_THROW(ingest_movement_csv(in), FormatError);
}

TEST(Dataset, DayOfWeekMatchesZeller) {
  for (int y = 2015; y <= 2025; ++y)
    for (int m = 1; m <= 12; ++m)
      for (int d = 1; d <= 28; d += 3) EXPECT_EQ(day_of_week(y, m, d), zeller_monday0(y, m, d));
  EXPECT_EQ(day_of_week(2024, 1, 1), 0);
  EXPECT_THROW(day_of_week(2023, 2, 29), DomainError);
}

TEST(Dataset, AggregateMeans) {
  // 2024-01-01 and 2024-01-08 are both Mondays
  const auto one = aggregate_speeds({{"s", 2024, 1, 1, 12, 30.0}});
  EXPECT_DOUBLE_EQ(one.find("s", {0, 12})->mean_kmh, 30.0);
  EXPECT_EQ(one.find("s", {0, 12})->n_samples, 1);
  const auto two = aggregate_speeds({{"s", 2024, 1, 1, 12, 20.0}, {"s", 2024, 1, 8, 12, 40.0}});
  EXPECT_DOUBLE_EQ(two.find("s", {0, 12})->mean_kmh, 30.0);
  EXPECT_EQ(two.find("s", {0, 12})->n_samples, 2);
}

TEST(Dataset, AggregateCountsSumToRecords) {
  std::vector<MovementRecord> recs;
  int y = 2023, m = 1, d = 1;
  const int mdays[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  for (int i = 0; i < 365; ++i) {
    recs.push_back({"s", y, m, d, i % 24, 20.0 + i % 7});
    if (++d > mdays[m - 1]) d = 1, ++m;
  }
  const auto t = aggregate_speeds(recs);
  int total = 0;
  for (const auto& r : t.records()) total += r.n_samples;
  EXPECT_EQ(total, 365);
  EXPECT_LE(t.slots_for("s").size(), 168u);
}

TEST(Dataset, SpeedTableCsvRoundTrip) {
  SpeedTable t;
  t.set("a", {0, 8}, {31.123456789012345, 3});
  t.set("a", {6, 23}, {1.0 / 3.0, 1});
  t.set("b,c", {2, 0}, {99.5, 12});
  t.set("q\"x", {3, 1}, {12.0, 2});
  std::stringstream s;
  write_speed_table_csv(s, t);
  EXPECT_EQ(read_speed_table_csv(s), t);
}

TEST(Dataset, FreeFlowSpeed) {
  EXPECT_DOUBLE_EQ(free_flow_speed({50}), 50);
  EXPECT_DOUBLE_EQ(free_flow_speed({100, 10, 30, 20, 90, 40, 60, 50, 80, 70}), 90);
  EXPECT_DOUBLE_EQ(free_flow_speed({7, 7, 7, 7}), 7);
  EXPECT_THROW(free_flow_speed({}), DomainError);
}

TEST(Dataset, SplitTwentyTiles) {
  const auto s = split_tiles(make_tiles(20), {0.85, 0.05, 0.10}, 1);
  EXPECT_EQ(s.train.size(), 17u);
  EXPECT_EQ(s.val.size(), 1u);
  EXPECT_EQ(s.test.size(), 2u);
}

TEST(Dataset, SplitPartitionInvariants) {
  for (int n = 0; n < 60; ++n) {
    const auto tiles = make_tiles(n);
    const std::array<double, 3> ratios{0.85, 0.05, 0.10};
    const auto s = split_tiles(tiles, ratios, static_cast<std::uint64_t>(n));
    std::set<TileIndex> all;
    for (const auto* part : {&s.train, &s.val, &s.test}) all.insert(part->begin(), part->end());
    EXPECT_EQ(all.size(), static_cast<std::size_t>(n));
    EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), static_cast<std::size_t>(n));
    const std::size_t sizes[] = {s.train.size(), s.val.size(), s.test.size()};
    for (int i = 0; i < 3; ++i) EXPECT_LE(std::abs(static_cast<double>(sizes[i]) - ratios[i] * n), 1.0);
  }
}

TEST(Dataset, SplitDeterminismAndSeedSensitivity) {
  const auto tiles = make_tiles(40);
  const auto a = split_tiles(tiles, {0.85, 0.05, 0.10}, 5);
  const auto b = split_tiles(tiles, {0.85, 0.05, 0.10}, 5);
  EXPECT_EQ(a.test, b.test);
  EXPECT_EQ(a.val, b.val);
  std::set<std::vector<TileIndex>> tests;
  for (std::uint64_t seed = 0; seed < 10; ++seed) tests.insert(split_tiles(tiles, {0.85, 0.05, 0.10}, seed).test);
  EXPECT_GE(tests.size(), 9u);
}

TEST(Dataset, SplitEdgeCases) {
  const auto e = split_tiles({}, {0.85, 0.05, 0.10}, 1);
  EXPECT_TRUE(e.train.empty() && e.val.empty() && e.test.empty());
  EXPECT_THROW(split_tiles(make_tiles(3), {0.5, 0.5, 0.5}, 1), DomainError);
}

TEST(Dataset, SynthGridCounts) {
  SynthParams p;
  p.grid_n = 2;
  const auto w = synth_city(p);
  EXPECT_EQ(w.nodes.size(), 4u);
  EXPECT_EQ(w.segments.size(), 8u);
  for (const auto& s : w.segments) {
    ASSERT_TRUE(s.twin_id);
    const auto it = std::find_if(w.segments.begin(), w.segments.end(), [&](const auto& t) { return t.id == *s.twin_id; });
    ASSERT_NE(it, w.segments.end());
    EXPECT_EQ(it->twin_id, s.id);
    EXPECT_EQ(it->points.front(), s.points.back());
  }
  EXPECT_THROW(synth_city({.grid_n = 1}), DomainError);
}

TEST(Dataset, SynthRushHourDip) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SynthParams p;
    p.seed = seed;
    const auto w = synth_city(p);
    int residential = 0;
    for (const auto& s : w.segments) {
      if (w.segment_info(s.id).road_class != RoadClass::residential) continue;
      ++residential;
      EXPECT_GT(w.speed(s.id, {5, 3}), w.speed(s.id, {0, 8}));
      EXPECT_GT(w.speed(s.id, {0, 4}), w.speed(s.id, {0, 8}));
    }
    EXPECT_GT(residential, 0);
  }
}

TEST(Dataset, SynthSpeedRange) {
  SynthParams p;
  p.direction_asymmetry = 0.25;
  const auto w = synth_city(p);
  for (const auto& s : w.segments)
    for (int i = 0; i < kSlotsPerWeek; ++i) {
      const double v = w.speed(s.id, TimeSlot::from_index(i));
      EXPECT_GE(v, 5.0);
      EXPECT_LE(v, 110.0);
    }
}

TEST(Dataset, SynthDeterministic) {
  SynthParams p;
  p.seed = 42;
  const auto a = synth_city(p), b = synth_city(p);
  ASSERT_EQ(a.segments.size(), b.segments.size());
  for (std::size_t i = 0; i < a.segments.size(); ++i) {
    EXPECT_EQ(a.segments[i].points, b.segments[i].points);
    EXPECT_EQ(a.speed(a.segments[i].id, {2, 17}), b.speed(b.segments[i].id, {2, 17}));
  }
  EXPECT_EQ(a.speed_table(), b.speed_table());
  EXPECT_EQ(a.texture_seed, b.texture_seed);
}

TEST(Dataset, SynthAsymmetryDistinguishesTwins) {
  SynthParams p;
  p.direction_asymmetry = 0.25;
  const auto w = synth_city(p);
  int differing = 0;
  for (const auto& s : w.segments)
    if (std::abs(w.speed(s.id, {0, 12}) - w.speed(*s.twin_id, {0, 12})) > 1.0) ++differing;
  EXPECT_GT(differing, 0);
}

TEST(Dataset, SynthCoverageDropsPairs) {
  SynthParams p;
  p.grid_n = 3;
  const auto full = synth_city(p).speed_table();
  p.coverage = 0.5;
  const auto part = synth_city(p).speed_table();
  EXPECT_LT(part.size(), full.size());
  EXPECT_GT(part.size(), full.size() / 4);
}

TEST(Dataset, RenderDeterministicAndBounded) {
  const auto w = synth_city({});
  const auto tiles = w.tiles();
  ASSERT_FALSE(tiles.empty());
  const auto a = render_image(w, tiles[tiles.size() / 2], 64);
  const auto b = render_image(w, tiles[tiles.size() / 2], 64);
  EXPECT_EQ(a, b);
  for (double v : a.data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_THROW(render_image(w, tiles[0], 8), DomainError);
}

TEST(Dataset, RenderEmptyTileIsBackground) {
  const auto w = synth_city({});
  auto bare = w;
  bare.segments.clear();
  const auto far = latlon_to_tile(w.nodes.front().position, w.params.tile_zoom);
  const TileIndex empty(far.x + 50, far.y + 50, far.zoom);
  EXPECT_EQ(render_image(w, empty, 64), render_image(bare, empty, 64));
}

TEST(Dataset, RenderHighwayCenterline) {
  SynthParams p;
  p.seed = 3;
  const auto w = synth_city(p);
  const auto it = std::find_if(w.segments.begin(), w.segments.end(), [&](const auto& s) {
    return w.segment_info(s.id).road_class == RoadClass::highway;
  });
  ASSERT_NE(it, w.segments.end());
  const auto& a = it->points.front();
  const auto& b = it->points.back();
  const GeoPoint mid((a.lat + b.lat) / 2, (a.lon + b.lon) / 2);
  const auto tile = latlon_to_tile(mid, p.tile_zoom);
  const auto frame = tile_pixel_frame(tile, p.tile_size_px);
  const auto px = frame.pixel_of(frame.to_local(mid));
  ASSERT_TRUE(px);
  const auto img = render_image(w, tile, p.tile_size_px);
  // road albedo: either the center marking or dark asphalt, never the green-dominant ground
  const double r = img.at(0, px->row, px->col), g = img.at(1, px->row, px->col);
  const bool marking = r > 0.8, asphalt = r < 0.25 && std::abs(r - g) < 1e-12;
  EXPECT_TRUE(marking || asphalt) << r << ' ' << g;
}
