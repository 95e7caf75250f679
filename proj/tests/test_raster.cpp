#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "dynaflow/raster.hpp"
#include "dynaflow/rng.hpp"

using namespace dynaflow;

namespace {

const GeoPoint kOrigin(47.6, -122.3);

RoadSegment local_segment(const PixelFrame& f, std::vector<Vec2> pts, std::string id,
                          std::optional<std::string> twin = std::nullopt) {
  std::vector<GeoPoint> g;
  for (auto v : pts) g.push_back(f.to_geo(v));
  return make_segment(std::move(id), g, std::move(twin));
}

PixelFrame frame64() { return make_frame(kOrigin, 0.3, 64, 64); }

}  // namespace

TEST(Raster, EmptyMask) {
  const auto m = road_mask(frame64(), {});
  EXPECT_EQ(m.count(), 0u);
  EXPECT_EQ(m.rows, 64);
}

TEST(Raster, MaskIsUnionOfBuffers) {
  Rng rng(2);
  const auto f = frame64();
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<RoadSegment> segs;
    for (int i = 0; i < 3; ++i)
      segs.push_back(local_segment(
          f, {{rng.uniform(-10, 10), rng.uniform(-10, 10)}, {rng.uniform(-10, 10), rng.uniform(-10, 10)}},
          "s" + std::to_string(i)));
    const auto m = road_mask(f, segs);
    RoadMask expect(64, 64);
    for (const auto& s : segs)
      for (const auto& p : buffer_segment(s, f, 2.0)) expect.at(p.row, p.col) = 1;
    EXPECT_EQ(m, expect);
    for (auto v : m.data) EXPECT_LE(v, 1);
  }
}

TEST(Raster, CrossingSegmentsCountedOnce) {
  const auto f = frame64();
  const auto a = local_segment(f, {{-8, 0.1}, {8, 0.1}}, "a");
  const auto b = local_segment(f, {{0.1, -8}, {0.1, 8}}, "b");
  const auto pa = buffer_segment(a, f, 2.0), pb = buffer_segment(b, f, 2.0);
  PixelSet both = pa;
  both.insert(both.end(), pb.begin(), pb.end());
  normalize_pixel_set(both);
  EXPECT_EQ(road_mask(f, {a, b}).count(), both.size());
  EXPECT_LT(both.size(), pa.size() + pb.size());
}

TEST(Raster, EastboundLabelsInBinSeven) {
  const auto f = frame64();
  // identical latitude endpoints give an exactly eastward tangent
  const GeoPoint a(kOrigin.lat, kOrigin.lon - 0.0001), b(kOrigin.lat, kOrigin.lon + 0.0001);
  const auto labels = orientation_labels(f, {make_segment("e", {a, b})}, 16);
  ASSERT_FALSE(labels.empty());
  for (const auto& l : labels) EXPECT_EQ(l.bin, 7);
}

TEST(Raster, TwinLabelsOffsetByHalf) {
  const auto f = frame64();
  const auto s = local_segment(f, {{-6.03, -4.07}, {5.97, 4.93}}, "s", "t");  // 15 m, so both directions sample the same points
  const auto t = reversed(s, "t");
  const int k = 16;
  const auto ls = orientation_labels(f, {s}, k), lt = orientation_labels(f, {t}, k);
  ASSERT_EQ(ls.size(), lt.size());
  for (std::size_t i = 0; i < ls.size(); ++i) {
    EXPECT_EQ(ls[i].pixel, lt[i].pixel);
    EXPECT_EQ((ls[i].bin + k / 2) % k, lt[i].bin);
  }
  // both labels survive on shared pixels
  EXPECT_EQ(orientation_labels(f, {s, t}, k).size(), 2 * ls.size());
}

TEST(Raster, EmptyTileHasNoLabels) {
  EXPECT_TRUE(orientation_labels(frame64(), {}).empty());
  EXPECT_THROW(orientation_labels(frame64(), {}, 0), DomainError);
}

TEST(Raster, LabelsInsideDilatedMask) {
  Rng rng(9);
  const auto f = frame64();
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = local_segment(
        f, {{rng.uniform(-9, 9), rng.uniform(-9, 9)}, {rng.uniform(-9, 9), rng.uniform(-9, 9)}}, "s");
    const auto dilated = buffer_segment(s, f, kSampleLateralM + f.meters_per_pixel);
    for (const auto& l : orientation_labels(f, {s}))
      EXPECT_TRUE(std::binary_search(dilated.begin(), dilated.end(), l.pixel));
  }
}

TEST(Raster, SpeedSupervisionEntries) {
  const auto f = frame64();
  const std::vector<RoadSegment> segs = {local_segment(f, {{-8, 1.1}, {8, 1.1}}, "a"),
                                         local_segment(f, {{1.3, -8}, {1.3, 8}}, "b"),
                                         local_segment(f, {{-8, -6}, {8, 6}}, "c")};
  const TimeSlot mon8(0, 8);
  EXPECT_TRUE(speed_supervision(f, segs, SpeedTable{}, mon8).empty());
  SpeedTable t;
  t.set("a", mon8, {37.25, 4});
  t.set("c", mon8, {12.5, 1});
  t.set("b", {1, 8}, {50, 1});
  const auto sup = speed_supervision(f, segs, t, mon8);
  ASSERT_EQ(sup.size(), 2u);
  EXPECT_EQ(sup[0].segment_id, "a");
  EXPECT_EQ(sup[0].target_kmh, 37.25);
  EXPECT_EQ(sup[1].target_kmh, 12.5);
  for (const auto& e : sup) {
    EXPECT_FALSE(e.pixels.empty());
    EXPECT_EQ(e.pixels.size(), e.thetas.size());
    EXPECT_TRUE(std::is_sorted(e.pixels.begin(), e.pixels.end()));
  }
}

TEST(Raster, SupervisionRoundTrip) {
  const auto f = frame64();
  SpeedTable t;
  t.set("a", {3, 17}, {1.0 / 3.0, 4});
  const auto sup = speed_supervision(f, {local_segment(f, {{-8, 1.1}, {8, 2.1}}, "a")}, t, {3, 17});
  std::stringstream s;
  write_supervision(s, sup, {3, 17}, f);
  TimeSlot slot;
  EXPECT_EQ(read_supervision(s, &slot), sup);
  EXPECT_EQ(slot, TimeSlot(3, 17));
  std::istringstream bad("nope\n");
  EXPECT_THROW(read_supervision(bad), FormatError);
}

TEST(Raster, SpeedColormap) {
  Image img(1, 1, 3, std::numeric_limits<double>::quiet_NaN());
  img.at(0, 0, 0) = 0.0;
  img.at(0, 0, 1) = 110.0;
  const auto px = render_speed_raster(img);
  EXPECT_EQ(std::vector<std::uint8_t>(px.px(0, 0), px.px(0, 0) + 4), (std::vector<std::uint8_t>{255, 0, 0, 255}));
  EXPECT_EQ(std::vector<std::uint8_t>(px.px(0, 1), px.px(0, 1) + 4), (std::vector<std::uint8_t>{0, 255, 0, 255}));
  EXPECT_EQ(px.px(0, 2)[3], 0);
  EXPECT_THROW(render_speed_raster(Image(3, 1, 1)), ShapeError);
}
