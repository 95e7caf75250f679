#pragma once

// Geographic primitives: spherical-Mercator tiles, tile-local pixel frames,
// road segment geometry and the angle/bin conventions shared by the
// rasterizer and the model.
//
// Pixel frames use a planar equirectangular projection about the frame
// origin. Inside a single tile the error against true Mercator is far below
// a pixel, which keeps every raster operation exactly checkable against a
// brute-force distance test.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "dynaflow/error.hpp"

namespace dynaflow {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kEarthRadiusM = 6378137.0;
inline constexpr double kMercatorMaxLat = 85.0511287798066;
inline constexpr int kMaxZoom = 22;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

struct GeoPoint {
  double lat = 0.0;
  double lon = 0.0;

  GeoPoint() = default;
  GeoPoint(double lat_deg, double lon_deg) : lat(lat_deg), lon(lon_deg) {
    if (!(lat >= -90.0 && lat <= 90.0))
      throw DomainError("latitude out of range: " + std::to_string(lat));
    if (!(lon >= -180.0 && lon < 180.0))
      throw DomainError("longitude out of range: " + std::to_string(lon));
  }

  friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

struct TileIndex {
  std::int64_t x = 0;
  std::int64_t y = 0;
  int zoom = 0;

  TileIndex() = default;
  TileIndex(std::int64_t tx, std::int64_t ty, int z) : x(tx), y(ty), zoom(z) {
    if (z < 0 || z > kMaxZoom) throw DomainError("zoom out of range");
    const std::int64_t n = std::int64_t{1} << z;
    if (tx < 0 || ty < 0 || tx >= n || ty >= n)
      throw DomainError("tile index out of range for zoom");
  }

  friend bool operator==(const TileIndex&, const TileIndex&) = default;
  friend auto operator<=>(const TileIndex& a, const TileIndex& b) {
    return std::tie(a.zoom, a.x, a.y) <=> std::tie(b.zoom, b.x, b.y);
  }

  std::string key() const {
    return std::to_string(zoom) + "_" + std::to_string(x) + "_" + std::to_string(y);
  }

  // Inverse of key(); throws FormatError on malformed input.
  static TileIndex parse(const std::string& key) {
    long long z = 0, x = 0, y = 0;
    char tail = 0;
    if (std::sscanf(key.c_str(), "%lld_%lld_%lld%c", &z, &x, &y, &tail) != 3)
      throw FormatError("malformed tile key '" + key + "'");
    try {
      return {x, y, static_cast<int>(z)};
    } catch (const DomainError&) {
      throw FormatError("tile key out of range '" + key + "'");
    }
  }
};

inline TileIndex latlon_to_tile(const GeoPoint& p, int zoom) {
  if (zoom < 0 || zoom > kMaxZoom) throw DomainError("zoom out of range");
  if (std::abs(p.lat) > kMercatorMaxLat)
    throw DomainError("latitude beyond the Mercator limit");
  const double n = std::ldexp(1.0, zoom);
  const double lat = deg2rad(p.lat);
  const double fx = (p.lon + 180.0) / 360.0 * n;
  const double fy = (1.0 - std::asinh(std::tan(lat)) / kPi) / 2.0 * n;
  const auto last = static_cast<std::int64_t>(n) - 1;
  const auto x = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(fx)), 0, last);
  const auto y = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(fy)), 0, last);
  return {x, y, zoom};
}

// North-west corner of tile (x, y); pass x+1/y+1 for the opposite corner.
inline GeoPoint tile_corner(std::int64_t x, std::int64_t y, int zoom) {
  const double n = std::ldexp(1.0, zoom);
  const double lon = static_cast<double>(x) / n * 360.0 - 180.0;
  const double lat = rad2deg(std::atan(std::sinh(kPi * (1.0 - 2.0 * static_cast<double>(y) / n))));
  GeoPoint g;
  g.lat = lat;
  g.lon = lon;
  return g;
}

inline GeoPoint tile_center(const TileIndex& t) {
  const double n = std::ldexp(1.0, t.zoom);
  const double lon = (static_cast<double>(t.x) + 0.5) / n * 360.0 - 180.0;
  const double lat =
      rad2deg(std::atan(std::sinh(kPi * (1.0 - 2.0 * (static_cast<double>(t.y) + 0.5) / n))));
  return {lat, lon};
}

// Mercator ground resolution in meters per pixel for a tile rendered at
// size_px pixels.
inline double ground_resolution(double lat_deg, int zoom, int size_px) {
  return 2.0 * kPi * kEarthRadiusM * std::cos(deg2rad(lat_deg)) /
         (std::ldexp(1.0, zoom) * static_cast<double>(size_px));
}

inline double haversine_m(const GeoPoint& a, const GeoPoint& b) {
  const double dlat = deg2rad(b.lat - a.lat);
  const double dlon = deg2rad(b.lon - a.lon);
  const double s = std::sin(dlat / 2) * std::sin(dlat / 2) +
                   std::cos(deg2rad(a.lat)) * std::cos(deg2rad(b.lat)) *
                       std::sin(dlon / 2) * std::sin(dlon / 2);
  return 2.0 * kEarthRadiusM * std::asin(std::min(1.0, std::sqrt(s)));
}

struct Vec2 {
  double east = 0.0;
  double north = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.east + b.east, a.north + b.north}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.east - b.east, a.north - b.north}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.east, s * a.north}; }
  double norm() const { return std::hypot(east, north); }
};

inline double dot(Vec2 a, Vec2 b) { return a.east * b.east + a.north * b.north; }

struct Pixel {
  int row = 0;
  int col = 0;

  friend bool operator==(const Pixel&, const Pixel&) = default;
  friend auto operator<=>(const Pixel&, const Pixel&) = default;
};

// Sorted, duplicate-free list of raster pixels.
using PixelSet = std::vector<Pixel>;

inline void normalize_pixel_set(PixelSet& s) {
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
}

// A raster window onto the ground. Pixel (r, c) covers the unit square whose
// center sits at continuous coordinate (r + 0.5, c + 0.5); the projection
// origin sits at continuous coordinate (origin_row, origin_col). Crops share
// the projection of their parent tile and only shift the origin.
struct PixelFrame {
  GeoPoint origin;
  double meters_per_pixel = 1.0;
  int rows = 0;
  int cols = 0;
  double origin_row = 0.0;
  double origin_col = 0.0;

  Vec2 to_local(const GeoPoint& p) const {
    const double k = deg2rad(1.0) * kEarthRadiusM;
    return {(p.lon - origin.lon) * k * std::cos(deg2rad(origin.lat)), (p.lat - origin.lat) * k};
  }

  GeoPoint to_geo(Vec2 m) const {
    const double k = deg2rad(1.0) * kEarthRadiusM;
    GeoPoint g;
    g.lat = origin.lat + m.north / k;
    g.lon = origin.lon + m.east / (k * std::cos(deg2rad(origin.lat)));
    return g;
  }

  // Continuous (row, col) raster coordinate of a local point.
  std::pair<double, double> to_raster(Vec2 m) const {
    return {origin_row - m.north / meters_per_pixel, origin_col + m.east / meters_per_pixel};
  }

  Vec2 pixel_center(int r, int c) const {
    return {(c + 0.5 - origin_col) * meters_per_pixel, (origin_row - r - 0.5) * meters_per_pixel};
  }

  std::optional<Pixel> pixel_of(Vec2 m) const {
    const auto [fr, fc] = to_raster(m);
    const double r = std::floor(fr);
    const double c = std::floor(fc);
    if (r < 0 || c < 0 || r >= rows || c >= cols) return std::nullopt;
    return Pixel{static_cast<int>(r), static_cast<int>(c)};
  }

  bool contains(Pixel p) const { return p.row >= 0 && p.col >= 0 && p.row < rows && p.col < cols; }

  PixelFrame crop(int row0, int col0, int height, int width) const {
    if (row0 < 0 || col0 < 0 || height < 1 || width < 1 || row0 + height > rows ||
        col0 + width > cols)
      throw BoundsError("crop outside frame");
    PixelFrame f = *this;
    f.rows = height;
    f.cols = width;
    f.origin_row = origin_row - row0;
    f.origin_col = origin_col - col0;
    return f;
  }

  GeoPoint center() const { return to_geo(pixel_center_continuous(rows / 2.0, cols / 2.0)); }

 private:
  Vec2 pixel_center_continuous(double r, double c) const {
    return {(c - origin_col) * meters_per_pixel, (origin_row - r) * meters_per_pixel};
  }
};

inline PixelFrame tile_pixel_frame(const TileIndex& t, int size_px) {
  if (size_px < 1) throw DomainError("size_px must be >= 1");
  PixelFrame f;
  f.origin = tile_center(t);
  f.meters_per_pixel = ground_resolution(f.origin.lat, t.zoom, size_px);
  f.rows = size_px;
  f.cols = size_px;
  f.origin_row = size_px / 2.0;
  f.origin_col = size_px / 2.0;
  return f;
}

// Frame with explicit resolution; handy for synthetic fixtures.
inline PixelFrame make_frame(const GeoPoint& origin, double meters_per_pixel, int rows, int cols) {
  if (meters_per_pixel <= 0 || rows < 1 || cols < 1) throw DomainError("invalid frame");
  return {origin, meters_per_pixel, rows, cols, rows / 2.0, cols / 2.0};
}

struct RoadSegment {
  std::string id;
  std::vector<GeoPoint> points;
  std::optional<std::string> twin_id;
  double length_m = 0.0;
};

inline double polyline_length_m(const std::vector<GeoPoint>& pts) {
  double len = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) len += haversine_m(pts[i - 1], pts[i]);
  return len;
}

inline RoadSegment make_segment(std::string id, std::vector<GeoPoint> points,
                                std::optional<std::string> twin_id = std::nullopt) {
  if (points.size() < 2) throw DomainError("segment " + id + " needs at least two points");
  RoadSegment s{std::move(id), std::move(points), std::move(twin_id), 0.0};
  s.length_m = polyline_length_m(s.points);
  if (!(s.length_m > 0.0)) throw DomainError("segment " + s.id + " has zero length");
  return s;
}

// Same geometry traversed last point to first.
inline RoadSegment reversed(const RoadSegment& s, std::string new_id) {
  RoadSegment r = s;
  std::reverse(r.points.begin(), r.points.end());
  r.twin_id = s.id;
  r.id = std::move(new_id);
  return r;
}

// Angle of a direction vector measured from east, counterclockwise, in
// (-pi, pi].
inline double direction_to_angle(Vec2 d) {
  if (d.east == 0.0 && d.north == 0.0) throw DomainError("zero direction vector");
  const double a = std::atan2(d.north, d.east);
  return a <= -kPi ? kPi : a;
}

inline double wrap_angle(double theta) {
  double a = std::remainder(theta, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  return a;
}

// Bin i covers (-pi + i*w, -pi + (i+1)*w] with w = 2*pi/K.
inline int angle_to_bin(double theta, int num_bins) {
  if (num_bins < 1) throw DomainError("bin count must be >= 1");
  const double width = 2.0 * kPi / num_bins;
  const int i = static_cast<int>(std::ceil((theta + kPi) / width)) - 1;
  return std::clamp(i, 0, num_bins - 1);
}

inline double bin_center(int bin, int num_bins) {
  const double width = 2.0 * kPi / num_bins;
  return -kPi + (bin + 0.5) * width;
}

namespace detail {

inline double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = dot(ab, ab);
  double t = len2 > 0.0 ? dot(p - a, ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

inline std::vector<Vec2> project(const RoadSegment& s, const PixelFrame& frame) {
  std::vector<Vec2> out;
  out.reserve(s.points.size());
  for (const auto& p : s.points) out.push_back(frame.to_local(p));
  return out;
}

}  // namespace detail

// Pixels whose centers lie within half_width_m of the segment polyline.
inline PixelSet buffer_segment(const RoadSegment& s, const PixelFrame& frame, double half_width_m) {
  if (!(half_width_m > 0.0)) throw DomainError("half width must be positive");
  const auto pts = detail::project(s, frame);
  PixelSet out;
  const double pad = half_width_m / frame.meters_per_pixel + 1.0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const auto [r0, c0] = frame.to_raster(pts[i - 1]);
    const auto [r1, c1] = frame.to_raster(pts[i]);
    const int rlo = std::max(0, static_cast<int>(std::floor(std::min(r0, r1) - pad)));
    const int rhi = std::min(frame.rows - 1, static_cast<int>(std::ceil(std::max(r0, r1) + pad)));
    const int clo = std::max(0, static_cast<int>(std::floor(std::min(c0, c1) - pad)));
    const int chi = std::min(frame.cols - 1, static_cast<int>(std::ceil(std::max(c0, c1) + pad)));
    for (int r = rlo; r <= rhi; ++r) {
      for (int c = clo; c <= chi; ++c) {
        const Vec2 center = frame.pixel_center(r, c);
        if (detail::point_segment_distance(center, pts[i - 1], pts[i]) <= half_width_m)
          out.push_back({r, c});
      }
    }
  }
  normalize_pixel_set(out);
  return out;
}

struct DirectedSample {
  Pixel pixel;
  double theta = 0.0;
  std::string segment_id;
};

// Samples every spacing_m of arc length, replicated at integer-meter
// perpendicular offsets in [-lateral_m, lateral_m]. Samples falling outside
// the frame are dropped.
inline std::vector<DirectedSample> sample_along(const RoadSegment& s, const PixelFrame& frame,
                                                double spacing_m, double lateral_m) {
  if (!(spacing_m > 0.0)) throw DomainError("spacing must be positive");
  if (!(lateral_m >= 0.0)) throw DomainError("lateral extent must be non-negative");
  const auto pts = detail::project(s, frame);
  std::vector<double> cum(pts.size(), 0.0);
  for (std::size_t i = 1; i < pts.size(); ++i) cum[i] = cum[i - 1] + (pts[i] - pts[i - 1]).norm();
  const double total = cum.back();
  const auto count = static_cast<long>(std::floor(total / spacing_m * (1.0 + 1e-9) + 1e-9));
  const int lat_steps = static_cast<int>(std::floor(lateral_m + 1e-9));

  std::vector<DirectedSample> out;
  std::size_t piece = 1;
  for (long k = 0; k <= count; ++k) {
    const double arc = std::min(k * spacing_m, total);
    while (piece + 1 < pts.size() && cum[piece] <= arc && cum[piece] < total) ++piece;
    // skip degenerate pieces
    while (piece + 1 < pts.size() && cum[piece] - cum[piece - 1] <= 0.0) ++piece;
    const Vec2 a = pts[piece - 1];
    const Vec2 b = pts[piece];
    const double len = cum[piece] - cum[piece - 1];
    if (len <= 0.0) continue;
    const Vec2 tangent = (1.0 / len) * (b - a);
    const Vec2 normal{-tangent.north, tangent.east};
    const Vec2 base = a + (arc - cum[piece - 1]) * tangent;
    const double theta = direction_to_angle(tangent);
    for (int j = -lat_steps; j <= lat_steps; ++j) {
      if (auto px = frame.pixel_of(base + static_cast<double>(j) * normal))
        out.push_back({*px, theta, s.id});
    }
  }
  return out;
}

}  // namespace dynaflow
