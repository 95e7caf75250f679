#pragma once

// Brute-force geometry and graph references shared by the unit tests and the
// acceptance binary.

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "dynaflow/geo.hpp"
#include "dynaflow/graph.hpp"
#include "dynaflow/rng.hpp"

namespace oracle {

using namespace dynaflow;

inline RoadSegment local_segment(const PixelFrame& f, const std::vector<Vec2>& pts, std::string id = "s") {
  std::vector<GeoPoint> g;
  for (auto v : pts) g.push_back(f.to_geo(v));
  return make_segment(std::move(id), g);
}

// Point-to-segment distance via a clamped projection parameter.
inline double distance(Vec2 p, Vec2 a, Vec2 b) {
  const double dx = b.east - a.east, dy = b.north - a.north;
  const double len2 = dx * dx + dy * dy;
  double t = ((p.east - a.east) * dx + (p.north - a.north) * dy) / len2;
  t = t < 0 ? 0 : (t > 1 ? 1 : t);
  const double ex = a.east + t * dx - p.east, ey = a.north + t * dy - p.north;
  return std::sqrt(ex * ex + ey * ey);
}

// Every pixel whose center lies within hw of the polyline.
inline PixelSet buffer(const RoadSegment& s, const PixelFrame& f, double hw) {
  std::vector<Vec2> pts;
  for (const auto& p : s.points) pts.push_back(f.to_local(p));
  PixelSet out;
  for (int r = 0; r < f.rows; ++r)
    for (int c = 0; c < f.cols; ++c) {
      const Vec2 center{(c + 0.5 - f.origin_col) * f.meters_per_pixel, (f.origin_row - r - 0.5) * f.meters_per_pixel};
      bool in = false;
      for (std::size_t i = 1; i < pts.size() && !in; ++i) in = distance(center, pts[i - 1], pts[i]) <= hw;
      if (in) out.push_back({r, c});
    }
  return out;
}

// Strip samples of a straight two-point segment: one step per meter from the
// start, five lateral offsets -2..2 m, in-frame pixels only.
inline std::vector<std::pair<Pixel, double>> strip_samples(const RoadSegment& s, const PixelFrame& f) {
  const auto pa = f.to_local(s.points.front()), pb = f.to_local(s.points.back());
  const double len = std::hypot(pb.east - pa.east, pb.north - pa.north);
  const double ux = (pb.east - pa.east) / len, uy = (pb.north - pa.north) / len;
  std::vector<std::pair<Pixel, double>> out;
  for (int k = 0; k <= static_cast<int>(std::floor(len + 1e-9)); ++k)
    for (int j = -2; j <= 2; ++j) {
      const double e = pa.east + k * ux - j * uy, n = pa.north + k * uy + j * ux;
      const double r = std::floor(f.origin_row - n / f.meters_per_pixel);
      const double c = std::floor(f.origin_col + e / f.meters_per_pixel);
      if (r >= 0 && c >= 0 && r < f.rows && c < f.cols)
        out.push_back({{static_cast<int>(r), static_cast<int>(c)}, std::atan2(uy, ux)});
    }
  return out;
}

inline bool samples_match(const std::vector<DirectedSample>& got, const std::vector<std::pair<Pixel, double>>& want) {
  if (got.size() != want.size()) return false;
  for (std::size_t k = 0; k < got.size(); ++k)
    if (!(got[k].pixel == want[k].first) || std::abs(got[k].theta - want[k].second) > 1e-12) return false;
  return true;
}

// Graph with 2..8 nodes and random directed edges carrying length and time.
inline RoadGraph random_graph(Rng& rng, bool with_times) {
  const PixelFrame f = make_frame(GeoPoint(47.6, -122.3), 1.0, 16, 16);
  RoadGraph g;
  const int n = 2 + static_cast<int>(rng.below(7));
  for (int i = 0; i < n; ++i) g.add_node("v" + std::to_string(i), f.to_geo({double(i), 0.0}));
  const int m = static_cast<int>(rng.below(static_cast<std::uint64_t>(n * 3)));
  for (int k = 0; k < m; ++k) {
    const auto a = rng.below(static_cast<std::uint64_t>(n)), b = rng.below(static_cast<std::uint64_t>(n));
    if (a == b) continue;
    GraphEdge e{a, b, "e" + std::to_string(k), rng.uniform(1, 100), std::numeric_limits<double>::quiet_NaN(),
                {g.nodes[a].position, g.nodes[b].position}};
    if (with_times) e.time_s = rng.uniform(1, 60);
    g.add_edge(e);
  }
  return g;
}

// Minimum over all simple paths by exhaustive depth-first enumeration.
inline double best_path(const RoadGraph& g, std::size_t s, std::size_t t, RouteWeight w) {
  double best = std::numeric_limits<double>::infinity();
  std::vector<bool> on(g.nodes.size(), false);
  std::function<void(std::size_t, double)> go = [&](std::size_t u, double d) {
    if (u == t) {
      best = std::min(best, d);
      return;
    }
    on[u] = true;
    for (const auto& e : g.edges)
      if (e.from == u && !on[e.to]) go(e.to, d + (w == RouteWeight::length ? e.length_m : e.time_s));
    on[u] = false;
  };
  go(s, 0.0);
  return best;
}

// Dijkstra result equals the exhaustive optimum and the route is connected.
inline bool route_matches(const RoadGraph& g, std::size_t s, std::size_t t, RouteWeight w) {
  const double best = best_path(g, s, t, w);
  const auto r = shortest_path(g, g.nodes[s].id, g.nodes[t].id, w);
  if (!std::isfinite(best)) return !r;
  if (!r) return false;
  const double got = w == RouteWeight::length ? r->total_length_m : r->total_time_s;
  if (std::abs(got - best) > 1e-9) return false;
  std::size_t at = s;
  for (auto ei : r->edges) {
    if (g.edges[ei].from != at) return false;
    at = g.edges[ei].to;
  }
  return at == t;
}

}  // namespace oracle
