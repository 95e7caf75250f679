#pragma once

// Road graph built from directed segments, per-slot travel times, routing
// and isochrones, plus the GeoJSON formats the CLI reads and writes.

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "json.hpp"

#include "dynaflow/dataset.hpp"
#include "dynaflow/error.hpp"
#include "dynaflow/geo.hpp"

namespace dynaflow {

inline constexpr double kSnapToleranceM = 0.5;

struct GraphNode {
  std::string id;
  GeoPoint position;
};

struct GraphEdge {
  std::size_t from = 0;
  std::size_t to = 0;
  std::string segment_id;
  double length_m = 0.0;
  double time_s = std::numeric_limits<double>::quiet_NaN();
  std::vector<GeoPoint> geometry;
};

class RoadGraph {
 public:
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;
  std::vector<std::vector<std::size_t>> out_edges;

  std::optional<std::size_t> find_node(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t node_at(const std::string& id) const {
    if (auto i = find_node(id)) return *i;
    throw BoundsError("unknown node '" + id + "'");
  }

  std::size_t add_node(std::string id, GeoPoint p) {
    if (index_.count(id)) throw DomainError("duplicate node id '" + id + "'");
    index_[id] = nodes.size();
    nodes.push_back({std::move(id), p});
    out_edges.emplace_back();
    return nodes.size() - 1;
  }

  void add_edge(GraphEdge e) {
    if (e.from >= nodes.size() || e.to >= nodes.size()) throw BoundsError("edge endpoint does not exist");
    if (!(e.length_m > 0.0)) throw DomainError("edge '" + e.segment_id + "' has non-positive length");
    out_edges[e.from].push_back(edges.size());
    edges.push_back(std::move(e));
  }

  bool has_times() const {
    for (const auto& e : edges)
      if (std::isnan(e.time_s)) return false;
    return true;
  }

 private:
  std::map<std::string, std::size_t> index_;
};

struct SegmentEnds {
  std::string from;
  std::string to;
};

// One directed edge per segment. Endpoints with known node ids use them;
// other endpoints snap to an existing node within 0.5 m or create one.
inline RoadGraph build_graph(const std::vector<RoadSegment>& segments,
                             const std::map<std::string, SegmentEnds>& ends = {}) {
  RoadGraph g;
  auto locate = [&](const GeoPoint& p, const std::string* id) -> std::size_t {
    if (id) {
      if (auto i = g.find_node(*id)) return *i;
      return g.add_node(*id, p);
    }
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
      if (haversine_m(g.nodes[i].position, p) <= kSnapToleranceM) return i;
    return g.add_node("n" + std::to_string(g.nodes.size()), p);
  };
  for (const auto& s : segments) {
    if (s.points.size() < 2 || !(s.length_m > 0.0)) throw DomainError("segment '" + s.id + "' has zero length");
    auto it = ends.find(s.id);
    const std::size_t a = locate(s.points.front(), it != ends.end() ? &it->second.from : nullptr);
    const std::size_t b = locate(s.points.back(), it != ends.end() ? &it->second.to : nullptr);
    g.add_edge({a, b, s.id, s.length_m, std::numeric_limits<double>::quiet_NaN(), s.points});
  }
  return g;
}

inline double travel_time_s(double length_m, double speed_kmh) { return 3.6 * length_m / speed_kmh; }

struct SpeedAssignment {
  std::size_t covered = 0;
  std::size_t fallback = 0;
  double fallback_kmh = 0.0;
};

// Edge times from per-segment speeds for one slot; edges without a
// prediction use the mean of all predictions.
inline SpeedAssignment assign_speeds(RoadGraph& g, const std::map<std::string, double>& speeds_kmh) {
  if (speeds_kmh.empty()) throw ConfigError("no speed predictions to assign");
  double sum = 0.0;
  for (const auto& [id, v] : speeds_kmh) {
    if (!(v > 0.0) || !std::isfinite(v)) throw DomainError("speed for '" + id + "' must be positive");
    sum += v;
  }
  SpeedAssignment a;
  a.fallback_kmh = sum / static_cast<double>(speeds_kmh.size());
  for (auto& e : g.edges) {
    auto it = speeds_kmh.find(e.segment_id);
    if (it != speeds_kmh.end()) {
      e.time_s = travel_time_s(e.length_m, it->second);
      ++a.covered;
    } else {
      e.time_s = travel_time_s(e.length_m, a.fallback_kmh);
      ++a.fallback;
    }
  }
  return a;
}

enum class RouteWeight { length, time };

struct Route {
  std::vector<std::string> nodes;
  std::vector<std::size_t> edges;
  double total_length_m = 0.0;
  double total_time_s = 0.0;
};

namespace detail {

inline double edge_weight(const GraphEdge& e, RouteWeight w) {
  return w == RouteWeight::length ? e.length_m : e.time_s;
}

struct Labels {
  std::vector<double> dist;
  std::vector<std::size_t> via;  // incoming edge, npos at the source or when unreached
};

inline constexpr std::size_t kNoEdge = std::numeric_limits<std::size_t>::max();

inline Labels dijkstra(const RoadGraph& g, std::size_t src, RouteWeight w) {
  if (w == RouteWeight::time && !g.has_times()) throw ConfigError("time-weighted query on a graph without speeds");
  Labels l{std::vector<double>(g.nodes.size(), std::numeric_limits<double>::infinity()),
           std::vector<std::size_t>(g.nodes.size(), kNoEdge)};
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  l.dist[src] = 0.0;
  pq.push({0.0, src});
  while (!pq.empty()) {
    const auto [d, u] = pq.top();
    pq.pop();
    if (d > l.dist[u]) continue;
    for (std::size_t ei : g.out_edges[u]) {
      const auto& e = g.edges[ei];
      const double wt = edge_weight(e, w);
      if (wt < 0.0) throw DomainError("negative edge weight");
      const double nd = d + wt;
      if (nd < l.dist[e.to]) {
        l.dist[e.to] = nd;
        l.via[e.to] = ei;
        pq.push({nd, e.to});
      }
    }
  }
  return l;
}

}  // namespace detail

// Minimal-weight route, or nothing when dst is unreachable.
inline std::optional<Route> shortest_path(const RoadGraph& g, const std::string& src, const std::string& dst,
                                          RouteWeight w) {
  const std::size_t s = g.node_at(src), t = g.node_at(dst);
  const auto l = detail::dijkstra(g, s, w);
  if (!std::isfinite(l.dist[t])) return std::nullopt;
  Route r;
  std::vector<std::size_t> rev;
  for (std::size_t v = t; v != s; v = g.edges[l.via[v]].from) rev.push_back(l.via[v]);
  r.edges.assign(rev.rbegin(), rev.rend());
  r.nodes.push_back(g.nodes[s].id);
  for (std::size_t ei : r.edges) {
    const auto& e = g.edges[ei];
    r.nodes.push_back(g.nodes[e.to].id);
    r.total_length_m += e.length_m;
    if (!std::isnan(e.time_s)) r.total_time_s += e.time_s;
  }
  if (w == RouteWeight::length && !g.has_times()) r.total_time_s = std::numeric_limits<double>::quiet_NaN();
  return r;
}

struct IsochroneLevel {
  double budget_s = 0.0;
  std::vector<std::string> nodes;
};

struct IsochroneResult {
  std::string source;
  std::vector<IsochroneLevel> levels;
};

inline IsochroneResult isochrone(const RoadGraph& g, const std::string& src, const std::vector<double>& budgets_s) {
  for (std::size_t i = 0; i < budgets_s.size(); ++i) {
    if (!(budgets_s[i] >= 0.0)) throw DomainError("isochrone budgets must be non-negative");
    if (i > 0 && !(budgets_s[i] > budgets_s[i - 1])) throw DomainError("isochrone budgets must increase strictly");
  }
  const auto l = detail::dijkstra(g, g.node_at(src), RouteWeight::time);
  IsochroneResult res{src, {}};
  for (double b : budgets_s) {
    IsochroneLevel level{b, {}};
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
      if (l.dist[i] <= b) level.nodes.push_back(g.nodes[i].id);
    res.levels.push_back(std::move(level));
  }
  return res;
}

// ---------------------------------------------------------------------------
// GeoJSON

namespace detail {

inline nlohmann::json coords(const GeoPoint& p) { return nlohmann::json::array({p.lon, p.lat}); }

}  // namespace detail

inline nlohmann::json route_geojson(const RoadGraph& g, const Route& r) {
  nlohmann::json line = nlohmann::json::array();
  if (r.edges.empty()) {
    line.push_back(detail::coords(g.nodes[g.node_at(r.nodes.front())].position));
  }
  for (std::size_t i = 0; i < r.edges.size(); ++i) {
    const auto& geom = g.edges[r.edges[i]].geometry;
    for (std::size_t k = i == 0 ? 0 : 1; k < geom.size(); ++k) line.push_back(detail::coords(geom[k]));
  }
  nlohmann::json props = {{"nodes", r.nodes}, {"total_length_m", r.total_length_m}};
  props["total_time_s"] = std::isnan(r.total_time_s) ? nlohmann::json(nullptr) : nlohmann::json(r.total_time_s);
  return {{"type", "FeatureCollection"},
          {"features",
           {{{"type", "Feature"}, {"geometry", {{"type", "LineString"}, {"coordinates", line}}}, {"properties", props}}}}};
}

inline nlohmann::json isochrone_geojson(const RoadGraph& g, const IsochroneResult& iso) {
  nlohmann::json features = nlohmann::json::array();
  for (const auto& level : iso.levels) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& id : level.nodes) pts.push_back(detail::coords(g.nodes[g.node_at(id)].position));
    features.push_back({{"type", "Feature"},
                        {"geometry", {{"type", "MultiPoint"}, {"coordinates", pts}}},
                        {"properties", {{"source", iso.source}, {"budget_s", level.budget_s}, {"nodes", level.nodes}}}});
  }
  return {{"type", "FeatureCollection"}, {"features", features}};
}

// Road network as LineString features carrying id, twin_id, from, to,
// road_class and length_m.
inline nlohmann::json world_geojson(const SynthWorld& w) {
  nlohmann::json features = nlohmann::json::array();
  for (const auto& s : w.segments) {
    const auto& info = w.segment_info(s.id);
    nlohmann::json line = nlohmann::json::array();
    for (const auto& p : s.points) line.push_back(detail::coords(p));
    features.push_back({{"type", "Feature"},
                        {"geometry", {{"type", "LineString"}, {"coordinates", line}}},
                        {"properties",
                         {{"id", s.id},
                          {"twin_id", s.twin_id ? nlohmann::json(*s.twin_id) : nlohmann::json(nullptr)},
                          {"from", info.from},
                          {"to", info.to},
                          {"road_class", to_string(info.road_class)},
                          {"length_m", s.length_m}}}});
  }
  return {{"type", "FeatureCollection"}, {"features", features}};
}

struct SegmentCollection {
  std::vector<RoadSegment> segments;
  std::map<std::string, SegmentEnds> ends;
  std::map<std::string, RoadClass> classes;
};

inline SegmentCollection read_segments_geojson(const nlohmann::json& doc) {
  if (!doc.is_object() || doc.value("type", "") != "FeatureCollection" || !doc.contains("features"))
    throw FormatError("expected a GeoJSON FeatureCollection");
  SegmentCollection out;
  for (const auto& f : doc.at("features")) {
    const auto& geom = f.at("geometry");
    if (geom.at("type") != "LineString") throw FormatError("segment features must be LineStrings");
    const auto& props = f.at("properties");
    const std::string id = props.at("id").get<std::string>();
    std::vector<GeoPoint> pts;
    for (const auto& c : geom.at("coordinates")) pts.emplace_back(c.at(1).get<double>(), c.at(0).get<double>());
    std::optional<std::string> twin;
    if (props.contains("twin_id") && props.at("twin_id").is_string()) twin = props.at("twin_id").get<std::string>();
    out.segments.push_back(make_segment(id, pts, twin));
    if (props.contains("from") && props.contains("to"))
      out.ends[id] = {props.at("from").get<std::string>(), props.at("to").get<std::string>()};
    if (props.contains("road_class")) out.classes[id] = road_class_from_string(props.at("road_class").get<std::string>());
  }
  return out;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot read " + path);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline void write_json_file(const std::string& path, const nlohmann::json& doc) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path);
  f << doc.dump(2) << '\n';
}

}  // namespace dynaflow
