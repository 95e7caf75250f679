#pragma once

// Optimization, the dynamic-time training loop, and evaluation.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "dynaflow/autodiff.hpp"
#include "dynaflow/dataset.hpp"
#include "dynaflow/geo.hpp"
#include "dynaflow/image.hpp"
#include "dynaflow/losses.hpp"
#include "dynaflow/model.hpp"
#include "dynaflow/parallel.hpp"
#include "dynaflow/raster.hpp"
#include "dynaflow/rng.hpp"

namespace dynaflow {

// ---------------------------------------------------------------------------
// RAdam + Lookahead

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int lookahead_k = 5;
  double lookahead_alpha = 0.5;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("betas must lie in [0, 1)");
    if (lookahead_k < 1) throw ConfigError("lookahead_k must be >= 1");
    if (!(lookahead_alpha >= 0.0 && lookahead_alpha <= 1.0)) throw ConfigError("lookahead_alpha must lie in [0, 1]");
  }
};

struct RAdamState {
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

struct LookaheadState {
  std::size_t inner_steps = 0;
  std::vector<std::vector<double>> slow;
};

struct OptimizerState {
  OptimizerConfig config;
  RAdamState radam;
  LookaheadState lookahead;
};

// Length of the approximated simple moving average at step t.
inline double radam_rho(std::size_t t, double beta2) {
  const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
  const double bt = std::pow(beta2, static_cast<double>(t));
  return rho_inf - 2.0 * static_cast<double>(t) * bt / (1.0 - bt);
}

// One rectified-Adam update using each parameter's accumulated gradient
// (parameters without a gradient see zeros).
inline void radam_step(std::vector<Tensor>& params, RAdamState& st, const OptimizerConfig& cfg) {
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.numel(), 0.0);
      st.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw ShapeError("optimizer state does not match parameters");
  ++st.step;
  const auto t = static_cast<double>(st.step);
  const double b1t = 1.0 - std::pow(cfg.beta1, t);
  const double b2t = 1.0 - std::pow(cfg.beta2, t);
  const double rho_inf = 2.0 / (1.0 - cfg.beta2) - 1.0;
  const double rho = radam_rho(st.step, cfg.beta2);
  const bool adaptive = rho > 4.0;
  const double rect =
      adaptive ? std::sqrt((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)) : 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = st.m[i];
    auto& v = st.v[i];
    if (m.size() != p.numel()) throw ShapeError("optimizer moment shape mismatch");
    const bool has = p.has_grad();
    auto x = p.data();
    for (std::size_t j = 0; j < m.size(); ++j) {
      const double g = has ? std::as_const(p).grad()[j] : 0.0;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[j] / b1t;
      if (adaptive) {
        const double vhat = std::sqrt(v[j] / b2t);
        x[j] -= cfg.lr * rect * mhat / (vhat + cfg.eps);
      } else {
        x[j] -= cfg.lr * mhat;
      }
    }
  }
}

inline void lookahead_init(const std::vector<Tensor>& params, LookaheadState& st) {
  st.inner_steps = 0;
  st.slow.clear();
  for (const auto& p : params) st.slow.push_back(p.values());
}

// Called after every inner step; every k steps pulls the slow weights toward
// the fast ones and restarts the fast weights from there.
inline void lookahead_step(std::vector<Tensor>& params, LookaheadState& st, int k, double alpha) {
  if (st.slow.size() != params.size()) throw ShapeError("lookahead state does not match parameters");
  ++st.inner_steps;
  if (st.inner_steps % static_cast<std::size_t>(k) != 0) return;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto x = params[i].data();
    auto& slow = st.slow[i];
    for (std::size_t j = 0; j < slow.size(); ++j) {
      slow[j] += alpha * (x[j] - slow[j]);
      x[j] = slow[j];
    }
  }
}

inline OptimizerState make_optimizer(const std::vector<Tensor>& params, const OptimizerConfig& cfg) {
  cfg.validate();
  OptimizerState st;
  st.config = cfg;
  lookahead_init(params, st.lookahead);
  return st;
}

inline void optimizer_step(std::vector<Tensor>& params, OptimizerState& st) {
  radam_step(params, st.radam, st.config);
  lookahead_step(params, st.lookahead, st.config.lookahead_k, st.config.lookahead_alpha);
}

// ---------------------------------------------------------------------------
// Per-tile data

struct TileData {
  TileIndex tile;
  PixelFrame frame;
  Image image;
  std::vector<RoadSegment> segments;  // segments that may touch the tile
  SpeedSupervision strips;            // in-tile sample pixels per segment, target unset
  std::vector<TimeSlot> slots;        // slots with at least one supervised segment
};

// Tile imagery as stored on disk: rendered, then quantized to 8 bits.
inline Image tile_image(const SynthWorld& world, const TileIndex& tile) {
  return rgb_image(to_rgba(render_image(world, tile, world.params.tile_size_px)));
}

inline bool segment_near_frame(const RoadSegment& s, const PixelFrame& frame, double margin_m) {
  const double pad = margin_m / frame.meters_per_pixel + 1.0;
  double rlo = std::numeric_limits<double>::infinity(), rhi = -rlo, clo = rlo, chi = -rlo;
  for (const auto& p : s.points) {
    const auto [r, c] = frame.to_raster(frame.to_local(p));
    rlo = std::min(rlo, r);
    rhi = std::max(rhi, r);
    clo = std::min(clo, c);
    chi = std::max(chi, c);
  }
  return rhi + pad >= 0.0 && rlo - pad <= frame.rows && chi + pad >= 0.0 && clo - pad <= frame.cols;
}

inline TileData make_tile_data(const TileIndex& tile, Image image, const std::vector<RoadSegment>& all,
                               const SpeedTable& table) {
  TileData td;
  td.tile = tile;
  td.frame = tile_pixel_frame(tile, image.rows);
  td.image = std::move(image);
  const double margin = std::max(kRoadHalfWidthM, kSampleLateralM) + 1.0;
  std::set<TimeSlot> slots;
  for (const auto& s : all) {
    if (!segment_near_frame(s, td.frame, margin)) continue;
    td.segments.push_back(s);
    auto [pixels, thetas] = segment_strip(s, td.frame);
    if (pixels.empty()) continue;
    for (const auto& slot : table.slots_for(s.id)) slots.insert(slot);
    td.strips.push_back({s.id, std::move(pixels), 0.0, std::move(thetas)});
  }
  td.slots.assign(slots.begin(), slots.end());
  return td;
}

inline std::vector<TileData> make_tiles(const SynthWorld& world, const SpeedTable& table,
                                        const std::vector<TileIndex>& tiles) {
  std::vector<TileData> out(tiles.size());
  parallel_for(tiles.size(), [&](std::size_t i) {
    out[i] = make_tile_data(tiles[i], tile_image(world, tiles[i]), world.segments, table);
  });
  return out;
}

inline SpeedSupervision supervision_for_slot(const TileData& td, const SpeedTable& table, TimeSlot slot) {
  SpeedSupervision out;
  for (const auto& e : td.strips)
    if (auto st = table.find(e.segment_id, slot)) {
      out.push_back(e);
      out.back().target_kmh = st->mean_kmh;
    }
  return out;
}

inline TileTargets make_targets(const PixelFrame& frame, const std::vector<RoadSegment>& segments,
                                const SpeedTable& table, TimeSlot slot, int bins) {
  return {road_mask(frame, segments), orientation_labels(frame, segments, bins),
          speed_supervision(frame, segments, table, slot)};
}

// Mean and spread of training tile centers; a zero spread normalizes by 1.
inline LocationNorm location_norm(const std::vector<TileData>& tiles) {
  LocationNorm n;
  if (tiles.empty()) return n;
  double slat = 0.0, slon = 0.0;
  for (const auto& t : tiles) {
    const GeoPoint c = t.frame.center();
    slat += c.lat;
    slon += c.lon;
  }
  const auto count = static_cast<double>(tiles.size());
  n.lat_mean = slat / count;
  n.lon_mean = slon / count;
  double vlat = 0.0, vlon = 0.0;
  for (const auto& t : tiles) {
    const GeoPoint c = t.frame.center();
    vlat += (c.lat - n.lat_mean) * (c.lat - n.lat_mean);
    vlon += (c.lon - n.lon_mean) * (c.lon - n.lon_mean);
  }
  n.lat_std = vlat > 0.0 ? std::sqrt(vlat / count) : 1.0;
  n.lon_std = vlon > 0.0 ? std::sqrt(vlon / count) : 1.0;
  return n;
}

// ---------------------------------------------------------------------------
// Metrics

namespace detail {

inline void require_pairs(std::size_t a, std::size_t b) {
  if (a != b) throw ShapeError("metric inputs differ in length");
  if (a == 0) throw DomainError("metric of empty input");
}

}  // namespace detail

inline double rmse(const std::vector<double>& y, const std::vector<double>& yhat) {
  detail::require_pairs(y.size(), yhat.size());
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - yhat[i]) * (y[i] - yhat[i]);
  return std::sqrt(s / static_cast<double>(y.size()));
}

inline double mae(const std::vector<double>& y, const std::vector<double>& yhat) {
  detail::require_pairs(y.size(), yhat.size());
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y[i] - yhat[i]);
  return s / static_cast<double>(y.size());
}

// Empty when the targets have zero variance.
inline std::optional<double> r2(const std::vector<double>& y, const std::vector<double>& yhat) {
  detail::require_pairs(y.size(), yhat.size());
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(y.size());
  double ss_tot = 0.0, ss_res = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ss_tot += (y[i] - mean) * (y[i] - mean);
    ss_res += (y[i] - yhat[i]) * (y[i] - yhat[i]);
  }
  if (ss_tot == 0.0) return std::nullopt;
  return 1.0 - ss_res / ss_tot;
}

struct F1Counts {
  std::size_t tp = 0, fp = 0, fn = 0;

  F1Counts& operator+=(const F1Counts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  // Two empty masks agree perfectly.
  double f1() const { return tp + fp + fn == 0 ? 1.0 : 2.0 * tp / static_cast<double>(2 * tp + fp + fn); }
};

inline F1Counts f1_counts(const std::vector<double>& prob, const RoadMask& truth, double threshold = 0.5) {
  detail::require_pairs(prob.size(), truth.data.size());
  F1Counts c;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const bool p = prob[i] >= threshold;
    const bool g = truth.data[i] != 0;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
  }
  return c;
}

inline double f1_score(const std::vector<double>& prob, const RoadMask& truth, double threshold = 0.5) {
  return f1_counts(prob, truth, threshold).f1();
}

inline double top1(const std::vector<int>& truth, const std::vector<int>& pred) {
  detail::require_pairs(truth.size(), pred.size());
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += truth[i] == pred[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

// ---------------------------------------------------------------------------
// Predictors

struct SegmentEstimate {
  double speed_kmh = 0.0;
  std::size_t pixels = 0;
};

struct TilePrediction {
  std::vector<double> road_prob;  // rows * cols
  std::vector<int> orient_bin;    // rows * cols
  std::map<std::string, SegmentEstimate> segments;
};

class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual TilePrediction predict(const TileData& tile, TimeSlot slot) const = 0;
};

// Segment speeds are the mean composed speed over each segment's in-tile
// sample pixels, using the true travel angle unless told otherwise.
class ModelPredictor : public Predictor {
 public:
  explicit ModelPredictor(const TrafficModel& model,
                          SpeedComposition composition = SpeedComposition::orientation_weighted,
                          AngleSource angles = AngleSource::true_angles, double k = 25.0)
      : model_(model), composition_(composition), angles_(angles), k_(k) {}

  TilePrediction predict(const TileData& tile, TimeSlot slot) const override {
    Tape tape(Tape::Mode::inference);
    const auto out = forward(tape, model_, images_to_tensor({tile.image}), {{tile.frame.center(), slot}});
    TilePrediction p;
    const std::size_t plane = out.road_logits.numel();
    p.road_prob.resize(plane);
    for (std::size_t i = 0; i < plane; ++i) p.road_prob[i] = sigmoid_value(out.road_logits.ptr()[i]);
    p.orient_bin = orientation_argmax(tensor_item(out.orient_logits, 0));
    const Image raw = tensor_item(out.speed_raw, 0);
    const int bins = raw.channels;
    for (const auto& e : tile.strips) {
      double sum = 0.0;
      for (std::size_t i = 0; i < e.pixels.size(); ++i) {
        const auto& px = e.pixels[i];
        std::vector<double> w;
        if (composition_ == SpeedComposition::uniform) {
          w.assign(static_cast<std::size_t>(bins), 1.0 / bins);
        } else {
          const double theta =
              angles_ == AngleSource::true_angles
                  ? e.thetas[i]
                  : bin_center(p.orient_bin[static_cast<std::size_t>(px.row) * raw.cols + px.col], bins);
          w = orientation_weights(theta, bins, k_);
        }
        for (int c = 0; c < bins; ++c) sum += w[static_cast<std::size_t>(c)] * raw.at(c, px.row, px.col);
      }
      p.segments[e.segment_id] = {sum / static_cast<double>(e.pixels.size()), e.pixels.size()};
    }
    return p;
  }

 private:
  const TrafficModel& model_;
  SpeedComposition composition_;
  AngleSource angles_;
  double k_;
};

// Reads answers from ground truth; a perfect reference for the pipeline.
class OraclePredictor : public Predictor {
 public:
  OraclePredictor(const SpeedTable& truth, int bins) : truth_(truth), bins_(bins) {}

  TilePrediction predict(const TileData& tile, TimeSlot slot) const override {
    TilePrediction p;
    const auto mask = road_mask(tile.frame, tile.segments);
    p.road_prob.assign(mask.data.begin(), mask.data.end());
    p.orient_bin.assign(mask.data.size(), 0);
    std::set<Pixel> seen;
    for (const auto& l : orientation_labels(tile.frame, tile.segments, bins_))
      if (seen.insert(l.pixel).second)
        p.orient_bin[static_cast<std::size_t>(l.pixel.row) * tile.frame.cols + l.pixel.col] = l.bin;
    for (const auto& e : tile.strips)
      if (auto st = truth_.find(e.segment_id, slot)) p.segments[e.segment_id] = {st->mean_kmh, e.pixels.size()};
    return p;
  }

 private:
  const SpeedTable& truth_;
  int bins_;
};

// Predicts one constant speed everywhere.
class ConstantPredictor : public Predictor {
 public:
  explicit ConstantPredictor(double speed_kmh) : speed_(speed_kmh) {}

  TilePrediction predict(const TileData& tile, TimeSlot) const override {
    TilePrediction p;
    const auto plane = static_cast<std::size_t>(tile.frame.rows) * tile.frame.cols;
    p.road_prob.assign(plane, 0.0);
    p.orient_bin.assign(plane, 0);
    for (const auto& e : tile.strips) p.segments[e.segment_id] = {speed_, e.pixels.size()};
    return p;
  }

 private:
  double speed_;
};

// ---------------------------------------------------------------------------
// Evaluation

struct EvalPolicy {
  enum class Kind { fixed_random_per_image, slot_list };
  Kind kind = Kind::fixed_random_per_image;
  std::uint64_t seed = 0;
  std::vector<TimeSlot> slots;  // slot_list only

  static EvalPolicy fixed_random(std::uint64_t seed) { return {Kind::fixed_random_per_image, seed, {}}; }
  static EvalPolicy slot_list(std::vector<TimeSlot> s) { return {Kind::slot_list, 0, std::move(s)}; }
};

struct SpeedMetrics {
  double rmse = 0.0;
  double mae = 0.0;
  std::optional<double> r2;
  std::size_t samples = 0;
};

inline SpeedMetrics speed_metrics(const std::vector<double>& y, const std::vector<double>& yhat) {
  return {rmse(y, yhat), mae(y, yhat), r2(y, yhat), y.size()};
}

struct SlotMetrics {
  TimeSlot slot;
  SpeedMetrics speed;
};

struct EvalReport {
  SpeedMetrics speed;  // pooled for fixed_random_per_image, macro average for slot_list
  double road_f1 = 0.0;
  double orientation_top1 = 0.0;
  std::vector<SlotMetrics> per_slot;
};

// The slot a tile is scored at under the fixed-random policy.
inline std::optional<TimeSlot> eval_slot_for(const TileData& td, std::uint64_t seed) {
  if (td.slots.empty()) return std::nullopt;
  Rng rng(hash_combine(seed, fnv1a(td.tile.key())));
  return td.slots[rng.below(td.slots.size())];
}

inline EvalReport evaluate(const Predictor& predictor, const std::vector<TileData>& tiles, const SpeedTable& table,
                           const EvalPolicy& policy, int bins) {
  if (tiles.empty()) throw DomainError("evaluate: no tiles");
  std::vector<TimeSlot> slots = policy.slots;
  if (policy.kind == EvalPolicy::Kind::slot_list && slots.empty()) throw UsageError("slot_list policy needs slots");

  struct TileResult {
    F1Counts f1;
    std::size_t hits = 0, labels = 0;
    std::vector<std::vector<std::pair<double, double>>> pairs;  // per evaluated slot: (truth, prediction)
  };
  const std::size_t nslots = policy.kind == EvalPolicy::Kind::slot_list ? slots.size() : 1;
  std::vector<TileResult> results(tiles.size());
  parallel_for(tiles.size(), [&](std::size_t t) {
    const auto& td = tiles[t];
    auto& res = results[t];
    res.pairs.resize(nslots);
    std::vector<TimeSlot> todo;
    if (policy.kind == EvalPolicy::Kind::slot_list) {
      todo = slots;
    } else if (auto s = eval_slot_for(td, policy.seed)) {
      todo = {*s};
    } else {
      todo = {TimeSlot{}};
    }
    for (std::size_t si = 0; si < todo.size(); ++si) {
      const auto pred = predictor.predict(td, todo[si]);
      if (si == 0) {
        res.f1 = f1_counts(pred.road_prob, road_mask(td.frame, td.segments));
        for (const auto& l : orientation_labels(td.frame, td.segments, bins)) {
          ++res.labels;
          res.hits += pred.orient_bin[static_cast<std::size_t>(l.pixel.row) * td.frame.cols + l.pixel.col] == l.bin;
        }
      }
      if (policy.kind == EvalPolicy::Kind::fixed_random_per_image && td.slots.empty()) continue;
      for (const auto& e : td.strips) {
        const auto truth = table.find(e.segment_id, todo[si]);
        const auto it = pred.segments.find(e.segment_id);
        if (!truth || it == pred.segments.end()) continue;
        res.pairs[si].emplace_back(truth->mean_kmh, it->second.speed_kmh);
      }
    }
  });

  EvalReport rep;
  F1Counts f1;
  std::size_t hits = 0, labels = 0;
  for (const auto& r : results) {
    f1 += r.f1;
    hits += r.hits;
    labels += r.labels;
  }
  rep.road_f1 = f1.f1();
  rep.orientation_top1 = labels ? static_cast<double>(hits) / static_cast<double>(labels) : 0.0;

  auto gather = [&](std::size_t si) {
    std::vector<double> y, yhat;
    for (const auto& r : results)
      for (const auto& [a, b] : r.pairs[si]) {
        y.push_back(a);
        yhat.push_back(b);
      }
    return std::pair{y, yhat};
  };
  if (policy.kind == EvalPolicy::Kind::fixed_random_per_image) {
    auto [y, yhat] = gather(0);
    if (y.empty()) throw DomainError("evaluate: no supervised segments in the split");
    rep.speed = speed_metrics(y, yhat);
    return rep;
  }
  double sr = 0.0, sm = 0.0, sr2 = 0.0;
  bool r2_ok = true;
  for (std::size_t si = 0; si < slots.size(); ++si) {
    auto [y, yhat] = gather(si);
    if (y.empty()) continue;
    const auto m = speed_metrics(y, yhat);
    rep.per_slot.push_back({slots[si], m});
    sr += m.rmse;
    sm += m.mae;
    rep.speed.samples += m.samples;
    if (m.r2) sr2 += *m.r2;
    else r2_ok = false;
  }
  if (rep.per_slot.empty()) throw DomainError("evaluate: no supervised segments for the requested slots");
  const auto ns = static_cast<double>(rep.per_slot.size());
  rep.speed.rmse = sr / ns;
  rep.speed.mae = sm / ns;
  if (r2_ok) rep.speed.r2 = sr2 / ns;
  return rep;
}

// Per-segment speed at one slot over a set of tiles; a segment split across
// tiles gets the pixel-weighted mean of its per-tile estimates.
inline std::map<std::string, double> predict_segment_speeds(const Predictor& predictor,
                                                            const std::vector<TileData>& tiles, TimeSlot slot) {
  std::vector<TilePrediction> preds(tiles.size());
  parallel_for(tiles.size(), [&](std::size_t i) { preds[i] = predictor.predict(tiles[i], slot); });
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& p : preds)
    for (const auto& [id, est] : p.segments) {
      auto& a = acc[id];
      a.first += est.speed_kmh * static_cast<double>(est.pixels);
      a.second += est.pixels;
    }
  std::map<std::string, double> out;
  for (const auto& [id, a] : acc) out[id] = a.first / static_cast<double>(a.second);
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int batch_size = 4;
  int epochs = 20;
  int crop_size = 64;
  std::uint64_t seed = 1;
  OptimizerConfig optimizer;

  void validate(const ModelConfig& mc) const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    const int div = 1 << mc.encoder_depth;
    if (crop_size < div || crop_size % div != 0)
      throw ConfigError("crop_size must be a positive multiple of " + std::to_string(div));
    optimizer.validate();
  }
};

struct LogRow {
  int epoch = 0;
  std::size_t step = 0;
  LossReport loss;
};

struct TrainResult {
  TrafficModel model;  // best validation snapshot (final weights without validation tiles)
  std::vector<LogRow> log;
  std::vector<double> val_rmse;
  int best_epoch = -1;
};

struct Batch {
  Tensor images;
  std::vector<Context> contexts;
  std::vector<TileTargets> targets;
};

inline LossReport train_step(TrafficModel& model, OptimizerState& opt, const Batch& batch, const LossConfig& lc) {
  Tape tape;
  model.zero_grad();
  const auto out = forward(tape, model, batch.images, batch.contexts);
  auto [total, report] = total_loss(tape, out, batch.targets, lc);
  tape.backward(total);
  auto params = model.tensors();
  optimizer_step(params, opt);
  return report;
}

// Random crop and slot for each listed tile.
inline Batch sample_batch(const std::vector<TileData>& tiles, const std::vector<std::size_t>& which,
                          const SpeedTable& table, int crop, int bins, Rng& rng) {
  struct Draw {
    int r0, c0;
    TimeSlot slot;
  };
  std::vector<Draw> draws;
  for (auto i : which) {
    const auto& td = tiles[i];
    if (crop > td.frame.rows || crop > td.frame.cols) throw ConfigError("crop_size exceeds tile size");
    const int r0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(td.frame.rows - crop + 1)));
    const int c0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(td.frame.cols - crop + 1)));
    draws.push_back({r0, c0, td.slots[rng.below(td.slots.size())]});
  }
  Batch b;
  std::vector<Image> images(which.size());
  b.targets.resize(which.size());
  b.contexts.resize(which.size());
  parallel_for(which.size(), [&](std::size_t j) {
    const auto& td = tiles[which[j]];
    const auto& d = draws[j];
    const PixelFrame f = td.frame.crop(d.r0, d.c0, crop, crop);
    images[j] = td.image.crop(d.r0, d.c0, crop, crop);
    b.targets[j] = make_targets(f, td.segments, table, d.slot, bins);
    b.contexts[j] = {f.center(), d.slot};
  });
  b.images = images_to_tensor(images);
  return b;
}

// Epoch = one shuffled pass over the supervised training tiles. Validation
// speed RMSE after every epoch selects the returned snapshot.
inline TrainResult train(const ModelConfig& mc, const std::vector<TileData>& train_tiles,
                         const std::vector<TileData>& val_tiles, const SpeedTable& table, const TrainConfig& tc,
                         const LossConfig& lc, std::ostream* log_csv = nullptr) {
  mc.validate();
  tc.validate(mc);
  lc.validate();
  if (train_tiles.empty()) throw ConfigError("training split is empty");
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < train_tiles.size(); ++i)
    if (!train_tiles[i].slots.empty()) usable.push_back(i);
  if (usable.empty()) throw ConfigError("no supervised slots on any training tile");

  TrainResult res;
  res.model = build_model(mc, tc.seed);
  res.model.norm = location_norm(train_tiles);
  auto params = res.model.tensors();
  OptimizerState opt = make_optimizer(params, tc.optimizer);
  Rng rng(hash_combine(tc.seed, 0x7a1));
  if (log_csv) write_loss_log_header(*log_csv);

  std::optional<TrafficModel> best;
  double best_rmse = std::numeric_limits<double>::infinity();
  std::size_t step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    auto order = usable;
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size)) {
      const std::vector<std::size_t> which(
          order.begin() + static_cast<long>(start),
          order.begin() + static_cast<long>(std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size))));
      const Batch batch = sample_batch(train_tiles, which, table, tc.crop_size, mc.num_bins, rng);
      const auto report = train_step(res.model, opt, batch, lc);
      res.log.push_back({epoch, step, report});
      if (log_csv) write_loss_log_row(*log_csv, epoch, step, report);
      ++step;
    }
    const bool has_val = std::any_of(val_tiles.begin(), val_tiles.end(), [](const auto& t) { return !t.slots.empty(); });
    if (has_val) {
      const ModelPredictor pred(res.model, lc.composition, AngleSource::true_angles, lc.k);
      const double v = evaluate(pred, val_tiles, table, EvalPolicy::fixed_random(tc.seed), mc.num_bins).speed.rmse;
      res.val_rmse.push_back(v);
      if (v < best_rmse) {
        best_rmse = v;
        best = res.model.clone();
        res.best_epoch = epoch;
      }
    }
  }
  if (best) res.model = std::move(*best);
  else res.best_epoch = tc.epochs - 1;
  res.model.zero_grad();
  return res;
}

}  // namespace dynaflow
