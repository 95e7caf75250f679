#pragma once

// Training objectives. Each loss is a fused differentiable op: the forward
// value is computed directly and a single backward closure scatters the
// gradient into the network outputs.

#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "dynaflow/autodiff.hpp"
#include "dynaflow/geo.hpp"
#include "dynaflow/model.hpp"
#include "dynaflow/raster.hpp"

namespace dynaflow {

enum class SpeedAggregation { region, replicate };
enum class SpeedComposition { orientation_weighted, uniform };

struct LossConfig {
  double alpha_r = 1e-2;
  double delta = 2.0;
  double k = 25.0;
  SpeedAggregation aggregation = SpeedAggregation::region;
  SpeedComposition composition = SpeedComposition::orientation_weighted;

  void validate() const {
    if (!(alpha_r >= 0.0)) throw ConfigError("alpha_r must be >= 0");
    if (!(delta > 0.0)) throw ConfigError("delta must be > 0");
    if (!(k >= 0.0)) throw ConfigError("k must be >= 0");
  }
};

struct LossReport {
  double road = 0.0;
  double orientation = 0.0;
  double speed = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

inline constexpr double kDiceEps = 1e-6;

inline double charbonnier_value(double a, double delta) {
  const double r = a / delta;
  return delta * delta * (std::sqrt(1.0 + r * r) - 1.0);
}

inline double charbonnier_derivative(double a, double delta) {
  const double r = a / delta;
  return a / std::sqrt(1.0 + r * r);
}

// Elementwise Charbonnier penalty of residuals.
inline Tensor charbonnier(Tape& tape, const Tensor& residual, double delta) {
  if (!(delta > 0.0)) throw DomainError("delta must be positive");
  return detail::unary(
      tape, residual, [delta](double a) { return charbonnier_value(a, delta); },
      [delta](double a, double) { return charbonnier_derivative(a, delta); });
}

// Soft dice (2 sum(p g) + eps) / (sum p + sum g + eps).
inline double dice_coefficient(std::span<const double> probs, const RoadMask& mask) {
  double inter = 0.0, ps = 0.0, gs = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    inter += probs[i] * mask.data[i];
    ps += probs[i];
    gs += mask.data[i];
  }
  return (2.0 * inter + kDiceEps) / (ps + gs + kDiceEps);
}

// Mean over batch items of BCE (pixel mean) + (1 - soft dice).
inline Tensor road_loss(Tape& tape, Tensor logits, const std::vector<RoadMask>& masks) {
  detail::require_ndim(logits, 4, "road_loss");
  const std::size_t n = logits.dim(0), plane = logits.dim(2) * logits.dim(3);
  if (logits.dim(1) != 1 || masks.size() != n) throw ShapeError("road_loss: expected N x 1 x H x W and N masks");
  for (const auto& m : masks)
    if (static_cast<std::size_t>(m.rows) != logits.dim(2) || static_cast<std::size_t>(m.cols) != logits.dim(3))
      throw ShapeError("road_loss: mask shape does not match logits");
  const double* z = logits.ptr();
  double total = 0.0;
  std::vector<double> probs(n * plane);
  for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = sigmoid_value(z[i]);
  for (std::size_t b = 0; b < n; ++b) {
    double bce = 0.0;
    for (std::size_t p = 0; p < plane; ++p) {
      const double v = z[b * plane + p];
      const double y = masks[b].data[p];
      bce += std::max(v, 0.0) - v * y + std::log1p(std::exp(-std::abs(v)));
    }
    bce /= static_cast<double>(plane);
    const double dice = dice_coefficient({probs.data() + b * plane, plane}, masks[b]);
    total += bce + 1.0 - dice;
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n), tape.tracks({&logits}));
  if (out.requires_grad()) {
    tape.record([logits, out, masks, probs = std::move(probs), n, plane]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0] / static_cast<double>(n);
      auto gz = logits.grad();
      for (std::size_t b = 0; b < n; ++b) {
        double inter = 0.0, ps = 0.0, gs = 0.0;
        for (std::size_t p = 0; p < plane; ++p) {
          inter += probs[b * plane + p] * masks[b].data[p];
          ps += probs[b * plane + p];
          gs += masks[b].data[p];
        }
        const double num = 2.0 * inter + kDiceEps;
        const double den = ps + gs + kDiceEps;
        for (std::size_t p = 0; p < plane; ++p) {
          const double pr = probs[b * plane + p];
          const double y = masks[b].data[p];
          const double dbce = (pr - y) / static_cast<double>(plane);
          const double ddice_dp = (2.0 * y * den - num) / (den * den);
          gz[b * plane + p] += g * (dbce - ddice_dp * pr * (1.0 - pr));
        }
      }
    });
  }
  return out;
}

// Categorical cross-entropy at labeled pixels, averaged over every label
// instance in the batch. No labels gives 0.
inline Tensor orientation_loss(Tape& tape, Tensor logits, const std::vector<OrientationLabels>& labels) {
  detail::require_ndim(logits, 4, "orientation_loss");
  const std::size_t n = logits.dim(0), k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  if (labels.size() != n) throw ShapeError("orientation_loss: one label list per batch item");
  std::size_t count = 0;
  for (const auto& l : labels) count += l.size();
  if (count == 0) return Tensor::scalar(0.0);
  const std::size_t plane = h * w;
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b)
    for (const auto& l : labels[b]) {
      if (l.pixel.row < 0 || l.pixel.col < 0 || static_cast<std::size_t>(l.pixel.row) >= h ||
          static_cast<std::size_t>(l.pixel.col) >= w || l.bin < 0 || static_cast<std::size_t>(l.bin) >= k)
        throw BoundsError("orientation label outside the raster");
      const double* base = logits.ptr() + b * k * plane + static_cast<std::size_t>(l.pixel.row) * w +
                           static_cast<std::size_t>(l.pixel.col);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, base[c * plane]);
      double z = 0.0;
      for (std::size_t c = 0; c < k; ++c) z += std::exp(base[c * plane] - mx);
      total += -(base[static_cast<std::size_t>(l.bin) * plane] - mx - std::log(z));
    }
  Tensor out = Tensor::scalar(total / static_cast<double>(count), tape.tracks({&logits}));
  if (out.requires_grad()) {
    tape.record([logits, out, labels, count, n, k, w, plane]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0] / static_cast<double>(count);
      auto gl = logits.grad();
      std::vector<double> prob(k);
      for (std::size_t b = 0; b < n; ++b)
        for (const auto& l : labels[b]) {
          const std::size_t off =
              b * k * plane + static_cast<std::size_t>(l.pixel.row) * w + static_cast<std::size_t>(l.pixel.col);
          const double* base = logits.ptr() + off;
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, base[c * plane]);
          double z = 0.0;
          for (std::size_t c = 0; c < k; ++c) z += (prob[c] = std::exp(base[c * plane] - mx));
          for (std::size_t c = 0; c < k; ++c) {
            const double target = c == static_cast<std::size_t>(l.bin) ? 1.0 : 0.0;
            gl[off + c * plane] += g * (prob[c] / z - target);
          }
        }
    });
  }
  return out;
}

// Mean of a 2-d (H x W) field over each pixel region.
inline Tensor region_aggregate(Tape& tape, Tensor field, const std::vector<PixelSet>& regions) {
  detail::require_ndim(field, 2, "region_aggregate");
  const std::size_t h = field.dim(0), w = field.dim(1);
  Tensor out = Tensor::zeros({regions.size()}, tape.tracks({&field}));
  for (std::size_t r = 0; r < regions.size(); ++r) {
    if (regions[r].empty()) throw DomainError("region_aggregate: empty region");
    double s = 0.0;
    for (const auto& p : regions[r]) {
      if (p.row < 0 || p.col < 0 || static_cast<std::size_t>(p.row) >= h || static_cast<std::size_t>(p.col) >= w)
        throw BoundsError("region pixel outside the field");
      s += field.ptr()[static_cast<std::size_t>(p.row) * w + static_cast<std::size_t>(p.col)];
    }
    out.ptr()[r] = s / static_cast<double>(regions[r].size());
  }
  if (out.requires_grad()) {
    tape.record([field, out, regions, w]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gf = field.grad();
      for (std::size_t r = 0; r < regions.size(); ++r) {
        const double share = g[r] / static_cast<double>(regions[r].size());
        for (const auto& p : regions[r])
          gf[static_cast<std::size_t>(p.row) * w + static_cast<std::size_t>(p.col)] += share;
      }
    });
  }
  return out;
}

namespace detail {

inline std::vector<double> composition_weights(double theta, int bins, const LossConfig& cfg) {
  if (cfg.composition == SpeedComposition::uniform) return std::vector<double>(static_cast<std::size_t>(bins), 1.0 / bins);
  return orientation_weights(theta, bins, cfg.k);
}

}  // namespace detail

// Per segment: compose the K speed channels at each supervised pixel using
// that pixel's true travel angle, then either penalize the region mean
// against the target (region aggregation) or penalize every pixel against
// the target (naive replication). Averaged over all segments in the batch;
// a batch without supervision gives 0.
inline Tensor speed_loss(Tape& tape, Tensor speed_raw, const std::vector<SpeedSupervision>& sup,
                         const LossConfig& cfg) {
  detail::require_ndim(speed_raw, 4, "speed_loss");
  const std::size_t n = speed_raw.dim(0), k = speed_raw.dim(1), h = speed_raw.dim(2), w = speed_raw.dim(3);
  if (sup.size() != n) throw ShapeError("speed_loss: one supervision list per batch item");
  const std::size_t plane = h * w;
  std::size_t segments = 0;
  for (const auto& s : sup) segments += s.size();
  if (segments == 0) return Tensor::scalar(0.0);

  struct Term {
    std::size_t item;
    std::size_t entry;
    double dloss;  // d(segment loss)/d(mean) for region, unused for replicate
  };
  const int bins = static_cast<int>(k);
  double total = 0.0;
  std::vector<double> pixel_grads;  // replicate mode: per-pixel d(seg loss)/d(composed)
  std::vector<Term> terms;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t e = 0; e < sup[b].size(); ++e) {
      const auto& entry = sup[b][e];
      if (entry.pixels.empty()) throw DomainError("speed supervision entry without pixels");
      const double* base = speed_raw.ptr() + b * k * plane;
      std::vector<double> composed(entry.pixels.size());
      for (std::size_t i = 0; i < entry.pixels.size(); ++i) {
        const auto& p = entry.pixels[i];
        if (p.row < 0 || p.col < 0 || static_cast<std::size_t>(p.row) >= h || static_cast<std::size_t>(p.col) >= w)
          throw BoundsError("supervision pixel outside the raster");
        const auto wts = detail::composition_weights(entry.thetas[i], bins, cfg);
        const std::size_t px = static_cast<std::size_t>(p.row) * w + static_cast<std::size_t>(p.col);
        double v = 0.0;
        for (std::size_t c = 0; c < k; ++c) v += wts[c] * base[c * plane + px];
        composed[i] = v;
      }
      const double count = static_cast<double>(composed.size());
      if (cfg.aggregation == SpeedAggregation::region) {
        double m = 0.0;
        for (double v : composed) m += v;
        m /= count;
        total += charbonnier_value(entry.target_kmh - m, cfg.delta);
        terms.push_back({b, e, -charbonnier_derivative(entry.target_kmh - m, cfg.delta)});
      } else {
        double seg = 0.0;
        for (double v : composed) {
          seg += charbonnier_value(entry.target_kmh - v, cfg.delta);
          pixel_grads.push_back(-charbonnier_derivative(entry.target_kmh - v, cfg.delta) / count);
        }
        total += seg / count;
        terms.push_back({b, e, 0.0});
      }
    }
  Tensor out = Tensor::scalar(total / static_cast<double>(segments), tape.tracks({&speed_raw}));
  if (out.requires_grad()) {
    tape.record([speed_raw, out, sup, terms = std::move(terms), pixel_grads = std::move(pixel_grads), cfg, segments,
                 k, w, plane, bins]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0] / static_cast<double>(segments);
      auto graw = speed_raw.grad();
      std::size_t pix = 0;
      for (const auto& t : terms) {
        const auto& entry = sup[t.item][t.entry];
        const double count = static_cast<double>(entry.pixels.size());
        double* base = graw.data() + t.item * k * plane;
        for (std::size_t i = 0; i < entry.pixels.size(); ++i) {
          const double d = cfg.aggregation == SpeedAggregation::region ? t.dloss / count : pixel_grads[pix++];
          const auto wts = detail::composition_weights(entry.thetas[i], bins, cfg);
          const std::size_t px = static_cast<std::size_t>(entry.pixels[i].row) * w +
                                 static_cast<std::size_t>(entry.pixels[i].col);
          for (std::size_t c = 0; c < k; ++c) base[c * plane + px] += g * d * wts[c];
        }
      }
    });
  }
  return out;
}

// Anisotropic total variation with squared forward differences, taken only
// where both neighbors exist and averaged over the number of difference
// terms (all channels, all batch items).
inline Tensor tv_reg(Tape& tape, Tensor x) {
  detail::require_ndim(x, 4, "tv_reg");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 2 || w < 2) throw ShapeError("tv_reg: spatial size must be at least 2 x 2");
  const double terms = static_cast<double>(n * c * ((h - 1) * w + h * (w - 1)));
  const double* v = x.ptr();
  double total = 0.0;
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* ch = v + p * h * w;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        if (i + 1 < h) {
          const double d = ch[(i + 1) * w + j] - ch[i * w + j];
          total += d * d;
        }
        if (j + 1 < w) {
          const double d = ch[i * w + j + 1] - ch[i * w + j];
          total += d * d;
        }
      }
  }
  Tensor out = Tensor::scalar(total / terms, tape.tracks({&x}));
  if (out.requires_grad()) {
    tape.record([x, out, n, c, h, w, terms]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0] / terms;
      const double* v = x.ptr();
      auto gx = x.grad();
      for (std::size_t p = 0; p < n * c; ++p) {
        const double* ch = v + p * h * w;
        double* gc = gx.data() + p * h * w;
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) {
            if (i + 1 < h) {
              const double d = 2.0 * g * (ch[(i + 1) * w + j] - ch[i * w + j]);
              gc[(i + 1) * w + j] += d;
              gc[i * w + j] -= d;
            }
            if (j + 1 < w) {
              const double d = 2.0 * g * (ch[i * w + j + 1] - ch[i * w + j]);
              gc[i * w + j + 1] += d;
              gc[i * w + j] -= d;
            }
          }
      }
    });
  }
  return out;
}

struct TileTargets {
  RoadMask mask;
  OrientationLabels labels;
  SpeedSupervision speed;
};

struct LossResult {
  Tensor total;
  LossReport report;
};

inline LossResult total_loss(Tape& tape, const ModelOutputs& out, const std::vector<TileTargets>& targets,
                             const LossConfig& cfg) {
  cfg.validate();
  std::vector<RoadMask> masks;
  std::vector<OrientationLabels> labels;
  std::vector<SpeedSupervision> sup;
  for (const auto& t : targets) {
    masks.push_back(t.mask);
    labels.push_back(t.labels);
    sup.push_back(t.speed);
  }
  Tensor road = road_loss(tape, out.road_logits, masks);
  Tensor orient = orientation_loss(tape, out.orient_logits, labels);
  Tensor speed = speed_loss(tape, out.speed_raw, sup, cfg);
  Tensor reg = tv_reg(tape, out.speed_raw);
  Tensor total = add_n(tape, {road, orient, speed, scale(tape, reg, cfg.alpha_r)});
  LossReport rep{road.item(), orient.item(), speed.item(), reg.item(), 0.0};
  rep.total = rep.road + rep.orientation + rep.speed + cfg.alpha_r * rep.reg;
  return {total, rep};
}

inline void write_loss_log_header(std::ostream& out) { out << "epoch,step,road,orientation,speed,reg,total\n"; }

inline void write_loss_log_row(std::ostream& out, int epoch, std::size_t step, const LossReport& r) {
  out << epoch << ',' << step << std::setprecision(17) << ',' << r.road << ',' << r.orientation << ','
      << r.speed << ',' << r.reg << ',' << r.total << '\n';
}

}  // namespace dynaflow
