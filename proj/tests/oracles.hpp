#pragma once

// Brute-force reference implementations and the gradient-check suite shared
// by the unit tests and the acceptance binary. The references are written
// from the textbook definitions without reusing library helpers.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dynaflow/autodiff.hpp"
#include "dynaflow/losses.hpp"
#include "dynaflow/model.hpp"
#include "dynaflow/rng.hpp"

namespace oracle {

using namespace dynaflow;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero so relu kinks stay outside the stencil.
inline Tensor kink_free_tensor(Shape shape, Rng& rng) {
  Tensor t = random_tensor(std::move(shape), rng, 0.05, 1.0);
  for (auto& v : t.data())
    if (rng.uniform() < 0.5) v = -v;
  return t;
}

// sum(t * r) for a fixed random r, so every output element matters.
inline Tensor probe(Tape& tape, const Tensor& t, std::uint64_t seed) {
  Rng rng(seed);
  return sum(tape, mul(tape, t, random_tensor(t.shape(), rng)));
}

// ---------------------------------------------------------------------------
// Loss references

// a^2 / (sqrt(1 + (a/d)^2) + 1): algebraically equal to d^2 (sqrt(1 + (a/d)^2) - 1).
inline double charbonnier(double a, double d) { return a * a / (std::sqrt(1.0 + (a / d) * (a / d)) + 1.0); }

inline double dice(const std::vector<double>& p, const std::vector<int>& g) {
  double inter = 0, ps = 0, gs = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (g[i]) inter += p[i];
    ps += p[i];
    gs += g[i];
  }
  return (2 * inter + 1e-6) / (ps + gs + 1e-6);
}

inline double road_loss(const Tensor& logits, const std::vector<RoadMask>& masks) {
  const std::size_t n = logits.dim(0), hw = logits.dim(2) * logits.dim(3);
  double total = 0;
  for (std::size_t b = 0; b < n; ++b) {
    std::vector<double> p(hw);
    std::vector<int> g(hw);
    double bce = 0;
    for (std::size_t i = 0; i < hw; ++i) {
      p[i] = 1.0 / (1.0 + std::exp(-logits.ptr()[b * hw + i]));
      g[i] = masks[b].data[i];
      bce -= g[i] ? std::log(p[i]) : std::log(1.0 - p[i]);
    }
    total += bce / static_cast<double>(hw) + 1.0 - dice(p, g);
  }
  return total / static_cast<double>(n);
}

inline double cross_entropy(const Tensor& logits, const std::vector<OrientationLabels>& labels) {
  double total = 0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < labels.size(); ++b)
    for (const auto& l : labels[b]) {
      double z = 0;
      for (std::size_t c = 0; c < logits.dim(1); ++c)
        z += std::exp(logits.at(b, c, static_cast<std::size_t>(l.pixel.row), static_cast<std::size_t>(l.pixel.col)));
      const double own =
          std::exp(logits.at(b, static_cast<std::size_t>(l.bin), static_cast<std::size_t>(l.pixel.row),
                             static_cast<std::size_t>(l.pixel.col)));
      total -= std::log(own / z);
      ++count;
    }
  return count ? total / static_cast<double>(count) : 0.0;
}

inline double tv(const Tensor& x) {
  double s = 0;
  double terms = 0;
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (std::size_t i = 0; i < x.dim(2); ++i)
        for (std::size_t j = 0; j < x.dim(3); ++j) {
          if (i + 1 < x.dim(2)) {
            s += std::pow(x.at(n, c, i + 1, j) - x.at(n, c, i, j), 2);
            terms += 1;
          }
          if (j + 1 < x.dim(3)) {
            s += std::pow(x.at(n, c, i, j + 1) - x.at(n, c, i, j), 2);
            terms += 1;
          }
        }
  return s / terms;
}

inline std::vector<double> region_means(const Tensor& field, const std::vector<PixelSet>& regions) {
  std::vector<double> out;
  for (const auto& r : regions) {
    double s = 0;
    for (const auto& p : r) s += field.values()[static_cast<std::size_t>(p.row) * field.dim(1) + static_cast<std::size_t>(p.col)];
    out.push_back(s / static_cast<double>(r.size()));
  }
  return out;
}

// exp(k cos(theta - mu_i)) / sum_j exp(k cos(theta - mu_j)), mu_i bin centers.
inline double composed(const Tensor& raw, std::size_t b, int row, int col, double theta, double k, bool uniform) {
  const std::size_t bins = raw.dim(1);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < bins; ++i) {
    const double mu = -M_PI + (static_cast<double>(i) + 0.5) * 2 * M_PI / static_cast<double>(bins);
    const double w = uniform ? 1.0 : std::exp(k * std::cos(theta - mu));
    num += w * raw.at(b, i, static_cast<std::size_t>(row), static_cast<std::size_t>(col));
    den += w;
  }
  return num / den;
}

inline double speed_loss(const Tensor& raw, const std::vector<SpeedSupervision>& sup, const LossConfig& cfg) {
  const bool uniform = cfg.composition == SpeedComposition::uniform;
  double total = 0;
  std::size_t segs = 0;
  for (std::size_t b = 0; b < sup.size(); ++b)
    for (const auto& e : sup[b]) {
      ++segs;
      if (cfg.aggregation == SpeedAggregation::region) {
        double m = 0;
        for (std::size_t i = 0; i < e.pixels.size(); ++i)
          m += composed(raw, b, e.pixels[i].row, e.pixels[i].col, e.thetas[i], cfg.k, uniform);
        total += charbonnier(e.target_kmh - m / static_cast<double>(e.pixels.size()), cfg.delta);
      } else {
        double s = 0;
        for (std::size_t i = 0; i < e.pixels.size(); ++i)
          s += charbonnier(e.target_kmh - composed(raw, b, e.pixels[i].row, e.pixels[i].col, e.thetas[i], cfg.k, uniform),
                           cfg.delta);
        total += s / static_cast<double>(e.pixels.size());
      }
    }
  return segs ? total / static_cast<double>(segs) : 0.0;
}

// ---------------------------------------------------------------------------
// Random targets

inline RoadMask random_mask(int h, int w, Rng& rng) {
  RoadMask m(h, w);
  for (auto& v : m.data) v = rng.uniform() < 0.4 ? 1 : 0;
  return m;
}

inline OrientationLabels random_labels(int h, int w, int bins, Rng& rng, int count) {
  OrientationLabels out;
  for (int i = 0; i < count; ++i)
    out.push_back({{static_cast<int>(rng.below(static_cast<std::uint64_t>(h))),
                    static_cast<int>(rng.below(static_cast<std::uint64_t>(w)))},
                   static_cast<int>(rng.below(static_cast<std::uint64_t>(bins)))});
  return out;
}

inline PixelSet random_region(int h, int w, Rng& rng) {
  PixelSet r;
  const int n = 1 + static_cast<int>(rng.below(6));
  for (int i = 0; i < n; ++i)
    r.push_back({static_cast<int>(rng.below(static_cast<std::uint64_t>(h))),
                 static_cast<int>(rng.below(static_cast<std::uint64_t>(w)))});
  normalize_pixel_set(r);
  return r;
}

inline SpeedSupervision random_supervision(int h, int w, Rng& rng, int segments) {
  SpeedSupervision out;
  for (int s = 0; s < segments; ++s) {
    SpeedEntry e;
    e.segment_id = "s" + std::to_string(s);
    e.pixels = random_region(h, w, rng);
    for (std::size_t i = 0; i < e.pixels.size(); ++i) e.thetas.push_back(rng.uniform(-M_PI, M_PI));
    e.target_kmh = rng.uniform(5, 60);
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checks

struct GradResult {
  std::string name;
  double error = 0.0;
};

inline constexpr double kGradEps = 1e-4;

inline double check1(const Tensor& x, const std::function<Tensor(Tape&, const Tensor&)>& f) {
  return grad_check(f, x, kGradEps);
}

inline double check_params(std::vector<Tensor> params, const std::function<Tensor(Tape&)>& f) {
  return grad_check_params(f, std::move(params), kGradEps);
}

// Every differentiable op, on small random shapes.
inline std::vector<GradResult> op_grad_checks(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradResult> out;
  auto add_result = [&](const std::string& name, double e) { out.push_back({name, e}); };

  const Shape s4{2, 3, 4, 4};
  {
    Tensor a = random_tensor(s4, rng), b = random_tensor(s4, rng);
    add_result("add", check_params({a, b}, [&](Tape& t) { return probe(t, add(t, a, b), 1); }));
    add_result("sub", check_params({a, b}, [&](Tape& t) { return probe(t, sub(t, a, b), 2); }));
    add_result("mul", check_params({a, b}, [&](Tape& t) { return probe(t, mul(t, a, b), 3); }));
    std::vector<Tensor> terms = {random_tensor({}, rng), random_tensor({}, rng), random_tensor({}, rng)};
    add_result("add_n", check_params(terms, [&](Tape& t) { return square(t, add_n(t, terms)); }));
  }
  const Tensor x = random_tensor(s4, rng, -2, 2);
  add_result("scale", check1(x, [](Tape& t, const Tensor& v) { return probe(t, scale(t, v, -1.7), 5); }));
  add_result("add_scalar", check1(x, [](Tape& t, const Tensor& v) { return probe(t, add_scalar(t, v, 0.3), 6); }));
  add_result("relu", check1(kink_free_tensor(s4, rng), [](Tape& t, const Tensor& v) { return probe(t, relu(t, v), 7); }));
  add_result("sigmoid", check1(x, [](Tape& t, const Tensor& v) { return probe(t, sigmoid(t, v), 8); }));
  add_result("softplus", check1(x, [](Tape& t, const Tensor& v) { return probe(t, softplus(t, v), 9); }));
  add_result("square", check1(x, [](Tape& t, const Tensor& v) { return probe(t, square(t, v), 10); }));
  add_result("sum", check1(x, [](Tape& t, const Tensor& v) { return sum(t, square(t, v)); }));
  add_result("mean", check1(x, [](Tape& t, const Tensor& v) { return mean(t, square(t, v)); }));

  for (auto [stride, pad, k, impl, name] :
       {std::tuple{1, 1, 3, ConvImpl::gemm, "conv2d"}, std::tuple{2, 1, 3, ConvImpl::gemm, "conv2d_stride2"},
        std::tuple{1, 0, 1, ConvImpl::gemm, "conv2d_1x1"}, std::tuple{2, 1, 3, ConvImpl::loops, "conv2d_loops"}}) {
    Tensor in = random_tensor({2, 3, 6, 6}, rng), w = random_tensor({4, 3, static_cast<std::size_t>(k),
                                                                       static_cast<std::size_t>(k)}, rng),
           b = random_tensor({4}, rng);
    const auto st = static_cast<std::size_t>(stride), pd = static_cast<std::size_t>(pad);
    const auto im = impl;
    add_result(name, check_params({in, w, b}, [=](Tape& t) { return probe(t, conv2d(t, in, w, b, st, pd, im), 11); }));
  }
  add_result("upsample_nearest2x",
             check1(x, [](Tape& t, const Tensor& v) { return probe(t, upsample_nearest2x(t, v), 12); }));
  {
    // distinct values keep the argmax stable under the stencil
    Tensor d = Tensor::zeros(s4);
    std::vector<double> vals(d.numel());
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.01 * static_cast<double>(i);
    rng.shuffle(vals);
    std::copy(vals.begin(), vals.end(), d.ptr());
    add_result("maxpool2x", check1(d, [](Tape& t, const Tensor& v) { return probe(t, maxpool2x(t, v), 13); }));
  }
  {
    Tensor a = random_tensor({2, 3, 4, 4}, rng), b = random_tensor({2, 2, 4, 4}, rng);
    add_result("concat_channels",
               check_params({a, b}, [&](Tape& t) { return probe(t, concat_channels(t, {a, b}), 14); }));
    Tensor v = random_tensor({2, 3}, rng);
    add_result("tile_spatial", check1(v, [](Tape& t, const Tensor& u) { return probe(t, tile_spatial(t, u, 3, 2), 15); }));
    Tensor p = random_tensor({2}, rng), q = random_tensor({3}, rng);
    add_result("concat_vectors",
               check_params({p, q}, [&](Tape& t) { return probe(t, concat_vectors(t, {p, q}), 16); }));
    Tensor r0 = random_tensor({3}, rng), r1 = random_tensor({3}, rng);
    add_result("stack_rows", check_params({r0, r1}, [&](Tape& t) { return probe(t, stack_rows(t, {r0, r1}), 17); }));
  }
  add_result("softmax_channels",
             check1(x, [](Tape& t, const Tensor& v) { return probe(t, softmax_channels(t, v), 18); }));
  {
    Tensor in = random_tensor(s4, rng), gamma = random_tensor({3}, rng, 0.5, 1.5), beta = random_tensor({3}, rng);
    add_result("batchnorm2d_train", check_params({in, gamma, beta}, [&](Tape& t) {
                 BatchNormState st(3);
                 return probe(t, batchnorm2d(t, in, gamma, beta, st, true), 19);
               }));
    add_result("batchnorm2d_eval", check_params({in, gamma, beta}, [&](Tape& t) {
                 BatchNormState st(3);
                 st.running_mean = {0.1, -0.2, 0.3};
                 st.running_var = {0.5, 1.5, 2.0};
                 return probe(t, batchnorm2d(t, in, gamma, beta, st, false), 20);
               }));
  }
  {
    Tensor table = random_tensor({7, 3}, rng);
    add_result("embedding_lookup", check1(table, [](Tape& t, const Tensor& tb) {
                 return add(t, probe(t, embedding_lookup(t, tb, 2), 21), probe(t, embedding_lookup(t, tb, 2), 22));
               }));
  }
  add_result("charbonnier", check1(random_tensor({10}, rng, -8, 8),
                                   [](Tape& t, const Tensor& v) { return probe(t, charbonnier(t, v, 2.0), 23); }));
  {
    std::vector<PixelSet> regions;
    for (int i = 0; i < 4; ++i) regions.push_back(random_region(5, 6, rng));
    add_result("region_aggregate", check1(random_tensor({5, 6}, rng), [&](Tape& t, const Tensor& v) {
                 return probe(t, region_aggregate(t, v, regions), 24);
               }));
  }
  {
    std::vector<RoadMask> masks = {random_mask(4, 4, rng), random_mask(4, 4, rng)};
    add_result("road_loss", check1(random_tensor({2, 1, 4, 4}, rng, -3, 3),
                                   [&](Tape& t, const Tensor& v) { return road_loss(t, v, masks); }));
    std::vector<OrientationLabels> labels = {random_labels(4, 4, 5, rng, 6), random_labels(4, 4, 5, rng, 3)};
    add_result("orientation_loss", check1(random_tensor({2, 5, 4, 4}, rng, -2, 2),
                                          [&](Tape& t, const Tensor& v) { return orientation_loss(t, v, labels); }));
    std::vector<SpeedSupervision> sup = {random_supervision(4, 4, rng, 3), random_supervision(4, 4, rng, 2)};
    for (auto agg : {SpeedAggregation::region, SpeedAggregation::replicate})
      for (auto comp : {SpeedComposition::orientation_weighted, SpeedComposition::uniform}) {
        LossConfig cfg;
        cfg.aggregation = agg;
        cfg.composition = comp;
        cfg.k = 2.0;  // softer weights so every channel carries gradient
        const std::string name = std::string("speed_loss_") + (agg == SpeedAggregation::region ? "region" : "replicate") +
                                 (comp == SpeedComposition::uniform ? "_uniform" : "");
        add_result(name, check1(random_tensor({2, 5, 4, 4}, rng, 0, 60),
                                [&](Tape& t, const Tensor& v) { return speed_loss(t, v, sup, cfg); }));
      }
    add_result("tv_reg", check1(random_tensor({2, 3, 4, 5}, rng),
                                [](Tape& t, const Tensor& v) { return tv_reg(t, v); }));
  }
  return out;
}

// Full multi-task loss on a 2 x 8 x 8 batch through every model parameter.
// Parameters are redrawn with moderate scale (the zero-initialized output
// layers would otherwise hide the upstream gradients).
inline double full_model_grad_check(std::uint64_t seed) {
  ModelConfig mc;
  mc.base_channels = 3;
  mc.encoder_depth = 2;
  mc.num_bins = 4;
  mc.embed_dim = 2;
  TrafficModel model = build_model(mc, seed);
  Rng rng(hash_combine(seed, 99));
  for (auto& p : model.params)
    for (auto& v : p.value.data()) v = rng.uniform(-0.5, 0.5);
  model.norm = {47.6, 0.01, -122.3, 0.01};

  const Tensor image = random_tensor({2, 3, 8, 8}, rng, 0, 1);
  const std::vector<Context> ctx = {{GeoPoint(47.601, -122.302), TimeSlot(0, 8)},
                                    {GeoPoint(47.598, -122.297), TimeSlot(5, 17)}};
  std::vector<TileTargets> targets;
  for (int b = 0; b < 2; ++b)
    targets.push_back({random_mask(8, 8, rng), random_labels(8, 8, 4, rng, 10), random_supervision(8, 8, rng, 3)});
  LossConfig lc;
  lc.k = 2.0;
  return check_params(model.tensors(), [&](Tape& t) {
    return total_loss(t, forward(t, model, image, ctx), targets, lc).total;
  });
}

}  // namespace oracle
