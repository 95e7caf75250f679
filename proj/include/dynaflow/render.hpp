#pragma once

// Dense per-tile predictions and their visualizations: speed maps,
// orientation flow fields and road-mask error maps.

#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "dynaflow/image.hpp"
#include "dynaflow/model.hpp"
#include "dynaflow/raster.hpp"
#include "dynaflow/trainer.hpp"

namespace dynaflow {

struct DensePrediction {
  std::vector<double> road_prob;  // rows * cols
  std::vector<int> orient_bin;    // rows * cols
  Image speed;                    // 1 x rows x cols, NaN off-road
  int num_bins = kDefaultBins;
};

// Model output with speeds composed at the predicted angle, kept only where
// the road head fires.
inline DensePrediction dense_prediction(const TrafficModel& model, const TileData& td, TimeSlot slot,
                                        double k = 25.0) {
  Tape tape(Tape::Mode::inference);
  const auto out = forward(tape, model, images_to_tensor({td.image}), {{td.frame.center(), slot}});
  DensePrediction p;
  p.num_bins = model.config.num_bins;
  p.road_prob.resize(out.road_logits.numel());
  for (std::size_t i = 0; i < p.road_prob.size(); ++i) p.road_prob[i] = sigmoid_value(out.road_logits.ptr()[i]);
  p.orient_bin = orientation_argmax(tensor_item(out.orient_logits, 0));
  const int rows = td.frame.rows, cols = td.frame.cols;
  Image theta(1, rows, cols, std::numeric_limits<double>::quiet_NaN());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const auto i = static_cast<std::size_t>(r) * cols + c;
      if (p.road_prob[i] >= 0.5) theta.at(0, r, c) = bin_center(p.orient_bin[i], p.num_bins);
    }
  p.speed = compose_speed(tensor_item(out.speed_raw, 0), theta, k);
  return p;
}

// Ground truth in the same form.
inline DensePrediction dense_truth(const TileData& td, const SpeedTable& table, TimeSlot slot,
                                   int bins = kDefaultBins) {
  DensePrediction p;
  p.num_bins = bins;
  const auto mask = road_mask(td.frame, td.segments);
  p.road_prob.assign(mask.data.begin(), mask.data.end());
  p.orient_bin.assign(mask.data.size(), 0);
  for (const auto& l : orientation_labels(td.frame, td.segments, bins))
    p.orient_bin[static_cast<std::size_t>(l.pixel.row) * td.frame.cols + l.pixel.col] = l.bin;
  p.speed = supervision_raster(supervision_for_slot(td, table, slot), td.frame.rows, td.frame.cols);
  return p;
}

inline constexpr std::array<std::uint8_t, 4> kTruePositive{255, 255, 255, 255};
inline constexpr std::array<std::uint8_t, 4> kFalsePositive{160, 32, 240, 255};  // purple
inline constexpr std::array<std::uint8_t, 4> kFalseNegative{255, 215, 0, 255};   // yellow
inline constexpr std::array<std::uint8_t, 4> kTrueNegative{0, 0, 0, 255};

inline Rgba render_error_map(const std::vector<double>& road_prob, const RoadMask& truth, double threshold = 0.5) {
  if (road_prob.size() != truth.data.size()) throw ShapeError("error map: prediction and mask differ in size");
  Rgba out(truth.rows, truth.cols);
  for (int r = 0; r < truth.rows; ++r)
    for (int c = 0; c < truth.cols; ++c) {
      const bool p = road_prob[static_cast<std::size_t>(r) * truth.cols + c] >= threshold;
      const bool g = truth.at(r, c) != 0;
      out.set(r, c, p && g ? kTruePositive : p ? kFalsePositive : g ? kFalseNegative : kTrueNegative);
    }
  return out;
}

// Fully saturated color for an angle in (-pi, pi].
inline std::array<std::uint8_t, 4> angle_color(double theta) {
  const double h = (theta + kPi) / (2.0 * kPi) * 6.0;
  const int sector = static_cast<int>(std::floor(h)) % 6;
  const double f = h - std::floor(h);
  double r = 0, g = 0, b = 0;
  switch (sector) {
    case 0: r = 1, g = f, b = 0; break;
    case 1: r = 1 - f, g = 1, b = 0; break;
    case 2: r = 0, g = 1, b = f; break;
    case 3: r = 0, g = 1 - f, b = 1; break;
    case 4: r = f, g = 0, b = 1; break;
    default: r = 1, g = 0, b = 1 - f; break;
  }
  return {to_byte(r), to_byte(g), to_byte(b), 255};
}

// Dimmed tile image with a short stroke at every stride-th road pixel,
// pointing along and colored by the predicted travel angle.
inline Rgba render_flow_field(const Image& tile, const DensePrediction& p, int stride = 8) {
  if (stride < 1) throw DomainError("stride must be >= 1");
  Rgba out = to_rgba(tile);
  for (auto& v : out.data) v = static_cast<std::uint8_t>(v / 3);
  for (std::size_t i = 3; i < out.data.size(); i += 4) out.data[i] = 255;
  const int half = std::max(1, stride / 2 - 1);
  for (int r = stride / 2; r < tile.rows; r += stride)
    for (int c = stride / 2; c < tile.cols; c += stride) {
      const auto i = static_cast<std::size_t>(r) * tile.cols + c;
      if (p.road_prob[i] < 0.5) continue;
      const double theta = bin_center(p.orient_bin[i], p.num_bins);
      const auto color = angle_color(theta);
      // raster rows grow southward, so north is -row
      for (int t = -half; t <= half; ++t) {
        const int rr = r - static_cast<int>(std::lround(t * std::sin(theta)));
        const int cc = c + static_cast<int>(std::lround(t * std::cos(theta)));
        if (rr >= 0 && rr < tile.rows && cc >= 0 && cc < tile.cols) out.set(rr, cc, color);
      }
    }
  return out;
}

}  // namespace dynaflow
