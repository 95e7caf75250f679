#pragma once

// Per-tile training targets: dense road masks, sparse orientation labels and
// per-segment speed supervision for one (day, hour) slot.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dynaflow/dataset.hpp"
#include "dynaflow/geo.hpp"
#include "dynaflow/image.hpp"

namespace dynaflow {

inline constexpr double kRoadHalfWidthM = 2.0;
inline constexpr double kSampleSpacingM = 1.0;
inline constexpr double kSampleLateralM = 2.0;
inline constexpr int kDefaultBins = 16;

struct RoadMask {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> data;

  RoadMask() = default;
  RoadMask(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0) {}

  std::uint8_t& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  std::uint8_t at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data) n += v;
    return n;
  }

  friend bool operator==(const RoadMask&, const RoadMask&) = default;
};

inline RoadMask road_mask(const PixelFrame& frame, const std::vector<RoadSegment>& segments,
                          double half_width_m = kRoadHalfWidthM) {
  RoadMask mask(frame.rows, frame.cols);
  for (const auto& s : segments)
    for (const auto& p : buffer_segment(s, frame, half_width_m)) mask.at(p.row, p.col) = 1;
  return mask;
}

struct OrientationLabel {
  Pixel pixel;
  int bin = 0;

  friend bool operator==(const OrientationLabel&, const OrientationLabel&) = default;
};

using OrientationLabels = std::vector<OrientationLabel>;

// One label per (segment, sampled pixel); a pixel sampled by two segments
// carries both labels.
inline OrientationLabels orientation_labels(const PixelFrame& frame,
                                            const std::vector<RoadSegment>& segments,
                                            int num_bins = kDefaultBins) {
  if (num_bins < 1) throw DomainError("bin count must be >= 1");
  OrientationLabels out;
  for (const auto& s : segments) {
    auto samples = sample_along(s, frame, kSampleSpacingM, kSampleLateralM);
    std::vector<std::pair<Pixel, int>> labeled;
    labeled.reserve(samples.size());
    for (const auto& smp : samples) labeled.emplace_back(smp.pixel, angle_to_bin(smp.theta, num_bins));
    std::sort(labeled.begin(), labeled.end());
    labeled.erase(std::unique(labeled.begin(), labeled.end()), labeled.end());
    for (const auto& [p, b] : labeled) out.push_back({p, b});
  }
  return out;
}

struct SpeedEntry {
  std::string segment_id;
  PixelSet pixels;
  double target_kmh = 0.0;
  std::vector<double> thetas;  // aligned with pixels

  friend bool operator==(const SpeedEntry&, const SpeedEntry&) = default;
};

using SpeedSupervision = std::vector<SpeedEntry>;

// Sampled pixels (with their travel angle) of one segment inside a frame.
inline std::pair<PixelSet, std::vector<double>> segment_strip(const RoadSegment& s,
                                                              const PixelFrame& frame) {
  auto samples = sample_along(s, frame, kSampleSpacingM, kSampleLateralM);
  std::stable_sort(samples.begin(), samples.end(),
                   [](const DirectedSample& a, const DirectedSample& b) { return a.pixel < b.pixel; });
  PixelSet pixels;
  std::vector<double> thetas;
  for (const auto& smp : samples) {
    if (!pixels.empty() && pixels.back() == smp.pixel) continue;
    pixels.push_back(smp.pixel);
    thetas.push_back(smp.theta);
  }
  return {std::move(pixels), std::move(thetas)};
}

// One entry per in-frame segment with a table value at the slot; segments
// without data are left out so the loss ignores them.
inline SpeedSupervision speed_supervision(const PixelFrame& frame,
                                          const std::vector<RoadSegment>& segments,
                                          const SpeedTable& table, TimeSlot slot) {
  SpeedSupervision out;
  for (const auto& s : segments) {
    const auto stats = table.find(s.id, slot);
    if (!stats) continue;
    auto [pixels, thetas] = segment_strip(s, frame);
    if (pixels.empty()) continue;
    out.push_back({s.id, std::move(pixels), stats->mean_kmh, std::move(thetas)});
  }
  return out;
}

inline void write_supervision(std::ostream& out, const SpeedSupervision& sup, TimeSlot slot,
                              const PixelFrame& frame) {
  out << "dynaflow-supervision v1\n";
  out << slot.day << ' ' << slot.hour << ' ' << frame.rows << ' ' << frame.cols << '\n';
  out << sup.size() << '\n';
  out << std::setprecision(17);
  for (const auto& e : sup) {
    out << e.segment_id << ' ' << e.target_kmh << ' ' << e.pixels.size() << '\n';
    for (std::size_t i = 0; i < e.pixels.size(); ++i)
      out << e.pixels[i].row << ' ' << e.pixels[i].col << ' ' << e.thetas[i] << '\n';
  }
}

inline SpeedSupervision read_supervision(std::istream& in, TimeSlot* slot = nullptr) {
  std::string magic;
  std::getline(in, magic);
  if (magic != "dynaflow-supervision v1") throw FormatError("not a supervision file");
  int day, hour, rows, cols;
  std::size_t n;
  if (!(in >> day >> hour >> rows >> cols >> n)) throw FormatError("truncated supervision header");
  if (slot) *slot = TimeSlot(day, hour);
  SpeedSupervision sup(n);
  for (auto& e : sup) {
    std::size_t count;
    if (!(in >> e.segment_id >> e.target_kmh >> count)) throw FormatError("truncated supervision entry");
    e.pixels.resize(count);
    e.thetas.resize(count);
    for (std::size_t i = 0; i < count; ++i)
      if (!(in >> e.pixels[i].row >> e.pixels[i].col >> e.thetas[i]))
        throw FormatError("truncated supervision pixels");
  }
  return sup;
}

inline void write_orientation_labels(std::ostream& out, const OrientationLabels& labels) {
  out << "row,col,bin\n";
  for (const auto& l : labels) out << l.pixel.row << ',' << l.pixel.col << ',' << l.bin << '\n';
}

inline constexpr double kSpeedScaleMaxKmh = 110.0;

// Green-to-red colormap on a fixed 0-110 km/h scale; NaN pixels are
// transparent.
inline Rgba render_speed_raster(const Image& speeds) {
  if (speeds.channels != 1) throw ShapeError("speed raster must have one channel");
  Rgba out(speeds.rows, speeds.cols);
  for (int r = 0; r < speeds.rows; ++r)
    for (int c = 0; c < speeds.cols; ++c) {
      const double v = speeds.at(0, r, c);
      if (std::isnan(v)) continue;
      const double t = std::clamp(v / kSpeedScaleMaxKmh, 0.0, 1.0);
      out.set(r, c, {to_byte(1.0 - t), to_byte(t), 0, 255});
    }
  return out;
}

// Paints each supervised segment's target over its pixels.
inline Image supervision_raster(const SpeedSupervision& sup, int rows, int cols) {
  Image img(1, rows, cols, std::numeric_limits<double>::quiet_NaN());
  for (const auto& e : sup)
    for (const auto& p : e.pixels) img.at(0, p.row, p.col) = e.target_kmh;
  return img;
}

inline Rgba render_mask(const RoadMask& m) {
  Rgba out(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) {
      const std::uint8_t v = m.at(r, c) ? 255 : 0;
      out.set(r, c, {v, v, v, 255});
    }
  return out;
}

}  // namespace dynaflow
