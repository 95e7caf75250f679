#pragma once

// Multi-task traffic network: a shared residual encoder feeding three
// LinkNet-style decoders (road, orientation, speed). Location and time enter
// only the speed decoder, tiled over the raster and concatenated before its
// final convolutions.

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dynaflow/autodiff.hpp"
#include "dynaflow/dataset.hpp"
#include "dynaflow/error.hpp"
#include "dynaflow/geo.hpp"
#include "dynaflow/image.hpp"
#include "dynaflow/rng.hpp"

namespace dynaflow {

struct ModelConfig {
  int in_channels = 3;
  int base_channels = 16;
  int encoder_depth = 4;
  int num_bins = 16;
  int embed_dim = 3;
  int context_into_last_n_convs = 2;
  bool use_image = true;
  bool use_location = true;
  bool use_time = true;
  // Speed head emits speed_scale_kmh * softplus(z), biased so a fresh model
  // predicts about initial_speed_kmh.
  double speed_scale_kmh = 10.0;
  double initial_speed_kmh = 50.0;

  int context_dim() const { return (use_location ? 2 : 0) + (use_time ? 2 * embed_dim : 0); }

  void validate() const {
    if (in_channels < 1 || base_channels < 1) throw ConfigError("channel counts must be >= 1");
    if (encoder_depth < 2) throw ConfigError("encoder_depth must be >= 2");
    if (num_bins < 1) throw ConfigError("num_bins must be >= 1");
    if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
    if (context_into_last_n_convs < 0 || context_into_last_n_convs > 2)
      throw ConfigError("context_into_last_n_convs must be 0, 1 or 2");
    if (!(speed_scale_kmh > 0.0) || !(initial_speed_kmh > 0.0))
      throw ConfigError("speed scale and initial speed must be positive");
    if (!use_image && (context_dim() == 0 || context_into_last_n_convs < 1))
      throw ConfigError("a metadata-only model needs location or time context");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, in_channels, base_channels, encoder_depth,
                                                num_bins, embed_dim, context_into_last_n_convs, use_image,
                                                use_location, use_time, speed_scale_kmh,
                                                initial_speed_kmh)

struct NamedParam {
  std::string name;
  Tensor value;
};

struct LocationNorm {
  double lat_mean = 0.0;
  double lat_std = 1.0;
  double lon_mean = 0.0;
  double lon_std = 1.0;
};

class TrafficModel {
 public:
  ModelConfig config;
  LocationNorm norm;
  std::vector<NamedParam> params;

  Tensor& param(const std::string& name) {
    for (auto& p : params)
      if (p.name == name) return p.value;
    throw BoundsError("no parameter named '" + name + "'");
  }
  const Tensor& param(const std::string& name) const {
    return const_cast<TrafficModel*>(this)->param(name);
  }
  bool has_param(const std::string& name) const {
    for (const auto& p : params)
      if (p.name == name) return true;
    return false;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.numel();
    return n;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (const auto& p : params) out.push_back(p.value);
    return out;
  }

  void zero_grad() {
    for (auto& p : params) p.value.zero_grad();
  }

  // Channel width of encoder level s (0 = stem).
  int channels_at(int level) const {
    return level == 0 ? config.base_channels : config.base_channels << (level - 1);
  }

  TrafficModel clone() const {
    TrafficModel m;
    m.config = config;
    m.norm = norm;
    for (const auto& p : params) m.params.push_back({p.name, p.value.clone()});
    return m;
  }
};

inline const char* kHeads[] = {"road", "orient", "speed"};

namespace detail {

inline void add_conv(TrafficModel& m, Rng& rng, const std::string& name, int out, int in, int k) {
  const auto fan_in = static_cast<double>(in * k * k);
  const double stddev = std::sqrt(2.0 / fan_in);
  Tensor w = Tensor::zeros({static_cast<std::size_t>(out), static_cast<std::size_t>(in),
                            static_cast<std::size_t>(k), static_cast<std::size_t>(k)},
                           true);
  for (auto& v : w.data()) v = stddev * rng.normal();
  m.params.push_back({name + ".w", w});
  m.params.push_back({name + ".b", Tensor::zeros({static_cast<std::size_t>(out)}, true)});
}

inline double inverse_softplus(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

}  // namespace detail

// Deterministic initialization: He fan-in normals for hidden convolutions,
// zero biases, N(0, 0.01^2) embeddings.
inline TrafficModel build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  TrafficModel m;
  m.config = cfg;
  Rng rng(hash_combine(seed, 0x30de1));
  const int depth = cfg.encoder_depth;
  detail::add_conv(m, rng, "enc.stem", m.channels_at(0), cfg.in_channels, 3);
  for (int s = 1; s <= depth; ++s) {
    const std::string p = "enc.s" + std::to_string(s);
    detail::add_conv(m, rng, p + ".conv1", m.channels_at(s), m.channels_at(s - 1), 3);
    detail::add_conv(m, rng, p + ".conv2", m.channels_at(s), m.channels_at(s), 3);
    detail::add_conv(m, rng, p + ".proj", m.channels_at(s), m.channels_at(s - 1), 1);
  }
  const int ctx = cfg.context_dim();
  for (const char* head : kHeads) {
    const std::string h = std::string("dec.") + head;
    const bool speed = std::string(head) == "speed";
    for (int s = depth; s >= 1; --s)
      detail::add_conv(m, rng, h + ".up" + std::to_string(s), m.channels_at(s - 1), m.channels_at(s), 3);
    const int c0 = m.channels_at(0);
    const int ctx1 = speed && cfg.context_into_last_n_convs >= 2 ? ctx : 0;
    const int ctx2 = speed && cfg.context_into_last_n_convs >= 1 ? ctx : 0;
    const int in1 = (speed && !cfg.use_image) ? ctx : c0 + ctx1;
    const int out = std::string(head) == "road" ? 1 : cfg.num_bins;
    detail::add_conv(m, rng, h + ".final1", c0, in1, 3);
    detail::add_conv(m, rng, h + ".final2", out, c0 + ctx2, 1);
  }
  // zero output layers: uniform orientation, p(road) = 0.5 and a flat speed
  // map at the start of training
  for (const char* head : kHeads) std::ranges::fill(m.param(std::string("dec.") + head + ".final2.w").data(), 0.0);
  const double bias0 = detail::inverse_softplus(cfg.initial_speed_kmh / cfg.speed_scale_kmh);
  for (auto& v : m.param("dec.speed.final2.b").data()) v = bias0;
  if (cfg.use_time) {
    const auto d = static_cast<std::size_t>(cfg.embed_dim);
    Tensor day = Tensor::zeros({kDaysPerWeek, d}, true);
    Tensor hour = Tensor::zeros({kHoursPerDay, d}, true);
    for (auto& v : day.data()) v = 0.01 * rng.normal();
    for (auto& v : hour.data()) v = 0.01 * rng.normal();
    m.params.push_back({"embed.day", day});
    m.params.push_back({"embed.hour", hour});
  }
  return m;
}

struct Context {
  GeoPoint location;
  TimeSlot slot;
};

// Normalized (lat, lon) followed by the day and hour embedding rows; parts
// disabled in the config are omitted.
inline Tensor context_feature(Tape& tape, const TrafficModel& model, const GeoPoint& p, int day, int hour) {
  if (day < 0 || day >= kDaysPerWeek) throw BoundsError("day of week out of range");
  if (hour < 0 || hour >= kHoursPerDay) throw BoundsError("hour of day out of range");
  std::vector<Tensor> parts;
  if (model.config.use_location) {
    parts.push_back(Tensor::from({2}, {(p.lat - model.norm.lat_mean) / model.norm.lat_std,
                                       (p.lon - model.norm.lon_mean) / model.norm.lon_std}));
  }
  if (model.config.use_time) {
    parts.push_back(embedding_lookup(tape, model.param("embed.day"), static_cast<std::size_t>(day)));
    parts.push_back(embedding_lookup(tape, model.param("embed.hour"), static_cast<std::size_t>(hour)));
  }
  if (parts.empty()) return Tensor::zeros({0});
  return concat_vectors(tape, parts);
}

struct ModelOutputs {
  Tensor road_logits;    // N x 1 x H x W
  Tensor orient_logits;  // N x K x H x W
  Tensor speed_raw;      // N x K x H x W, non-negative
};

namespace detail {

inline Tensor conv(Tape& tape, const TrafficModel& m, const std::string& name, const Tensor& x,
                   std::size_t stride, std::size_t pad) {
  return conv2d(tape, x, m.param(name + ".w"), m.param(name + ".b"), stride, pad);
}

}  // namespace detail

inline ModelOutputs forward(Tape& tape, const TrafficModel& model, const Tensor& image,
                            const std::vector<Context>& contexts) {
  const auto& cfg = model.config;
  if (image.ndim() != 4 || image.dim(1) != static_cast<std::size_t>(cfg.in_channels))
    throw ShapeError("forward: expected N x " + std::to_string(cfg.in_channels) + " x H x W image, got " +
                     shape_str(image.shape()));
  const std::size_t n = image.dim(0), h = image.dim(2), w = image.dim(3);
  const std::size_t div = std::size_t{1} << cfg.encoder_depth;
  if (h % div || w % div || h == 0 || w == 0)
    throw ShapeError("forward: spatial size must be divisible by " + std::to_string(div));
  if (contexts.size() != n) throw ShapeError("forward: one context per batch item required");

  std::vector<Tensor> feats;
  feats.push_back(relu(tape, detail::conv(tape, model, "enc.stem", image, 1, 1)));
  for (int s = 1; s <= cfg.encoder_depth; ++s) {
    const std::string p = "enc.s" + std::to_string(s);
    const Tensor& prev = feats.back();
    Tensor a = relu(tape, detail::conv(tape, model, p + ".conv1", prev, 2, 1));
    Tensor b = detail::conv(tape, model, p + ".conv2", a, 1, 1);
    Tensor skip = detail::conv(tape, model, p + ".proj", prev, 2, 0);
    feats.push_back(relu(tape, add(tape, b, skip)));
  }

  std::optional<Tensor> ctx_map;
  if (cfg.context_dim() > 0 && cfg.context_into_last_n_convs > 0) {
    std::vector<Tensor> rows;
    for (const auto& c : contexts)
      rows.push_back(context_feature(tape, model, c.location, c.slot.day, c.slot.hour));
    ctx_map = tile_spatial(tape, stack_rows(tape, rows), h, w);
  }

  auto decode = [&](const std::string& head) {
    const std::string pre = "dec." + head;
    Tensor d = feats.back();
    for (int s = cfg.encoder_depth; s >= 1; --s) {
      Tensor up = upsample_nearest2x(tape, d);
      d = add(tape, relu(tape, detail::conv(tape, model, pre + ".up" + std::to_string(s), up, 1, 1)),
              feats[static_cast<std::size_t>(s - 1)]);
    }
    return d;
  };

  ModelOutputs out;
  for (const std::string head : {"road", "orient"}) {
    const std::string pre = "dec." + head;
    Tensor d = decode(head);
    Tensor f1 = relu(tape, detail::conv(tape, model, pre + ".final1", d, 1, 1));
    Tensor logits = detail::conv(tape, model, pre + ".final2", f1, 1, 0);
    (head == "road" ? out.road_logits : out.orient_logits) = logits;
  }

  const bool fuse1 = ctx_map && cfg.context_into_last_n_convs >= 2;
  const bool fuse2 = ctx_map.has_value();
  Tensor d;
  if (cfg.use_image) {
    d = decode("speed");
    if (fuse1) d = concat_channels(tape, {d, *ctx_map});
  } else {
    d = *ctx_map;
  }
  Tensor f1 = relu(tape, detail::conv(tape, model, "dec.speed.final1", d, 1, 1));
  if (fuse2) f1 = concat_channels(tape, {f1, *ctx_map});
  Tensor z = detail::conv(tape, model, "dec.speed.final2", f1, 1, 0);
  out.speed_raw = scale(tape, softplus(tape, z), cfg.speed_scale_kmh);
  return out;
}

// ---------------------------------------------------------------------------
// Orientation-weighted composition (inference-side, plain arrays)

// Normalized von-Mises-style weights exp(k cos(theta - mu_i)) over bin
// centers mu_i.
inline std::vector<double> orientation_weights(double theta, int num_bins, double k) {
  std::vector<double> w(static_cast<std::size_t>(num_bins));
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < num_bins; ++i) {
    w[static_cast<std::size_t>(i)] = k * std::cos(theta - bin_center(i, num_bins));
    mx = std::max(mx, w[static_cast<std::size_t>(i)]);
  }
  double z = 0.0;
  for (auto& v : w) z += (v = std::exp(v - mx));
  for (auto& v : w) v /= z;
  return w;
}

// speed_raw: K x H x W (one batch item); theta: 1 x H x W. Pixels with NaN
// theta come out NaN.
inline Image compose_speed(const Image& speed_raw, const Image& theta, double k = 25.0) {
  if (!(k >= 0.0)) throw DomainError("concentration must be non-negative");
  if (theta.channels != 1 || theta.rows != speed_raw.rows || theta.cols != speed_raw.cols)
    throw ShapeError("compose_speed: theta raster must be 1 x H x W");
  Image out(1, speed_raw.rows, speed_raw.cols, std::numeric_limits<double>::quiet_NaN());
  for (int r = 0; r < speed_raw.rows; ++r)
    for (int c = 0; c < speed_raw.cols; ++c) {
      const double t = theta.at(0, r, c);
      if (std::isnan(t)) continue;
      const auto w = orientation_weights(t, speed_raw.channels, k);
      double v = 0.0;
      for (int i = 0; i < speed_raw.channels; ++i) v += w[static_cast<std::size_t>(i)] * speed_raw.at(i, r, c);
      out.at(0, r, c) = v;
    }
  return out;
}

inline Image compose_speed_uniform(const Image& speed_raw) {
  Image out(1, speed_raw.rows, speed_raw.cols);
  for (int r = 0; r < speed_raw.rows; ++r)
    for (int c = 0; c < speed_raw.cols; ++c) {
      double v = 0.0;
      for (int i = 0; i < speed_raw.channels; ++i) v += speed_raw.at(i, r, c);
      out.at(0, r, c) = v / speed_raw.channels;
    }
  return out;
}

// Batch item n of an NCHW tensor as an Image.
inline Image tensor_item(const Tensor& t, std::size_t n) {
  if (t.ndim() != 4) throw ShapeError("tensor_item expects NCHW");
  Image img(static_cast<int>(t.dim(1)), static_cast<int>(t.dim(2)), static_cast<int>(t.dim(3)));
  const std::size_t sz = img.data.size();
  std::copy_n(t.ptr() + n * sz, sz, img.data.begin());
  return img;
}

inline Tensor images_to_tensor(const std::vector<Image>& imgs) {
  if (imgs.empty()) throw ShapeError("empty image batch");
  const auto& f = imgs.front();
  Tensor t = Tensor::zeros({imgs.size(), static_cast<std::size_t>(f.channels), static_cast<std::size_t>(f.rows),
                            static_cast<std::size_t>(f.cols)});
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    if (imgs[i].channels != f.channels || imgs[i].rows != f.rows || imgs[i].cols != f.cols)
      throw ShapeError("images in a batch must share a shape");
    std::copy(imgs[i].data.begin(), imgs[i].data.end(), t.ptr() + i * f.data.size());
  }
  return t;
}

// Per-pixel argmax bin of orientation logits (K x H x W).
inline std::vector<int> orientation_argmax(const Image& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows) * logits.cols, 0);
  for (int r = 0; r < logits.rows; ++r)
    for (int c = 0; c < logits.cols; ++c) {
      int best = 0;
      for (int k = 1; k < logits.channels; ++k)
        if (logits.at(k, r, c) > logits.at(best, r, c)) best = k;
      out[static_cast<std::size_t>(r) * logits.cols + c] = best;
    }
  return out;
}

enum class AngleSource { true_angles, predicted_argmax };

// Per-pixel speed for one image. With true_angles the orientation head is
// ignored and theta must be supplied (NaN where unknown); otherwise theta is
// the center of the predicted bin at every pixel.
inline Image predict_with_angle_source(const TrafficModel& model, const Image& image, const Context& ctx,
                                       AngleSource source, const Image* theta = nullptr, double k = 25.0) {
  if (source == AngleSource::true_angles && theta == nullptr)
    throw UsageError("true-angle prediction requires a theta raster");
  Tape tape(Tape::Mode::inference);
  const auto out = forward(tape, model, images_to_tensor({image}), {ctx});
  const Image speed_raw = tensor_item(out.speed_raw, 0);
  if (source == AngleSource::true_angles) return compose_speed(speed_raw, *theta, k);
  const auto bins = orientation_argmax(tensor_item(out.orient_logits, 0));
  Image pred_theta(1, image.rows, image.cols);
  for (int r = 0; r < image.rows; ++r)
    for (int c = 0; c < image.cols; ++c)
      pred_theta.at(0, r, c) = bin_center(bins[static_cast<std::size_t>(r) * image.cols + c], model.config.num_bins);
  return compose_speed(speed_raw, pred_theta, k);
}

// ---------------------------------------------------------------------------
// Checkpoints: "DFCK" magic, u32 version, config JSON, location normalization,
// then (name, tensor) records.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(std::ostream& out, const TrafficModel& m) {
  out.write("DFCK", 4);
  detail::write_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = nlohmann::json(m.config).dump();
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  for (double v : {m.norm.lat_mean, m.norm.lat_std, m.norm.lon_mean, m.norm.lon_std})
    detail::write_le<double>(out, v);
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.params.size()));
  for (const auto& p : m.params) {
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_tensor(out, p.value);
  }
}

inline TrafficModel load_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "DFCK") throw FormatError("not a checkpoint");
  const auto version = detail::read_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  const auto cfg_len = detail::read_le<std::uint32_t>(in);
  std::string cfg(cfg_len, '\0');
  if (!in.read(cfg.data(), cfg_len)) throw FormatError("truncated checkpoint config");
  const auto json = nlohmann::json::parse(cfg);
  TrafficModel m = build_model(json.get<ModelConfig>(), 0);
  m.norm.lat_mean = detail::read_le<double>(in);
  m.norm.lat_std = detail::read_le<double>(in);
  m.norm.lon_mean = detail::read_le<double>(in);
  m.norm.lon_std = detail::read_le<double>(in);
  const auto count = detail::read_le<std::uint32_t>(in);
  if (count != m.params.size()) throw FormatError("checkpoint parameter count does not match config");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::read_le<std::uint32_t>(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw FormatError("truncated parameter name");
    Tensor t = read_tensor(in);
    Tensor& dst = m.param(name);
    if (dst.shape() != t.shape()) throw FormatError("shape mismatch for parameter " + name);
    std::copy(t.data().begin(), t.data().end(), dst.data().begin());
  }
  return m;
}

inline void save_checkpoint(const std::string& path, const TrafficModel& m) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path);
  save_checkpoint(f, m);
}

inline TrafficModel load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot read " + path);
  return load_checkpoint(f);
}

}  // namespace dynaflow
