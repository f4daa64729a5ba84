#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "specfield/error.hpp"
#include "specfield/field.hpp"
#include "specfield/hsio.hpp"
#include "specfield/parallel.hpp"
#include "specfield/renderer.hpp"
#include "specfield/rng.hpp"
#include "specfield/scenegen.hpp"
#include "specfield/speccore.hpp"
#include "specfield/unmix2d.hpp"

namespace specfield {

enum class EndmemberInit { vca, random };

struct TrainConfig {
  double lambda_spec = 5.0;
  double lambda_rgb = 1.0;
  double learning_rate = 1e-2;
  double lr_final = 1e-3;
  double endmember_lr_scale = 1.0;  // endmember step relative to the field step
  double sh_lr_scale = 1.0;         // specular SH step relative to the field step
  std::size_t iterations = 20000;
  std::size_t rays_per_batch = 4096;
  std::size_t n_samples = 64;
  double tau = 1.0;
  std::uint64_t seed = 0;
  bool grad_scaling = true;
  EndmemberInit endmember_init = EndmemberInit::vca;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;

  // Field shape and initial values.
  std::size_t resolution = 16;
  std::size_t endmembers = 3;
  double density_scale = 25.0;
  double init_density = -4.0;
  double init_scaling = 0.0;
  double init_tint = -3.0;
  double init_specular = 0.0;  // pre-sigmoid specular level (SH DC term)

  // Model switches (ablations).
  bool specular = true;
  bool scaling = true;
  bool constrained = true;

  bool jitter = true;
  bool deterministic = false;
  unsigned threads = 0;
  std::size_t log_every = 100;

  LossWeights loss_weights() const { return {lambda_spec, lambda_rgb}; }
  ModelFlags flags() const { return {specular, scaling, constrained}; }

  void validate() const {
    loss_weights().validate();
    if (!(learning_rate > 0.0) || !(lr_final > 0.0)) throw UsageError("config: learning rates must be positive");
    if (!(endmember_lr_scale >= 0.0)) throw UsageError("config: 'endmember_lr_scale' must be nonnegative");
    if (!(sh_lr_scale >= 0.0)) throw UsageError("config: 'sh_lr_scale' must be nonnegative");
    if (iterations == 0) throw UsageError("config: 'iterations' must be positive");
    if (rays_per_batch == 0) throw UsageError("config: 'rays_per_batch' must be positive");
    if (n_samples == 0) throw UsageError("config: 'n_samples' must be positive");
    if (!(tau > 0.0)) throw UsageError("config: 'tau' must be positive");
    if (resolution < 2) throw UsageError("config: 'resolution' must be >= 2");
    if (endmembers == 0) throw UsageError("config: 'endmembers' must be >= 1");
    if (!(density_scale > 0.0)) throw UsageError("config: 'density_scale' must be positive");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
      throw UsageError("config: Adam betas must lie in [0,1)");
    }
    if (!(adam_eps > 0.0)) throw UsageError("config: 'adam_eps' must be positive");
    if (log_every == 0) throw UsageError("config: 'log_every' must be positive");
  }

  void set(const std::string& key, const std::string& value);
  std::string to_text() const;
};

namespace detail {

inline bool parse_switch(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw UsageError("config: '" + key + "' must be on or off, got '" + v + "'");
}

inline double parse_config_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw UsageError("config: '" + key + "' must be a number, got '" + v + "'");
  }
}

inline std::uint64_t parse_config_count(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const unsigned long long n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw UsageError("config: '" + key + "' must be a nonnegative integer, got '" + v + "'");
  }
}

}  // namespace detail

inline void TrainConfig::set(const std::string& key, const std::string& value) {
  using detail::parse_config_count;
  using detail::parse_config_real;
  using detail::parse_switch;
  if (key == "lambda_spec") lambda_spec = parse_config_real(key, value);
  else if (key == "lambda_rgb") lambda_rgb = parse_config_real(key, value);
  else if (key == "learning_rate") learning_rate = parse_config_real(key, value);
  else if (key == "lr_final") lr_final = parse_config_real(key, value);
  else if (key == "endmember_lr_scale") endmember_lr_scale = parse_config_real(key, value);
  else if (key == "sh_lr_scale") sh_lr_scale = parse_config_real(key, value);
  else if (key == "iterations") iterations = parse_config_count(key, value);
  else if (key == "rays_per_batch") rays_per_batch = parse_config_count(key, value);
  else if (key == "n_samples") n_samples = parse_config_count(key, value);
  else if (key == "tau") tau = parse_config_real(key, value);
  else if (key == "seed") seed = parse_config_count(key, value);
  else if (key == "grad_scaling") grad_scaling = parse_switch(key, value);
  else if (key == "endmember_init") {
    if (value == "vca") endmember_init = EndmemberInit::vca;
    else if (value == "random") endmember_init = EndmemberInit::random;
    else throw UsageError("config: 'endmember_init' must be vca or random, got '" + value + "'");
  } else if (key == "adam_beta1") adam_beta1 = parse_config_real(key, value);
  else if (key == "adam_beta2") adam_beta2 = parse_config_real(key, value);
  else if (key == "adam_eps") adam_eps = parse_config_real(key, value);
  else if (key == "resolution") resolution = parse_config_count(key, value);
  else if (key == "endmembers") endmembers = parse_config_count(key, value);
  else if (key == "density_scale") density_scale = parse_config_real(key, value);
  else if (key == "init_density") init_density = parse_config_real(key, value);
  else if (key == "init_scaling") init_scaling = parse_config_real(key, value);
  else if (key == "init_tint") init_tint = parse_config_real(key, value);
  else if (key == "init_specular") init_specular = parse_config_real(key, value);
  else if (key == "specular") specular = parse_switch(key, value);
  else if (key == "scaling") scaling = parse_switch(key, value);
  else if (key == "constrained") constrained = parse_switch(key, value);
  else if (key == "jitter") jitter = parse_switch(key, value);
  else if (key == "deterministic") deterministic = parse_switch(key, value);
  else if (key == "threads") threads = static_cast<unsigned>(parse_config_count(key, value));
  else if (key == "log_every") log_every = parse_config_count(key, value);
  else throw UsageError("config: unknown key '" + key + "'");
}

inline std::string TrainConfig::to_text() const {
  std::ostringstream out;
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  auto sw = [](bool b) { return b ? "on" : "off"; };
  out << "lambda_spec = " << lambda_spec << '\n'
      << "lambda_rgb = " << lambda_rgb << '\n'
      << "learning_rate = " << learning_rate << '\n'
      << "lr_final = " << lr_final << '\n'
      << "endmember_lr_scale = " << endmember_lr_scale << '\n'
      << "sh_lr_scale = " << sh_lr_scale << '\n'
      << "iterations = " << iterations << '\n'
      << "rays_per_batch = " << rays_per_batch << '\n'
      << "n_samples = " << n_samples << '\n'
      << "tau = " << tau << '\n'
      << "seed = " << seed << '\n'
      << "grad_scaling = " << sw(grad_scaling) << '\n'
      << "endmember_init = " << (endmember_init == EndmemberInit::vca ? "vca" : "random") << '\n'
      << "adam_beta1 = " << adam_beta1 << '\n'
      << "adam_beta2 = " << adam_beta2 << '\n'
      << "adam_eps = " << adam_eps << '\n'
      << "resolution = " << resolution << '\n'
      << "endmembers = " << endmembers << '\n'
      << "density_scale = " << density_scale << '\n'
      << "init_density = " << init_density << '\n'
      << "init_scaling = " << init_scaling << '\n'
      << "init_tint = " << init_tint << '\n'
      << "init_specular = " << init_specular << '\n'
      << "specular = " << sw(specular) << '\n'
      << "scaling = " << sw(scaling) << '\n'
      << "constrained = " << sw(constrained) << '\n'
      << "jitter = " << sw(jitter) << '\n'
      << "deterministic = " << sw(deterministic) << '\n'
      << "threads = " << threads << '\n'
      << "log_every = " << log_every << '\n';
  return out.str();
}

/// Applies `key = value` lines (with `#` comments) on top of cfg.
inline void apply_config(std::istream& in, TrainConfig& cfg, const std::string& origin = "<config>") {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    auto trim = [](const std::string& v) {
      const auto a = v.find_first_not_of(" \t\r");
      const auto b = v.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : v.substr(a, b - a + 1);
    };
    try {
      if (eq == std::string::npos) throw UsageError("config: expected 'key = value'");
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const UsageError& e) {
      throw UsageError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

inline void apply_config_file(const std::string& path, TrainConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  apply_config(in, cfg, path);
}

/// Named presets; "desk" is the small-scale configuration.
inline TrainConfig preset(const std::string& name) {
  TrainConfig cfg;
  if (name == "default") return cfg;
  if (name == "desk") {
    cfg.resolution = 16;
    cfg.endmembers = 3;
    cfg.iterations = 2000;
    cfg.rays_per_batch = 1024;
    cfg.n_samples = 64;
    cfg.learning_rate = 0.2;
    cfg.lr_final = 0.02;
    cfg.endmember_lr_scale = 2.0;
    cfg.init_density = -8.0;
    cfg.init_tint = -1.0;
    cfg.init_specular = -3.0;
    cfg.adam_eps = 1e-4;
    cfg.jitter = false;
    return cfg;
  }
  throw UsageError("unknown preset '" + name + "' (known: default, desk)");
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationVariant {
  std::string name;
  TrainConfig config;
};

inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = {"full", "no-specular", "no-vca", "no-rgb", "no-scaling", "base"};
  return names;
}

/// Cumulative ablation ladder: each variant also disables everything
/// disabled by the variants before it.
inline std::vector<AblationVariant> ablation_toggles(const TrainConfig& cfg) {
  std::vector<AblationVariant> out;
  TrainConfig c = cfg;
  out.push_back({"full", c});
  c.specular = false;
  out.push_back({"no-specular", c});
  c.endmember_init = EndmemberInit::random;
  out.push_back({"no-vca", c});
  c.lambda_rgb = 0.0;
  out.push_back({"no-rgb", c});
  c.scaling = false;
  out.push_back({"no-scaling", c});
  c.constrained = false;
  out.push_back({"base", c});
  return out;
}

inline TrainConfig apply_ablation(const TrainConfig& cfg, const std::string& name) {
  for (auto& v : ablation_toggles(cfg))
    if (v.name == name) return v.config;
  std::string known;
  for (const auto& n : ablation_names()) known += (known.empty() ? "" : ", ") + n;
  throw UsageError("unknown ablation '" + name + "' (known: " + known + ")");
}

// ---------------------------------------------------------------------------
// Ray data and loss

/// Flattened training rays with their spectral and RGB targets.
struct RaySet {
  std::size_t bands = 0;
  std::vector<Ray> rays;
  std::vector<double> spectral;  // N x B
  std::vector<double> rgb;       // N x 3

  std::size_t size() const noexcept { return rays.size(); }
};

inline void project_rgb(const CameraResponse& m, const double* c, double* rgb) {
  for (std::size_t r = 0; r < 3; ++r) {
    double acc = 0.0;
    for (std::size_t b = 0; b < m.bands; ++b) acc += m(r, b) * c[b];
    rgb[r] = acc;
  }
}

/// RGB targets are M times the spectral target (linear, no gamma).
inline void fill_rgb_targets(RaySet& set, const CameraResponse& m) {
  detail::require_dims(set.bands, m.bands, "camera response band count");
  set.rgb.assign(set.size() * 3, 0.0);
  for (std::size_t i = 0; i < set.size(); ++i) project_rgb(m, &set.spectral[i * set.bands], &set.rgb[i * 3]);
}

inline RaySet rays_from_views(const std::vector<DatasetView>& views, double near, double far, const CameraResponse& m) {
  if (views.empty()) throw UsageError("training set has no views");
  RaySet set;
  set.bands = views.front().cube.bands;
  for (const auto& v : views) {
    detail::require_dims(set.bands, v.cube.bands, "view band count");
    for (std::size_t y = 0; y < v.cube.height; ++y) {
      for (std::size_t x = 0; x < v.cube.width; ++x) {
        set.rays.push_back(generate_ray(v.camera, x, y, near, far));
        for (std::size_t b = 0; b < set.bands; ++b) set.spectral.push_back(v.cube.at(b, y, x));
      }
    }
  }
  fill_rgb_targets(set, m);
  return set;
}

namespace detail {

// One ray's share of the mean-reduced loss; writes dL/dC into grad.
inline double ray_loss(const double* pred, const double* gt, const double* gt_rgb, const CameraResponse& m,
                       const LossWeights& w, double inv_n, double* grad) {
  const std::size_t bands = m.bands;
  double spec = 0.0;
  for (std::size_t b = 0; b < bands; ++b) {
    const double d = pred[b] - gt[b];
    spec += d * d;
    grad[b] = 2.0 * w.lambda_spec * inv_n * d;
  }
  double rgb = 0.0;
  if (w.lambda_rgb != 0.0) {
    double p[3];
    project_rgb(m, pred, p);
    for (std::size_t r = 0; r < 3; ++r) {
      const double d = p[r] - gt_rgb[r];
      rgb += d * d;
      const double g = 2.0 * w.lambda_rgb * inv_n * d;
      for (std::size_t b = 0; b < bands; ++b) grad[b] += g * m(r, b);
    }
  }
  return inv_n * (w.lambda_spec * spec + w.lambda_rgb * rgb);
}

}  // namespace detail

struct BatchLoss {
  double value = 0.0;
  std::vector<double> grad;  // dL/dpred, N x B
};

/// L = lambda_spec * mean ||C - C*||^2 + lambda_rgb * mean ||M C - C*_rgb||^2.
inline BatchLoss spectral_rgb_loss(std::span<const double> pred, std::span<const double> gt_spectral,
                                   std::span<const double> gt_rgb, const CameraResponse& m, const LossWeights& w) {
  w.validate();
  const std::size_t bands = m.bands;
  if (bands == 0 || pred.size() % bands != 0) throw DimensionError("loss: prediction length is not a multiple of B");
  const std::size_t n = pred.size() / bands;
  detail::require_dims(pred.size(), gt_spectral.size(), "loss spectral target length");
  detail::require_dims(3 * n, gt_rgb.size(), "loss RGB target length");
  if (n == 0) throw DimensionError("loss: empty batch");
  BatchLoss out{0.0, std::vector<double>(pred.size(), 0.0)};
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.value += detail::ray_loss(&pred[i * bands], &gt_spectral[i * bands], &gt_rgb[i * 3], m, w, inv_n,
                                  &out.grad[i * bands]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Field initialisation

inline EndmemberDictionary random_endmembers(std::size_t bands, std::size_t k_count, std::uint64_t seed) {
  auto rng = make_rng(seed, "endmember-init");
  EndmemberDictionary e(bands, k_count);
  for (std::size_t k = 0; k < k_count; ++k)
    for (std::size_t b = 0; b < bands; ++b) e.set(b, k, uniform01(rng));
  return e;
}

/// VCA over nonblack training pixels (at most max_pixels, subsampled with a
/// seeded draw).
inline EndmemberDictionary vca_endmembers(const RaySet& data, std::size_t k_count, std::uint64_t seed,
                                          std::size_t max_pixels = 100000, double black_level = 0.02) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < data.size(); ++i) {
    double peak = 0.0;
    for (std::size_t b = 0; b < data.bands; ++b) peak = std::max(peak, data.spectral[i * data.bands + b]);
    if (peak >= black_level) keep.push_back(i);
  }
  if (keep.size() > max_pixels) {
    auto rng = make_rng(seed, "vca-pixels");
    for (std::size_t i = 0; i < max_pixels; ++i) {
      const auto j = i + static_cast<std::size_t>(uniform_index(rng, keep.size() - i));
      std::swap(keep[i], keep[j]);
    }
    keep.resize(max_pixels);
    std::sort(keep.begin(), keep.end());
  }
  if (keep.size() < k_count) {
    throw NumericError("vca init: only " + std::to_string(keep.size()) + " nonblack pixels for K=" +
                       std::to_string(k_count));
  }
  PixelMatrix y(data.bands, keep.size());
  for (std::size_t n = 0; n < keep.size(); ++n)
    for (std::size_t b = 0; b < data.bands; ++b) y(b, n) = data.spectral[keep[n] * data.bands + b];
  return vca_extract(y, k_count, seed);
}

inline VoxelField initial_field(std::size_t bands, const TrainConfig& cfg, const EndmemberDictionary& e,
                                const Aabb& bounds = {}) {
  VoxelField field({cfg.resolution, cfg.resolution, cfg.resolution}, bounds, cfg.endmembers, bands, cfg.tau,
                   cfg.density_scale);
  field.set_endmembers(e);
  field.set_flags(cfg.flags());
  const auto& lay = field.layout();
  const float a0 = cfg.constrained ? 0.0f : static_cast<float>(1.0 / static_cast<double>(cfg.endmembers));
  for (std::size_t v = 0; v < field.resolution().voxels(); ++v) {
    auto p = field.voxel(v);
    p[lay.density()] = static_cast<float>(cfg.init_density);
    for (std::size_t k = 0; k < cfg.endmembers; ++k) {
      p[lay.abundance() + k] = a0;
      p[lay.scaling() + k] = static_cast<float>(cfg.init_scaling);
    }
    p[lay.tint()] = static_cast<float>(cfg.init_tint);
    for (std::size_t b = 0; b < lay.bands; ++b) p[lay.specular() + b * kShCoeffs] = static_cast<float>(cfg.init_specular / kShC0);
  }
  return field;
}

inline EndmemberDictionary initial_endmembers(const RaySet& data, const TrainConfig& cfg) {
  return cfg.endmember_init == EndmemberInit::vca ? vca_endmembers(data, cfg.endmembers, cfg.seed)
                                                  : random_endmembers(data.bands, cfg.endmembers, cfg.seed);
}

/// Writes disabled switches into the raw values so the field renders the same
/// with every switch on (a checkpoint does not record switches). Raw linear
/// abundances (constrained off) have no such encoding.
inline void bake_flags(VoxelField& field) {
  const auto flags = field.flags();
  const auto& lay = field.layout();
  for (std::size_t v = 0; v < field.resolution().voxels(); ++v) {
    auto p = field.voxel(v);
    if (!flags.specular) p[lay.tint()] = -30.0f;
    if (!flags.scaling)
      for (std::size_t k = 0; k < lay.endmembers; ++k) p[lay.scaling() + k] = 30.0f;
  }
  field.set_flags({true, true, flags.constrained});
}

// ---------------------------------------------------------------------------
// Adam state

struct AdamState {
  std::uint64_t step = 0;
  std::vector<float> m_params, v_params, m_endmembers, v_endmembers;

  bool operator==(const AdamState&) const = default;
};

inline void write_adam_state(const AdamState& s, const std::string& path) {
  detail::ByteWriter w;
  w.magic("UMA1");
  w.u32(1);
  w.u64(s.step);
  w.u64(s.m_params.size());
  w.u64(s.m_endmembers.size());
  w.f32s(s.m_params);
  w.f32s(s.v_params);
  w.f32s(s.m_endmembers);
  w.f32s(s.v_endmembers);
  detail::write_file(path, w.bytes());
}

inline AdamState read_adam_state(const std::string& path) {
  detail::ByteReader r(detail::read_file(path), path);
  r.expect_magic("UMA1");
  if (const auto version = r.u32(); version != 1) throw IoError(path + ": unsupported Adam state version " + std::to_string(version));
  AdamState s;
  s.step = r.u64();
  const std::uint64_t np = r.u64(), ne = r.u64();
  r.expect_remaining(8 * (np + ne));
  s.m_params.resize(np);
  s.v_params.resize(np);
  s.m_endmembers.resize(ne);
  s.v_endmembers.resize(ne);
  r.f32s(s.m_params);
  r.f32s(s.v_params);
  r.f32s(s.m_endmembers);
  r.f32s(s.v_endmembers);
  return s;
}

// ---------------------------------------------------------------------------
// Trainer

struct LossRecord {
  std::size_t iteration = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
};

inline double learning_rate_at(const TrainConfig& cfg, std::size_t t) {
  return cfg.learning_rate *
         std::pow(cfg.lr_final / cfg.learning_rate, static_cast<double>(t) / static_cast<double>(cfg.iterations));
}

class Trainer {
 public:
  Trainer(VoxelField field, RaySet data, CameraResponse response, TrainConfig cfg)
      : field_(std::move(field)), data_(std::move(data)), response_(std::move(response)), cfg_(cfg) {
    cfg_.validate();
    if (data_.size() == 0) throw UsageError("training set is empty");
    detail::require_dims(field_.band_count(), data_.bands, "training data band count");
    detail::require_dims(data_.bands, response_.bands, "camera response band count");
    if (data_.rgb.size() != 3 * data_.size()) fill_rgb_targets(data_, response_);
    field_.set_flags(cfg_.flags());
    adam_.m_params.assign(field_.params().size(), 0.0f);
    adam_.v_params.assign(field_.params().size(), 0.0f);
    adam_.m_endmembers.assign(field_.endmembers().raw().size(), 0.0f);
    adam_.v_endmembers.assign(field_.endmembers().raw().size(), 0.0f);
    threads_ = resolve_threads(cfg_.threads);
  }

  const VoxelField& field() const noexcept { return field_; }
  VoxelField& field() noexcept { return field_; }
  const TrainConfig& config() const noexcept { return cfg_; }
  std::size_t iteration() const noexcept { return static_cast<std::size_t>(adam_.step); }
  const AdamState& adam_state() const noexcept { return adam_; }
  const RaySet& data() const noexcept { return data_; }

  void restore(const AdamState& s) {
    detail::require_dims(adam_.m_params.size(), s.m_params.size(), "Adam state parameter count");
    detail::require_dims(adam_.m_endmembers.size(), s.m_endmembers.size(), "Adam state endmember count");
    adam_ = s;
  }

  /// Ray indices of the batch used at iteration t.
  std::vector<std::size_t> batch_indices(std::size_t t) const {
    const std::size_t n = data_.size();
    std::vector<std::size_t> idx;
    if (cfg_.rays_per_batch >= n) {
      idx.resize(n);
      for (std::size_t i = 0; i < n; ++i) idx[i] = i;
      return idx;
    }
    auto rng = make_rng(cfg_.seed, "train", t);
    idx.resize(cfg_.rays_per_batch);
    for (auto& i : idx) i = static_cast<std::size_t>(uniform_index(rng, n));
    return idx;
  }

  /// Loss and gradient over the given rays with the current parameters.
  double loss_and_gradient(const std::vector<std::size_t>& idx, std::size_t t, FieldGradient* grad_out) {
    const std::size_t parts = std::max<std::size_t>(1, std::min<std::size_t>(threads_, idx.size()));
    // A single worker has no concurrent writers, so it never needs atomics.
    const auto mode = cfg_.deterministic || parts == 1 ? AccumulationMode::deterministic : AccumulationMode::atomic;
    const std::size_t grad_buffers = grad_out ? (mode == AccumulationMode::deterministic ? parts : 1) : 0;
    if (grads_.size() < grad_buffers) grads_.resize(grad_buffers, FieldGradient(field_));
    for (std::size_t p = 0; p < grad_buffers; ++p) grads_[p].zero();
    if (workspaces_.size() < parts) workspaces_.resize(parts, MarchWorkspace(field_, cfg_.n_samples));
    std::vector<double> partial(parts, 0.0);
    const double inv_n = 1.0 / static_cast<double>(idx.size());
    const LossWeights w = cfg_.loss_weights();
    const std::uint64_t jitter_base = splitmix64(stream_key("jitter") ^ splitmix64(cfg_.seed + 0x51ED270B27AB9E8Full * t));

    parallel_chunks(idx.size(), static_cast<unsigned>(parts), [&](unsigned part, std::size_t begin, std::size_t end) {
      auto& ws = workspaces_[part];
      if (ws.samples.size() < cfg_.n_samples) ws.resize(field_, cfg_.n_samples);
      FieldGradient* g = grad_out ? &grads_[mode == AccumulationMode::deterministic ? part : 0] : nullptr;
      MarchOptions opt;
      opt.n_samples = cfg_.n_samples;
      opt.jitter = cfg_.jitter;
      opt.gradient_scaling = cfg_.grad_scaling;
      opt.early_termination = early_termination_;
      RayRender r;
      std::vector<double> dl(data_.bands);
      double acc = 0.0;
      for (std::size_t j = begin; j < end; ++j) {
        const std::size_t i = idx[j];
        opt.jitter_key = jitter_base + j;
        march_into(field_, data_.rays[i], opt, ws, r);
        acc += detail::ray_loss(r.radiance.values.data(), &data_.spectral[i * data_.bands], &data_.rgb[i * 3], response_, w,
                                inv_n, dl.data());
        if (g) march_backward_into(field_, opt, ws, dl, {}, *g, mode);
      }
      partial[part] = acc;
    });

    double loss = 0.0;
    for (double v : partial) loss += v;
    if (grad_out) {
      *grad_out = std::move(grads_[0]);
      for (std::size_t p = 1; p < grad_buffers; ++p) grad_out->add(grads_[p]);
      grads_[0] = FieldGradient(field_);
    }
    return loss;
  }

  /// One optimizer step; returns the batch loss before the update.
  double step() {
    const std::size_t t = iteration();
    const double lr = learning_rate_at(cfg_, t);
    const auto idx = batch_indices(t);
    FieldGradient g;
    const double loss = loss_and_gradient(idx, t, &g);
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "non-finite loss at iteration " << t << " (learning rate " << lr << ")";
      throw NumericError(msg.str());
    }
    adam_update(g, lr);
    field_.endmembers().clamp_unit();
    return loss;
  }

  /// Runs until cfg.iterations; history gets one record every log_every
  /// iterations and one for the last iteration.
  std::vector<LossRecord> run(const std::function<void(const LossRecord&)>& on_log = {}) {
    std::vector<LossRecord> history;
    while (iteration() < cfg_.iterations) {
      const std::size_t t = iteration();
      const double lr = learning_rate_at(cfg_, t);
      const double loss = step();
      if (t % cfg_.log_every == 0 || t + 1 == cfg_.iterations) {
        history.push_back({t, loss, lr});
        if (on_log) on_log(history.back());
      }
    }
    return history;
  }

  void set_early_termination(bool on) { early_termination_ = on; }

 private:
  void adam_update(const FieldGradient& g, double base_lr) {
    const std::uint64_t step = ++adam_.step;
    const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2, eps = cfg_.adam_eps;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
    auto update = [&](std::span<float> param, std::span<const double> grad, std::vector<float>& m, std::vector<float>& v,
                      std::size_t i, double lr) {
      const double gi = grad[i];
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      param[i] = static_cast<float>(static_cast<double>(param[i]) - lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
    };
    const std::size_t per_voxel = field_.params_per_voxel(), sh_begin = field_.layout().specular();
    const double sh_lr = base_lr * cfg_.sh_lr_scale;
    auto params = field_.params();
    for (std::size_t i = 0; i < params.size(); ++i)
      update(params, g.params, adam_.m_params, adam_.v_params, i, i % per_voxel >= sh_begin ? sh_lr : base_lr);
    auto e = field_.endmembers().raw();
    const double e_lr = base_lr * cfg_.endmember_lr_scale;
    for (std::size_t i = 0; i < e.size(); ++i) update(e, g.endmembers, adam_.m_endmembers, adam_.v_endmembers, i, e_lr);
  }

  VoxelField field_;
  RaySet data_;
  CameraResponse response_;
  TrainConfig cfg_;
  AdamState adam_;
  unsigned threads_ = 1;
  bool early_termination_ = true;
  std::vector<FieldGradient> grads_;
  std::vector<MarchWorkspace> workspaces_;
};

struct TrainResult {
  VoxelField field;
  std::vector<LossRecord> history;
  AdamState adam;
};

/// Builds the training rays, initialises the field (VCA or random endmembers)
/// and runs the optimizer.
inline TrainResult train(const Dataset& data, const TrainConfig& cfg,
                         const std::function<void(const LossRecord&)>& on_log = {}) {
  cfg.validate();
  if (data.train.empty()) throw UsageError("dataset has no training views");
  RaySet rays = rays_from_views(data.train, data.near, data.far, data.response);
  VoxelField field = initial_field(rays.bands, cfg, initial_endmembers(rays, cfg));
  Trainer trainer(std::move(field), std::move(rays), data.response, cfg);
  auto history = trainer.run(on_log);
  return {trainer.field(), std::move(history), trainer.adam_state()};
}

inline void write_loss_history(const std::vector<LossRecord>& history, const std::string& path) {
  std::ostringstream out;
  out << "# iteration loss learning_rate\n" << std::setprecision(10);
  for (const auto& r : history) out << r.iteration << ' ' << r.loss << ' ' << r.learning_rate << '\n';
  const std::string s = out.str();
  detail::write_file(path, std::vector<char>(s.begin(), s.end()));
}

// ---------------------------------------------------------------------------
// End-to-end gradient check

struct GradcheckOptions {
  std::size_t n_params = 1200;
  double eps = 1e-3;
  std::uint64_t seed = 0;
  double tolerance = 2e-3;
};

struct GradcheckClass {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckClass> classes;
  double max_rel_error = 0.0;
  std::size_t checked = 0;

  bool passed(double tolerance) const { return max_rel_error <= tolerance; }
  std::string to_text() const {
    std::ostringstream out;
    out << std::left << std::setw(12) << "class" << std::setw(10) << "checked" << "max_rel_error\n";
    for (const auto& c : classes) {
      out << std::left << std::setw(12) << c.name << std::setw(10) << c.checked << std::scientific << std::setprecision(3)
          << c.max_rel_error << std::defaultfloat << '\n';
    }
    return out.str();
  }
};

inline double gradcheck_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-7});
}

/// Analytic loss gradients (Trainer backward) against central differences on
/// randomly chosen raw parameters of every class. Early termination and
/// jitter are off; the batch is the whole ray set.
inline GradcheckReport gradcheck(const VoxelField& field, const RaySet& data, const CameraResponse& response,
                                 TrainConfig cfg, const GradcheckOptions& opt = {}) {
  cfg.rays_per_batch = data.size();
  cfg.jitter = false;
  cfg.deterministic = true;
  cfg.threads = 1;
  Trainer tr(field, data, response, cfg);
  tr.set_early_termination(false);
  const auto idx = tr.batch_indices(0);
  FieldGradient g;
  tr.loss_and_gradient(idx, 0, &g);

  const auto& lay = field.layout();
  const std::size_t p = lay.per_voxel();
  std::vector<std::size_t> touched;
  for (std::size_t v = 0; v < field.resolution().voxels(); ++v) {
    bool any = false;
    for (std::size_t i = 0; i < p && !any; ++i) any = g.params[v * p + i] != 0.0;
    if (any) touched.push_back(v);
  }
  if (touched.empty()) throw NumericError("gradcheck: no voxel receives gradient from the ray set");

  struct Channel {
    const char* name;
    std::size_t offset, width;
  };
  const std::vector<Channel> channels = {{"density", lay.density(), 1},
                                         {"abundance", lay.abundance(), lay.endmembers},
                                         {"scaling", lay.scaling(), lay.endmembers},
                                         {"tint", lay.tint(), 1},
                                         {"sh", lay.specular(), lay.bands * kShCoeffs}};
  const std::size_t per_class = (opt.n_params + channels.size()) / (channels.size() + 1);
  auto rng = make_rng(opt.seed, "gradcheck");

  auto probe = [&](float& slot, double analytic) {
    const float original = slot;
    const float plus = static_cast<float>(static_cast<double>(original) + opt.eps);
    const float minus = static_cast<float>(static_cast<double>(original) - opt.eps);
    slot = plus;
    const double lp = tr.loss_and_gradient(idx, 0, nullptr);
    slot = minus;
    const double lm = tr.loss_and_gradient(idx, 0, nullptr);
    slot = original;
    const double numeric = (lp - lm) / (static_cast<double>(plus) - static_cast<double>(minus));
    return gradcheck_rel_error(analytic, numeric);
  };

  GradcheckReport report;
  for (const auto& ch : channels) {
    GradcheckClass c{ch.name, 0, 0.0};
    for (std::size_t n = 0; n < per_class; ++n) {
      const std::size_t v = touched[static_cast<std::size_t>(uniform_index(rng, touched.size()))];
      const std::size_t i = v * p + ch.offset + static_cast<std::size_t>(uniform_index(rng, ch.width));
      c.max_rel_error = std::max(c.max_rel_error, probe(tr.field().params()[i], g.params[i]));
      ++c.checked;
    }
    report.classes.push_back(c);
  }
  GradcheckClass ce{"endmember", 0, 0.0};
  const auto n_e = tr.field().endmembers().raw().size();
  for (std::size_t n = 0; n < per_class; ++n) {
    const auto i = static_cast<std::size_t>(uniform_index(rng, n_e));
    ce.max_rel_error = std::max(ce.max_rel_error, probe(tr.field().endmembers().raw()[i], g.endmembers[i]));
    ++ce.checked;
  }
  report.classes.push_back(ce);
  for (const auto& c : report.classes) {
    report.max_rel_error = std::max(report.max_rel_error, c.max_rel_error);
    report.checked += c.checked;
  }
  return report;
}

struct GradcheckProblem {
  VoxelField field;
  RaySet data;
  CameraResponse response;
};

/// Random smooth field and random targets for a self-contained check.
inline GradcheckProblem make_gradcheck_problem(std::uint64_t seed, std::size_t resolution = 6, std::size_t k_count = 3,
                                               std::size_t bands = 8, std::size_t n_rays = 48) {
  auto rng = make_rng(seed, "gradcheck-problem");
  GradcheckProblem prob{VoxelField({resolution, resolution, resolution}, Aabb{}, k_count, bands), RaySet{},
                        default_camera_response(bands)};
  auto& f = prob.field;
  const auto& lay = f.layout();
  for (std::size_t v = 0; v < f.resolution().voxels(); ++v) {
    auto p = f.voxel(v);
    p[lay.density()] = static_cast<float>(uniform(rng, -4.0, 0.0));
    for (std::size_t k = 0; k < k_count; ++k) {
      p[lay.abundance() + k] = static_cast<float>(normal(rng));
      p[lay.scaling() + k] = static_cast<float>(uniform(rng, -2.0, 2.0));
    }
    p[lay.tint()] = static_cast<float>(uniform(rng, -2.0, 2.0));
    for (std::size_t i = 0; i < bands * kShCoeffs; ++i) p[lay.specular() + i] = static_cast<float>(0.5 * normal(rng));
  }
  for (std::size_t k = 0; k < k_count; ++k)
    for (std::size_t b = 0; b < bands; ++b) f.endmembers().set(b, k, uniform(rng, 0.1, 0.9));

  prob.data.bands = bands;
  for (std::size_t r = 0; r < n_rays; ++r) {
    Vec3 dir{normal(rng), normal(rng), normal(rng)};
    dir = normalize(dir);
    const Vec3 target{uniform(rng, -0.8, 0.8), uniform(rng, -0.8, 0.8), uniform(rng, -0.8, 0.8)};
    const Vec3 origin = target - dir * 3.0;
    prob.data.rays.push_back(Ray{origin, dir, 1.0, 5.0});
    for (std::size_t b = 0; b < bands; ++b) prob.data.spectral.push_back(uniform01(rng));
  }
  fill_rgb_targets(prob.data, prob.response);
  return prob;
}

}  // namespace specfield
