#pragma once

// Synthetic (u10m, v10m) wind fields standing in for a reanalysis dataset.
//
// Each component is a Gaussian random field synthesized in Fourier space with
// isotropic spectrum E(k) ~ k^-gamma, rescaled to amplitude sigma and shifted
// by the mean wind. Low-resolution inputs are 4x4 block means of the target.
//
// Dataset directories hold meta.json plus two raw little-endian float32
// payloads: fields.f32 [sample, channel, y, x] at high resolution and
// lowres.f32 with the same layout at low resolution.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "qds/errors.hpp"
#include "qds/fft.hpp"
#include "qds/parallel.hpp"

namespace qds::data {

inline constexpr int kFormatVersion = 1;

struct FieldSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  double gamma = 5.0 / 3.0;
  double sigma = 2.0;
  double mean_u = 4.0;
  double mean_v = 1.0;
  double rho = 0.3;
  std::uint64_t seed = 0;

  void validate() const {
    auto pow2 = [](std::size_t n) { return n >= 4 && std::has_single_bit(n); };
    if (!pow2(height) || !pow2(width))
      throw ConfigError("field spec: grid " + std::to_string(height) + "x" + std::to_string(width) +
                        " must be powers of two >= 4");
    if (!(gamma > 0)) throw ConfigError("field spec: gamma must be > 0");
    if (sigma < 0) throw ConfigError("field spec: sigma must be >= 0");
    if (!(rho >= -1 && rho <= 1)) throw ConfigError("field spec: rho must lie in [-1, 1]");
  }
};

inline void to_json(nlohmann::json& j, const FieldSpec& s) {
  j = {{"height", s.height}, {"width", s.width}, {"gamma", s.gamma}, {"sigma", s.sigma},
       {"mean_u", s.mean_u}, {"mean_v", s.mean_v}, {"rho", s.rho}, {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, FieldSpec& s) {
  s.height = j.at("height").get<std::size_t>();
  s.width = j.at("width").get<std::size_t>();
  s.gamma = j.at("gamma").get<double>();
  s.sigma = j.at("sigma").get<double>();
  s.mean_u = j.at("mean_u").get<double>();
  s.mean_v = j.at("mean_v").get<double>();
  s.rho = j.at("rho").get<double>();
  s.seed = j.value("seed", std::uint64_t{0});
}

/// Paired fields, channel-major: hi [2, H, W], lo [2, H/scale, W/scale].
struct WindSample {
  std::vector<double> hi;
  std::vector<double> lo;
};

/// Mean over scale x scale blocks of each channel of a [C, H, W] field.
inline std::vector<double> block_average(std::span<const double> field, std::size_t channels, std::size_t h,
                                         std::size_t w, std::size_t scale) {
  if (h % scale || w % scale) throw ConfigError("block average: grid not divisible by scale");
  const std::size_t lh = h / scale, lw = w / scale;
  std::vector<double> lo(channels * lh * lw, 0.0);
  const double inv = 1.0 / static_cast<double>(scale * scale);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) lo[(c * lh + y / scale) * lw + x / scale] += field[(c * h + y) * w + x];
  for (double& v : lo) v *= inv;
  return lo;
}

namespace detail {

/// Zero-mean, unit-variance random field with E(k) ~ k^-gamma.
inline std::vector<double> unit_grf(std::size_t h, std::size_t w, double gamma, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t wc = w / 2 + 1;
  std::vector<std::complex<double>> half(h * wc);
  // Mode power |c|^2 ~ k^-(gamma+1) so the shell-summed spectrum falls as k^-gamma.
  for (std::size_t iy = 0; iy < h; ++iy) {
    const double ky = iy <= h / 2 ? static_cast<double>(iy) : static_cast<double>(iy) - static_cast<double>(h);
    for (std::size_t ix = 0; ix < wc; ++ix) {
      const double kx = static_cast<double>(ix);
      const double k = std::hypot(kx, ky);
      const double re = normal(rng), im = normal(rng);
      const double amp = k == 0.0 ? 0.0 : std::pow(k, -(gamma + 1.0) / 2.0);
      half[iy * wc + ix] = amp * std::complex<double>(re, im);
    }
  }
  // Columns kx = 0 and kx = w/2 hold both c(ky) and c(-ky); make them conjugate pairs.
  for (std::size_t ix : {std::size_t{0}, w / 2}) {
    for (std::size_t iy = 1; iy < h / 2; ++iy) half[(h - iy) * wc + ix] = std::conj(half[iy * wc + ix]);
    for (std::size_t iy : {std::size_t{0}, h / 2}) half[iy * wc + ix] = half[iy * wc + ix].real();
  }
  std::vector<double> f = fft::inverse_real_2d(half, h, w);
  double mean = 0.0;
  for (double v : f) mean += v;
  mean /= static_cast<double>(f.size());
  double var = 0.0;
  for (double& v : f) {
    v -= mean;
    var += v * v;
  }
  const double sd = std::sqrt(var / static_cast<double>(f.size()));
  for (double& v : f) v /= sd;
  return f;
}

}  // namespace detail

/// u = mean_u + sigma*a, v = mean_v + sigma*(rho*a + sqrt(1-rho^2)*b), a, b independent unit GRFs.
inline WindSample generate_sample(const FieldSpec& spec, std::size_t scale = 4) {
  spec.validate();
  const std::size_t h = spec.height, w = spec.width, n = h * w;
  std::mt19937_64 rng(spec.seed);
  const auto a = detail::unit_grf(h, w, spec.gamma, rng);
  const auto b = detail::unit_grf(h, w, spec.gamma, rng);
  const double ortho = std::sqrt(std::max(0.0, 1.0 - spec.rho * spec.rho));
  WindSample s;
  s.hi.resize(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    s.hi[i] = spec.mean_u + spec.sigma * a[i];
    s.hi[n + i] = spec.mean_v + spec.sigma * (spec.rho * a[i] + ortho * b[i]);
  }
  s.lo = block_average(s.hi, 2, h, w, scale);
  return s;
}

struct NormStats {
  std::array<double, 2> mean{0.0, 0.0};
  std::array<double, 2> std{1.0, 1.0};
};

struct Dataset {
  std::string split;  // "train", "val" or "ood"
  FieldSpec spec;     // generating spec; per-sample seeds below
  std::size_t scale = 4;
  std::vector<std::uint64_t> seeds;
  std::vector<double> hi;  // [n, 2, H, W], values representable in float32
  std::vector<double> lo;  // [n, 2, H/scale, W/scale]
  NormStats stats;         // from the training split

  std::size_t size() const { return seeds.size(); }
  std::size_t hi_height() const { return spec.height; }
  std::size_t hi_width() const { return spec.width; }
  std::size_t lo_height() const { return spec.height / scale; }
  std::size_t lo_width() const { return spec.width / scale; }
  std::size_t hi_stride() const { return 2 * spec.height * spec.width; }
  std::size_t lo_stride() const { return 2 * lo_height() * lo_width(); }
  std::span<const double> sample_hi(std::size_t i) const { return std::span(hi).subspan(i * hi_stride(), hi_stride()); }
  std::span<const double> sample_lo(std::size_t i) const { return std::span(lo).subspan(i * lo_stride(), lo_stride()); }
};

/// Per-channel mean and population std over all pixels of all samples.
inline NormStats compute_stats(const Dataset& ds) {
  NormStats st;
  const std::size_t plane = ds.spec.height * ds.spec.width;
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0.0, n = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i)
      for (std::size_t p = 0; p < plane; ++p, n += 1) s += ds.hi[i * ds.hi_stride() + c * plane + p];
    const double mean = s / n;
    double v = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i)
      for (std::size_t p = 0; p < plane; ++p) {
        const double d = ds.hi[i * ds.hi_stride() + c * plane + p] - mean;
        v += d * d;
      }
    st.mean[c] = mean;
    st.std[c] = std::sqrt(v / n);
    if (!(st.std[c] > 0)) st.std[c] = 1.0;
  }
  return st;
}

/// Applies (x - mean_c) / std_c to a channel-major [..., 2, plane] buffer.
inline std::vector<double> normalize(std::span<const double> x, const NormStats& st, std::size_t plane) {
  std::vector<double> out(x.begin(), x.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = (i / plane) % 2;
    out[i] = (out[i] - st.mean[c]) / st.std[c];
  }
  return out;
}

inline std::vector<double> denormalize(std::span<const double> x, const NormStats& st, std::size_t plane) {
  std::vector<double> out(x.begin(), x.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = (i / plane) % 2;
    out[i] = out[i] * st.std[c] + st.mean[c];
  }
  return out;
}

struct SplitRequest {
  std::size_t count = 0;
  std::uint64_t first_index = 0;  // sample seeds are mix_seed(base_seed, first_index + j)
};

struct SplitPlan {
  SplitRequest train, val, ood;
  FieldSpec id_spec, ood_spec;
  std::uint64_t base_seed = 0;
  std::size_t scale = 4;

  static SplitPlan contiguous(std::size_t n_train, std::size_t n_val, std::size_t n_ood, FieldSpec id_spec,
                              FieldSpec ood_spec, std::uint64_t seed) {
    SplitPlan p;
    p.train = {n_train, 0};
    p.val = {n_val, n_train};
    p.ood = {n_ood, n_train + n_val};
    p.id_spec = id_spec;
    p.ood_spec = ood_spec;
    p.base_seed = seed;
    return p;
  }
};

/// Default distribution shift: steeper spectrum and stronger mean wind.
inline FieldSpec default_ood_spec(FieldSpec id, double gamma = 3.0, double mean_shift = 1.5) {
  id.gamma = gamma;
  id.mean_u += mean_shift;
  id.mean_v += mean_shift;
  return id;
}

struct Splits {
  Dataset train, val, ood;
};

namespace detail {
inline Dataset generate_split(const std::string& name, const FieldSpec& spec, const SplitRequest& req,
                              std::uint64_t base, std::size_t scale) {
  Dataset ds;
  ds.split = name;
  ds.spec = spec;
  ds.scale = scale;
  for (std::size_t j = 0; j < req.count; ++j) ds.seeds.push_back(mix_seed(base, req.first_index + j));
  ds.hi.resize(req.count * ds.hi_stride());
  ds.lo.resize(req.count * ds.lo_stride());
  parallel_for(req.count, [&](std::size_t j) {
    FieldSpec s = spec;
    s.seed = ds.seeds[j];
    const WindSample w = generate_sample(s, scale);
    // Storage precision is float32; quantize here so files round-trip exactly.
    for (std::size_t i = 0; i < w.hi.size(); ++i) ds.hi[j * ds.hi_stride() + i] = static_cast<float>(w.hi[i]);
    const auto lo = block_average(std::span(ds.hi).subspan(j * ds.hi_stride(), ds.hi_stride()), 2, spec.height,
                                  spec.width, scale);
    for (std::size_t i = 0; i < lo.size(); ++i) ds.lo[j * ds.lo_stride() + i] = static_cast<float>(lo[i]);
  });
  return ds;
}
}  // namespace detail

inline Splits build_splits(const SplitPlan& plan) {
  plan.id_spec.validate();
  plan.ood_spec.validate();
  if (plan.id_spec.height != plan.ood_spec.height || plan.id_spec.width != plan.ood_spec.width)
    throw ConfigError("splits: ID and OOD grids differ");
  const SplitRequest* reqs[] = {&plan.train, &plan.val, &plan.ood};
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b) {
      const auto& x = *reqs[a];
      const auto& y = *reqs[b];
      if (x.count && y.count && x.first_index < y.first_index + y.count && y.first_index < x.first_index + x.count)
        throw ConfigError("splits: sample seed ranges overlap");
    }
  if (plan.train.count == 0) throw ConfigError("splits: training split is empty");
  Splits s;
  s.train = detail::generate_split("train", plan.id_spec, plan.train, plan.base_seed, plan.scale);
  s.val = detail::generate_split("val", plan.id_spec, plan.val, plan.base_seed, plan.scale);
  s.ood = detail::generate_split("ood", plan.ood_spec, plan.ood, plan.base_seed, plan.scale);
  const NormStats st = compute_stats(s.train);
  s.train.stats = s.val.stats = s.ood.stats = st;
  return s;
}

inline Splits build_splits(std::size_t n_train, std::size_t n_val, std::size_t n_ood, const FieldSpec& id_spec,
                           const FieldSpec& ood_spec, std::uint64_t seed) {
  return build_splits(SplitPlan::contiguous(n_train, n_val, n_ood, id_spec, ood_spec, seed));
}

// ---------------------------------------------------------------------------
// On-disk format

namespace detail {
inline void write_f32(const std::filesystem::path& p, std::span<const double> v) {
  std::vector<float> f(v.begin(), v.end());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
  if (!out) throw FormatError("short write on " + p.string());
}

inline std::vector<double> read_f32(const std::filesystem::path& p, std::size_t expected, const char* field) {
  std::ifstream in(p, std::ios::binary | std::ios::ate);
  if (!in) throw FormatError(std::string(field) + ": cannot open " + p.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != expected * sizeof(float))
    throw FormatError(std::string(field) + ": payload " + p.filename().string() + " has " + std::to_string(bytes) +
                      " bytes, expected " + std::to_string(expected * sizeof(float)));
  in.seekg(0);
  std::vector<float> f(expected);
  in.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(bytes));
  return {f.begin(), f.end()};
}
}  // namespace detail

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["format_version"] = kFormatVersion;
  meta["split"] = ds.split;
  meta["n_samples"] = ds.size();
  meta["scale"] = ds.scale;
  meta["hi_shape"] = {2, ds.hi_height(), ds.hi_width()};
  meta["lo_shape"] = {2, ds.lo_height(), ds.lo_width()};
  meta["variables"] = {"u10m", "v10m"};
  meta["spec"] = ds.spec;
  meta["stats"] = {{"mean", ds.stats.mean}, {"std", ds.stats.std}};
  meta["seeds"] = ds.seeds;
  meta["payload"] = {{"hi", "fields.f32"}, {"lo", "lowres.f32"}, {"dtype", "float32-le"}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
  detail::write_f32(dir / "fields.f32", ds.hi);
  detail::write_f32(dir / "lowres.f32", ds.lo);
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw FormatError("dataset " + dir.string() + ": missing meta.json");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("dataset " + dir.string() + ": meta.json is not JSON (" + e.what() + ")");
  }
  auto field = [&](const char* key) -> const nlohmann::json& {
    if (!meta.contains(key)) throw FormatError("dataset " + dir.string() + ": meta.json lacks field '" + key + "'");
    return meta[key];
  };
  Dataset ds;
  try {
    if (field("format_version").get<int>() != kFormatVersion)
      throw FormatError("dataset " + dir.string() + ": unsupported format_version");
    ds.split = field("split").get<std::string>();
    ds.scale = field("scale").get<std::size_t>();
    ds.spec = field("spec").get<FieldSpec>();
    ds.seeds = field("seeds").get<std::vector<std::uint64_t>>();
    const auto& st = field("stats");
    ds.stats.mean = st.at("mean").get<std::array<double, 2>>();
    ds.stats.std = st.at("std").get<std::array<double, 2>>();
    const auto hi_shape = field("hi_shape").get<std::vector<std::size_t>>();
    const auto lo_shape = field("lo_shape").get<std::vector<std::size_t>>();
    if (field("n_samples").get<std::size_t>() != ds.seeds.size())
      throw FormatError("dataset " + dir.string() + ": field 'n_samples' disagrees with 'seeds'");
    if (hi_shape != std::vector<std::size_t>{2, ds.hi_height(), ds.hi_width()})
      throw FormatError("dataset " + dir.string() + ": field 'hi_shape' disagrees with 'spec'");
    if (lo_shape != std::vector<std::size_t>{2, ds.lo_height(), ds.lo_width()})
      throw FormatError("dataset " + dir.string() + ": field 'lo_shape' disagrees with 'spec'/'scale'");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("dataset " + dir.string() + ": malformed meta.json (" + e.what() + ")");
  }
  ds.hi = detail::read_f32(dir / "fields.f32", ds.size() * ds.hi_stride(), "hi");
  ds.lo = detail::read_f32(dir / "lowres.f32", ds.size() * ds.lo_stride(), "lo");
  return ds;
}

/// Periodic Catmull-Rom (a = -0.5) upsampling of a [C, h, w] field, pixel-centre aligned.
inline std::vector<double> upsample_bicubic(std::span<const double> lo, std::size_t channels, std::size_t h,
                                            std::size_t w, std::size_t scale) {
  auto kernel = [](double t) {
    t = std::abs(t);
    constexpr double a = -0.5;
    if (t <= 1) return (a + 2) * t * t * t - (a + 3) * t * t + 1;
    if (t < 2) return a * t * t * t - 5 * a * t * t + 8 * a * t - 4 * a;
    return 0.0;
  };
  const std::size_t H = h * scale, W = w * scale;
  std::vector<double> out(channels * H * W, 0.0);
  auto wrap = [](long i, std::size_t n) { return static_cast<std::size_t>((i % static_cast<long>(n) + static_cast<long>(n)) % static_cast<long>(n)); };
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t Y = 0; Y < H; ++Y)
      for (std::size_t X = 0; X < W; ++X) {
        const double sy = (static_cast<double>(Y) + 0.5) / static_cast<double>(scale) - 0.5;
        const double sx = (static_cast<double>(X) + 0.5) / static_cast<double>(scale) - 0.5;
        const long y0 = static_cast<long>(std::floor(sy)), x0 = static_cast<long>(std::floor(sx));
        double acc = 0.0;
        for (long dy = -1; dy <= 2; ++dy)
          for (long dx = -1; dx <= 2; ++dx)
            acc += kernel(sy - static_cast<double>(y0 + dy)) * kernel(sx - static_cast<double>(x0 + dx)) *
                   lo[(c * h + wrap(y0 + dy, h)) * w + wrap(x0 + dx, w)];
        out[(c * H + Y) * W + X] = acc;
      }
  return out;
}

}  // namespace qds::data
