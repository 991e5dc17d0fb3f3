#pragma once

// Verification metrics for downscaled (u10m, v10m) fields.
//
// Fields are flat row-major buffers. A "wind field" is [2, H, W] with u in
// the first plane and v in the second.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "qds/errors.hpp"
#include "qds/fft.hpp"

namespace qds::metrics {

inline const char* const kVariables[2] = {"u10m", "v10m"};

namespace detail {
inline void same_size(std::size_t a, std::size_t b, const char* who) {
  if (a != b)
    throw ContractError(std::string(who) + ": size mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
}
inline bool pow2(std::size_t n) { return n >= 2 && (n & (n - 1)) == 0; }
}  // namespace detail

inline double mae(std::span<const double> pred, std::span<const double> truth) {
  detail::same_size(pred.size(), truth.size(), "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

inline double rmse(std::span<const double> pred, std::span<const double> truth) {
  detail::same_size(pred.size(), truth.size(), "rmse");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return std::sqrt(s / static_cast<double>(pred.size()));
}

/// Field-mean ensemble CRPS, (1/M) sum|x_m - o| - (1/2M^2) sum sum |x_m - x_m'| per cell.
/// With one member the spread term is exactly zero, so this equals mae().
inline double crps_ensemble(const std::vector<std::span<const double>>& members, std::span<const double> truth) {
  if (members.empty()) throw ContractError("crps_ensemble: need at least one member");
  for (const auto& m : members) detail::same_size(m.size(), truth.size(), "crps_ensemble");
  const std::size_t M = members.size();
  const double inv_m = 1.0 / static_cast<double>(M);
  const double inv_2m2 = 0.5 * inv_m * inv_m;
  double total = 0.0;
  std::vector<double> x(M);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    double skill = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      x[m] = members[m][i];
      skill += std::abs(x[m] - truth[i]);
    }
    if (M == 1) {
      total += skill;
      continue;
    }
    // sum_{m,m'} |x_m - x_m'| from sorted order: 2 * sum_k (2k - M + 1) x_(k)
    std::sort(x.begin(), x.end());
    double spread = 0.0;
    for (std::size_t k = 0; k < M; ++k) spread += (2.0 * static_cast<double>(k) - static_cast<double>(M) + 1.0) * x[k];
    total += skill * inv_m - 2.0 * spread * inv_2m2;
  }
  return total / static_cast<double>(truth.size());
}

inline double crps_ensemble(const std::vector<std::vector<double>>& members, std::span<const double> truth) {
  std::vector<std::span<const double>> views(members.begin(), members.end());
  return crps_ensemble(views, truth);
}

/// Windspeed sqrt(u^2 + v^2) of a [2, H, W] field.
inline std::vector<double> windspeed(std::span<const double> field) {
  const std::size_t n = field.size() / 2;
  std::vector<double> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = std::hypot(field[i], field[n + i]);
  return s;
}

/// Linear-interpolated quantile q in [0, 1].
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw ContractError("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Numerator sum (P - O)^2 and denominator sum P^2 + O^2 of the fractions skill
/// score; summing terms over many fields gives a pooled score.
struct FssTerms {
  double num = 0.0;
  double den = 0.0;

  FssTerms& operator+=(const FssTerms& o) {
    num += o.num;
    den += o.den;
    return *this;
  }
  double score() const { return den == 0.0 ? 1.0 : 1.0 - num / den; }
};

/// Fractions of threshold exceedances with an n x n zero-padded mean filter.
inline FssTerms fss_terms(std::span<const double> pred, std::span<const double> truth, std::size_t h, std::size_t w,
                          double threshold, std::size_t n) {
  detail::same_size(pred.size(), truth.size(), "fss");
  detail::same_size(pred.size(), h * w, "fss grid");
  if (n % 2 == 0 || n > std::min(h, w))
    throw ConfigError("fss: neighbourhood " + std::to_string(n) + " must be odd and <= grid size");
  // Summed-area tables make each fraction O(1).
  auto fractions = [&](std::span<const double> f) {
    std::vector<double> sat((h + 1) * (w + 1), 0.0);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        sat[(y + 1) * (w + 1) + x + 1] = (f[y * w + x] >= threshold ? 1.0 : 0.0) + sat[y * (w + 1) + x + 1] +
                                         sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
    std::vector<double> frac(h * w);
    const long r = static_cast<long>(n / 2);
    auto clampi = [](long v, long lo, long hi) { return static_cast<std::size_t>(std::clamp(v, lo, hi)); };
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t y0 = clampi(static_cast<long>(y) - r, 0, static_cast<long>(h));
        const std::size_t y1 = clampi(static_cast<long>(y) + r + 1, 0, static_cast<long>(h));
        const std::size_t x0 = clampi(static_cast<long>(x) - r, 0, static_cast<long>(w));
        const std::size_t x1 = clampi(static_cast<long>(x) + r + 1, 0, static_cast<long>(w));
        const double count =
            sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
        frac[y * w + x] = count / static_cast<double>(n * n);
      }
    return frac;
  };
  const auto pf = fractions(pred), of = fractions(truth);
  FssTerms t;
  for (std::size_t i = 0; i < pf.size(); ++i) {
    t.num += (pf[i] - of[i]) * (pf[i] - of[i]);
    t.den += pf[i] * pf[i] + of[i] * of[i];
  }
  return t;
}

/// Fractions skill score; 1 when neither field exceeds the threshold.
inline double fss(std::span<const double> pred, std::span<const double> truth, std::size_t h, std::size_t w,
                  double threshold, std::size_t n) {
  return fss_terms(pred, truth, h, w, threshold, n).score();
}

enum class Direction { zonal, meridional };

inline const char* direction_name(Direction d) { return d == Direction::zonal ? "zonal" : "meridional"; }

struct SpectrumCurve {
  Direction direction = Direction::zonal;
  std::vector<std::size_t> k;
  std::vector<double> power;
};

/// Mean 1-D power 0.5(|u_k|^2 + |v_k|^2)/N^2 for k = 0..N/2 along rows
/// (zonal) or columns (meridional), averaged over lines and samples.
inline std::vector<double> directional_power_full(std::span<const double> fields, std::size_t samples, std::size_t h,
                                                  std::size_t w, Direction dir) {
  if (!detail::pow2(h) || !detail::pow2(w))
    throw ConfigError("spectrum: grid " + std::to_string(h) + "x" + std::to_string(w) + " is not a power of two");
  detail::same_size(fields.size(), samples * 2 * h * w, "spectrum");
  if (samples == 0) throw ContractError("spectrum: no samples");
  const bool zonal = dir == Direction::zonal;
  const std::size_t n = zonal ? w : h, lines = zonal ? h : w;
  fft::RealDft1d dft(n);
  std::vector<double> acc(n / 2 + 1, 0.0);
  for (std::size_t s = 0; s < samples; ++s)
    for (std::size_t c = 0; c < 2; ++c) {
      const double* plane = fields.data() + (s * 2 + c) * h * w;
      for (std::size_t line = 0; line < lines; ++line) {
        const auto p = zonal ? dft.power(plane + line * w, 1) : dft.power(plane + line, w);
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += p[k];
      }
    }
  const double norm = 0.5 / (static_cast<double>(n) * static_cast<double>(n) * static_cast<double>(lines * samples));
  for (double& v : acc) v *= norm;
  return acc;
}

/// Wavenumbers 1..N/2-1 of directional_power_full.
inline SpectrumCurve directional_spectrum(std::span<const double> fields, std::size_t samples, std::size_t h,
                                          std::size_t w, Direction dir) {
  const auto full = directional_power_full(fields, samples, h, w, dir);
  SpectrumCurve c;
  c.direction = dir;
  for (std::size_t k = 1; k + 1 < full.size(); ++k) {
    c.k.push_back(k);
    c.power.push_back(full[k]);
  }
  return c;
}

/// Least-squares slope of log(power) against log(k) over k in [k_lo, k_hi].
inline double loglog_slope(const SpectrumCurve& c, std::size_t k_lo, std::size_t k_hi) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0, n = 0;
  for (std::size_t i = 0; i < c.k.size(); ++i) {
    if (c.k[i] < k_lo || c.k[i] > k_hi) continue;
    const double x = std::log(static_cast<double>(c.k[i])), y = std::log(c.power[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    n += 1;
  }
  if (n < 2) throw ContractError("loglog_slope: fewer than two points in range");
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

struct Histogram1d {
  double lo = 0, hi = 1;
  std::vector<std::size_t> counts;
  std::size_t total = 0;

  double width() const { return (hi - lo) / static_cast<double>(counts.size()); }
  double density(std::size_t i) const {
    return static_cast<double>(counts[i]) / (static_cast<double>(total) * width());
  }
};

/// Bin index in [0, bins), values outside [lo, hi] fall into the edge bins.
inline std::size_t bin_index(double v, double lo, double hi, std::size_t bins) {
  const double t = (v - lo) / (hi - lo) * static_cast<double>(bins);
  if (!(t >= 0)) return 0;
  return std::min(static_cast<std::size_t>(t), bins - 1);
}

inline Histogram1d histogram_1d(std::span<const double> values, std::size_t bins, double lo, double hi) {
  if (bins < 2) throw ConfigError("histogram: need at least 2 bins");
  if (!(hi > lo)) throw ConfigError("histogram: empty range");
  Histogram1d hst{lo, hi, std::vector<std::size_t>(bins, 0), values.size()};
  for (double v : values) ++hst.counts[bin_index(v, lo, hi, bins)];
  return hst;
}

struct LogPdf {
  std::vector<double> centers;
  std::vector<double> density;
  std::vector<double> log10_density;  // -inf for empty bins
  double bin_width = 0;
};

/// log10 windspeed density over [0, hi] of one or more [2, H, W] fields; hi <= 0
/// means the pooled maximum speed.
inline LogPdf windspeed_log_pdf(std::span<const double> fields, std::size_t plane, std::size_t bins, double hi = 0.0) {
  if (bins < 2) throw ConfigError("windspeed_log_pdf: need at least 2 bins");
  if (plane == 0 || fields.size() % (2 * plane) != 0) throw ContractError("windspeed_log_pdf: bad field size");
  std::vector<double> speeds;
  speeds.reserve(fields.size() / 2);
  for (std::size_t off = 0; off < fields.size(); off += 2 * plane) {
    const auto s = windspeed(fields.subspan(off, 2 * plane));
    speeds.insert(speeds.end(), s.begin(), s.end());
  }
  if (!(hi > 0)) hi = *std::max_element(speeds.begin(), speeds.end());
  if (!(hi > 0)) hi = 1.0;
  const Histogram1d hst = histogram_1d(speeds, bins, 0.0, hi);
  LogPdf pdf;
  pdf.bin_width = hst.width();
  for (std::size_t i = 0; i < bins; ++i) {
    pdf.centers.push_back((static_cast<double>(i) + 0.5) * pdf.bin_width);
    pdf.density.push_back(hst.density(i));
    pdf.log10_density.push_back(hst.counts[i] ? std::log10(hst.density(i)) : -std::numeric_limits<double>::infinity());
  }
  return pdf;
}

/// 2-D (u, v) histogram over [-range, range]^2; outliers land in edge bins.
struct JointHistogram {
  std::size_t bins = 0;
  double range = 0;
  std::vector<std::size_t> counts;  // [u bin, v bin]
  std::size_t total = 0;

  double cell_area() const {
    const double d = 2 * range / static_cast<double>(bins);
    return d * d;
  }
  double density(std::size_t iu, std::size_t iv) const {
    return static_cast<double>(counts[iu * bins + iv]) / (static_cast<double>(total) * cell_area());
  }
  double mass(std::size_t iu, std::size_t iv) const {
    return static_cast<double>(counts[iu * bins + iv]) / static_cast<double>(total);
  }
};

inline JointHistogram joint_histogram(std::span<const double> u, std::span<const double> v, std::size_t bins,
                                      double range) {
  if (bins < 2) throw ConfigError("joint_histogram: need at least 2 bins");
  if (!(range > 0)) throw ConfigError("joint_histogram: range must be positive");
  detail::same_size(u.size(), v.size(), "joint_histogram");
  JointHistogram j{bins, range, std::vector<std::size_t>(bins * bins, 0), u.size()};
  for (std::size_t i = 0; i < u.size(); ++i)
    ++j.counts[bin_index(u[i], -range, range, bins) * bins + bin_index(v[i], -range, range, bins)];
  return j;
}

/// Splits [2, H, W] fields into pooled u and v samples.
inline std::pair<std::vector<double>, std::vector<double>> split_components(std::span<const double> fields,
                                                                            std::size_t plane) {
  std::pair<std::vector<double>, std::vector<double>> uv;
  for (std::size_t off = 0; off + 2 * plane <= fields.size(); off += 2 * plane) {
    uv.first.insert(uv.first.end(), fields.begin() + off, fields.begin() + off + plane);
    uv.second.insert(uv.second.end(), fields.begin() + off + plane, fields.begin() + off + 2 * plane);
  }
  return uv;
}

/// Plug-in mutual information of the binned joint distribution, in nats.
inline double mutual_information(const JointHistogram& j) {
  std::vector<double> pu(j.bins, 0.0), pv(j.bins, 0.0);
  for (std::size_t a = 0; a < j.bins; ++a)
    for (std::size_t b = 0; b < j.bins; ++b) {
      pu[a] += j.mass(a, b);
      pv[b] += j.mass(a, b);
    }
  double mi = 0.0;
  for (std::size_t a = 0; a < j.bins; ++a)
    for (std::size_t b = 0; b < j.bins; ++b) {
      const double p = j.mass(a, b);
      if (p > 0) mi += p * std::log(p / (pu[a] * pv[b]));
    }
  return mi;
}

// ---------------------------------------------------------------------------
// Per-timestep reports

struct Record {
  std::size_t time_id = 0;
  std::string variable;
  double mae = 0;
  double crps = 0;
};

struct MeanStd {
  double mean = 0;
  double std = 0;  // population standard deviation
};

struct MetricsReport {
  std::string label;
  std::vector<Record> records;

  /// Aggregate over timesteps of one (metric, variable) pair; metric is "mae" or "crps".
  MeanStd aggregate(const std::string& metric, const std::string& variable) const {
    std::vector<double> v;
    for (const auto& r : records)
      if (r.variable == variable) v.push_back(metric == "mae" ? r.mae : r.crps);
    if (v.empty()) throw ContractError("aggregate: no records for " + variable);
    MeanStd out;
    out.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - out.mean) * (x - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(v.size()));
    return out;
  }
};

/// Adds the two records (u10m, v10m) of one timestep from an ensemble of [2, H, W] members.
inline void add_timestep(MetricsReport& rep, std::size_t time_id, const std::vector<std::vector<double>>& members,
                         std::span<const double> truth) {
  if (members.empty()) throw ContractError("add_timestep: empty ensemble");
  const std::size_t plane = truth.size() / 2;
  std::vector<double> mean(truth.size(), 0.0);
  for (const auto& m : members) {
    detail::same_size(m.size(), truth.size(), "add_timestep");
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += m[i];
  }
  for (double& v : mean) v /= static_cast<double>(members.size());
  for (std::size_t c = 0; c < 2; ++c) {
    std::vector<std::span<const double>> views;
    for (const auto& m : members) views.emplace_back(std::span(m).subspan(c * plane, plane));
    const auto t = truth.subspan(c * plane, plane);
    rep.records.push_back({time_id, kVariables[c], mae(std::span(mean).subspan(c * plane, plane), t),
                           crps_ensemble(views, t)});
  }
}

namespace detail {
inline void same_coverage(const MetricsReport& a, const MetricsReport& b, const char* who) {
  if (a.records.size() != b.records.size())
    throw ContractError(std::string(who) + ": reports cover " + std::to_string(a.records.size()) + " and " +
                        std::to_string(b.records.size()) + " records");
  for (std::size_t i = 0; i < a.records.size(); ++i)
    if (a.records[i].time_id != b.records[i].time_id || a.records[i].variable != b.records[i].variable)
      throw ContractError(std::string(who) + ": record " + std::to_string(i) + " differs in timestep or variable");
}
}  // namespace detail

struct WinCount {
  std::size_t wins = 0;
  std::size_t total = 0;
  double percent() const { return total ? 100.0 * static_cast<double>(wins) / static_cast<double>(total) : 0.0; }
};

/// Per (timestep, variable, metric) comparisons won strictly by `challenger`.
inline WinCount win_counts(const MetricsReport& baseline, const MetricsReport& challenger) {
  detail::same_coverage(baseline, challenger, "win_counts");
  WinCount w;
  for (std::size_t i = 0; i < baseline.records.size(); ++i) {
    w.wins += challenger.records[i].mae < baseline.records[i].mae;
    w.wins += challenger.records[i].crps < baseline.records[i].crps;
    w.total += 2;
  }
  return w;
}

struct DeltaRecord {
  std::size_t time_id = 0;
  std::string variable;
  double d_mae = 0;
  double d_crps = 0;
};

struct BackendDelta {
  std::vector<DeltaRecord> rows;
  double max_abs() const {
    double m = 0.0;
    for (const auto& r : rows) m = std::max({m, std::abs(r.d_mae), std::abs(r.d_crps)});
    return m;
  }
  /// max |delta| over rows at one timestep
  std::vector<double> per_timestep_max_abs() const {
    std::map<std::size_t, double> m;
    for (const auto& r : rows) m[r.time_id] = std::max({m[r.time_id], std::abs(r.d_mae), std::abs(r.d_crps)});
    std::vector<double> out;
    for (const auto& [t, v] : m) out.push_back(v);
    return out;
  }
};

/// Signed (noisy - noiseless) differences per record.
inline BackendDelta backend_delta(const MetricsReport& noisy, const MetricsReport& noiseless) {
  detail::same_coverage(noisy, noiseless, "backend_delta");
  BackendDelta d;
  for (std::size_t i = 0; i < noisy.records.size(); ++i)
    d.rows.push_back({noisy.records[i].time_id, noisy.records[i].variable,
                      noisy.records[i].mae - noiseless.records[i].mae,
                      noisy.records[i].crps - noiseless.records[i].crps});
  return d;
}

// ---------------------------------------------------------------------------
// Formatting

inline std::string fmt(const char* f, double a, double b = 0.0) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

/// Round-trippable decimal for CSV output.
inline std::string exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_mean_std(const MeanStd& m) { return fmt("%.4f ± %.4f", m.mean, m.std); }

inline std::string format_wins(const WinCount& w) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%zu/%zu (%.1f%%)", w.wins, w.total, w.percent());
  return buf;
}

/// One row per (timestep, variable, metric).
inline std::string report_csv(const MetricsReport& r) {
  std::string out = "time_id,variable,metric,value\n";
  for (const auto& rec : r.records) {
    out += std::to_string(rec.time_id) + "," + rec.variable + ",mae," + exact(rec.mae) + "\n";
    out += std::to_string(rec.time_id) + "," + rec.variable + ",crps," + exact(rec.crps) + "\n";
  }
  return out;
}

inline nlohmann::json report_json(const MetricsReport& r) {
  nlohmann::json j;
  j["label"] = r.label;
  j["timesteps"] = r.records.size() / 2;
  for (const char* metric : {"mae", "crps"})
    for (const char* var : kVariables) {
      const MeanStd m = r.aggregate(metric, var);
      j["aggregates"][metric][var] = {{"mean", m.mean}, {"std", m.std}, {"formatted", format_mean_std(m)}};
    }
  return j;
}

inline std::string delta_csv(const BackendDelta& d) {
  std::string out = "time_id,variable,delta_mae,delta_crps\n";
  for (const auto& r : d.rows)
    out += std::to_string(r.time_id) + "," + r.variable + "," + exact(r.d_mae) + "," + exact(r.d_crps) + "\n";
  return out;
}

/// Markdown table: model, MAE-u, MAE-v, CRPS-u, CRPS-v, wins against the first report.
inline std::string summary_table(const std::string& title, const std::vector<MetricsReport>& reports) {
  std::string out = "| " + title + " | MAE-u10m | MAE-v10m | CRPS-u10m | CRPS-v10m | Total Hybrid Wins |\n";
  out += "|---|---|---|---|---|---|\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    out += "| " + r.label;
    for (const char* metric : {"mae", "crps"})
      for (const char* var : kVariables) out += " | " + format_mean_std(r.aggregate(metric, var));
    out += " | " + (i == 0 ? std::string("--") : format_wins(win_counts(reports[0], r))) + " |\n";
  }
  return out;
}

}  // namespace qds::metrics
