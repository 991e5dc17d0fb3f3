// qds: data generation, training, evaluation, backend comparison and
// diagnostics for the hybrid quantum-classical downscaling model.
//
// Exit codes: 0 success, 2 configuration/contract/format/usage error,
// 3 numeric failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "qds/checkpoint.hpp"
#include "qds/config.hpp"
#include "qds/corrdiff.hpp"
#include "qds/data.hpp"
#include "qds/errors.hpp"
#include "qds/metrics.hpp"
#include "qds/optim.hpp"
#include "qds/svg.hpp"
#include "qds/train.hpp"

namespace fs = std::filesystem;
using namespace qds;

namespace {

constexpr int kResolvedFormat = 1;

// ---------------------------------------------------------------------------
// Files

void write_text(const fs::path& p, const std::string& text) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + p.string());
    out << text;
    if (!out) throw FormatError("short write on " + p.string());
  }
  fs::rename(tmp, p);
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw FormatError(p.string() + " is not valid JSON: " + e.what());
  }
}

void write_f64(const fs::path& p, std::span<const double> v) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!out) throw FormatError("short write on " + p.string());
}

std::vector<double> read_f64(const fs::path& p, std::size_t expected) {
  std::ifstream in(p, std::ios::binary | std::ios::ate);
  if (!in) throw FormatError("cannot read " + p.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != expected * sizeof(double))
    throw FormatError(p.string() + ": expected " + std::to_string(expected) + " float64 values, found " +
                      std::to_string(bytes) + " bytes");
  in.seekg(0);
  std::vector<double> v(expected);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
  return v;
}

std::string exact(double v) { return metrics::exact(v); }

fs::path fresh_run_dir(const std::string& command) {
  const std::time_t now = std::time(nullptr);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", std::localtime(&now));
  const fs::path base = fs::path("runs") / (command + "-" + stamp);
  fs::path p = base;
  for (int k = 2; fs::exists(p); ++k) p = base.string() + "-" + std::to_string(k);
  return p;
}

void write_resolved(const fs::path& dir, const std::string& command, const json& cfg) {
  json r;
  r["format"] = kResolvedFormat;
  r["command"] = command;
  r["config"] = cfg;
  write_text(dir / "resolved_config.json", r.dump(2) + "\n");
}

fs::path require_path(const RunConfig& rc, const char* key, const std::string& what) {
  const std::string p = rc.io_string(key);
  if (p.empty()) throw ConfigError(what);
  return p;
}

// ---------------------------------------------------------------------------
// Models

std::string model_key(const CorrDiffConfig& c) {
  if (!c.hybrid.enabled) return "classical";
  std::string v = quantum::variant_name(c.hybrid.ansatz.variant);
  v.erase(std::remove(v.begin(), v.end(), '+'), v.end());
  return "hybrid_" + v + "_n" + std::to_string(c.hybrid.ansatz.n_qubits) + "_c" + std::to_string(c.hybrid.n_circuits);
}

std::string model_label(const CorrDiffConfig& c) {
  if (!c.hybrid.enabled) return "classical";
  return "n_circuit=" + std::to_string(c.hybrid.n_circuits) + "(n_ch=" + std::to_string(c.hybrid.quantum_channels()) +
         "), " + quantum::variant_name(c.hybrid.ansatz.variant);
}

std::uint64_t init_seed(std::uint64_t train_seed, const std::string& stage) {
  return mix_seed(train_seed, stage == "regression" ? 101 : 202);
}

struct LoadedRun {
  fs::path dir;
  RunConfig rc;
  CorrDiffModels models;
};

RunConfig run_config_of(const fs::path& dir) {
  const fs::path p = dir / "resolved_config.json";
  if (!fs::exists(p)) throw ConfigError("no resolved_config.json in run directory " + dir.string());
  return RunConfig(load_config_file(p));
}

LoadedRun load_diffusion_run(const fs::path& dir) {
  RunConfig rc = run_config_of(dir);
  const fs::path ck_path = dir / "checkpoint.bin";
  if (!fs::exists(ck_path)) throw ConfigError("no checkpoint.bin in run directory " + dir.string());
  const Checkpoint ck = load_checkpoint(ck_path);
  if (ck.meta.value("stage", "") != "diffusion")
    throw ConfigError("run " + dir.string() + " is not a diffusion-stage run");
  UNet reg(rc.model.regression_unet(), 0), dif(rc.model.diffusion_unet(), 0);
  reg.load(ck, "reg.");
  dif.load(ck, "diff.");
  CorrDiffModels m{rc.model, reg, dif, make_schedule(rc.model.T, rc.model.schedule), ck.meta.value("x0_clip", 0.0)};
  return {dir, std::move(rc), std::move(m)};
}

void check_geometry(const data::Dataset& ds, const CorrDiffConfig& c, const std::string& who) {
  if (ds.hi_height() != c.hi_size || ds.hi_width() != c.hi_size || ds.scale != c.scale)
    throw ConfigError(who + ": dataset grid " + std::to_string(ds.hi_height()) + "x" + std::to_string(ds.hi_width()) +
                      " at scale " + std::to_string(ds.scale) + " does not match the model (" +
                      std::to_string(c.hi_size) + " at scale " + std::to_string(c.scale) + ")");
}

data::Dataset load_split(const fs::path& data_dir, const std::string& split) {
  const fs::path p = data_dir / split;
  if (!fs::exists(p / "meta.json")) throw ConfigError("dataset split '" + split + "' not found under " + data_dir.string());
  return data::read_dataset(p);
}

// ---------------------------------------------------------------------------
// gen-data

void cmd_gen_data(const RunConfig& rc, const fs::path& out) {
  data::SplitPlan plan = data::SplitPlan::contiguous(rc.n_train, rc.n_val, rc.n_ood, rc.id_spec, rc.ood_spec, rc.data_seed);
  plan.scale = rc.scale;
  const data::Splits s = data::build_splits(plan);
  data::write_dataset(s.train, out / "train");
  data::write_dataset(s.val, out / "val");
  data::write_dataset(s.ood, out / "ood");
  auto p99 = [](const data::Dataset& ds) {
    if (ds.size() == 0) return std::nan("");
    std::vector<double> speeds;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto w = metrics::windspeed(ds.sample_hi(i));
      speeds.insert(speeds.end(), w.begin(), w.end());
    }
    return metrics::quantile(std::move(speeds), 0.99);
  };
  std::printf("train %zu, val %zu, ood %zu samples; windspeed p99 val %.3f, ood %.3f\n", s.train.size(), s.val.size(),
              s.ood.size(), p99(s.val), p99(s.ood));
}

// ---------------------------------------------------------------------------
// train

std::vector<std::pair<std::size_t, std::string>> read_step_rows(const fs::path& p, std::size_t before) {
  std::vector<std::pair<std::size_t, std::string>> rows;
  if (!fs::exists(p)) return rows;
  std::stringstream ss(read_text(p));
  std::string line;
  std::getline(ss, line);  // header
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    const std::size_t step = std::stoull(line.substr(0, line.find(',')));
    if (step < before) rows.emplace_back(step, line);
  }
  return rows;
}

std::string step_csv(const std::string& header, const std::vector<std::pair<std::size_t, std::string>>& rows) {
  std::string out = header + "\n";
  for (const auto& r : rows) out += r.second + "\n";
  return out;
}

double monitor_loss(const RunConfig& rc, const data::Dataset& ds, const UNet& model, const UNet* regression,
                    const NoiseSchedule& sched) {
  NoGradGuard ng;
  const std::size_t n = std::min(rc.monitor_samples, ds.size());
  if (n == 0) return std::nan("");
  double total = 0.0;
  for (std::size_t start = 0, bi = 0; start < n; start += rc.batch, ++bi) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + rc.batch); ++i) idx.push_back(i);
    const Batch b = make_batch(ds, idx);
    Tensor loss;
    if (regression) {
      QuantumContext exact_ctx;
      loss = diffusion_loss(model, *regression, sched, b.x_hr, b.y_lr, rc.model.scale,
                            mix_seed(mix_seed(rc.train_seed, 303), bi), exact_ctx);
    } else {
      loss = mse(regression_forward(model, b.y_lr, rc.model.scale, rc.model.hi_size), b.x_hr);
    }
    total += loss.item() * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(n);
}

void cmd_train(const RunConfig& rc, const fs::path& out, bool resume) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path data_dir = require_path(rc, "data", "train: --data DIR (a gen-data output) is required");
  const data::Dataset ds = load_split(data_dir, "train");
  check_geometry(ds, rc.model, "train");
  if (ds.size() == 0) throw ConfigError("train: training split is empty");
  const bool diffusion = rc.stage == "diffusion";
  const fs::path ck_path = out / "checkpoint.bin";

  std::optional<Checkpoint> reg_ck;
  if (diffusion) {
    const std::string reg_dir = rc.io_string("regression");
    if (reg_dir.empty())
      throw ConfigError("train --stage diffusion needs a trained regression checkpoint (--regression RUN_DIR)");
    const fs::path reg_path = fs::path(reg_dir) / "checkpoint.bin";
    if (!fs::exists(reg_path))
      throw ConfigError("train --stage diffusion: no regression checkpoint at " + reg_path.string());
    reg_ck = load_checkpoint(reg_path);
    if (reg_ck->meta.value("stage", "") != "regression")
      throw ConfigError("train --stage diffusion: " + reg_path.string() + " is not a regression checkpoint");
  }

  UNet regression(rc.model.regression_unet(), init_seed(rc.train_seed, "regression"));
  if (reg_ck) regression.load(*reg_ck, "reg.");
  std::optional<UNet> dif;
  if (diffusion) dif.emplace(rc.model.diffusion_unet(), init_seed(rc.train_seed, "diffusion"));
  UNet& trained = diffusion ? *dif : regression;
  const NoiseSchedule sched = make_schedule(rc.model.T, rc.model.schedule);
  Adam opt(trained.parameters(), rc.lr);

  std::size_t start = 0;
  if (resume) {
    if (!fs::exists(ck_path)) throw ConfigError("train --resume: no checkpoint.bin in " + out.string());
    const Checkpoint ck = load_checkpoint(ck_path);
    if (ck.meta.value("stage", "") != rc.stage)
      throw ConfigError("train --resume: checkpoint stage does not match train.stage=" + rc.stage);
    if (diffusion) {
      regression.load(ck, "reg.");
      dif->load(ck, "diff.");
    } else {
      regression.load(ck, "reg.");
    }
    opt.load_state(ck);
    start = ck.meta.value("step", std::size_t{0});
    if (start > rc.steps)
      throw ConfigError("train --resume: checkpoint is at step " + std::to_string(start) + ", beyond train.steps=" +
                        std::to_string(rc.steps));
  }

  const double x0_clip = diffusion ? residual_bound(regression, ds, rc.model.scale) : 0.0;
  auto loss_rows = read_step_rows(out / "loss.csv", start);
  auto monitor_rows = read_step_rows(out / "monitor.csv", 1);
  const UNet* reg_ptr = diffusion ? &regression : nullptr;
  if (monitor_rows.empty())
    monitor_rows.emplace_back(0, "0," + exact(monitor_loss(rc, ds, trained, reg_ptr, sched)));

  auto save = [&](std::size_t step) {
    Checkpoint ck;
    regression.append_to(ck, "reg.");
    if (diffusion) dif->append_to(ck, "diff.");
    opt.append_state(ck);
    ck.meta["stage"] = rc.stage;
    ck.meta["step"] = step;
    if (diffusion) ck.meta["x0_clip"] = x0_clip;
    save_checkpoint(ck_path, ck);
    write_text(out / "loss.csv", step_csv("step,loss", loss_rows));
  };

  TrainOptions o;
  o.steps = rc.steps;
  o.batch = rc.batch;
  o.seed = rc.train_seed;
  o.checkpoint_every = rc.checkpoint_every;
  o.on_step = [&](std::size_t step, double loss) {
    loss_rows.emplace_back(step, std::to_string(step) + "," + exact(loss));
  };
  o.on_checkpoint = save;
  if (diffusion)
    train_diffusion(*dif, regression, sched, ds, rc.model, opt, start, o);
  else
    train_regression(regression, ds, rc.model, opt, start, o);
  save(rc.steps);

  const double final_monitor = monitor_loss(rc, ds, trained, reg_ptr, sched);
  monitor_rows.erase(std::remove_if(monitor_rows.begin(), monitor_rows.end(), [](const auto& r) { return r.first != 0; }),
                     monitor_rows.end());
  if (rc.steps > 0) monitor_rows.emplace_back(rc.steps, std::to_string(rc.steps) + "," + exact(final_monitor));
  write_text(out / "monitor.csv", step_csv("step,monitor_loss", monitor_rows));

  const double initial = std::stod(monitor_rows.front().second.substr(2));
  json summary;
  summary["stage"] = rc.stage;
  summary["steps"] = rc.steps;
  summary["model"] = model_key(rc.model);
  summary["parameters"] = trained.parameters().size();
  summary["initial_monitor_loss"] = initial;
  summary["final_monitor_loss"] = final_monitor;
  summary["monitor_ratio"] = final_monitor / initial;
  summary["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_text(out / "summary.json", summary.dump(2) + "\n");
  std::printf("%s stage (%s): monitor loss %.6f -> %.6f over %zu steps\n", rc.stage.c_str(), model_key(rc.model).c_str(),
              initial, final_monitor, rc.steps);
}

// ---------------------------------------------------------------------------
// evaluate

std::vector<std::size_t> eval_times(const RunConfig& rc, const data::Dataset& ds) {
  const std::size_t n = rc.max_times ? std::min(rc.max_times, ds.size()) : ds.size();
  if (n == 0) throw ConfigError("evaluate: split '" + rc.split + "' has no samples");
  std::vector<std::size_t> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = i;
  return t;
}

struct EnsembleRun {
  metrics::MetricsReport report;
  std::vector<double> members;     // [times, M, 2, H, W]
  std::vector<double> regression;  // [times, 2, H, W]
};

EnsembleRun run_ensembles(const CorrDiffModels& models, const data::Dataset& ds, const std::vector<std::size_t>& times,
                          std::size_t members, std::uint64_t seed, const quantum::Backend& backend,
                          const std::string& label, bool keep_fields) {
  EnsembleRun r;
  r.report.label = label;
  const std::size_t h = ds.lo_height(), w = ds.lo_width();
  for (std::size_t t : times) {
    const auto y = data::normalize(ds.sample_lo(t), ds.stats, h * w);
    const EnsembleForecast f = downscale_ensemble(models, y, members, ds.stats, mix_seed(seed, t), backend);
    metrics::add_timestep(r.report, t, f.members, ds.sample_hi(t));
    if (keep_fields) {
      for (const auto& m : f.members) r.members.insert(r.members.end(), m.begin(), m.end());
      r.regression.insert(r.regression.end(), f.regression.begin(), f.regression.end());
    }
  }
  return r;
}

void cmd_evaluate(const RunConfig& rc, const fs::path& out) {
  const fs::path data_dir = require_path(rc, "data", "evaluate: --data DIR is required");
  std::vector<fs::path> dirs;
  const std::string baseline = rc.io_string("baseline");
  if (!baseline.empty()) dirs.emplace_back(baseline);
  for (const auto& r : rc.io_list("runs")) dirs.emplace_back(r);
  if (dirs.empty()) throw ConfigError("evaluate: give at least one --run RUN_DIR (and optionally --baseline RUN_DIR)");

  const data::Dataset ds = load_split(data_dir, rc.split);
  const auto times = eval_times(rc, ds);
  const std::size_t H = ds.hi_height(), W = ds.hi_width();
  fs::create_directories(out / "ensembles");

  std::vector<double> truth;
  for (std::size_t t : times) truth.insert(truth.end(), ds.sample_hi(t).begin(), ds.sample_hi(t).end());
  write_f64(out / "ensembles" / "truth.f64", truth);

  std::vector<metrics::MetricsReport> reports;
  json models = json::array();
  std::set<std::string> keys;
  for (const auto& dir : dirs) {
    const LoadedRun run = load_diffusion_run(dir);
    check_geometry(ds, run.models.cfg, "evaluate");
    std::string key = model_key(run.models.cfg);
    for (int k = 2; keys.count(key); ++k) key = model_key(run.models.cfg) + "_" + std::to_string(k);
    keys.insert(key);
    const auto t0 = std::chrono::steady_clock::now();
    EnsembleRun e = run_ensembles(run.models, ds, times, rc.members, rc.eval_seed, quantum::Backend::exact(),
                                  model_label(run.models.cfg), true);
    write_text(out / ("report_" + key + ".csv"), metrics::report_csv(e.report));
    json rj = metrics::report_json(e.report);
    rj["key"] = key;
    rj["members"] = rc.members;
    rj["split"] = rc.split;
    write_text(out / ("report_" + key + ".json"), rj.dump(2) + "\n");
    write_f64(out / "ensembles" / (key + ".f64"), e.members);
    write_f64(out / "ensembles" / ("regression_" + key + ".f64"), e.regression);
    models.push_back({{"key", key},
                      {"label", e.report.label},
                      {"hybrid", run.models.cfg.hybrid.enabled},
                      {"run", fs::absolute(dir).string()},
                      {"members_file", key + ".f64"},
                      {"regression_file", "regression_" + key + ".f64"}});
    std::printf("%-28s %zu times x %zu members in %.1f s\n", e.report.label.c_str(), times.size(), rc.members,
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    reports.push_back(std::move(e.report));
  }

  json meta;
  meta["format"] = 1;
  meta["dtype"] = "float64-le";
  meta["split"] = rc.split;
  meta["times"] = times;
  meta["members"] = rc.members;
  meta["height"] = H;
  meta["width"] = W;
  meta["truth_file"] = "truth.f64";
  meta["models"] = models;
  write_text(out / "ensembles" / "meta.json", meta.dump(2) + "\n");

  const std::string title = rc.split == "ood" ? "OOD split" : (rc.split == "val" ? "Validation split" : "Train split");
  const std::string table = metrics::summary_table(title, reports);
  write_text(out / "table.md", table);
  std::string wins = "label,wins,total,percent\n";
  json wj = json::array();
  for (std::size_t i = 1; i < reports.size(); ++i) {
    const auto w = metrics::win_counts(reports[0], reports[i]);
    wins += "\"" + reports[i].label + "\"," + std::to_string(w.wins) + "," + std::to_string(w.total) + "," +
            exact(w.percent()) + "\n";
    wj.push_back({{"label", reports[i].label}, {"wins", w.wins}, {"total", w.total}, {"formatted", metrics::format_wins(w)}});
  }
  if (reports.size() > 1) {
    write_text(out / "wins.csv", wins);
    write_text(out / "wins.json", json({{"baseline", reports[0].label}, {"split", rc.split}, {"rows", wj}}).dump(2) + "\n");
  }
  std::cout << table;
}

// ---------------------------------------------------------------------------
// compare-backends

std::string p_tag(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", p);
  return buf;
}

void cmd_compare_backends(const RunConfig& rc, const fs::path& out) {
  const fs::path data_dir = require_path(rc, "data", "compare-backends: --data DIR is required");
  const auto runs = rc.io_list("runs");
  if (runs.size() != 1) throw ConfigError("compare-backends: give exactly one --run RUN_DIR (a hybrid diffusion run)");
  const LoadedRun run = load_diffusion_run(runs[0]);
  if (!run.models.diffusion.is_hybrid())
    throw ConfigError("compare-backends: run " + runs[0] + " is classical; no quantum layer to perturb");
  const data::Dataset ds = load_split(data_dir, rc.split);
  check_geometry(ds, run.models.cfg, "compare-backends");
  const std::size_t K = rc.times, n = ds.size();
  if (K > n) throw ConfigError("compare-backends: --times " + std::to_string(K) + " exceeds the " + std::to_string(n) +
                               " samples of split '" + rc.split + "'");
  std::vector<std::size_t> times(K);
  for (std::size_t i = 0; i < K; ++i) times[i] = i * n / K;

  const std::string label = model_label(run.models.cfg);
  const EnsembleRun exact_run =
      run_ensembles(run.models, ds, times, rc.backend_members, rc.eval_seed, quantum::Backend::exact(), label, false);
  write_text(out / "report_exact.csv", metrics::report_csv(exact_run.report));

  std::string summary = "p_dep,p_ro,shots,replicate,max_abs_delta\n";
  std::string sweep = "p_dep,p_ro,shots,replicates,mean_max_abs_delta,std_max_abs_delta\n";
  json sj = json::array();
  svg::LineChart chart{"Per-timestep max |delta| (noisy - exact)", "verification time index", "max |delta|", false, true, {}};
  for (double p : rc.p_dep) {
    const bool noise_free = p == 0.0 && rc.p_ro == 0.0;
    const std::size_t reps = noise_free ? 1 : rc.replicates;
    std::vector<double> maxima;
    for (std::size_t r = 0; r < reps; ++r) {
      quantum::NoiseParams np{p, rc.p_ro, rc.shots, mix_seed(rc.backend_seed, r)};
      const EnsembleRun noisy = run_ensembles(run.models, ds, times, rc.backend_members, rc.eval_seed,
                                              quantum::Backend::noisy(np), label, false);
      const metrics::BackendDelta d = metrics::backend_delta(noisy.report, exact_run.report);
      write_text(out / ("delta_pdep" + p_tag(p) + "_rep" + std::to_string(r) + ".csv"), metrics::delta_csv(d));
      maxima.push_back(d.max_abs());
      summary += exact(p) + "," + exact(rc.p_ro) + "," + std::to_string(rc.shots) + "," + std::to_string(r) + "," +
                 exact(d.max_abs()) + "\n";
      if (r == 0) {
        svg::Series s{"p_dep=" + p_tag(p), {}, d.per_timestep_max_abs()};
        for (std::size_t i = 0; i < s.y.size(); ++i) s.x.push_back(static_cast<double>(i));
        chart.series.push_back(std::move(s));
      }
      std::printf("p_dep %-8s p_ro %-8s replicate %zu: max|delta| = %.3e\n", p_tag(p).c_str(), p_tag(rc.p_ro).c_str(),
                  r, d.max_abs());
    }
    double mean = 0.0, var = 0.0;
    for (double m : maxima) mean += m;
    mean /= static_cast<double>(maxima.size());
    for (double m : maxima) var += (m - mean) * (m - mean);
    const double sd = maxima.size() > 1 ? std::sqrt(var / static_cast<double>(maxima.size() - 1)) : 0.0;
    sweep += exact(p) + "," + exact(rc.p_ro) + "," + std::to_string(rc.shots) + "," + std::to_string(reps) + "," +
             exact(mean) + "," + exact(sd) + "\n";
    sj.push_back({{"p_dep", p}, {"p_ro", rc.p_ro}, {"shots", rc.shots}, {"replicates", reps}, {"max_abs", maxima},
                  {"mean_max_abs", mean}, {"std_max_abs", sd}});
  }
  write_text(out / "backend_summary.csv", summary);
  write_text(out / "backend_sweep.csv", sweep);
  write_text(out / "deltas.svg", svg::render(chart));
  json meta;
  meta["times"] = times;
  meta["members"] = rc.backend_members;
  meta["model"] = label;
  meta["sweep"] = sj;
  write_text(out / "summary.json", meta.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// diagnostics

struct Source {
  std::string name;
  std::vector<double> fields;  // [count, 2, H, W]
  std::size_t per_time = 1;    // fields per verification time
};

void cmd_diagnostics(const RunConfig& rc, const fs::path& out) {
  std::vector<Source> sources;
  std::size_t H = 0, W = 0, T = 0;
  const auto evals = rc.io_list("evals");
  if (evals.empty()) {
    const fs::path data_dir =
        require_path(rc, "data", "diagnostics: give --eval EVAL_DIR (evaluate output) or --data DIR for truth only");
    const data::Dataset ds = load_split(data_dir, rc.split);
    const auto times = eval_times(rc, ds);
    H = ds.hi_height();
    W = ds.hi_width();
    T = times.size();
    Source truth{"truth", {}, 1};
    for (std::size_t t : times) truth.fields.insert(truth.fields.end(), ds.sample_hi(t).begin(), ds.sample_hi(t).end());
    sources.push_back(std::move(truth));
  } else {
    std::set<std::string> seen;
    for (const auto& e : evals) {
      const fs::path dir = fs::path(e) / "ensembles";
      if (!fs::exists(dir / "meta.json"))
        throw ConfigError("diagnostics: " + e + " has no persisted ensembles (ensembles/meta.json); run evaluate first");
      const json meta = read_json(dir / "meta.json");
      const std::size_t h = meta.at("height").get<std::size_t>(), w = meta.at("width").get<std::size_t>();
      const std::size_t t = meta.at("times").size(), m = meta.at("members").get<std::size_t>();
      const std::size_t field = 2 * h * w;
      const auto truth = read_f64(dir / meta.at("truth_file").get<std::string>(), t * field);
      if (sources.empty()) {
        H = h;
        W = w;
        T = t;
        sources.push_back({"truth", truth, 1});
      } else if (h != H || w != W || truth != sources[0].fields) {
        throw ConfigError("diagnostics: " + e + " was evaluated on different truth fields than " + evals[0]);
      }
      for (const auto& model : meta.at("models")) {
        const std::string key = model.at("key").get<std::string>();
        if (!seen.insert(key).second) continue;
        if (sources.size() == 1)
          sources.push_back({"regression", read_f64(dir / model.at("regression_file").get<std::string>(), t * field), 1});
        sources.push_back({key, read_f64(dir / model.at("members_file").get<std::string>(), t * m * field), m});
      }
    }
  }
  const std::size_t plane = H * W;
  const Source& truth = sources[0];

  // Spectra.
  std::string spec = "source,direction,k,power\n";
  for (auto dir : {metrics::Direction::zonal, metrics::Direction::meridional}) {
    svg::LineChart chart{std::string("Kinetic-energy spectrum, ") + metrics::direction_name(dir), "wavenumber k", "power",
                         true, true, {}};
    for (const auto& s : sources) {
      const auto c = metrics::directional_spectrum(s.fields, s.fields.size() / (2 * plane), H, W, dir);
      svg::Series series{s.name, {}, c.power};
      for (std::size_t i = 0; i < c.k.size(); ++i) {
        spec += s.name + "," + metrics::direction_name(dir) + "," + std::to_string(c.k[i]) + "," + exact(c.power[i]) + "\n";
        series.x.push_back(static_cast<double>(c.k[i]));
      }
      chart.series.push_back(std::move(series));
    }
    write_text(out / (std::string("spectrum_") + metrics::direction_name(dir) + ".svg"), svg::render(chart));
  }
  write_text(out / "spectrum.csv", spec);

  // Windspeed log-PDF on shared bins.
  double speed_max = 0.0, comp_max = 0.0;
  for (const auto& s : sources) {
    for (double v : s.fields) comp_max = std::max(comp_max, std::abs(v));
    for (std::size_t off = 0; off < s.fields.size(); off += 2 * plane)
      for (double v : metrics::windspeed(std::span(s.fields).subspan(off, 2 * plane))) speed_max = std::max(speed_max, v);
  }
  std::string pdf_csv = "source,bin_center,density,log10_density\n";
  svg::LineChart pdf_chart{"Windspeed log-PDF", "windspeed (m/s)", "log10 density", false, false, {}};
  for (const auto& s : sources) {
    const auto pdf = metrics::windspeed_log_pdf(s.fields, plane, rc.pdf_bins, speed_max);
    for (std::size_t i = 0; i < pdf.centers.size(); ++i)
      pdf_csv += s.name + "," + exact(pdf.centers[i]) + "," + exact(pdf.density[i]) + "," + exact(pdf.log10_density[i]) + "\n";
    pdf_chart.series.push_back({s.name, pdf.centers, pdf.log10_density});
  }
  write_text(out / "logpdf.csv", pdf_csv);
  write_text(out / "logpdf.svg", svg::render(pdf_chart));

  // Joint (u, v) densities on a shared symmetric range.
  const double range = comp_max > 0 ? comp_max : 1.0;
  std::string joint_csv = "source,u_center,v_center,density\n";
  for (const auto& s : sources) {
    const auto [u, v] = metrics::split_components(s.fields, plane);
    const auto j = metrics::joint_histogram(u, v, rc.joint_bins, range);
    const double d = 2 * range / static_cast<double>(rc.joint_bins);
    svg::Heatmap hm{"Joint (u, v) density: " + s.name, "u10m (m/s)", "v10m (m/s)", rc.joint_bins, rc.joint_bins, {},
                    -range, range, -range, range, true};
    hm.values.assign(rc.joint_bins * rc.joint_bins, 0.0);
    for (std::size_t iu = 0; iu < rc.joint_bins; ++iu)
      for (std::size_t iv = 0; iv < rc.joint_bins; ++iv) {
        const double dens = j.density(iu, iv);
        joint_csv += s.name + "," + exact(-range + (static_cast<double>(iu) + 0.5) * d) + "," +
                     exact(-range + (static_cast<double>(iv) + 0.5) * d) + "," + exact(dens) + "\n";
        hm.values[iv * rc.joint_bins + iu] = dens;
      }
    write_text(out / ("joint_" + s.name + ".svg"), svg::render(hm));
  }
  write_text(out / "joint.csv", joint_csv);

  // FSS at the pooled truth p99 (or configured quantile).
  std::vector<double> truth_speeds;
  for (std::size_t off = 0; off < truth.fields.size(); off += 2 * plane) {
    const auto sp = metrics::windspeed(std::span(truth.fields).subspan(off, 2 * plane));
    truth_speeds.insert(truth_speeds.end(), sp.begin(), sp.end());
  }
  const double threshold = metrics::quantile(truth_speeds, rc.fss_quantile);
  std::string fss_csv = "source,neighborhood,threshold,fss\n";
  svg::LineChart fss_chart{"Fractions skill score at the pooled truth quantile", "neighbourhood (grid points)", "FSS",
                           false, false, {}};
  for (const auto& s : sources) {
    svg::Series series{s.name, {}, {}};
    for (std::size_t nb : rc.fss_neighborhoods) {
      metrics::FssTerms terms;
      for (std::size_t t = 0; t < T; ++t) {
        const std::span<const double> ts(truth_speeds.data() + t * plane, plane);
        for (std::size_t m = 0; m < s.per_time; ++m) {
          const auto sp = metrics::windspeed(std::span(s.fields).subspan((t * s.per_time + m) * 2 * plane, 2 * plane));
          terms += metrics::fss_terms(sp, ts, H, W, threshold, nb);
        }
      }
      fss_csv += s.name + "," + std::to_string(nb) + "," + exact(threshold) + "," + exact(terms.score()) + "\n";
      series.x.push_back(static_cast<double>(nb));
      series.y.push_back(terms.score());
    }
    fss_chart.series.push_back(std::move(series));
  }
  write_text(out / "fss.csv", fss_csv);
  write_text(out / "fss.svg", svg::render(fss_chart));

  json meta;
  meta["times"] = T;
  meta["threshold"] = threshold;
  meta["fss_quantile"] = rc.fss_quantile;
  meta["sources"] = json::array();
  for (const auto& s : sources) meta["sources"].push_back({{"name", s.name}, {"fields", s.fields.size() / (2 * plane)}});
  write_text(out / "diagnostics.json", meta.dump(2) + "\n");
  std::printf("diagnostics for %zu sources over %zu times; FSS threshold %.4f m/s\n", sources.size(), T, threshold);
}

// ---------------------------------------------------------------------------
// Dispatch

const std::vector<std::string> kCommands = {"gen-data", "train", "evaluate", "compare-backends", "diagnostics"};

// io paths are stored absolute so a replay works from any directory.
void absolutize_io(json& cfg) {
  json& io = cfg["io"];
  for (const char* k : {"data", "regression", "baseline"}) {
    const std::string p = io[k].get<std::string>();
    if (!p.empty()) io[k] = fs::absolute(p).lexically_normal().string();
  }
  for (const char* k : {"runs", "evals"})
    for (auto& v : io[k]) v = fs::absolute(v.get<std::string>()).lexically_normal().string();
}

void run_command(const std::string& command, json cfg, fs::path out, bool resume) {
  if (resume) {
    if (out.empty()) throw ConfigError("train --resume needs --out RUN_DIR naming the interrupted run");
    if (!fs::exists(out / "resolved_config.json"))
      throw ConfigError("train --resume: no resolved_config.json in " + out.string());
  }
  absolutize_io(cfg);
  const RunConfig rc(cfg);
  if (out.empty()) out = fresh_run_dir(command);
  if (command == "train" && !resume && fs::exists(out / "checkpoint.bin"))
    throw ConfigError("run directory " + out.string() + " already holds a checkpoint; pass --resume to continue it");
  fs::create_directories(out);
  write_resolved(out, command, cfg);
  if (command == "gen-data")
    cmd_gen_data(rc, out);
  else if (command == "train")
    cmd_train(rc, out, resume);
  else if (command == "evaluate")
    cmd_evaluate(rc, out);
  else if (command == "compare-backends")
    cmd_compare_backends(rc, out);
  else if (command == "diagnostics")
    cmd_diagnostics(rc, out);
  else
    throw ConfigError("unknown command '" + command + "'");
  std::printf("run_dir: %s\n", out.string().c_str());
}

/// `--section.key value` or `--section.key=value` pairs left over by CLI11.
void apply_dotted(json& cfg, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.find('.') == std::string::npos)
      throw ConfigError("unexpected argument '" + a + "' (overrides look like --section.key value)");
    const std::string body = a.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      set_config_key(cfg, body.substr(0, eq), body.substr(eq + 1));
      continue;
    }
    if (i + 1 >= extras.size()) throw ConfigError("override " + a + " is missing a value");
    set_config_key(cfg, body, extras[++i]);
  }
}

struct Flag {
  std::string name;  // CLI11 option name
  std::string key;   // config key
  std::string help;
  bool repeat = false;
};

const std::map<std::string, std::vector<Flag>>& command_flags() {
  static const std::map<std::string, std::vector<Flag>> flags = {
      {"gen-data",
       {{"--n-train", "data.n_train", "training samples"},
        {"--n-val", "data.n_val", "validation samples"},
        {"--n-ood", "data.n_ood", "out-of-distribution samples"},
        {"--seed", "data.seed", "base seed"},
        {"--ood-gamma", "data.ood_gamma", "spectral slope of the shifted split"},
        {"--ood-mean-shift", "data.ood_mean_shift", "mean-wind shift of the shifted split (m/s)"}}},
      {"train",
       {{"--stage", "train.stage", "regression or diffusion"},
        {"--data", "io.data", "dataset directory from gen-data"},
        {"--regression", "io.regression", "regression run directory (diffusion stage)"},
        {"--steps", "train.steps", "optimizer steps"},
        {"--seed", "train.seed", "training seed"}}},
      {"evaluate",
       {{"--run", "io.runs", "diffusion run directory (repeatable)", true},
        {"--baseline", "io.baseline", "baseline diffusion run; enables win counts"},
        {"--data", "io.data", "dataset directory"},
        {"--split", "eval.split", "val or ood"},
        {"--members", "eval.members", "ensemble members per time"},
        {"--seed", "eval.seed", "ensemble seed"},
        {"--max-times", "eval.max_times", "evaluate only the first N times (0: all)"}}},
      {"compare-backends",
       {{"--run", "io.runs", "hybrid diffusion run directory", true},
        {"--data", "io.data", "dataset directory"},
        {"--split", "eval.split", "split to sample verification times from"},
        {"--p-dep", "backend.p_dep", "depolarizing probabilities (comma list)"},
        {"--p-ro", "backend.p_ro", "readout flip probability"},
        {"--shots", "backend.shots", "trajectories per circuit"},
        {"--times", "backend.times", "evenly spaced verification times K"},
        {"--members", "backend.members", "ensemble members per time"},
        {"--replicates", "backend.replicates", "independent noise seeds per setting"},
        {"--seed", "backend.seed", "noise seed"}}},
      {"diagnostics",
       {{"--eval", "io.evals", "evaluate output directory (repeatable)", true},
        {"--data", "io.data", "dataset directory (truth-only mode)"},
        {"--split", "eval.split", "split for truth-only mode"},
        {"--max-times", "eval.max_times", "truth-only mode: first N times (0: all)"}}},
  };
  return flags;
}

int exit_with(const char* kind, const std::string& msg, int code) {
  std::fprintf(stderr, "qds: %s: %s\n", kind, msg.c_str());
  return code;
}

int real_main(int argc, char** argv) {
  CLI::App app{"Hybrid quantum-classical corrective diffusion downscaling (desk scale).\n"
               "Config keys can be overridden with --section.key value. QDS_THREADS caps worker threads."};
  app.require_subcommand(1);

  struct Parsed {
    std::string config_file, out;
    std::map<std::string, std::vector<std::string>> values;
    bool resume = false;
  };
  std::map<std::string, Parsed> parsed;
  std::map<std::string, CLI::App*> subs;
  for (const auto& cmd : kCommands) {
    CLI::App* sub = app.add_subcommand(cmd, cmd == "gen-data"           ? "generate train/val/ood synthetic wind splits"
                                            : cmd == "train"            ? "train the regression or diffusion stage"
                                            : cmd == "evaluate"         ? "ensemble evaluation, reports and win counts"
                                            : cmd == "compare-backends" ? "exact vs noisy quantum backend deltas"
                                                                        : "spectra, log-PDF, joint density and FSS");
    sub->allow_extras();
    Parsed& p = parsed[cmd];
    sub->add_option("--config", p.config_file, "JSON config file (or a resolved_config.json)");
    if (cmd == "gen-data")
      sub->add_option("--out", p.out, "output directory")->required();
    else
      sub->add_option("--out", p.out, "output directory (default: runs/<command>-<timestamp>)");
    if (cmd == "train") sub->add_flag("--resume", p.resume, "continue the run in --out from its last checkpoint");
    for (const auto& f : command_flags().at(cmd)) {
      auto* o = sub->add_option(f.name, p.values[f.name], f.help + " [" + f.key + "]");
      if (!f.repeat) o->expected(1);
    }
    subs[cmd] = sub;
  }
  std::string replay_config, replay_out;
  CLI::App* replay = app.add_subcommand("replay", "rerun a command from its resolved_config.json");
  replay->add_option("--config", replay_config, "resolved_config.json of the run to replay")->required();
  replay->add_option("--out", replay_out, "output directory (default: runs/<command>-<timestamp>)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e);
      return 0;
    }
    return exit_with("usage error", e.what(), 2);
  }

  if (replay->parsed()) {
    const json r = read_json(replay_config);
    if (!r.contains("command") || !r.contains("config"))
      throw ConfigError(replay_config + " is not a resolved_config.json (needs command and config)");
    const std::string command = r["command"].get<std::string>();
    if (std::find(kCommands.begin(), kCommands.end(), command) == kCommands.end())
      throw ConfigError("replay: unknown command '" + command + "'");
    json cfg = default_config();
    merge_config(cfg, r["config"]);
    run_command(command, cfg, replay_out, false);
    return 0;
  }

  for (const auto& cmd : kCommands) {
    CLI::App* sub = subs[cmd];
    if (!sub->parsed()) continue;
    const Parsed& p = parsed[cmd];
    json cfg = default_config();
    if (p.resume && !p.out.empty() && fs::exists(fs::path(p.out) / "resolved_config.json"))
      cfg = load_config_file(fs::path(p.out) / "resolved_config.json");
    if (!p.config_file.empty()) cfg = load_config_file(p.config_file, cfg);
    apply_dotted(cfg, sub->remaining());
    for (const auto& f : command_flags().at(cmd)) {
      const auto& vals = p.values.at(f.name);
      if (vals.empty()) continue;
      if (f.repeat) {
        set_config_key(cfg, f.key, "[]");
        for (const auto& v : vals) append_config_key(cfg, f.key, v);
      } else {
        set_config_key(cfg, f.key, vals.back());
      }
    }
    run_command(cmd, cfg, p.out, p.resume);
    return 0;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return real_main(argc, argv);
  } catch (const NumericError& e) {
    return exit_with("numeric error", e.what(), 3);
  } catch (const ConfigError& e) {
    return exit_with("configuration error", e.what(), 2);
  } catch (const ContractError& e) {
    return exit_with("contract error", e.what(), 2);
  } catch (const FormatError& e) {
    return exit_with("format error", e.what(), 2);
  } catch (const json::exception& e) {
    return exit_with("configuration error", e.what(), 2);
  } catch (const fs::filesystem_error& e) {
    return exit_with("file error", e.what(), 2);
  } catch (const std::exception& e) {
    return exit_with("error", e.what(), 1);
  }
}
