#pragma once

// Run configuration: a JSON tree with fixed defaults. Config files and
// `--section.key value` overrides may only touch keys that exist in the
// defaults, and values keep the type of the default.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "qds/ansatz.hpp"
#include "qds/corrdiff.hpp"
#include "qds/data.hpp"
#include "qds/errors.hpp"
#include "qds/hybrid.hpp"

namespace qds {

using nlohmann::json;

inline json default_config() {
  const data::FieldSpec f{};
  json c;
  c["data"] = {{"n_train", 256},     {"n_val", 100},       {"n_ood", 100},      {"seed", 0},
               {"height", f.height}, {"width", f.width},   {"scale", 4},        {"gamma", f.gamma},
               {"sigma", f.sigma},   {"mean_u", f.mean_u}, {"mean_v", f.mean_v}, {"rho", f.rho},
               {"ood_gamma", 3.0},   {"ood_mean_shift", 1.5}};
  c["io"] = {{"data", ""}, {"regression", ""}, {"runs", json::array()}, {"baseline", ""}, {"evals", json::array()}};
  c["model"] = {{"channels", {8, 8, 16, 16, 16}}, {"emb_dim", 32}};
  c["ansatz"] = {{"variant", "B"}, {"n_qubits", 12}, {"layers", 1}};
  c["hybrid"] = {{"enabled", false}, {"n_circuits", 1}};
  c["diffusion"] = {{"T", 64}, {"schedule", "linear"}};
  c["train"] = {{"stage", "regression"}, {"steps", 500},          {"lr", 2e-3},
                {"batch", 8},            {"seed", 0},             {"checkpoint_every", 50},
                {"monitor_samples", 32}};
  c["eval"] = {{"split", "val"}, {"members", 16}, {"seed", 0}, {"max_times", 0}};
  c["diagnostics"] = {{"fss_neighborhoods", {1, 3, 5, 9}},
                      {"fss_quantile", 0.99},
                      {"pdf_bins", 40},
                      {"joint_bins", 32}};
  c["backend"] = {{"p_dep", json::array({1e-3})}, {"p_ro", 0.0}, {"shots", 1000}, {"times", 20},
                  {"members", 16},   {"replicates", 1}, {"seed", 0}};
  return c;
}

namespace detail {

inline json parse_scalar_like(const json& proto, const std::string& key, const std::string& text) {
  auto bad = [&](const char* what) {
    return ConfigError("config key '" + key + "': cannot parse '" + text + "' as " + what);
  };
  if (proto.is_boolean()) {
    if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
    if (text == "false" || text == "0" || text == "no" || text == "off") return false;
    throw bad("a boolean");
  }
  if (proto.is_number_integer()) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(text, &used);
    } catch (...) {
      throw bad("an integer");
    }
    if (used != text.size()) throw bad("an integer");
    if (v < 0) throw ConfigError("config key '" + key + "' must be non-negative, got " + text);
    return static_cast<std::uint64_t>(v);
  }
  if (proto.is_number()) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(text, &used);
    } catch (...) {
      throw bad("a number");
    }
    if (used != text.size()) throw bad("a number");
    return v;
  }
  if (proto.is_string()) return text;
  throw ConfigError("config key '" + key + "' is not settable from the command line");
}

inline bool same_kind(const json& proto, const json& v) {
  if (proto.is_number()) return v.is_number() && (!proto.is_number_integer() || v.is_number_integer());
  if (proto.is_array()) return v.is_array();
  return proto.type() == v.type();
}

inline void merge_checked(json& dst, const json& src, const std::string& prefix) {
  if (!src.is_object()) throw ConfigError("config " + (prefix.empty() ? std::string("root") : prefix) + " must be an object");
  for (auto it = src.begin(); it != src.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!dst.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& d = dst[it.key()];
    if (d.is_object()) {
      merge_checked(d, it.value(), key);
      continue;
    }
    if (!same_kind(d, it.value()))
      throw ConfigError("config key '" + key + "' expects " + d.type_name() + ", got " + it.value().type_name());
    if (it.value().is_number_integer() && it.value().get<long long>() < 0)
      throw ConfigError("config key '" + key + "' must be non-negative");
    d = it.value();
  }
}

}  // namespace detail

/// Sets `section.key` from command-line text, typed by the current value.
/// Arrays take a JSON array or a comma-separated list.
inline void set_config_key(json& cfg, const std::string& dotted, const std::string& text) {
  json* node = &cfg;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + dotted + "'");
    node = &(*node)[part];
  }
  if (node->is_object()) throw ConfigError("config key '" + dotted + "' names a section, not a value");
  if (!node->is_array()) {
    *node = detail::parse_scalar_like(*node, dotted, text);
    return;
  }
  if (!text.empty() && text.front() == '[') {
    json v;
    try {
      v = json::parse(text);
    } catch (const json::exception&) {
      throw ConfigError("config key '" + dotted + "': '" + text + "' is not a JSON array");
    }
    if (!v.is_array()) throw ConfigError("config key '" + dotted + "' expects an array");
    *node = v;
    return;
  }
  // Element type follows the existing elements; string lists when empty.
  const json proto = node->empty() ? json("") : (*node)[0];
  json out = json::array();
  std::stringstream items(text);
  std::string item;
  while (std::getline(items, item, ',')) {
    if (item.empty()) continue;
    out.push_back(detail::parse_scalar_like(proto, dotted, item));
  }
  *node = out;
}

/// Appends to an array-valued key (used by repeatable flags such as --run).
inline void append_config_key(json& cfg, const std::string& dotted, const std::string& text) {
  json tmp = cfg;
  set_config_key(tmp, dotted, text);
  json* node = &cfg;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) node = &(*node)[part];
  json* added = &tmp;
  std::stringstream ss2(dotted);
  while (std::getline(ss2, part, '.')) added = &(*added)[part];
  for (const auto& v : *added) node->push_back(v);
}

/// Defaults overlaid with a config file. A resolved_config.json is accepted as
/// well; its "config" member is used.
inline json load_config_file(const std::filesystem::path& path, json base = default_config()) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  if (j.is_object() && j.contains("config") && j.contains("command")) j = j["config"];
  detail::merge_checked(base, j, "");
  return base;
}

inline void merge_config(json& base, const json& overlay) { detail::merge_checked(base, overlay, ""); }

/// Typed view of the configuration, validated on construction.
struct RunConfig {
  json raw;

  data::FieldSpec id_spec;
  data::FieldSpec ood_spec;
  std::size_t n_train = 0, n_val = 0, n_ood = 0, scale = 4;
  std::uint64_t data_seed = 0;

  CorrDiffConfig model;

  std::string stage;
  std::size_t steps = 0, batch = 0, checkpoint_every = 0, monitor_samples = 0;
  double lr = 0;
  std::uint64_t train_seed = 0;

  std::string split;
  std::size_t members = 0, max_times = 0;
  std::uint64_t eval_seed = 0;

  std::vector<std::size_t> fss_neighborhoods;
  double fss_quantile = 0.99;
  std::size_t pdf_bins = 0, joint_bins = 0;

  std::vector<double> p_dep;
  double p_ro = 0;
  std::size_t shots = 0, times = 0, backend_members = 0, replicates = 0;
  std::uint64_t backend_seed = 0;

  explicit RunConfig(json j) : raw(std::move(j)) {
    const json& d = raw.at("data");
    id_spec.height = d.at("height").get<std::size_t>();
    id_spec.width = d.at("width").get<std::size_t>();
    id_spec.gamma = d.at("gamma").get<double>();
    id_spec.sigma = d.at("sigma").get<double>();
    id_spec.mean_u = d.at("mean_u").get<double>();
    id_spec.mean_v = d.at("mean_v").get<double>();
    id_spec.rho = d.at("rho").get<double>();
    id_spec.validate();
    ood_spec = data::default_ood_spec(id_spec, d.at("ood_gamma").get<double>(), d.at("ood_mean_shift").get<double>());
    ood_spec.validate();
    n_train = d.at("n_train").get<std::size_t>();
    n_val = d.at("n_val").get<std::size_t>();
    n_ood = d.at("n_ood").get<std::size_t>();
    data_seed = d.at("seed").get<std::uint64_t>();
    scale = d.at("scale").get<std::size_t>();
    if (scale < 1 || id_spec.height % scale || id_spec.width % scale)
      throw ConfigError("data.scale " + std::to_string(scale) + " does not divide the grid");
    if (id_spec.height != id_spec.width) throw ConfigError("data: only square grids are supported");

    const json& m = raw.at("model");
    model.scale = scale;
    model.hi_size = id_spec.height;
    model.channels = m.at("channels").get<std::vector<std::size_t>>();
    model.emb_dim = m.at("emb_dim").get<std::size_t>();
    if (model.emb_dim < 2 || model.emb_dim % 2) throw ConfigError("model.emb_dim must be even and >= 2");
    model.T = raw.at("diffusion").at("T").get<std::size_t>();
    model.schedule = parse_schedule(raw.at("diffusion").at("schedule").get<std::string>());
    model.hybrid.enabled = raw.at("hybrid").at("enabled").get<bool>();
    model.hybrid.n_circuits = raw.at("hybrid").at("n_circuits").get<std::size_t>();
    model.hybrid.ansatz.variant = quantum::parse_variant(raw.at("ansatz").at("variant").get<std::string>());
    model.hybrid.ansatz.n_qubits = raw.at("ansatz").at("n_qubits").get<std::size_t>();
    model.hybrid.ansatz.layers = raw.at("ansatz").at("layers").get<std::size_t>();
    if (model.channels.size() < 2) throw ConfigError("model.channels needs at least two levels");
    model.hybrid.validate(model.channels.back());

    const json& t = raw.at("train");
    stage = t.at("stage").get<std::string>();
    if (stage != "regression" && stage != "diffusion")
      throw ConfigError("train.stage must be regression or diffusion, got '" + stage + "'");
    steps = t.at("steps").get<std::size_t>();
    lr = t.at("lr").get<double>();
    batch = t.at("batch").get<std::size_t>();
    train_seed = t.at("seed").get<std::uint64_t>();
    checkpoint_every = t.at("checkpoint_every").get<std::size_t>();
    monitor_samples = t.at("monitor_samples").get<std::size_t>();
    if (!(lr > 0)) throw ConfigError("train.lr must be positive");
    if (batch < 1) throw ConfigError("train.batch must be >= 1");

    const json& e = raw.at("eval");
    split = e.at("split").get<std::string>();
    if (split != "val" && split != "ood" && split != "train")
      throw ConfigError("eval.split must be val or ood, got '" + split + "'");
    members = e.at("members").get<std::size_t>();
    if (members < 1) throw ConfigError("eval.members must be >= 1");
    eval_seed = e.at("seed").get<std::uint64_t>();
    max_times = e.at("max_times").get<std::size_t>();

    const json& g = raw.at("diagnostics");
    fss_neighborhoods = g.at("fss_neighborhoods").get<std::vector<std::size_t>>();
    for (std::size_t n : fss_neighborhoods)
      if (n % 2 == 0 || n > id_spec.height)
        throw ConfigError("diagnostics.fss_neighborhoods: " + std::to_string(n) + " must be odd and <= grid size");
    fss_quantile = g.at("fss_quantile").get<double>();
    if (!(fss_quantile > 0 && fss_quantile < 1)) throw ConfigError("diagnostics.fss_quantile must lie in (0,1)");
    pdf_bins = g.at("pdf_bins").get<std::size_t>();
    joint_bins = g.at("joint_bins").get<std::size_t>();
    if (pdf_bins < 2 || joint_bins < 2) throw ConfigError("diagnostics: histograms need at least 2 bins");

    const json& b = raw.at("backend");
    p_dep = b.at("p_dep").get<std::vector<double>>();
    p_ro = b.at("p_ro").get<double>();
    shots = b.at("shots").get<std::size_t>();
    times = b.at("times").get<std::size_t>();
    backend_members = b.at("members").get<std::size_t>();
    replicates = b.at("replicates").get<std::size_t>();
    backend_seed = b.at("seed").get<std::uint64_t>();
    for (double p : p_dep)
      if (!(p >= 0 && p <= 1)) throw ConfigError("backend.p_dep values must lie in [0,1]");
    if (!(p_ro >= 0 && p_ro <= 1)) throw ConfigError("backend.p_ro must lie in [0,1]");
    if (shots < 1) throw ConfigError("backend.shots must be >= 1");
    if (times < 1) throw ConfigError("backend.times must be >= 1");
    if (backend_members < 1) throw ConfigError("backend.members must be >= 1");
    if (replicates < 1) throw ConfigError("backend.replicates must be >= 1");
  }

  std::string io_string(const char* key) const { return raw.at("io").at(key).get<std::string>(); }
  std::vector<std::string> io_list(const char* key) const {
    return raw.at("io").at(key).get<std::vector<std::string>>();
  }
};

}  // namespace qds
