#pragma once

// Run configuration as JSON, and the versioned run-directory layout.
//
// Artifacts are never overwritten: writing `name.ext` creates
// `name.vN.ext` with N one past the highest existing version, and readers
// take the highest version present.

#include <filesystem>
#include <fstream>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <json.hpp>

#include "sharedepth/data.hpp"
#include "sharedepth/error.hpp"
#include "sharedepth/oracle.hpp"
#include "sharedepth/pipeline.hpp"

namespace sharedepth {

struct DataSettings {
  GenConfig gen;
  double test_fraction = 0.2;
  std::string train_csv;  // optional: use a dataset file instead of the generator
  std::string test_csv;
};

struct CommandConfig {
  DataSettings data;
  RunConfig run;
  OracleSettings oracle;
  int sweep_c = -1;  // -1: full sharing
};

namespace detail {

template <class T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError("config section '" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown config key '" + where + (where.empty() ? "" : ".") + key + "'");
  }
}

inline nlohmann::json opt_to_json(const OptimizerSettings& o) {
  return {{"learning_rate", o.learning_rate},
          {"momentum", o.momentum},
          {"epochs", o.epochs},
          {"batch_size", o.batch_size},
          {"seed", o.seed}};
}

inline void opt_from_json(const nlohmann::json& j, const std::string& name, OptimizerSettings& o) {
  check_keys(j, name, {"learning_rate", "momentum", "epochs", "batch_size", "seed"});
  read_if(j, "learning_rate", o.learning_rate);
  read_if(j, "momentum", o.momentum);
  read_if(j, "epochs", o.epochs);
  read_if(j, "batch_size", o.batch_size);
  read_if(j, "seed", o.seed);
}

}  // namespace detail

inline nlohmann::json to_json(const CommandConfig& c) {
  const auto& g = c.data.gen;
  const auto& r = c.run;
  const auto& o = c.oracle;
  nlohmann::json j;
  j["data"] = {{"classes", g.classes},
               {"input_dim", g.input_dim},
               {"imbalance_ratio", g.imbalance_ratio},
               {"n_max", g.n_max},
               {"class_mean_scale", g.class_mean_scale},
               {"noise_sigma", g.noise_sigma},
               {"informative_dims", g.informative_dims},
               {"seed", g.seed},
               {"test_fraction", c.data.test_fraction},
               {"train_csv", c.data.train_csv},
               {"test_csv", c.data.test_csv}};
  j["model"] = {{"trunk_widths", r.trunk_widths}, {"activation", to_string(r.activation)}};
  j["stage1"] = detail::opt_to_json(r.stage1);
  j["stage2"] = detail::opt_to_json(r.stage2);
  j["refine"] = detail::opt_to_json(r.refine);
  j["init_seed"] = r.init_seed;
  j["warm_start"] = r.warm_start;
  j["grid_c"] = r.c_candidates();
  j["grid_w"] = r.grid_w;
  j["tau"] = r.tau;
  j["logit_adjust"] = to_string(r.adjust);
  j["refine_enabled"] = r.refine_enabled;
  j["oracle"] = {{"resamples", o.resamples},
                 {"train_size", o.train_size},
                 {"eval_size", o.eval_size},
                 {"test_per_class", o.test_per_class},
                 {"seed", o.seed},
                 {"outcomes", o.outcomes == OutcomeSet::single_label ? "single_label" : "all_binary"},
                 {"refine", o.refine},
                 {"jobs", o.jobs},
                 {"min_success", o.min_success},
                 {"sweep_c", c.sweep_c}};
  return j;
}

/// Overlays `j` on `c`; absent keys keep their current values and unknown
/// keys are rejected.
inline void apply_json(const nlohmann::json& j, CommandConfig& c) {
  detail::check_keys(j, "", {"data", "model", "stage1", "stage2", "refine", "init_seed", "warm_start", "grid_c",
                             "grid_w", "tau", "logit_adjust", "refine_enabled", "oracle"});
  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::check_keys(d, "data", {"classes", "input_dim", "imbalance_ratio", "n_max", "class_mean_scale",
                                   "noise_sigma", "informative_dims", "seed", "test_fraction", "train_csv",
                                   "test_csv"});
    auto& g = c.data.gen;
    detail::read_if(d, "classes", g.classes);
    detail::read_if(d, "input_dim", g.input_dim);
    detail::read_if(d, "imbalance_ratio", g.imbalance_ratio);
    detail::read_if(d, "n_max", g.n_max);
    detail::read_if(d, "class_mean_scale", g.class_mean_scale);
    detail::read_if(d, "noise_sigma", g.noise_sigma);
    detail::read_if(d, "informative_dims", g.informative_dims);
    detail::read_if(d, "seed", g.seed);
    detail::read_if(d, "test_fraction", c.data.test_fraction);
    detail::read_if(d, "train_csv", c.data.train_csv);
    detail::read_if(d, "test_csv", c.data.test_csv);
  }
  if (j.contains("model")) {
    detail::check_keys(j["model"], "model", {"trunk_widths", "activation"});
    detail::read_if(j["model"], "trunk_widths", c.run.trunk_widths);
    if (j["model"].contains("activation")) {
      std::string a;
      detail::read_if(j["model"], "activation", a);
      c.run.activation = parse_activation(a);
    }
  }
  if (j.contains("stage1")) detail::opt_from_json(j["stage1"], "stage1", c.run.stage1);
  if (j.contains("stage2")) detail::opt_from_json(j["stage2"], "stage2", c.run.stage2);
  if (j.contains("refine")) detail::opt_from_json(j["refine"], "refine", c.run.refine);
  detail::read_if(j, "init_seed", c.run.init_seed);
  detail::read_if(j, "warm_start", c.run.warm_start);
  detail::read_if(j, "grid_c", c.run.grid_c);
  detail::read_if(j, "grid_w", c.run.grid_w);
  detail::read_if(j, "tau", c.run.tau);
  if (j.contains("logit_adjust")) {
    std::string a;
    detail::read_if(j, "logit_adjust", a);
    c.run.adjust = parse_logit_adjust(a);
  }
  detail::read_if(j, "refine_enabled", c.run.refine_enabled);
  if (j.contains("oracle")) {
    const auto& o = j["oracle"];
    detail::check_keys(o, "oracle", {"resamples", "train_size", "eval_size", "test_per_class", "seed", "outcomes",
                                     "refine", "jobs", "min_success", "sweep_c"});
    detail::read_if(o, "resamples", c.oracle.resamples);
    detail::read_if(o, "train_size", c.oracle.train_size);
    detail::read_if(o, "eval_size", c.oracle.eval_size);
    detail::read_if(o, "test_per_class", c.oracle.test_per_class);
    detail::read_if(o, "seed", c.oracle.seed);
    if (o.contains("outcomes")) {
      std::string s;
      detail::read_if(o, "outcomes", s);
      if (s == "single_label")
        c.oracle.outcomes = OutcomeSet::single_label;
      else if (s == "all_binary")
        c.oracle.outcomes = OutcomeSet::all_binary;
      else
        throw ConfigError("unknown outcome set '" + s + "'");
    }
    detail::read_if(o, "refine", c.oracle.refine);
    detail::read_if(o, "jobs", c.oracle.jobs);
    detail::read_if(o, "min_success", c.oracle.min_success);
    detail::read_if(o, "sweep_c", c.sweep_c);
  }
}

inline void validate(const CommandConfig& c) {
  c.data.gen.validate();
  c.run.validate();
  c.oracle.validate();
  if (!(c.data.test_fraction >= 0.0 && c.data.test_fraction < 1.0)) throw ConfigError("test_fraction must lie in [0, 1)");
  if (c.run.grid_w.empty()) throw ConfigError("grid_w must be nonempty");
  if (c.sweep_c < -1 || c.sweep_c > static_cast<int>(c.run.trunk_widths.size()))
    throw ConfigError("sweep_c must be -1 or lie in 0..L");
}

inline CommandConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  CommandConfig c;
  apply_json(j, c);
  return c;
}

// ---------------------------------------------------------------------------
// Run directory.

class RunDir {
 public:
  explicit RunDir(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const { return root_; }

  /// Highest existing version of `name.ext`, or 0.
  int latest_version(const std::string& name, const std::string& ext) const {
    if (!std::filesystem::is_directory(root_)) return 0;
    const std::regex pattern(escape(name) + R"(\.v([0-9]+)\.)" + escape(ext));
    int best = 0;
    for (const auto& entry : std::filesystem::directory_iterator(root_)) {
      std::smatch m;
      const std::string file = entry.path().filename().string();
      if (std::regex_match(file, m, pattern)) best = std::max(best, std::stoi(m[1].str()));
    }
    return best;
  }

  std::filesystem::path versioned(const std::string& name, const std::string& ext, int v) const {
    return root_ / (name + ".v" + std::to_string(v) + "." + ext);
  }

  /// Path for a new version; creates the directory.
  std::filesystem::path next(const std::string& name, const std::string& ext) const {
    std::filesystem::create_directories(root_);
    return versioned(name, ext, latest_version(name, ext) + 1);
  }

  std::filesystem::path latest(const std::string& name, const std::string& ext) const {
    const int v = latest_version(name, ext);
    if (v == 0) throw MissingArtifactError("no " + name + "." + ext + " in " + root_.string());
    return versioned(name, ext, v);
  }

  bool has(const std::string& name, const std::string& ext) const { return latest_version(name, ext) > 0; }

 private:
  static std::string escape(const std::string& s) {
    static const std::regex special(R"([.^$|()\[\]{}*+?\\])");
    return std::regex_replace(s, special, R"(\$&)");
  }

  std::filesystem::path root_;
};

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw MissingArtifactError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw StructuralError(path.string() + ": " + e.what());
  }
}

}  // namespace sharedepth
