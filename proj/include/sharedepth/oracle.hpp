#pragma once

// Monte-Carlo estimate of the expected task-wise KL risk over the (C, w_A)
// grid and its rank comparison with the proxy.
//
// Every resample m draws a fresh training set from the known mixture and
// runs the pipeline with seeds derived from m. Stage 1 depends only on the
// resample and Stage 2 only on w_A, so one resample serves the whole grid;
// each cell gets exactly the result a standalone run at that cell would.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "sharedepth/data.hpp"
#include "sharedepth/fisher.hpp"
#include "sharedepth/info.hpp"
#include "sharedepth/pipeline.hpp"

namespace sharedepth {

struct OracleSettings {
  int resamples = 20;
  int train_size = 1000;
  int eval_size = 2000;
  int test_per_class = 100;
  std::uint64_t seed = 1;
  OutcomeSet outcomes = OutcomeSet::single_label;
  bool refine = false;
  int jobs = 1;
  double min_success = 0.8;

  void validate() const {
    if (resamples < 2) throw ConfigError("need at least 2 resamples");
    if (train_size < 1) throw ConfigError("train size must be positive");
    if (eval_size < 1 || test_per_class < 1) throw ConfigError("evaluation sizes must be positive");
    if (jobs < 1) throw ConfigError("jobs must be >= 1");
  }
};

struct Estimate {
  double mean = 0.0;
  double stderr_ = 0.0;
  int count = 0;
};

inline Estimate summarize(const std::vector<double>& xs) {
  Estimate e;
  e.count = static_cast<int>(xs.size());
  if (xs.empty()) return e;
  e.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - e.mean) * (x - e.mean);
    e.stderr_ = std::sqrt(ss / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()));
  }
  return e;
}

/// Evaluation points drawn i.i.d. from the input marginal Q_Y.
inline Matrix draw_eval_points(const Generator& g, int n, std::uint64_t seed) {
  Rng rng(seed);
  Matrix y(n, g.input_dim());
  for (int i = 0; i < n; ++i) {
    double u = uniform01(rng), acc = 0.0;
    int k = g.classes() - 1;
    for (int c = 0; c < g.classes(); ++c) {
      acc += g.priors[c];
      if (u < acc) {
        k = c;
        break;
      }
    }
    for (int j = 0; j < g.input_dim(); ++j) y(i, j) = g.means(k, j) + g.sigma * standard_normal(rng);
  }
  return y;
}

/// Seeds of resample m: the data draw and every training stream differ.
inline RunConfig resample_config(const RunConfig& base, int m) {
  RunConfig c = base;
  const auto tag = static_cast<std::uint64_t>(m);
  c.init_seed = mix_seed(base.init_seed, tag);
  c.stage1.seed = mix_seed(base.stage1.seed, tag);
  c.stage2.seed = mix_seed(base.stage2.seed, tag);
  c.refine.seed = mix_seed(base.refine.seed, tag);
  return c;
}

inline LongTailDataset draw_training_set(const Generator& g, const OracleSettings& s, int m) {
  return sample_from(g, counts_for_size(g.priors, s.train_size), mix_seed(s.seed, 1000 + static_cast<std::uint64_t>(m)));
}

struct CellSamples {
  int C = 0;
  double w_a = 0.5;
  std::vector<double> risk;
  std::vector<double> accuracy;
  std::vector<double> head_accuracy;
  std::vector<double> tail_accuracy;
  int failures = 0;
};

struct StudyFrame {
  Matrix eval_points;
  LongTailDataset test_set;  // balanced
};

inline StudyFrame make_frame(const Generator& g, const OracleSettings& s) {
  return {draw_eval_points(g, s.eval_size, mix_seed(s.seed, 1)),
          sample_from(g, std::vector<int>(static_cast<std::size_t>(g.classes()), s.test_per_class), mix_seed(s.seed, 2))};
}

namespace detail {

struct CellValue {
  bool ok = false;
  double risk = 0.0;
  Metrics metrics;
};

// One resample over the whole grid; cells are C-major.
inline std::vector<CellValue> run_resample(const Generator& g, const RunConfig& base, const std::vector<int>& cs,
                                           const std::vector<double>& ws, const OracleSettings& s,
                                           const StudyFrame& frame, int m) {
  std::vector<CellValue> out(cs.size() * ws.size());
  RunConfig cfg = resample_config(base, m);
  cfg.refine_enabled = s.refine;
  const PreparedData data = prepare(draw_training_set(g, s, m), cfg);
  Stage1Result s1;
  try {
    s1 = stage1(cfg, data);
  } catch (const TrainingError&) {
    return out;
  } catch (const NumericError&) {
    return out;
  }
  for (std::size_t wi = 0; wi < ws.size(); ++wi) {
    Stage2Result s2;
    try {
      s2 = stage2(cfg, data, ws[wi], &s1);
    } catch (const TrainingError&) {
      continue;
    } catch (const NumericError&) {
      continue;
    }
    for (std::size_t ci = 0; ci < cs.size(); ++ci) {
      auto& cell = out[ci * ws.size() + wi];
      try {
        AssembledModel model = assemble(data.spec, s2.params, s1, cs[ci], data.split, data.priors, cfg.tau, cfg.adjust);
        if (s.refine) model = refine_decoders(std::move(model), data, cfg.refine);
        cell.risk = taskwise_risk(g, model, frame.eval_points, s.outcomes).total();
        cell.metrics = evaluate(model, frame.test_set);
        cell.ok = std::isfinite(cell.risk);
      } catch (const TrainingError&) {
      } catch (const NumericError&) {
      } catch (const DomainError&) {
      }
    }
  }
  return out;
}

template <class Job>
void run_jobs(int count, int jobs, Job&& job) {
  if (jobs <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  std::vector<std::thread> pool;
  for (int t = 0; t < std::min(jobs, count); ++t)
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) {
        try {
          job(i);
        } catch (...) {
          const std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = count;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

/// Per-cell samples of risk and balanced-test accuracy over M resamples.
inline std::vector<CellSamples> run_study(const Generator& g, const RunConfig& base, const std::vector<int>& cs,
                                          const std::vector<double>& ws, const OracleSettings& s) {
  s.validate();
  if (cs.empty() || ws.empty()) throw ConfigError("grid must be nonempty");
  const StudyFrame frame = make_frame(g, s);
  std::vector<std::vector<detail::CellValue>> per_resample(static_cast<std::size_t>(s.resamples));
  detail::run_jobs(s.resamples, s.jobs, [&](int m) {
    per_resample[static_cast<std::size_t>(m)] = detail::run_resample(g, base, cs, ws, s, frame, m);
  });
  std::vector<CellSamples> cells;
  for (std::size_t ci = 0; ci < cs.size(); ++ci)
    for (std::size_t wi = 0; wi < ws.size(); ++wi) {
      CellSamples c;
      c.C = cs[ci];
      c.w_a = ws[wi];
      for (const auto& r : per_resample) {
        const auto& v = r[ci * ws.size() + wi];
        if (!v.ok) {
          ++c.failures;
          continue;
        }
        c.risk.push_back(v.risk);
        c.accuracy.push_back(v.metrics.overall_accuracy);
        c.head_accuracy.push_back(v.metrics.head_accuracy);
        c.tail_accuracy.push_back(v.metrics.tail_accuracy);
      }
      cells.push_back(std::move(c));
    }
  return cells;
}

struct GenErrorEstimate {
  Estimate risk;
  int failures = 0;
  bool valid = false;
};

/// Expected task-wise KL risk of the pipeline at a fixed (C, w_A).
inline GenErrorEstimate mc_gen_error(const Generator& g, const RunConfig& base, int C, double w_a,
                                     const OracleSettings& s) {
  const auto cells = run_study(g, base, {C}, {w_a}, s);
  GenErrorEstimate e;
  e.risk = summarize(cells.front().risk);
  e.failures = cells.front().failures;
  e.valid = e.risk.count >= s.min_success * s.resamples && e.risk.count >= 2;
  return e;
}

/// Average ranks (1-based), ties share the mean of their positions.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> rank(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

/// Spearman correlation with average-rank ties; undefined when either side
/// is constant.
inline std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw StructuralError("spearman: length mismatch");
  if (x.size() < 2) return std::nullopt;
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct OracleCell {
  int C = 0;
  double w_a = 0.5;
  double risk_mean = 0.0;
  double risk_stderr = 0.0;
  int successes = 0;
  bool valid = false;
  double proxy_total = 0.0;
  double accuracy_mean = 0.0;
  double accuracy_stderr = 0.0;

  bool operator==(const OracleCell&) const = default;
};

struct OracleReport {
  int resamples = 0;
  int train_size = 0;
  std::vector<OracleCell> cells;
  std::optional<double> spearman_rho;
  int invalid_cells = 0;
  int oracle_best_C = 0;
  double oracle_best_w = 0.5;
  int proxy_best_C = 0;
  double proxy_best_w = 0.5;
  double proxy_best_oracle_rank = 0.0;  // average rank of the proxy cell among valid cells (1 = best)
  int ranked_cells = 0;

  /// Rank of the proxy-selected cell as a fraction of the valid cells.
  double proxy_rank_fraction() const { return ranked_cells ? proxy_best_oracle_rank / ranked_cells : 1.0; }

  bool operator==(const OracleReport&) const = default;
};

/// Builds the report from oracle samples and a proxy grid over the same cells.
inline OracleReport compare_with_proxy(const std::vector<CellSamples>& samples, const GridResult& proxy,
                                       const OracleSettings& s) {
  OracleReport rep;
  rep.resamples = s.resamples;
  rep.train_size = s.train_size;
  rep.proxy_best_C = proxy.best_C;
  rep.proxy_best_w = proxy.best_w;
  std::vector<double> oracle_vals, proxy_vals;
  std::vector<std::size_t> valid_idx;
  for (const auto& c : samples) {
    OracleCell cell;
    cell.C = c.C;
    cell.w_a = c.w_a;
    const Estimate r = summarize(c.risk), a = summarize(c.accuracy);
    cell.risk_mean = r.mean;
    cell.risk_stderr = r.stderr_;
    cell.accuracy_mean = a.mean;
    cell.accuracy_stderr = a.stderr_;
    cell.successes = r.count;
    cell.valid = r.count >= s.min_success * s.resamples && r.count >= 2;
    const auto row = std::find_if(proxy.table.begin(), proxy.table.end(),
                                  [&](const ProxyBreakdown& p) { return p.C == c.C && p.w_a == c.w_a; });
    if (row == proxy.table.end()) throw StructuralError("proxy grid is missing an oracle cell");
    cell.proxy_total = row->total;
    if (cell.valid) {
      valid_idx.push_back(rep.cells.size());
      oracle_vals.push_back(cell.risk_mean);
      proxy_vals.push_back(cell.proxy_total);
    } else {
      ++rep.invalid_cells;
    }
    rep.cells.push_back(cell);
  }
  rep.spearman_rho = spearman(proxy_vals, oracle_vals);
  rep.ranked_cells = static_cast<int>(valid_idx.size());
  if (!valid_idx.empty()) {
    const auto ranks = average_ranks(oracle_vals);
    // oracle-best: lowest mean risk, ties resolved like the proxy search
    std::size_t best = 0;
    for (std::size_t i = 1; i < valid_idx.size(); ++i) {
      ProxyBreakdown cand, cur;
      const auto& ci = rep.cells[valid_idx[i]];
      const auto& cb = rep.cells[valid_idx[best]];
      cand.C = ci.C, cand.w_a = ci.w_a, cand.total = ci.risk_mean;
      cur.C = cb.C, cur.w_a = cb.w_a, cur.total = cb.risk_mean;
      if (better_cell(cand, cur)) best = i;
    }
    rep.oracle_best_C = rep.cells[valid_idx[best]].C;
    rep.oracle_best_w = rep.cells[valid_idx[best]].w_a;
    rep.proxy_best_oracle_rank = static_cast<double>(valid_idx.size()) + 1.0;
    for (std::size_t i = 0; i < valid_idx.size(); ++i) {
      const auto& c = rep.cells[valid_idx[i]];
      if (c.C == proxy.best_C && c.w_a == proxy.best_w) rep.proxy_best_oracle_rank = ranks[i];
    }
  }
  return rep;
}

/// Proxy grid from one representative Stage-1 run (template seeds, a
/// dedicated training draw).
inline GridResult representative_proxy(const Generator& g, const RunConfig& base, const std::vector<int>& cs,
                                       const std::vector<double>& ws, const OracleSettings& s) {
  const LongTailDataset train =
      sample_from(g, counts_for_size(g.priors, s.train_size), mix_seed(s.seed, 0x5eed));
  const PreparedData data = prepare(train, base);
  const Stage1Result s1 = stage1(base, data);
  return select_structure(s1, data.spec, data.size(), cs, ws);
}

inline OracleReport grid_compare(const Generator& g, const RunConfig& base, const std::vector<int>& cs,
                                 const std::vector<double>& ws, const OracleSettings& s) {
  const auto samples = run_study(g, base, cs, ws, s);
  return compare_with_proxy(samples, representative_proxy(g, base, cs, ws, s), s);
}

struct SweepRow {
  double w_a = 0.5;
  Estimate accuracy;
  Estimate head_accuracy;
  Estimate tail_accuracy;
  Estimate risk;
  int failures = 0;
};

inline std::vector<SweepRow> weight_sweep(const Generator& g, const RunConfig& base, int C,
                                          const std::vector<double>& ws, const OracleSettings& s) {
  const auto cells = run_study(g, base, {C}, ws, s);
  std::vector<SweepRow> rows;
  for (const auto& c : cells)
    rows.push_back({c.w_a, summarize(c.accuracy), summarize(c.head_accuracy), summarize(c.tail_accuracy),
                    summarize(c.risk), c.failures});
  return rows;
}

// ---------------------------------------------------------------------------
// Serialization.

inline nlohmann::json to_json(const OracleReport& r) {
  nlohmann::json j;
  j["format"] = "sharedepth-oracle-report/1";
  j["resamples"] = r.resamples;
  j["train_size"] = r.train_size;
  j["spearman_rho"] = r.spearman_rho ? nlohmann::json(*r.spearman_rho) : nlohmann::json(nullptr);
  j["invalid_cells"] = r.invalid_cells;
  j["oracle_best"] = {{"C", r.oracle_best_C}, {"w_A", r.oracle_best_w}};
  j["proxy_best"] = {{"C", r.proxy_best_C}, {"w_A", r.proxy_best_w}};
  j["proxy_best_oracle_rank"] = r.proxy_best_oracle_rank;
  j["ranked_cells"] = r.ranked_cells;
  auto& cells = j["cells"] = nlohmann::json::array();
  for (const auto& c : r.cells)
    cells.push_back({{"C", c.C},
                     {"w_A", c.w_a},
                     {"risk_mean", c.risk_mean},
                     {"risk_stderr", c.risk_stderr},
                     {"successes", c.successes},
                     {"valid", c.valid},
                     {"proxy_total", c.proxy_total},
                     {"accuracy_mean", c.accuracy_mean},
                     {"accuracy_stderr", c.accuracy_stderr}});
  return j;
}

inline OracleReport oracle_report_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "sharedepth-oracle-report/1") throw StructuralError("unrecognized oracle report format");
  OracleReport r;
  r.resamples = j.at("resamples").get<int>();
  r.train_size = j.at("train_size").get<int>();
  if (!j.at("spearman_rho").is_null()) r.spearman_rho = j.at("spearman_rho").get<double>();
  r.invalid_cells = j.at("invalid_cells").get<int>();
  r.oracle_best_C = j.at("oracle_best").at("C").get<int>();
  r.oracle_best_w = j.at("oracle_best").at("w_A").get<double>();
  r.proxy_best_C = j.at("proxy_best").at("C").get<int>();
  r.proxy_best_w = j.at("proxy_best").at("w_A").get<double>();
  r.proxy_best_oracle_rank = j.at("proxy_best_oracle_rank").get<double>();
  r.ranked_cells = j.at("ranked_cells").get<int>();
  for (const auto& c : j.at("cells"))
    r.cells.push_back({c.at("C").get<int>(), c.at("w_A").get<double>(), c.at("risk_mean").get<double>(),
                       c.at("risk_stderr").get<double>(), c.at("successes").get<int>(), c.at("valid").get<bool>(),
                       c.at("proxy_total").get<double>(), c.at("accuracy_mean").get<double>(),
                       c.at("accuracy_stderr").get<double>()});
  return r;
}

inline void write_oracle_csv(const OracleReport& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw MissingArtifactError("cannot write " + path.string());
  out << "# format: sharedepth-oracle-grid/1\n";
  out << "C,w_A,risk_mean,risk_stderr,proxy_total,accuracy_mean,accuracy_stderr,successes,valid\n";
  for (const auto& c : r.cells)
    out << c.C << ',' << fmt(c.w_a) << ',' << fmt(c.risk_mean) << ',' << fmt(c.risk_stderr) << ','
        << fmt(c.proxy_total) << ',' << fmt(c.accuracy_mean) << ',' << fmt(c.accuracy_stderr) << ',' << c.successes
        << ',' << (c.valid ? 1 : 0) << '\n';
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw MissingArtifactError("cannot write " + path.string());
  out << "# format: sharedepth-weight-sweep/1\n";
  out << "w_A,accuracy_mean,accuracy_stderr,head_accuracy_mean,head_accuracy_stderr,tail_accuracy_mean,"
         "tail_accuracy_stderr,risk_mean,risk_stderr,successes\n";
  for (const auto& r : rows)
    out << fmt(r.w_a) << ',' << fmt(r.accuracy.mean) << ',' << fmt(r.accuracy.stderr_) << ','
        << fmt(r.head_accuracy.mean) << ',' << fmt(r.head_accuracy.stderr_) << ',' << fmt(r.tail_accuracy.mean) << ','
        << fmt(r.tail_accuracy.stderr_) << ',' << fmt(r.risk.mean) << ',' << fmt(r.risk.stderr_) << ','
        << r.accuracy.count << '\n';
}

}  // namespace sharedepth
