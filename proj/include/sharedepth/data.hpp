#pragma once

// Synthetic long-tailed Gaussian-mixture data, head/tail class split and
// per-task label projection, plus CSV ingestion.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sharedepth/error.hpp"
#include "sharedepth/nn.hpp"
#include "sharedepth/random.hpp"

namespace sharedepth {

struct GenConfig {
  int classes = 10;
  int input_dim = 8;
  double imbalance_ratio = 10.0;
  int n_max = 200;
  double class_mean_scale = 1.0;
  double noise_sigma = 1.0;
  std::uint64_t seed = 0;
  // Class means vary only in the leading coordinates; 0 means all of them.
  int informative_dims = 0;

  void validate() const {
    if (classes < 2) throw ConfigError("need at least 2 classes");
    if (input_dim < 1) throw ConfigError("input_dim must be >= 1");
    if (!(imbalance_ratio >= 1.0)) throw ConfigError("imbalance ratio must be >= 1");
    if (n_max < 1) throw ConfigError("n_max must be >= 1");
    if (!(noise_sigma > 0.0)) throw ConfigError("noise_sigma must be > 0");
    if (informative_dims < 0 || informative_dims > input_dim) throw ConfigError("informative_dims must lie in 0..input_dim");
  }
};

/// Exponential profile n_k = round(n_max * IR^(-k/(K-1))).
inline std::vector<int> class_counts(const GenConfig& cfg) {
  cfg.validate();
  std::vector<int> counts(cfg.classes);
  for (int k = 0; k < cfg.classes; ++k) {
    const double frac = static_cast<double>(k) / (cfg.classes - 1);
    counts[k] = static_cast<int>(std::lround(cfg.n_max * std::pow(cfg.imbalance_ratio, -frac)));
  }
  if (counts.back() < 1) throw ConfigError("least frequent class rounds to zero samples");
  return counts;
}

/// Realized mixture: isotropic Gaussians with shared sigma.
struct Generator {
  Matrix means;  // K x D
  double sigma = 1.0;
  std::vector<double> priors;

  int classes() const { return static_cast<int>(means.rows()); }
  int input_dim() const { return static_cast<int>(means.cols()); }
};

inline std::vector<double> priors_from_counts(const std::vector<int>& counts) {
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  std::vector<double> p(counts.size());
  for (std::size_t k = 0; k < counts.size(); ++k) p[k] = counts[k] / total;
  return p;
}

inline Generator make_generator(const GenConfig& cfg) {
  Generator g;
  g.sigma = cfg.noise_sigma;
  g.priors = priors_from_counts(class_counts(cfg));
  g.means = Matrix::Zero(cfg.classes, cfg.input_dim);
  const int informative = cfg.informative_dims == 0 ? cfg.input_dim : cfg.informative_dims;
  Rng rng(mix_seed(cfg.seed, 0));
  for (Eigen::Index k = 0; k < g.means.rows(); ++k)
    for (Eigen::Index j = 0; j < informative; ++j) g.means(k, j) = cfg.class_mean_scale * standard_normal(rng);
  return g;
}

struct LongTailDataset {
  Matrix features;          // N x D
  std::vector<int> classes;  // class index per row
  int num_classes = 0;
  std::optional<Generator> generator;

  std::size_t size() const { return classes.size(); }

  Matrix one_hot() const {
    Matrix z = Matrix::Zero(static_cast<Eigen::Index>(size()), num_classes);
    for (std::size_t i = 0; i < size(); ++i) z(static_cast<Eigen::Index>(i), classes[i]) = 1.0;
    return z;
  }

  std::vector<int> class_counts() const {
    std::vector<int> c(num_classes, 0);
    for (int k : classes) ++c[k];
    return c;
  }

  std::vector<double> priors() const { return priors_from_counts(class_counts()); }

  LongTailDataset rows(const std::vector<std::size_t>& idx) const {
    LongTailDataset out;
    out.num_classes = num_classes;
    out.generator = generator;
    out.features.resize(static_cast<Eigen::Index>(idx.size()), features.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      out.features.row(static_cast<Eigen::Index>(r)) = features.row(static_cast<Eigen::Index>(idx[r]));
      out.classes.push_back(classes[idx[r]]);
    }
    return out;
  }
};

/// Draws counts[k] points from class k of the mixture, class by class.
inline LongTailDataset sample_from(const Generator& g, const std::vector<int>& counts, std::uint64_t seed) {
  if (static_cast<int>(counts.size()) != g.classes()) throw ConfigError("count vector does not match class count");
  LongTailDataset ds;
  ds.num_classes = g.classes();
  ds.generator = g;
  const int total = std::accumulate(counts.begin(), counts.end(), 0);
  ds.features.resize(total, g.input_dim());
  Rng rng(seed);
  Eigen::Index row = 0;
  for (int k = 0; k < g.classes(); ++k) {
    for (int i = 0; i < counts[k]; ++i, ++row) {
      for (Eigen::Index j = 0; j < ds.features.cols(); ++j)
        ds.features(row, j) = g.means(k, j) + g.sigma * standard_normal(rng);
      ds.classes.push_back(k);
    }
  }
  return ds;
}

inline LongTailDataset generate(const GenConfig& cfg) {
  return sample_from(make_generator(cfg), class_counts(cfg), mix_seed(cfg.seed, 1));
}

/// Counts proportional to the priors, scaled to about n samples, each >= 1.
inline std::vector<int> counts_for_size(const std::vector<double>& priors, int n) {
  std::vector<int> counts(priors.size());
  for (std::size_t k = 0; k < priors.size(); ++k)
    counts[k] = std::max(1, static_cast<int>(std::lround(priors[k] * n)));
  return counts;
}

/// Bayes posterior over the K classes at y.
inline std::vector<double> true_posterior(const Generator& g, std::span<const double> y) {
  if (static_cast<int>(y.size()) != g.input_dim()) throw StructuralError("feature dimension does not match generator");
  const int K = g.classes();
  std::vector<double> logp(K);
  const double inv = 1.0 / (2.0 * g.sigma * g.sigma);
  for (int k = 0; k < K; ++k) {
    double d2 = 0.0;
    for (int j = 0; j < g.input_dim(); ++j) {
      const double d = y[j] - g.means(k, j);
      d2 += d * d;
    }
    logp[k] = std::log(g.priors[k]) - d2 * inv;
  }
  const double m = *std::max_element(logp.begin(), logp.end());
  double z = 0.0;
  for (double& v : logp) z += (v = std::exp(v - m));
  for (double& v : logp) v /= z;
  return logp;
}

inline Matrix true_posteriors(const Generator& g, const Matrix& features) {
  Matrix out(features.rows(), g.classes());
  std::vector<double> y(features.cols());
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    for (Eigen::Index j = 0; j < features.cols(); ++j) y[j] = features(i, j);
    const auto p = true_posterior(g, y);
    for (int k = 0; k < g.classes(); ++k) out(i, k) = p[k];
  }
  return out;
}

struct TaskSplit {
  std::vector<int> head;  // task A classes, most frequent first
  std::vector<int> tail;  // task B classes

  const std::vector<int>& classes(Task t) const { return t == Task::A ? head : tail; }
  int num_classes() const { return static_cast<int>(head.size() + tail.size()); }

  /// (task, column) of every original class.
  std::vector<std::pair<Task, int>> locate() const {
    std::vector<std::pair<Task, int>> where(num_classes());
    for (std::size_t i = 0; i < head.size(); ++i) where[head[i]] = {Task::A, static_cast<int>(i)};
    for (std::size_t i = 0; i < tail.size(); ++i) where[tail[i]] = {Task::B, static_cast<int>(i)};
    return where;
  }

  bool operator==(const TaskSplit&) const = default;
};

/// Stable sort by descending count; the first ceil(K/2) classes form the head.
inline TaskSplit split_classes(const std::vector<int>& counts) {
  if (counts.size() < 2) throw ConfigError("need at least 2 classes to split");
  std::vector<int> order(counts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return counts[a] > counts[b]; });
  const std::size_t n_head = (counts.size() + 1) / 2;
  TaskSplit s;
  s.head.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_head));
  s.tail.assign(order.begin() + static_cast<std::ptrdiff_t>(n_head), order.end());
  return s;
}

inline void check_split(const TaskSplit& split, int K) {
  if (split.num_classes() != K) throw StructuralError("split does not cover the class set");
  std::vector<int> seen(K, 0);
  for (int t : {0, 1})
    for (int k : split.classes(static_cast<Task>(t))) {
      if (k < 0 || k >= K || seen[k]++) throw StructuralError("split is not a partition of the classes");
    }
}

/// Restricts the one-hot label to each group; exactly one side of every row
/// is all zero.
inline std::pair<Matrix, Matrix> project_labels(const std::vector<int>& classes, const TaskSplit& split) {
  const auto where = split.locate();
  const auto n = static_cast<Eigen::Index>(classes.size());
  Matrix za = Matrix::Zero(n, static_cast<Eigen::Index>(split.head.size()));
  Matrix zb = Matrix::Zero(n, static_cast<Eigen::Index>(split.tail.size()));
  for (Eigen::Index i = 0; i < n; ++i) {
    const int k = classes[static_cast<std::size_t>(i)];
    if (k < 0 || k >= static_cast<int>(where.size())) throw StructuralError("label outside split");
    const auto [task, col] = where[k];
    (task == Task::A ? za : zb)(i, col) = 1.0;
  }
  return {std::move(za), std::move(zb)};
}

inline std::pair<Matrix, Matrix> project_labels(const Matrix& one_hot, const TaskSplit& split) {
  std::vector<int> classes(static_cast<std::size_t>(one_hot.rows()));
  for (Eigen::Index i = 0; i < one_hot.rows(); ++i) {
    Eigen::Index k;
    one_hot.row(i).maxCoeff(&k);
    classes[static_cast<std::size_t>(i)] = static_cast<int>(k);
  }
  return project_labels(classes, split);
}

/// Inverse of project_labels.
inline std::vector<int> merge_labels(const Matrix& za, const Matrix& zb, const TaskSplit& split) {
  std::vector<int> classes(static_cast<std::size_t>(za.rows()), -1);
  for (Eigen::Index i = 0; i < za.rows(); ++i) {
    for (Eigen::Index c = 0; c < za.cols(); ++c)
      if (za(i, c) == 1.0) classes[static_cast<std::size_t>(i)] = split.head[static_cast<std::size_t>(c)];
    for (Eigen::Index c = 0; c < zb.cols(); ++c)
      if (zb(i, c) == 1.0) classes[static_cast<std::size_t>(i)] = split.tail[static_cast<std::size_t>(c)];
  }
  return classes;
}

inline Batch make_batch(const LongTailDataset& ds, const TaskSplit& split) {
  Batch b;
  b.features = ds.features;
  std::tie(b.z_a, b.z_b) = project_labels(ds.classes, split);
  return b;
}

/// Stratified split: per class, round(fraction * n_k) rows go to the test
/// set. Returns (train, test) row indices, each ascending.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_indices(const LongTailDataset& ds,
                                                                                      double fraction,
                                                                                      std::uint64_t seed) {
  if (fraction < 0.0 || fraction > 1.0) throw ConfigError("holdout fraction must lie in [0, 1]");
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.classes[i]].push_back(i);
  Rng rng(seed);
  std::vector<std::size_t> train, test;
  for (auto& rows : by_class) {
    shuffle(rows, rng);
    const auto n_test = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(rows.size())));
    test.insert(test.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.insert(train.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_test), rows.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {std::move(train), std::move(test)};
}

inline std::pair<LongTailDataset, LongTailDataset> holdout_split(const LongTailDataset& ds, double fraction,
                                                                 std::uint64_t seed) {
  const auto [train, test] = holdout_indices(ds, fraction, seed);
  return {ds.rows(train), ds.rows(test)};
}

// CSV: one row per sample, feature values then the integer class label.
// Blank lines and lines starting with '#' are skipped. With num_classes <= 0
// the class count is inferred as max label + 1.
inline LongTailDataset load_csv(const std::filesystem::path& path, int num_classes = 0) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot open dataset " + path.string());
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::string line;
  std::size_t lineno = 0, width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 2) throw IngestionError("expected features followed by a label", lineno);
    if (width == 0) width = cells.size();
    if (cells.size() != width)
      throw IngestionError("expected " + std::to_string(width) + " columns, got " + std::to_string(cells.size()), lineno);
    std::vector<double> feats;
    for (std::size_t c = 0; c + 1 < cells.size(); ++c) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cells[c], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || !std::isfinite(v)) throw IngestionError("malformed feature '" + cells[c] + "'", lineno);
      feats.push_back(v);
    }
    std::size_t used = 0;
    long label = -1;
    try {
      label = std::stol(cells.back(), &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != cells.back().find_last_not_of(" \t") + 1)
      throw IngestionError("malformed label '" + cells.back() + "'", lineno);
    if (label < 0 || (num_classes > 0 && label >= num_classes))
      throw IngestionError("label " + std::to_string(label) + " out of range", lineno);
    rows.push_back(std::move(feats));
    labels.push_back(static_cast<int>(label));
  }
  LongTailDataset ds;
  ds.num_classes = num_classes > 0 ? num_classes
                                   : (labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1);
  ds.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width == 0 ? 0 : width - 1));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  ds.classes = std::move(labels);
  return ds;
}

inline void save_csv(const LongTailDataset& ds, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw MissingArtifactError("cannot write " + path.string());
  out.precision(17);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (Eigen::Index j = 0; j < ds.features.cols(); ++j) out << ds.features(static_cast<Eigen::Index>(i), j) << ',';
    out << ds.classes[i] << '\n';
  }
}

// Generator sidecar (JSON): means, sigma, priors.
inline nlohmann::json to_json(const Generator& g) {
  nlohmann::json j;
  j["format"] = "sharedepth-generator/1";
  j["sigma"] = g.sigma;
  j["priors"] = g.priors;
  auto& means = j["means"] = nlohmann::json::array();
  for (Eigen::Index k = 0; k < g.means.rows(); ++k) {
    std::vector<double> row(g.means.row(k).begin(), g.means.row(k).end());
    means.push_back(row);
  }
  return j;
}

inline Generator generator_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "sharedepth-generator/1") throw StructuralError("unrecognized generator sidecar format");
  Generator g;
  g.sigma = j.at("sigma").get<double>();
  g.priors = j.at("priors").get<std::vector<double>>();
  const auto rows = j.at("means").get<std::vector<std::vector<double>>>();
  if (rows.empty() || rows.size() != g.priors.size()) throw StructuralError("generator sidecar is inconsistent");
  g.means.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k].size() != rows[0].size()) throw StructuralError("ragged generator means");
    for (std::size_t d = 0; d < rows[k].size(); ++d)
      g.means(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d)) = rows[k][d];
  }
  return g;
}

}  // namespace sharedepth
