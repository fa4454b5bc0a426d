#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "sharedepth/nn.hpp"
#include "sharedepth/random.hpp"

namespace testutil {

using namespace sharedepth;

/// Gaussian features with one random class per row spread over both tasks
/// (a row of a task the class does not belong to is all zero).
inline Batch random_batch(const ModelSpec& spec, int n, Rng& rng) {
  Batch b;
  b.features.resize(n, spec.input_dim);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < spec.input_dim; ++j) b.features(i, j) = standard_normal(rng);
  b.z_a = Matrix::Zero(n, spec.head_dim(Task::A));
  b.z_b = Matrix::Zero(n, spec.head_dim(Task::B));
  const int K = spec.head_dim(Task::A) + spec.head_dim(Task::B);
  for (int i = 0; i < n; ++i) {
    const int k = static_cast<int>(uniform_index(rng, K));
    if (k < spec.head_dim(Task::A))
      b.z_a(i, k) = 1.0;
    else
      b.z_b(i, k - spec.head_dim(Task::A)) = 1.0;
  }
  return b;
}

/// Central differences of the weighted objective, step h per coordinate.
inline std::vector<double> finite_difference(const ParamVector& p, const ModelSpec& spec, const Batch& b,
                                             TaskWeights w, const LogitOffsets& off, double h = 1e-6) {
  std::vector<double> g(p.size());
  ParamVector q = p;
  for (std::size_t j = 0; j < p.size(); ++j) {
    const double x = p.values()[j];
    q.values()[j] = x + h;
    const double up = objective_grad(q, spec, b, w, off).loss;
    q.values()[j] = x - h;
    const double down = objective_grad(q, spec, b, w, off).loss;
    q.values()[j] = x;
    g[j] = (up - down) / (2.0 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||, 1e-12).
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    diff += (a[j] - b[j]) * (a[j] - b[j]);
    na += a[j] * a[j];
    nb += b[j] * b[j];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("sharedepth_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
