#pragma once

// Diagonal empirical Fisher, encoder mismatch and the second-order
// generalization proxy
//
//   (1/2N) tr((J_A + J_B) H^-1 G H^-1)          encoder variance
//   + (1/2) D^T (w_B^2 J_A + w_A^2 J_B) D       encoder bias
//   + (d_psi_A + d_psi_B) / 2N                  decoder variance
//
// with H = w_A J_A + w_B J_B, G = w_A^2 J_A + w_B^2 J_B restricted to the
// shared encoder slice and evaluated with diagonal J.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <vector>

#include "sharedepth/error.hpp"
#include "sharedepth/format.hpp"
#include "sharedepth/nn.hpp"

namespace sharedepth {

inline constexpr double kDeadCoordinate = 1e-12;

struct DiagFisher {
  std::vector<double> values;
  std::size_t sample_count = 0;
};

/// value_j = (1/N) sum_i (d/d theta_j log P(z_t,i | y_i))^2, evaluated at
/// `params` with the task's likelihood offsets.
inline DiagFisher estimate_diag_fisher(const ParamVector& params, const ModelSpec& spec, const Batch& data, Task t,
                                       const std::vector<double>& offsets = {}, std::size_t chunk = 2048) {
  const auto n = static_cast<std::size_t>(data.rows());
  if (n == 0) throw DomainError("cannot estimate Fisher information from an empty dataset");
  DiagFisher f;
  f.values.assign(params.size(), 0.0);
  f.sample_count = n;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t stop = std::min(n, start + chunk);
    idx.resize(stop - start);
    for (std::size_t i = start; i < stop; ++i) idx[i - start] = i;
    const Batch part = (start == 0 && stop == n) ? data : data.subset(idx);
    const ParamVector sq = squared_score_sum(params, spec, part, t, offsets);
    for (std::size_t j = 0; j < f.values.size(); ++j) f.values[j] += sq.values()[j];
  }
  for (double& v : f.values) v /= static_cast<double>(n);
  return f;
}

struct MismatchVector {
  int C = 0;
  std::vector<double> delta;  // phi_B - phi_A over the depth-C encoder
};

inline MismatchVector encoder_mismatch(const ParamVector& params_a, const ParamVector& params_b, int C) {
  if (!params_a.same_layout(params_b)) throw StructuralError("encoder mismatch needs identical architectures");
  const int depth = static_cast<int>(params_a.blocks().size()) - 2;
  if (C < 0 || C > depth) throw StructuralError("shared depth outside 0..L");
  const auto a = params_a.encoder_slice(C);
  const auto b = params_b.encoder_slice(C);
  MismatchVector m{C, std::vector<double>(a.size())};
  for (std::size_t j = 0; j < a.size(); ++j) m.delta[j] = b[j] - a[j];
  return m;
}

struct ProxyBreakdown {
  int C = 0;
  double w_a = 0.5;
  double encoder_variance = 0.0;
  double encoder_bias = 0.0;
  double decoder_variance = 0.0;
  double total = 0.0;
};

namespace detail {

struct EncoderSums {
  double variance = 0.0;  // sum of per-coordinate variance terms (before 1/2N)
  double bias = 0.0;      // sum of per-coordinate bias terms (before 1/2)
};

inline EncoderSums encoder_sums(std::span<const double> fa, std::span<const double> fb, std::span<const double> delta,
                                double w_a) {
  const double w_b = 1.0 - w_a;
  EncoderSums s;
  for (std::size_t j = 0; j < fa.size(); ++j) {
    const double a = fa[j], b = fb[j];
    if (a < 0.0 || b < 0.0) throw DomainError("Fisher entries must be nonnegative");
    const double h = w_a * a + w_b * b;
    if (h >= kDeadCoordinate) s.variance += (a + b) * (w_a * w_a * a + w_b * w_b * b) / (h * h);
    s.bias += delta[j] * delta[j] * (w_b * w_b * a + w_a * w_a * b);
  }
  return s;
}

// Encoder sums split per trunk block, so every depth C is a prefix sum.
inline std::vector<EncoderSums> block_sums(const ModelSpec& spec, std::span<const double> fa,
                                           std::span<const double> fb, std::span<const double> delta, int C,
                                           double w_a) {
  std::vector<EncoderSums> out;
  std::size_t offset = 0;
  for (int b = 0; b < C; ++b) {
    const std::size_t len = spec.block_size(b);
    out.push_back(encoder_sums(fa.subspan(offset, len), fb.subspan(offset, len), delta.subspan(offset, len), w_a));
    offset += len;
  }
  return out;
}

inline ProxyBreakdown combine(const ModelSpec& spec, std::span<const EncoderSums> blocks, int C, double w_a,
                              std::size_t N) {
  ProxyBreakdown p;
  p.C = C;
  p.w_a = w_a;
  double var = 0.0, bias = 0.0;
  for (int b = 0; b < C; ++b) {
    var += blocks[b].variance;
    bias += blocks[b].bias;
  }
  const double two_n = 2.0 * static_cast<double>(N);
  p.encoder_variance = var / two_n;
  p.encoder_bias = 0.5 * bias;
  p.decoder_variance =
      static_cast<double>(spec.decoder_param_count(C, Task::A) + spec.decoder_param_count(C, Task::B)) / two_n;
  p.total = p.encoder_variance + p.encoder_bias + p.decoder_variance;
  return p;
}

inline void check_proxy_inputs(const ModelSpec& spec, const DiagFisher& fa, const DiagFisher& fb, int C,
                               std::size_t delta_len, double w_a, std::size_t N) {
  if (C < 0 || C > spec.depth()) throw StructuralError("shared depth outside 0..L");
  const std::size_t d_phi = spec.encoder_param_count(C);
  if (fa.values.size() < d_phi || fb.values.size() < d_phi) throw StructuralError("Fisher vector shorter than encoder");
  if (delta_len < d_phi) throw StructuralError("mismatch vector shorter than encoder");
  if (!(w_a >= 0.0 && w_a <= 1.0)) throw DomainError("w_A must lie in [0, 1]");
  if (N == 0) throw DomainError("sample size must be positive");
}

}  // namespace detail

/// Proxy breakdown at (C, w_A) with w_B = 1 - w_A. Coordinates with
/// w_A a_j + w_B b_j below 1e-12 are left out of the variance sum.
inline ProxyBreakdown proxy_eval(const DiagFisher& fisher_a, const DiagFisher& fisher_b, const MismatchVector& delta,
                                 int C, double w_a, std::size_t N, const ModelSpec& spec) {
  detail::check_proxy_inputs(spec, fisher_a, fisher_b, C, delta.delta.size(), w_a, N);
  if (delta.delta.size() != spec.encoder_param_count(C)) throw StructuralError("mismatch length != d_phi(C)");
  const auto blocks = detail::block_sums(spec, fisher_a.values, fisher_b.values, delta.delta, C, w_a);
  return detail::combine(spec, blocks, C, w_a, N);
}

struct GridResult {
  int best_C = 0;
  double best_w = 0.5;
  std::vector<ProxyBreakdown> table;  // C-major, in candidate order

  const ProxyBreakdown& best() const {
    for (const auto& row : table)
      if (row.C == best_C && row.w_a == best_w) return row;
    throw StructuralError("grid result has no row for its selection");
  }
};

inline std::vector<double> default_w_grid() {
  std::vector<double> w;
  for (int i = 0; i <= 10; ++i) w.push_back(i / 10.0);
  return w;
}

inline std::vector<int> default_c_grid(const ModelSpec& spec) {
  std::vector<int> c;
  for (int i = 0; i <= spec.depth(); ++i) c.push_back(i);
  return c;
}

/// True when `cand` should replace `best`: lower total, or a tie (relative
/// 1e-12) broken by smaller C, then w_A closer to 1/2, then smaller w_A.
inline bool better_cell(const ProxyBreakdown& cand, const ProxyBreakdown& best) {
  const double tol = 1e-12 * std::max(std::abs(cand.total), std::abs(best.total));
  if (cand.total < best.total - tol) return true;
  if (cand.total > best.total + tol) return false;
  if (cand.C != best.C) return cand.C < best.C;
  const double dc = std::abs(cand.w_a - 0.5), db = std::abs(best.w_a - 0.5);
  if (dc != db) return dc < db;
  return cand.w_a < best.w_a;
}

/// Evaluates the proxy on the full (C, w_A) grid. `full_delta` is the
/// mismatch over the whole trunk; each C uses its leading d_phi(C) entries.
inline GridResult grid_search(const DiagFisher& fisher_a, const DiagFisher& fisher_b,
                              std::span<const double> full_delta, std::size_t N, const ModelSpec& spec,
                              const std::vector<int>& c_candidates, const std::vector<double>& w_candidates) {
  if (c_candidates.empty() || w_candidates.empty()) throw ConfigError("grid candidates must be nonempty");
  const int c_max = *std::max_element(c_candidates.begin(), c_candidates.end());
  for (int C : c_candidates)
    for (double w : w_candidates) detail::check_proxy_inputs(spec, fisher_a, fisher_b, C, full_delta.size(), w, N);
  GridResult result;
  std::vector<std::vector<detail::EncoderSums>> per_w;
  for (double w : w_candidates)
    per_w.push_back(detail::block_sums(spec, fisher_a.values, fisher_b.values, full_delta, c_max, w));
  for (int C : c_candidates)
    for (std::size_t wi = 0; wi < w_candidates.size(); ++wi)
      result.table.push_back(detail::combine(spec, per_w[wi], C, w_candidates[wi], N));
  const ProxyBreakdown* best = &result.table.front();
  for (const auto& row : result.table)
    if (better_cell(row, *best)) best = &row;
  result.best_C = best->C;
  result.best_w = best->w_a;
  return result;
}

inline void write_grid_csv(const std::vector<ProxyBreakdown>& table, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw MissingArtifactError("cannot write " + path.string());
  out << "# format: sharedepth-proxy-grid/1\n";
  out << "C,w_A,encoder_variance,encoder_bias,decoder_variance,total\n";
  for (const auto& r : table)
    out << r.C << ',' << fmt(r.w_a) << ',' << fmt(r.encoder_variance) << ',' << fmt(r.encoder_bias) << ','
        << fmt(r.decoder_variance) << ',' << fmt(r.total) << '\n';
}

}  // namespace sharedepth
