#pragma once

// Reference proxy built from dense matrices and a full inverse. Used to
// check the per-coordinate closed form on small encoders.

#include <Eigen/Dense>
#include <vector>

#include "sharedepth/nn.hpp"

namespace testutil {

inline double dense_proxy(const std::vector<double>& a, const std::vector<double>& b, const std::vector<double>& delta,
                          double w_a, std::size_t N, std::size_t d_psi_a, std::size_t d_psi_b) {
  const auto d = static_cast<Eigen::Index>(a.size());
  const double w_b = 1.0 - w_a;
  Eigen::MatrixXd JA = Eigen::MatrixXd::Zero(d, d), JB = Eigen::MatrixXd::Zero(d, d);
  for (Eigen::Index j = 0; j < d; ++j) {
    JA(j, j) = a[static_cast<std::size_t>(j)];
    JB(j, j) = b[static_cast<std::size_t>(j)];
  }
  const Eigen::MatrixXd H = w_a * JA + w_b * JB;
  const Eigen::MatrixXd G = w_a * w_a * JA + w_b * w_b * JB;
  const Eigen::MatrixXd Hinv = H.fullPivLu().inverse();
  const double n2 = 2.0 * static_cast<double>(N);
  const double variance = ((JA + JB) * Hinv * G * Hinv).trace() / n2;
  const Eigen::Map<const Eigen::VectorXd> D(delta.data(), d);
  const double bias = 0.5 * D.dot((w_b * w_b * JA + w_a * w_a * JB) * D);
  return variance + bias + static_cast<double>(d_psi_a + d_psi_b) / n2;
}

}  // namespace testutil
