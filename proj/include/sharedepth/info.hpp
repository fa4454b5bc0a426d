#pragma once

// Exact information measures on small discrete alphabets (natural log),
// the joint-vs-task-wise KL decomposition check, and the task-wise KL risk
// of a factorized Bernoulli predictor against known class posteriors.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "sharedepth/data.hpp"
#include "sharedepth/error.hpp"
#include "sharedepth/nn.hpp"
#include "sharedepth/random.hpp"

namespace sharedepth {

inline constexpr double kProbFloor = 1e-300;

inline double safe_log(double p) { return std::log(std::max(p, kProbFloor)); }

/// D(p || q) in nats; zero-mass terms of p contribute nothing.
inline double kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw StructuralError("kl: alphabets differ in size");
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0 || q[i] < 0.0) throw DomainError("kl: negative probability");
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) throw DomainError("kl: q has no mass where p does");
    d += p[i] * (safe_log(p[i]) - safe_log(q[i]));
  }
  return d;
}

/// I(U;V) for a joint table given row-major as |U| x |V|.
inline double mutual_information(const Matrix& joint) {
  const Vector pu = joint.rowwise().sum();
  const Eigen::RowVectorXd pv = joint.colwise().sum();
  double mi = 0.0;
  for (Eigen::Index u = 0; u < joint.rows(); ++u)
    for (Eigen::Index v = 0; v < joint.cols(); ++v) {
      const double p = joint(u, v);
      if (p <= 0.0) continue;
      mi += p * (safe_log(p) - safe_log(pu[u] * pv[v]));
    }
  return mi;
}

/// Probability table p(y, z_A, z_B).
struct DiscreteJoint {
  int ny = 0, na = 0, nb = 0;
  std::vector<double> p;

  DiscreteJoint() = default;
  DiscreteJoint(int y, int a, int b) : ny(y), na(a), nb(b), p(static_cast<std::size_t>(y) * a * b, 0.0) {}

  double& at(int y, int a, int b) { return p[(static_cast<std::size_t>(y) * na + a) * nb + b]; }
  double at(int y, int a, int b) const { return p[(static_cast<std::size_t>(y) * na + a) * nb + b]; }

  std::vector<double> marginal_y() const {
    std::vector<double> m(ny, 0.0);
    for (int y = 0; y < ny; ++y)
      for (int a = 0; a < na; ++a)
        for (int b = 0; b < nb; ++b) m[y] += at(y, a, b);
    return m;
  }

  /// q(y, z_t) as a |Y| x |Z_t| table.
  Matrix marginal(Task t) const {
    Matrix m = Matrix::Zero(ny, t == Task::A ? na : nb);
    for (int y = 0; y < ny; ++y)
      for (int a = 0; a < na; ++a)
        for (int b = 0; b < nb; ++b) m(y, t == Task::A ? a : b) += at(y, a, b);
    return m;
  }

  void validate() const {
    double s = 0.0;
    for (double v : p) {
      if (v < 0.0) throw DomainError("joint has a negative entry");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-12) throw DomainError("joint does not sum to 1");
  }
};

/// I(Z_A; Z_B | Y).
inline double conditional_mutual_information(const DiscreteJoint& q) {
  double cmi = 0.0;
  const auto qy = q.marginal_y();
  const Matrix qa = q.marginal(Task::A), qb = q.marginal(Task::B);
  for (int y = 0; y < q.ny; ++y)
    for (int a = 0; a < q.na; ++a)
      for (int b = 0; b < q.nb; ++b) {
        const double p = q.at(y, a, b);
        if (p <= 0.0) continue;
        // p(a,b|y) / (p(a|y) p(b|y)) = p(y,a,b) p(y) / (p(y,a) p(y,b))
        cmi += p * (safe_log(p) + safe_log(qy[y]) - safe_log(qa(y, a)) - safe_log(qb(y, b)));
      }
  return cmi;
}

/// Task conditionals P_A(z_A | y), P_B(z_B | y), one row per y.
struct FactorizedConditional {
  Matrix pa;
  Matrix pb;

  void validate() const {
    for (const Matrix* m : {&pa, &pb})
      for (Eigen::Index y = 0; y < m->rows(); ++y) {
        if ((m->row(y).array() < 0.0).any()) throw DomainError("conditional has a negative entry");
        if (std::abs(m->row(y).sum() - 1.0) > 1e-12) throw DomainError("conditional row does not sum to 1");
      }
  }
};

struct Lemma1Terms {
  double joint_kl = 0.0;  // D(Q_W || P_W)
  double kl_a = 0.0;      // D(Q_XA || P_XA)
  double kl_b = 0.0;      // D(Q_XB || P_XB)
  double cmi = 0.0;       // I_Q(Z_A; Z_B | Y)
  double residual() const { return joint_kl - kl_a - kl_b - cmi; }
};

/// Evaluates both sides of the decomposition by enumeration, with
/// P_W = Q_Y P_A P_B and P_Xt = Q_Y P_t.
inline Lemma1Terms lemma1_terms(const DiscreteJoint& q, const FactorizedConditional& p) {
  if (p.pa.rows() != q.ny || p.pb.rows() != q.ny || p.pa.cols() != q.na || p.pb.cols() != q.nb)
    throw StructuralError("conditional tables do not match the joint's alphabets");
  const auto qy = q.marginal_y();
  Lemma1Terms t;
  std::vector<double> qw, pw;
  for (int y = 0; y < q.ny; ++y)
    for (int a = 0; a < q.na; ++a)
      for (int b = 0; b < q.nb; ++b) {
        qw.push_back(q.at(y, a, b));
        pw.push_back(qy[y] * p.pa(y, a) * p.pb(y, b));
      }
  t.joint_kl = kl(qw, pw);
  for (Task task : {Task::A, Task::B}) {
    const Matrix qm = q.marginal(task);
    const Matrix& cond = task == Task::A ? p.pa : p.pb;
    std::vector<double> lhs, rhs;
    for (Eigen::Index y = 0; y < qm.rows(); ++y)
      for (Eigen::Index z = 0; z < qm.cols(); ++z) {
        lhs.push_back(qm(y, z));
        rhs.push_back(qy[static_cast<std::size_t>(y)] * cond(y, z));
      }
    (task == Task::A ? t.kl_a : t.kl_b) = kl(lhs, rhs);
  }
  t.cmi = conditional_mutual_information(q);
  return t;
}

inline double verify_lemma1(const DiscreteJoint& q, const FactorizedConditional& p) {
  return lemma1_terms(q, p).residual();
}

struct Lemma1Instance {
  DiscreteJoint q;
  FactorizedConditional p;
};

/// Random instance: |Y| in 1..4, |Z_A| = |Z_B| in 2..4, about a fifth of the
/// joint's cells zeroed, strictly positive model conditionals.
inline Lemma1Instance random_lemma1_instance(Rng& rng) {
  const int ny = 1 + static_cast<int>(uniform_index(rng, 4));
  const int nz = 2 + static_cast<int>(uniform_index(rng, 3));
  Lemma1Instance inst{DiscreteJoint(ny, nz, nz), {}};
  double total = 0.0;
  for (double& v : inst.q.p) {
    v = uniform01(rng) < 0.2 ? 0.0 : -std::log(1.0 - uniform01(rng));
    total += v;
  }
  if (total == 0.0) {
    inst.q.p[0] = 1.0;
    total = 1.0;
  }
  for (double& v : inst.q.p) v /= total;
  auto fill = [&](Matrix& m) {
    m.resize(ny, nz);
    for (Eigen::Index y = 0; y < ny; ++y) {
      for (Eigen::Index z = 0; z < nz; ++z) m(y, z) = 0.01 + uniform01(rng);
      m.row(y) /= m.row(y).sum();
    }
  };
  fill(inst.p.pa);
  fill(inst.p.pb);
  return inst;
}

struct Lemma1Summary {
  int trials = 0;
  double max_abs_residual = 0.0;
};

inline Lemma1Summary verify_lemma1_random(int trials, std::uint64_t seed) {
  Rng rng(seed);
  Lemma1Summary s;
  s.trials = trials;
  for (int i = 0; i < trials; ++i) {
    const auto inst = random_lemma1_instance(rng);
    s.max_abs_residual = std::max(s.max_abs_residual, std::abs(verify_lemma1(inst.q, inst.p)));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Task-wise KL risk.

/// single_label: the model is restricted to the one-hot and all-zero
/// outcomes and renormalized. all_binary: the raw factorized Bernoulli mass
/// of those outcomes is used (the remaining 2^m - m - 1 outcomes carry no
/// true mass).
enum class OutcomeSet { single_label, all_binary };

struct RiskBreakdown {
  double task_a = 0.0;
  double task_b = 0.0;
  double total() const { return task_a + task_b; }
};

/// KL between the true projected posterior of one group and the model's
/// Bernoulli conditional, at a single y.
inline double task_kl_at(std::span<const double> posterior, const std::vector<int>& group,
                         std::span<const double> logits, OutcomeSet outcomes) {
  const std::size_t m = group.size();
  if (logits.size() != m) throw StructuralError("logit count does not match task classes");
  double sp_sum = 0.0;
  for (double x : logits) sp_sum += detail::softplus(x);
  // log p(e_j) = x_j - sum softplus, log p(0) = -sum softplus
  std::vector<double> logp(m + 1);
  for (std::size_t j = 0; j < m; ++j) logp[j] = logits[j] - sp_sum;
  logp[m] = -sp_sum;
  if (outcomes == OutcomeSet::single_label) {
    const double mx = *std::max_element(logp.begin(), logp.end());
    double z = 0.0;
    for (double v : logp) z += std::exp(v - mx);
    const double lz = mx + std::log(z);
    for (double& v : logp) v -= lz;
  }
  std::vector<double> q(m + 1, 0.0);
  std::vector<char> member(posterior.size(), 0);
  for (std::size_t j = 0; j < m; ++j) {
    q[j] = posterior[group[j]];
    member[group[j]] = 1;
  }
  for (std::size_t k = 0; k < posterior.size(); ++k)
    if (!member[k]) q[m] += posterior[k];
  double d = 0.0;
  for (std::size_t o = 0; o <= m; ++o) {
    if (q[o] <= 0.0) continue;
    if (!std::isfinite(logp[o])) throw DomainError("model assigns zero probability to a supported outcome");
    d += q[o] * (safe_log(q[o]) - logp[o]);
  }
  return d;
}

/// Mean over evaluation points of KL(Q_{Z_A|y} || P_A(.|y)) and the same for
/// B. Rows of `posteriors` are true class posteriors over all K classes;
/// logits are the model's per-task likelihood logits at the same points.
inline RiskBreakdown taskwise_risk(const Matrix& posteriors, const TaskSplit& split, const Matrix& logits_a,
                                   const Matrix& logits_b, OutcomeSet outcomes = OutcomeSet::single_label) {
  const auto n = posteriors.rows();
  if (n == 0) throw DomainError("no evaluation points");
  if (logits_a.rows() != n || logits_b.rows() != n) throw StructuralError("logit rows do not match evaluation points");
  RiskBreakdown r;
  std::vector<double> post(static_cast<std::size_t>(posteriors.cols()));
  std::vector<double> la(static_cast<std::size_t>(logits_a.cols())), lb(static_cast<std::size_t>(logits_b.cols()));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < posteriors.cols(); ++k) post[static_cast<std::size_t>(k)] = posteriors(i, k);
    for (Eigen::Index k = 0; k < logits_a.cols(); ++k) la[static_cast<std::size_t>(k)] = logits_a(i, k);
    for (Eigen::Index k = 0; k < logits_b.cols(); ++k) lb[static_cast<std::size_t>(k)] = logits_b(i, k);
    r.task_a += task_kl_at(post, split.head, la, outcomes);
    r.task_b += task_kl_at(post, split.tail, lb, outcomes);
  }
  r.task_a /= static_cast<double>(n);
  r.task_b /= static_cast<double>(n);
  return r;
}

}  // namespace sharedepth
