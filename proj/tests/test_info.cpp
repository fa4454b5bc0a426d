#include <gtest/gtest.h>

#include <bit>
#include <cmath>

#include "sharedepth/data.hpp"
#include "sharedepth/info.hpp"

using namespace sharedepth;

TEST(Kl, IdentityIsZero) {
  const std::vector<double> p{0.1, 0.6, 0.3};
  EXPECT_EQ(kl(p, p), 0.0);
}

TEST(Kl, HandValue) {
  const std::vector<double> p{0.5, 0.5}, q{0.25, 0.75};
  EXPECT_NEAR(kl(p, q), 0.143841036225890, 1e-12);
}

TEST(Kl, SupportViolation) {
  const std::vector<double> p{0.5, 0.5}, q{1.0, 0.0};
  EXPECT_THROW(kl(p, q), DomainError);
  EXPECT_NO_THROW(kl(q, p));
}

TEST(MutualInformation, IndependentIsZero) {
  Matrix j(2, 3);
  const std::vector<double> u{0.3, 0.7}, v{0.2, 0.5, 0.3};
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 3; ++b) j(a, b) = u[a] * v[b];
  EXPECT_NEAR(mutual_information(j), 0.0, 1e-15);
}

TEST(MutualInformation, CopiedBitIsLogTwo) {
  Matrix j = Matrix::Zero(2, 2);
  j(0, 0) = j(1, 1) = 0.5;
  EXPECT_NEAR(mutual_information(j), std::log(2.0), 1e-15);
}

TEST(MutualInformation, ConditionalOnDeterministicLabels) {
  // z_A = y mod 2, z_B = y / 2, y uniform on 4 values
  DiscreteJoint q(4, 2, 2);
  for (int y = 0; y < 4; ++y) q.at(y, y % 2, y / 2) = 0.25;
  EXPECT_EQ(conditional_mutual_information(q), 0.0);
  // unconditionally z_A and z_B are independent fair bits, conditionally constant
  Matrix ab = Matrix::Zero(2, 2);
  for (int y = 0; y < 4; ++y) ab(y % 2, y / 2) += 0.25;
  EXPECT_NEAR(mutual_information(ab), 0.0, 1e-15);
}

TEST(MutualInformation, ConditionalCopiedBit) {
  DiscreteJoint q(2, 2, 2);
  for (int y = 0; y < 2; ++y) q.at(y, 0, 0) = q.at(y, 1, 1) = 0.25;
  EXPECT_NEAR(conditional_mutual_information(q), std::log(2.0), 1e-15);
}

TEST(KlDecomposition, ConditionallyIndependentJointHasNoCmiTerm) {
  Rng rng(3);
  DiscreteJoint q(3, 2, 3);
  Matrix qa(3, 2), qb(3, 3);
  for (auto* m : {&qa, &qb})
    for (Eigen::Index y = 0; y < 3; ++y) {
      for (Eigen::Index z = 0; z < m->cols(); ++z) (*m)(y, z) = 0.1 + uniform01(rng);
      m->row(y) /= m->row(y).sum();
    }
  const std::vector<double> qy{0.2, 0.5, 0.3};
  for (int y = 0; y < 3; ++y)
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 3; ++b) q.at(y, a, b) = qy[y] * qa(y, a) * qb(y, b);
  FactorizedConditional p;
  p.pa = Matrix::Constant(3, 2, 0.5);
  p.pb = Matrix::Constant(3, 3, 1.0 / 3);
  const auto t = lemma1_terms(q, p);
  EXPECT_NEAR(t.cmi, 0.0, 1e-15);
  EXPECT_NEAR(t.joint_kl, t.kl_a + t.kl_b, 1e-14);
}

TEST(KlDecomposition, TrueConditionalsLeaveOnlyCmi) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    auto inst = random_lemma1_instance(rng);
    const auto qy = inst.q.marginal_y();
    for (Task t : {Task::A, Task::B}) {
      Matrix m = inst.q.marginal(t);
      for (Eigen::Index y = 0; y < m.rows(); ++y) {
        if (qy[static_cast<std::size_t>(y)] > 0.0)
          m.row(y) /= qy[static_cast<std::size_t>(y)];
        else
          m.row(y).setConstant(1.0 / static_cast<double>(m.cols()));
      }
      (t == Task::A ? inst.p.pa : inst.p.pb) = m;
    }
    const auto terms = lemma1_terms(inst.q, inst.p);
    EXPECT_NEAR(terms.kl_a, 0.0, 1e-14);
    EXPECT_NEAR(terms.kl_b, 0.0, 1e-14);
    EXPECT_NEAR(terms.joint_kl, terms.cmi, 1e-12);
  }
}

TEST(KlDecomposition, RandomInstancesSatisfyIdentity) {
  const auto s = verify_lemma1_random(1000, 1);
  EXPECT_EQ(s.trials, 1000);
  EXPECT_LT(s.max_abs_residual, 1e-10);
}

TEST(KlDecomposition, ZeroModelMassIsDomainError) {
  DiscreteJoint q(1, 2, 2);
  q.at(0, 1, 1) = 1.0;
  FactorizedConditional p;
  p.pa = Matrix(1, 2);
  p.pa << 1.0, 0.0;
  p.pb = Matrix::Constant(1, 2, 0.5);
  EXPECT_THROW(lemma1_terms(q, p), DomainError);
}

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Enumerates all 2^m binary outcomes of a task.
double brute_task_kl(const std::vector<double>& post, const std::vector<int>& group, const std::vector<double>& x,
                     bool restrict) {
  const int m = static_cast<int>(group.size());
  std::vector<double> q(1u << m, 0.0), p(1u << m, 0.0);
  double in_group = 0.0;
  for (int j = 0; j < m; ++j) {
    q[1u << j] = post[group[j]];
    in_group += post[group[j]];
  }
  q[0] = 1.0 - in_group;
  double mass = 0.0;
  for (unsigned z = 0; z < (1u << m); ++z) {
    double pz = 1.0;
    for (int j = 0; j < m; ++j) pz *= (z >> j & 1u) ? sig(x[j]) : 1.0 - sig(x[j]);
    p[z] = pz;
    if (std::popcount(z) <= 1) mass += pz;
  }
  double d = 0.0;
  for (unsigned z = 0; z < (1u << m); ++z)
    if (q[z] > 0.0) d += q[z] * std::log(q[z] / (restrict ? p[z] / mass : p[z]));
  return d;
}

}  // namespace

TEST(Risk, MatchesBruteForceOnTinyGenerator) {
  // 4 classes on a line, head {0, 1}, tail {2, 3}, hand-set affine logits.
  Generator g;
  g.means = Matrix(4, 1);
  g.means << -2.0, -0.5, 0.7, 2.1;
  g.sigma = 0.8;
  g.priors = {0.4, 0.3, 0.2, 0.1};
  const TaskSplit split{{0, 1}, {2, 3}};
  Matrix y(41, 1);
  for (int i = 0; i <= 40; ++i) y(i, 0) = -4.0 + 0.2 * i;
  Matrix la(41, 2), lb(41, 2);
  for (int i = 0; i <= 40; ++i) {
    const double v = y(i, 0);
    la.row(i) << -1.5 * v - 2.0, -0.2 * v - 1.0;
    lb.row(i) << 0.4 * v - 1.5, 1.3 * v - 3.0;
  }
  const Matrix post = true_posteriors(g, y);
  for (OutcomeSet o : {OutcomeSet::single_label, OutcomeSet::all_binary}) {
    const bool restrict = o == OutcomeSet::single_label;
    double ra = 0.0, rb = 0.0;
    for (int i = 0; i <= 40; ++i) {
      std::vector<double> p(post.row(i).begin(), post.row(i).end());
      ra += brute_task_kl(p, split.head, {la(i, 0), la(i, 1)}, restrict);
      rb += brute_task_kl(p, split.tail, {lb(i, 0), lb(i, 1)}, restrict);
    }
    const auto r = taskwise_risk(post, split, la, lb, o);
    EXPECT_NEAR(r.task_a, ra / 41, 1e-10);
    EXPECT_NEAR(r.task_b, rb / 41, 1e-10);
  }
}

TEST(Risk, TrueProjectedPosteriorHasZeroRisk) {
  GenConfig c;
  c.classes = 5;
  c.input_dim = 2;
  c.seed = 8;
  const Generator g = make_generator(c);
  const TaskSplit split{{0, 3, 4}, {1, 2}};
  Matrix y(30, 2);
  Rng rng(2);
  for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = 2.0 * standard_normal(rng);
  const Matrix post = true_posteriors(g, y);
  Matrix la(30, 3), lb(30, 2);
  for (int i = 0; i < 30; ++i) {
    for (Task t : {Task::A, Task::B}) {
      const auto& grp = split.classes(t);
      double out = 1.0;
      for (int k : grp) out -= post(i, k);
      for (std::size_t j = 0; j < grp.size(); ++j)
        (t == Task::A ? la : lb)(i, static_cast<Eigen::Index>(j)) = std::log(post(i, grp[j]) / out);
    }
  }
  const auto r = taskwise_risk(post, split, la, lb);
  EXPECT_NEAR(r.task_a, 0.0, 1e-12);
  EXPECT_NEAR(r.task_b, 0.0, 1e-12);
  EXPECT_GE(r.total(), -1e-12);
}
