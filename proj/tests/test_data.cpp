#include <gtest/gtest.h>

#include <fstream>

#include "sharedepth/data.hpp"
#include "test_util.hpp"

using namespace sharedepth;

TEST(Generate, BalancedWhenRatioIsOne) {
  GenConfig c;
  c.classes = 4;
  c.imbalance_ratio = 1.0;
  c.n_max = 37;
  EXPECT_EQ(class_counts(c), std::vector<int>(4, 37));
}

TEST(Generate, ExponentialProfileEndpoints) {
  GenConfig c;
  c.classes = 100;
  c.imbalance_ratio = 100.0;
  c.n_max = 500;
  const auto n = class_counts(c);
  EXPECT_EQ(n.front(), 500);
  EXPECT_EQ(n.back(), 5);
  EXPECT_TRUE(std::is_sorted(n.rbegin(), n.rend()));
}

TEST(Generate, VanishingTailIsConfigError) {
  GenConfig c;
  c.classes = 10;
  c.imbalance_ratio = 1000.0;
  c.n_max = 100;
  EXPECT_THROW(class_counts(c), ConfigError);
}

TEST(Generate, SeededRunsAreIdentical) {
  GenConfig c;
  c.seed = 99;
  const auto a = generate(c), b = generate(c);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.classes, b.classes);
  EXPECT_EQ(a.class_counts(), class_counts(c));
  c.seed = 100;
  EXPECT_NE(generate(c).features, a.features);
}

TEST(Generate, InformativeDimsZeroOutRemainingMeans) {
  GenConfig c;
  c.input_dim = 6;
  c.informative_dims = 2;
  const Generator g = make_generator(c);
  EXPECT_TRUE(g.means.rightCols(4).isZero());
  EXPECT_FALSE(g.means.leftCols(2).isZero());
}

TEST(Split, SortedHalves) {
  const auto s = split_classes({40, 30, 20, 10});
  EXPECT_EQ(s.head, (std::vector<int>{0, 1}));
  EXPECT_EQ(s.tail, (std::vector<int>{2, 3}));
}

TEST(Split, OddCountGivesHeadTheExtraClass) {
  const auto s = split_classes({10, 40, 20});
  EXPECT_EQ(s.head, (std::vector<int>{1, 2}));
  EXPECT_EQ(s.tail, (std::vector<int>{0}));
}

TEST(Split, TiesKeepLowestIndicesInHead) {
  const auto s = split_classes({5, 5, 5, 5, 5});
  EXPECT_EQ(s.head, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(s.tail, (std::vector<int>{3, 4}));
}

TEST(Split, PartitionChecked) {
  EXPECT_NO_THROW(check_split({{0, 2}, {1}}, 3));
  EXPECT_THROW(check_split({{0, 0}, {1}}, 3), StructuralError);
  EXPECT_THROW(check_split({{0}, {1}}, 3), StructuralError);
}

TEST(Project, OneHotLandsOnOneSide) {
  const TaskSplit s{{0, 1}, {2, 3}};
  Matrix y = Matrix::Zero(2, 4);
  y(0, 2) = 1;
  y(1, 0) = 1;
  const auto [za, zb] = project_labels(y, s);
  EXPECT_EQ(za.row(0).sum(), 0.0);
  EXPECT_EQ(zb(0, 0), 1.0);
  EXPECT_EQ(zb(0, 1), 0.0);
  EXPECT_EQ(za(1, 0), 1.0);
  EXPECT_EQ(zb.row(1).sum(), 0.0);
}

TEST(Project, MergeInvertsProjection) {
  const TaskSplit s{{3, 0}, {2, 1, 4}};
  const std::vector<int> cls{0, 1, 2, 3, 4, 4, 3};
  const auto [za, zb] = project_labels(cls, s);
  EXPECT_EQ(merge_labels(za, zb, s), cls);
}

TEST(Posterior, PeakedAtIsolatedMean) {
  Generator g;
  g.means = Matrix::Zero(3, 2);
  g.means.row(1) << 40.0, 0.0;
  g.means.row(2) << 0.0, 40.0;
  g.priors = {0.2, 0.5, 0.3};
  const std::vector<double> y{40.0, 0.0};
  EXPECT_GT(true_posterior(g, y)[1], 0.999);
}

TEST(Posterior, EquidistantIsHalf) {
  Generator g;
  g.means = Matrix::Zero(2, 1);
  g.means(0, 0) = -1.5;
  g.means(1, 0) = 1.5;
  g.priors = {0.5, 0.5};
  const auto p = true_posterior(g, std::vector<double>{0.0});
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Posterior, MatchesDirectBayesFormula) {
  GenConfig c;
  c.classes = 5;
  c.input_dim = 3;
  c.seed = 4;
  const Generator g = make_generator(c);
  const std::vector<double> y{0.3, -0.2, 0.9};
  std::vector<double> joint(5);
  double z = 0.0;
  for (int k = 0; k < 5; ++k) {
    double d2 = 0.0;
    for (int j = 0; j < 3; ++j) d2 += (y[j] - g.means(k, j)) * (y[j] - g.means(k, j));
    z += joint[k] = g.priors[k] * std::exp(-d2 / (2 * g.sigma * g.sigma));
  }
  const auto p = true_posterior(g, y);
  for (int k = 0; k < 5; ++k) EXPECT_NEAR(p[k], joint[k] / z, 1e-14);
}

TEST(Csv, HandWrittenFile) {
  const auto path = testutil::temp_dir("csv_hand") / "d.csv";
  std::ofstream(path) << "# comment\n0.5,1.0,0\n-1,2,2\n\n3,4e-1,0\n";
  const auto ds = load_csv(path);
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.num_classes, 3);
  EXPECT_EQ(ds.class_counts(), (std::vector<int>{2, 0, 1}));
  EXPECT_DOUBLE_EQ(ds.features(2, 1), 0.4);
}

TEST(Csv, ErrorsNameTheLine) {
  const auto dir = testutil::temp_dir("csv_err");
  std::ofstream(dir / "cols.csv") << "1,2,0\n1,0\n";
  std::ofstream(dir / "feat.csv") << "1,2,0\n1,x,0\n";
  std::ofstream(dir / "label.csv") << "1,2,0\n\n1,2,7\n";
  try {
    load_csv(dir / "cols.csv");
    FAIL();
  } catch (const IngestionError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  try {
    load_csv(dir / "feat.csv");
    FAIL();
  } catch (const IngestionError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  try {
    load_csv(dir / "label.csv", 3);
    FAIL();
  } catch (const IngestionError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(load_csv(dir / "absent.csv"), MissingArtifactError);
}

TEST(Csv, SaveLoadRoundTripIsExact) {
  GenConfig c;
  c.seed = 12;
  const auto ds = generate(c);
  const auto path = testutil::temp_dir("csv_rt") / "d.csv";
  save_csv(ds, path);
  const auto back = load_csv(path, ds.num_classes);
  EXPECT_EQ(back.features, ds.features);
  EXPECT_EQ(back.classes, ds.classes);
}

TEST(Holdout, ZeroFractionKeepsEverything) {
  GenConfig c;
  const auto ds = generate(c);
  const auto [train, test] = holdout_split(ds, 0.0, 1);
  EXPECT_EQ(test.size(), 0u);
  EXPECT_EQ(train.size(), ds.size());
}

TEST(Holdout, StratifiedProportions) {
  GenConfig c;
  c.classes = 4;
  c.imbalance_ratio = 4.0;
  c.n_max = 80;
  const auto ds = generate(c);
  const auto [train, test] = holdout_split(ds, 0.25, 3);
  const auto nt = test.class_counts(), nc = ds.class_counts();
  for (int k = 0; k < 4; ++k) EXPECT_EQ(nt[k], std::lround(0.25 * nc[k]));
  EXPECT_EQ(train.size() + test.size(), ds.size());
}

TEST(Sidecar, GeneratorJsonRoundTrip) {
  GenConfig c;
  c.seed = 5;
  const Generator g = make_generator(c);
  const Generator back = generator_from_json(nlohmann::json::parse(to_json(g).dump()));
  EXPECT_EQ(back.means, g.means);
  EXPECT_EQ(back.priors, g.priors);
  EXPECT_EQ(back.sigma, g.sigma);
}
