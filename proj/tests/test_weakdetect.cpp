#include <gtest/gtest.h>

#include <set>
#include <vector>

#include "fedpkd/data.hpp"
#include "fedpkd/fed.hpp"
#include "fedpkd/partition.hpp"
#include "fedpkd/weakdetect.hpp"

namespace fedpkd {
namespace {

SquareMatrix from_edges(std::size_t n, std::initializer_list<std::pair<std::size_t, std::size_t>> edges,
                        double weight = 0.3) {
  SquareMatrix m(n);
  for (auto [i, j] : edges) m(i, j) = weight;
  return m;
}

std::vector<std::vector<bool>> adjacency(const SquareMatrix& m, double theta) {
  std::vector<std::vector<bool>> adj(m.n, std::vector<bool>(m.n, false));
  for (std::size_t i = 0; i < m.n; ++i) {
    for (std::size_t j = 0; j < m.n; ++j) {
      if (i != j && std::max(m(i, j), m(j, i)) >= theta) adj[i][j] = true;
    }
  }
  return adj;
}

// Brute force: every vertex subset that is a clique and cannot be extended.
std::set<ClassGroup> brute_force_maximal_cliques(const std::vector<std::vector<bool>>& adj) {
  const std::size_t n = adj.size();
  auto is_clique = [&](std::uint32_t mask) {
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = a + 1; b < n; ++b) {
        if ((mask >> a & 1u) && (mask >> b & 1u) && !adj[a][b]) return false;
      }
    }
    return true;
  };
  std::set<ClassGroup> out;
  for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
    if (!is_clique(mask)) continue;
    bool maximal = true;
    for (std::size_t v = 0; v < n && maximal; ++v) {
      if (!(mask >> v & 1u) && is_clique(mask | (1u << v))) maximal = false;
    }
    if (!maximal) continue;
    ClassGroup g;
    for (std::size_t v = 0; v < n; ++v) {
      if (mask >> v & 1u) g.push_back(v);
    }
    out.insert(g);
  }
  return out;
}

TEST(DetectGroups, FourWeakPairsFormTwoGroups) {
  // Pairs (0,6), (6,2), (6,4), (2,4) over ten classes.
  auto m = from_edges(10, {{0, 6}, {6, 2}, {6, 4}, {2, 4}});
  const auto groups = detect_groups(m, 0.2);
  ASSERT_EQ(groups.size(), 2u);
  EXPECT_EQ(groups[0], (ClassGroup{2, 4, 6}));
  EXPECT_EQ(groups[1], (ClassGroup{0, 6}));
}

TEST(DetectGroups, DirectionOfConfusionDoesNotMatter) {
  auto m = from_edges(10, {{6, 0}, {2, 6}, {4, 6}, {4, 2}});
  const auto groups = detect_groups(m, 0.2);
  EXPECT_EQ(std::set<ClassGroup>(groups.begin(), groups.end()),
            (std::set<ClassGroup>{{0, 6}, {2, 4, 6}}));
}

TEST(DetectGroups, NothingAboveThreshold) {
  SquareMatrix m(5);
  for (double& v : m.values) v = 0.01;
  EXPECT_TRUE(detect_groups(m, 0.2).empty());
}

TEST(DetectGroups, CompleteGraphIsOneGroup) {
  auto m = from_edges(5, {{1, 2}, {2, 3}, {3, 1}});
  const auto groups = detect_groups(m, 0.1);
  ASSERT_EQ(groups.size(), 1u);
  EXPECT_EQ(groups[0], (ClassGroup{1, 2, 3}));
}

TEST(DetectGroups, OrderedByConfusionMassThenLexicographic) {
  SquareMatrix m(6);
  m(0, 1) = 0.2;  // mass 0.2
  m(2, 3) = 0.4;  // mass 0.4
  m(4, 5) = 0.2;  // mass 0.2, ties with {0,1}
  const auto groups = detect_groups(m, 0.1);
  ASSERT_EQ(groups.size(), 3u);
  EXPECT_EQ(groups[0], (ClassGroup{2, 3}));
  EXPECT_EQ(groups[1], (ClassGroup{0, 1}));
  EXPECT_EQ(groups[2], (ClassGroup{4, 5}));
}

TEST(DetectGroups, RejectsNonPositiveTheta) {
  SquareMatrix m(3);
  EXPECT_THROW(detect_groups(m, 0.0), InvalidArgument);
}

TEST(DetectGroups, ScalingInvariance) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    SquareMatrix m(8);
    for (double& v : m.values) v = rng.uniform() * 0.3;
    const double theta = 0.05 + 0.2 * rng.uniform();
    const double scale = 0.5 + 4.0 * rng.uniform();
    SquareMatrix scaled = m;
    for (double& v : scaled.values) v *= scale;
    // Power-of-two scales are exact; others may flip a value sitting exactly
    // on the threshold, which random reals essentially never do.
    EXPECT_EQ(detect_groups(m, theta), detect_groups(scaled, theta * scale)) << "trial " << trial;
  }
}

TEST(DetectGroups, CliquesAreMaximalAgainstBruteForce) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(9);
    SquareMatrix m(n);
    const double density = rng.uniform();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i != j && rng.uniform() < density) m(i, j) = 0.3;
      }
    }
    const auto adj = adjacency(m, 0.25);
    const auto groups = detect_groups(m, 0.25);
    std::set<ClassGroup> want;
    for (const auto& g : brute_force_maximal_cliques(adj)) {
      if (g.size() >= 2) want.insert(g);
    }
    EXPECT_EQ(std::set<ClassGroup>(groups.begin(), groups.end()), want) << "trial " << trial;
    for (const auto& g : groups) {
      EXPECT_TRUE(std::is_sorted(g.begin(), g.end()));
      for (std::size_t a : g) {
        for (std::size_t b : g) {
          if (a != b) EXPECT_GE(std::max(m(a, b), m(b, a)), 0.25);
        }
      }
    }
  }
}

TEST(Threshold, DefaultRule) {
  SquareMatrix m(3);
  m(0, 1) = 0.06;  // mean off-diagonal 0.01 -> 5x = 0.05
  EXPECT_DOUBLE_EQ(default_threshold(m), 0.05);
  m(1, 2) = 0.06;  // mean 0.02 -> 0.1
  EXPECT_DOUBLE_EQ(default_threshold(m), 0.1);
  for (double& v : m.values) v = 0.5;
  EXPECT_DOUBLE_EQ(default_threshold(m), 0.5);
  SquareMatrix zero(4);
  EXPECT_DOUBLE_EQ(default_threshold(zero), 0.05);
}

TEST(SelectWorst, KeepsLowestMeanScoreInOriginalOrder) {
  const std::vector<ClassGroup> groups{{2, 4, 6}, {0, 6}, {1, 3}, {5, 7}};
  const std::vector<double> acc{0.9, 0.2, 0.6, 0.3, 0.6, 0.9, 0.3, 0.9, 0.9, 0.9};
  // means: {2,4,6}=0.5, {0,6}=0.6, {1,3}=0.25, {5,7}=0.9
  EXPECT_EQ(select_worst_groups(groups, acc, 2), (std::vector<ClassGroup>{{2, 4, 6}, {1, 3}}));
  EXPECT_EQ(select_worst_groups(groups, acc, 5), groups);
  EXPECT_TRUE(select_worst_groups(groups, acc, 0).empty());
}

TEST(Confusion, PerfectAndConstantModels) {
  const std::vector<std::size_t> labels{0, 1, 2, 1, 0, 2};
  const auto perfect = confusion_from_predictions(labels, labels, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(perfect.at(i, j), i == j ? 2u : 0u);
  }
  const std::vector<std::size_t> ones(6, 1);
  const auto constant = confusion_from_predictions(ones, labels, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(constant.at(i, j), j == 1 ? 2u : 0u);
  }
}

TEST(Confusion, TwoClientsAddUp) {
  // Client A: labels 0,0,1 predicted 0,1,1. Client B: labels 1,0 predicted 0,0.
  auto a = confusion_from_predictions(std::vector<std::size_t>{0, 1, 1},
                                      std::vector<std::size_t>{0, 0, 1}, 2);
  const auto b = confusion_from_predictions(std::vector<std::size_t>{0, 0},
                                            std::vector<std::size_t>{1, 0}, 2);
  a += b;
  EXPECT_EQ(a.at(0, 0), 2u);
  EXPECT_EQ(a.at(0, 1), 1u);
  EXPECT_EQ(a.at(1, 0), 1u);
  EXPECT_EQ(a.at(1, 1), 1u);
  const auto m = misclassification_probabilities(a);
  EXPECT_DOUBLE_EQ(m(0, 1), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(m(1, 0), 0.5);
}

TEST(Confusion, CollectRowSumsMatchShardTotals) {
  SyntheticSpec s;
  s.class_count = 4;
  s.dim = 3;
  s.samples_per_class = 12;
  s.class_means = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  s.seed = 2;
  const auto ds = generate_synthetic(s);
  PartitionSpec ps;
  ps.strategy = PartitionStrategy::Dirichlet;
  ps.client_count = 5;
  const auto shards = partition(ds, ps);
  const std::vector<std::size_t> hidden{4};
  const auto model = ModelParams::initialized(mlp_layers(3, hidden, 4), 3);
  const auto conf = collect_confusion(model, ds, shards);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(conf.row_sum(c), 12u);
  // Summing per client equals one pass over the whole dataset.
  EXPECT_EQ(conf, confusion_from_predictions(predict(model, ds), ds.labels, 4));
}

TEST(FeatureDistance, SymmetricWithZeroDiagonal) {
  SyntheticSpec s;
  s.class_count = 3;
  s.dim = 2;
  s.samples_per_class = 10;
  s.class_means = {{0, 0}, {2, 0}, {0, 2}};
  const auto ds = generate_synthetic(s);
  const std::vector<std::size_t> hidden{5};
  const auto model = ModelParams::initialized(mlp_layers(2, hidden, 3), 1);
  const auto d = feature_distance_matrix(model, ds);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(d(i, i), 0.0);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(d(i, j), d(j, i), 1e-12);
  }
  auto missing = ds;
  missing.class_count = 4;
  EXPECT_THROW(feature_distance_matrix(model, missing), InvalidArgument);
}

TEST(FeatureDistance, PlantedGroupsAreCloserAfterWarmup) {
  const auto bm = make_benchmark(BenchmarkSpec{});
  PartitionSpec ps;
  const auto shards = partition(bm.train, ps);
  FedConfig cfg;
  cfg.rounds = 20;
  const std::vector<std::size_t> hidden{32};
  const auto init = initial_model(mlp_layers(bm.train.dim, hidden, 10), cfg.seed);
  const auto r = run_fedavg(bm.train, shards, bm.test, cfg, init, CrossEntropyObjective{});
  const auto d = feature_distance_matrix(r.model, bm.train);
  const std::set<std::size_t> planted{0, 2, 4, 6};
  double within = 0.0;
  double cross = 0.0;
  std::size_t nw = 0;
  std::size_t nc = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t j = i + 1; j < 10; ++j) {
      if (planted.count(i) && planted.count(j)) {
        within += d(i, j);
        ++nw;
      } else {
        cross += d(i, j);
        ++nc;
      }
    }
  }
  EXPECT_LT(within / static_cast<double>(nw), cross / static_cast<double>(nc));
}

TEST(GroupsJson, Layout) {
  const auto j = groups_to_json({{0, 6}, {2, 4, 6}}, 0.125, 20);
  EXPECT_EQ(j.dump(), R"({"groups":[[0,6],[2,4,6]],"round":20,"theta":0.125})");
}

}  // namespace
}  // namespace fedpkd
