#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <vector>

#include "fedpkd/data.hpp"
#include "fedpkd/fed.hpp"
#include "fedpkd/nn.hpp"

namespace fedpkd {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("fedpkd_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream(p, std::ios::binary)
      .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

SyntheticSpec two_point_spec(double distance, std::size_t n, std::uint64_t seed) {
  SyntheticSpec s;
  s.class_count = 2;
  s.dim = 3;
  s.samples_per_class = n;
  s.class_means = {{-distance / 2, 0.0, 0.0}, {distance / 2, 0.0, 0.0}};
  s.within_class_stddev = 1.0;
  s.seed = seed;
  return s;
}

// Full-batch-ish centralized SGD used to probe the generated geometry.
ModelParams train_centralized(const Dataset& ds, std::vector<std::size_t> hidden, double lr,
                              std::size_t epochs) {
  FedConfig cfg;
  cfg.local_epochs = epochs;
  cfg.batch_size = 20;
  cfg.learning_rate = lr;
  cfg.seed = 5;
  ClientShard all{0, {}};
  for (std::size_t i = 0; i < ds.size(); ++i) all.sample_indices.push_back(i);
  auto init = initial_model(mlp_layers(ds.dim, hidden, ds.class_count), 1);
  return local_train(init, ds, all, cfg, 1, CrossEntropyObjective{}).model;
}

TEST(Synthetic, ExactCountsAndDeterminism) {
  SyntheticSpec s = two_point_spec(3.0, 17, 9);
  const auto a = generate_synthetic(s);
  const auto b = generate_synthetic(s);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.class_counts(), (std::vector<std::size_t>{17, 17}));
  EXPECT_EQ(a.size(), 34u);
  a.validate();
  s.seed = 10;
  EXPECT_NE(generate_synthetic(s).features, a.features);
}

TEST(Synthetic, SampleMomentsMatchSpec) {
  SyntheticSpec s = two_point_spec(4.0, 20000, 1);
  s.within_class_stddev = 0.5;
  const auto ds = generate_synthetic(s);
  double mean = 0.0;
  double sq = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] != 1) continue;
    const double v = ds.row(i)[0];
    mean += v;
    sq += v * v;
    ++n;
  }
  mean /= static_cast<double>(n);
  const double var = sq / static_cast<double>(n) - mean * mean;
  EXPECT_NEAR(mean, 2.0, 0.02);
  EXPECT_NEAR(std::sqrt(var), 0.5, 0.01);
}

TEST(Synthetic, RejectsInvalidSpec) {
  SyntheticSpec s = two_point_spec(1.0, 0, 0);
  EXPECT_THROW(generate_synthetic(s), InvalidArgument);
  s.samples_per_class = 3;
  s.within_class_stddev = 0.0;
  EXPECT_THROW(generate_synthetic(s), InvalidArgument);
}

TEST(Synthetic, SeparableLimit) {
  const auto train = generate_synthetic(two_point_spec(100.0, 200, 1));
  const auto test = generate_synthetic(two_point_spec(100.0, 200, 2));
  const auto model = train_centralized(train, {}, 0.01, 3);
  const auto acc = evaluate(model, test);
  EXPECT_GE(acc.per_class[0], 0.99);
  EXPECT_GE(acc.per_class[1], 0.99);
}

TEST(Synthetic, IndistinguishableLimit) {
  SyntheticSpec s;
  s.class_count = 4;
  s.dim = 2;
  s.samples_per_class = 500;
  // Classes 2 and 3 share a mean at the origin, far from classes 0 and 1.
  s.class_means = {{10.0, 0.0}, {0.0, 10.0}, {0.0, 0.0}, {0.0, 0.0}};
  s.seed = 3;
  const auto train = generate_synthetic(s);
  s.seed = 4;
  const auto test = generate_synthetic(s);
  const auto model = train_centralized(train, {}, 0.01, 20);
  const auto preds = predict(model, test);
  const auto acc = class_accuracy(preds, test.labels, 4);
  EXPECT_GE(acc.per_class[0], 0.99);
  EXPECT_GE(acc.per_class[1], 0.99);
  EXPECT_NEAR(acc.per_class[2], 0.5, 0.15);
  EXPECT_NEAR(acc.per_class[3], 0.5, 0.15);
  // Cross-confusion dominates the errors of the coinciding pair.
  std::size_t errors = 0;
  std::size_t cross = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const std::size_t y = test.labels[i];
    if (y < 2 || preds[i] == y) continue;
    ++errors;
    cross += preds[i] == 5 - y ? 1 : 0;
  }
  EXPECT_GE(static_cast<double>(cross), 0.95 * static_cast<double>(errors));
}

TEST(Benchmark, DefaultGeometry) {
  const auto means = confusable_cluster_means(10, 16, 1.2, 8.0);
  auto dist = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t k = 0; k < 16; ++k) s += (means[a][k] - means[b][k]) * (means[a][k] - means[b][k]);
    return std::sqrt(s);
  };
  for (auto [a, b] : {std::pair{0, 6}, {2, 6}, {4, 6}, {2, 4}}) {
    EXPECT_NEAR(dist(a, b), 1.2, 1e-12) << a << "-" << b;
  }
  for (std::size_t a = 0; a < 10; ++a) {
    for (std::size_t b = a + 1; b < 10; ++b) {
      const bool group = (a == 0 || a == 2 || a == 4 || a == 6) && (b == 0 || b == 2 || b == 4 || b == 6);
      if (!group) EXPECT_GE(dist(a, b), 6.0) << a << "-" << b;
    }
  }
  // 0 and 2 (and 0 and 4) are each 1.2 from 6, so at most 2.4 apart.
  for (auto [a, b] : {std::pair{0, 2}, {0, 4}}) {
    EXPECT_GT(dist(a, b), 2.0) << a << "-" << b;
    EXPECT_LE(dist(a, b), 2.4) << a << "-" << b;
  }
  const auto bm = make_benchmark(BenchmarkSpec{});
  EXPECT_EQ(bm.train.size(), 3000u);
  EXPECT_EQ(bm.test.size(), 1000u);
  EXPECT_NE(bm.train.features[0], bm.test.features[0]);
}

TEST(Idx, HandBuiltFixture) {
  const auto dir = temp_dir("idx_fixture");
  write_bytes(dir / "img", {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2,  // header
                            0, 255, 51, 102,                                 // image 0
                            204, 153, 0, 255});                              // image 1
  write_bytes(dir / "lab", {0, 0, 8, 1, 0, 0, 0, 2, 3, 1});
  const auto ds = load_idx(dir / "img", dir / "lab");
  EXPECT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.dim, 4u);
  EXPECT_EQ(ds.class_count, 4u);
  EXPECT_EQ(ds.labels, (std::vector<std::size_t>{3, 1}));
  const std::vector<double> expected{0.0, 1.0, 0.2, 0.4, 0.8, 0.6, 0.0, 1.0};
  ASSERT_EQ(ds.features.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_DOUBLE_EQ(ds.features[i], expected[i]);
}

TEST(Idx, CountMismatch) {
  const auto dir = temp_dir("idx_mismatch");
  write_bytes(dir / "img", {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 7});
  write_bytes(dir / "lab", {0, 0, 8, 1, 0, 0, 0, 2, 0, 1});
  try {
    load_idx(dir / "img", dir / "lab");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 4u);
    EXPECT_NE(std::string(e.what()).find("count mismatch"), std::string::npos);
  }
}

TEST(Idx, BadMagicAndTruncation) {
  const auto dir = temp_dir("idx_bad");
  write_bytes(dir / "lab", {0, 0, 8, 1, 0, 0, 0, 1, 0});
  write_bytes(dir / "bad", {0, 0, 8, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0});
  EXPECT_THROW(load_idx(dir / "bad", dir / "lab"), ParseError);

  write_bytes(dir / "short", {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2});
  try {
    load_idx(dir / "short", dir / "lab");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 18u);
    EXPECT_EQ(e.path(), (dir / "short").string());
  }

  write_bytes(dir / "stub", {0, 0, 8});
  try {
    load_idx(dir / "stub", dir / "lab");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  EXPECT_THROW(load_idx(dir / "missing", dir / "lab"), ParseError);
}

TEST(Idx, WriteThenReadRoundTrip) {
  const auto dir = temp_dir("idx_roundtrip");
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    Dataset ds;
    ds.dim = 6;
    const std::size_t n = 1 + rng.below(30);
    for (std::size_t i = 0; i < n * ds.dim; ++i) ds.features.push_back(static_cast<double>(rng.below(256)) / 255.0);
    for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(rng.below(10));
    ds.class_count = *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
    write_idx(ds, 2, 3, dir / "i", dir / "l");
    const auto back = load_idx(dir / "i", dir / "l");
    EXPECT_EQ(back.labels, ds.labels);
    EXPECT_EQ(back.features, ds.features);
    EXPECT_EQ(back.class_count, ds.class_count);
  }
}

TEST(Idx, FashionMnistIfPresent) {
  const char* root = std::getenv("FEDPKD_DATA_DIR");
  if (root == nullptr) GTEST_SKIP() << "FEDPKD_DATA_DIR not set";
  const fs::path dir(root);
  const auto images = dir / "train-images-idx3-ubyte";
  const auto labels = dir / "train-labels-idx1-ubyte";
  if (!fs::exists(images) || !fs::exists(labels)) GTEST_SKIP() << "FashionMNIST files not present";
  const auto ds = load_idx(images, labels);
  EXPECT_EQ(ds.size(), 60000u);
  EXPECT_EQ(ds.class_count, 10u);
  EXPECT_EQ(ds.dim, 784u);
}

Dataset ten_class_dataset() {
  Dataset ds;
  ds.class_count = 10;
  ds.dim = 2;
  for (std::size_t i = 0; i < 40; ++i) {
    ds.labels.push_back(i % 10);
    ds.features.push_back(static_cast<double>(i));
    ds.features.push_back(-static_cast<double>(i));
  }
  return ds;
}

TEST(Remap, IdentityGroup) {
  const auto ds = ten_class_dataset();
  const std::vector<std::size_t> all{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  const auto out = remap_labels(ds, all);
  EXPECT_EQ(out.labels, ds.labels);
  EXPECT_EQ(out.features, ds.features);
  EXPECT_EQ(out.class_count, 10u);
}

TEST(Remap, SubsetFollowsGroupOrder) {
  const auto ds = ten_class_dataset();
  const std::vector<std::size_t> group{6, 0};
  const auto out = remap_labels_indexed(ds, group);
  EXPECT_EQ(out.data.class_count, 2u);
  EXPECT_EQ(out.data.size(), 8u);  // 4 samples each of classes 6 and 0
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const std::size_t src = out.source_index[i];
    EXPECT_EQ(out.data.labels[i], ds.labels[src] == 6 ? 0u : 1u);
    // feature rows carried over bitwise
    EXPECT_EQ(out.data.row(i)[0], ds.row(src)[0]);
    EXPECT_EQ(out.data.row(i)[1], ds.row(src)[1]);
  }
}

TEST(Remap, CountsAndErrors) {
  const auto ds = ten_class_dataset();
  const std::vector<std::size_t> group{2, 4, 6};
  const auto counts = ds.class_counts();
  EXPECT_EQ(remap_labels(ds, group).size(), counts[2] + counts[4] + counts[6]);
  EXPECT_THROW(remap_labels(ds, std::vector<std::size_t>{}), InvalidArgument);
  EXPECT_THROW(remap_labels(ds, std::vector<std::size_t>{1, 1}), InvalidArgument);
  EXPECT_THROW(remap_labels(ds, std::vector<std::size_t>{10}), InvalidArgument);
}

}  // namespace
}  // namespace fedpkd
