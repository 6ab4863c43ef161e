#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedpkd/data.hpp"
#include "fedpkd/error.hpp"
#include "fedpkd/fed.hpp"
#include "fedpkd/nn.hpp"
#include "fedpkd/partition.hpp"

namespace fedpkd {

struct SquareMatrix {
  std::size_t n = 0;
  std::vector<double> values;

  SquareMatrix() = default;
  explicit SquareMatrix(std::size_t size) : n(size), values(size * size, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) noexcept { return values[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return values[i * n + j]; }
};

// counts(i, j): samples of true class i predicted as j.
struct ConfusionStats {
  std::size_t class_count = 0;
  std::vector<std::uint64_t> counts;

  ConfusionStats() = default;
  explicit ConfusionStats(std::size_t c) : class_count(c), counts(c * c, 0) {}

  std::uint64_t& at(std::size_t i, std::size_t j) noexcept { return counts[i * class_count + j]; }
  std::uint64_t at(std::size_t i, std::size_t j) const noexcept {
    return counts[i * class_count + j];
  }

  std::uint64_t row_sum(std::size_t i) const noexcept {
    return std::accumulate(counts.begin() + static_cast<std::ptrdiff_t>(i * class_count),
                           counts.begin() + static_cast<std::ptrdiff_t>((i + 1) * class_count),
                           std::uint64_t{0});
  }

  ConfusionStats& operator+=(const ConfusionStats& other) {
    if (other.class_count != class_count) throw InvalidArgument("confusion size mismatch");
    for (std::size_t k = 0; k < counts.size(); ++k) counts[k] += other.counts[k];
    return *this;
  }

  friend bool operator==(const ConfusionStats&, const ConfusionStats&) = default;
};

inline ConfusionStats confusion_from_predictions(std::span<const std::size_t> preds,
                                                 std::span<const std::size_t> labels,
                                                 std::size_t class_count) {
  if (preds.size() != labels.size()) throw InvalidArgument("preds/labels length mismatch");
  ConfusionStats s(class_count);
  for (std::size_t i = 0; i < preds.size(); ++i) ++s.at(labels[i], preds[i]);
  return s;
}

// Each client runs the model over its own training shard; the server sums
// the per-client matrices in client order.
inline ConfusionStats collect_confusion(const ModelParams& model, const Dataset& train,
                                        std::span<const ClientShard> shards) {
  ConfusionStats total(train.class_count);
  for (const auto& shard : shards) {
    ConfusionStats local(train.class_count);
    for (std::size_t i : shard.sample_indices) {
      ++local.at(train.labels[i], argmax(forward(model, train.row(i)).logits));
    }
    total += local;
  }
  return total;
}

// m(i, j) = counts(i, j) / row_sum(i). Rows of classes with no samples stay 0.
inline SquareMatrix misclassification_probabilities(const ConfusionStats& stats) {
  SquareMatrix m(stats.class_count);
  for (std::size_t i = 0; i < stats.class_count; ++i) {
    const auto total = stats.row_sum(i);
    if (total == 0) continue;
    for (std::size_t j = 0; j < stats.class_count; ++j) {
      m(i, j) = static_cast<double>(stats.at(i, j)) / static_cast<double>(total);
    }
  }
  return m;
}

// 5x the mean off-diagonal entry, clamped to [0.05, 0.5].
inline double default_threshold(const SquareMatrix& m) {
  if (m.n < 2) return 0.5;
  double sum = 0.0;
  for (std::size_t i = 0; i < m.n; ++i) {
    for (std::size_t j = 0; j < m.n; ++j) {
      if (i != j) sum += m(i, j);
    }
  }
  const double mean = sum / static_cast<double>(m.n * (m.n - 1));
  return std::clamp(5.0 * mean, 0.05, 0.5);
}

using ClassGroup = std::vector<std::size_t>;

// Sum of m(i, j) + m(j, i) over the unordered pairs of the group.
inline double confusion_mass(const SquareMatrix& m, const ClassGroup& g) {
  double mass = 0.0;
  for (std::size_t a = 0; a < g.size(); ++a) {
    for (std::size_t b = a + 1; b < g.size(); ++b) mass += m(g[a], g[b]) + m(g[b], g[a]);
  }
  return mass;
}

namespace detail {

using Adjacency = std::vector<std::vector<bool>>;

// Bron-Kerbosch with Tomita pivoting; reports every maximal clique of r+p.
inline void bron_kerbosch(const Adjacency& adj, std::vector<std::size_t>& r,
                          std::vector<std::size_t> p, std::vector<std::size_t> x,
                          std::vector<ClassGroup>& out) {
  if (p.empty() && x.empty()) {
    out.push_back(r);
    return;
  }
  // Pivot: the vertex of p or x with the most neighbours in p.
  std::size_t pivot = 0;
  std::size_t best = 0;
  bool have_pivot = false;
  for (const auto* set : {&p, &x}) {
    for (std::size_t u : *set) {
      const auto deg = static_cast<std::size_t>(
          std::count_if(p.begin(), p.end(), [&](std::size_t v) { return adj[u][v]; }));
      if (!have_pivot || deg > best) {
        pivot = u;
        best = deg;
        have_pivot = true;
      }
    }
  }
  std::vector<std::size_t> candidates;
  for (std::size_t v : p) {
    if (!adj[pivot][v]) candidates.push_back(v);
  }
  for (std::size_t v : candidates) {
    std::vector<std::size_t> p2;
    std::vector<std::size_t> x2;
    for (std::size_t u : p) {
      if (adj[v][u]) p2.push_back(u);
    }
    for (std::size_t u : x) {
      if (adj[v][u]) x2.push_back(u);
    }
    r.push_back(v);
    bron_kerbosch(adj, r, std::move(p2), std::move(x2), out);
    r.pop_back();
    p.erase(std::find(p.begin(), p.end(), v));
    x.push_back(v);
  }
}

}  // namespace detail

// All maximal cliques of the graph given by the adjacency matrix, each
// sorted ascending, listed in lexicographic order.
inline std::vector<ClassGroup> maximal_cliques(const std::vector<std::vector<bool>>& adj) {
  std::vector<std::size_t> all(adj.size());
  std::iota(all.begin(), all.end(), 0);
  std::vector<std::size_t> r;
  std::vector<ClassGroup> cliques;
  detail::bron_kerbosch(adj, r, all, {}, cliques);
  for (auto& c : cliques) std::sort(c.begin(), c.end());
  std::sort(cliques.begin(), cliques.end());
  return cliques;
}

// Groups are the maximal cliques (size >= 2) of the graph with an edge (i, j)
// whenever max(m(i,j), m(j,i)) >= theta. Ordered by descending confusion
// mass, then lexicographically.
inline std::vector<ClassGroup> detect_groups(const SquareMatrix& m, double theta) {
  if (!(theta > 0.0)) throw InvalidArgument("detect_groups: theta must be > 0");
  std::vector<std::vector<bool>> adj(m.n, std::vector<bool>(m.n, false));
  for (std::size_t i = 0; i < m.n; ++i) {
    for (std::size_t j = i + 1; j < m.n; ++j) {
      if (std::max(m(i, j), m(j, i)) >= theta) adj[i][j] = adj[j][i] = true;
    }
  }
  std::vector<ClassGroup> groups;
  for (auto& c : maximal_cliques(adj)) {
    if (c.size() >= 2) groups.push_back(std::move(c));
  }
  std::stable_sort(groups.begin(), groups.end(), [&](const ClassGroup& a, const ClassGroup& b) {
    const double ma = confusion_mass(m, a);
    const double mb = confusion_mass(m, b);
    if (ma != mb) return ma > mb;
    return a < b;
  });
  return groups;
}

// Keeps the `max_groups` groups whose classes have the lowest mean score
// (e.g. training-set accuracy), preserving their original order.
inline std::vector<ClassGroup> select_worst_groups(const std::vector<ClassGroup>& groups,
                                                   std::span<const double> class_scores,
                                                   std::size_t max_groups) {
  if (groups.size() <= max_groups) return groups;
  std::vector<std::size_t> order(groups.size());
  std::iota(order.begin(), order.end(), 0);
  auto mean_score = [&](std::size_t g) {
    double s = 0.0;
    for (std::size_t c : groups[g]) s += class_scores[c];
    return s / static_cast<double>(groups[g].size());
  };
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return mean_score(a) < mean_score(b); });
  order.resize(max_groups);
  std::sort(order.begin(), order.end());
  std::vector<ClassGroup> kept;
  for (std::size_t g : order) kept.push_back(groups[g]);
  return kept;
}

// d(i, j): Euclidean distance between the mean penultimate-layer features of
// classes i and j over the dataset.
inline SquareMatrix feature_distance_matrix(const ModelParams& model, const Dataset& ds) {
  const std::size_t c_count = ds.class_count;
  const std::size_t f_dim = model.feature_dim();
  std::vector<std::vector<double>> sums(c_count, std::vector<double>(f_dim, 0.0));
  std::vector<std::size_t> counts(c_count, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto fwd = forward(model, ds.row(i));
    auto& s = sums[ds.labels[i]];
    for (std::size_t k = 0; k < f_dim; ++k) s[k] += fwd.features[k];
    ++counts[ds.labels[i]];
  }
  for (std::size_t c = 0; c < c_count; ++c) {
    if (counts[c] == 0) {
      throw InvalidArgument("feature_distance_matrix: class " + std::to_string(c) +
                            " has no samples");
    }
    for (double& v : sums[c]) v /= static_cast<double>(counts[c]);
  }
  SquareMatrix d(c_count);
  for (std::size_t i = 0; i < c_count; ++i) {
    for (std::size_t j = i + 1; j < c_count; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < f_dim; ++k) {
        const double diff = sums[i][k] - sums[j][k];
        acc += diff * diff;
      }
      d(i, j) = d(j, i) = std::sqrt(acc);
    }
  }
  return d;
}

inline nlohmann::json groups_to_json(const std::vector<ClassGroup>& groups, double theta,
                                     std::size_t round) {
  return {{"groups", groups}, {"theta", theta}, {"round", round}};
}

}  // namespace fedpkd
