#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedpkd/data.hpp"
#include "fedpkd/error.hpp"
#include "fedpkd/rng.hpp"

namespace fedpkd {

struct ClientShard {
  std::size_t client_id = 0;
  std::vector<std::size_t> sample_indices;  // into the global dataset

  std::size_t size() const noexcept { return sample_indices.size(); }
  bool empty() const noexcept { return sample_indices.empty(); }
  friend bool operator==(const ClientShard&, const ClientShard&) = default;
};

enum class PartitionStrategy { LocalBalanced, Pathological, Dirichlet };

inline std::string_view to_string(PartitionStrategy s) {
  switch (s) {
    case PartitionStrategy::LocalBalanced: return "local-balanced";
    case PartitionStrategy::Pathological: return "pathological";
    case PartitionStrategy::Dirichlet: return "dirichlet";
  }
  return "?";
}

inline PartitionStrategy parse_strategy(std::string_view s) {
  if (s == "local-balanced") return PartitionStrategy::LocalBalanced;
  if (s == "pathological") return PartitionStrategy::Pathological;
  if (s == "dirichlet") return PartitionStrategy::Dirichlet;
  throw InvalidArgument("unknown partition strategy '" + std::string(s) + "'");
}

struct PartitionSpec {
  PartitionStrategy strategy = PartitionStrategy::LocalBalanced;
  std::size_t client_count = 10;
  std::size_t classes_per_client = 1;  // pathological only
  double alpha = 0.5;                  // dirichlet only
  std::uint64_t seed = 0;

  void validate() const {
    if (client_count < 1) throw InvalidArgument("partition.client_count must be >= 1");
    if (classes_per_client < 1) throw InvalidArgument("partition.classes_per_client must be >= 1");
    if (!(alpha > 0.0)) throw InvalidArgument("partition.alpha must be > 0");
  }
};

namespace detail {

// Sample indices per class, each list shuffled with `rng`.
inline std::vector<std::vector<std::size_t>> shuffled_by_class(const Dataset& ds, Rng& rng) {
  std::vector<std::vector<std::size_t>> by_class(ds.class_count);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  for (auto& v : by_class) shuffle(std::span(v), rng);
  return by_class;
}

inline std::vector<ClientShard> empty_shards(std::size_t k) {
  std::vector<ClientShard> shards(k);
  for (std::size_t i = 0; i < k; ++i) shards[i].client_id = i;
  return shards;
}

}  // namespace detail

// Every client gets exactly count(c) / K samples of every class c.
inline std::vector<ClientShard> partition_balanced(const Dataset& ds, const PartitionSpec& spec) {
  spec.validate();
  const std::size_t k = spec.client_count;
  const auto counts = ds.class_counts();
  std::size_t g = 0;
  for (std::size_t c : counts) g = std::gcd(g, c);
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] % k != 0) {
      // Nearest divisor of the gcd of the class counts.
      std::size_t best = 1;
      for (std::size_t d = 1; d <= g; ++d) {
        if (g % d != 0) continue;
        const auto dist = [k](std::size_t x) { return x > k ? x - k : k - x; };
        if (dist(d) < dist(best)) best = d;
      }
      throw PartitionError("local-balanced: class " + std::to_string(c) + " has " +
                           std::to_string(counts[c]) + " samples, not divisible by " +
                           std::to_string(k) + " clients; nearest valid client_count is " +
                           std::to_string(best));
    }
  }
  Rng rng(derive_seed(spec.seed, {stream::kPartition, 1}));
  const auto by_class = detail::shuffled_by_class(ds, rng);
  auto shards = detail::empty_shards(k);
  for (const auto& idx : by_class) {
    const std::size_t per = idx.size() / k;
    for (std::size_t j = 0; j < k; ++j) {
      shards[j].sample_indices.insert(shards[j].sample_indices.end(),
                                      idx.begin() + static_cast<std::ptrdiff_t>(j * per),
                                      idx.begin() + static_cast<std::ptrdiff_t>((j + 1) * per));
    }
  }
  return shards;
}

// Shard dealing: sort samples by label, cut into c*K equal shards and give
// client k the shards k, k+K, ..., k+(c-1)K. With c = 1 and K = C client k
// holds exactly class k.
inline std::vector<ClientShard> partition_pathological(const Dataset& ds,
                                                       const PartitionSpec& spec) {
  spec.validate();
  const std::size_t k = spec.client_count;
  const std::size_t c = spec.classes_per_client;
  if (c * k < ds.class_count) {
    throw PartitionError("pathological: classes_per_client * client_count = " +
                         std::to_string(c * k) + " < class_count " +
                         std::to_string(ds.class_count));
  }
  if (c > ds.class_count) throw PartitionError("pathological: classes_per_client > class_count");
  const std::size_t n_shards = c * k;
  if (ds.size() % n_shards != 0) {
    throw PartitionError("pathological: " + std::to_string(ds.size()) +
                         " samples cannot be cut into " + std::to_string(n_shards) +
                         " equal shards");
  }
  const std::size_t shard_size = ds.size() / n_shards;
  for (std::size_t count : ds.class_counts()) {
    if (count % shard_size != 0) {
      throw PartitionError("pathological: class sample counts must be multiples of the shard size " +
                           std::to_string(shard_size));
    }
  }
  Rng rng(derive_seed(spec.seed, {stream::kPartition, 2}));
  const auto by_class = detail::shuffled_by_class(ds, rng);
  std::vector<std::size_t> sorted;
  sorted.reserve(ds.size());
  for (const auto& v : by_class) sorted.insert(sorted.end(), v.begin(), v.end());

  auto shards = detail::empty_shards(k);
  for (std::size_t s = 0; s < n_shards; ++s) {
    auto& dst = shards[s % k].sample_indices;
    dst.insert(dst.end(), sorted.begin() + static_cast<std::ptrdiff_t>(s * shard_size),
               sorted.begin() + static_cast<std::ptrdiff_t>((s + 1) * shard_size));
  }
  return shards;
}

// Splits `total` items by proportions `q` with largest-remainder rounding;
// ties go to the lower index.
inline std::vector<std::size_t> largest_remainder(std::size_t total, std::span<const double> q) {
  std::vector<std::size_t> counts(q.size());
  std::vector<double> rem(q.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double exact = q[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    rem[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(q.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  // floor() can only undershoot, but guard against pathological rounding.
  for (std::size_t i = 0; assigned < total; i = (i + 1) % order.size()) {
    ++counts[order[i]];
    ++assigned;
  }
  while (assigned > total) {
    auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  return counts;
}

// For each class, proportions q ~ Dir(alpha * 1_K) over clients.
inline std::vector<ClientShard> partition_dirichlet(const Dataset& ds, const PartitionSpec& spec) {
  spec.validate();
  const std::size_t k = spec.client_count;
  Rng rng(derive_seed(spec.seed, {stream::kPartition, 3}));
  const auto by_class = detail::shuffled_by_class(ds, rng);
  auto shards = detail::empty_shards(k);
  std::vector<double> q(k);
  for (const auto& idx : by_class) {
    double sum = 0.0;
    for (auto& x : q) sum += (x = rng.gamma(spec.alpha));
    if (sum > 0.0) {
      for (auto& x : q) x /= sum;
    } else {
      // Every draw underflowed (tiny alpha): give the class to one client.
      std::fill(q.begin(), q.end(), 0.0);
      q[rng.below(k)] = 1.0;
    }
    const auto counts = largest_remainder(idx.size(), q);
    std::size_t pos = 0;
    for (std::size_t j = 0; j < k; ++j) {
      auto& dst = shards[j].sample_indices;
      dst.insert(dst.end(), idx.begin() + static_cast<std::ptrdiff_t>(pos),
                 idx.begin() + static_cast<std::ptrdiff_t>(pos + counts[j]));
      pos += counts[j];
    }
  }
  return shards;
}

inline std::vector<ClientShard> partition(const Dataset& ds, const PartitionSpec& spec) {
  switch (spec.strategy) {
    case PartitionStrategy::LocalBalanced: return partition_balanced(ds, spec);
    case PartitionStrategy::Pathological: return partition_pathological(ds, spec);
    case PartitionStrategy::Dirichlet: return partition_dirichlet(ds, spec);
  }
  throw InvalidArgument("unknown partition strategy");
}

// counts[k][c]: samples of class c held by client k.
inline std::vector<std::vector<std::size_t>> shard_class_counts(
    const Dataset& ds, std::span<const ClientShard> shards) {
  std::vector<std::vector<std::size_t>> counts;
  counts.reserve(shards.size());
  for (const auto& s : shards) {
    std::vector<std::size_t> row(ds.class_count, 0);
    for (std::size_t i : s.sample_indices) ++row[ds.labels[i]];
    counts.push_back(std::move(row));
  }
  return counts;
}

// {"clients": [{"client_id": 0, "indices": [...]}, ...]}
inline nlohmann::json shards_to_json(std::span<const ClientShard> shards) {
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& s : shards) {
    clients.push_back({{"client_id", s.client_id}, {"indices", s.sample_indices}});
  }
  return {{"clients", std::move(clients)}};
}

inline std::vector<ClientShard> shards_from_json(const nlohmann::json& j) {
  std::vector<ClientShard> shards;
  for (const auto& c : j.at("clients")) {
    ClientShard s;
    s.client_id = c.at("client_id").get<std::size_t>();
    s.sample_indices = c.at("indices").get<std::vector<std::size_t>>();
    shards.push_back(std::move(s));
  }
  return shards;
}

}  // namespace fedpkd
