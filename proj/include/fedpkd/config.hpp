#pragma once

// Run configuration: one JSON document describing the dataset, partition,
// federated schedule, model and PKD settings, plus the seeds to run. Unknown
// keys are rejected so that typos never silently fall back to defaults.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedpkd/data.hpp"
#include "fedpkd/error.hpp"
#include "fedpkd/partition.hpp"
#include "fedpkd/pkd.hpp"

namespace fedpkd {

// A configuration value that is missing, mistyped or out of range. `field`
// is the dotted path of the offending key, e.g. "partition.alpha".
class ConfigError : public InvalidArgument {
 public:
  ConfigError(std::string field, const std::string& what)
      : InvalidArgument(field + ": " + what), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

enum class DatasetKind { Benchmark, Synthetic, Idx };

struct IdxFiles {
  std::string root;
  std::string train_images = "train-images-idx3-ubyte";
  std::string train_labels = "train-labels-idx1-ubyte";
  std::string test_images = "t10k-images-idx3-ubyte";
  std::string test_labels = "t10k-labels-idx1-ubyte";
};

struct DatasetConfig {
  DatasetKind kind = DatasetKind::Benchmark;
  BenchmarkSpec benchmark;          // kind == Benchmark
  SyntheticSpec synthetic;          // kind == Synthetic (train split)
  std::size_t test_per_class = 100; // kind == Synthetic
  IdxFiles idx;                     // kind == Idx
  std::uint64_t seed = 1000;        // data seed for run seed s is seed + s
};

struct RunConfig {
  std::string name = "run";
  DatasetConfig dataset;
  PartitionSpec partition;     // partition seed for run seed s is seed + s
  PipelineConfig pipeline;     // fed.seed is set to the run seed
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "runs";
};

namespace detail {

class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  // Rejects any key not in `allowed`.
  void only(std::initializer_list<std::string_view> allowed) const {
    for (const auto& [key, value] : j_.items()) {
      bool ok = false;
      for (auto a : allowed) ok = ok || key == a;
      if (!ok) throw ConfigError(field(key), "unknown key");
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  static bool non_negative_integer(const nlohmann::json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  }

  template <class T>
  void read(const std::string& key, T& out) const {
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    // nlohmann converts -1 to a huge unsigned value; refuse instead.
    if constexpr (std::is_unsigned_v<T>) {
      if (!non_negative_integer(v)) throw ConfigError(field(key), "must be a non-negative integer");
    } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
      if (!v.is_array()) throw ConfigError(field(key), "must be a list of non-negative integers");
      for (const auto& e : v) {
        if (!non_negative_integer(e)) {
          throw ConfigError(field(key), "must be a list of non-negative integers");
        }
      }
    }
    try {
      out = v.get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(field(key), "has the wrong type");
    }
  }

  ObjectReader child(const std::string& key) const { return {j_.at(key), field(key)}; }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const nlohmann::json& json() const { return j_; }

 private:
  const nlohmann::json& j_;
  std::string path_;
};

inline void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field, what);
}

inline std::string_view to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::Benchmark: return "benchmark";
    case DatasetKind::Synthetic: return "synthetic";
    case DatasetKind::Idx: return "idx";
  }
  return "?";
}

inline std::string_view to_string(KlDirection d) {
  return d == KlDirection::StudentTeacher ? "student-teacher" : "teacher-student";
}

inline void parse_dataset(const ObjectReader& r, DatasetConfig& d) {
  std::string kind = "benchmark";
  r.read("kind", kind);
  r.read("seed", d.seed);
  if (kind == "benchmark") {
    r.only({"kind", "seed", "class_count", "dim", "train_per_class", "test_per_class", "stddev",
            "group_spacing", "separation"});
    d.kind = DatasetKind::Benchmark;
    auto& b = d.benchmark;
    r.read("class_count", b.class_count);
    r.read("dim", b.dim);
    r.read("train_per_class", b.train_per_class);
    r.read("test_per_class", b.test_per_class);
    r.read("stddev", b.stddev);
    r.read("group_spacing", b.group_spacing);
    r.read("separation", b.separation);
    require(b.class_count >= 7, r.field("class_count"), "must be >= 7 for the planted groups");
    require(b.dim >= b.class_count - 2, r.field("dim"), "must be >= class_count - 2");
    require(b.train_per_class >= 1, r.field("train_per_class"), "must be >= 1");
    require(b.test_per_class >= 1, r.field("test_per_class"), "must be >= 1");
    require(b.stddev > 0.0, r.field("stddev"), "must be > 0");
    require(b.group_spacing > 0.0, r.field("group_spacing"), "must be > 0");
    require(b.separation > 0.0, r.field("separation"), "must be > 0");
  } else if (kind == "synthetic") {
    r.only({"kind", "seed", "class_means", "samples_per_class", "test_per_class", "stddev"});
    d.kind = DatasetKind::Synthetic;
    auto& s = d.synthetic;
    require(r.has("class_means"), r.field("class_means"), "is required");
    r.read("class_means", s.class_means);
    r.read("samples_per_class", s.samples_per_class);
    r.read("test_per_class", d.test_per_class);
    r.read("stddev", s.within_class_stddev);
    s.class_count = s.class_means.size();
    s.dim = s.class_means.empty() ? 0 : s.class_means.front().size();
    require(s.class_count >= 2, r.field("class_means"), "needs at least two classes");
    for (const auto& m : s.class_means) {
      require(m.size() == s.dim && s.dim > 0, r.field("class_means"),
              "rows must be non-empty and of equal length");
    }
    require(s.samples_per_class >= 1, r.field("samples_per_class"), "must be >= 1");
    require(d.test_per_class >= 1, r.field("test_per_class"), "must be >= 1");
    require(s.within_class_stddev > 0.0, r.field("stddev"), "must be > 0");
  } else if (kind == "idx") {
    r.only({"kind", "seed", "root", "train_images", "train_labels", "test_images", "test_labels"});
    d.kind = DatasetKind::Idx;
    r.read("root", d.idx.root);
    r.read("train_images", d.idx.train_images);
    r.read("train_labels", d.idx.train_labels);
    r.read("test_images", d.idx.test_images);
    r.read("test_labels", d.idx.test_labels);
  } else {
    throw ConfigError(r.field("kind"), "must be one of benchmark, synthetic, idx");
  }
}

inline void parse_partition(const ObjectReader& r, PartitionSpec& p) {
  r.only({"strategy", "client_count", "classes_per_client", "alpha", "seed"});
  std::string strategy(to_string(p.strategy));
  r.read("strategy", strategy);
  try {
    p.strategy = parse_strategy(strategy);
  } catch (const InvalidArgument&) {
    throw ConfigError(r.field("strategy"), "must be one of local-balanced, pathological, dirichlet");
  }
  r.read("client_count", p.client_count);
  r.read("classes_per_client", p.classes_per_client);
  r.read("alpha", p.alpha);
  r.read("seed", p.seed);
  require(p.client_count >= 1, r.field("client_count"), "must be >= 1");
  require(p.classes_per_client >= 1, r.field("classes_per_client"), "must be >= 1");
  require(p.alpha > 0.0, r.field("alpha"), "must be > 0");
}

inline void parse_fed(const ObjectReader& r, FedConfig& f) {
  r.only({"rounds", "client_fraction", "local_epochs", "batch_size", "learning_rate"});
  r.read("rounds", f.rounds);
  r.read("client_fraction", f.client_fraction);
  r.read("local_epochs", f.local_epochs);
  r.read("batch_size", f.batch_size);
  r.read("learning_rate", f.learning_rate);
  require(f.client_fraction > 0.0 && f.client_fraction <= 1.0, r.field("client_fraction"),
          "must be in (0, 1]");
  require(f.local_epochs >= 1, r.field("local_epochs"), "must be >= 1");
  require(f.batch_size >= 1, r.field("batch_size"), "must be >= 1");
  require(f.learning_rate >= 0.0 && std::isfinite(f.learning_rate), r.field("learning_rate"),
          "must be finite and >= 0");
}

inline void parse_pkd(const ObjectReader& r, PkdConfig& p, std::size_t rounds) {
  r.only({"warmup_rounds", "expert_rounds", "expert_epochs", "theta", "max_groups", "lambda",
          "temperature", "kl_direction", "routing"});
  r.read("warmup_rounds", p.warmup_rounds);
  r.read("expert_rounds", p.expert_rounds);
  r.read("expert_epochs", p.expert_epochs);
  if (r.has("theta") && !r.json().at("theta").is_null()) {
    double theta = 0.0;
    r.read("theta", theta);
    require(theta > 0.0, r.field("theta"), "must be > 0 (or null for the automatic rule)");
    p.theta = theta;
  }
  r.read("max_groups", p.max_groups);
  r.read("lambda", p.distill.lambda);
  r.read("temperature", p.distill.temperature);
  std::string dir(to_string(p.distill.direction));
  r.read("kl_direction", dir);
  if (dir == "student-teacher") {
    p.distill.direction = KlDirection::StudentTeacher;
  } else if (dir == "teacher-student") {
    p.distill.direction = KlDirection::TeacherStudent;
  } else {
    throw ConfigError(r.field("kl_direction"), "must be student-teacher or teacher-student");
  }
  std::string routing(to_string(p.distill.routing));
  r.read("routing", routing);
  try {
    p.distill.routing = parse_route_policy(routing);
  } catch (const InvalidArgument&) {
    throw ConfigError(r.field("routing"), "must be lowest-index or smallest-group");
  }
  require(p.warmup_rounds <= rounds, r.field("warmup_rounds"), "must not exceed fed.rounds");
  require(p.expert_epochs >= 1, r.field("expert_epochs"), "must be >= 1");
  require(p.max_groups >= 1, r.field("max_groups"), "must be >= 1");
  require(p.distill.lambda >= 0.0, r.field("lambda"), "must be >= 0");
  require(p.distill.temperature > 0.0, r.field("temperature"), "must be > 0");
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& j) {
  RunConfig cfg;
  const detail::ObjectReader root(j, "");
  root.only({"name", "dataset", "partition", "fed", "model", "pkd", "seeds", "output_dir"});
  root.read("name", cfg.name);
  root.read("output_dir", cfg.output_dir);
  if (root.has("dataset")) detail::parse_dataset(root.child("dataset"), cfg.dataset);
  if (root.has("partition")) detail::parse_partition(root.child("partition"), cfg.partition);
  if (root.has("fed")) detail::parse_fed(root.child("fed"), cfg.pipeline.fed);
  if (root.has("model")) {
    const auto m = root.child("model");
    m.only({"hidden"});
    m.read("hidden", cfg.pipeline.hidden);
    for (std::size_t h : cfg.pipeline.hidden) detail::require(h >= 1, m.field("hidden"), "widths must be >= 1");
  }
  if (root.has("pkd")) {
    detail::parse_pkd(root.child("pkd"), cfg.pipeline.pkd, cfg.pipeline.fed.rounds);
  } else {
    detail::require(cfg.pipeline.pkd.warmup_rounds <= cfg.pipeline.fed.rounds, "pkd.warmup_rounds",
                    "must not exceed fed.rounds");
  }
  root.read("seeds", cfg.seeds);
  detail::require(!cfg.seeds.empty(), "seeds", "must list at least one seed");
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    // nlohmann counts bytes from 1; offsets here are 0-based like the IDX reader's.
    throw ParseError(path.string(), e.byte > 0 ? e.byte - 1 : 0, "invalid JSON");
  }
  return parse_config(j);
}

// Fully resolved configuration, defaults included.
inline nlohmann::json to_json(const RunConfig& cfg) {
  nlohmann::json ds{{"kind", detail::to_string(cfg.dataset.kind)}, {"seed", cfg.dataset.seed}};
  switch (cfg.dataset.kind) {
    case DatasetKind::Benchmark: {
      const auto& b = cfg.dataset.benchmark;
      ds.update({{"class_count", b.class_count}, {"dim", b.dim},
                 {"train_per_class", b.train_per_class}, {"test_per_class", b.test_per_class},
                 {"stddev", b.stddev}, {"group_spacing", b.group_spacing},
                 {"separation", b.separation}});
      break;
    }
    case DatasetKind::Synthetic: {
      const auto& s = cfg.dataset.synthetic;
      ds.update({{"class_means", s.class_means}, {"samples_per_class", s.samples_per_class},
                 {"test_per_class", cfg.dataset.test_per_class},
                 {"stddev", s.within_class_stddev}});
      break;
    }
    case DatasetKind::Idx: {
      const auto& f = cfg.dataset.idx;
      ds.update({{"root", f.root}, {"train_images", f.train_images},
                 {"train_labels", f.train_labels}, {"test_images", f.test_images},
                 {"test_labels", f.test_labels}});
      break;
    }
  }
  const auto& p = cfg.partition;
  const auto& f = cfg.pipeline.fed;
  const auto& k = cfg.pipeline.pkd;
  return {
      {"name", cfg.name},
      {"dataset", ds},
      {"partition",
       {{"strategy", to_string(p.strategy)}, {"client_count", p.client_count},
        {"classes_per_client", p.classes_per_client}, {"alpha", p.alpha}, {"seed", p.seed}}},
      {"fed",
       {{"rounds", f.rounds}, {"client_fraction", f.client_fraction},
        {"local_epochs", f.local_epochs}, {"batch_size", f.batch_size},
        {"learning_rate", f.learning_rate}}},
      {"model", {{"hidden", cfg.pipeline.hidden}}},
      {"pkd",
       {{"warmup_rounds", k.warmup_rounds}, {"expert_rounds", k.expert_rounds},
        {"expert_epochs", k.expert_epochs},
        {"theta", k.theta ? nlohmann::json(*k.theta) : nlohmann::json(nullptr)},
        {"max_groups", k.max_groups}, {"lambda", k.distill.lambda},
        {"temperature", k.distill.temperature},
        {"kl_direction", detail::to_string(k.distill.direction)},
        {"routing", to_string(k.distill.routing)}}},
      {"seeds", cfg.seeds},
      {"output_dir", cfg.output_dir},
  };
}

// 64-bit FNV-1a of the canonical (sorted-key, compact) JSON text, as hex.
inline std::string config_hash(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = kHex[h & 0xf];
  return out;
}

// FEDPKD_DATA_DIR, when set, replaces the configured IDX root.
inline std::filesystem::path data_root(const IdxFiles& files) {
  if (const char* env = std::getenv("FEDPKD_DATA_DIR"); env != nullptr && *env != '\0') {
    return env;
  }
  return files.root;
}

inline TrainTest load_dataset(const DatasetConfig& d, std::uint64_t run_seed) {
  switch (d.kind) {
    case DatasetKind::Benchmark: {
      BenchmarkSpec b = d.benchmark;
      b.seed = d.seed + run_seed;
      return make_benchmark(b);
    }
    case DatasetKind::Synthetic: {
      SyntheticSpec s = d.synthetic;
      TrainTest out;
      s.seed = derive_seed(d.seed + run_seed, {0});
      s.name = "synthetic-train";
      out.train = generate_synthetic(s);
      s.seed = derive_seed(d.seed + run_seed, {1});
      s.samples_per_class = d.test_per_class;
      s.name = "synthetic-test";
      out.test = generate_synthetic(s);
      return out;
    }
    case DatasetKind::Idx: {
      const auto root = data_root(d.idx);
      TrainTest out;
      out.train = load_idx(root / d.idx.train_images, root / d.idx.train_labels);
      out.test = load_idx(root / d.idx.test_images, root / d.idx.test_labels);
      const std::size_t c = std::max(out.train.class_count, out.test.class_count);
      out.train.class_count = c;
      out.test.class_count = c;
      return out;
    }
  }
  throw InvalidArgument("unknown dataset kind");
}

inline PartitionSpec partition_for_seed(const RunConfig& cfg, std::uint64_t run_seed) {
  PartitionSpec p = cfg.partition;
  p.seed = cfg.partition.seed + run_seed;
  return p;
}

inline PipelineConfig pipeline_for_seed(const RunConfig& cfg, std::uint64_t run_seed) {
  PipelineConfig p = cfg.pipeline;
  p.fed.seed = run_seed;
  return p;
}

}  // namespace fedpkd
