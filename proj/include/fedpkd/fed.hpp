#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedpkd/data.hpp"
#include "fedpkd/error.hpp"
#include "fedpkd/nn.hpp"
#include "fedpkd/partition.hpp"
#include "fedpkd/rng.hpp"

namespace fedpkd {

struct FedConfig {
  std::size_t rounds = 100;
  double client_fraction = 1.0;
  std::size_t local_epochs = 5;
  std::size_t batch_size = 50;
  double learning_rate = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(client_fraction > 0.0 && client_fraction <= 1.0)) {
      throw InvalidArgument("fed.client_fraction must be in (0, 1]");
    }
    if (local_epochs < 1) throw InvalidArgument("fed.local_epochs must be >= 1");
    if (batch_size < 1) throw InvalidArgument("fed.batch_size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw InvalidArgument("fed.learning_rate must be finite and >= 0");
    }
  }
};

struct ClassAccuracy {
  std::vector<double> per_class;
  double max = 0.0;
  double ave = 0.0;  // unweighted mean over classes
  double min = 0.0;
  double icd = 0.0;  // max - min

  std::size_t worst_class() const {
    return static_cast<std::size_t>(std::min_element(per_class.begin(), per_class.end()) -
                                    per_class.begin());
  }
};

struct RoundMetrics {
  std::size_t round = 0;
  ClassAccuracy accuracy;
  double flops = 0.0;     // FLOPs executed by all participating clients
  std::size_t n_kd = 0;   // samples that activated an expert this round
};

// Fresh MLP for a run seeded with `seed`.
inline ModelParams initial_model(std::vector<LayerShape> layers, std::uint64_t seed) {
  return ModelParams::initialized(std::move(layers), derive_seed(seed, {stream::kInit}));
}

// ceil(f*K) distinct clients, ascending, uniform without replacement.
inline std::vector<std::size_t> sample_clients(std::size_t round, std::size_t total,
                                               double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw InvalidArgument("client fraction must be in (0, 1]");
  }
  std::vector<std::size_t> ids(total);
  std::iota(ids.begin(), ids.end(), 0);
  const auto m = std::min<std::size_t>(
      total, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(total) - 1e-9)));
  if (m == total) return ids;
  Rng rng(derive_seed(seed, {stream::kSampling, round}));
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(total - i));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// What one local SGD step needs from a loss: gradient plus bookkeeping.
struct StepResult {
  LossGrad grad;
  std::size_t triggered = 0;   // samples that activated an expert
  double extra_flops = 0.0;    // work beyond the student's own forward/backward
};

template <class O>
concept LocalObjective = requires(const O& o, const ModelParams& m, const Batch& b) {
  { o.step(m, b) } -> std::same_as<StepResult>;
};

// Plain mean cross-entropy.
struct CrossEntropyObjective {
  StepResult step(const ModelParams& model, const Batch& batch) const {
    return {backward(model, batch, LossSpec{}), 0, 0.0};
  }
};

struct LocalStats {
  std::size_t sample_count = 0;
  std::size_t steps = 0;
  std::vector<std::size_t> batch_triggers;
  std::size_t n_kd = 0;
  double flops = 0.0;
};

struct LocalResult {
  ModelParams model;
  LocalStats stats;
};

inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  Batch b;
  b.inputs.reserve(indices.size());
  b.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    b.inputs.push_back(ds.row(i));
    b.labels.push_back(ds.labels[i]);
  }
  return b;
}

// E epochs of minibatch SGD over the shard, reshuffled each epoch from the
// (seed, client_id, round) stream; the last partial batch is kept.
template <LocalObjective Objective>
LocalResult local_train(const ModelParams& global, const Dataset& train, const ClientShard& shard,
                        const FedConfig& cfg, std::size_t round, const Objective& objective) {
  if (shard.empty()) throw InvalidArgument("local_train on an empty shard");
  cfg.validate();
  LocalResult out{global, {}};
  out.stats.sample_count = shard.size();
  const double per_sample = forward_flops(global.layers()) + backward_flops(global.layers());
  Rng rng(derive_seed(cfg.seed, {stream::kLocal, shard.client_id, round}));
  std::vector<std::size_t> order = shard.sample_indices;
  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    shuffle(std::span(order), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      const Batch batch = make_batch(train, std::span(order).subspan(start, len));
      StepResult step = objective.step(out.model, batch);
      apply_sgd(out.model, step.grad.gradient, cfg.learning_rate);
      ++out.stats.steps;
      out.stats.batch_triggers.push_back(step.triggered);
      out.stats.n_kd += step.triggered;
      out.stats.flops += static_cast<double>(len) * per_sample + step.extra_flops;
    }
  }
  return out;
}

// w = sum_k (n_k / sum n) w_k, accumulated in the given order. Models with
// zero count are ignored.
inline ModelParams aggregate(std::span<const ModelParams> models,
                             std::span<const std::size_t> sample_counts) {
  if (models.size() != sample_counts.size()) {
    throw InvalidArgument("aggregate: models/counts length mismatch");
  }
  const std::size_t total = std::accumulate(sample_counts.begin(), sample_counts.end(),
                                            std::size_t{0});
  if (total == 0) throw InvalidArgument("aggregate: total sample count is zero");
  ModelParams out;
  bool first = true;
  for (std::size_t k = 0; k < models.size(); ++k) {
    if (sample_counts[k] == 0) continue;
    if (!first && !models[k].same_shape(out)) {
      throw InvalidArgument("aggregate: model " + std::to_string(k) + " has a different shape");
    }
    const double weight = static_cast<double>(sample_counts[k]) / static_cast<double>(total);
    const auto src = models[k].values();
    if (first) {
      out = ModelParams(models[k].layers());
      auto dst = out.values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = weight * src[i];
      first = false;
    } else {
      auto dst = out.values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += weight * src[i];
    }
  }
  return out;
}

inline std::vector<std::size_t> predict(const ModelParams& model, const Dataset& ds) {
  std::vector<std::size_t> preds(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) preds[i] = argmax(forward(model, ds.row(i)).logits);
  return preds;
}

inline ClassAccuracy class_accuracy(std::span<const std::size_t> preds,
                                    std::span<const std::size_t> labels,
                                    std::size_t class_count) {
  if (preds.size() != labels.size()) throw InvalidArgument("preds/labels length mismatch");
  std::vector<std::size_t> correct(class_count, 0);
  std::vector<std::size_t> count(class_count, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++count[labels[i]];
    if (preds[i] == labels[i]) ++correct[labels[i]];
  }
  ClassAccuracy acc;
  acc.per_class.resize(class_count);
  for (std::size_t c = 0; c < class_count; ++c) {
    if (count[c] == 0) {
      throw InvalidArgument("evaluate: class " + std::to_string(c) + " absent from test set");
    }
    acc.per_class[c] = static_cast<double>(correct[c]) / static_cast<double>(count[c]);
  }
  acc.max = *std::max_element(acc.per_class.begin(), acc.per_class.end());
  acc.min = *std::min_element(acc.per_class.begin(), acc.per_class.end());
  acc.ave = std::accumulate(acc.per_class.begin(), acc.per_class.end(), 0.0) /
            static_cast<double>(class_count);
  acc.icd = acc.max - acc.min;
  return acc;
}

inline ClassAccuracy evaluate(const ModelParams& model, const Dataset& test) {
  if (test.size() == 0) throw InvalidArgument("evaluate: empty test set");
  const auto preds = predict(model, test);
  return class_accuracy(preds, test.labels, test.class_count);
}

struct FedResult {
  ModelParams model;
  std::vector<RoundMetrics> trace;
};

// R rounds of sample -> broadcast -> local_train -> aggregate -> evaluate.
// Round numbers start at first_round + 1; a run split into two calls with
// matching first_round is identical to one long run. Sampled clients with an
// empty shard are skipped; if all are empty the model is carried over.
template <LocalObjective Objective>
FedResult run_fedavg(const Dataset& train, std::span<const ClientShard> shards,
                     const Dataset& test, const FedConfig& cfg, ModelParams init,
                     const Objective& objective, std::size_t first_round = 0) {
  cfg.validate();
  FedResult result{std::move(init), {}};
  result.trace.reserve(cfg.rounds);
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    const std::size_t round = first_round + r + 1;
    const auto selected = sample_clients(round, shards.size(), cfg.client_fraction, cfg.seed);
    std::vector<ModelParams> local_models;
    std::vector<std::size_t> counts;
    RoundMetrics m;
    m.round = round;
    for (std::size_t k : selected) {
      if (shards[k].empty()) continue;
      LocalResult local = local_train(result.model, train, shards[k], cfg, round, objective);
      m.flops += local.stats.flops;
      m.n_kd += local.stats.n_kd;
      counts.push_back(local.stats.sample_count);
      local_models.push_back(std::move(local.model));
    }
    if (!local_models.empty()) result.model = aggregate(local_models, counts);
    m.accuracy = evaluate(result.model, test);
    result.trace.push_back(std::move(m));
  }
  return result;
}

// round, acc_class_0..C-1, max, ave, min, icd, flops, n_kd
inline void write_metrics_csv(std::ostream& os, std::span<const RoundMetrics> trace,
                              std::size_t class_count) {
  os << "round";
  for (std::size_t c = 0; c < class_count; ++c) os << ",acc_class_" << c;
  os << ",max,ave,min,icd,flops,n_kd\n";
  const auto saved = os.precision(6);
  for (const auto& m : trace) {
    os << m.round;
    for (double a : m.accuracy.per_class) os << ',' << a;
    os << ',' << m.accuracy.max << ',' << m.accuracy.ave << ',' << m.accuracy.min << ','
       << m.accuracy.icd << ',' << m.flops << ',' << m.n_kd << '\n';
  }
  os.precision(saved);
}

// Model blob, all integers little-endian:
//   "FPKDMDL1" | u32 header_len | JSON header | parameter_count x float64
// The JSON header carries {"format", "version", "activation", "dtype",
// "layers": [[in, out], ...], "parameter_count"}.
inline constexpr char kModelMagic[8] = {'F', 'P', 'K', 'D', 'M', 'D', 'L', '1'};

inline void save_model(std::ostream& os, const ModelParams& model) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& s : model.layers()) layers.push_back({s.in, s.out});
  const nlohmann::json header = {{"format", "fedpkd-model"},
                                 {"version", 1},
                                 {"activation", "relu"},
                                 {"dtype", "float64-le"},
                                 {"layers", layers},
                                 {"parameter_count", model.size()}};
  const std::string text = header.dump();
  os.write(kModelMagic, 8);
  const auto len = static_cast<std::uint32_t>(text.size());
  for (int b = 0; b < 4; ++b) os.put(static_cast<char>((len >> (8 * b)) & 0xff));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (double v : model.values()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) os.put(static_cast<char>((bits >> (8 * b)) & 0xff));
  }
}

inline ModelParams load_model(std::istream& is, const std::string& source = "<stream>") {
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kModelMagic)) {
    throw ParseError(source, 0, "bad model magic");
  }
  unsigned char lenbuf[4];
  if (!is.read(reinterpret_cast<char*>(lenbuf), 4)) throw ParseError(source, 8, "truncated");
  const std::uint32_t len = std::uint32_t{lenbuf[0]} | (std::uint32_t{lenbuf[1]} << 8) |
                            (std::uint32_t{lenbuf[2]} << 16) | (std::uint32_t{lenbuf[3]} << 24);
  std::string text(len, '\0');
  if (!is.read(text.data(), len)) throw ParseError(source, 12, "truncated header");
  const auto header = nlohmann::json::parse(text, nullptr, false);
  if (header.is_discarded() || !header.contains("layers")) {
    throw ParseError(source, 12, "malformed JSON header");
  }
  std::vector<LayerShape> layers;
  for (const auto& l : header["layers"]) layers.push_back({l.at(0).get<std::size_t>(), l.at(1).get<std::size_t>()});
  ModelParams model(std::move(layers));
  std::size_t offset = 12 + len;
  for (double& v : model.values()) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw ParseError(source, offset, "truncated payload");
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= std::uint64_t{b[k]} << (8 * k);
    v = std::bit_cast<double>(bits);
    offset += 8;
  }
  return model;
}

inline void save_model(const std::filesystem::path& path, const ModelParams& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  save_model(os, model);
}

inline ModelParams load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError(path.string(), 0, "cannot open file");
  return load_model(is, path.string());
}

}  // namespace fedpkd
