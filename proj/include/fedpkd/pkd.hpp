#pragma once

// Expert training on weak-class groups, trigger routing, the partial
// distillation loss and the three-stage pipeline with its cost ledger.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedpkd/data.hpp"
#include "fedpkd/error.hpp"
#include "fedpkd/fed.hpp"
#include "fedpkd/nn.hpp"
#include "fedpkd/partition.hpp"
#include "fedpkd/weakdetect.hpp"

namespace fedpkd {

// A model with the global architecture except for a |group|-wide output layer.
struct Expert {
  ClassGroup group;                     // ascending global classes
  ModelParams model;
  std::vector<std::size_t> index_map;   // global class -> output position, or kNoClass

  std::size_t position(std::size_t global_class) const {
    return global_class < index_map.size() ? index_map[global_class] : kNoClass;
  }
};

inline std::vector<LayerShape> expert_layers(std::vector<LayerShape> global_layers,
                                             std::size_t group_size) {
  if (global_layers.empty()) throw InvalidArgument("expert_layers: empty model");
  global_layers.back().out = group_size;
  return global_layers;
}

struct TriggerRecord {
  std::size_t sample = 0;
  std::size_t true_class = 0;
  std::size_t predicted = 0;
  std::optional<std::size_t> expert;

  friend bool operator==(const TriggerRecord&, const TriggerRecord&) = default;
};

// How a misclassified sample picks among several groups that contain both
// its true and its predicted class.
enum class RoutePolicy {
  LowestIndex,    // first such group in group order
  SmallestGroup,  // the most specific such group; ties go to the lower index
};

inline std::string_view to_string(RoutePolicy p) {
  return p == RoutePolicy::LowestIndex ? "lowest-index" : "smallest-group";
}

inline RoutePolicy parse_route_policy(std::string_view s) {
  if (s == "lowest-index") return RoutePolicy::LowestIndex;
  if (s == "smallest-group") return RoutePolicy::SmallestGroup;
  throw InvalidArgument("unknown route policy '" + std::string(s) + "'");
}

// One record per sample. A misclassified sample is routed to at most one
// group containing both its true and its predicted class; correctly
// classified samples never trigger.
inline std::vector<TriggerRecord> route(std::span<const std::size_t> preds,
                                        std::span<const std::size_t> labels,
                                        std::span<const ClassGroup> groups,
                                        RoutePolicy policy = RoutePolicy::LowestIndex) {
  if (preds.size() != labels.size()) throw InvalidArgument("route: preds/labels length mismatch");
  auto contains = [](const ClassGroup& g, std::size_t c) {
    return std::find(g.begin(), g.end(), c) != g.end();
  };
  std::vector<TriggerRecord> out(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    out[i] = {i, labels[i], preds[i], std::nullopt};
    if (preds[i] == labels[i]) continue;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      if (!contains(groups[g], labels[i]) || !contains(groups[g], preds[i])) continue;
      if (!out[i].expert) {
        out[i].expert = g;
        if (policy == RoutePolicy::LowestIndex) break;
      } else if (groups[g].size() < groups[*out[i].expert].size()) {
        out[i].expert = g;
      }
    }
  }
  return out;
}

// Teacher side of the distillation target: the expert's tempered softmax on
// the sample, aligned to the student's outputs via the expert's group.
inline DistillTarget expert_target(const Expert& expert, std::span<const double> input,
                                   double temperature) {
  return {expert.group, softmax_t(forward(expert.model, input).logits, temperature)};
}

// D_KL between the student's softmax restricted to the expert's classes and
// the expert's softmax, both at temperature T. Student-first by default.
inline double pkd_loss(std::span<const double> student_logits, const Expert& expert,
                       std::span<const double> input, double temperature,
                       KlDirection direction = KlDirection::StudentTeacher) {
  return distill_divergence(student_logits, expert_target(expert, input, temperature),
                            temperature, direction);
}

struct DistillSettings {
  double lambda = 1.0;
  double temperature = 5.0;
  KlDirection direction = KlDirection::StudentTeacher;
  RoutePolicy routing = RoutePolicy::LowestIndex;
};

struct CombinedLoss {
  LossGrad grad;
  std::vector<TriggerRecord> records;
  std::size_t triggered = 0;
};

// Mean cross-entropy plus lambda times the mean PKD term over the samples that
// triggered an expert. Triggers come from the student's current predictions.
inline CombinedLoss combined_loss(const Batch& batch, const ModelParams& student,
                                  std::span<const Expert> experts,
                                  const DistillSettings& settings) {
  std::vector<std::size_t> preds(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    preds[i] = argmax(forward(student, batch.inputs[i]).logits);
  }
  std::vector<ClassGroup> groups;
  groups.reserve(experts.size());
  for (const auto& e : experts) groups.push_back(e.group);

  CombinedLoss out;
  out.records = route(preds, batch.labels, groups, settings.routing);
  LossSpec spec;
  spec.lambda = settings.lambda;
  spec.temperature = settings.temperature;
  spec.direction = settings.direction;
  for (const auto& r : out.records) {
    if (r.expert) ++out.triggered;
  }
  if (out.triggered > 0 && settings.lambda != 0.0) {
    spec.targets.resize(batch.size());
    for (const auto& r : out.records) {
      if (r.expert) {
        spec.targets[r.sample] =
            expert_target(experts[*r.expert], batch.inputs[r.sample], settings.temperature);
      }
    }
  }
  out.grad = backward(student, batch, spec);
  return out;
}

// Local objective for Stage 3. Experts are read-only.
struct PkdObjective {
  std::span<const Expert> experts;
  DistillSettings settings;

  StepResult step(const ModelParams& model, const Batch& batch) const {
    CombinedLoss c = combined_loss(batch, model, experts, settings);
    double extra = 0.0;
    if (settings.lambda != 0.0) {
      for (const auto& r : c.records) {
        if (r.expert) extra += forward_flops(experts[*r.expert].model.layers());
      }
    }
    return {std::move(c.grad), c.triggered, extra};
  }
};

struct ExpertRun {
  Expert expert;
  std::vector<RoundMetrics> trace;  // accuracy over the group's test samples
};

// Federated training of one expert per group on label-remapped client data.
// Clients without samples of a group sit out (weight 0).
inline std::vector<ExpertRun> train_experts(std::span<const ClassGroup> groups,
                                            const Dataset& train,
                                            std::span<const ClientShard> shards,
                                            const Dataset& test,
                                            const std::vector<LayerShape>& global_layers,
                                            const FedConfig& cfg) {
  if (groups.empty()) throw InvalidArgument("train_experts: no groups");
  std::vector<ExpertRun> runs;
  for (const auto& group : groups) {
    auto remapped = remap_labels_indexed(train, group);
    if (remapped.data.size() == 0) {
      throw InvalidArgument("train_experts: group has no training samples");
    }
    std::vector<std::size_t> new_index(train.size(), kNoClass);
    for (std::size_t i = 0; i < remapped.source_index.size(); ++i) {
      new_index[remapped.source_index[i]] = i;
    }
    std::vector<ClientShard> group_shards;
    group_shards.reserve(shards.size());
    for (const auto& s : shards) {
      ClientShard gs{s.client_id, {}};
      for (std::size_t i : s.sample_indices) {
        if (new_index[i] != kNoClass) gs.sample_indices.push_back(new_index[i]);
      }
      group_shards.push_back(std::move(gs));
    }
    const Dataset group_test = remap_labels(test, group);
    auto init = initial_model(expert_layers(global_layers, group.size()), cfg.seed);
    auto fed = run_fedavg(remapped.data, group_shards, group_test, cfg, std::move(init),
                          CrossEntropyObjective{});
    ExpertRun run;
    run.expert.group = group;
    run.expert.model = std::move(fed.model);
    run.expert.index_map = group_index_map(group, train.class_count);
    run.trace = std::move(fed.trace);
    runs.push_back(std::move(run));
  }
  return runs;
}

// Per-round cost model. U is one baseline round; stage costs are per round.
struct FlopLedger {
  double u_fp = 0.0;  // per-sample forward
  double u_bp = 0.0;  // per-sample backward
  double U = 0.0;     // E * N * (u_fp + u_bp)
  double u_t1 = 0.0;
  double u_t2 = 0.0;  // E_exp * sum(n_g) * (u_fp + u_bp)
  std::size_t local_epochs = 0;
  std::size_t expert_epochs = 0;
  std::size_t total_samples = 0;  // N
  std::size_t group_samples = 0;  // sum over groups of n_g
  std::vector<std::size_t> n_kd_per_round;
  std::vector<double> u_t3_exact;   // U + n_kd * u_fp
  std::vector<double> u_t3_approx;  // (1 + n_kd / (3 E N)) * U

  double kd_ratio(std::size_t t) const {
    return static_cast<double>(n_kd_per_round[t]) /
           (static_cast<double>(local_epochs) * static_cast<double>(total_samples));
  }
};

struct OverheadInputs {
  double u_fp = 0.0;
  double u_bp = 0.0;
  std::size_t local_epochs = 1;   // E
  std::size_t expert_epochs = 1;  // E_exp
  std::size_t total_samples = 0;  // N
};

inline OverheadInputs overhead_inputs(std::span<const LayerShape> layers, std::size_t local_epochs,
                                      std::size_t expert_epochs, std::size_t total_samples) {
  return {forward_flops(layers), backward_flops(layers), local_epochs, expert_epochs,
          total_samples};
}

inline FlopLedger account_flops(const OverheadInputs& in,
                                std::span<const std::size_t> group_sample_counts,
                                std::span<const std::size_t> n_kd_per_round) {
  if (in.local_epochs == 0 || in.total_samples == 0) {
    throw InvalidArgument("account_flops: E and N must be positive");
  }
  FlopLedger l;
  l.u_fp = in.u_fp;
  l.u_bp = in.u_bp;
  l.local_epochs = in.local_epochs;
  l.expert_epochs = in.expert_epochs;
  l.total_samples = in.total_samples;
  const double per_sample = in.u_fp + in.u_bp;
  l.U = static_cast<double>(in.local_epochs) * static_cast<double>(in.total_samples) * per_sample;
  l.u_t1 = l.U;
  for (std::size_t n : group_sample_counts) l.group_samples += n;
  l.u_t2 = static_cast<double>(in.expert_epochs) * static_cast<double>(l.group_samples) * per_sample;
  l.n_kd_per_round.assign(n_kd_per_round.begin(), n_kd_per_round.end());
  const double en = static_cast<double>(in.local_epochs) * static_cast<double>(in.total_samples);
  for (std::size_t n : n_kd_per_round) {
    const double nkd = static_cast<double>(n);
    l.u_t3_exact.push_back(l.U + nkd * in.u_fp);
    l.u_t3_approx.push_back((1.0 + nkd / (3.0 * en)) * l.U);
  }
  return l;
}

// round, n_kd, n_kd_over_EN, u_t3_exact, u_t3_approx
inline void write_flops_csv(std::ostream& os, const FlopLedger& ledger,
                            std::size_t first_round) {
  os << "round,n_kd,n_kd_over_EN,u_t3_exact,u_t3_approx\n";
  const auto saved = os.precision(6);
  for (std::size_t t = 0; t < ledger.n_kd_per_round.size(); ++t) {
    os << first_round + t + 1 << ',' << ledger.n_kd_per_round[t] << ',' << ledger.kd_ratio(t)
       << ',' << ledger.u_t3_exact[t] << ',' << ledger.u_t3_approx[t] << '\n';
  }
  os.precision(saved);
}

struct PkdConfig {
  std::size_t warmup_rounds = 20;
  std::size_t expert_rounds = 25;
  std::size_t expert_epochs = 5;
  std::optional<double> theta;  // nullopt: default_threshold()
  std::size_t max_groups = 2;
  DistillSettings distill;
};

struct PipelineConfig {
  FedConfig fed;  // fed.rounds counts warmup + PKD rounds
  std::vector<std::size_t> hidden{32};
  PkdConfig pkd;

  void validate() const {
    fed.validate();
    if (pkd.warmup_rounds > fed.rounds) {
      throw InvalidArgument("pkd.warmup_rounds exceeds fed.rounds");
    }
    if (pkd.expert_epochs < 1) throw InvalidArgument("pkd.expert_epochs must be >= 1");
    if (pkd.max_groups < 1) throw InvalidArgument("pkd.max_groups must be >= 1");
    if (pkd.theta && !(*pkd.theta > 0.0)) throw InvalidArgument("pkd.theta must be > 0");
    if (!(pkd.distill.lambda >= 0.0)) throw InvalidArgument("pkd.lambda must be >= 0");
    if (!(pkd.distill.temperature > 0.0)) throw InvalidArgument("pkd.temperature must be > 0");
  }
};

struct PipelineResult {
  ModelParams model;
  std::vector<RoundMetrics> trace;  // warmup rounds followed by PKD rounds
  ConfusionStats confusion;         // training-shard confusion after warmup
  SquareMatrix misclassification;
  SquareMatrix feature_distances;   // diagnostic, on the training set after warmup
  double theta = 0.0;
  std::vector<ClassGroup> detected_groups;
  std::vector<ClassGroup> groups;   // after the max_groups cap
  std::vector<ExpertRun> experts;
  FlopLedger ledger;
  std::vector<std::string> warnings;
};

inline std::vector<LayerShape> model_layers(const Dataset& train, const PipelineConfig& cfg) {
  return mlp_layers(train.dim, cfg.hidden, train.class_count);
}

// Plain FedAvg for the same total number of rounds; the comparison baseline.
inline FedResult run_baseline(const Dataset& train, std::span<const ClientShard> shards,
                              const Dataset& test, const PipelineConfig& cfg) {
  cfg.validate();
  return run_fedavg(train, shards, test, cfg.fed,
                    initial_model(model_layers(train, cfg), cfg.fed.seed), CrossEntropyObjective{});
}

// Stage 1 warmup FedAvg, group detection on the training shards, Stage 2
// federated expert training, Stage 3 FedAvg with the PKD loss continued from
// the warmup model. Without groups Stage 3 falls back to plain FedAvg.
inline PipelineResult run_pipeline(const Dataset& train, std::span<const ClientShard> shards,
                                   const Dataset& test, const PipelineConfig& cfg) {
  cfg.validate();
  const auto layers = model_layers(train, cfg);
  PipelineResult res;

  FedConfig warm = cfg.fed;
  warm.rounds = cfg.pkd.warmup_rounds;
  auto stage1 = run_fedavg(train, shards, test, warm, initial_model(layers, cfg.fed.seed),
                           CrossEntropyObjective{});
  res.trace = std::move(stage1.trace);

  res.confusion = collect_confusion(stage1.model, train, shards);
  res.misclassification = misclassification_probabilities(res.confusion);
  res.feature_distances = feature_distance_matrix(stage1.model, train);
  res.theta = cfg.pkd.theta.value_or(default_threshold(res.misclassification));
  res.detected_groups = detect_groups(res.misclassification, res.theta);
  std::vector<double> train_acc(train.class_count);
  for (std::size_t c = 0; c < train.class_count; ++c) train_acc[c] = res.misclassification(c, c);
  res.groups = select_worst_groups(res.detected_groups, train_acc, cfg.pkd.max_groups);

  FedConfig stage3 = cfg.fed;
  stage3.rounds = cfg.fed.rounds - cfg.pkd.warmup_rounds;
  FedResult final_run;
  if (res.groups.empty()) {
    res.warnings.push_back("no weak-class groups detected at theta " + std::to_string(res.theta) +
                           "; continuing with plain FedAvg");
    final_run = run_fedavg(train, shards, test, stage3, std::move(stage1.model),
                           CrossEntropyObjective{}, cfg.pkd.warmup_rounds);
  } else {
    FedConfig expert_cfg = cfg.fed;
    expert_cfg.rounds = cfg.pkd.expert_rounds;
    expert_cfg.local_epochs = cfg.pkd.expert_epochs;
    res.experts = train_experts(res.groups, train, shards, test, layers, expert_cfg);
    std::vector<Expert> experts;
    for (const auto& r : res.experts) experts.push_back(r.expert);
    final_run = run_fedavg(train, shards, test, stage3, std::move(stage1.model),
                           PkdObjective{experts, cfg.pkd.distill}, cfg.pkd.warmup_rounds);
  }
  res.model = std::move(final_run.model);
  std::vector<std::size_t> n_kd;
  for (auto& m : final_run.trace) {
    n_kd.push_back(m.n_kd);
    res.trace.push_back(std::move(m));
  }

  const auto counts = train.class_counts();
  std::vector<std::size_t> group_samples;
  for (const auto& g : res.groups) {
    std::size_t n = 0;
    for (std::size_t c : g) n += counts[c];
    group_samples.push_back(n);
  }
  res.ledger = account_flops(
      overhead_inputs(layers, cfg.fed.local_epochs, cfg.pkd.expert_epochs, train.size()),
      group_samples, n_kd);
  return res;
}

}  // namespace fedpkd
