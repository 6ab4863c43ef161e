// fedpkd: run federated training experiments from a JSON config.
//
//   fedpkd partition --config c.json [--seeds 0,1] [--out dir]
//   fedpkd train     --config c.json --mode fedavg|pkd [--seeds 0,1] [--out dir]
//   fedpkd report    RUN_DIR... [--out table.csv]
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.

#include <algorithm>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "fedpkd/config.hpp"
#include "fedpkd/pkd.hpp"

#ifndef FEDPKD_VERSION_STRING
#define FEDPKD_VERSION_STRING "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace fedpkd::cli {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
  if (!os) throw Error("write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path.string());
  return json::parse(is);
}

std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

json accuracy_json(const ClassAccuracy& a) {
  return {{"per_class", a.per_class}, {"max", a.max},     {"ave", a.ave},
          {"min", a.min},             {"icd", a.icd},     {"worst_class", a.worst_class()}};
}

// Manifest written before any work ("incomplete") and rewritten on success.
class Manifest {
 public:
  Manifest(fs::path dir, json body) : path_(std::move(dir) / "manifest.json"), body_(std::move(body)) {
    body_["version"] = FEDPKD_VERSION_STRING;
    body_["status"] = "incomplete";
    body_["completed_seeds"] = json::array();
    flush();
  }

  json& body() { return body_; }

  void seed_done(std::uint64_t seed) {
    body_["completed_seeds"].push_back(seed);
    flush();
  }

  void fail(const std::string& message) {
    body_["status"] = "incomplete";
    body_["error"] = message;
    flush();
  }

  void complete() {
    body_["status"] = "complete";
    flush();
  }

 private:
  void flush() { write_json(path_, body_); }

  fs::path path_;
  json body_;
};

json manifest_base(const RunConfig& cfg, const std::string& command) {
  const json resolved = to_json(cfg);
  return {{"command", command}, {"config", resolved}, {"config_hash", config_hash(resolved)}};
}

int cmd_partition(const RunConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  Manifest manifest(out, manifest_base(cfg, "partition"));
  try {
    json per_seed = json::object();
    for (std::uint64_t seed : cfg.seeds) {
      const auto data = load_dataset(cfg.dataset, seed);
      const auto spec = partition_for_seed(cfg, seed);
      const auto shards = partition(data.train, spec);
      fs::create_directories(out / seed_dir(seed));
      write_json(out / seed_dir(seed) / "shards.json", shards_to_json(shards));
      json clients = json::array();
      const auto counts = shard_class_counts(data.train, shards);
      for (std::size_t k = 0; k < shards.size(); ++k) {
        clients.push_back({{"client_id", shards[k].client_id},
                           {"samples", shards[k].size()},
                           {"class_counts", counts[k]}});
      }
      per_seed[std::to_string(seed)] = {{"partition_seed", spec.seed}, {"clients", clients}};
      manifest.body()["partitions"] = per_seed;
      manifest.seed_done(seed);
      std::cerr << "partition: seed " << seed << " -> " << shards.size() << " clients\n";
    }
    manifest.complete();
  } catch (const std::exception& e) {
    manifest.fail(e.what());
    throw;
  }
  return 0;
}

struct SeedOutcome {
  ClassAccuracy final;
};

SeedOutcome train_seed(const RunConfig& cfg, const std::string& mode, std::uint64_t seed,
                       const fs::path& dir) {
  const auto data = load_dataset(cfg.dataset, seed);
  const auto shards = partition(data.train, partition_for_seed(cfg, seed));
  const auto pcfg = pipeline_for_seed(cfg, seed);
  fs::create_directories(dir);
  write_json(dir / "shards.json", shards_to_json(shards));

  std::vector<RoundMetrics> trace;
  ModelParams model;
  FlopLedger ledger;
  std::size_t ledger_first_round = 0;
  json groups;
  if (mode == "pkd") {
    auto res = run_pipeline(data.train, shards, data.test, pcfg);
    trace = std::move(res.trace);
    model = std::move(res.model);
    ledger = std::move(res.ledger);
    ledger_first_round = pcfg.pkd.warmup_rounds;
    groups = groups_to_json(res.groups, res.theta, pcfg.pkd.warmup_rounds);
    groups["detected_groups"] = res.detected_groups;
    groups["warnings"] = res.warnings;
    json experts = json::array();
    for (const auto& e : res.experts) {
      experts.push_back({{"group", e.expert.group},
                         {"final_accuracy", e.trace.empty() ? json(nullptr)
                                                            : accuracy_json(e.trace.back().accuracy)}});
    }
    groups["experts"] = experts;
    for (const auto& w : res.warnings) std::cerr << "warning: seed " << seed << ": " << w << "\n";
  } else {
    auto res = run_baseline(data.train, shards, data.test, pcfg);
    trace = std::move(res.trace);
    model = std::move(res.model);
    const std::vector<std::size_t> no_kd(trace.size(), 0);
    ledger = account_flops(overhead_inputs(model.layers(), pcfg.fed.local_epochs,
                                           pcfg.pkd.expert_epochs, data.train.size()),
                           std::vector<std::size_t>{}, no_kd);
  }

  {
    std::ostringstream os;
    write_metrics_csv(os, trace, data.test.class_count);
    write_text(dir / "metrics.csv", os.str());
  }
  {
    std::ostringstream os;
    write_flops_csv(os, ledger, ledger_first_round);
    write_text(dir / "flops.csv", os.str());
  }
  if (mode == "pkd") write_json(dir / "groups.json", groups);
  save_model(dir / "model.bin", model);

  SeedOutcome out;
  out.final = trace.empty() ? evaluate(model, data.test) : trace.back().accuracy;
  write_json(dir / "accuracy.json", {{"seed", seed},
                                     {"mode", mode},
                                     {"rounds", trace.size()},
                                     {"final", accuracy_json(out.final)}});
  return out;
}

void write_summary(const fs::path& path, const std::vector<std::uint64_t>& seeds,
                   const std::vector<ClassAccuracy>& finals) {
  std::ostringstream os;
  os << std::setprecision(6);
  os << "seed,max,ave,min,icd,worst_class\n";
  double mx = 0.0;
  double av = 0.0;
  double mn = 0.0;
  double icd = 0.0;
  for (std::size_t i = 0; i < finals.size(); ++i) {
    const auto& a = finals[i];
    os << seeds[i] << ',' << a.max << ',' << a.ave << ',' << a.min << ',' << a.icd << ','
       << a.worst_class() << '\n';
    mx += a.max;
    av += a.ave;
    mn += a.min;
    icd += a.icd;
  }
  const double n = static_cast<double>(finals.size());
  os << "mean," << mx / n << ',' << av / n << ',' << mn / n << ',' << icd / n << ",\n";
  write_text(path, os.str());
}

int cmd_train(const RunConfig& cfg, const std::string& mode, const fs::path& out) {
  fs::create_directories(out);
  json base = manifest_base(cfg, "train");
  base["mode"] = mode;
  Manifest manifest(out, base);
  try {
    std::vector<ClassAccuracy> finals;
    for (std::uint64_t seed : cfg.seeds) {
      std::cerr << "train[" << mode << "]: seed " << seed << " ...\n";
      const auto r = train_seed(cfg, mode, seed, out / seed_dir(seed));
      std::cerr << "train[" << mode << "]: seed " << seed << " ave " << r.final.ave << " min "
                << r.final.min << " icd " << r.final.icd << "\n";
      finals.push_back(r.final);
      manifest.seed_done(seed);
    }
    write_summary(out / "summary.csv", cfg.seeds, finals);
    manifest.complete();
  } catch (const std::exception& e) {
    manifest.fail(e.what());
    throw;
  }
  return 0;
}

struct RunSummary {
  std::string label;
  double max = 0.0;
  double ave = 0.0;
  double min = 0.0;
  double icd = 0.0;
  std::size_t worst = 0;
};

// Mean over seeds of the final metrics; the worst class is the argmin of the
// seed-averaged class accuracies.
std::optional<RunSummary> summarize_run(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) {
    std::cerr << "warning: " << dir.string() << ": no manifest.json, skipped\n";
    return std::nullopt;
  }
  const json m = read_json(manifest_path);
  if (m.value("status", "") != "complete" || m.value("command", "") != "train") {
    std::cerr << "warning: " << dir.string() << ": run is not a complete training run, skipped\n";
    return std::nullopt;
  }
  RunSummary s;
  s.label = m["config"].value("name", "run") + "/" + m.value("mode", "?");
  std::vector<double> per_class;
  std::size_t n = 0;
  for (const auto& seed : m.at("completed_seeds")) {
    const json acc = read_json(dir / seed_dir(seed.get<std::uint64_t>()) / "accuracy.json");
    const auto& f = acc.at("final");
    s.max += f.at("max").get<double>();
    s.ave += f.at("ave").get<double>();
    s.min += f.at("min").get<double>();
    s.icd += f.at("icd").get<double>();
    const auto pc = f.at("per_class").get<std::vector<double>>();
    if (per_class.empty()) per_class.assign(pc.size(), 0.0);
    for (std::size_t c = 0; c < pc.size() && c < per_class.size(); ++c) per_class[c] += pc[c];
    ++n;
  }
  if (n == 0) {
    std::cerr << "warning: " << dir.string() << ": no completed seeds, skipped\n";
    return std::nullopt;
  }
  const double dn = static_cast<double>(n);
  s.max /= dn;
  s.ave /= dn;
  s.min /= dn;
  s.icd /= dn;
  s.worst = static_cast<std::size_t>(
      std::min_element(per_class.begin(), per_class.end()) - per_class.begin());
  return s;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& csv_path) {
  std::vector<RunSummary> runs;
  for (const auto& d : dirs) {
    if (auto s = summarize_run(d)) runs.push_back(std::move(*s));
  }
  if (runs.empty()) {
    std::cerr << "error: no completed runs to report\n";
    return kExitRuntime;
  }
  // Labels must be unique column names; fall back to the directory name.
  std::map<std::string, int> seen;
  for (const auto& r : runs) ++seen[r.label];
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (seen[runs[i].label] > 1) runs[i].label += "#" + std::to_string(i);
  }

  struct Row {
    std::string name;
    std::vector<double> values;
  };
  std::vector<Row> rows;
  auto pct = [](double v) { return 100.0 * v; };
  rows.push_back({"Max", {}});
  rows.push_back({"Ave", {}});
  rows.push_back({"Min", {}});
  rows.push_back({"ICD", {}});
  rows.push_back({"Worst", {}});
  for (const auto& r : runs) {
    rows[0].values.push_back(pct(r.max));
    rows[1].values.push_back(pct(r.ave));
    rows[2].values.push_back(pct(r.min));
    rows[3].values.push_back(pct(r.icd));
    rows[4].values.push_back(static_cast<double>(r.worst));
  }

  std::vector<std::string> header{"metric"};
  for (const auto& r : runs) header.push_back(r.label);
  for (std::size_t i = 1; i < runs.size(); ++i) header.push_back("delta(" + runs[i].label + ")");

  auto format_row = [&](const Row& row, bool worst) {
    std::vector<std::string> cells{row.name};
    std::ostringstream os;
    for (double v : row.values) {
      os.str("");
      if (worst) {
        os << static_cast<std::size_t>(v);
      } else {
        os << std::fixed << std::setprecision(2) << v;
      }
      cells.push_back(os.str());
    }
    for (std::size_t i = 1; i < row.values.size(); ++i) {
      os.str("");
      if (!worst) os << std::showpos << std::fixed << std::setprecision(2) << row.values[i] - row.values[0];
      cells.push_back(os.str());
    }
    return cells;
  };

  std::vector<std::vector<std::string>> table{header};
  for (std::size_t i = 0; i < rows.size(); ++i) table.push_back(format_row(rows[i], i == 4));

  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : table) {
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  }
  for (const auto& line : table) {
    for (std::size_t c = 0; c < line.size(); ++c) {
      std::cout << (c == 0 ? "" : "  ") << std::setw(static_cast<int>(width[c]))
                << (c == 0 ? std::left : std::right) << line[c];
    }
    std::cout << std::right << "\n";
  }

  if (!csv_path.empty()) {
    std::ostringstream os;
    for (const auto& line : table) {
      for (std::size_t c = 0; c < line.size(); ++c) os << (c ? "," : "") << line[c];
      os << "\n";
    }
    write_text(csv_path, os.str());
  }
  return 0;
}

}  // namespace fedpkd::cli

int main(int argc, char** argv) {
  using namespace fedpkd;
  CLI::App app{"Federated learning with partial knowledge distillation for weak classes"};
  app.set_version_flag("--version", std::string(FEDPKD_VERSION_STRING));
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::vector<std::uint64_t> seeds;
  std::string mode = "pkd";
  std::vector<std::string> run_dirs;
  std::string report_csv;

  auto* part = app.add_subcommand("partition", "Split the training set into client shards");
  part->add_option("--config", config_path, "Run configuration (JSON)")->required();
  part->add_option("--seeds", seeds, "Comma-separated seeds (overrides the config)")->delimiter(',');
  part->add_option("--out", out_dir, "Output directory");

  auto* train = app.add_subcommand("train", "Train FedAvg or PKD and write metrics");
  train->add_option("--config", config_path, "Run configuration (JSON)")->required();
  train->add_option("--mode", mode, "Training mode")->check(CLI::IsMember({"fedavg", "pkd"}));
  train->add_option("--seeds", seeds, "Comma-separated seeds (overrides the config)")->delimiter(',');
  train->add_option("--out", out_dir, "Output directory");

  auto* report = app.add_subcommand("report", "Compare completed training runs");
  report->add_option("runs", run_dirs, "Run directories; the first is the Δ reference")->required();
  report->add_option("--out", report_csv, "Also write the table as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cli::kExitUsage;
  }

  try {
    if (report->parsed()) return cli::cmd_report(run_dirs, report_csv);

    RunConfig cfg = load_config(config_path);
    if (!seeds.empty()) cfg.seeds = seeds;
    if (part->parsed()) {
      const fs::path out = out_dir.empty() ? fs::path(cfg.output_dir) / "partition" : fs::path(out_dir);
      return cli::cmd_partition(cfg, out);
    }
    const fs::path out = out_dir.empty() ? fs::path(cfg.output_dir) / mode : fs::path(out_dir);
    return cli::cmd_train(cfg, mode, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return cli::kExitUsage;
  } catch (const InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return cli::kExitUsage;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return cli::kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::kExitRuntime;
  }
}
