#pragma once

#include <map>
#include <string>
#include <vector>

#include "multiquant/dataset.hpp"
#include "multiquant/trainer.hpp"

namespace mq {

// File-backed experiment description: everything in TrainConfig plus the
// dataset, architecture and output knobs. Flat kebab-case JSON keys;
// unknown keys are rejected.
struct RunConfig {
  TrainConfig train;
  std::string dataset = "synthetic";  // mnist-idx | synthetic
  std::string train_images, train_labels, test_images, test_labels;
  int64_t subset = 0;  // 0 = use every sample
  int synthetic_classes = 10;
  int synthetic_dim = 12;
  int64_t synthetic_n = 2000;
  std::string arch = "default";  // default | tiny
  std::string out_dir;
  bool emit_msqe = false;
  int64_t msqe_samples = 1000000;
};

// Collects every validation problem instead of stopping at the first.
std::vector<std::string> validate_run_config(const RunConfig& cfg);

// Parses a config document (or the metadata file of a previous run, whose
// resolved config lives under the "config" key). Throws with the full
// error list on any problem.
RunConfig load_run_config(const std::string& path);
RunConfig run_config_from_json_text(const std::string& text);

ArchSpec arch_from_config(const RunConfig& cfg, int in_h, int in_w, int classes);
DatasetHandle load_dataset(const RunConfig& cfg);

// Builds, trains, evaluates and writes the run directory: metadata.json,
// history.csv, results.csv, cost_report.csv, storage_report.csv,
// checkpoint.mqck and msqe.csv when enabled. Validates everything before
// touching the filesystem. Returns a process exit status.
int run_experiment(const RunConfig& cfg);

// The four-way selection-strategy x distillation grid under a base config;
// each cell runs into <out>/<strategy>-<distill|nodistill>.
int run_ablation(const RunConfig& base);

struct RunReport {
  std::string method;
  std::vector<int> bits;
  std::string strategy;
  bool distill = true;
  uint64_t seed = 0;
  std::map<int, double> accuracy;   // per bit
  double avg_accuracy = 0.0;
  double size_mb = 0.0;
  std::map<std::string, int> branch_usage;  // branch id string -> count
  bool aborted = false;
};

RunReport read_run(const std::string& run_dir);
std::string render_report(const RunReport& r);
std::string render_comparison(const RunReport& a, const RunReport& b);

}  // namespace mq
