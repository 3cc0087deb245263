#pragma once

// Experiment runner: builds data from a config, runs the federation, and
// writes metrics. Output files in a run directory:
//
//   config.json          resolved config
//   partition.txt        client -> sample indices
//   rounds.csv           round,client,reset,mu,lambda,divergence_pre,divergence,weight,loss_mean,knn_acc,collapse
//   rounds.jsonl         one round record per line
//   losses.csv           round,client,epoch,batch,loss
//   plot_divergence.csv  round,client_0,...,client_{K-1}  (blank = not selected)
//   plot_knn.csv         round,knn_acc,collapse
//   eval.jsonl           final evaluation report
//   final.params         W_g^R checkpoint

#include <string>
#include <vector>

#include "fedssl/config.hpp"

namespace fedssl {

struct ExperimentData {
  Dataset train;
  Dataset test;
  std::vector<std::vector<std::size_t>> partition;
};

/// Blobs (or the configured dataset files) plus the label-skew partition.
ExperimentData prepare_data(const ExperimentConfig& cfg);

/// "preset/strategy", the grouping key used by compare.
std::string run_label(const ExperimentConfig& cfg);

struct RunSummary {
  std::string dir;
  EvalReport report;
};

/// Runs one experiment and writes its outputs into `dir` (created if needed).
RunSummary run(const ExperimentConfig& cfg, const std::string& dir);

/// Runs `base` once per value of the dotted key, into dir/<index>, and
/// writes dir/sweep.csv (key,value,linear_acc,knn_acc,collapse).
std::vector<RunSummary> sweep(const nlohmann::json& base, const std::string& key,
                              const std::vector<std::string>& values, const std::string& dir);

struct CompareRow {
  std::string label;
  std::vector<std::uint64_t> seeds;
  double linear_mean = 0, linear_std = 0;
  double knn_mean = 0, knn_std = 0;
  double collapse_mean = 0, collapse_std = 0;
};

/// Groups runs by label and reports mean and sample standard deviation
/// (0 for a single run) of the final metrics read back from eval.jsonl.
/// Throws ErrorKind::kConfig when dataset specs or seed sets differ.
std::vector<CompareRow> compare(const std::vector<std::string>& run_dirs);
std::string compare_text(const std::vector<CompareRow>& rows);
std::string compare_csv(const std::vector<CompareRow>& rows);

/// Re-evaluates a saved checkpoint on the config's data.
EvalReport evaluate_checkpoint(const ExperimentConfig& cfg, const std::string& checkpoint);

}  // namespace fedssl
