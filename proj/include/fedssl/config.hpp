#pragma once

// Experiment configuration: a versioned JSON document. Unknown keys are
// rejected, missing keys take the defaults below, and emit_config writes
// every field so that parse_config(emit_config(c)) == c.

#include <cstdint>
#include <string>

#include "json.hpp"

#include "fedssl/data.hpp"
#include "fedssl/eval.hpp"
#include "fedssl/fed.hpp"
#include "fedssl/ssl.hpp"

namespace fedssl {

inline constexpr int kConfigSchemaVersion = 1;

struct ArchConfig {
  std::vector<int> encoder_hidden{64};
  int embedding_dim = 32;
  int predictor_hidden = 64;
  bool encoder_standardize = false;
  double encoder_init_gain = 0.3;
  double predictor_init_gain = 1.0;

  /// Encoder input width comes from the dataset.
  ArchSpec resolve(int input_dim) const;
  bool operator==(const ArchConfig&) const = default;
};

struct MonitorConfig {
  int every = 5;  // kNN + collapse monitor period in rounds; 0 disables
  int knn_k = kDefaultKnnK;
  int linear_epochs = 100;
  double linear_lr = 0.5;
  int linear_batch = 64;
  bool operator==(const MonitorConfig&) const = default;
};

struct ExperimentConfig {
  std::string preset = "byol";
  MethodConfig method = MethodConfig::byol();
  UpdateStrategy strategy = update::FedEma{update::AutoScaler{0.7}};
  bool standalone = false;       // strategy kind "standalone": never communicate
  int clients = 5;               // K
  int classes_per_client = 2;    // l
  int clients_per_round = 0;     // 0 = all
  int rounds = 100;              // R
  int local_epochs = 5;          // E
  int batch_size = 32;           // B
  double lr = 0.05;              // base learning rate
  std::uint64_t seed = 0;
  int workers = 1;
  bool wire_mode = false;
  BlobSpec dataset;
  std::string dataset_path;       // optional binary dataset instead of blobs
  std::string test_dataset_path;
  AugSpec aug;
  ArchConfig arch;
  MonitorConfig monitor;

  bool operator==(const ExperimentConfig&) const = default;
};

/// Validates and fills defaults. Throws ErrorKind::kConfig.
ExperimentConfig parse_config(const nlohmann::json& doc);
ExperimentConfig load_config(const std::string& path);
nlohmann::json emit_config(const ExperimentConfig& cfg);

/// Sets a dotted key ("strategy.tau", "rounds") in a config document,
/// parsing `value` as JSON when possible and as a string otherwise.
void set_config_value(nlohmann::json& doc, const std::string& dotted_key, const std::string& value);

/// Protocol-level settings derived from the experiment config.
FederationConfig to_federation_config(const ExperimentConfig& cfg, int input_dim);

}  // namespace fedssl
