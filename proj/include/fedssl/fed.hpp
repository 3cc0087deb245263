#pragma once

// Server/client round protocol: selection, client update, local training,
// upload, sample-weighted aggregation and the one-time lambda autoscaler.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fedssl/data.hpp"
#include "fedssl/params.hpp"
#include "fedssl/ssl.hpp"

namespace fedssl {

namespace update {

/// Online encoder and predictor <- global; target kept local.
struct Replace {
  bool operator==(const Replace&) const = default;
};
/// Online encoder, predictor and target <- global.
struct UpdateBoth {
  bool operator==(const UpdateBoth&) const = default;
};
struct FixedScaler {
  double lambda = 1.0;
  bool operator==(const FixedScaler&) const = default;
};
struct AutoScaler {
  double tau = 0.7;
  bool operator==(const AutoScaler&) const = default;
};
/// Divergence-aware EMA of the global model into the online network.
struct FedEma {
  std::variant<FixedScaler, AutoScaler> scaler = AutoScaler{};
  /// Permit blending a weight-shared encoder (off-label ablation).
  bool allow_weight_sharing = false;
  /// Measure divergence over encoder and predictor instead of the encoder.
  bool divergence_with_predictor = false;
  bool operator==(const FedEma&) const = default;
};
/// EMA with constant decay rates on the encoder and predictor.
struct ConstantMu {
  double mu_encoder = 0.0;
  double mu_predictor = 0.0;
  bool operator==(const ConstantMu&) const = default;
};

}  // namespace update

using UpdateStrategy =
    std::variant<update::Replace, update::UpdateBoth, update::FedEma, update::ConstantMu>;

std::string describe(const UpdateStrategy& strategy);

/// Groups the divergence is measured over: the encoder, plus the predictor
/// when a FedEma strategy asks for it and the method has one.
std::vector<std::string> divergence_groups(const UpdateStrategy& strategy, bool has_predictor);

struct ClientState {
  int id = 0;
  std::size_t n_k = 0;
  Matrix data;  // local samples
  ClientNets nets;
  std::optional<double> lambda;
  std::optional<int> last_selected_round;
};

struct ServerState {
  NamedParams global;
  int round = 0;
  UpdateStrategy strategy;
  std::vector<ClientState> clients;
};

struct FederationConfig {
  MethodConfig method;
  ArchSpec arch;
  UpdateStrategy strategy = update::FedEma{};
  LocalTrainSpec train;
  double base_lr = 0.032;
  int rounds = 100;             // R; also the learning-rate schedule horizon
  int clients_per_round = 0;    // 0 selects every client
  std::uint64_t seed = 0;
  int workers = 1;
  bool standalone = false;      // train locally, never communicate
  bool wire_mode = false;       // route downloads/uploads through framed messages
};

struct UpdateRecord {
  double mu = 0.0;
  bool reset = false;
  double divergence = 0.0;  // ||W_g^r - W_k^{r-1}|| on the encoder, before the update
};

struct ClientRoundRecord {
  int client = 0;
  UpdateRecord update;
  std::optional<double> lambda;  // after this round's autoscaling
  double weight = 0.0;           // normalized aggregation weight
  double divergence = 0.0;       // ||W_g^{r+1} - W_k^r|| on the encoder
  double loss_mean = 0.0;
  std::vector<BatchLoss> losses;
};

struct RoundRecord {
  int round = 0;
  std::vector<int> participants;  // sorted by id
  std::vector<ClientRoundRecord> clients;
  std::optional<double> knn_acc;
  std::optional<double> collapse;
  std::vector<std::string> warnings;
};

/// Builds W_g^0 from the seeded init stream and one client per partition
/// entry, every network initialized from W_g^0.
ServerState init_server(const FederationConfig& cfg, const Dataset& train,
                        const std::vector<std::vector<std::size_t>>& partition);

/// Uniform sample of `count` distinct client ids, returned sorted.
std::vector<int> select_clients(std::span<const ClientState> pool, int count, Rng& rng);

/// Client-side model update for round r (see UpdateStrategy).
UpdateRecord apply_update(ClientState& client, const NamedParams& global,
                          const UpdateStrategy& strategy, int round);

/// Sets lambda_k = tau / ||W_g^{r+1} - W_k^r|| for every participant whose
/// lambda is still unset; degenerate divergence falls back to 0 with a
/// warning. Empty `groups` means the encoder only. `uploads[i]` belongs to `participants[i]`.
std::vector<std::string> post_aggregate_autoscale(ServerState& server,
                                                  std::span<const int> participants,
                                                  std::span<const NamedParams> uploads,
                                                  double tau,
                                                  std::span<const std::string> groups = {});

RoundRecord run_round(ServerState& server, const FederationConfig& cfg);

using RoundObserver = std::function<void(const ServerState&, RoundRecord&)>;

struct ExperimentResult {
  NamedParams global;
  std::vector<RoundRecord> rounds;
  ServerState final_state;
};

/// Runs exactly cfg.rounds rounds (r = 0 .. R-1) and returns W_g^R.
ExperimentResult run_experiment(const FederationConfig& cfg, const Dataset& train,
                                const std::vector<std::vector<std::size_t>>& partition,
                                const RoundObserver& observer = {});

/// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the first
/// failure after all workers finish.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace fedssl
