#pragma once

// Siamese self-supervised training with the four method families expressed
// as toggles over one training step.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fedssl/data.hpp"
#include "fedssl/losses.hpp"
#include "fedssl/nn.hpp"
#include "fedssl/params.hpp"
#include "fedssl/rng.hpp"

namespace fedssl {

enum class LossKind { kNegCosine, kNtXent, kInfoNceQueue };

std::string_view to_string(LossKind kind);
LossKind loss_kind_from_string(std::string_view name);

struct MethodConfig {
  bool has_predictor = true;
  bool stop_gradient = true;
  bool target_ema = true;
  bool weight_sharing = false;
  LossKind loss_kind = LossKind::kNegCosine;
  double temperature = 0.5;
  int queue_size = 256;
  double momentum = 0.99;
  bool symmetrize = true;  // neg_cosine only

  static MethodConfig byol();
  static MethodConfig simsiam();
  static MethodConfig simclr();
  static MethodConfig moco();
  /// "byol", "simsiam", "simclr" or "moco".
  static MethodConfig preset(std::string_view name);

  void validate() const;
  bool operator==(const MethodConfig&) const = default;
};

/// Encoder and predictor shapes. The predictor input and output widths must
/// equal the encoder embedding width.
struct ArchSpec {
  MlpSpec encoder = MlpSpec::relu_mlp({32, 64, 32});
  MlpSpec predictor = MlpSpec::relu_mlp({32, 64, 32}, /*standardize_hidden=*/true);

  void validate() const;
  bool operator==(const ArchSpec&) const = default;
};

class ClientNets {
 public:
  /// Online encoder, target encoder and predictor all start from `global`;
  /// a MoCo queue starts full of random unit vectors drawn from `rng`.
  static ClientNets create(const MethodConfig& method, const ArchSpec& arch,
                           const NamedParams& global, Rng& rng);

  Network online_encoder;
  std::optional<Network> predictor;
  std::optional<Network> target_encoder;  // empty when aliased to online
  std::optional<EmbeddingQueue> queue;

  bool target_aliased() const { return !target_encoder.has_value(); }
  const Network& target() const { return target_encoder ? *target_encoder : online_encoder; }

  /// {"encoder", "predictor" if present}
  NamedParams online_params() const;
  void set_online_params(const NamedParams& params);
  void set_target_params(const Vector& encoder_params);

 private:
  explicit ClientNets(Network online) : online_encoder(std::move(online)) {}
};

/// Initial global record {encoder, predictor if the method has one}.
NamedParams init_global_params(const MethodConfig& method, const ArchSpec& arch, Rng& rng);

struct StepGradients {
  double loss = 0.0;
  NamedParams online;                 // same groups as online_params()
  std::optional<Vector> target;       // separate target only; zero under stop-gradient
  Matrix keys;                        // normalized target embeddings (queue methods)
};

/// Loss and gradients of one Siamese step on the view pair (v1, v2).
/// Online path: encoder (then predictor if present) on one view; target
/// path: target encoder on the other view. neg_cosine is symmetrized over
/// the two view orders when `method.symmetrize` is set.
StepGradients ssl_gradients(const ClientNets& nets, const MethodConfig& method, const Matrix& v1,
                            const Matrix& v2);

/// m * target + (1 - m) * online.
NamedParams target_momentum_update(const NamedParams& target, const NamedParams& online, double m);
Vector target_momentum_update(const Vector& target, const Vector& online, double m);

/// Applies the momentum update to the client's target encoder. Throws
/// ErrorKind::kProtocol if the target is aliased or EMA is disabled.
void update_target(ClientNets& nets, const MethodConfig& method);

struct LocalTrainSpec {
  int epochs = 5;
  int batch_size = 32;
  AugSpec aug;
};

struct BatchLoss {
  int epoch;
  int batch;
  double loss;
};

struct LocalTrainResult {
  std::vector<BatchLoss> batch_losses;
  std::vector<double> epoch_loss;  // mean over batches
};

/// E epochs of mini-batch SGD over `data` (incomplete trailing batches are
/// dropped). Each batch: two augmented views per sample, one gradient step on
/// the online network (and on a separate target when stop-gradient is off),
/// then the target momentum update iff target_ema, then enqueue keys.
LocalTrainResult local_train(ClientNets& nets, const MethodConfig& method, const Matrix& data,
                             const LocalTrainSpec& spec, OptimizerState& opt, Rng& rng);

}  // namespace fedssl
