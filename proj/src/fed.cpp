#include "fedssl/fed.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "fedssl/error.hpp"
#include "fedssl/wire.hpp"

namespace fedssl {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

const std::vector<std::string>& online_groups(const ClientNets& nets) {
  static const std::vector<std::string> enc{std::string(kEncoder)};
  static const std::vector<std::string> both{std::string(kEncoder), std::string(kPredictor)};
  return nets.predictor ? both : enc;
}

void replace_online(ClientState& client, const NamedParams& global) {
  client.nets.set_online_params(global);
}

void replace_all(ClientState& client, const NamedParams& global) {
  client.nets.set_online_params(global);
  client.nets.set_target_params(global.group(kEncoder));
}

}  // namespace

std::string describe(const UpdateStrategy& strategy) {
  return std::visit(
      overloaded{
          [](const update::Replace&) { return std::string("replace"); },
          [](const update::UpdateBoth&) { return std::string("update_both"); },
          [](const update::FedEma& s) {
            std::ostringstream os;
            if (const auto* f = std::get_if<update::FixedScaler>(&s.scaler))
              os << "fedema(lambda=" << f->lambda << ")";
            else
              os << "fedema(tau=" << std::get<update::AutoScaler>(s.scaler).tau << ")";
            return os.str();
          },
          [](const update::ConstantMu& s) {
            std::ostringstream os;
            os << "constant_mu(" << s.mu_encoder << "," << s.mu_predictor << ")";
            return os.str();
          },
      },
      strategy);
}

ServerState init_server(const FederationConfig& cfg, const Dataset& train,
                        const std::vector<std::vector<std::size_t>>& partition) {
  cfg.method.validate();
  cfg.arch.validate();
  require(!partition.empty(), ErrorKind::kInvalidArgument, "federation needs at least one client");
  require(train.dim() == cfg.arch.encoder.input_width(), ErrorKind::kShapeMismatch,
          "data width does not match the encoder input");

  const SeedPath root(cfg.seed);
  Rng init_rng(root.key("init"));
  ServerState server{init_global_params(cfg.method, cfg.arch, init_rng), 0, cfg.strategy, {}};

  std::optional<double> initial_lambda;
  if (const auto* ema = std::get_if<update::FedEma>(&cfg.strategy)) {
    if (const auto* f = std::get_if<update::FixedScaler>(&ema->scaler)) {
      require(f->lambda >= 0.0, ErrorKind::kConfig, "lambda must be nonnegative");
      initial_lambda = f->lambda;
    }
  }

  server.clients.reserve(partition.size());
  for (std::size_t k = 0; k < partition.size(); ++k) {
    require(!partition[k].empty(), ErrorKind::kInvalidArgument, "client with no data");
    Rng queue_rng(root.key("queue").key(k));
    server.clients.push_back(ClientState{
        static_cast<int>(k), partition[k].size(), train.subset(partition[k]).samples,
        ClientNets::create(cfg.method, cfg.arch, server.global, queue_rng), initial_lambda,
        std::nullopt});
  }
  return server;
}

std::vector<int> select_clients(std::span<const ClientState> pool, int count, Rng& rng) {
  require(count >= 1 && static_cast<std::size_t>(count) <= pool.size(),
          ErrorKind::kInvalidArgument, "selection count out of range");
  std::vector<int> ids;
  ids.reserve(pool.size());
  for (const auto& c : pool) ids.push_back(c.id);
  // Partial Fisher-Yates: the first `count` slots are a uniform sample.
  for (std::size_t i = 0; i < static_cast<std::size_t>(count); ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.index(ids.size() - i));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(static_cast<std::size_t>(count));
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<std::string> divergence_groups(const UpdateStrategy& strategy, bool has_predictor) {
  std::vector<std::string> groups{std::string(kEncoder)};
  const auto* ema = std::get_if<update::FedEma>(&strategy);
  if (ema && ema->divergence_with_predictor && has_predictor) groups.emplace_back(kPredictor);
  return groups;
}

UpdateRecord apply_update(ClientState& client, const NamedParams& global,
                          const UpdateStrategy& strategy, int round) {
  const NamedParams local = client.nets.online_params();
  check_same_shape(local, global);

  UpdateRecord rec;
  rec.divergence = divergence(global, local,
                              divergence_groups(strategy, client.nets.predictor.has_value()));

  std::visit(
      overloaded{
          [&](const update::Replace&) { replace_online(client, global); },
          [&](const update::UpdateBoth&) { replace_all(client, global); },
          [&](const update::FedEma& s) {
            require(!client.nets.target_aliased() || s.allow_weight_sharing, ErrorKind::kProtocol,
                    "FedEMA on a weight-sharing method needs an explicit override");
            const bool consecutive =
                client.last_selected_round && *client.last_selected_round == round - 1;
            if (!client.lambda || !consecutive) {
              replace_all(client, global);
              rec.reset = true;
              return;
            }
            rec.mu = compute_mu(*client.lambda, rec.divergence);
            client.nets.set_online_params(ema_blend(local, global, rec.mu, online_groups(client.nets)));
          },
          [&](const update::ConstantMu& s) {
            if (round == 0) {
              replace_online(client, global);
              return;
            }
            require(s.mu_encoder >= 0.0 && s.mu_encoder <= 1.0 && s.mu_predictor >= 0.0 &&
                        s.mu_predictor <= 1.0,
                    ErrorKind::kConfig, "constant mu must lie in [0, 1]");
            rec.mu = s.mu_encoder;
            NamedParams blended =
                ema_blend(local, global, s.mu_encoder, std::vector<std::string>{std::string(kEncoder)});
            if (client.nets.predictor)
              blended.group(kPredictor) = ema_blend(local, global, s.mu_predictor,
                                                    std::vector<std::string>{std::string(kPredictor)})
                                              .group(kPredictor);
            client.nets.set_online_params(blended);
          },
      },
      strategy);
  return rec;
}

std::vector<std::string> post_aggregate_autoscale(ServerState& server,
                                                  std::span<const int> participants,
                                                  std::span<const NamedParams> uploads,
                                                  double tau,
                                                  std::span<const std::string> groups) {
  const std::string encoder(kEncoder);
  if (groups.empty()) groups = std::span<const std::string>(&encoder, 1);
  require(participants.size() == uploads.size(), ErrorKind::kInvalidArgument,
          "one upload per participant required");
  std::vector<std::string> warnings;
  for (std::size_t i = 0; i < participants.size(); ++i) {
    ClientState& client = server.clients.at(static_cast<std::size_t>(participants[i]));
    if (client.lambda) continue;
    try {
      client.lambda = autoscale_lambda(server.global, uploads[i], tau, groups);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kDegenerate) throw;
      client.lambda = 0.0;
      warnings.push_back("client " + std::to_string(client.id) +
                         ": degenerate divergence at calibration, lambda set to 0");
    }
  }
  return warnings;
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(workers, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mu);
            if (!first_error) first_error = std::current_exception();
          }
        }
      });
    }
  }
  if (first_error) std::rethrow_exception(first_error);
}

namespace {

struct ClientOutcome {
  UpdateRecord update;
  NamedParams upload;
  LocalTrainResult training;
};

ClientOutcome train_client(ClientState& client, const NamedParams& global,
                           const FederationConfig& cfg, int round, bool communicate) {
  ClientOutcome out;
  if (communicate)
    out.update = apply_update(client, global, cfg.strategy, round);
  else
    out.update.divergence =
        divergence(global, client.nets.online_params(),
                   divergence_groups(cfg.strategy, client.nets.predictor.has_value()));

  const std::int64_t batches = static_cast<std::int64_t>(client.n_k) / cfg.train.batch_size;
  require(batches >= 1, ErrorKind::kInvalidArgument,
          "client " + std::to_string(client.id) + " has fewer samples than one batch");
  const std::int64_t per_round = batches * cfg.train.epochs;
  OptimizerState opt{cfg.base_lr, per_round * cfg.rounds, per_round * round};
  Rng rng(SeedPath(cfg.seed).key("train").key(static_cast<std::uint64_t>(client.id))
              .key(static_cast<std::uint64_t>(round)));
  out.training = local_train(client.nets, cfg.method, client.data, cfg.train, opt, rng);
  out.upload = client.nets.online_params();
  return out;
}

}  // namespace

RoundRecord run_round(ServerState& server, const FederationConfig& cfg) {
  const int r = server.round;
  require(r < cfg.rounds, ErrorKind::kProtocol, "round beyond the configured horizon");

  const int pool = static_cast<int>(server.clients.size());
  const int count = cfg.standalone || cfg.clients_per_round == 0 ? pool : cfg.clients_per_round;
  Rng select_rng(SeedPath(cfg.seed).key("select").key(static_cast<std::uint64_t>(r)));
  const std::vector<int> participants = select_clients(server.clients, count, select_rng);
  require(!participants.empty(), ErrorKind::kProtocol, "no participants selected");

  std::vector<ClientOutcome> outcomes(participants.size());
  const bool communicate = !cfg.standalone;
  const std::vector<std::string> div_groups =
      divergence_groups(cfg.strategy, cfg.method.has_predictor);

  if (cfg.wire_mode && communicate) {
    std::vector<std::pair<ChannelEnd, ChannelEnd>> links;
    links.reserve(participants.size());
    for (int id : participants) {
      links.push_back(make_duplex());
      links.back().first.send({MessageType::kGlobalModel, r, id, server.global});
    }
    parallel_for(participants.size(), cfg.workers, [&](std::size_t i) {
      ChannelEnd& end = links[i].second;
      Message down = end.receive();
      require(down.type == MessageType::kGlobalModel && down.round == r &&
                  down.client_id == participants[i],
              ErrorKind::kProtocol, "unexpected download message");
      ClientState& client = server.clients[static_cast<std::size_t>(participants[i])];
      outcomes[i] = train_client(client, down.payload, cfg, r, true);
      end.send({MessageType::kClientUpdate, r, participants[i], outcomes[i].upload});
    });
    for (std::size_t i = 0; i < participants.size(); ++i) {
      Message up = links[i].first.receive();
      require(up.type == MessageType::kClientUpdate && up.round == r &&
                  up.client_id == participants[i],
              ErrorKind::kProtocol, "unexpected upload message");
      outcomes[i].upload = std::move(up.payload);
    }
  } else {
    parallel_for(participants.size(), cfg.workers, [&](std::size_t i) {
      ClientState& client = server.clients[static_cast<std::size_t>(participants[i])];
      outcomes[i] = train_client(client, server.global, cfg, r, communicate);
    });
  }

  for (std::size_t i = 0; i < participants.size(); ++i)
    require(outcomes[i].upload.same_shape(server.global), ErrorKind::kShapeMismatch,
            "client upload drifted from the global shape");

  double total_n = 0.0;
  for (int id : participants) total_n += static_cast<double>(server.clients[static_cast<std::size_t>(id)].n_k);

  RoundRecord record;
  record.round = r;
  record.participants = participants;

  std::vector<NamedParams> uploads;
  uploads.reserve(participants.size());
  for (auto& o : outcomes) uploads.push_back(o.upload);

  if (communicate) {
    std::vector<WeightedParams> entries;
    for (std::size_t i = 0; i < participants.size(); ++i)
      entries.push_back({&uploads[i],
                         static_cast<double>(server.clients[static_cast<std::size_t>(participants[i])].n_k)});
    server.global = weighted_average(entries);

    if (const auto* ema = std::get_if<update::FedEma>(&cfg.strategy))
      if (const auto* a = std::get_if<update::AutoScaler>(&ema->scaler))
        record.warnings = post_aggregate_autoscale(server, participants, uploads, a->tau,
                                                   div_groups);
  }

  for (std::size_t i = 0; i < participants.size(); ++i) {
    ClientState& client = server.clients[static_cast<std::size_t>(participants[i])];
    client.last_selected_round = r;
    ClientRoundRecord cr;
    cr.client = client.id;
    cr.update = outcomes[i].update;
    cr.lambda = client.lambda;
    cr.weight = static_cast<double>(client.n_k) / total_n;
    cr.divergence = divergence(server.global, uploads[i], div_groups);
    const auto& losses = outcomes[i].training.batch_losses;
    double sum = 0.0;
    for (const auto& l : losses) sum += l.loss;
    cr.loss_mean = losses.empty() ? 0.0 : sum / static_cast<double>(losses.size());
    cr.losses = losses;
    record.clients.push_back(std::move(cr));
  }

  ++server.round;
  return record;
}

ExperimentResult run_experiment(const FederationConfig& cfg, const Dataset& train,
                                const std::vector<std::vector<std::size_t>>& partition,
                                const RoundObserver& observer) {
  require(cfg.rounds >= 0, ErrorKind::kConfig, "rounds must be nonnegative");
  ServerState server = init_server(cfg, train, partition);
  std::vector<RoundRecord> rounds;
  rounds.reserve(static_cast<std::size_t>(cfg.rounds));
  for (int r = 0; r < cfg.rounds; ++r) {
    RoundRecord rec = run_round(server, cfg);
    if (observer) observer(server, rec);
    rounds.push_back(std::move(rec));
  }
  NamedParams global = server.global;
  return {std::move(global), std::move(rounds), std::move(server)};
}

}  // namespace fedssl
