#include <cmath>
#include <map>

#include "doctest.h"
#include "fedssl/error.hpp"
#include "fedssl/fed.hpp"
#include "support.hpp"

using namespace fedssl;
using namespace fedssl::testing;

namespace {

template <class F>
ErrorKind error_of(F fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::kIo;  // sentinel: nothing thrown
}

/// Server whose client 0 has drifted away from the global model.
struct Drifted {
  TinySetup setup;
  ServerState server;
  NamedParams global;     // a fresh global, distinct from the client
  NamedParams local;      // client 0 online params
  Vector local_target;
};

Drifted drifted(std::uint64_t seed = 3) {
  Drifted d{tiny_setup(4, 2, 10, seed), {}, {}, {}, {}};
  d.setup.cfg.method = MethodConfig::byol();
  d.server = init_server(d.setup.cfg, d.setup.train, d.setup.partition);
  Rng rng(seed);
  ClientState& c = d.server.clients[0];
  NamedParams local = c.nets.online_params();
  for (const auto& name : local.names())
    local.group(name) += random_vector(local.group(name).size(), rng, 0.05);
  c.nets.set_online_params(local);
  c.nets.set_target_params(local.group("encoder") + random_vector(local.group("encoder").size(), rng, 0.05));
  d.local = c.nets.online_params();
  d.local_target = c.nets.target().params();
  d.global = d.server.global;
  for (const auto& name : d.global.names())
    d.global.group(name) += random_vector(d.global.group(name).size(), rng, 0.05);
  return d;
}

double norm_diff(const NamedParams& a, const NamedParams& b) {
  return (a.flatten() - b.flatten()).norm();
}

update::FedEma fixed(double lambda) { return update::FedEma{update::FixedScaler{lambda}}; }

}  // namespace

TEST_SUITE("fed") {

TEST_CASE("client selection") {
  const TinySetup s = tiny_setup(8, 1, 1, 1, 4, 24);
  FederationConfig cfg = s.cfg;
  const ServerState server = init_server(cfg, s.train, s.partition);
  Rng rng(1);
  CHECK(select_clients(server.clients, 8, rng) == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
  CHECK(select_clients(std::span(server.clients).first(1), 1, rng) == std::vector<int>{0});
  CHECK(error_of([&] { select_clients(server.clients, 0, rng); }) == ErrorKind::kInvalidArgument);
  CHECK(error_of([&] { select_clients(server.clients, 9, rng); }) == ErrorKind::kInvalidArgument);

  const int draws = 10000;
  std::vector<int> hits(8, 0);
  for (int i = 0; i < draws; ++i) {
    const auto ids = select_clients(server.clients, 2, rng);
    REQUIRE(ids.size() == 2);
    CHECK(ids[0] < ids[1]);
    for (int id : ids) ++hits[static_cast<std::size_t>(id)];
  }
  const double p = 0.25, sigma = std::sqrt(p * (1 - p) / draws);
  for (int h : hits) CHECK(std::abs(h / static_cast<double>(draws) - p) <= 3 * sigma);
}

TEST_CASE("replace copies the online network and keeps the target") {
  Drifted d = drifted();
  ClientState& c = d.server.clients[0];
  const UpdateRecord rec = apply_update(c, d.global, update::Replace{}, 4);
  CHECK(c.nets.online_params().bitwise_equal(d.global));
  CHECK(c.nets.target().params() == d.local_target);
  CHECK(rec.divergence == doctest::Approx(divergence(d.global, d.local)));
  CHECK_FALSE(rec.reset);
}

TEST_CASE("update both also replaces the target") {
  Drifted d = drifted();
  ClientState& c = d.server.clients[0];
  apply_update(c, d.global, update::UpdateBoth{}, 4);
  CHECK(c.nets.online_params().bitwise_equal(d.global));
  CHECK(c.nets.target().params() == d.global.group("encoder"));
}

TEST_CASE("fedema blends with mu from lambda and divergence") {
  Drifted d = drifted();
  ClientState& c = d.server.clients[0];
  c.last_selected_round = 3;
  c.lambda = 0.5;
  const UpdateRecord rec = apply_update(c, d.global, fixed(0.5), 4);

  // scalar-loop oracle
  double sq = 0.0;
  const Vector& g = d.global.group("encoder");
  const Vector& l = d.local.group("encoder");
  for (Eigen::Index i = 0; i < g.size(); ++i) sq += (g[i] - l[i]) * (g[i] - l[i]);
  const double mu = std::min(0.5 * std::sqrt(sq), 1.0);
  REQUIRE(mu < 1.0);
  CHECK_FALSE(rec.reset);
  CHECK(rec.mu == doctest::Approx(mu).epsilon(1e-12));
  const NamedParams now = c.nets.online_params();
  for (const auto& name : now.names()) {
    const Vector& got = now.group(name);
    for (Eigen::Index i = 0; i < got.size(); ++i)
      CHECK(got[i] == doctest::Approx(mu * d.local.group(name)[i] +
                                      (1 - mu) * d.global.group(name)[i]).epsilon(1e-12));
  }
  CHECK(c.nets.target().params() == d.local_target);

  // retained local knowledge: distance to the old local is (1 - mu) div
  const double div = divergence(d.global, d.local);
  CHECK(divergence(now, d.local) == doctest::Approx((1 - mu) * div).epsilon(1e-9));
  CHECK(divergence(now, d.global) == doctest::Approx(mu * div).epsilon(1e-9));
}

TEST_CASE("fedema saturates at mu = 1") {
  Drifted d = drifted();
  ClientState& c = d.server.clients[0];
  c.last_selected_round = 3;
  c.lambda = 1e6;
  const UpdateRecord rec = apply_update(c, d.global, fixed(1e6), 4);
  CHECK(rec.mu == 1.0);
  CHECK(c.nets.online_params().bitwise_equal(d.local));
}

TEST_CASE("fedema resets when lambda is unset or the client skipped a round") {
  for (int variant = 0; variant < 3; ++variant) {
    CAPTURE(variant);
    Drifted d = drifted();
    ClientState& c = d.server.clients[0];
    if (variant == 0) {
      c.lambda.reset();
      c.last_selected_round = 3;
    } else if (variant == 1) {
      c.lambda = 1.0;
      c.last_selected_round = 1;
    } else {
      c.lambda = 1.0;
      c.last_selected_round.reset();
    }
    const UpdateRecord rec = apply_update(c, d.global, update::FedEma{}, 4);
    CHECK(rec.reset);
    CHECK(c.nets.online_params().bitwise_equal(d.global));
    CHECK(c.nets.target().params() == d.global.group("encoder"));
  }
}

TEST_CASE("fedema with lambda 0 matches replace bitwise") {
  Drifted a = drifted(), b = drifted();
  a.server.clients[0].lambda = 0.0;
  a.server.clients[0].last_selected_round = 3;
  const UpdateRecord rec = apply_update(a.server.clients[0], a.global, fixed(0.0), 4);
  apply_update(b.server.clients[0], b.global, update::Replace{}, 4);
  CHECK(rec.mu == 0.0);
  CHECK(a.server.clients[0].nets.online_params().bitwise_equal(b.server.clients[0].nets.online_params()));
  CHECK(a.server.clients[0].nets.target().params() == b.server.clients[0].nets.target().params());
}

TEST_CASE("constant mu") {
  SUBCASE("mu = 1 leaves the client unchanged") {
    Drifted d = drifted();
    apply_update(d.server.clients[0], d.global, update::ConstantMu{1.0, 1.0}, 4);
    CHECK(d.server.clients[0].nets.online_params().bitwise_equal(d.local));
  }
  SUBCASE("separate rates per group") {
    Drifted d = drifted();
    apply_update(d.server.clients[0], d.global, update::ConstantMu{0.25, 0.75}, 4);
    const NamedParams now = d.server.clients[0].nets.online_params();
    const Vector enc = 0.25 * d.local.group("encoder") + 0.75 * d.global.group("encoder");
    const Vector pred = 0.75 * d.local.group("predictor") + 0.25 * d.global.group("predictor");
    CHECK((now.group("encoder") - enc).norm() <= 1e-12);
    CHECK((now.group("predictor") - pred).norm() <= 1e-12);
  }
  SUBCASE("round 0 replaces") {
    Drifted d = drifted();
    apply_update(d.server.clients[0], d.global, update::ConstantMu{0.5, 0.5}, 0);
    CHECK(d.server.clients[0].nets.online_params().bitwise_equal(d.global));
  }
  SUBCASE("out of range") {
    Drifted d = drifted();
    CHECK(error_of([&] {
            apply_update(d.server.clients[0], d.global, update::ConstantMu{1.5, 0.0}, 2);
          }) == ErrorKind::kConfig);
  }
}

TEST_CASE("fedema on a weight-sharing method needs the override") {
  TinySetup s = tiny_setup(2, 2, 3, 1);
  s.cfg.method = MethodConfig::simsiam();
  ServerState server = init_server(s.cfg, s.train, s.partition);
  const NamedParams g = server.global;
  CHECK(error_of([&] { apply_update(server.clients[0], g, update::FedEma{}, 0); }) ==
        ErrorKind::kProtocol);
  update::FedEma allowed;
  allowed.allow_weight_sharing = true;
  CHECK(apply_update(server.clients[0], g, allowed, 0).reset);
}

TEST_CASE("divergence groups") {
  update::FedEma s;
  CHECK(divergence_groups(s, true) == std::vector<std::string>{"encoder"});
  s.divergence_with_predictor = true;
  CHECK(divergence_groups(s, true) == std::vector<std::string>{"encoder", "predictor"});
  CHECK(divergence_groups(s, false) == std::vector<std::string>{"encoder"});
  CHECK(divergence_groups(update::Replace{}, true) == std::vector<std::string>{"encoder"});
}

TEST_CASE("autoscaler sets lambda once") {
  Drifted d = drifted();
  d.server.global = d.global;
  const std::vector<int> ids{0, 1};
  std::vector<NamedParams> uploads{d.local, d.server.clients[1].nets.online_params()};
  auto warnings = post_aggregate_autoscale(d.server, ids, uploads, 0.7);
  CHECK(warnings.empty());
  REQUIRE(d.server.clients[0].lambda);
  const double expected = 0.7 / divergence(d.global, d.local);
  CHECK(*d.server.clients[0].lambda == doctest::Approx(expected).epsilon(1e-12));
  // a later calibration never overrides it
  uploads[0] = d.global;
  uploads[0].group("encoder") *= 3.0;
  post_aggregate_autoscale(d.server, ids, uploads, 0.2);
  CHECK(*d.server.clients[0].lambda == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("autoscaler falls back to zero on degenerate divergence") {
  Drifted d = drifted();
  const std::vector<int> ids{2};
  const std::vector<NamedParams> uploads{d.server.global};
  const auto warnings = post_aggregate_autoscale(d.server, ids, uploads, 0.7);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("client 2") != std::string::npos);
  CHECK(d.server.clients[2].lambda == 0.0);
}

TEST_CASE("lambda is calibrated at each client's first participation") {
  TinySetup s = tiny_setup(4, 2, 8, 5);
  s.cfg.method = MethodConfig::byol();
  s.cfg.clients_per_round = 2;
  s.cfg.strategy = update::FedEma{update::AutoScaler{0.6}};
  const ExperimentResult res = run_experiment(s.cfg, s.train, s.partition);
  std::map<int, double> first;
  std::map<int, int> last_round;
  for (const auto& round : res.rounds) {
    for (const auto& cr : round.clients) {
      REQUIRE(cr.lambda);
      auto it = first.find(cr.client);
      if (it == first.end()) {
        CHECK(cr.update.reset);
        CHECK(*cr.lambda == doctest::Approx(0.6 / cr.divergence).epsilon(1e-12));
        first[cr.client] = *cr.lambda;
      } else {
        CHECK(*cr.lambda == it->second);
        const bool consecutive = last_round[cr.client] == round.round - 1;
        CHECK(cr.update.reset == !consecutive);
        if (consecutive)
          CHECK(cr.update.mu == doctest::Approx(std::min(it->second * cr.update.divergence, 1.0)));
      }
      last_round[cr.client] = round.round;
    }
  }
}

TEST_CASE("a single client's upload becomes the global model") {
  TinySetup s = tiny_setup(1, 4, 3, 2);
  s.cfg.method = MethodConfig::byol();
  ServerState server = init_server(s.cfg, s.train, s.partition);
  const RoundRecord rec = run_round(server, s.cfg);
  CHECK(rec.participants == std::vector<int>{0});
  CHECK(rec.clients[0].weight == 1.0);
  CHECK(server.global.bitwise_equal(server.clients[0].nets.online_params()));
  CHECK(rec.clients[0].divergence == 0.0);
}

TEST_CASE("aggregation weights follow client sample counts") {
  TinySetup s = tiny_setup(2, 2, 2, 4);
  s.cfg.method = MethodConfig::byol();
  s.cfg.strategy = update::Replace{};
  s.partition[1].resize(16);  // unequal n_k
  ServerState server = init_server(s.cfg, s.train, s.partition);
  const RoundRecord rec = run_round(server, s.cfg);
  const double n0 = static_cast<double>(s.partition[0].size()), n1 = 16.0;
  CHECK(rec.clients[0].weight == doctest::Approx(n0 / (n0 + n1)));
  CHECK(rec.clients[1].weight == doctest::Approx(n1 / (n0 + n1)));
  const Vector u0 = server.clients[0].nets.online_params().flatten();
  const Vector u1 = server.clients[1].nets.online_params().flatten();
  const Vector g = server.global.flatten();
  for (Eigen::Index i = 0; i < g.size(); ++i)
    CHECK(g[i] == doctest::Approx((n0 * u0[i] + n1 * u1[i]) / (n0 + n1)).epsilon(1e-12));
}

TEST_CASE("zero learning rate is a fixed point") {
  TinySetup s = tiny_setup(4, 2, 4, 6);
  s.cfg.method = MethodConfig::byol();
  s.cfg.strategy = update::Replace{};
  s.cfg.base_lr = 0.0;
  const ServerState init = init_server(s.cfg, s.train, s.partition);
  const ExperimentResult res = run_experiment(s.cfg, s.train, s.partition);
  CHECK(norm_diff(res.global, init.global) <= 1e-12);
}

TEST_CASE("fedema with lambda 0 follows the replace trajectory") {
  TinySetup s = tiny_setup(4, 2, 5, 7);
  s.cfg.method = MethodConfig::byol();
  s.cfg.strategy = update::Replace{};
  const ExperimentResult replace = run_experiment(s.cfg, s.train, s.partition);
  s.cfg.strategy = fixed(0.0);
  const ExperimentResult ema = run_experiment(s.cfg, s.train, s.partition);
  CHECK(ema.global.bitwise_equal(replace.global));
}

TEST_CASE("recorded divergence matches an offline recomputation") {
  TinySetup s = tiny_setup(4, 2, 4, 8);
  s.cfg.method = MethodConfig::byol();
  s.cfg.clients_per_round = 3;
  int checked = 0;
  run_experiment(s.cfg, s.train, s.partition, [&](const ServerState& server, RoundRecord& rec) {
    for (const auto& cr : rec.clients) {
      const NamedParams upload = server.clients[static_cast<std::size_t>(cr.client)].nets.online_params();
      double sq = 0.0;
      const Vector& g = server.global.group("encoder");
      const Vector& u = upload.group("encoder");
      for (Eigen::Index i = 0; i < g.size(); ++i) sq += (g[i] - u[i]) * (g[i] - u[i]);
      CHECK(cr.divergence == doctest::Approx(std::sqrt(sq)).epsilon(1e-12));
      ++checked;
    }
  });
  CHECK(checked == 12);
}

TEST_CASE("results do not depend on workers or transport") {
  TinySetup s = tiny_setup(4, 2, 4, 9);
  s.cfg.method = MethodConfig::byol();
  s.cfg.clients_per_round = 3;
  const ExperimentResult base = run_experiment(s.cfg, s.train, s.partition);
  s.cfg.workers = 4;
  const ExperimentResult threaded = run_experiment(s.cfg, s.train, s.partition);
  s.cfg.wire_mode = true;
  const ExperimentResult wired = run_experiment(s.cfg, s.train, s.partition);
  CHECK(threaded.global.bitwise_equal(base.global));
  CHECK(wired.global.bitwise_equal(base.global));
  for (std::size_t r = 0; r < base.rounds.size(); ++r) {
    CHECK(threaded.rounds[r].participants == base.rounds[r].participants);
    for (std::size_t i = 0; i < base.rounds[r].clients.size(); ++i) {
      CHECK(threaded.rounds[r].clients[i].divergence == base.rounds[r].clients[i].divergence);
      CHECK(wired.rounds[r].clients[i].loss_mean == base.rounds[r].clients[i].loss_mean);
    }
  }
}

TEST_CASE("different seeds give different runs") {
  TinySetup s = tiny_setup(4, 2, 2, 10);
  s.cfg.method = MethodConfig::byol();
  const ExperimentResult a = run_experiment(s.cfg, s.train, s.partition);
  s.cfg.seed = 11;
  const ExperimentResult b = run_experiment(s.cfg, s.train, s.partition);
  CHECK_FALSE(a.global.bitwise_equal(b.global));
}

TEST_CASE("zero rounds returns the initial model") {
  TinySetup s = tiny_setup(4, 2, 0, 12);
  s.cfg.method = MethodConfig::byol();
  const ServerState init = init_server(s.cfg, s.train, s.partition);
  const ExperimentResult res = run_experiment(s.cfg, s.train, s.partition);
  CHECK(res.rounds.empty());
  CHECK(res.global.bitwise_equal(init.global));
}

TEST_CASE("exactly R rounds, and none beyond") {
  TinySetup s = tiny_setup(4, 2, 3, 13);
  s.cfg.method = MethodConfig::byol();
  ExperimentResult res = run_experiment(s.cfg, s.train, s.partition);
  CHECK(res.rounds.size() == 3);
  CHECK(res.final_state.round == 3);
  CHECK(error_of([&] { run_round(res.final_state, s.cfg); }) == ErrorKind::kProtocol);
}

TEST_CASE("standalone clients never see the global model") {
  TinySetup s = tiny_setup(2, 2, 3, 14);
  s.cfg.method = MethodConfig::byol();
  s.cfg.standalone = true;
  s.cfg.clients_per_round = 1;  // ignored: every client trains
  const ServerState init = init_server(s.cfg, s.train, s.partition);
  const ExperimentResult res = run_experiment(s.cfg, s.train, s.partition);
  CHECK(res.global.bitwise_equal(init.global));
  for (const auto& round : res.rounds) CHECK(round.participants == std::vector<int>{0, 1});
  CHECK_FALSE(res.final_state.clients[0].nets.online_params().bitwise_equal(
      res.final_state.clients[1].nets.online_params()));
}

TEST_CASE("setup errors") {
  TinySetup s = tiny_setup(2, 2, 2, 15);
  s.cfg.method = MethodConfig::byol();
  auto empty = s.partition;
  empty[1].clear();
  CHECK(error_of([&] { init_server(s.cfg, s.train, empty); }) == ErrorKind::kInvalidArgument);
  CHECK(error_of([&] { init_server(s.cfg, s.train, {}); }) == ErrorKind::kInvalidArgument);
  FederationConfig wide = s.cfg;
  wide.arch.encoder = MlpSpec::relu_mlp({9, 12, 6});
  CHECK(error_of([&] { init_server(wide, s.train, s.partition); }) == ErrorKind::kShapeMismatch);
  FederationConfig big_batch = s.cfg;
  big_batch.train.batch_size = 1000;
  CHECK(error_of([&] { run_experiment(big_batch, s.train, s.partition); }) ==
        ErrorKind::kInvalidArgument);
}

TEST_CASE("parallel_for rethrows after finishing") {
  std::vector<int> done(16, 0);
  CHECK_THROWS_AS(parallel_for(16, 4,
                               [&](std::size_t i) {
                                 done[i] = 1;
                                 if (i == 5) fail(ErrorKind::kNumeric, "boom");
                               }),
                  Error);
  int total = 0;
  for (int v : done) total += v;
  CHECK(total == 16);
}

}
