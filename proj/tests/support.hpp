#pragma once

// Shared fixtures for the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "fedssl/fed.hpp"
#include "fedssl/losses.hpp"
#include "fedssl/rng.hpp"
#include "fedssl/ssl.hpp"

namespace fedssl::testing {

inline Vector random_vector(Eigen::Index n, Rng& rng, double scale = 1.0) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = scale * rng.normal();
  return v;
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline NamedParams single(std::vector<double> values, std::string name = "encoder") {
  NamedParams p;
  p.add(std::move(name), Eigen::Map<Vector>(values.data(), static_cast<Eigen::Index>(values.size())));
  return p;
}

inline double rel_error(double analytic, double numeric) {
  // Gradients below 1e-6 in magnitude are compared on an absolute scale.
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

/// Central difference of f at x along coordinate i.
inline double central_diff(const std::function<double(const Vector&)>& f, Vector x, Eigen::Index i,
                           double h = 1e-5) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double up = f(x);
  x[i] = x0 - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

/// Coordinates to probe: all of them when there are at most `count`,
/// otherwise `count` distinct ones drawn from rng.
inline std::vector<Eigen::Index> probe_coords(Eigen::Index n, std::size_t count, Rng& rng) {
  std::vector<Eigen::Index> all(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  if (all.size() <= count) return all;
  rng.shuffle(std::span<Eigen::Index>(all));
  all.resize(count);
  return all;
}

/// Max relative error between grad and central differences of f over the
/// probed coordinates.
inline double max_fd_error(const std::function<double(const Vector&)>& f, const Vector& x,
                           const Vector& grad, std::size_t count, Rng& rng,
                           std::size_t* probed = nullptr) {
  double worst = 0.0;
  const auto coords = probe_coords(x.size(), count, rng);
  for (Eigen::Index i : coords) worst = std::max(worst, rel_error(grad[i], central_diff(f, x, i)));
  if (probed) *probed = coords.size();
  return worst;
}

struct PipelineCheck {
  double online_error = 0.0;
  double target_error = 0.0;       // separate target without stop-gradient only
  std::size_t online_coords = 0;
  std::size_t target_coords = 0;
  bool target_grad_zero = true;    // separate target under stop-gradient
};

/// Compares ssl_gradients for `method` against central differences of the
/// training loss over random small networks. Under stop-gradient the target
/// branch is held fixed, which is the function the online gradient is of.
inline PipelineCheck check_pipeline(const MethodConfig& method, std::uint64_t seed,
                                    std::size_t coords = 150) {
  Rng rng(seed);
  ArchSpec arch;
  arch.encoder = MlpSpec::relu_mlp({6, 9, 5});
  arch.predictor = MlpSpec::relu_mlp({5, 8, 5}, true);
  const NamedParams global = init_global_params(method, arch, rng);
  MethodConfig m = method;
  m.queue_size = 12;
  ClientNets nets = ClientNets::create(m, arch, global, rng);
  if (nets.target_encoder)
    nets.set_target_params(nets.online_encoder.params() + random_vector(nets.online_encoder.params().size(), rng, 0.1));
  const Matrix v1 = random_matrix(6, 6, rng), v2 = random_matrix(6, 6, rng);

  // Aliased target under stop-gradient: evaluate against a detached copy.
  MethodConfig eval = m;
  ClientNets probe = nets;
  if (m.stop_gradient && nets.target_aliased()) {
    eval.weight_sharing = false;
    eval.target_ema = true;
    probe = ClientNets::create(eval, arch, global, rng);
    probe.set_online_params(nets.online_params());
    probe.set_target_params(nets.online_encoder.params());
    if (nets.queue) probe.queue = nets.queue;
  }

  const StepGradients g = ssl_gradients(nets, m, v1, v2);
  PipelineCheck out;
  const NamedParams online = nets.online_params();
  auto f_online = [&](const Vector& flat) {
    ClientNets n = probe;
    NamedParams p = online;
    Eigen::Index off = 0;
    for (const auto& name : p.names()) {
      Vector& v = p.group(name);
      v = flat.segment(off, v.size());
      off += v.size();
    }
    n.set_online_params(p);
    if (!m.stop_gradient && n.target_aliased()) return ssl_gradients(n, m, v1, v2).loss;
    return ssl_gradients(n, eval, v1, v2).loss;
  };
  out.online_error = max_fd_error(f_online, online.flatten(), g.online.flatten(), coords, rng,
                                  &out.online_coords);
  if (g.target) {
    if (m.stop_gradient) {
      out.target_grad_zero = g.target->isZero(0.0);
    } else {
      auto f_target = [&](const Vector& t) {
        ClientNets n = nets;
        n.set_target_params(t);
        return ssl_gradients(n, m, v1, v2).loss;
      };
      out.target_error = max_fd_error(f_target, nets.target().params(), *g.target, coords, rng,
                                      &out.target_coords);
    }
  }
  return out;
}

/// Small federation used by protocol tests: tiny blobs, narrow networks.
struct TinySetup {
  Dataset train;
  std::vector<std::vector<std::size_t>> partition;
  FederationConfig cfg;
};

/// `l` classes per client; clients * l must be a multiple of `classes`.
inline TinySetup tiny_setup(int clients, int l, int rounds, std::uint64_t seed, int classes = 4,
                            int per_class = 24) {
  TinySetup s;
  BlobSpec spec;
  spec.classes = classes;
  spec.per_class = per_class;
  spec.test_per_class = 4;
  spec.dim = 8;
  spec.spread = 0.5;
  s.train = make_blob_splits(spec, seed).train;
  s.partition = partition_non_iid(s.train, {clients, l, seed});
  s.cfg.arch.encoder = MlpSpec::relu_mlp({8, 12, 6});
  s.cfg.arch.predictor = MlpSpec::relu_mlp({6, 10, 6}, true);
  s.cfg.train.epochs = 1;
  s.cfg.train.batch_size = 8;
  s.cfg.base_lr = 0.1;
  s.cfg.rounds = rounds;
  s.cfg.seed = seed;
  return s;
}

}  // namespace fedssl::testing
