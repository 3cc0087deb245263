#include <sstream>

#include "doctest.h"
#include "fedssl/error.hpp"
#include "fedssl/params.hpp"
#include "support.hpp"

using namespace fedssl;
using fedssl::testing::random_vector;
using fedssl::testing::single;

namespace {

const std::vector<std::string> kEnc{"encoder"};
const std::vector<std::string> kBoth{"encoder", "predictor"};

NamedParams two_groups(Rng& rng, Eigen::Index ne = 5, Eigen::Index np = 3) {
  NamedParams p;
  p.add("encoder", random_vector(ne, rng));
  p.add("predictor", random_vector(np, rng));
  return p;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::kInvalidArgument;
}

}  // namespace

TEST_SUITE("params") {

TEST_CASE("NamedParams keeps insertion order and totals") {
  NamedParams p;
  p.add("b", Vector::Ones(3)).add("a", Vector::Zero(2));
  CHECK(p.names() == std::vector<std::string>{"b", "a"});
  CHECK(p.total_len() == 5);
  CHECK(p.flatten().size() == 5);
  CHECK(p.flatten()[0] == 1.0);
  CHECK(kind_of([&] { p.add("a", Vector::Zero(1)); }) == ErrorKind::kInvalidArgument);
  CHECK_THROWS_AS(p.group("missing"), Error);
}

TEST_CASE("weighted_average examples") {
  const NamedParams a = single({0, 2});
  const NamedParams b = single({2, 0});
  {
    const WeightedParams e[] = {{&a, 1.0}};
    const NamedParams r = weighted_average(e);
    CHECK(r.group("encoder")[0] == 0.0);
    CHECK(r.group("encoder")[1] == 2.0);
  }
  {
    const WeightedParams e[] = {{&a, 0.5}, {&b, 0.5}};
    const NamedParams r = weighted_average(e);
    CHECK(r.group("encoder")[0] == 1.0);
    CHECK(r.group("encoder")[1] == 1.0);
  }
}

TEST_CASE("weighted_average matches a scalar loop oracle") {
  Rng rng(11);
  std::vector<NamedParams> xs;
  for (int i = 0; i < 3; ++i) xs.push_back(single({rng.normal(), rng.normal(), rng.normal(), rng.normal(), rng.normal()}));
  const double w[] = {0.2, 0.3, 0.5};
  const WeightedParams e[] = {{&xs[0], w[0]}, {&xs[1], w[1]}, {&xs[2], w[2]}};
  const NamedParams r = weighted_average(e);
  for (int j = 0; j < 5; ++j) {
    double expect = 0.0;
    for (int i = 0; i < 3; ++i) expect += w[i] * xs[static_cast<std::size_t>(i)].group("encoder")[j];
    CHECK(std::abs(r.group("encoder")[j] - expect) <= 1e-12);
  }
}

TEST_CASE("weighted_average normalizes raw counts") {
  const NamedParams a = single({0, 2});
  const NamedParams b = single({2, 0});
  const WeightedParams raw[] = {{&a, 150.0}, {&b, 50.0}};
  const WeightedParams norm[] = {{&a, 0.75}, {&b, 0.25}};
  CHECK((weighted_average(raw).flatten() - weighted_average(norm).flatten()).norm() <= 1e-12);
}

TEST_CASE("weighted_average of identical vectors returns the vector") {
  Rng rng(3);
  const NamedParams x = two_groups(rng);
  std::vector<WeightedParams> e(7, WeightedParams{&x, 1.0});
  CHECK((weighted_average(e).flatten() - x.flatten()).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("weighted_average errors") {
  const NamedParams a = single({0, 2});
  const NamedParams b = single({1, 2, 3});
  const NamedParams c = single({1, 2}, "predictor");
  CHECK(kind_of([] { weighted_average({}); }) == ErrorKind::kInvalidArgument);
  {
    const WeightedParams e[] = {{&a, 1.0}, {&b, 1.0}};
    CHECK(kind_of([&] { weighted_average(e); }) == ErrorKind::kShapeMismatch);
  }
  {
    const WeightedParams e[] = {{&a, 1.0}, {&c, 1.0}};
    CHECK(kind_of([&] { weighted_average(e); }) == ErrorKind::kShapeMismatch);
  }
  {
    const WeightedParams e[] = {{&a, 0.0}, {&a, 0.0}};
    CHECK(kind_of([&] { weighted_average(e); }) == ErrorKind::kInvalidArgument);
  }
  {
    const WeightedParams e[] = {{&a, -1.0}, {&a, 2.0}};
    CHECK(kind_of([&] { weighted_average(e); }) == ErrorKind::kInvalidArgument);
  }
}

TEST_CASE("ema_blend examples") {
  Rng rng(5);
  const NamedParams l = two_groups(rng);
  const NamedParams g = two_groups(rng);
  CHECK(ema_blend(l, g, 0.0, kBoth).bitwise_equal(g));
  CHECK(ema_blend(l, g, 1.0, kBoth).bitwise_equal(l));

  const NamedParams r = ema_blend(single({0, 2}), single({2, 0}), 0.25, kEnc);
  CHECK(r.group("encoder")[0] == 1.5);
  CHECK(r.group("encoder")[1] == 0.5);
}

TEST_CASE("ema_blend copies unlisted groups from global") {
  Rng rng(6);
  const NamedParams l = two_groups(rng);
  const NamedParams g = two_groups(rng);
  const NamedParams r = ema_blend(l, g, 0.3, kEnc);
  CHECK(r.group("predictor") == g.group("predictor"));
  CHECK(r.group("encoder") != g.group("encoder"));
}

TEST_CASE("ema_blend equals a two-entry weighted average") {
  Rng rng(7);
  for (double mu : {0.0, 0.1, 0.37, 0.5, 0.9, 1.0}) {
    const NamedParams l = two_groups(rng);
    const NamedParams g = two_groups(rng);
    const WeightedParams e[] = {{&l, mu}, {&g, 1.0 - mu}};
    const double diff = (ema_blend(l, g, mu, kBoth).flatten() - weighted_average(e).flatten())
                            .cwiseAbs()
                            .maxCoeff();
    CHECK(diff <= 1e-12);
  }
}

TEST_CASE("ema_blend errors") {
  const NamedParams a = single({0, 2});
  CHECK(kind_of([&] { ema_blend(a, a, -0.1, kEnc); }) == ErrorKind::kInvalidArgument);
  CHECK(kind_of([&] { ema_blend(a, a, 1.1, kEnc); }) == ErrorKind::kInvalidArgument);
  CHECK(kind_of([&] { ema_blend(a, a, 0.5, kBoth); }) == ErrorKind::kInvalidArgument);
  CHECK(kind_of([&] { ema_blend(a, single({1, 2, 3}), 0.5, kEnc); }) == ErrorKind::kShapeMismatch);
}

TEST_CASE("divergence examples and oracle") {
  CHECK(divergence(single({1, 2}), single({1, 2})) == 0.0);
  CHECK(divergence(single({3, 4}), single({0, 0})) == 5.0);

  Rng rng(8);
  const NamedParams a = single({rng.normal(), rng.normal(), rng.normal(), rng.normal(),
                                rng.normal(), rng.normal(), rng.normal(), rng.normal()});
  const NamedParams b = single({rng.normal(), rng.normal(), rng.normal(), rng.normal(),
                                rng.normal(), rng.normal(), rng.normal(), rng.normal()});
  double ss = 0.0;
  for (int i = 0; i < 8; ++i) {
    const double d = a.group("encoder")[i] - b.group("encoder")[i];
    ss += d * d;
  }
  CHECK(std::abs(divergence(a, b) - std::sqrt(ss)) <= 1e-12);
}

TEST_CASE("divergence defaults to the encoder and can include the predictor") {
  Rng rng(9);
  const NamedParams a = two_groups(rng);
  const NamedParams b = two_groups(rng);
  const double enc = (a.group("encoder") - b.group("encoder")).norm();
  const double all = (a.flatten() - b.flatten()).norm();
  CHECK(std::abs(divergence(a, b) - enc) <= 1e-12);
  CHECK(std::abs(divergence(a, b, kBoth) - all) <= 1e-12);
}

TEST_CASE("divergence is a metric on random triples") {
  Rng rng(10);
  for (int t = 0; t < 50; ++t) {
    const NamedParams a = two_groups(rng), b = two_groups(rng), c = two_groups(rng);
    CHECK(divergence(a, b) == divergence(b, a));
    CHECK(divergence(a, b) > 0.0);
    CHECK(divergence(a, c) <= divergence(a, b) + divergence(b, c) + 1e-12);
  }
  CHECK_THROWS_AS(divergence(single({1}), single({1, 2})), Error);
}

TEST_CASE("compute_mu examples and properties") {
  CHECK(compute_mu(0.0, 123.0) == 0.0);
  CHECK(compute_mu(0.8, 0.5) == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(compute_mu(2.0, 3.0) == 1.0);
  CHECK(kind_of([] { compute_mu(-1.0, 1.0); }) == ErrorKind::kInvalidArgument);
  CHECK(kind_of([] { compute_mu(1.0, -1.0); }) == ErrorKind::kInvalidArgument);

  double prev = 0.0;
  for (double l = 0.0; l <= 3.0; l += 0.05) {
    const double mu = compute_mu(l, 0.7);
    CHECK(mu >= prev);
    CHECK(mu <= 1.0);
    prev = mu;
  }
  prev = 0.0;
  for (double d = 0.0; d <= 3.0; d += 0.05) {
    const double mu = compute_mu(0.9, d);
    CHECK(mu >= prev);
    CHECK(mu <= 1.0);
    prev = mu;
  }
}

TEST_CASE("autoscale_lambda examples") {
  const NamedParams zero = single({0, 0});
  CHECK(autoscale_lambda(single({1.4, 0}), zero, 0.7) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(autoscale_lambda(single({0, 0.7}), zero, 0.7) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(autoscale_lambda(single({2.0, 0}), zero, 0.7) == doctest::Approx(0.35).epsilon(1e-15));
}

TEST_CASE("autoscaled mu equals tau at calibration") {
  Rng rng(12);
  for (double tau : {0.0, 0.1, 0.5, 0.7, 0.9, 0.999}) {
    const NamedParams g = two_groups(rng), l = two_groups(rng);
    const double lambda = autoscale_lambda(g, l, tau);
    CHECK(std::abs(compute_mu(lambda, divergence(g, l)) - tau) <= 1e-12);
  }
}

TEST_CASE("autoscale_lambda errors") {
  const NamedParams a = single({1, 2});
  CHECK(kind_of([&] { autoscale_lambda(a, a, 0.7); }) == ErrorKind::kDegenerate);
  CHECK(kind_of([&] { autoscale_lambda(a, single({1, 2 + 1e-12}), 0.7); }) == ErrorKind::kDegenerate);
  CHECK(kind_of([&] { autoscale_lambda(a, single({0, 0}), 1.0); }) == ErrorKind::kInvalidArgument);
  CHECK(kind_of([&] { autoscale_lambda(a, single({0, 0}), -0.1); }) == ErrorKind::kInvalidArgument);
}

TEST_CASE("serialization round-trips bitwise") {
  Rng rng(13);
  NamedParams p = two_groups(rng, 17, 4);
  p.group("encoder")[3] = -0.0;
  p.group("encoder")[4] = 1e-310;
  CHECK(from_bytes(to_bytes(p)).bitwise_equal(p));
  std::stringstream ss;
  write_params(ss, p);
  CHECK(read_params(ss).bitwise_equal(p));
}

TEST_CASE("serialized layout") {
  const std::vector<std::uint8_t> bytes = to_bytes(single({1.0}, "ab"));
  // u32 count, u32 name length, "ab", u64 length, one double
  REQUIRE(bytes.size() == 4 + 4 + 2 + 8 + 8);
  CHECK(bytes[0] == 1);
  CHECK(bytes[4] == 2);
  CHECK(bytes[8] == 'a');
  CHECK(bytes[10] == 1);
  CHECK(bytes[18 + 7] == 0x3F);
  CHECK(bytes[18 + 6] == 0xF0);
}

TEST_CASE("truncated records are rejected") {
  std::vector<std::uint8_t> bytes = to_bytes(single({1.0, 2.0}));
  bytes.pop_back();
  CHECK(kind_of([&] { from_bytes(bytes); }) == ErrorKind::kIo);
}

}  // TEST_SUITE
