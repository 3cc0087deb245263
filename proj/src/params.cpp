#include "fedssl/params.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "byte_io.hpp"
#include "fedssl/error.hpp"

namespace fedssl {
namespace {

const std::string kEncoderName{kEncoder};

}  // namespace

NamedParams& NamedParams::add(std::string name, Vector values) {
  require(!has(name), ErrorKind::kInvalidArgument, "duplicate parameter group '" + name + "'");
  groups_.emplace_back(std::move(name), std::move(values));
  return *this;
}

bool NamedParams::has(std::string_view name) const {
  return std::any_of(groups_.begin(), groups_.end(),
                     [&](const auto& g) { return g.first == name; });
}

const Vector& NamedParams::group(std::string_view name) const {
  for (const auto& [n, v] : groups_)
    if (n == name) return v;
  fail(ErrorKind::kInvalidArgument, "unknown parameter group '" + std::string(name) + "'");
}

Vector& NamedParams::group(std::string_view name) {
  return const_cast<Vector&>(std::as_const(*this).group(name));
}

std::vector<std::string> NamedParams::names() const {
  std::vector<std::string> out;
  out.reserve(groups_.size());
  for (const auto& g : groups_) out.push_back(g.first);
  return out;
}

std::size_t NamedParams::total_len() const {
  std::size_t n = 0;
  for (const auto& g : groups_) n += static_cast<std::size_t>(g.second.size());
  return n;
}

bool NamedParams::same_shape(const NamedParams& other) const {
  if (groups_.size() != other.groups_.size()) return false;
  for (std::size_t i = 0; i < groups_.size(); ++i) {
    if (groups_[i].first != other.groups_[i].first) return false;
    if (groups_[i].second.size() != other.groups_[i].second.size()) return false;
  }
  return true;
}

NamedParams NamedParams::subset(std::span<const std::string> names) const {
  NamedParams out;
  for (const auto& n : names) out.add(n, group(n));
  return out;
}

Vector NamedParams::flatten() const {
  Vector out(static_cast<Eigen::Index>(total_len()));
  Eigen::Index pos = 0;
  for (const auto& [_, v] : groups_) {
    out.segment(pos, v.size()) = v;
    pos += v.size();
  }
  return out;
}

bool NamedParams::bitwise_equal(const NamedParams& other) const {
  if (!same_shape(other)) return false;
  for (std::size_t i = 0; i < groups_.size(); ++i) {
    const auto& a = groups_[i].second;
    const auto& b = other.groups_[i].second;
    if (a.size() > 0 &&
        std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) != 0)
      return false;
  }
  return true;
}

void check_same_shape(const NamedParams& a, const NamedParams& b) {
  require(a.same_shape(b), ErrorKind::kShapeMismatch, "parameter records differ in shape");
}

NamedParams weighted_average(std::span<const WeightedParams> entries) {
  require(!entries.empty(), ErrorKind::kInvalidArgument, "weighted_average of empty list");
  double total = 0.0;
  for (const auto& e : entries) {
    require(e.params != nullptr, ErrorKind::kInvalidArgument, "null parameter entry");
    require(e.weight >= 0.0 && std::isfinite(e.weight), ErrorKind::kInvalidArgument,
            "aggregation weights must be finite and nonnegative");
    check_same_shape(*entries.front().params, *e.params);
    total += e.weight;
  }
  require(total > 0.0, ErrorKind::kInvalidArgument, "aggregation weights sum to zero");

  const NamedParams& first = *entries.front().params;
  NamedParams out;
  for (std::size_t g = 0; g < first.group_count(); ++g) {
    const auto& [name, proto] = first.groups()[g];
    Vector acc = Vector::Zero(proto.size());
    for (const auto& e : entries) acc += (e.weight / total) * e.params->groups()[g].second;
    out.add(name, std::move(acc));
  }
  return out;
}

NamedParams ema_blend(const NamedParams& local, const NamedParams& global, double mu,
                      std::span<const std::string> groups) {
  check_same_shape(local, global);
  require(mu >= 0.0 && mu <= 1.0, ErrorKind::kInvalidArgument, "mu must lie in [0, 1]");
  for (const auto& g : groups)
    require(global.has(g), ErrorKind::kInvalidArgument, "unknown parameter group '" + g + "'");

  NamedParams out = global;
  for (const auto& g : groups) out.group(g) = mu * local.group(g) + (1.0 - mu) * global.group(g);
  return out;
}

double divergence(const NamedParams& a, const NamedParams& b,
                  std::span<const std::string> groups) {
  check_same_shape(a, b);
  double sq = 0.0;
  for (const auto& g : groups) sq += (a.group(g) - b.group(g)).squaredNorm();
  return std::sqrt(sq);
}

double divergence(const NamedParams& a, const NamedParams& b) {
  return divergence(a, b, std::span<const std::string>(&kEncoderName, 1));
}

double compute_mu(double lambda, double div) {
  require(lambda >= 0.0 && div >= 0.0, ErrorKind::kInvalidArgument,
          "compute_mu needs nonnegative lambda and divergence");
  return std::min(lambda * div, 1.0);
}

double autoscale_lambda(const NamedParams& global, const NamedParams& local, double tau,
                        double eps) {
  return autoscale_lambda(global, local, tau, std::span<const std::string>(&kEncoderName, 1), eps);
}

double autoscale_lambda(const NamedParams& global, const NamedParams& local, double tau,
                        std::span<const std::string> groups, double eps) {
  require(tau >= 0.0 && tau < 1.0, ErrorKind::kInvalidArgument, "tau must lie in [0, 1)");
  const double div = divergence(global, local, groups);
  if (!(div > eps)) fail(ErrorKind::kDegenerate, "degenerate divergence");
  return tau / div;
}

std::vector<std::uint8_t> to_bytes(const NamedParams& params) {
  detail::ByteWriter w;
  w.u32(static_cast<std::uint32_t>(params.group_count()));
  for (const auto& [name, v] : params.groups()) {
    w.str(name);
    w.u64(static_cast<std::uint64_t>(v.size()));
  }
  for (const auto& [_, v] : params.groups())
    for (Eigen::Index i = 0; i < v.size(); ++i) w.f64(v[i]);
  return std::move(w.buffer());
}

namespace {

NamedParams decode(detail::ByteReader& r) {
  const std::uint32_t count = r.u32();
  std::vector<std::pair<std::string, std::uint64_t>> header;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint64_t len = r.u64();
    header.emplace_back(std::move(name), len);
  }
  NamedParams out;
  for (auto& [name, len] : header) {
    require(len <= r.remaining() / 8, ErrorKind::kIo, "truncated parameter payload");
    Vector v(static_cast<Eigen::Index>(len));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = r.f64();
    out.add(std::move(name), std::move(v));
  }
  return out;
}

}  // namespace

NamedParams from_bytes(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  NamedParams out = decode(r);
  require(r.remaining() == 0, ErrorKind::kIo, "trailing bytes after parameter record");
  return out;
}

void write_params(std::ostream& out, const NamedParams& params) {
  const auto bytes = to_bytes(params);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::kIo, "failed writing parameter record");
}

NamedParams read_params(std::istream& in) {
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in),
                                  std::istreambuf_iterator<char>()};
  return from_bytes(bytes);
}

void save_params(const std::string& path, const NamedParams& params) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot open '" + path + "' for writing");
  write_params(out, params);
}

NamedParams load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open '" + path + "'");
  return read_params(in);
}

}  // namespace fedssl
