#pragma once

// Parameter-vector algebra: named groups of dense vectors plus the
// aggregation, interpolation and divergence rules built on top of them.

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace fedssl {

using Vector = Eigen::VectorXd;

inline constexpr std::string_view kEncoder = "encoder";
inline constexpr std::string_view kPredictor = "predictor";

/// Flat parameter vector partitioned into named groups, kept in insertion
/// order. Binary operations require identical group names and lengths.
class NamedParams {
 public:
  NamedParams() = default;

  /// Appends a group; throws on a duplicate name.
  NamedParams& add(std::string name, Vector values);

  bool has(std::string_view name) const;
  const Vector& group(std::string_view name) const;
  Vector& group(std::string_view name);

  std::size_t group_count() const { return groups_.size(); }
  std::vector<std::string> names() const;
  const std::vector<std::pair<std::string, Vector>>& groups() const { return groups_; }

  std::size_t total_len() const;

  bool same_shape(const NamedParams& other) const;

  /// Sub-record holding only the listed groups, in the listed order.
  NamedParams subset(std::span<const std::string> names) const;

  /// Concatenation of all groups in order.
  Vector flatten() const;

  /// True when every scalar has the same bit pattern as in `other`.
  bool bitwise_equal(const NamedParams& other) const;

 private:
  std::vector<std::pair<std::string, Vector>> groups_;
};

/// Throws ErrorKind::kShapeMismatch unless `a` and `b` have the same groups.
void check_same_shape(const NamedParams& a, const NamedParams& b);

struct WeightedParams {
  const NamedParams* params;
  double weight;
};

/// Convex combination; weights are normalized to sum to one, so raw sample
/// counts may be passed directly.
NamedParams weighted_average(std::span<const WeightedParams> entries);

/// Listed groups become mu*local + (1-mu)*global; the rest are copied from
/// `global`.
NamedParams ema_blend(const NamedParams& local, const NamedParams& global, double mu,
                      std::span<const std::string> groups);

/// Euclidean norm of (a - b) over the listed groups.
double divergence(const NamedParams& a, const NamedParams& b,
                  std::span<const std::string> groups);

/// Encoder-only divergence.
double divergence(const NamedParams& a, const NamedParams& b);

/// min(lambda * div, 1).
double compute_mu(double lambda, double div);

inline constexpr double kDegenerateDivergence = 1e-9;

/// tau / ||global - local|| on the encoder group. Throws
/// ErrorKind::kDegenerate when the divergence is below `eps`.
double autoscale_lambda(const NamedParams& global, const NamedParams& local, double tau,
                        double eps = kDegenerateDivergence);
/// Same over the listed groups.
double autoscale_lambda(const NamedParams& global, const NamedParams& local, double tau,
                        std::span<const std::string> groups, double eps = kDegenerateDivergence);

// Binary record: u32 group count; per group u32 name length, name bytes,
// u64 element count; then every element as a little-endian IEEE-754 double,
// groups in order.
void write_params(std::ostream& out, const NamedParams& params);
NamedParams read_params(std::istream& in);
std::vector<std::uint8_t> to_bytes(const NamedParams& params);
NamedParams from_bytes(std::span<const std::uint8_t> bytes);

void save_params(const std::string& path, const NamedParams& params);
NamedParams load_params(const std::string& path);

}  // namespace fedssl
