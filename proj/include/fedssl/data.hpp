#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedssl/nn.hpp"
#include "fedssl/rng.hpp"

namespace fedssl {

struct Dataset {
  Matrix samples;           // [N x d]
  std::vector<int> labels;  // [N], each in [0, num_classes)
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
  int dim() const { return static_cast<int>(samples.cols()); }

  /// Throws ErrorKind::kInvalidArgument unless labels are in range and every
  /// class is present.
  void validate() const;

  Dataset subset(std::span<const std::size_t> indices) const;
};

struct BlobSpec {
  int classes = 10;
  int per_class = 100;
  int test_per_class = 50;
  int dim = 32;
  double spread = 1.3;

  bool operator==(const BlobSpec&) const = default;
};

struct BlobData {
  Dataset train;
  Dataset test;
  Matrix centers;
};

/// Isotropic Gaussian clusters of standard deviation `spread` around
/// standard-normal centers, with every pair of centers at least 4*spread
/// apart (redrawn up to a bounded number of times). Train and test splits
/// share centers. Samples are ordered by class.
BlobData make_blob_splits(const BlobSpec& spec, std::uint64_t seed);

/// Training split only.
Dataset make_blobs(int classes, int per_class, int dim, double spread, std::uint64_t seed);

struct PartitionSpec {
  int clients = 5;            // K
  int classes_per_client = 2; // l
  std::uint64_t seed = 0;
};

/// Label-skew split: each class is shuffled and cut into K*l/C equal sets,
/// and every client receives l sets of l distinct classes. Sets are dealt
/// round-robin over a seeded class permutation. Returns sorted sample
/// indices per client.
std::vector<std::vector<std::size_t>> partition_non_iid(const Dataset& ds,
                                                        const PartitionSpec& spec);

/// One "client: i0 i1 ..." line per client.
void write_partition(const std::string& path,
                     const std::vector<std::vector<std::size_t>>& parts);

struct AugSpec {
  double noise_sigma = 1.5;
  double mask_prob = 0.4;
  double scale_lo = 0.8;
  double scale_hi = 1.2;

  bool is_identity() const;
  bool operator==(const AugSpec&) const = default;
};

/// One draw: add N(0, sigma^2) noise per coordinate, zero each coordinate
/// with probability p, multiply by a uniform scale from [lo, hi].
Eigen::RowVectorXd augment(const Eigen::RowVectorXd& sample, const AugSpec& aug, Rng& rng);
Matrix augment(const Matrix& batch, const AugSpec& aug, Rng& rng);

std::pair<Eigen::RowVectorXd, Eigen::RowVectorXd> two_views(const Eigen::RowVectorXd& sample,
                                                            const AugSpec& aug, Rng& rng);

// Binary dataset file: u32 N, u32 d, u32 C (little-endian), then N*d
// little-endian float32 values row by row, then N label bytes.
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

}  // namespace fedssl
