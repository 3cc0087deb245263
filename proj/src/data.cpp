#include "fedssl/data.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>
#include <numeric>

#include "byte_io.hpp"
#include "fedssl/error.hpp"

namespace fedssl {

void Dataset::validate() const {
  require(num_classes >= 1, ErrorKind::kInvalidArgument, "dataset needs at least one class");
  require(static_cast<std::size_t>(samples.rows()) == labels.size(), ErrorKind::kShapeMismatch,
          "sample and label counts differ");
  std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
  for (int y : labels) {
    require(y >= 0 && y < num_classes, ErrorKind::kInvalidArgument, "label out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  for (int c : counts) require(c > 0, ErrorKind::kInvalidArgument, "dataset has an empty class");
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.num_classes = num_classes;
  out.samples.resize(static_cast<Eigen::Index>(indices.size()), samples.cols());
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < size(), ErrorKind::kInvalidArgument, "subset index out of range");
    out.samples.row(static_cast<Eigen::Index>(i)) = samples.row(static_cast<Eigen::Index>(indices[i]));
    out.labels.push_back(labels[indices[i]]);
  }
  return out;
}

namespace {

constexpr int kCenterRetries = 1000;

Dataset sample_clusters(const Matrix& centers, int per_class, double spread, Rng& rng) {
  const int classes = static_cast<int>(centers.rows());
  Dataset ds;
  ds.num_classes = classes;
  ds.samples.resize(static_cast<Eigen::Index>(classes) * per_class, centers.cols());
  ds.labels.reserve(static_cast<std::size_t>(classes) * static_cast<std::size_t>(per_class));
  Eigen::Index row = 0;
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < per_class; ++i, ++row) {
      for (Eigen::Index j = 0; j < centers.cols(); ++j)
        ds.samples(row, j) = centers(c, j) + spread * rng.normal();
      ds.labels.push_back(c);
    }
  }
  return ds;
}

}  // namespace

BlobData make_blob_splits(const BlobSpec& spec, std::uint64_t seed) {
  require(spec.classes >= 2, ErrorKind::kInvalidArgument, "need at least two classes");
  require(spec.per_class >= 2, ErrorKind::kInvalidArgument, "need at least two samples per class");
  require(spec.test_per_class >= 0, ErrorKind::kInvalidArgument, "negative test size");
  require(spec.dim >= 1, ErrorKind::kInvalidArgument, "dimension must be positive");
  require(spec.spread >= 0.0, ErrorKind::kInvalidArgument, "spread must be nonnegative");

  const SeedPath root = SeedPath(seed).key("blobs");
  Rng center_rng(root.key("centers"));
  Matrix centers(spec.classes, spec.dim);
  bool placed = false;
  for (int attempt = 0; attempt < kCenterRetries && !placed; ++attempt) {
    for (Eigen::Index i = 0; i < centers.size(); ++i) centers.data()[i] = center_rng.normal();
    placed = true;
    for (int a = 0; a < spec.classes && placed; ++a)
      for (int b = a + 1; b < spec.classes && placed; ++b)
        placed = (centers.row(a) - centers.row(b)).norm() >= 4.0 * spec.spread;
  }
  require(placed, ErrorKind::kDegenerate,
          "cannot place separated blob centers; lower spread or raise dim");

  BlobData out;
  Rng train_rng(root.key("train"));
  Rng test_rng(root.key("test"));
  out.train = sample_clusters(centers, spec.per_class, spec.spread, train_rng);
  if (spec.test_per_class > 0)
    out.test = sample_clusters(centers, spec.test_per_class, spec.spread, test_rng);
  else
    out.test.num_classes = spec.classes;
  out.centers = std::move(centers);
  return out;
}

Dataset make_blobs(int classes, int per_class, int dim, double spread, std::uint64_t seed) {
  BlobSpec spec{classes, per_class, 0, dim, spread};
  return make_blob_splits(spec, seed).train;
}

std::vector<std::vector<std::size_t>> partition_non_iid(const Dataset& ds,
                                                        const PartitionSpec& spec) {
  const int k = spec.clients;
  const int l = spec.classes_per_client;
  const int c = ds.num_classes;
  require(k >= 1 && l >= 1, ErrorKind::kInvalidArgument, "clients and classes per client must be positive");
  require(l <= c, ErrorKind::kInvalidArgument, "classes per client exceeds class count");
  require((k * l) % c == 0, ErrorKind::kInvalidArgument,
          "clients * classes_per_client must be a multiple of the class count");
  ds.validate();

  const int sets_per_class = k * l / c;
  const SeedPath root = SeedPath(spec.seed).key("partition");

  // Shuffle each class and cut it into equal contiguous sets.
  std::vector<std::vector<std::vector<std::size_t>>> sets(static_cast<std::size_t>(c));
  {
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(c));
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    Rng rng(root.key("shuffle"));
    for (int cls = 0; cls < c; ++cls) {
      auto& idx = by_class[static_cast<std::size_t>(cls)];
      rng.shuffle(std::span<std::size_t>(idx));
      const std::size_t per_set = idx.size() / static_cast<std::size_t>(sets_per_class);
      require(per_set >= 1, ErrorKind::kInvalidArgument, "class too small to split into sets");
      for (int s = 0; s < sets_per_class; ++s) {
        auto first = idx.begin() + static_cast<std::ptrdiff_t>(per_set * static_cast<std::size_t>(s));
        sets[static_cast<std::size_t>(cls)].emplace_back(first, first + static_cast<std::ptrdiff_t>(per_set));
      }
    }
  }

  constexpr int kAssignRetries = 100;
  Rng assign_rng(root.key("assign"));
  for (int attempt = 0; attempt < kAssignRetries; ++attempt) {
    std::vector<int> order(static_cast<std::size_t>(c));
    std::iota(order.begin(), order.end(), 0);
    assign_rng.shuffle(std::span<int>(order));

    std::vector<std::vector<int>> client_classes(static_cast<std::size_t>(k));
    std::vector<std::vector<std::size_t>> parts(static_cast<std::size_t>(k));
    bool ok = true;
    std::size_t slot = 0;
    for (int cls : order) {
      for (const auto& set : sets[static_cast<std::size_t>(cls)]) {
        const std::size_t client = slot++ % static_cast<std::size_t>(k);
        auto& owned = client_classes[client];
        if (std::find(owned.begin(), owned.end(), cls) != owned.end()) ok = false;
        owned.push_back(cls);
        parts[client].insert(parts[client].end(), set.begin(), set.end());
      }
    }
    if (!ok) continue;
    for (auto& p : parts) std::sort(p.begin(), p.end());
    return parts;
  }
  fail(ErrorKind::kDegenerate, "no partition without duplicate classes per client");
}

void write_partition(const std::string& path,
                     const std::vector<std::vector<std::size_t>>& parts) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot open '" + path + "' for writing");
  for (std::size_t k = 0; k < parts.size(); ++k) {
    out << k << ':';
    for (std::size_t i : parts[k]) out << ' ' << i;
    out << '\n';
  }
  require(static_cast<bool>(out), ErrorKind::kIo, "failed writing '" + path + "'");
}

bool AugSpec::is_identity() const {
  return noise_sigma == 0.0 && mask_prob == 0.0 && scale_lo == 1.0 && scale_hi == 1.0;
}

Eigen::RowVectorXd augment(const Eigen::RowVectorXd& sample, const AugSpec& aug, Rng& rng) {
  Eigen::RowVectorXd v = sample;
  if (aug.noise_sigma > 0.0)
    for (Eigen::Index j = 0; j < v.size(); ++j) v[j] += aug.noise_sigma * rng.normal();
  if (aug.mask_prob > 0.0)
    for (Eigen::Index j = 0; j < v.size(); ++j)
      if (rng.bernoulli(aug.mask_prob)) v[j] = 0.0;
  if (aug.scale_lo != 1.0 || aug.scale_hi != 1.0) v *= rng.uniform(aug.scale_lo, aug.scale_hi);
  return v;
}

Matrix augment(const Matrix& batch, const AugSpec& aug, Rng& rng) {
  Matrix out(batch.rows(), batch.cols());
  for (Eigen::Index i = 0; i < batch.rows(); ++i)
    out.row(i) = augment(Eigen::RowVectorXd(batch.row(i)), aug, rng);
  return out;
}

std::pair<Eigen::RowVectorXd, Eigen::RowVectorXd> two_views(const Eigen::RowVectorXd& sample,
                                                            const AugSpec& aug, Rng& rng) {
  auto first = augment(sample, aug, rng);
  auto second = augment(sample, aug, rng);
  return {std::move(first), std::move(second)};
}

void save_dataset(const std::string& path, const Dataset& ds) {
  ds.validate();
  require(ds.num_classes <= 256, ErrorKind::kInvalidArgument, "label bytes hold at most 256 classes");
  detail::ByteWriter w;
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(static_cast<std::uint32_t>(ds.dim()));
  w.u32(static_cast<std::uint32_t>(ds.num_classes));
  for (Eigen::Index i = 0; i < ds.samples.rows(); ++i)
    for (Eigen::Index j = 0; j < ds.samples.cols(); ++j)
      w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(ds.samples(i, j))));
  for (int y : ds.labels) w.u8(static_cast<std::uint8_t>(y));

  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(w.buffer().data()),
            static_cast<std::streamsize>(w.buffer().size()));
  require(static_cast<bool>(out), ErrorKind::kIo, "failed writing '" + path + "'");
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open '" + path + "'");
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in),
                                        std::istreambuf_iterator<char>()};
  detail::ByteReader r(bytes);
  const std::uint32_t n = r.u32();
  const std::uint32_t d = r.u32();
  Dataset ds;
  ds.num_classes = static_cast<int>(r.u32());
  require(r.remaining() == static_cast<std::size_t>(n) * d * 4 + n, ErrorKind::kIo,
          "dataset file size does not match its header");
  ds.samples.resize(n, d);
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t j = 0; j < d; ++j)
      ds.samples(i, j) = static_cast<double>(std::bit_cast<float>(r.u32()));
  ds.labels.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) ds.labels.push_back(r.u8());
  ds.validate();
  return ds;
}

}  // namespace fedssl
