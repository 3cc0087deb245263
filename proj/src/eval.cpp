#include "fedssl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"

#include "fedssl/error.hpp"
#include "fedssl/rng.hpp"

namespace fedssl {
namespace {

Matrix safe_normalize(Matrix x) {
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double n = x.row(i).norm();
    if (n > 0.0) x.row(i) /= n;
  }
  return x;
}

}  // namespace

double knn_accuracy(const Matrix& train_emb, const std::vector<int>& train_labels,
                    const Matrix& test_emb, const std::vector<int>& test_labels, int num_classes,
                    int k) {
  require(train_emb.rows() > 0 && test_emb.rows() > 0, ErrorKind::kInvalidArgument,
          "kNN needs nonempty train and test sets");
  require(k >= 1 && k <= train_emb.rows(), ErrorKind::kInvalidArgument, "k out of range");

  const Matrix tr = safe_normalize(train_emb);
  const Matrix te = safe_normalize(test_emb);
  const Matrix dist = (-(te * tr.transpose())).array() + 1.0;

  std::vector<Eigen::Index> idx(static_cast<std::size_t>(tr.rows()));
  std::vector<int> votes(static_cast<std::size_t>(num_classes));
  std::vector<double> dsum(static_cast<std::size_t>(num_classes));
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < te.rows(); ++i) {
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](Eigen::Index a, Eigen::Index b) {
      const double da = dist(i, a), db = dist(i, b);
      return da < db || (da == db && a < b);
    });
    std::fill(votes.begin(), votes.end(), 0);
    std::fill(dsum.begin(), dsum.end(), 0.0);
    for (int j = 0; j < k; ++j) {
      const auto t = static_cast<std::size_t>(idx[static_cast<std::size_t>(j)]);
      const auto y = static_cast<std::size_t>(train_labels[t]);
      ++votes[y];
      dsum[y] += dist(i, static_cast<Eigen::Index>(t));
    }
    int best = 0;
    for (int c = 1; c < num_classes; ++c) {
      const auto cs = static_cast<std::size_t>(c), bs = static_cast<std::size_t>(best);
      if (votes[cs] > votes[bs] || (votes[cs] == votes[bs] && votes[cs] > 0 && dsum[cs] < dsum[bs]))
        best = c;
    }
    if (best == test_labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(te.rows());
}

double knn_eval(const Network& encoder, const Dataset& train, const Dataset& test, int k) {
  require(train.size() > 0 && test.size() > 0, ErrorKind::kInvalidArgument,
          "kNN needs nonempty train and test sets");
  return knn_accuracy(encoder.infer(train.samples), train.labels, encoder.infer(test.samples),
                      test.labels, std::max(train.num_classes, test.num_classes), k);
}

double linear_eval(const Network& encoder, const Dataset& train, const Dataset& test,
                   const LinearEvalSpec& spec) {
  require(train.size() > 0 && test.size() > 0, ErrorKind::kInvalidArgument,
          "linear evaluation needs nonempty train and test sets");
  require(spec.epochs >= 0 && spec.batch_size >= 1 && spec.lr >= 0.0, ErrorKind::kInvalidArgument,
          "invalid linear evaluation settings");

  Matrix xtr = encoder.infer(train.samples);
  Matrix xte = encoder.infer(test.samples);
  const Eigen::RowVectorXd mean = xtr.colwise().mean();
  xtr.rowwise() -= mean;
  xte.rowwise() -= mean;
  const Eigen::RowVectorXd inv_std =
      ((xtr.colwise().squaredNorm() / static_cast<double>(xtr.rows())).array() + 1e-8)
          .rsqrt()
          .matrix();
  xtr = xtr.array().rowwise() * inv_std.array();
  xte = xte.array().rowwise() * inv_std.array();

  const int classes = std::max(train.num_classes, test.num_classes);
  const Eigen::Index d = xtr.cols();
  Rng rng(SeedPath(spec.seed).key("linear-eval"));
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix w(d, classes);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
  Eigen::RowVectorXd b(classes);
  for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = rng.uniform(-bound, bound);

  const Eigen::Index n = xtr.rows();
  const Eigen::Index bs = std::min<Eigen::Index>(spec.batch_size, n);
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), std::size_t{0});
  Matrix xb(bs, d);
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (Eigen::Index start = 0; start + bs <= n; start += bs) {
      for (Eigen::Index r = 0; r < bs; ++r)
        xb.row(r) = xtr.row(static_cast<Eigen::Index>(order[static_cast<std::size_t>(start + r)]));
      Matrix logits = xb * w;
      logits.rowwise() += b;
      Matrix g(bs, classes);
      double loss = 0.0;
      for (Eigen::Index r = 0; r < bs; ++r) {
        const double mx = logits.row(r).maxCoeff();
        const Eigen::RowVectorXd e = (logits.row(r).array() - mx).exp();
        const double denom = e.sum();
        const int y = train.labels[order[static_cast<std::size_t>(start + r)]];
        loss += -(logits(r, y) - mx - std::log(denom));
        g.row(r) = e / denom;
        g(r, y) -= 1.0;
      }
      require(std::isfinite(loss), ErrorKind::kNumeric, "non-finite linear evaluation loss");
      g /= static_cast<double>(bs);
      w -= spec.lr * (xb.transpose() * g);
      b -= spec.lr * g.colwise().sum();
    }
  }

  Matrix logits = xte * w;
  logits.rowwise() += b;
  std::size_t correct = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index arg;
    logits.row(r).maxCoeff(&arg);
    if (static_cast<int>(arg) == test.labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

double collapse_stat(const Matrix& embeddings) {
  if (embeddings.rows() == 0) return 0.0;
  const Matrix y = safe_normalize(embeddings);
  const Eigen::RowVectorXd mean = y.colwise().mean();
  const Matrix centered = y.rowwise() - mean;
  const Eigen::RowVectorXd sd =
      (centered.colwise().squaredNorm() / static_cast<double>(y.rows())).cwiseSqrt();
  return sd.mean();
}

double collapse_stat(const Network& encoder, const Matrix& probe) {
  require(probe.rows() > 0, ErrorKind::kInvalidArgument, "collapse probe is empty");
  return collapse_stat(encoder.infer(probe));
}

double collapse_threshold(int embedding_dim) {
  return 0.1 / std::sqrt(static_cast<double>(embedding_dim));
}

std::string to_json_line(const EvalReport& report) {
  nlohmann::json j;
  j["run_id"] = report.run_id;
  j["round"] = report.round;
  j["knn_acc"] = report.knn_acc;
  j["linear_acc"] = report.linear_acc;
  j["collapse_stat"] = report.collapse;
  nlohmann::json div = nlohmann::json::object();
  for (const auto& [client, values] : report.per_round_divergence)
    div[std::to_string(client)] = values;
  j["per_round_divergence"] = std::move(div);
  return j.dump();
}

}  // namespace fedssl
