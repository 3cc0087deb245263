#include "fedssl/losses.hpp"

#include <cmath>

#include "fedssl/error.hpp"

namespace fedssl {
namespace {

void check_pair(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::kShapeMismatch,
          "loss inputs differ in shape");
  require(a.rows() > 0, ErrorKind::kInvalidArgument, "loss needs a nonempty batch");
}

Eigen::VectorXd row_norms(const Matrix& x) {
  Eigen::VectorXd n = x.rowwise().norm();
  for (Eigen::Index i = 0; i < n.size(); ++i)
    require(n[i] > 0.0 && std::isfinite(n[i]), ErrorKind::kNumeric, "zero-norm embedding row");
  return n;
}

// Pulls a gradient w.r.t. normalized rows y = x/|x| back to x.
Matrix normalize_backward(const Matrix& y, const Eigen::VectorXd& norms, const Matrix& gy) {
  Matrix gx(gy.rows(), gy.cols());
  for (Eigen::Index i = 0; i < gy.rows(); ++i)
    gx.row(i) = (gy.row(i) - y.row(i) * y.row(i).dot(gy.row(i))) / norms[i];
  return gx;
}

}  // namespace

Matrix normalize_rows(const Matrix& x) {
  const Eigen::VectorXd n = row_norms(x);
  Matrix y = x;
  for (Eigen::Index i = 0; i < y.rows(); ++i) y.row(i) /= n[i];
  return y;
}

LossGrad neg_cosine_loss(const Matrix& p, const Matrix& z) {
  check_pair(p, z);
  const Eigen::VectorXd np = row_norms(p);
  const Eigen::VectorXd nz = row_norms(z);
  const double b = static_cast<double>(p.rows());

  LossGrad out;
  out.grad_a.resize(p.rows(), p.cols());
  out.grad_b.resize(z.rows(), z.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double dot = p.row(i).dot(z.row(i));
    const double cos = dot / (np[i] * nz[i]);
    total += 2.0 - 2.0 * cos;
    // d cos / dp = z/(|p||z|) - cos p/|p|^2
    out.grad_a.row(i) =
        (-2.0 / b) * (z.row(i) / (np[i] * nz[i]) - cos * p.row(i) / (np[i] * np[i]));
    out.grad_b.row(i) =
        (-2.0 / b) * (p.row(i) / (np[i] * nz[i]) - cos * z.row(i) / (nz[i] * nz[i]));
  }
  out.value = total / b;
  return out;
}

LossGrad nt_xent_loss(const Matrix& z1, const Matrix& z2, double temperature) {
  check_pair(z1, z2);
  require(z1.rows() >= 2, ErrorKind::kInvalidArgument, "NT-Xent needs at least two samples");
  require(temperature > 0.0, ErrorKind::kInvalidArgument, "temperature must be positive");

  const Eigen::Index b = z1.rows();
  const Eigen::Index n = 2 * b;
  Matrix raw(n, z1.cols());
  raw << z1, z2;
  const Eigen::VectorXd norms = row_norms(raw);
  Matrix h = raw;
  for (Eigen::Index i = 0; i < n; ++i) h.row(i) /= norms[i];

  const Matrix logits = (h * h.transpose()) / temperature;
  // Softmax over j != i for every anchor i, computed with a max shift.
  Matrix prob = Matrix::Zero(n, n);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index pos = i < b ? i + b : i - b;
    double mx = -INFINITY;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) mx = std::max(mx, logits(i, j));
    double denom = 0.0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) denom += std::exp(logits(i, j) - mx);
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) prob(i, j) = std::exp(logits(i, j) - mx) / denom;
    total += -(logits(i, pos) - mx - std::log(denom));
  }

  // dL/dlogits(i,j) = (prob(i,j) - [j == pos(i)]) / n; logits symmetric in h.
  Matrix gl = prob;
  for (Eigen::Index i = 0; i < n; ++i) gl(i, i < b ? i + b : i - b) -= 1.0;
  gl /= static_cast<double>(n);
  const Matrix gh = ((gl + gl.transpose()) * h) / temperature;
  const Matrix graw = normalize_backward(h, norms, gh);

  LossGrad out;
  out.value = total / static_cast<double>(n);
  out.grad_a = graw.topRows(b);
  out.grad_b = graw.bottomRows(b);
  return out;
}

LossGrad info_nce_queue_loss(const Matrix& q, const Matrix& k, const Matrix& queue,
                             double temperature) {
  check_pair(q, k);
  require(queue.rows() >= 1, ErrorKind::kInvalidArgument, "InfoNCE needs a nonempty queue");
  require(queue.cols() == q.cols(), ErrorKind::kShapeMismatch, "queue width mismatch");
  require(temperature > 0.0, ErrorKind::kInvalidArgument, "temperature must be positive");

  const Eigen::VectorXd nq = row_norms(q);
  const Eigen::VectorXd nk = row_norms(k);
  Matrix qh = q, kh = k;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    qh.row(i) /= nq[i];
    kh.row(i) /= nk[i];
  }

  const Eigen::Index b = q.rows();
  const Eigen::Index m = queue.rows() + 1;
  Matrix logits(b, m);
  logits.col(0) = qh.cwiseProduct(kh).rowwise().sum() / temperature;
  logits.rightCols(m - 1) = (qh * queue.transpose()) / temperature;

  Matrix gl(b, m);
  double total = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const double mx = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp();
    const double denom = e.sum();
    total += -(logits(i, 0) - mx - std::log(denom));
    gl.row(i) = e / denom;
    gl(i, 0) -= 1.0;
  }
  gl /= static_cast<double>(b);

  Matrix gq = (gl.col(0).asDiagonal() * kh + gl.rightCols(m - 1) * queue) / temperature;
  Matrix gk = (gl.col(0).asDiagonal() * qh) / temperature;

  LossGrad out;
  out.value = total / static_cast<double>(b);
  out.grad_a = normalize_backward(qh, nq, gq);
  out.grad_b = normalize_backward(kh, nk, gk);
  return out;
}

EmbeddingQueue::EmbeddingQueue(std::size_t capacity, int dim) : capacity_(capacity), dim_(dim) {
  require(capacity >= 1, ErrorKind::kInvalidArgument, "queue capacity must be positive");
  require(dim >= 1, ErrorKind::kInvalidArgument, "queue width must be positive");
}

void EmbeddingQueue::enqueue(const Matrix& rows) {
  require(rows.cols() == dim_, ErrorKind::kShapeMismatch, "queue width mismatch");
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    rows_.push_back(rows.row(i));
    if (rows_.size() > capacity_) rows_.pop_front();
  }
}

Matrix EmbeddingQueue::as_matrix() const {
  Matrix out(static_cast<Eigen::Index>(rows_.size()), dim_);
  for (std::size_t i = 0; i < rows_.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = rows_[i];
  return out;
}

}  // namespace fedssl
