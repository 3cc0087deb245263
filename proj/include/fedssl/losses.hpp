#pragma once

#include <cstddef>
#include <deque>

#include "fedssl/nn.hpp"

namespace fedssl {

/// Loss value plus gradients w.r.t. both inputs. Callers decide whether the
/// second gradient is used (it is dropped under stop-gradient).
struct LossGrad {
  double value = 0.0;
  Matrix grad_a;
  Matrix grad_b;
};

/// mean_i (2 - 2 cos(p_i, z_i)). Throws ErrorKind::kNumeric on a zero row.
LossGrad neg_cosine_loss(const Matrix& p, const Matrix& z);

/// NT-Xent over the 2B views [z1; z2]. Rows are L2-normalized first; the
/// positive of view i is its pair, the other 2B-2 views are negatives.
/// The loss is the mean over all 2B anchors.
LossGrad nt_xent_loss(const Matrix& z1, const Matrix& z2, double temperature);

/// Queue-based InfoNCE. q and k rows are L2-normalized; queue rows are used
/// as given. Logits for row i are [q_i.k_i, q_i.queue_j...] / temperature
/// with the positive at index 0. grad_b is w.r.t. k.
LossGrad info_nce_queue_loss(const Matrix& q, const Matrix& k, const Matrix& queue,
                             double temperature);

/// Fixed-capacity FIFO of embeddings. Enqueueing past capacity evicts the
/// oldest rows first.
class EmbeddingQueue {
 public:
  EmbeddingQueue(std::size_t capacity, int dim);

  void enqueue(const Matrix& rows);
  Matrix as_matrix() const;  // oldest first

  std::size_t size() const { return rows_.size(); }
  std::size_t capacity() const { return capacity_; }
  int dim() const { return dim_; }

 private:
  std::size_t capacity_;
  int dim_;
  std::deque<Eigen::RowVectorXd> rows_;
};

/// Row-wise L2 normalization; throws ErrorKind::kNumeric on a zero row.
Matrix normalize_rows(const Matrix& x);

}  // namespace fedssl
