#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedssl/data.hpp"
#include "fedssl/nn.hpp"

namespace fedssl {

inline constexpr int kDefaultKnnK = 5;

/// Classifies every test embedding by majority vote among its k nearest
/// train embeddings under cosine distance. Ties go to the smaller summed
/// distance, then to the smaller label. Returns top-1 accuracy.
double knn_eval(const Network& encoder, const Dataset& train, const Dataset& test,
                int k = kDefaultKnnK);

/// kNN on precomputed embeddings (same rules as knn_eval).
double knn_accuracy(const Matrix& train_emb, const std::vector<int>& train_labels,
                    const Matrix& test_emb, const std::vector<int>& test_labels, int num_classes,
                    int k);

struct LinearEvalSpec {
  int epochs = 100;
  double lr = 0.5;
  int batch_size = 64;
  std::uint64_t seed = 0;
};

/// Trains a softmax linear head with plain SGD on frozen encoder embeddings
/// (standardized with train-set feature statistics) and returns test top-1
/// accuracy. The encoder is taken by const reference and never modified.
double linear_eval(const Network& encoder, const Dataset& train, const Dataset& test,
                   const LinearEvalSpec& spec);

/// Mean over dimensions of the per-dimension standard deviation of the
/// L2-normalized embeddings of `probe`. Zero rows stay zero.
double collapse_stat(const Network& encoder, const Matrix& probe);
double collapse_stat(const Matrix& embeddings);

/// 0.1 / sqrt(d).
double collapse_threshold(int embedding_dim);

struct EvalReport {
  std::string run_id;
  int round = 0;
  double knn_acc = 0.0;
  double linear_acc = 0.0;
  double collapse = 0.0;
  std::map<int, std::vector<double>> per_round_divergence;
};

/// One JSON object on one line.
std::string to_json_line(const EvalReport& report);

}  // namespace fedssl
