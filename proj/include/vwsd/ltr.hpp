#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vwsd/features.hpp"
#include "vwsd/scoring.hpp"

namespace vwsd {

// Ranker hyperparameters; the defaults are the full training configuration
// used for every reported run.
struct LtrHyperparams {
  int n_estimators = 500;
  int early_stopping_rounds = 100;
  double learning_rate = 0.03;
  double feature_fraction = 0.25;
  int max_bin = 100;
  int min_child_samples = 50;
  double reg_alpha = 0.05;  // L1 on leaf outputs
  uint64_t seed = 0;
};

struct LtrTreeNode {
  int feature = -1;        // column index; -1 marks a leaf
  double threshold = 0.0;  // value <= threshold goes left
  int left = -1;
  int right = -1;
  double value = 0.0;      // leaf output, shrinkage already applied
};

struct LtrTree {
  std::vector<LtrTreeNode> nodes;
  double predict_row(const double* row) const;
};

// Gradient-boosted tree ensemble trained with the lambdarank objective:
// pairwise lambda gradients weighted by the NDCG delta of swapping each
// (relevant, non-relevant) pair within a group. binary gain 2^label - 1,
// discount 1/log2(rank + 1).
class LtrModel {
 public:
  double predict_row(const double* row) const;

  void save(const std::filesystem::path& path) const;
  static LtrModel load(const std::filesystem::path& path);

  std::vector<LtrTree> trees;             // truncated to the best iteration
  std::vector<std::string> column_names;  // training schema
  std::string schema_fingerprint;
  int best_iteration = 0;                 // number of trees kept
  double best_validation_ndcg = 0.0;
};

// Trains on an 80-20 group-level split (trailing fraction after a seeded
// shuffle of sample ids; whole groups only). Early stopping watches
// validation NDCG@10 with the configured patience. Deterministic given the
// seed. Throws NoLabels and DegenerateSplit.
LtrModel train_ltr(const FeatureMatrix& matrix, const LtrHyperparams& params,
                   double split_fraction = 0.2);

// Per-group stable descending sort by model score. Throws SchemaMismatch
// when the matrix columns differ from the training schema.
std::vector<Ranking> predict_rank(const LtrModel& model, const FeatureMatrix& matrix);

// Mean NDCG at the group size over (scores, binary labels) groups of ten.
// Exposed because training, early stopping and the evaluation harness must
// agree on one definition.
double mean_group_ndcg(const std::vector<double>& scores, const std::vector<int>& labels,
                       const std::vector<size_t>& group_offsets);

// Number of whole groups the trailing validation split takes:
// ceil(fraction * n_groups).
size_t validation_group_count(size_t n_groups, double fraction);

}  // namespace vwsd
