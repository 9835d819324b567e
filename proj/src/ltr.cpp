#include "vwsd/ltr.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "vwsd/detrng.hpp"
#include "vwsd/errors.hpp"

namespace vwsd {

using nlohmann::json;

namespace {

constexpr int kNumLeaves = 31;          // leaf-wise growth cap
constexpr double kSigmoid = 1.0;        // lambdarank sigmoid steepness
constexpr double kMinChildHessian = 1e-3;
constexpr double kMinSplitGain = 1e-12;
constexpr double kMinHessianGuard = 1e-12;

double label_gain(int label) { return std::pow(2.0, label) - 1.0; }
double position_discount(size_t pos0) { return 1.0 / std::log2(static_cast<double>(pos0) + 2.0); }

// L1 soft threshold used in both leaf values and split gains.
double threshold_l1(double sum_grad, double alpha) {
  if (sum_grad > alpha) return sum_grad - alpha;
  if (sum_grad < -alpha) return sum_grad + alpha;
  return 0.0;
}

double leaf_objective(double sum_grad, double sum_hess, double alpha) {
  if (sum_hess < kMinHessianGuard) return 0.0;
  const double t = threshold_l1(sum_grad, alpha);
  return t * t / sum_hess;
}

double leaf_value(double sum_grad, double sum_hess, double alpha) {
  if (sum_hess < kMinHessianGuard) return 0.0;
  return -threshold_l1(sum_grad, alpha) / sum_hess;
}

// Stable score-descending order of rows [begin, end).
std::vector<size_t> sorted_by_score(const std::vector<double>& scores, size_t begin,
                                    size_t end) {
  std::vector<size_t> order(end - begin);
  std::iota(order.begin(), order.end(), begin);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  return order;
}

double group_inverse_max_dcg(const std::vector<int>& labels, size_t begin, size_t end) {
  std::vector<int> sorted(labels.begin() + static_cast<long>(begin),
                          labels.begin() + static_cast<long>(end));
  std::sort(sorted.begin(), sorted.end(), std::greater<int>());
  double max_dcg = 0.0;
  for (size_t p = 0; p < sorted.size(); ++p) {
    max_dcg += label_gain(sorted[p]) * position_discount(p);
  }
  return max_dcg > 0.0 ? 1.0 / max_dcg : 0.0;
}

// Lambdarank gradients for one group, LightGBM-style: every pair with
// differing labels contributes a sigmoid-weighted lambda scaled by the NDCG
// delta of swapping the pair, with the score-distance regularizer and the
// log2 sum normalization.
void group_lambda_gradients(const std::vector<double>& scores,
                            const std::vector<int>& labels, size_t begin, size_t end,
                            double inv_max_dcg, std::vector<double>& grad,
                            std::vector<double>& hess) {
  if (inv_max_dcg <= 0.0) return;  // no relevant document in the group
  const auto order = sorted_by_score(scores, begin, end);
  const double best_score = scores[order.front()];
  const double worst_score = scores[order.back()];

  double sum_lambdas = 0.0;
  for (size_t i = 0; i + 1 < order.size(); ++i) {
    for (size_t j = i + 1; j < order.size(); ++j) {
      if (labels[order[i]] == labels[order[j]]) continue;
      const bool i_high = labels[order[i]] > labels[order[j]];
      const size_t pos_high = i_high ? i : j;
      const size_t pos_low = i_high ? j : i;
      const size_t high = order[pos_high];
      const size_t low = order[pos_low];

      const double delta_score = scores[high] - scores[low];
      const double dcg_gap = label_gain(labels[high]) - label_gain(labels[low]);
      const double paired_discount =
          std::fabs(position_discount(pos_high) - position_discount(pos_low));
      double delta_ndcg = dcg_gap * paired_discount * inv_max_dcg;
      if (best_score != worst_score) {
        delta_ndcg /= (0.01 + std::fabs(delta_score));
      }

      const double sig = 1.0 / (1.0 + std::exp(kSigmoid * delta_score));
      const double lambda = -kSigmoid * delta_ndcg * sig;  // negative
      const double hessian = kSigmoid * kSigmoid * delta_ndcg * sig * (1.0 - sig);

      grad[high] += lambda;
      grad[low] -= lambda;
      hess[high] += hessian;
      hess[low] += hessian;
      sum_lambdas -= 2.0 * lambda;
    }
  }
  if (sum_lambdas > 0.0) {
    const double factor = std::log2(1.0 + sum_lambdas) / sum_lambdas;
    for (size_t r = begin; r < end; ++r) {
      grad[r] *= factor;
      hess[r] *= factor;
    }
  }
}

// --- histogram tree learner ------------------------------------------------

struct FeatureBins {
  std::vector<double> edges;  // value <= edges[b] -> bin b; last bin is open
  int n_bins() const { return static_cast<int>(edges.size()) + 1; }
};

// Quantile-style binning over the training values of one feature.
FeatureBins build_bins(const FeatureMatrix& matrix, const std::vector<size_t>& rows,
                       size_t feature, int max_bin) {
  std::vector<double> values;
  values.reserve(rows.size());
  for (size_t r : rows) values.push_back(matrix.row(r)[feature]);
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());

  FeatureBins bins;
  if (values.size() <= 1) return bins;  // constant feature, single bin
  if (static_cast<int>(values.size()) <= max_bin) {
    bins.edges.reserve(values.size() - 1);
    for (size_t i = 0; i + 1 < values.size(); ++i) {
      bins.edges.push_back(values[i] + (values[i + 1] - values[i]) / 2.0);
    }
    return bins;
  }
  bins.edges.reserve(static_cast<size_t>(max_bin) - 1);
  for (int b = 1; b < max_bin; ++b) {
    const size_t idx = values.size() * static_cast<size_t>(b) / static_cast<size_t>(max_bin);
    const double edge = values[idx - 1] + (values[idx] - values[idx - 1]) / 2.0;
    if (bins.edges.empty() || edge > bins.edges.back()) bins.edges.push_back(edge);
  }
  return bins;
}

uint16_t bin_of(const FeatureBins& bins, double value) {
  const auto it = std::lower_bound(bins.edges.begin(), bins.edges.end(), value);
  return static_cast<uint16_t>(it - bins.edges.begin());
}

struct HistEntry {
  double grad = 0.0;
  double hess = 0.0;
  int count = 0;
};

struct SplitChoice {
  double gain = 0.0;
  int feature = -1;  // index into the tree's feature subset
  int bin = -1;      // last bin routed left
  double grad_left = 0.0, hess_left = 0.0;
  int count_left = 0;
  bool valid() const { return feature >= 0; }
};

struct OpenLeaf {
  int node = -1;
  std::vector<size_t> rows;
  double sum_grad = 0.0;
  double sum_hess = 0.0;
  SplitChoice best;
};

}  // namespace

double LtrTree::predict_row(const double* row) const {
  if (nodes.empty()) return 0.0;
  int idx = 0;
  while (nodes[idx].feature >= 0) {
    const LtrTreeNode& n = nodes[idx];
    idx = row[n.feature] <= n.threshold ? n.left : n.right;
  }
  return nodes[idx].value;
}

double LtrModel::predict_row(const double* row) const {
  double score = 0.0;
  for (const auto& tree : trees) score += tree.predict_row(row);
  return score;
}

void LtrModel::save(const std::filesystem::path& path) const {
  json doc;
  doc["columns"] = column_names;
  doc["schema_fingerprint"] = schema_fingerprint;
  doc["best_iteration"] = best_iteration;
  doc["best_validation_ndcg"] = best_validation_ndcg;
  json jtrees = json::array();
  for (const auto& tree : trees) {
    json jnodes = json::array();
    for (const auto& n : tree.nodes) {
      jnodes.push_back({{"f", n.feature},
                        {"t", n.threshold},
                        {"l", n.left},
                        {"r", n.right},
                        {"v", n.value}});
    }
    jtrees.push_back(std::move(jnodes));
  }
  doc["trees"] = std::move(jtrees);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error(ErrorCode::IoError, "cannot write model to " + path.string());
  }
  out << doc.dump() << '\n';
}

LtrModel LtrModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::IoError, "cannot read model from " + path.string());
  }
  json doc = json::parse(in);
  LtrModel model;
  model.column_names = doc.at("columns").get<std::vector<std::string>>();
  model.schema_fingerprint = doc.at("schema_fingerprint").get<std::string>();
  model.best_iteration = doc.at("best_iteration").get<int>();
  model.best_validation_ndcg = doc.value("best_validation_ndcg", 0.0);
  for (const auto& jnodes : doc.at("trees")) {
    LtrTree tree;
    for (const auto& jn : jnodes) {
      LtrTreeNode n;
      n.feature = jn.at("f").get<int>();
      n.threshold = jn.at("t").get<double>();
      n.left = jn.at("l").get<int>();
      n.right = jn.at("r").get<int>();
      n.value = jn.at("v").get<double>();
      tree.nodes.push_back(n);
    }
    model.trees.push_back(std::move(tree));
  }
  return model;
}

double mean_group_ndcg(const std::vector<double>& scores, const std::vector<int>& labels,
                       const std::vector<size_t>& group_offsets) {
  if (group_offsets.size() < 2) return 0.0;
  double total = 0.0;
  size_t groups = 0;
  for (size_t g = 0; g + 1 < group_offsets.size(); ++g) {
    const size_t begin = group_offsets[g];
    const size_t end = group_offsets[g + 1];
    const double inv_max = group_inverse_max_dcg(labels, begin, end);
    if (inv_max <= 0.0) {
      total += 1.0;  // no relevant document: nothing to get wrong
      ++groups;
      continue;
    }
    const auto order = sorted_by_score(scores, begin, end);
    double dcg = 0.0;
    for (size_t p = 0; p < order.size(); ++p) {
      dcg += label_gain(labels[order[p]]) * position_discount(p);
    }
    total += dcg * inv_max;
    ++groups;
  }
  return total / static_cast<double>(groups);
}

namespace {

// Builds one regression tree over the pre-binned rows with the sampled
// feature subset.
LtrTree build_tree(const std::vector<size_t>& root_rows, const std::vector<double>& grad,
                   const std::vector<double>& hess,
                   const std::vector<int>& feature_subset,
                   const std::vector<FeatureBins>& bins,
                   const std::vector<std::vector<uint16_t>>& binned,
                   const LtrHyperparams& params) {
  LtrTree tree;
  tree.nodes.push_back(LtrTreeNode{});

  auto find_best_split = [&](OpenLeaf& leaf) {
    leaf.best = SplitChoice{};
    if (leaf.rows.size() < 2 * static_cast<size_t>(params.min_child_samples)) return;
    const double parent_obj = leaf_objective(leaf.sum_grad, leaf.sum_hess, params.reg_alpha);

    for (size_t fi = 0; fi < feature_subset.size(); ++fi) {
      const int feature = feature_subset[fi];
      const FeatureBins& fb = bins[static_cast<size_t>(feature)];
      const int n_bins = fb.n_bins();
      if (n_bins < 2) continue;

      std::vector<HistEntry> hist(static_cast<size_t>(n_bins));
      const auto& codes = binned[static_cast<size_t>(feature)];
      for (size_t r : leaf.rows) {
        HistEntry& h = hist[codes[r]];
        h.grad += grad[r];
        h.hess += hess[r];
        h.count += 1;
      }

      double g_left = 0.0, h_left = 0.0;
      int c_left = 0;
      for (int b = 0; b + 1 < n_bins; ++b) {
        g_left += hist[static_cast<size_t>(b)].grad;
        h_left += hist[static_cast<size_t>(b)].hess;
        c_left += hist[static_cast<size_t>(b)].count;
        const int c_right = static_cast<int>(leaf.rows.size()) - c_left;
        if (c_left < params.min_child_samples) continue;
        if (c_right < params.min_child_samples) break;
        const double g_right = leaf.sum_grad - g_left;
        const double h_right = leaf.sum_hess - h_left;
        if (h_left < kMinChildHessian || h_right < kMinChildHessian) continue;
        const double gain = leaf_objective(g_left, h_left, params.reg_alpha) +
                            leaf_objective(g_right, h_right, params.reg_alpha) - parent_obj;
        if (gain > leaf.best.gain + kMinSplitGain) {
          leaf.best.gain = gain;
          leaf.best.feature = static_cast<int>(fi);
          leaf.best.bin = b;
          leaf.best.grad_left = g_left;
          leaf.best.hess_left = h_left;
          leaf.best.count_left = c_left;
        }
      }
    }
  };

  std::vector<OpenLeaf> open;
  {
    OpenLeaf root;
    root.node = 0;
    root.rows = root_rows;
    for (size_t r : root.rows) {
      root.sum_grad += grad[r];
      root.sum_hess += hess[r];
    }
    find_best_split(root);
    open.push_back(std::move(root));
  }

  int n_leaves = 1;
  while (n_leaves < kNumLeaves) {
    // best-first: the open leaf with the highest gain
    int best_idx = -1;
    for (size_t i = 0; i < open.size(); ++i) {
      if (!open[i].best.valid()) continue;
      if (best_idx < 0 || open[i].best.gain > open[static_cast<size_t>(best_idx)].best.gain) {
        best_idx = static_cast<int>(i);
      }
    }
    if (best_idx < 0) break;

    OpenLeaf leaf = std::move(open[static_cast<size_t>(best_idx)]);
    open.erase(open.begin() + best_idx);

    const int feature = feature_subset[static_cast<size_t>(leaf.best.feature)];
    const FeatureBins& fb = bins[static_cast<size_t>(feature)];
    const double threshold = fb.edges[static_cast<size_t>(leaf.best.bin)];
    const auto& codes = binned[static_cast<size_t>(feature)];

    OpenLeaf left, right;
    left.rows.reserve(static_cast<size_t>(leaf.best.count_left));
    right.rows.reserve(leaf.rows.size() - static_cast<size_t>(leaf.best.count_left));
    for (size_t r : leaf.rows) {
      (codes[r] <= leaf.best.bin ? left.rows : right.rows).push_back(r);
    }
    left.sum_grad = leaf.best.grad_left;
    left.sum_hess = leaf.best.hess_left;
    right.sum_grad = leaf.sum_grad - left.sum_grad;
    right.sum_hess = leaf.sum_hess - left.sum_hess;

    left.node = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back(LtrTreeNode{});
    right.node = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back(LtrTreeNode{});

    LtrTreeNode& parent = tree.nodes[static_cast<size_t>(leaf.node)];
    parent.feature = feature;
    parent.threshold = threshold;
    parent.left = left.node;
    parent.right = right.node;

    find_best_split(left);
    find_best_split(right);
    open.push_back(std::move(left));
    open.push_back(std::move(right));
    ++n_leaves;
  }

  for (const auto& leaf : open) {
    tree.nodes[static_cast<size_t>(leaf.node)].value =
        params.learning_rate * leaf_value(leaf.sum_grad, leaf.sum_hess, params.reg_alpha);
  }
  return tree;
}

}  // namespace

size_t validation_group_count(size_t n_groups, double fraction) {
  return static_cast<size_t>(std::ceil(fraction * static_cast<double>(n_groups)));
}

LtrModel train_ltr(const FeatureMatrix& matrix, const LtrHyperparams& params,
                   double split_fraction) {
  if (!matrix.has_labels()) {
    throw Error(ErrorCode::NoLabels, "training requires a labeled feature matrix");
  }
  const size_t n_groups = matrix.n_groups();
  const size_t n_features = matrix.n_cols();
  if (n_groups == 0 || n_features == 0) {
    throw Error(ErrorCode::DegenerateSplit, "empty feature matrix");
  }

  // group-level split: seeded shuffle, trailing fraction becomes validation
  std::vector<size_t> group_order(n_groups);
  std::iota(group_order.begin(), group_order.end(), 0);
  DetRng split_rng(params.seed ^ 0x5eedf00dULL);
  split_rng.shuffle(group_order);

  const size_t n_valid = validation_group_count(n_groups, split_fraction);
  if (n_valid == 0 || n_valid >= n_groups) {
    throw Error(ErrorCode::DegenerateSplit,
                "split fraction " + std::to_string(split_fraction) + " leaves " +
                    std::to_string(n_valid) + " of " + std::to_string(n_groups) +
                    " groups for validation");
  }
  std::vector<size_t> train_groups(group_order.begin(),
                                   group_order.end() - static_cast<long>(n_valid));
  std::vector<size_t> valid_groups(group_order.end() - static_cast<long>(n_valid),
                                   group_order.end());

  auto expand_rows = [&](const std::vector<size_t>& groups) {
    std::vector<size_t> rows;
    rows.reserve(groups.size() * kCandidatesPerSample);
    for (size_t g : groups) {
      for (int j = 0; j < kCandidatesPerSample; ++j) {
        rows.push_back(g * kCandidatesPerSample + static_cast<size_t>(j));
      }
    }
    return rows;
  };
  const std::vector<size_t> train_rows = expand_rows(train_groups);

  // bins from training rows only; codes for all rows
  std::vector<FeatureBins> bins(n_features);
  std::vector<std::vector<uint16_t>> binned(n_features);
  for (size_t f = 0; f < n_features; ++f) {
    bins[f] = build_bins(matrix, train_rows, f, params.max_bin);
    binned[f].resize(matrix.n_rows());
    for (size_t r = 0; r < matrix.n_rows(); ++r) {
      binned[f][r] = bin_of(bins[f], matrix.row(r)[f]);
    }
  }

  std::vector<double> scores(matrix.n_rows(), 0.0);
  std::vector<double> grad(matrix.n_rows());
  std::vector<double> hess(matrix.n_rows());

  std::vector<double> train_inv_max_dcg(train_groups.size());
  for (size_t i = 0; i < train_groups.size(); ++i) {
    const size_t begin = train_groups[i] * kCandidatesPerSample;
    train_inv_max_dcg[i] = group_inverse_max_dcg(matrix.labels, begin,
                                                 begin + kCandidatesPerSample);
  }

  // validation views, stable group order
  std::vector<size_t> valid_offsets;
  std::vector<double> valid_scores;
  std::vector<int> valid_labels;
  valid_offsets.push_back(0);
  for (size_t g : valid_groups) {
    for (int j = 0; j < kCandidatesPerSample; ++j) {
      const size_t r = g * kCandidatesPerSample + static_cast<size_t>(j);
      valid_scores.push_back(0.0);
      valid_labels.push_back(matrix.labels[r]);
    }
    valid_offsets.push_back(valid_scores.size());
  }

  const int n_sampled = std::max(
      1, static_cast<int>(std::ceil(params.feature_fraction * static_cast<double>(n_features))));

  LtrModel model;
  model.column_names = matrix.column_names;
  model.schema_fingerprint = matrix.schema_fingerprint();

  std::vector<LtrTree> all_trees;
  double best_ndcg = -std::numeric_limits<double>::infinity();
  int best_iteration = 0;

  for (int iter = 0; iter < params.n_estimators; ++iter) {
    std::fill(grad.begin(), grad.end(), 0.0);
    std::fill(hess.begin(), hess.end(), 0.0);
    for (size_t i = 0; i < train_groups.size(); ++i) {
      const size_t begin = train_groups[i] * kCandidatesPerSample;
      group_lambda_gradients(scores, matrix.labels, begin, begin + kCandidatesPerSample,
                             train_inv_max_dcg[i], grad, hess);
    }

    // per-iteration feature subset
    std::vector<int> features(n_features);
    std::iota(features.begin(), features.end(), 0);
    DetRng feature_rng(params.seed * 0x9e3779b97f4a7c15ULL +
                       static_cast<uint64_t>(iter) * 0xbf58476d1ce4e5b9ULL + 1);
    feature_rng.shuffle(features);
    features.resize(static_cast<size_t>(std::min<size_t>(
        static_cast<size_t>(n_sampled), features.size())));
    std::sort(features.begin(), features.end());

    LtrTree tree = build_tree(train_rows, grad, hess, features, bins, binned, params);

    for (size_t r : train_rows) scores[r] += tree.predict_row(matrix.row(r));
    {
      size_t vi = 0;
      for (size_t g : valid_groups) {
        for (int j = 0; j < kCandidatesPerSample; ++j, ++vi) {
          const size_t r = g * kCandidatesPerSample + static_cast<size_t>(j);
          valid_scores[vi] += tree.predict_row(matrix.row(r));
        }
      }
    }
    all_trees.push_back(std::move(tree));

    const double ndcg = mean_group_ndcg(valid_scores, valid_labels, valid_offsets);
    if (ndcg > best_ndcg + 1e-12) {
      best_ndcg = ndcg;
      best_iteration = iter + 1;
    } else if (iter + 1 - best_iteration >= params.early_stopping_rounds) {
      break;
    }
  }

  model.best_iteration = best_iteration;
  model.best_validation_ndcg = best_ndcg;
  all_trees.resize(static_cast<size_t>(best_iteration));
  model.trees = std::move(all_trees);
  return model;
}

std::vector<Ranking> predict_rank(const LtrModel& model, const FeatureMatrix& matrix) {
  if (model.column_names != matrix.column_names ||
      model.schema_fingerprint != matrix.schema_fingerprint()) {
    throw Error(ErrorCode::SchemaMismatch,
                "feature matrix columns do not match the training schema");
  }
  std::vector<Ranking> rankings;
  rankings.reserve(matrix.n_groups());
  for (size_t g = 0; g < matrix.n_groups(); ++g) {
    std::vector<std::string> candidates;
    std::vector<double> scores;
    candidates.reserve(kCandidatesPerSample);
    scores.reserve(kCandidatesPerSample);
    for (int j = 0; j < kCandidatesPerSample; ++j) {
      const size_t r = g * kCandidatesPerSample + static_cast<size_t>(j);
      candidates.push_back(matrix.candidate_ids[r]);
      scores.push_back(model.predict_row(matrix.row(r)));
    }
    rankings.push_back(make_ranking(matrix.sample_ids[g], candidates, scores));
  }
  return rankings;
}

}  // namespace vwsd
