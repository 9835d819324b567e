#pragma once

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "vwsd/dataset.hpp"
#include "vwsd/embeddings.hpp"

namespace vwsd {

// Canonical scores are always higher-is-better: cosine passes through,
// euclidean/manhattan distances are negated at this boundary.
enum class Metric { cosine, euclidean, manhattan };

const char* metric_name(Metric metric);
Metric metric_from_name(const std::string& name);

// Canonical similarity. cosine is in [-1, 1]; distances return the negated
// distance (<= 0, 0 iff u == v). Throws DimMismatch, and ZeroVector for
// cosine against an all-zero vector.
double similarity(const Embedding& u, const Embedding& v, Metric metric);

// Per-image penalty subtracted from retrieval scores to demote images that
// look similar to many phrases of the split:
//   p(i) = alpha * mean over phrases t' of cosine(t', i)
// Always cosine in the joint space, regardless of the ranking metric, so the
// penalty stays on the bounded scale the score subtracts from.
struct PenaltyTable {
  std::string space_id;
  double alpha = 1.0;
  std::unordered_map<std::string, double> values;
};

PenaltyTable compute_penalty(const std::vector<Embedding>& phrase_embs,
                             const std::map<std::string, Embedding>& image_embs,
                             double alpha);

// An ordering of one sample's ten candidates. candidates is a permutation of
// the sample's candidate list; scores are aligned and non-increasing; ties
// keep the original candidate order.
struct Ranking {
  int sample_id = 0;
  std::vector<std::string> candidates;
  std::vector<double> scores;
};

// Stable descending sort of (candidates, scores); shared by every ranking
// producer so tie behaviour is identical everywhere.
Ranking make_ranking(int sample_id, const std::vector<std::string>& candidates,
                     const std::vector<double>& scores);

// Penalty-adjusted vision-language ranking:
//   score(candidate) = similarity(phrase_emb, candidate_emb) - p(candidate)
// with the penalty term dropped when penalty is null. Works identically for
// the original phrase and for an LLM-enhanced phrase; only the embedding
// passed in changes.
Ranking rank_vl(const Sample& sample, const Embedding& phrase_emb,
                const std::unordered_map<std::string, Embedding>& candidate_embs,
                Metric metric, const PenaltyTable* penalty);

}  // namespace vwsd
