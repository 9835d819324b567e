#include "vwsd/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vwsd/errors.hpp"

namespace vwsd {

const char* metric_name(Metric metric) {
  switch (metric) {
    case Metric::cosine: return "cosine";
    case Metric::euclidean: return "euclidean";
    case Metric::manhattan: return "manhattan";
  }
  return "?";
}

Metric metric_from_name(const std::string& name) {
  if (name == "cosine") return Metric::cosine;
  if (name == "euclidean") return Metric::euclidean;
  if (name == "manhattan") return Metric::manhattan;
  throw Error(ErrorCode::InvalidArgument, "unknown metric '" + name + "'");
}

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double cosine(const Embedding& u, const Embedding& v) {
  const double nu = std::sqrt(dot(u.values, u.values));
  const double nv = std::sqrt(dot(v.values, v.values));
  if (nu == 0.0 || nv == 0.0) {
    throw Error(ErrorCode::ZeroVector, "cosine is undefined for an all-zero vector");
  }
  return dot(u.values, v.values) / (nu * nv);
}

}  // namespace

double similarity(const Embedding& u, const Embedding& v, Metric metric) {
  if (u.dim() != v.dim()) {
    throw Error(ErrorCode::DimMismatch, "similarity between dims " +
                                            std::to_string(u.dim()) + " and " +
                                            std::to_string(v.dim()));
  }
  switch (metric) {
    case Metric::cosine:
      return cosine(u, v);
    case Metric::euclidean: {
      double s = 0.0;
      for (size_t i = 0; i < u.dim(); ++i) {
        const double d = u.values[i] - v.values[i];
        s += d * d;
      }
      return -std::sqrt(s);
    }
    case Metric::manhattan: {
      double s = 0.0;
      for (size_t i = 0; i < u.dim(); ++i) s += std::fabs(u.values[i] - v.values[i]);
      return -s;
    }
  }
  return 0.0;
}

PenaltyTable compute_penalty(const std::vector<Embedding>& phrase_embs,
                             const std::map<std::string, Embedding>& image_embs,
                             double alpha) {
  if (phrase_embs.empty()) {
    throw Error(ErrorCode::EmptyPhraseSet, "penalty needs at least one phrase");
  }
  if (alpha < 0.0) {
    throw Error(ErrorCode::InvalidArgument, "penalty alpha must be >= 0");
  }
  PenaltyTable table;
  table.alpha = alpha;
  if (!image_embs.empty()) table.space_id = image_embs.begin()->second.space_id;
  for (const auto& [id, img] : image_embs) {
    double sum = 0.0;
    for (const auto& phrase : phrase_embs) {
      sum += similarity(phrase, img, Metric::cosine);
    }
    table.values[id] = alpha * (sum / static_cast<double>(phrase_embs.size()));
  }
  return table;
}

Ranking make_ranking(int sample_id, const std::vector<std::string>& candidates,
                     const std::vector<double>& scores) {
  if (candidates.size() != scores.size()) {
    throw Error(ErrorCode::InvalidArgument, "candidates/scores size mismatch");
  }
  std::vector<size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  Ranking ranking;
  ranking.sample_id = sample_id;
  ranking.candidates.reserve(candidates.size());
  ranking.scores.reserve(scores.size());
  for (size_t idx : order) {
    ranking.candidates.push_back(candidates[idx]);
    ranking.scores.push_back(scores[idx]);
  }
  return ranking;
}

Ranking rank_vl(const Sample& sample, const Embedding& phrase_emb,
                const std::unordered_map<std::string, Embedding>& candidate_embs,
                Metric metric, const PenaltyTable* penalty) {
  std::vector<double> scores;
  scores.reserve(sample.candidates.size());
  for (const auto& id : sample.candidates) {
    auto it = candidate_embs.find(id);
    if (it == candidate_embs.end()) {
      throw Error(ErrorCode::MissingEmbedding, "no embedding for candidate '" + id + "'");
    }
    double score = similarity(phrase_emb, it->second, metric);
    if (penalty) {
      auto pit = penalty->values.find(id);
      if (pit == penalty->values.end()) {
        throw Error(ErrorCode::PenaltyMissingCandidate,
                    "penalty table has no entry for '" + id + "'");
      }
      score -= pit->second;
    }
    scores.push_back(score);
  }
  return make_ranking(sample.sample_id, sample.candidates, scores);
}

}  // namespace vwsd
