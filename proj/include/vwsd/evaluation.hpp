#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vwsd/scoring.hpp"

namespace vwsd {

// Accuracy/MRR summary for one system. An absent ranking (abstention) counts
// wrong for accuracy and contributes reciprocal rank 0.
struct EvalReport {
  std::string system_id;
  double accuracy = 0.0;
  double mrr = 0.0;
  size_t n = 0;
  // (sample_id, 1-based gold rank; absent on abstention)
  std::vector<std::pair<int, std::optional<int>>> per_sample;
};

// 1-based rank of gold within the ranking. Throws MissingGold when the gold
// id does not appear.
int gold_rank(const Ranking& ranking, const std::string& gold);

// Fraction of samples whose rank-1 candidate equals gold.
double accuracy(const std::vector<std::optional<Ranking>>& rankings,
                const std::vector<std::string>& golds);

// Mean reciprocal rank of gold; abstentions contribute 0.
double mrr(const std::vector<std::optional<Ranking>>& rankings,
           const std::vector<std::string>& golds);

EvalReport evaluate_system(const std::string& system_id,
                           const std::vector<std::optional<Ranking>>& rankings,
                           const std::vector<std::string>& golds);

// Comparison table over systems, sorted by MRR descending. Percentages with
// two decimals.
std::string format_report_table(const std::vector<EvalReport>& reports);

// CSV forms: `system_id,accuracy,mrr,n` and `system_id,sample_id,gold_rank`.
std::string report_csv(const std::vector<EvalReport>& reports);
std::string per_sample_csv(const std::vector<EvalReport>& reports);

}  // namespace vwsd
