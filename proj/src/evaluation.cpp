#include "vwsd/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "vwsd/errors.hpp"

namespace vwsd {

int gold_rank(const Ranking& ranking, const std::string& gold) {
  for (size_t i = 0; i < ranking.candidates.size(); ++i) {
    if (ranking.candidates[i] == gold) return static_cast<int>(i) + 1;
  }
  throw Error(ErrorCode::MissingGold,
              "gold '" + gold + "' not present in ranking of sample " +
                  std::to_string(ranking.sample_id));
}

namespace {

void check_inputs(const std::vector<std::optional<Ranking>>& rankings,
                  const std::vector<std::string>& golds) {
  if (rankings.size() != golds.size()) {
    throw Error(ErrorCode::MissingGold, "need one gold per ranking");
  }
  for (const auto& gold : golds) {
    if (gold.empty()) {
      throw Error(ErrorCode::MissingGold, "empty gold label");
    }
  }
}

std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", fraction * 100.0);
  return buf;
}

}  // namespace

double accuracy(const std::vector<std::optional<Ranking>>& rankings,
                const std::vector<std::string>& golds) {
  check_inputs(rankings, golds);
  if (rankings.empty()) return 0.0;
  size_t hits = 0;
  for (size_t i = 0; i < rankings.size(); ++i) {
    if (rankings[i] && gold_rank(*rankings[i], golds[i]) == 1) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

double mrr(const std::vector<std::optional<Ranking>>& rankings,
           const std::vector<std::string>& golds) {
  check_inputs(rankings, golds);
  if (rankings.empty()) return 0.0;
  double sum = 0.0;
  for (size_t i = 0; i < rankings.size(); ++i) {
    if (rankings[i]) sum += 1.0 / static_cast<double>(gold_rank(*rankings[i], golds[i]));
  }
  return sum / static_cast<double>(rankings.size());
}

EvalReport evaluate_system(const std::string& system_id,
                           const std::vector<std::optional<Ranking>>& rankings,
                           const std::vector<std::string>& golds) {
  check_inputs(rankings, golds);
  EvalReport report;
  report.system_id = system_id;
  report.n = rankings.size();

  size_t hits = 0;
  double rr_sum = 0.0;
  for (size_t i = 0; i < rankings.size(); ++i) {
    if (!rankings[i]) {
      report.per_sample.emplace_back(static_cast<int>(i), std::nullopt);
      continue;
    }
    const int rank = gold_rank(*rankings[i], golds[i]);
    report.per_sample.emplace_back(rankings[i]->sample_id, rank);
    if (rank == 1) ++hits;
    rr_sum += 1.0 / static_cast<double>(rank);
  }
  if (report.n > 0) {
    report.accuracy = static_cast<double>(hits) / static_cast<double>(report.n);
    report.mrr = rr_sum / static_cast<double>(report.n);
  }
  return report;
}

std::string format_report_table(const std::vector<EvalReport>& reports) {
  std::vector<EvalReport> sorted = reports;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const EvalReport& a, const EvalReport& b) { return a.mrr > b.mrr; });

  size_t width = std::string("system").size();
  for (const auto& r : sorted) width = std::max(width, r.system_id.size());

  std::ostringstream out;
  out << std::string(width - 6, ' ') << "system"
      << "    acc.    MRR      n\n";
  for (const auto& r : sorted) {
    out << std::string(width - r.system_id.size(), ' ') << r.system_id << "  "
        << format_percent(r.accuracy) << "  " << format_percent(r.mrr) << "  "
        << r.n << '\n';
  }
  return out.str();
}

std::string report_csv(const std::vector<EvalReport>& reports) {
  std::vector<EvalReport> sorted = reports;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const EvalReport& a, const EvalReport& b) { return a.mrr > b.mrr; });
  std::string out = "system_id,accuracy,mrr,n\n";
  for (const auto& r : sorted) {
    out += r.system_id + "," + format_percent(r.accuracy) + "," + format_percent(r.mrr) +
           "," + std::to_string(r.n) + "\n";
  }
  return out;
}

std::string per_sample_csv(const std::vector<EvalReport>& reports) {
  std::string out = "system_id,sample_id,gold_rank\n";
  for (const auto& r : reports) {
    for (const auto& [sample_id, rank] : r.per_sample) {
      out += r.system_id + "," + std::to_string(sample_id) + ",";
      out += rank ? std::to_string(*rank) : std::string();
      out += "\n";
    }
  }
  return out;
}

}  // namespace vwsd
