// vwsd: command-line front end for the VWSD pipeline. Each subcommand runs
// one stage against the config; artifacts land under the cache root and
// satisfied stages are no-ops.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "vwsd/enhancement.hpp"
#include "vwsd/errors.hpp"
#include "vwsd/evaluation.hpp"
#include "vwsd/pipeline.hpp"

namespace {

struct CliOverrides {
  std::string data;
  std::string gold;
  std::string images;
  std::string cache;
  std::string metric;
  std::string penalty_phrases;
  std::vector<std::string> templates;
  std::vector<std::string> families;
  std::optional<uint64_t> seed;
  std::optional<double> alpha;
  std::optional<bool> penalty;
  std::optional<int> parallelism;
};

void apply_overrides(vwsd::PipelineConfig& config, const CliOverrides& o) {
  if (!o.data.empty()) config.data = o.data;
  if (!o.gold.empty()) config.gold = std::filesystem::path(o.gold);
  if (!o.images.empty()) config.images = o.images;
  if (!o.cache.empty()) config.cache_root = o.cache;
  if (!o.metric.empty()) {
    vwsd::metric_from_name(o.metric);
    config.metric = o.metric;
  }
  if (!o.penalty_phrases.empty()) {
    config.penalty_phrases = std::filesystem::path(o.penalty_phrases);
  }
  if (!o.templates.empty()) {
    for (const auto& name : o.templates) {
      if (!vwsd::find_template(name)) {
        throw vwsd::Error(vwsd::ErrorCode::ConfigInvalid,
                          "unknown template '" + name + "'");
      }
    }
    config.templates = o.templates;
  }
  if (!o.families.empty()) config.families = o.families;
  if (o.seed) config.seed = *o.seed;
  if (o.alpha) config.penalty_alpha = *o.alpha;
  if (o.penalty) config.penalty_enabled = *o.penalty;
  if (o.parallelism) config.parallelism = *o.parallelism;
}

void report_stage(const std::string& name, const vwsd::StageResult& result) {
  std::cout << name << ": " << (result.already_satisfied ? "up-to-date" : "done") << " ("
            << result.dir.string() << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Visual Word Sense Disambiguation pipeline"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may follow the subcommand name

  std::string config_path;
  app.add_option("--config", config_path, "pipeline config (JSON)")->required();

  CliOverrides overrides;
  app.add_option("--data", overrides.data, "override data file");
  app.add_option("--gold", overrides.gold, "override gold file");
  app.add_option("--images", overrides.images, "override image directory");
  app.add_option("--cache", overrides.cache, "override cache root");
  app.add_option("--metric", overrides.metric, "override ranking metric");
  app.add_option("--penalty-phrases", overrides.penalty_phrases,
                 "data file whose phrases form the penalty pool");
  std::vector<std::string> set_entries;
  app.add_option("--set", set_entries,
                 "config override as key.path=value (repeatable)");
  app.add_option("--templates", overrides.templates, "override template list")
      ->delimiter(',');
  app.add_option("--families", overrides.families, "override feature families")
      ->delimiter(',');
  uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "override seed");
  double alpha_value = 0.0;
  auto* alpha_opt = app.add_option("--alpha", alpha_value, "override penalty alpha");
  auto* penalty_on = app.add_flag("--penalty", "force penalty on");
  auto* penalty_off = app.add_flag("--no-penalty", "force penalty off");
  int parallelism_value = 0;
  auto* par_opt = app.add_option("--parallelism", parallelism_value,
                                 "bounded backend parallelism");

  auto* cmd_prepare = app.add_subcommand("prepare", "load and validate the dataset");
  auto* cmd_embed = app.add_subcommand("embed", "embed phrases and candidate images");
  auto* cmd_enhance = app.add_subcommand("enhance", "LLM phrase enhancement");
  auto* cmd_caption = app.add_subcommand("caption", "caption candidate images");
  auto* cmd_kb = app.add_subcommand("kb-fetch", "fetch knowledge-base reference images");
  auto* cmd_score = app.add_subcommand("score", "score all configured families");
  auto* cmd_features = app.add_subcommand("features", "assemble the feature matrix");
  auto* cmd_train = app.add_subcommand("train-ltr", "train the learn-to-rank model");
  auto* cmd_predict = app.add_subcommand("predict", "emit the prediction file");
  auto* cmd_qa = app.add_subcommand("qa", "multiple-choice QA over captions");
  auto* cmd_eval = app.add_subcommand("evaluate", "accuracy / MRR report");

  std::string eval_predictions;
  std::string eval_system = "ltr";
  std::string eval_csv_dir;
  cmd_eval->add_option("--predictions", eval_predictions,
                       "prediction file (default: predict artifact)");
  cmd_eval->add_option("--system-id", eval_system, "label for the report row");
  cmd_eval->add_option("--csv-out", eval_csv_dir, "directory for report CSVs");

  CLI11_PARSE(app, argc, argv);

  try {
    std::vector<std::pair<std::string, std::string>> sets;
    for (const auto& entry : set_entries) {
      const size_t eq = entry.find('=');
      if (eq == std::string::npos) {
        std::cerr << "error: --set expects key.path=value, got '" << entry << "'\n";
        return 2;
      }
      sets.emplace_back(entry.substr(0, eq), entry.substr(eq + 1));
    }
    vwsd::PipelineConfig config = vwsd::PipelineConfig::from_file(config_path, sets);
    if (*seed_opt) overrides.seed = seed_value;
    if (*alpha_opt) overrides.alpha = alpha_value;
    if (*penalty_on) overrides.penalty = true;
    if (*penalty_off) overrides.penalty = false;
    if (*par_opt) overrides.parallelism = parallelism_value;
    apply_overrides(config, overrides);

    vwsd::CacheLock lock(config.cache_root);
    vwsd::Pipeline pipeline(std::move(config));

    if (*cmd_prepare) report_stage("prepare", pipeline.prepare());
    if (*cmd_embed) report_stage("embed", pipeline.embed());
    if (*cmd_enhance) report_stage("enhance", pipeline.enhance());
    if (*cmd_caption) report_stage("caption", pipeline.caption());
    if (*cmd_kb) report_stage("kb-fetch", pipeline.kb_fetch());
    if (*cmd_score) report_stage("score", pipeline.score());
    if (*cmd_features) report_stage("features", pipeline.features());
    if (*cmd_train) report_stage("train-ltr", pipeline.train());
    if (*cmd_predict) report_stage("predict", pipeline.predict());
    if (*cmd_qa) report_stage("qa", pipeline.qa());
    if (*cmd_eval) {
      std::optional<std::filesystem::path> predictions;
      if (!eval_predictions.empty()) predictions = eval_predictions;
      const vwsd::EvalReport report = pipeline.evaluate(predictions, eval_system);
      std::cout << vwsd::format_report_table({report});
      if (!eval_csv_dir.empty()) {
        std::filesystem::create_directories(eval_csv_dir);
        std::ofstream summary(std::filesystem::path(eval_csv_dir) / "report.csv");
        summary << vwsd::report_csv({report});
        std::ofstream per_sample(std::filesystem::path(eval_csv_dir) / "per_sample.csv");
        per_sample << vwsd::per_sample_csv({report});
      }
    }
    return 0;
  } catch (const vwsd::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    if (e.code() == vwsd::ErrorCode::ConfigInvalid) return 2;
    if (e.code() == vwsd::ErrorCode::MissingUpstreamArtifact) return 3;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
