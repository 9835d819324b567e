#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vwsd/dataset.hpp"
#include "vwsd/evaluation.hpp"
#include "vwsd/scoring.hpp"

namespace vwsd {

// One scoring family selectable for feature extraction. Parsed from the
// shorthand used on the command line and in configs:
//   baseline[+penalty]
//   enhanced:<template>[+penalty]
//   captions:t[:<metric>]            captions:te:<template>[:<metric>]
//   kb:<source>[:<metric>]
//   all                              (expands per configuration)
struct FamilySpec {
  enum class Kind { baseline, enhanced, captions, kb } kind = Kind::baseline;
  bool penalty = false;
  std::string template_name;  // enhanced / captions:te
  bool enhanced_phrase = false;  // captions only: score t_e instead of t
  std::string kb_source;      // kb only
  std::string metric;         // empty = pipeline default
};

struct PipelineConfig {
  std::filesystem::path data;
  std::optional<std::filesystem::path> gold;
  std::filesystem::path images;
  std::filesystem::path cache_root;

  uint64_t seed = 0;
  std::string metric = "cosine";

  bool penalty_enabled = true;
  double penalty_alpha = 1.0;
  // Optional data file whose phrases form the penalty pool instead of the
  // split being scored.
  std::optional<std::filesystem::path> penalty_phrases;

  nlohmann::json embedder;   // {"kind":"mock","seed":0,"dim":64}
  nlohmann::json llm;        // {"kind":"stub","seed":0,...} or {"kind":"http",...}
  nlohmann::json captioner;  // {"kind":"stub","seed":0,"mode":"greedy"}
  nlohmann::json kb;         // {"sources":["wikipedia"],"k":10}

  std::vector<std::string> templates;  // enhancement templates to run
  std::vector<std::string> families;   // family shorthands, may contain "all"

  nlohmann::json ltr;  // hyperparameter overrides
  double split_fraction = 0.2;

  nlohmann::json qa;  // {"mode":"greedy","cot":true}

  int parallelism = 4;

  // Loads the JSON config; `overrides` are dotted-path assignments applied
  // before parsing (the CLI's repeatable --set key.path=value).
  static PipelineConfig from_file(
      const std::filesystem::path& path,
      const std::vector<std::pair<std::string, std::string>>& overrides = {});
  static PipelineConfig from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;
};

struct StageResult {
  std::filesystem::path dir;
  bool already_satisfied = false;
};

// Orchestrates the stages behind the CLI. Every stage writes its artifacts
// under cache_root keyed by a digest of its inputs and config slice;
// re-running a satisfied stage is a no-op. Missing upstream artifacts raise
// MissingUpstreamArtifact naming the stage to run.
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config);

  StageResult prepare();
  StageResult embed();
  StageResult enhance();
  StageResult caption();
  StageResult kb_fetch();
  StageResult score();
  StageResult features();
  StageResult train();
  StageResult predict();
  StageResult qa();

  // Evaluates a prediction file (defaults to the predict artifact) against
  // the dataset gold. Prints nothing; the caller renders the report.
  EvalReport evaluate(const std::optional<std::filesystem::path>& predictions,
                      const std::string& system_id);

  const PipelineConfig& config() const { return config_; }
  std::vector<FamilySpec> family_specs() const;
  std::string family_id(const FamilySpec& spec) const;

 private:
  StageResult run_stage(const std::string& name, const nlohmann::json& digest_inputs,
                        const std::function<void(const std::filesystem::path&)>& body);
  std::filesystem::path stage_dir(const std::string& name, const std::string& digest) const;
  std::filesystem::path require_stage(const std::string& name,
                                      const nlohmann::json& digest_inputs);

  nlohmann::json prepare_inputs();
  nlohmann::json embed_inputs();
  nlohmann::json enhance_inputs();
  nlohmann::json caption_inputs();
  nlohmann::json kb_inputs();
  nlohmann::json score_inputs();
  nlohmann::json features_inputs();
  nlohmann::json train_inputs();
  nlohmann::json predict_inputs();
  nlohmann::json qa_inputs();

  const Dataset& dataset();
  std::string images_fingerprint();

  PipelineConfig config_;
  std::optional<Dataset> dataset_;
  std::optional<std::string> images_fp_;
};

// Prediction files: one line per sample, tab-separated candidate ids in
// ranked order; an empty line records an abstention.
void write_predictions(const std::filesystem::path& path,
                       const std::vector<std::optional<Ranking>>& rankings);
std::vector<std::optional<Ranking>> read_predictions(const std::filesystem::path& path,
                                                     const Dataset& dataset);

// Exclusive advisory lock on the cache root, held for a pipeline invocation.
class CacheLock {
 public:
  explicit CacheLock(const std::filesystem::path& cache_root);
  ~CacheLock();
  CacheLock(const CacheLock&) = delete;
  CacheLock& operator=(const CacheLock&) = delete;

 private:
  int fd_ = -1;
};

}  // namespace vwsd
