#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "compkg/common.hpp"
#include "compkg/eei_model.hpp"
#include "compkg/oracle.hpp"
#include "compkg/pairgen.hpp"
#include "compkg/serve.hpp"
#include "compkg/synth.hpp"

namespace compkg::pipeline {

struct PipelineConfig {
  std::filesystem::path out_dir;
  std::optional<std::uint64_t> seed;

  std::filesystem::path items, bills, logs, dict, truth;
  std::size_t feature_dim = 0;

  pairgen::Thresholds thresholds;

  std::string backend = "stub";  // stub | http
  oracle::ClientConfig client;
  std::size_t oracle_batch = oracle::kDefaultBatchSize;
  std::optional<std::int64_t> issued_at;

  eei::Hyperparams eei = [] {
    eei::Hyperparams h;
    h.epochs = 20;
    return h;
  }();
  int window_days = 30;

  std::size_t recall_k = serve::kDefaultRecallK;
  int recall_window_days = 1;  // bills feeding the complementary route
  serve::RankerConfig ranker;

  double holdout_fraction = 0.2;
  std::int64_t followup_seconds = kSecondsPerDay;
  std::size_t arm_exposures = 5;
  std::size_t cvr_pairs = 25;
  std::filesystem::path arm_log;

  std::filesystem::path update_verdicts, update_explanations, update_dict;
  std::optional<Day> update_date;
  int retire_after_days = 7;

  std::filesystem::path annotations;

  synth::SyntheticSpec synth;

  /// Throws UsageError when the seed is missing.
  std::uint64_t require_seed() const;
};

/// Flat `key = value` lines; `#` starts a comment line. Relative paths are
/// resolved against `base_dir`. Unknown keys and bad values throw UsageError.
PipelineConfig parse_config(const std::string& content, const std::filesystem::path& base_dir);
/// Reads the file, then lets COMPKG_API_KEY override the backend credential.
PipelineConfig load_config(const std::filesystem::path& path);
void apply_environment(PipelineConfig& config);

/// Exclusive claim on an output directory, released on destruction.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& out_dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct StageReport {
  std::string stage;
  std::vector<std::pair<std::string, std::string>> inputs;   // file name, content hash
  std::vector<std::pair<std::string, std::string>> outputs;  // file name, content hash
  std::vector<std::pair<std::string, std::string>> counts;
  std::string format() const;
};

const std::vector<std::string>& stage_names();

/// Runs one stage under the output lock. Missing prerequisites throw
/// DataError naming the stage to run first.
StageReport run_stage(const std::string& name, const PipelineConfig& config);

// ---------------------------------------------------------------------------
// Evaluation bundle

struct AucRow {
  std::string variant;
  std::optional<double> auc;  // absent on single-class data
  std::size_t positives = 0, negatives = 0;
};

struct HitRow {
  std::string route;
  std::size_t k = 0, queries = 0, hits = 0;
};

struct EvalArtifacts {
  std::vector<AucRow> auc;
  std::vector<HitRow> hits;
  std::vector<serve::CvrCell> cvr;
  std::vector<oracle::ModelAnnotation> annotations;
  std::vector<std::pair<std::string, std::string>> stage_hashes;  // "stage/file", hash
};

/// File name -> content: auc.csv, hit_rate.csv, cvr_matrix.csv,
/// llm_scores.csv and report.txt. Empty sections carry "# no data".
std::map<std::string, std::string> emit_reports(const EvalArtifacts& artifacts);

std::vector<AucRow> parse_auc_table(const std::string& content);
std::vector<HitRow> parse_hit_table(const std::string& content);
std::vector<serve::CvrCell> parse_cvr_matrix(const std::string& content);

}  // namespace compkg::pipeline
