#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "knitcity/agent.hpp"
#include "knitcity/environment.hpp"
#include "knitcity/labeling.hpp"
#include "knitcity/predictor.hpp"
#include "knitcity/signal.hpp"

namespace knitcity {

/// One forecaster of the grid.
struct GridCell {
  TargetKind kind = TargetKind::kT3;
  std::size_t tau = 20;
  int n_classes = 5;

  std::string name() const;
};

struct RunConfig {
  static constexpr int kSchemaVersion = 1;

  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "knitcity_run";
  /// Its rng_seed is replaced by seeds derived from `seed`.
  GeneratorConfig generator;
  std::size_t predictor_stream_length = 400000;
  std::size_t episode_stream_length = 3000000;
  /// Shares of the predictor stream used for training and validation; the
  /// rest is the test range.
  double train_fraction = 0.7;
  double valid_fraction = 0.1;
  std::size_t n_past = 64;
  std::vector<TargetKind> targets = {TargetKind::kT3};
  std::vector<std::size_t> taus = {20};
  std::vector<int> n_classes = {5};
  std::size_t max_train_per_class = 800;
  std::size_t max_valid_per_class = 200;
  ClassifierConfig predictor;
  AgentConfig agent;
  std::vector<std::size_t> ks = {4};
  std::vector<double> mus = {20.0};
  EpisodePlan episodes;
  /// Also train agents on ground-truth forecasts as an upper reference.
  bool perfect_control = true;
  std::size_t workers = 1;

  RunConfig();
  void validate() const;
  std::vector<GridCell> cells() const;
};

void to_json(nlohmann::json& j, const RunConfig& config);
void from_json(const nlohmann::json& j, RunConfig& config);
RunConfig read_run_config(const std::filesystem::path& path);
/// SHA-256 of the canonical JSON form, without output_dir and workers.
std::string config_hash(const RunConfig& config);

/// Worker count: KNITCITY_WORKERS if set, else the config value.
std::size_t resolve_workers(const RunConfig& config);

enum class Stage : int {
  kSynthesize = 0,
  kStats,
  kBuildDataset,
  kTrainPredictor,
  kEvalPredictor,
  kMakeEpisodes,
  kTrainAgent,
  kEvalPolicy,
  kReport,
};

const char* to_string(Stage stage);

struct CellFailure {
  std::string cell;
  std::string stage;
  std::string message;
};

struct RunOptions {
  Stage until = Stage::kReport;
  /// Recorded force (t,force[,cycle]) replacing the synthetic streams; its
  /// first half feeds the predictor and the rest the episodes.
  std::optional<std::filesystem::path> ingest;
  std::ostream* log = nullptr;
};

struct RunSummary {
  std::size_t stages_run = 0;
  std::size_t stages_cached = 0;
  std::vector<CellFailure> failures;
  std::filesystem::path output_dir;
};

/// Runs every stage up to `options.until`. Stages whose content key (hash of
/// their inputs and upstream keys) matches the stamp left by a previous run
/// are skipped. A failing grid cell is recorded and the other cells continue.
RunSummary run_pipeline(const RunConfig& config, const RunOptions& options = {});

/// Problems found when tracing every report file and grid cell back to a
/// stamped artifact with a matching content hash; empty when clean.
std::vector<std::string> lint_provenance(const std::filesystem::path& output_dir);

/// Held-out scores of one policy on the test episodes of one cell.
struct PolicyResult {
  std::string cell;
  std::string policy;
  std::size_t k = 0;
  double mu = 0.0;
  std::vector<PolicyScore> scores;
};

struct RankingRow {
  std::size_t rank = 0;
  std::string cell;
  std::string policy;
  double mu = 0.0;
  AggregateScore score;
  /// Context rows for the same cell and mu; NaN when unavailable.
  double naive_reward = 0.0;
  double oracle_reward = 0.0;
  double always_stay_reward = 0.0;
};

/// Every result ranked by mean held-out reward per step within its mu
/// (best first), annotated with the naive, oracle and always-stay scores.
std::vector<RankingRow> report_rankings(std::span<const PolicyResult> results);

}  // namespace knitcity
