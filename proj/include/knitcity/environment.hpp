#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "knitcity/labeling.hpp"
#include "knitcity/predictor.hpp"
#include "knitcity/random.hpp"
#include "knitcity/signal.hpp"

namespace knitcity {

enum class Action : std::uint8_t { kStay = 0, kLeave = 1 };

const char* to_string(Action action);

/// Damage and social cost per step. Damage is attached to the five-class
/// severity ladder; forecasts with fewer classes use the mean damage of the
/// merged band, weighted by the reference class proportions.
struct CostModel {
  double lambda_social = 1.0;
  double mu = 20.0;
  /// mu * relative weights, one entry per ladder class.
  std::vector<double> damage_weights;

  static CostModel standard(double mu, double lambda_social = 1.0);
  void validate() const;

  double damage(int ladder_class) const;
  /// Damage associated with each predicted class of an n-class forecast.
  std::vector<double> predicted_damage(int n_classes) const;
};

inline constexpr std::size_t kLadderClasses = 5;

struct EpisodeWindow {
  std::size_t start = 0;
  std::size_t length = 0;
};

/// One game: the drop signal over [start, start + length) classified on the
/// five-class ladder, and optionally the forecasts for every step together
/// with `history` earlier forecasts that feed the first states.
struct Episode {
  std::size_t id = 0;
  std::size_t start = 0;
  std::vector<double> delta_f;
  std::vector<int> event_class;
  int n_classes = 0;
  std::size_t history = 0;
  /// Predicted class and distribution for steps start - history .. start + length - 1.
  std::vector<int> predicted;
  std::vector<std::vector<double>> probs;

  std::size_t length() const noexcept { return event_class.size(); }
  bool has_predictions() const noexcept { return !predicted.empty(); }
  std::size_t class_count(int ladder_class) const;
  /// Prediction issued for step t (t may reach back `history` steps before 0).
  int predicted_at(std::ptrdiff_t t) const;
  std::span<const double> probs_at(std::ptrdiff_t t) const;
};

struct EpisodeTrace {
  std::vector<Action> actions;
  std::vector<int> event_class;
  std::vector<double> social;
  std::vector<double> human;
  double total_reward = 0.0;
  double casualties = 0.0;
  std::size_t evacuated_steps = 0;

  std::size_t length() const noexcept { return actions.size(); }
};

/// Step-by-step interaction with one episode.
class EpisodeEnv {
 public:
  EpisodeEnv(const Episode& episode, const CostModel& cost);

  struct StepResult {
    double social = 0.0;
    double human = 0.0;
    bool done = false;
  };

  std::size_t t() const noexcept { return t_; }
  bool finished() const noexcept { return t_ >= episode_->length(); }
  StepResult step(Action action);
  const EpisodeTrace& trace() const noexcept { return trace_; }

 private:
  const Episode* episode_;
  CostModel cost_;
  std::size_t t_ = 0;
  EpisodeTrace trace_;
};

struct PolicyScore {
  double eta = 1.0;
  double kappa = 1.0;
  double reward_per_step = 0.0;
  /// Total damage had the city always stayed, divided by the episode length.
  double damage_density = 0.0;
};

PolicyScore score(const EpisodeTrace& trace, const CostModel& cost);

struct AggregateScore {
  std::size_t n = 0;
  double eta = 0.0, kappa = 0.0, reward_per_step = 0.0;
  double eta_se = 0.0, kappa_se = 0.0, reward_se = 0.0;
};

AggregateScore aggregate(std::span<const PolicyScore> scores);

class Policy {
 public:
  virtual ~Policy() = default;
  virtual std::string name() const = 0;
  /// Called once before each episode.
  virtual void begin_episode(const Episode&) {}
  virtual Action act(const Episode& episode, std::size_t t) = 0;
};

class AlwaysStayPolicy final : public Policy {
 public:
  std::string name() const override { return "always_stay"; }
  Action act(const Episode&, std::size_t) override { return Action::kStay; }
};

class AlwaysLeavePolicy final : public Policy {
 public:
  std::string name() const override { return "always_leave"; }
  Action act(const Episode&, std::size_t) override { return Action::kLeave; }
};

/// Leaves with probability p at every step.
class RandomPolicy final : public Policy {
 public:
  RandomPolicy(double p, std::uint64_t seed);
  std::string name() const override;
  Action act(const Episode&, std::size_t) override;

 private:
  double p_;
  Rng rng_;
};

/// Sees the event of the current step: leaves iff its damage exceeds lambda.
class OraclePolicy final : public Policy {
 public:
  explicit OraclePolicy(CostModel cost) : cost_(std::move(cost)) {}
  std::string name() const override { return "oracle"; }
  Action act(const Episode& episode, std::size_t t) override;

 private:
  CostModel cost_;
};

/// Leaves iff the damage of the latest predicted class strictly exceeds lambda.
class NaivePolicy final : public Policy {
 public:
  explicit NaivePolicy(CostModel cost) : cost_(std::move(cost)) {}
  std::string name() const override { return "naive"; }
  void begin_episode(const Episode& episode) override;
  Action act(const Episode& episode, std::size_t t) override;

 private:
  CostModel cost_;
  std::vector<double> damage_;
};

EpisodeTrace run_policy(Policy& policy, const Episode& episode, const CostModel& cost);
std::vector<PolicyScore> evaluate_policy(Policy& policy, std::span<const Episode> episodes,
                                         const CostModel& cost);

/// r = c0 + c1 * kappa + c2 * eta; from the accounting identity
/// r = (kappa - 1) + D (eta - 1) with D the per-step damage density.
struct RewardLine {
  double c0 = 0.0;
  double c1 = 1.0;
  double c2 = 0.0;
  double damage_density = 0.0;

  double reward(double eta, double kappa) const { return c0 + c1 * kappa + c2 * eta; }
  /// kappa on the constant-reward line through reward r at the given eta.
  double kappa_at(double r, double eta) const { return (r - c0 - c2 * eta) / c1; }
};

/// Coefficients shared by all scores; every score must come from episodes
/// with the same damage density and satisfy the identity.
RewardLine reward_geometry(std::span<const PolicyScore> scores, double tolerance = 1e-9);

struct EpisodePlan {
  std::size_t length = 5000;
  std::size_t n_train = 75;
  std::size_t n_valid = 50;
  std::size_t n_test = 180;
  double target_major_events = 2.0;
  /// Forecasts kept before each episode for state construction.
  std::size_t history = 32;

  std::size_t total() const noexcept { return n_train + n_valid + n_test; }
  void validate() const;
};

struct EpisodeSplit {
  std::vector<EpisodeWindow> train;
  std::vector<EpisodeWindow> valid;
  std::vector<EpisodeWindow> test;
};

/// Disjoint windows at least `earliest_start` into the series. Candidate
/// windows tile the series from a random offset; each is kept with
/// probability proportional to Poisson(c; target) / q(c), where c is its
/// class-4 count and q the share of tiles with that count, so kept windows
/// follow a Poisson law with mean `target` over the observed counts.
EpisodeSplit select_episode_windows(const EventSeries& events, const ClassThresholds& ladder,
                                    const EpisodePlan& plan, std::size_t earliest_start,
                                    std::uint64_t seed);

Episode make_episode(const EventSeries& events, const ClassThresholds& ladder,
                     const EpisodeWindow& window, std::size_t id);

/// Forecasts for an episode (and its history) from a stream forecaster.
void attach_predictions(Episode& episode, const Forecaster& forecaster, const EventSeries& events,
                        const TargetSpec& spec, std::size_t n_past, std::size_t history);
/// Forecasts copied from precomputed stream predictions covering the episode.
void attach_predictions(Episode& episode, std::span<const StreamPrediction> stream, int n_classes,
                        std::size_t history);
/// Ground truth as forecasts: one-hot ladder class of the drop at each step.
void attach_perfect_predictions(Episode& episode, const EventSeries& events,
                                const ClassThresholds& ladder, std::size_t history);

struct EpisodeSets {
  std::vector<Episode> train;
  std::vector<Episode> valid;
  std::vector<Episode> test;
};

/// Window selection followed by slicing and forecast attachment.
EpisodeSets make_episodes(const EventSeries& events, const ClassThresholds& ladder,
                          const Forecaster& forecaster, const TargetSpec& spec, std::size_t n_past,
                          const EpisodePlan& plan, std::uint64_t seed);

void write_trace_csv(const std::filesystem::path& path, const EpisodeTrace& trace);
/// Header episode,eta,kappa,r.
void write_score_summary_csv(const std::filesystem::path& path, std::span<const PolicyScore> scores);

}  // namespace knitcity
