#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "knitcity/environment.hpp"
#include "knitcity/network.hpp"
#include "knitcity/random.hpp"

namespace knitcity {

/// Fixed atoms z_i = v_min + i * (v_max - v_min) / (n_atoms - 1).
struct Support {
  double v_min = -300.0;
  double v_max = 0.0;
  std::size_t n_atoms = 51;

  void validate() const;
  double delta() const { return (v_max - v_min) / static_cast<double>(n_atoms - 1); }
  double atom(std::size_t i) const { return v_min + static_cast<double>(i) * delta(); }
  double mean(std::span<const double> probs) const;
};

/// Categorical projection of the distribution `probs` shifted to r + gamma * z
/// (or to r alone when `terminal`) back onto the atoms of `support`. Shifted
/// atoms outside the support clip to the boundary atoms.
std::vector<double> project(std::span<const double> probs, const Support& support, double reward,
                            double gamma, bool terminal = false);

/// Return distribution per action, indexed by Action.
struct QDistribution {
  std::array<std::vector<double>, 2> probs;

  double expected(Action action, const Support& support) const;
};

enum class ActMode : std::uint8_t { kGreedy, kSample, kExplore };

/// Greedy: larger expected value, ties to stay. Sample: one draw per action,
/// larger draw wins (ties to stay). Explore: greedy with probability
/// 1 - epsilon, otherwise a uniform action.
Action act(const QDistribution& q, const Support& support, ActMode mode, Rng& rng,
           double epsilon = 0.0);

enum class StateEncoding : std::uint8_t { kOneHot, kProbabilities };

struct AgentConfig {
  std::size_t n_atoms = 51;
  /// Support bounds; unset means derived from the cost model.
  std::optional<double> v_min;
  std::optional<double> v_max;
  std::vector<std::size_t> hidden_layers = {64, 64};
  double gamma = 0.95;
  double learning_rate = 1e-3;
  std::size_t n_past_predictions = 4;
  StateEncoding encoding = StateEncoding::kOneHot;
  std::size_t replay_capacity = 100000;
  std::size_t batch_size = 64;
  std::size_t target_refresh = 500;
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  /// Share of all training steps over which epsilon anneals linearly.
  double epsilon_anneal_fraction = 0.5;
  /// Passes over the training episodes.
  std::size_t training_passes = 2;
  /// Environment steps between gradient updates.
  std::size_t update_every = 4;
  /// Transitions collected before the first update.
  std::size_t warmup_steps = 2000;
  /// Training episodes between validation runs.
  std::size_t validate_every = 5;
  std::uint64_t seed = 1;

  void validate() const;
  /// Explicit bounds if set, else [-max(lambda / (1 - gamma), 1.5 * top damage), 0].
  Support support_for(const CostModel& cost) const;
};

void to_json(nlohmann::json& j, const AgentConfig& config);
void from_json(const nlohmann::json& j, AgentConfig& config);

/// Network input for step t: the forecasts at t, t-1, ..., t-k+1, most recent first.
std::size_t state_size(const AgentConfig& config, int n_classes);
void encode_state(const Episode& episode, std::size_t t, const AgentConfig& config,
                  std::span<double> out);

/// MLP producing one categorical return distribution per action.
class DistributionalQNet {
 public:
  DistributionalQNet() = default;
  DistributionalQNet(std::size_t inputs, const std::vector<std::size_t>& hidden, Support support);

  const Support& support() const noexcept { return support_; }
  Mlp& mlp() noexcept { return mlp_; }
  const Mlp& mlp() const noexcept { return mlp_; }

  QDistribution evaluate(std::span<const double> state, Mlp::Workspace& ws) const;
  /// Cross-entropy of action `a`'s distribution against `target`; adds the
  /// parameter gradient into `grad`.
  double loss_and_gradient(std::span<const double> state, Action a, std::span<const double> target,
                           Mlp::Workspace& ws, std::span<double> grad) const;

 private:
  Mlp mlp_;
  Support support_;
};

/// Greedy (or sampling) policy backed by a trained distributional network.
class AgentPolicy final : public Policy {
 public:
  AgentPolicy(AgentConfig config, int n_classes, DistributionalQNet net);

  std::string name() const override;
  Action act(const Episode& episode, std::size_t t) override;

  void set_mode(ActMode mode, std::uint64_t seed = 0);
  QDistribution distribution(const Episode& episode, std::size_t t) const;

  const AgentConfig& config() const noexcept { return config_; }
  int n_classes() const noexcept { return n_classes_; }
  const DistributionalQNet& net() const noexcept { return net_; }

 private:
  AgentConfig config_;
  int n_classes_;
  DistributionalQNet net_;
  ActMode mode_ = ActMode::kGreedy;
  Rng rng_{0};
  mutable Mlp::Workspace ws_;
  mutable std::vector<double> state_;
};

struct AgentLogRow {
  std::size_t update = 0;
  double loss = 0.0;
  double epsilon = 0.0;
  double mean_recent_reward = 0.0;
};

struct ValidationRow {
  std::size_t episodes_seen = 0;
  std::size_t update = 0;
  double reward_per_step = 0.0;
  double eta = 0.0;
  double kappa = 0.0;
  double leave_fraction = 0.0;
};

struct AgentTrainingResult {
  std::unique_ptr<AgentPolicy> policy;
  std::vector<AgentLogRow> log;
  std::vector<ValidationRow> validation;
  /// The kept policy never leaves on validation episodes although leaving
  /// somewhere would pay (always-stay collapse).
  bool collapsed = false;
};

/// Distributional Q-learning with experience replay, a periodically frozen
/// target network and epsilon-greedy exploration. The parameters with the
/// best validation reward per step are kept.
AgentTrainingResult train_agent(std::span<const Episode> train, std::span<const Episode> valid,
                                const CostModel& cost, const AgentConfig& config);

inline constexpr std::uint32_t kPolicySchemaVersion = 1;

void save_policy(const std::filesystem::path& path, const AgentPolicy& policy);
std::unique_ptr<AgentPolicy> load_policy(const std::filesystem::path& path);

void write_agent_log_csv(const std::filesystem::path& path, std::span<const AgentLogRow> log);
void write_validation_log_csv(const std::filesystem::path& path,
                              std::span<const ValidationRow> rows);

}  // namespace knitcity
