#include "knitcity/agent.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "knitcity/error.hpp"
#include "knitcity/io.hpp"

namespace knitcity {

void Support::validate() const {
  if (n_atoms < 2) throw ConfigError("support needs at least two atoms");
  if (!(v_min < v_max) || !std::isfinite(v_min) || !std::isfinite(v_max)) {
    throw ConfigError("support requires finite v_min < v_max");
  }
}

double Support::mean(std::span<const double> probs) const {
  double m = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) m += probs[i] * atom(i);
  return m;
}

std::vector<double> project(std::span<const double> probs, const Support& support, double reward,
                            double gamma, bool terminal) {
  if (probs.size() != support.n_atoms) throw NumericError("projection: distribution size mismatch");
  if (!std::isfinite(reward) || !std::isfinite(gamma)) {
    throw NumericError("projection: non-finite reward or discount");
  }
  for (double p : probs) {
    if (!std::isfinite(p)) throw NumericError("projection: non-finite probability");
  }
  const double delta = support.delta();
  const std::size_t last = support.n_atoms - 1;
  std::vector<double> out(support.n_atoms, 0.0);
  for (std::size_t j = 0; j < support.n_atoms; ++j) {
    if (probs[j] == 0.0) continue;
    const double shifted = terminal ? reward : reward + gamma * support.atom(j);
    const double tz = std::clamp(shifted, support.v_min, support.v_max);
    double b = (tz - support.v_min) / delta;
    // Absorb rounding so shifts that land on an atom keep all their mass there.
    const double nearest = std::round(b);
    if (std::fabs(b - nearest) < 1e-9) b = nearest;
    b = std::clamp(b, 0.0, static_cast<double>(last));
    const auto lo = static_cast<std::size_t>(std::floor(b));
    const auto hi = static_cast<std::size_t>(std::ceil(b));
    if (lo == hi) {
      out[lo] += probs[j];
    } else {
      out[lo] += probs[j] * (static_cast<double>(hi) - b);
      out[hi] += probs[j] * (b - static_cast<double>(lo));
    }
  }
  return out;
}

double QDistribution::expected(Action action, const Support& support) const {
  return support.mean(probs[static_cast<std::size_t>(action)]);
}

Action act(const QDistribution& q, const Support& support, ActMode mode, Rng& rng, double epsilon) {
  switch (mode) {
    case ActMode::kGreedy:
      return q.expected(Action::kLeave, support) > q.expected(Action::kStay, support)
                 ? Action::kLeave
                 : Action::kStay;
    case ActMode::kSample: {
      std::array<double, 2> draw{};
      for (std::size_t a = 0; a < 2; ++a) {
        const auto& p = q.probs[a];
        double u = rng.uniform();
        std::size_t i = 0;
        while (i + 1 < p.size() && u >= p[i]) {
          u -= p[i];
          ++i;
        }
        draw[a] = support.atom(i);
      }
      return draw[1] > draw[0] ? Action::kLeave : Action::kStay;
    }
    case ActMode::kExplore:
      if (rng.uniform() < epsilon) return rng.index(2) == 1 ? Action::kLeave : Action::kStay;
      return act(q, support, ActMode::kGreedy, rng);
  }
  return Action::kStay;
}

void AgentConfig::validate() const {
  if (n_atoms < 2) throw ConfigError("agent: n_atoms must be >= 2");
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("agent: gamma must be in (0,1)");
  if (!(learning_rate > 0.0)) throw ConfigError("agent: learning_rate must be positive");
  if (n_past_predictions == 0) throw ConfigError("agent: need at least one past prediction");
  if (replay_capacity == 0 || batch_size == 0 || target_refresh == 0 || update_every == 0 ||
      validate_every == 0) {
    throw ConfigError("agent: replay, batch, refresh and cadence sizes must be positive");
  }
  if (!(epsilon_start >= 0.0 && epsilon_start <= 1.0 && epsilon_end >= 0.0 && epsilon_end <= 1.0)) {
    throw ConfigError("agent: epsilon must lie in [0,1]");
  }
  if (!(epsilon_anneal_fraction > 0.0 && epsilon_anneal_fraction <= 1.0)) {
    throw ConfigError("agent: epsilon_anneal_fraction must be in (0,1]");
  }
  for (std::size_t h : hidden_layers) {
    if (h == 0) throw ConfigError("agent: hidden layers must be nonempty");
  }
  if (v_min && v_max && !(*v_min < *v_max)) throw ConfigError("agent: v_min must be below v_max");
}

Support AgentConfig::support_for(const CostModel& cost) const {
  Support s;
  s.n_atoms = n_atoms;
  const double top_damage = *std::max_element(cost.damage_weights.begin(), cost.damage_weights.end());
  s.v_min = v_min.value_or(-std::max(cost.lambda_social / (1.0 - gamma), 1.5 * top_damage));
  s.v_max = v_max.value_or(0.0);
  s.validate();
  return s;
}

namespace {

const char* encoding_name(StateEncoding e) {
  return e == StateEncoding::kOneHot ? "one_hot" : "probabilities";
}

}  // namespace

void to_json(nlohmann::json& j, const AgentConfig& c) {
  j = nlohmann::json{{"n_atoms", c.n_atoms},
                     {"hidden_layers", c.hidden_layers},
                     {"gamma", c.gamma},
                     {"learning_rate", c.learning_rate},
                     {"n_past_predictions", c.n_past_predictions},
                     {"encoding", encoding_name(c.encoding)},
                     {"replay_capacity", c.replay_capacity},
                     {"batch_size", c.batch_size},
                     {"target_refresh", c.target_refresh},
                     {"epsilon_start", c.epsilon_start},
                     {"epsilon_end", c.epsilon_end},
                     {"epsilon_anneal_fraction", c.epsilon_anneal_fraction},
                     {"training_passes", c.training_passes},
                     {"update_every", c.update_every},
                     {"warmup_steps", c.warmup_steps},
                     {"validate_every", c.validate_every},
                     {"seed", c.seed}};
  if (c.v_min) j["v_min"] = *c.v_min;
  if (c.v_max) j["v_max"] = *c.v_max;
}

void from_json(const nlohmann::json& j, AgentConfig& c) {
  if (!j.is_object()) throw ConfigError("agent config must be a JSON object");
  AgentConfig out;
  for (const auto& [key, value] : j.items()) {
    if (key == "n_atoms") out.n_atoms = value.get<std::size_t>();
    else if (key == "v_min") out.v_min = value.get<double>();
    else if (key == "v_max") out.v_max = value.get<double>();
    else if (key == "hidden_layers") out.hidden_layers = value.get<std::vector<std::size_t>>();
    else if (key == "gamma") out.gamma = value.get<double>();
    else if (key == "learning_rate") out.learning_rate = value.get<double>();
    else if (key == "n_past_predictions") out.n_past_predictions = value.get<std::size_t>();
    else if (key == "encoding") {
      const auto name = value.get<std::string>();
      if (name == "one_hot") out.encoding = StateEncoding::kOneHot;
      else if (name == "probabilities") out.encoding = StateEncoding::kProbabilities;
      else throw ConfigError("unknown state encoding '" + name + "'");
    } else if (key == "replay_capacity") out.replay_capacity = value.get<std::size_t>();
    else if (key == "batch_size") out.batch_size = value.get<std::size_t>();
    else if (key == "target_refresh") out.target_refresh = value.get<std::size_t>();
    else if (key == "epsilon_start") out.epsilon_start = value.get<double>();
    else if (key == "epsilon_end") out.epsilon_end = value.get<double>();
    else if (key == "epsilon_anneal_fraction") out.epsilon_anneal_fraction = value.get<double>();
    else if (key == "training_passes") out.training_passes = value.get<std::size_t>();
    else if (key == "update_every") out.update_every = value.get<std::size_t>();
    else if (key == "warmup_steps") out.warmup_steps = value.get<std::size_t>();
    else if (key == "validate_every") out.validate_every = value.get<std::size_t>();
    else if (key == "seed") out.seed = value.get<std::uint64_t>();
    else throw ConfigError("unknown agent config key '" + key + "'");
  }
  out.validate();
  c = out;
}

std::size_t state_size(const AgentConfig& config, int n_classes) {
  return config.n_past_predictions * static_cast<std::size_t>(n_classes);
}

void encode_state(const Episode& episode, std::size_t t, const AgentConfig& config,
                  std::span<double> out) {
  const auto n = static_cast<std::size_t>(episode.n_classes);
  const std::size_t k = config.n_past_predictions;
  if (out.size() != k * n) throw ProtocolError("state buffer has the wrong size");
  if (episode.history + 1 < k) {
    throw ProtocolError("episode keeps " + std::to_string(episode.history) +
                        " past predictions but the agent needs " + std::to_string(k - 1));
  }
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    const auto step = static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(j);
    double* slot = out.data() + j * n;
    if (config.encoding == StateEncoding::kOneHot) {
      slot[static_cast<std::size_t>(episode.predicted_at(step))] = 1.0;
    } else {
      const auto p = episode.probs_at(step);
      std::copy(p.begin(), p.end(), slot);
    }
  }
}

DistributionalQNet::DistributionalQNet(std::size_t inputs, const std::vector<std::size_t>& hidden,
                                       Support support)
    : mlp_(inputs, hidden, 2 * support.n_atoms), support_(support) {
  support_.validate();
}

namespace {

void softmax_into(std::span<const double> logits, std::vector<double>& out) {
  out.resize(logits.size());
  const double top = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - top);
    z += out[i];
  }
  for (double& p : out) p /= z;
}

}  // namespace

QDistribution DistributionalQNet::evaluate(std::span<const double> state, Mlp::Workspace& ws) const {
  const auto logits = mlp_.forward(state, ws);
  const std::size_t n = support_.n_atoms;
  QDistribution q;
  softmax_into(logits.subspan(0, n), q.probs[0]);
  softmax_into(logits.subspan(n, n), q.probs[1]);
  return q;
}

double DistributionalQNet::loss_and_gradient(std::span<const double> state, Action a,
                                             std::span<const double> target, Mlp::Workspace& ws,
                                             std::span<double> grad) const {
  const std::size_t n = support_.n_atoms;
  const QDistribution q = evaluate(state, ws);
  const auto& p = q.probs[static_cast<std::size_t>(a)];
  std::vector<double> g(2 * n, 0.0);
  double loss = 0.0;
  const std::size_t off = static_cast<std::size_t>(a) * n;
  for (std::size_t i = 0; i < n; ++i) {
    if (target[i] > 0.0) loss -= target[i] * std::log(std::max(p[i], 1e-300));
    g[off + i] = p[i] - target[i];
  }
  mlp_.backward(g, ws, grad);
  return loss;
}

AgentPolicy::AgentPolicy(AgentConfig config, int n_classes, DistributionalQNet net)
    : config_(std::move(config)), n_classes_(n_classes), net_(std::move(net)) {
  ws_ = net_.mlp().make_workspace();
  state_.resize(state_size(config_, n_classes_));
}

std::string AgentPolicy::name() const {
  return "rl_k" + std::to_string(config_.n_past_predictions);
}

void AgentPolicy::set_mode(ActMode mode, std::uint64_t seed) {
  mode_ = mode;
  rng_ = Rng(seed);
}

QDistribution AgentPolicy::distribution(const Episode& episode, std::size_t t) const {
  if (episode.n_classes != n_classes_) {
    throw ProtocolError("agent expects " + std::to_string(n_classes_) + "-class predictions");
  }
  encode_state(episode, t, config_, state_);
  return net_.evaluate(state_, ws_);
}

Action AgentPolicy::act(const Episode& episode, std::size_t t) {
  const ActMode mode = mode_ == ActMode::kExplore ? ActMode::kGreedy : mode_;
  return knitcity::act(distribution(episode, t), net_.support(), mode, rng_);
}

namespace {

struct Transition {
  std::uint32_t episode;
  std::uint32_t t;
  Action action;
};

double step_reward(const Episode& ep, std::size_t t, Action a, const CostModel& cost) {
  return a == Action::kLeave ? -cost.lambda_social : -cost.damage(ep.event_class[t]);
}

}  // namespace

AgentTrainingResult train_agent(std::span<const Episode> train, std::span<const Episode> valid,
                                const CostModel& cost, const AgentConfig& config) {
  config.validate();
  cost.validate();
  if (train.empty()) throw DataError("agent training needs at least one episode");
  const int n_classes = train.front().n_classes;
  for (const auto* set : {&train, &valid}) {
    for (const Episode& ep : *set) {
      if (!ep.has_predictions() || ep.n_classes != n_classes) {
        throw ProtocolError("all episodes must carry predictions from one forecaster");
      }
    }
  }
  const Support support = config.support_for(cost);
  const std::size_t in = state_size(config, n_classes);
  DistributionalQNet online(in, config.hidden_layers, support);
  online.mlp().initialize(derive_seed(config.seed, "agent-init"));
  DistributionalQNet target = online;
  Adam adam(online.mlp().parameters().size());
  std::vector<double> grad(online.mlp().parameters().size());
  auto ws = online.mlp().make_workspace();
  Rng rng(derive_seed(config.seed, "agent-explore"));

  std::vector<Transition> replay;
  replay.reserve(std::min<std::size_t>(config.replay_capacity, 1u << 20));
  std::size_t replay_next = 0;

  std::size_t total_steps = 0;
  for (const Episode& ep : train) total_steps += ep.length();
  total_steps *= std::max<std::size_t>(1, config.training_passes);
  const double anneal_steps = std::max(1.0, config.epsilon_anneal_fraction * static_cast<double>(total_steps));

  AgentTrainingResult result;
  std::vector<double> best_params(online.mlp().parameters().begin(), online.mlp().parameters().end());
  double best_reward = -std::numeric_limits<double>::infinity();
  double best_leave_fraction = 0.0;
  bool best_set = false;

  std::vector<double> state(in), next_state(in);
  std::size_t env_steps = 0, updates = 0, episodes_seen = 0;
  constexpr std::size_t kRecentWindow = 1000;
  std::vector<double> recent(kRecentWindow, 0.0);
  double recent_sum = 0.0;
  double loss_acc = 0.0;
  std::size_t loss_count = 0;

  const auto run_validation = [&] {
    AgentPolicy probe(config, n_classes, online);
    std::vector<PolicyScore> scores;
    std::size_t leaves = 0, steps = 0;
    for (const Episode& ep : valid) {
      const EpisodeTrace trace = run_policy(probe, ep, cost);
      leaves += trace.evacuated_steps;
      steps += trace.length();
      scores.push_back(score(trace, cost));
    }
    const AggregateScore agg = aggregate(scores);
    ValidationRow row;
    row.episodes_seen = episodes_seen;
    row.update = updates;
    row.reward_per_step = agg.reward_per_step;
    row.eta = agg.eta;
    row.kappa = agg.kappa;
    row.leave_fraction = steps ? static_cast<double>(leaves) / static_cast<double>(steps) : 0.0;
    result.validation.push_back(row);
    if (!best_set || row.reward_per_step > best_reward) {
      best_set = true;
      best_reward = row.reward_per_step;
      best_leave_fraction = row.leave_fraction;
      const auto params = online.mlp().parameters();
      best_params.assign(params.begin(), params.end());
    }
  };

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> projected;
  for (std::size_t pass = 0; pass < std::max<std::size_t>(1, config.training_passes); ++pass) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t e : order) {
      const Episode& ep = train[e];
      for (std::size_t t = 0; t < ep.length(); ++t) {
        const double epsilon =
            config.epsilon_start + (config.epsilon_end - config.epsilon_start) *
                                       std::min(1.0, static_cast<double>(env_steps) / anneal_steps);
        encode_state(ep, t, config, state);
        const Action a = act(online.evaluate(state, ws), support, ActMode::kExplore, rng, epsilon);
        const double r = step_reward(ep, t, a, cost);
        const Transition tr{static_cast<std::uint32_t>(e), static_cast<std::uint32_t>(t), a};
        if (replay.size() < config.replay_capacity) {
          replay.push_back(tr);
        } else {
          replay[replay_next] = tr;
          replay_next = (replay_next + 1) % config.replay_capacity;
        }
        recent_sum += r - recent[env_steps % kRecentWindow];
        recent[env_steps % kRecentWindow] = r;
        ++env_steps;

        if (env_steps < config.warmup_steps || env_steps % config.update_every != 0) continue;
        std::fill(grad.begin(), grad.end(), 0.0);
        double batch_loss = 0.0;
        for (std::size_t b = 0; b < config.batch_size; ++b) {
          const Transition& s = replay[rng.index(replay.size())];
          const Episode& sep = train[s.episode];
          const double reward = step_reward(sep, s.t, s.action, cost);
          const bool terminal = s.t + 1 >= sep.length();
          if (terminal) {
            std::vector<double> dummy(support.n_atoms, 0.0);
            dummy[0] = 1.0;
            projected = project(dummy, support, reward, config.gamma, true);
          } else {
            encode_state(sep, s.t + 1, config, next_state);
            const QDistribution qn = target.evaluate(next_state, ws);
            const Action best = act(qn, support, ActMode::kGreedy, rng);
            projected = project(qn.probs[static_cast<std::size_t>(best)], support, reward,
                                config.gamma, false);
          }
          encode_state(sep, s.t, config, state);
          batch_loss += online.loss_and_gradient(state, s.action, projected, ws, grad);
        }
        batch_loss /= static_cast<double>(config.batch_size);
        if (!std::isfinite(batch_loss)) {
          throw TrainingError("non-finite distributional loss at update " + std::to_string(updates),
                              updates);
        }
        const double inv = 1.0 / static_cast<double>(config.batch_size);
        for (double& g : grad) g *= inv;
        adam.step(online.mlp().parameters(), grad, config.learning_rate);
        ++updates;
        loss_acc += batch_loss;
        ++loss_count;
        if (updates % config.target_refresh == 0) target = online;
        if (updates % 100 == 0) {
          const double window = static_cast<double>(std::min(env_steps, kRecentWindow));
          result.log.push_back(AgentLogRow{updates, loss_acc / static_cast<double>(loss_count),
                                           epsilon, recent_sum / window});
          loss_acc = 0.0;
          loss_count = 0;
        }
      }
      ++episodes_seen;
      if (!valid.empty() && episodes_seen % config.validate_every == 0) run_validation();
    }
  }
  if (!valid.empty()) {
    if (result.validation.empty() || result.validation.back().episodes_seen != episodes_seen) {
      run_validation();
    }
    online.mlp().set_parameters(best_params);
    // Collapse: the kept policy never evacuates although some validation step
    // carries damage above the social cost.
    bool damaging = false;
    for (const Episode& ep : valid) {
      for (int cls : ep.event_class) damaging = damaging || cost.damage(cls) > cost.lambda_social;
    }
    result.collapsed = damaging && best_leave_fraction == 0.0;
  }
  result.policy = std::make_unique<AgentPolicy>(config, n_classes, online);
  return result;
}

namespace {
constexpr std::string_view kPolicyMagic = "KCAG";
}

void save_policy(const std::filesystem::path& path, const AgentPolicy& policy) {
  io::BinaryWriter w(path);
  w.magic(kPolicyMagic);
  w.put<std::uint32_t>(kPolicySchemaVersion);
  const Support& s = policy.net().support();
  const nlohmann::json echo{{"config", policy.config()},
                            {"n_classes", policy.n_classes()},
                            {"support", {{"v_min", s.v_min}, {"v_max", s.v_max}, {"n_atoms", s.n_atoms}}}};
  w.put_string(echo.dump());
  w.put_span<double>(policy.net().mlp().parameters());
  w.close();
}

std::unique_ptr<AgentPolicy> load_policy(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic(kPolicyMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kPolicySchemaVersion) {
    throw CheckpointError(path.string() + ": policy schema_version " + std::to_string(version) +
                          " is not supported (expected " + std::to_string(kPolicySchemaVersion) + ")");
  }
  AgentConfig config;
  int n_classes = 0;
  Support support;
  try {
    const auto echo = nlohmann::json::parse(r.get_string());
    config = echo.at("config").get<AgentConfig>();
    n_classes = echo.at("n_classes").get<int>();
    const auto& s = echo.at("support");
    support.v_min = s.at("v_min").get<double>();
    support.v_max = s.at("v_max").get<double>();
    support.n_atoms = s.at("n_atoms").get<std::size_t>();
    support.validate();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": bad config echo: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": bad config echo: " + e.what());
  }
  if (n_classes < 2 || n_classes > 5) throw CheckpointError(path.string() + ": bad class count");
  DistributionalQNet net(state_size(config, n_classes), config.hidden_layers, support);
  net.mlp().set_parameters(r.get_vector<double>(std::size_t{1} << 26));
  r.expect_end();
  return std::make_unique<AgentPolicy>(config, n_classes, std::move(net));
}

void write_agent_log_csv(const std::filesystem::path& path, std::span<const AgentLogRow> log) {
  std::string text = "update,loss,epsilon,mean_recent_reward\n";
  for (const AgentLogRow& row : log) {
    text += std::to_string(row.update) + "," + io::format_fixed(row.loss) + "," +
            io::format_fixed(row.epsilon) + "," + io::format_fixed(row.mean_recent_reward) + "\n";
  }
  io::write_text(path, text);
}

void write_validation_log_csv(const std::filesystem::path& path,
                              std::span<const ValidationRow> rows) {
  std::string text = "episodes_seen,update,reward_per_step,eta,kappa,leave_fraction\n";
  for (const ValidationRow& row : rows) {
    text += std::to_string(row.episodes_seen) + "," + std::to_string(row.update) + "," +
            io::format_fixed(row.reward_per_step) + "," + io::format_fixed(row.eta) + "," +
            io::format_fixed(row.kappa) + "," + io::format_fixed(row.leave_fraction) + "\n";
  }
  io::write_text(path, text);
}

}  // namespace knitcity
