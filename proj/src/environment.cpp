#include "knitcity/environment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "knitcity/error.hpp"
#include "knitcity/io.hpp"

namespace knitcity {

const char* to_string(Action action) { return action == Action::kLeave ? "leave" : "stay"; }

CostModel CostModel::standard(double mu, double lambda_social) {
  CostModel c;
  c.lambda_social = lambda_social;
  c.mu = mu;
  c.damage_weights = {0.0, 0.0, 0.0, mu, 10.0 * mu};
  c.validate();
  return c;
}

void CostModel::validate() const {
  if (!(lambda_social > 0.0) || !std::isfinite(lambda_social)) {
    throw ConfigError("cost model: lambda must be positive");
  }
  if (!(mu > 0.0) || !std::isfinite(mu)) throw ConfigError("cost model: mu must be positive");
  if (damage_weights.size() != kLadderClasses) {
    throw ConfigError("cost model: need one damage weight per ladder class");
  }
  for (std::size_t i = 0; i < damage_weights.size(); ++i) {
    if (!(damage_weights[i] >= 0.0) || (i > 0 && damage_weights[i] < damage_weights[i - 1])) {
      throw ConfigError("cost model: damage weights must be nonnegative and nondecreasing");
    }
  }
}

double CostModel::damage(int ladder_class) const {
  if (ladder_class < 0 || static_cast<std::size_t>(ladder_class) >= damage_weights.size()) {
    throw ProtocolError("event class out of range");
  }
  return damage_weights[static_cast<std::size_t>(ladder_class)];
}

std::vector<double> CostModel::predicted_damage(int n_classes) const {
  if (n_classes < 2 || static_cast<std::size_t>(n_classes) > kLadderClasses) {
    throw ConfigError("cost model: forecasts must have 2 to 5 classes");
  }
  const auto n = static_cast<std::size_t>(n_classes);
  std::vector<double> out(damage_weights.begin(), damage_weights.begin() + static_cast<std::ptrdiff_t>(n));
  // The top predicted class spans ladder classes n-1 .. 4.
  double mass = 0.0, weighted = 0.0;
  for (std::size_t j = n - 1; j < kLadderClasses; ++j) {
    mass += kReferenceClassProportions[j];
    weighted += kReferenceClassProportions[j] * damage_weights[j];
  }
  out[n - 1] = weighted / mass;
  return out;
}

std::size_t Episode::class_count(int ladder_class) const {
  return static_cast<std::size_t>(std::count(event_class.begin(), event_class.end(), ladder_class));
}

int Episode::predicted_at(std::ptrdiff_t t) const {
  const std::ptrdiff_t i = t + static_cast<std::ptrdiff_t>(history);
  if (i < 0 || static_cast<std::size_t>(i) >= predicted.size()) {
    throw ProtocolError("no prediction for step " + std::to_string(t) + " of episode " +
                        std::to_string(id));
  }
  return predicted[static_cast<std::size_t>(i)];
}

std::span<const double> Episode::probs_at(std::ptrdiff_t t) const {
  const std::ptrdiff_t i = t + static_cast<std::ptrdiff_t>(history);
  if (i < 0 || static_cast<std::size_t>(i) >= probs.size()) {
    throw ProtocolError("no prediction for step " + std::to_string(t) + " of episode " +
                        std::to_string(id));
  }
  return probs[static_cast<std::size_t>(i)];
}

EpisodeEnv::EpisodeEnv(const Episode& episode, const CostModel& cost)
    : episode_(&episode), cost_(cost) {
  cost_.validate();
  const std::size_t n = episode.length();
  trace_.actions.reserve(n);
  trace_.event_class.reserve(n);
  trace_.social.reserve(n);
  trace_.human.reserve(n);
}

EpisodeEnv::StepResult EpisodeEnv::step(Action action) {
  if (finished()) throw ProtocolError("step after the end of episode " + std::to_string(episode_->id));
  const int cls = episode_->event_class[t_];
  StepResult r;
  if (action == Action::kLeave) {
    r.social = -cost_.lambda_social;
    ++trace_.evacuated_steps;
  } else {
    r.human = 0.0 - cost_.damage(cls);  // never -0.0
    trace_.casualties -= r.human;
  }
  trace_.actions.push_back(action);
  trace_.event_class.push_back(cls);
  trace_.social.push_back(r.social);
  trace_.human.push_back(r.human);
  trace_.total_reward += r.social + r.human;
  ++t_;
  r.done = finished();
  return r;
}

PolicyScore score(const EpisodeTrace& trace, const CostModel& cost) {
  const std::size_t n = trace.length();
  if (n == 0) throw ProtocolError("cannot score an empty trace");
  double max_casualties = 0.0;
  for (int cls : trace.event_class) max_casualties += cost.damage(cls);
  const double length = static_cast<double>(n);
  PolicyScore s;
  s.eta = max_casualties > 0.0 ? 1.0 - trace.casualties / max_casualties : 1.0;
  s.kappa = 1.0 - static_cast<double>(trace.evacuated_steps) / length;
  s.reward_per_step = trace.total_reward / length;
  s.damage_density = max_casualties / length;
  return s;
}

AggregateScore aggregate(std::span<const PolicyScore> scores) {
  AggregateScore a;
  a.n = scores.size();
  if (scores.empty()) return a;
  const double n = static_cast<double>(scores.size());
  const auto mean_se = [&](auto field, double& mean, double& se) {
    double sum = 0.0;
    for (const auto& s : scores) sum += field(s);
    mean = sum / n;
    if (scores.size() < 2) {
      se = 0.0;
      return;
    }
    double ss = 0.0;
    for (const auto& s : scores) ss += (field(s) - mean) * (field(s) - mean);
    se = std::sqrt(ss / (n - 1.0) / n);
  };
  mean_se([](const PolicyScore& s) { return s.eta; }, a.eta, a.eta_se);
  mean_se([](const PolicyScore& s) { return s.kappa; }, a.kappa, a.kappa_se);
  mean_se([](const PolicyScore& s) { return s.reward_per_step; }, a.reward_per_step, a.reward_se);
  return a;
}

RandomPolicy::RandomPolicy(double p, std::uint64_t seed) : p_(p), rng_(seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("random policy: p must be in [0,1]");
}

std::string RandomPolicy::name() const { return "random_p" + io::format_double(p_); }

Action RandomPolicy::act(const Episode&, std::size_t) {
  return rng_.bernoulli(p_) ? Action::kLeave : Action::kStay;
}

Action OraclePolicy::act(const Episode& episode, std::size_t t) {
  return cost_.damage(episode.event_class[t]) > cost_.lambda_social ? Action::kLeave
                                                                    : Action::kStay;
}

void NaivePolicy::begin_episode(const Episode& episode) {
  if (!episode.has_predictions()) {
    throw ProtocolError("naive policy needs predictions (episode " + std::to_string(episode.id) + ")");
  }
  damage_ = cost_.predicted_damage(episode.n_classes);
}

Action NaivePolicy::act(const Episode& episode, std::size_t t) {
  const int cls = episode.predicted_at(static_cast<std::ptrdiff_t>(t));
  return damage_[static_cast<std::size_t>(cls)] > cost_.lambda_social ? Action::kLeave
                                                                      : Action::kStay;
}

EpisodeTrace run_policy(Policy& policy, const Episode& episode, const CostModel& cost) {
  EpisodeEnv env(episode, cost);
  policy.begin_episode(episode);
  while (!env.finished()) env.step(policy.act(episode, env.t()));
  return env.trace();
}

std::vector<PolicyScore> evaluate_policy(Policy& policy, std::span<const Episode> episodes,
                                         const CostModel& cost) {
  std::vector<PolicyScore> out;
  out.reserve(episodes.size());
  for (const Episode& ep : episodes) out.push_back(score(run_policy(policy, ep, cost), cost));
  return out;
}

RewardLine reward_geometry(std::span<const PolicyScore> scores, double tolerance) {
  if (scores.empty()) throw GeometryError("no scores");
  const double d = scores.front().damage_density;
  for (const PolicyScore& s : scores) {
    if (std::fabs(s.damage_density - d) > tolerance * std::max(1.0, std::fabs(d))) {
      throw GeometryError("scores come from episodes with different damage densities");
    }
  }
  RewardLine line;
  line.damage_density = d;
  line.c0 = -1.0 - d;
  line.c1 = 1.0;
  line.c2 = d;
  for (const PolicyScore& s : scores) {
    const double predicted = line.reward(s.eta, s.kappa);
    if (std::fabs(predicted - s.reward_per_step) > tolerance * std::max(1.0, 1.0 + d)) {
      throw GeometryError("score violates the accounting identity");
    }
  }
  return line;
}

void EpisodePlan::validate() const {
  if (length == 0) throw ConfigError("episode length must be positive");
  if (total() == 0) throw ConfigError("episode plan requests no episodes");
  if (!(target_major_events > 0.0)) throw ConfigError("target major-event count must be positive");
}

namespace {

double log_poisson(std::size_t c, double rate) {
  const double k = static_cast<double>(c);
  return k * std::log(rate) - rate - std::lgamma(k + 1.0);
}

}  // namespace

EpisodeSplit select_episode_windows(const EventSeries& events, const ClassThresholds& ladder,
                                    const EpisodePlan& plan, std::size_t earliest_start,
                                    std::uint64_t seed) {
  plan.validate();
  if (ladder.n_classes != static_cast<int>(kLadderClasses)) {
    throw ConfigError("episode selection needs the five-class ladder");
  }
  const std::size_t size = events.size();
  const std::size_t need = plan.total();
  if (size < earliest_start + plan.length * need) {
    throw DataError("series of length " + std::to_string(size) + " cannot hold " +
                    std::to_string(need) + " episodes of length " + std::to_string(plan.length));
  }
  Rng rng(derive_seed(seed, "episodes"));
  const std::size_t offset = earliest_start + rng.index(plan.length);
  const std::size_t n_tiles = (size - offset) / plan.length;
  const int top = static_cast<int>(kLadderClasses) - 1;
  std::vector<std::size_t> counts(n_tiles, 0);
  for (std::size_t i = 0; i < n_tiles; ++i) {
    for (std::size_t t = offset + i * plan.length; t < offset + (i + 1) * plan.length; ++t) {
      if (class_of(events.delta_f[t], ladder) == top) ++counts[i];
    }
  }
  if (n_tiles < need) {
    throw DataError("series cannot hold " + std::to_string(need) + " disjoint episodes");
  }
  // Proposal is the empirical count distribution of the tiles, which is
  // overdispersed relative to a Poisson law because events cluster.
  const std::size_t max_count = *std::max_element(counts.begin(), counts.end());
  std::vector<double> empirical(max_count + 1, 0.0);
  for (std::size_t c : counts) empirical[c] += 1.0 / static_cast<double>(n_tiles);
  const auto log_ratio = [&](std::size_t c) {
    return log_poisson(c, plan.target_major_events) - std::log(empirical[c]);
  };
  double log_max = -INFINITY;
  for (std::size_t c : counts) log_max = std::max(log_max, log_ratio(c));

  std::vector<std::size_t> order(n_tiles);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order.begin(), order.end());
  std::vector<std::size_t> chosen;
  for (std::size_t i : order) {
    if (chosen.size() == need) break;
    if (rng.uniform() < std::exp(log_ratio(counts[i]) - log_max)) chosen.push_back(i);
  }
  if (chosen.size() < need) {
    throw DataError("series too short: only " + std::to_string(chosen.size()) + " of " +
                    std::to_string(need) + " requested episodes passed selection");
  }
  EpisodeSplit split;
  for (std::size_t k = 0; k < need; ++k) {
    const EpisodeWindow w{offset + chosen[k] * plan.length, plan.length};
    if (k < plan.n_train) split.train.push_back(w);
    else if (k < plan.n_train + plan.n_valid) split.valid.push_back(w);
    else split.test.push_back(w);
  }
  return split;
}

Episode make_episode(const EventSeries& events, const ClassThresholds& ladder,
                     const EpisodeWindow& window, std::size_t id) {
  if (window.length == 0 || window.start + window.length > events.size()) {
    throw DataError("episode window lies outside the series");
  }
  Episode ep;
  ep.id = id;
  ep.start = window.start;
  ep.delta_f.assign(events.delta_f.begin() + static_cast<std::ptrdiff_t>(window.start),
                    events.delta_f.begin() + static_cast<std::ptrdiff_t>(window.start + window.length));
  ep.event_class.reserve(window.length);
  for (double d : ep.delta_f) ep.event_class.push_back(class_of(d, ladder));
  return ep;
}

void attach_predictions(Episode& episode, std::span<const StreamPrediction> stream, int n_classes,
                        std::size_t history) {
  if (episode.start < history) throw DataError("episode starts before its prediction history");
  const std::size_t first = episode.start - history;
  const std::size_t last = episode.start + episode.length();
  episode.n_classes = n_classes;
  episode.history = history;
  episode.predicted.clear();
  episode.probs.clear();
  // stream is sorted by t; find the first needed entry.
  auto it = std::lower_bound(stream.begin(), stream.end(), first,
                             [](const StreamPrediction& p, std::size_t t) { return p.t < t; });
  for (std::size_t t = first; t < last; ++t, ++it) {
    if (it == stream.end() || it->t != t) {
      throw DataError("missing prediction for step " + std::to_string(t));
    }
    episode.predicted.push_back(it->cls);
    episode.probs.push_back(it->probs);
  }
}

void attach_predictions(Episode& episode, const Forecaster& forecaster, const EventSeries& events,
                        const TargetSpec& spec, std::size_t n_past, std::size_t history) {
  if (episode.start < history) throw DataError("episode starts before its prediction history");
  const auto stream = predict_stream(forecaster, events, spec, n_past, episode.start - history,
                                     episode.start + episode.length());
  attach_predictions(episode, stream, spec.n_classes, history);
}

void attach_perfect_predictions(Episode& episode, const EventSeries& events,
                                const ClassThresholds& ladder, std::size_t history) {
  if (episode.start < history) throw DataError("episode starts before its prediction history");
  const auto n = static_cast<std::size_t>(ladder.n_classes);
  episode.n_classes = ladder.n_classes;
  episode.history = history;
  episode.predicted.clear();
  episode.probs.clear();
  for (std::size_t t = episode.start - history; t < episode.start + episode.length(); ++t) {
    const int cls = class_of(events.delta_f[t], ladder);
    std::vector<double> p(n, 0.0);
    p[static_cast<std::size_t>(cls)] = 1.0;
    episode.predicted.push_back(cls);
    episode.probs.push_back(std::move(p));
  }
}

EpisodeSets make_episodes(const EventSeries& events, const ClassThresholds& ladder,
                          const Forecaster& forecaster, const TargetSpec& spec, std::size_t n_past,
                          const EpisodePlan& plan, std::uint64_t seed) {
  const std::size_t earliest = n_past + spec.tau + plan.history;
  const EpisodeSplit split = select_episode_windows(events, ladder, plan, earliest, seed);
  EpisodeSets sets;
  std::size_t id = 0;
  const auto build = [&](const std::vector<EpisodeWindow>& windows, std::vector<Episode>& out) {
    for (const EpisodeWindow& w : windows) {
      Episode ep = make_episode(events, ladder, w, id++);
      attach_predictions(ep, forecaster, events, spec, n_past, plan.history);
      out.push_back(std::move(ep));
    }
  };
  build(split.train, sets.train);
  build(split.valid, sets.valid);
  build(split.test, sets.test);
  return sets;
}

void write_trace_csv(const std::filesystem::path& path, const EpisodeTrace& trace) {
  std::string text = "t,action,class,s,h\n";
  for (std::size_t t = 0; t < trace.length(); ++t) {
    text += std::to_string(t) + "," + to_string(trace.actions[t]) + "," +
            std::to_string(trace.event_class[t]) + "," + io::format_double(trace.social[t]) + "," +
            io::format_double(trace.human[t]) + "\n";
  }
  io::write_text(path, text);
}

void write_score_summary_csv(const std::filesystem::path& path, std::span<const PolicyScore> scores) {
  std::string text = "episode,eta,kappa,r\n";
  for (std::size_t i = 0; i < scores.size(); ++i) {
    text += std::to_string(i) + "," + io::format_fixed(scores[i].eta) + "," +
            io::format_fixed(scores[i].kappa) + "," + io::format_fixed(scores[i].reward_per_step) +
            "\n";
  }
  io::write_text(path, text);
}

}  // namespace knitcity
