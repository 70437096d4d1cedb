#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include <nlohmann/json.hpp>

#include "knitcity/agent.hpp"
#include "knitcity/error.hpp"
#include "knitcity/random.hpp"

using namespace knitcity;

namespace {

std::vector<double> random_distribution(Rng& rng, std::size_t n) {
  std::vector<double> p(n);
  for (double& x : p) x = rng.bernoulli(0.3) ? 0.0 : rng.uniform();
  p[rng.index(n)] += 0.1;
  const double s = std::accumulate(p.begin(), p.end(), 0.0);
  for (double& x : p) x /= s;
  return p;
}

// Neighbour-split projection written out independently: every shifted atom
// is clipped and its mass shared between the two fixed atoms around it.
std::vector<double> brute_project(const std::vector<double>& p, const Support& s, double r, double gamma,
                                  bool terminal) {
  std::vector<double> out(s.n_atoms, 0.0);
  for (std::size_t j = 0; j < p.size(); ++j) {
    double z = r + (terminal ? 0.0 : gamma * s.atom(j));
    z = std::min(std::max(z, s.v_min), s.v_max);
    std::size_t lower = 0;
    for (std::size_t i = 0; i < s.n_atoms; ++i) {
      if (s.atom(i) <= z + 1e-12) lower = i;
    }
    if (lower + 1 >= s.n_atoms || std::abs(s.atom(lower) - z) < 1e-12) {
      out[lower] += p[j];
      continue;
    }
    const double w_upper = (z - s.atom(lower)) / (s.atom(lower + 1) - s.atom(lower));
    out[lower] += p[j] * (1.0 - w_upper);
    out[lower + 1] += p[j] * w_upper;
  }
  return out;
}

Episode episode_of(const std::vector<int>& classes, int n_classes, std::size_t history,
                   const std::vector<int>& predicted) {
  Episode ep;
  ep.event_class = classes;
  ep.delta_f.assign(classes.size(), 0.0);
  ep.n_classes = n_classes;
  ep.history = history;
  ep.predicted = predicted;
  for (int p : predicted) {
    std::vector<double> row(static_cast<std::size_t>(n_classes), 0.0);
    row[static_cast<std::size_t>(p)] = 1.0;
    ep.probs.push_back(row);
  }
  return ep;
}

struct Games {
  std::vector<Episode> train, valid, test;
};

// Calibrated windows with ground-truth forecasts as predictions.
const Games& perfect_games() {
  static const Games g = [] {
    GeneratorConfig gen;
    gen.rng_seed = 41;
    const EventSeries events = synthesize(gen, 800'000);
    const ClassThresholds ladder = fit_class_thresholds(events, 5);
    EpisodePlan plan;
    plan.length = 2500;
    plan.n_train = 8;
    plan.n_valid = 4;
    plan.n_test = 10;
    plan.target_major_events = 1.0;
    plan.history = 4;
    const EpisodeSplit split = select_episode_windows(events, ladder, plan, 100, 2);
    Games out;
    std::size_t id = 0;
    const auto fill = [&](const std::vector<EpisodeWindow>& ws, std::vector<Episode>& dst) {
      for (const EpisodeWindow& w : ws) {
        dst.push_back(make_episode(events, ladder, w, id++));
        attach_perfect_predictions(dst.back(), events, ladder, plan.history);
      }
    };
    fill(split.train, out.train);
    fill(split.valid, out.valid);
    fill(split.test, out.test);
    return out;
  }();
  return g;
}

AgentConfig quick_config(std::size_t k) {
  AgentConfig c;
  c.n_past_predictions = k;
  c.warmup_steps = 500;
  c.training_passes = 2;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("support and default bounds") {
  const Support s;
  CHECK(s.atom(0) == -300.0);
  CHECK(s.atom(50) == 0.0);
  CHECK(s.delta() == 6.0);
  const AgentConfig c;
  const Support at20 = c.support_for(CostModel::standard(20.0));
  CHECK(at20.v_min == -300.0);
  CHECK(at20.v_max == 0.0);
  // Small mu: the social cost horizon 1 / (1 - gamma) = 20 dominates.
  CHECK(c.support_for(CostModel::standard(0.1)).v_min == doctest::Approx(-20.0));
  AgentConfig bad;
  bad.gamma = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.n_atoms = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("project: identity and clipping") {
  Rng rng(1);
  const Support s{-10.0, 10.0, 21};
  const auto p = random_distribution(rng, 21);
  const auto same = project(p, s, 0.0, 1.0);
  for (std::size_t i = 0; i < 21; ++i) CHECK(same[i] == p[i]);
  const auto below = project(p, s, -100.0, 0.5);
  CHECK(below[0] == doctest::Approx(1.0).epsilon(1e-15));
  const auto above = project(p, s, 100.0, 0.5);
  CHECK(above[20] == doctest::Approx(1.0).epsilon(1e-15));
  const auto term = project(p, s, 3.0, 0.9, true);
  CHECK(term[13] == doctest::Approx(1.0).epsilon(1e-15));
  std::vector<double> nan = p;
  nan[3] = std::nan("");
  CHECK_THROWS_AS(project(nan, s, 0.0, 0.9), NumericError);
  CHECK_THROWS_AS(project(p, s, INFINITY, 0.9), NumericError);
}

TEST_CASE("project: matches the neighbour-split oracle") {
  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.index(60);
    const double lo = -rng.uniform() * 300.0 - 1.0;
    const Support s{lo, lo + 1.0 + rng.uniform() * 300.0, n};
    const auto p = random_distribution(rng, n);
    const double r = (rng.uniform() - 0.5) * 2.0 * (s.v_max - s.v_min);
    const double gamma = rng.uniform();
    const bool terminal = rng.bernoulli(0.1);
    const auto got = project(p, s, r, gamma, terminal);
    const auto want = brute_project(p, s, r, gamma, terminal);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-9);
    CHECK(std::accumulate(got.begin(), got.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("project: mass and mean preserved without clipping") {
  Rng rng(3);
  const Support s{-100.0, 100.0, 51};
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = random_distribution(rng, 51);
    const double gamma = 0.5 * rng.uniform();
    const double r = (rng.uniform() - 0.5) * 40.0;  // |r| + gamma * 100 < 100
    const auto q = project(p, s, r, gamma);
    CHECK(std::abs(s.mean(q) - (r + gamma * s.mean(p))) <= s.delta());
  }
}

TEST_CASE("act: greedy, ties, sampling and exploration") {
  const Support s{-2.0, 0.0, 3};
  Rng rng(4);
  QDistribution q;
  q.probs[0] = {0, 0, 1};  // stay: 0
  q.probs[1] = {0, 1, 0};  // leave: -1
  CHECK(act(q, s, ActMode::kGreedy, rng) == Action::kStay);
  std::swap(q.probs[0], q.probs[1]);
  CHECK(act(q, s, ActMode::kGreedy, rng) == Action::kLeave);
  q.probs[0] = q.probs[1] = {0.2, 0.3, 0.5};
  CHECK(act(q, s, ActMode::kGreedy, rng) == Action::kStay);

  q.probs[0] = {0.5, 0.0, 0.5};
  q.probs[1] = {0.0, 1.0, 0.0};
  Rng a(9), b(9);
  std::size_t leaves = 0;
  for (int i = 0; i < 400; ++i) {
    const Action x = act(q, s, ActMode::kSample, a);
    CHECK(x == act(q, s, ActMode::kSample, b));
    leaves += x == Action::kLeave;
  }
  // Leave wins exactly when stay draws -2.
  CHECK(leaves > 150);
  CHECK(leaves < 250);

  std::size_t explored = 0;
  for (int i = 0; i < 2000; ++i) explored += act(q, s, ActMode::kExplore, rng, 1.0) == Action::kLeave;
  CHECK(std::abs(static_cast<double>(explored) / 2000.0 - 0.5) < 0.05);
  for (int i = 0; i < 50; ++i) CHECK(act(q, s, ActMode::kExplore, rng, 0.0) == act(q, s, ActMode::kGreedy, rng));
}

TEST_CASE("act: greedy choice survives affine rescaling of the support") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    QDistribution q;
    q.probs[0] = random_distribution(rng, 11);
    q.probs[1] = random_distribution(rng, 11);
    const Support s{-5.0, 5.0, 11};
    const double scale = 0.1 + 10.0 * rng.uniform(), shift = 50.0 * rng.normal();
    const Support t{scale * -5.0 + shift, scale * 5.0 + shift, 11};
    CHECK(act(q, s, ActMode::kGreedy, rng) == act(q, t, ActMode::kGreedy, rng));
  }
}

TEST_CASE("Mlp: backward matches finite differences") {
  Mlp net(5, {7, 6}, 3);
  net.initialize(7);
  Rng rng(8);
  std::vector<double> x(5), w(3);
  for (double& v : x) v = rng.normal();
  for (double& v : w) v = rng.normal();
  // Loss = w . output
  auto ws = net.make_workspace();
  net.forward(x, ws);
  std::vector<double> grad(net.parameters().size(), 0.0);
  net.backward(w, ws, grad);
  std::vector<double> params(net.parameters().begin(), net.parameters().end());
  const auto loss = [&](const std::vector<double>& p) {
    Mlp copy = net;
    copy.set_parameters(p);
    auto w2 = copy.make_workspace();
    const auto out = copy.forward(x, w2);
    return std::inner_product(out.begin(), out.end(), w.begin(), 0.0);
  };
  const double h = 1e-6;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto up = params, down = params;
    up[i] += h;
    down[i] -= h;
    const double fd = (loss(up) - loss(down)) / (2 * h);
    CHECK(std::abs(fd - grad[i]) <= 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("distributional loss on a fixed target decreases") {
  const Support s{-10.0, 0.0, 11};
  DistributionalQNet net(4, {16, 16}, s);
  net.mlp().initialize(3);
  const std::vector<double> state = {1, 0, 0.5, -1};
  std::vector<double> target(11, 0.0);
  target[2] = 0.7;
  target[8] = 0.3;
  Adam adam(net.mlp().parameters().size());
  auto ws = net.mlp().make_workspace();
  double prev = INFINITY;
  for (int update = 0; update < 100; ++update) {
    std::vector<double> grad(net.mlp().parameters().size(), 0.0);
    const double loss = net.loss_and_gradient(state, Action::kLeave, target, ws, grad);
    CHECK(loss < prev + 1e-12);
    prev = loss;
    adam.step(net.mlp().parameters(), grad, 1e-3);
  }
  const QDistribution q = net.evaluate(state, ws);
  for (const auto& p : q.probs) {
    CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("encode_state: most recent first, one-hot or probabilities") {
  Episode ep = episode_of({0, 0, 0}, 3, 2, {1, 2, 0, 1, 2});
  ep.probs[3] = {0.2, 0.5, 0.3};
  AgentConfig c;
  c.n_past_predictions = 3;
  REQUIRE(state_size(c, 3) == 9);
  std::vector<double> out(9);
  encode_state(ep, 1, c, out);
  // Steps 1, 0, -1 hold predictions 1, 0, 2.
  CHECK(out == std::vector<double>{0, 1, 0, 1, 0, 0, 0, 0, 1});
  c.encoding = StateEncoding::kProbabilities;
  encode_state(ep, 1, c, out);
  CHECK(out == std::vector<double>{0.2, 0.5, 0.3, 1, 0, 0, 0, 0, 1});
}

TEST_CASE("train_agent: zero damage converges to always stay") {
  std::vector<Episode> train, valid;
  for (int i = 0; i < 4; ++i) {
    train.push_back(episode_of(std::vector<int>(600, i % 3), 3, 1, std::vector<int>(601, i % 3)));
    valid.push_back(train.back());
  }
  const CostModel cost = CostModel::standard(20.0);
  AgentConfig c = quick_config(1);
  c.warmup_steps = 200;
  const AgentTrainingResult res = train_agent(train, valid, cost, c);
  CHECK_FALSE(res.collapsed);  // nothing to evacuate for
  for (const Episode& ep : valid) {
    for (Action a : run_policy(*res.policy, ep, cost).actions) CHECK(a == Action::kStay);
  }
}

TEST_CASE("train_agent: perfect forecasts get within 10% of the oracle") {
  const Games& g = perfect_games();
  const CostModel cost = CostModel::standard(20.0);
  const AgentTrainingResult res = train_agent(g.train, g.valid, cost, quick_config(1));
  OraclePolicy oracle(cost);
  const double agent_r = aggregate(evaluate_policy(*res.policy, g.test, cost)).reward_per_step;
  const double oracle_r = aggregate(evaluate_policy(oracle, g.test, cost)).reward_per_step;
  CHECK(agent_r >= oracle_r - 0.1 * std::abs(oracle_r));
  CHECK_FALSE(res.log.empty());
  CHECK_FALSE(res.validation.empty());
}

TEST_CASE("train_agent: deterministic per seed; uninformative forecasts collapse to staying") {
  const Games& g = perfect_games();
  std::vector<Episode> blind_train = g.train, blind_valid = g.valid;
  for (auto* set : {&blind_train, &blind_valid}) {
    for (Episode& ep : *set) {
      std::fill(ep.predicted.begin(), ep.predicted.end(), 0);
      for (auto& row : ep.probs) row = {1, 0, 0, 0, 0};
    }
  }
  const CostModel cost = CostModel::standard(20.0);
  AgentConfig c = quick_config(2);
  c.training_passes = 1;
  const AgentTrainingResult a = train_agent(blind_train, blind_valid, cost, c);
  const AgentTrainingResult b = train_agent(blind_train, blind_valid, cost, c);
  const auto pa = a.policy->net().mlp().parameters(), pb = b.policy->net().mlp().parameters();
  CHECK(std::equal(pa.begin(), pa.end(), pb.begin()));
  // With nothing to act on, staying beats leaving at mu = 20; the training log flags it.
  CHECK(a.collapsed);
  CHECK(a.validation.back().leave_fraction == 0.0);
}

TEST_CASE("policy checkpoint and config JSON") {
  const Games& g = perfect_games();
  const CostModel cost = CostModel::standard(20.0);
  AgentConfig c = quick_config(2);
  c.training_passes = 1;
  const AgentTrainingResult res = train_agent(g.train, g.valid, cost, c);
  const auto path = std::filesystem::temp_directory_path() / "knitcity_test_policy.kcag";
  save_policy(path, *res.policy);
  const auto back = load_policy(path);
  CHECK(back->name() == "rl_k2");
  for (std::size_t t = 0; t < 200; ++t) {
    const QDistribution qa = res.policy->distribution(g.test[0], t), qb = back->distribution(g.test[0], t);
    CHECK(qa.probs == qb.probs);
  }
  std::filesystem::resize_file(path, 10);
  CHECK_THROWS_AS(load_policy(path), CheckpointError);
  std::filesystem::remove(path);

  const nlohmann::json j = c;
  CHECK(j.at("encoding") == "one_hot");
  CHECK(j.get<AgentConfig>().n_past_predictions == 2);
  nlohmann::json bad = j;
  bad["dueling"] = true;
  CHECK_THROWS_AS(bad.get<AgentConfig>(), ConfigError);
}
