// Runs every acceptance criterion and prints one PASS/FAIL line each.
// Usage: knitcity_acceptance <scratch-dir>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "knitcity/agent.hpp"
#include "knitcity/environment.hpp"
#include "knitcity/io.hpp"
#include "knitcity/pipeline.hpp"
#include "knitcity/predictor.hpp"
#include "knitcity/random.hpp"
#include "knitcity/signal.hpp"

using namespace knitcity;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  failures += !o.pass;
  std::printf("%s  %2d %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", id, title.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string num(double x, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << x;
  return s.str();
}

// Episodes cut from one calibrated stream with the default 75/50/180 plan.
struct Games {
  EventSeries events;
  ClassThresholds ladder;
  std::vector<Episode> all;
};

const Games& calibrated_games() {
  static const Games g = [] {
    Games out;
    GeneratorConfig gen;
    gen.rng_seed = 2024;
    out.events = synthesize(gen, 10'000'000);
    out.ladder = fit_class_thresholds(out.events, 5);
    const EpisodeSplit split = select_episode_windows(out.events, out.ladder, EpisodePlan{}, 1000, 7);
    std::size_t id = 0;
    for (const auto* set : {&split.train, &split.valid, &split.test}) {
      for (const EpisodeWindow& w : *set) out.all.push_back(make_episode(out.events, out.ladder, w, id++));
    }
    return out;
  }();
  return g;
}

std::vector<PolicyScore> read_scores(const fs::path& path) {
  std::istringstream in(io::read_text(path));
  std::string line;
  std::getline(in, line);
  std::vector<PolicyScore> out;
  while (std::getline(in, line)) {
    std::vector<double> v;
    std::istringstream ls(line);
    std::string x;
    while (std::getline(ls, x, ',')) v.push_back(std::stod(x));
    out.push_back({v.at(1), v.at(2), v.at(3), v.at(4)});
  }
  return out;
}

// P(X >= k) for X ~ Binomial(n, 1/2).
double binomial_upper_tail(std::size_t k, std::size_t n) {
  double p = 0.0;
  for (std::size_t i = k; i <= n; ++i) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::log(2.0));
  }
  return p;
}

LabeledDataset separable_toy(std::uint64_t seed, std::size_t count, std::size_t n_past) {
  Rng rng(seed);
  auto samples = std::make_shared<std::vector<LabeledSample>>();
  std::vector<std::size_t> by[2];
  for (std::size_t i = 0; i < count; ++i) {
    LabeledSample s;
    const double m = (i % 2 == 0) ? 0.5 : -0.5;
    s.f.resize(n_past);
    s.df.resize(n_past);
    s.y.assign(n_past, 0.0);
    for (std::size_t j = 0; j < n_past; ++j) {
      s.f[j] = rng.normal();
      s.df[j] = m + rng.normal();
    }
    s.label = std::accumulate(s.df.begin(), s.df.end(), 0.0) > 0.0 ? 1 : 0;
    s.t = i;
    by[s.label].push_back(i);
    samples->push_back(std::move(s));
  }
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < std::min(by[0].size(), by[1].size()); ++i) {
    rows.push_back(by[0][i]);
    rows.push_back(by[1][i]);
  }
  TargetSpec spec;
  spec.kind = TargetKind::kT1;
  spec.tau = 1;
  spec.n_classes = 2;
  spec.thresholds = ClassThresholds::from_anchor(0.1, 2);
  return LabeledDataset(spec, n_past, samples, rows, true);
}

std::vector<double> brute_project(const std::vector<double>& p, const Support& s, double r, double gamma) {
  std::vector<double> out(s.n_atoms, 0.0);
  for (std::size_t j = 0; j < p.size(); ++j) {
    const double z = std::clamp(r + gamma * s.atom(j), s.v_min, s.v_max);
    const double b = (z - s.v_min) / s.delta();
    const auto lo = static_cast<std::size_t>(std::floor(b + 1e-12));
    if (lo + 1 >= s.n_atoms || std::abs(b - std::round(b)) < 1e-12) {
      out[static_cast<std::size_t>(std::lround(b))] += p[j];
    } else {
      out[lo] += p[j] * (lo + 1 - b);
      out[lo + 1] += p[j] * (b - lo);
    }
  }
  return out;
}

RunConfig desk_config(const fs::path& out) {
  RunConfig c;  // desk-scale defaults: T3, tau 20, N 5, k 4, mu 20, 20/10/30 episodes
  c.seed = 1;
  c.output_dir = out;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path scratch = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "knitcity_acceptance";
  fs::remove_all(scratch / "desk_a");
  fs::remove_all(scratch / "desk_b");
  fs::create_directories(scratch);

  report(1, "statistics calibration", [] {
    const auto start = std::chrono::steady_clock::now();
    GeneratorConfig g;
    g.rng_seed = 1;
    const EventSeries e = synthesize(g, 1'000'000);
    const ClassThresholds th = fit_class_thresholds(e, 5);
    const StatsReport st = event_statistics(e, th);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const double nonzero = 1.0 - st.zero_fraction;
    bool ok = nonzero >= 0.05 && nonzero <= 0.08 && st.slope && std::abs(*st.slope + 1.3) <= 0.15 && secs < 60.0;
    std::string props;
    for (std::size_t k = 0; k < 5; ++k) {
      const double want = kReferenceClassProportions[k], got = st.class_fraction_all[k];
      ok = ok && std::abs(got - want) <= 0.3 * want;
      props += (k ? "," : "") + num(100.0 * got, 3);
    }
    return Outcome{ok, "nonzero " + num(nonzero) + " in [0.05,0.08], slope " + (st.slope ? num(*st.slope) : "none") +
                           " within -1.3+-0.15, classes% [" + props + "] within 30% rel of [93.7,2.19,2.58,1.45,0.08]"};
  });

  report(2, "exact policy geometry", [] {
    const Games& g = calibrated_games();
    const CostModel cost = CostModel::standard(20.0);
    AlwaysStayPolicy stay;
    AlwaysLeavePolicy leave;
    std::size_t damaging = 0;
    bool exact = true;
    std::vector<const Episode*> pool;
    for (const Episode& ep : g.all) {
      if (ep.class_count(3) + ep.class_count(4) == 0) continue;
      ++damaging;
      pool.push_back(&ep);
      const PolicyScore s = score(run_policy(stay, ep, cost), cost), l = score(run_policy(leave, ep, cost), cost);
      exact = exact && s.eta == 0.0 && s.kappa == 1.0 && l.eta == 1.0 && l.kappa == 0.0;
    }
    Rng rng(99);
    double se_eta = 0, se_kappa = 0, m_eta = 0, m_kappa = 0;
    std::vector<double> etas, kappas;
    for (int i = 0; i < 200; ++i) {
      RandomPolicy policy(rng.uniform(), 500 + static_cast<std::uint64_t>(i));
      const PolicyScore s = score(run_policy(policy, *pool[static_cast<std::size_t>(i) % pool.size()], cost), cost);
      etas.push_back(s.eta);
      kappas.push_back(s.kappa);
    }
    const auto mean_se = [](const std::vector<double>& x, double& m, double& se) {
      const double n = static_cast<double>(x.size());
      m = std::accumulate(x.begin(), x.end(), 0.0) / n;
      double v = 0;
      for (double a : x) v += (a - m) * (a - m);
      se = std::sqrt(v / (n - 1) / n);
    };
    mean_se(etas, m_eta, se_eta);
    mean_se(kappas, m_kappa, se_kappa);
    // Standard error of eta + kappa - 1 from the per-policy deviations.
    std::vector<double> dev(etas.size());
    for (std::size_t i = 0; i < dev.size(); ++i) dev[i] = etas[i] + kappas[i] - 1.0;
    double m_dev, se_dev;
    mean_se(dev, m_dev, se_dev);
    const bool line = std::abs(m_dev) <= 3.0 * se_dev;
    return Outcome{exact && line && damaging > 0,
                   "anchors exact on " + std::to_string(damaging) + " damaging episodes: " + (exact ? "yes" : "no") +
                       "; random mean (" + num(m_eta) + "," + num(m_kappa) + "), eta+kappa-1 = " + num(m_dev) +
                       " vs 3 SE = " + num(3 * se_dev)};
  });

  report(3, "accounting identity", [] {
    Rng rng(3);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
      const CostModel cost = CostModel::standard(std::exp(3.0 * rng.normal()));
      Episode ep;
      const std::size_t T = 50 + rng.index(500);
      ep.event_class.assign(T, 0);
      ep.delta_f.assign(T, 0.0);
      for (int& c : ep.event_class) c = rng.bernoulli(0.1) ? 1 + static_cast<int>(rng.index(4)) : 0;
      const double p = rng.uniform();
      EpisodeEnv env(ep, cost);
      double R = 0.0, max_cas = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        const auto r = env.step(rng.bernoulli(p) ? Action::kLeave : Action::kStay);
        R += r.social + r.human;
        max_cas += cost.damage(ep.event_class[t]);
      }
      const PolicyScore s = score(env.trace(), cost);
      const double identity = -(1.0 - s.kappa) * static_cast<double>(T) - (1.0 - s.eta) * max_cas;
      worst = std::max(worst, std::abs(R - identity) / std::max(1.0, std::abs(R)));
    }
    return Outcome{worst <= 1e-12, "max relative deviation over 1000 sequences " + num(worst) + " (<= 1e-12)"};
  });

  report(4, "oracle", [] {
    const Games& g = calibrated_games();
    const CostModel cost = CostModel::standard(20.0);
    OraclePolicy oracle(cost);
    const AggregateScore a = aggregate(evaluate_policy(oracle, g.all, cost));
    return Outcome{a.eta == 1.0 && a.kappa >= 0.98, "over " + std::to_string(a.n) + " calibrated episodes eta " +
                                                          num(a.eta, 10) + " (=1), kappa " + num(a.kappa) + " (>= 0.98)"};
  });

  report(5, "metric oracle", [] {
    Rng rng(5);
    bool ok = true;
    for (int trial = 0; trial < 100; ++trial) {
      const int n = 2 + static_cast<int>(rng.index(4));
      const std::size_t len = 1 + rng.index(40);
      std::vector<int> t(len), p(len);
      for (std::size_t i = 0; i < len; ++i) {
        t[i] = static_cast<int>(rng.index(static_cast<std::size_t>(n)));
        p[i] = rng.bernoulli(0.5) ? t[i] : static_cast<int>(rng.index(static_cast<std::size_t>(n)));
      }
      // Brute force: full confusion matrix, then the macro definitions.
      std::vector<std::vector<double>> C(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n)));
      for (std::size_t i = 0; i < len; ++i) C[static_cast<std::size_t>(t[i])][static_cast<std::size_t>(p[i])] += 1;
      double diag = 0, P = 0, R = 0;
      for (std::size_t c = 0; c < C.size(); ++c) {
        double row = 0, col = 0;
        for (std::size_t k = 0; k < C.size(); ++k) {
          row += C[c][k];
          col += C[k][c];
        }
        diag += C[c][c];
        P += col > 0 ? C[c][c] / col : 0.0;
        R += row > 0 ? C[c][c] / row : 0.0;
      }
      P /= n;
      R /= n;
      const double acc = diag / static_cast<double>(len), f1 = P + R > 0 ? 2 * P * R / (P + R) : 0.0;
      const MetricsReport m = score_predictions(t, p, n);
      ok = ok && m.accuracy == acc && m.precision == P && m.recall == R && m.f1 == f1;
    }
    return Outcome{ok, "100 random label sets, exact equality with the confusion-matrix computation"};
  });

  report(6, "gradient check", [] {
    TargetSpec spec;
    spec.kind = TargetKind::kT3;
    spec.tau = 5;
    spec.n_classes = 3;
    spec.thresholds = ClassThresholds::from_anchor(0.1, 3);
    const LabeledDataset batch_ds = separable_toy(6, 8, 16);
    std::vector<SampleView> batch;
    for (std::size_t i = 0; i < batch_ds.size(); ++i) batch.push_back(batch_ds[i]);
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      ClassifierConfig c;
      c.conv_blocks = 2;
      c.channels_per_block = 4;
      c.seed = seed;
      worst = std::max(worst, gradient_check(c, spec, 16, batch));
    }
    return Outcome{worst <= 1e-4, "max relative error over 10 seeds " + num(worst) + " (<= 1e-4)"};
  });

  report(7, "C51 projection", [] {
    Rng rng(7);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = 2 + rng.index(60);
      const Support s{-1.0 - 300.0 * rng.uniform(), 10.0 * rng.uniform(), n};
      std::vector<double> p(n);
      for (double& x : p) x = rng.uniform();
      const double total = std::accumulate(p.begin(), p.end(), 0.0);
      for (double& x : p) x /= total;
      const double r = (rng.uniform() - 0.5) * 2.0 * (s.v_max - s.v_min), gamma = rng.uniform();
      const auto got = project(p, s, r, gamma), want = brute_project(p, s, r, gamma);
      for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
    }
    const Support s;
    std::vector<double> p(s.n_atoms);
    for (double& x : p) x = rng.uniform();
    const double total = std::accumulate(p.begin(), p.end(), 0.0);
    for (double& x : p) x /= total;
    const bool identity = project(p, s, 0.0, 1.0) == p;
    // Clipped mass lands on the edge atom whole; compare with the same summation order.
    const double mass = std::accumulate(p.begin(), p.end(), 0.0);
    const auto low = project(p, s, -1e6, 0.9), high = project(p, s, 1e6, 0.9);
    const bool clip = low[0] == mass && high.back() == mass &&
                      std::all_of(low.begin() + 1, low.end(), [](double x) { return x == 0.0; }) &&
                      std::all_of(high.begin(), high.end() - 1, [](double x) { return x == 0.0; });
    return Outcome{worst <= 1e-9 && identity && clip, "max deviation from neighbour-split oracle " + num(worst) +
                                                          " (<= 1e-9); identity exact " + (identity ? "yes" : "no") +
                                                          "; clipping exact " + (clip ? "yes" : "no")};
  });

  report(8, "predictor learns", [] {
    ClassifierConfig toy_cfg;
    toy_cfg.conv_blocks = 2;
    toy_cfg.channels_per_block = 8;
    toy_cfg.epochs = 30;
    toy_cfg.batch_size = 32;
    const LabeledDataset toy_train = separable_toy(1, 1200, 32), toy_valid = separable_toy(2, 1000, 32);
    const auto toy = train_classifier(toy_train, toy_valid, toy_cfg);
    const double toy_acc = toy->curve.back().valid_accuracy;

    GeneratorConfig g;
    g.rng_seed = 8;
    const EventSeries e = synthesize(g, 1'000'000);
    TargetSpec spec;
    spec.kind = TargetKind::kT3;
    spec.tau = 60;
    spec.n_classes = 2;
    spec.thresholds = fit_class_thresholds(e, 2);
    const std::size_t n_past = 64, split = 700'000, valid_end = 800'000;
    const auto train = rebalance(build_dataset(e, spec, n_past, 0, split), 1, 2000);
    const auto valid = rebalance(build_dataset(e, spec, n_past, split + n_past + spec.tau, valid_end), 2, 500);
    const auto test = rebalance(build_dataset(e, spec, n_past, valid_end + n_past + spec.tau, e.size()), 3, 1000);
    ClassifierConfig cfg;
    cfg.epochs = 20;
    const auto model = train_classifier(train, valid, cfg);
    std::vector<int> truth, pred;
    for (std::size_t i = 0; i < test.size(); ++i) {
      truth.push_back(test.label(i));
      pred.push_back(argmax(model->predict(test[i])));
    }
    const MetricsReport m = score_predictions(truth, pred, 2);
    const auto hits = static_cast<std::size_t>(std::lround(m.accuracy * static_cast<double>(test.size())));
    const double p_value = binomial_upper_tail(hits, test.size());
    return Outcome{toy_acc >= 0.95 && p_value < 0.01,
                   "toy valid accuracy " + num(toy_acc) + " (>= 0.95); balanced N=2 T3 tau=60 test accuracy " +
                       num(m.accuracy) + " on " + std::to_string(test.size()) + " samples, binomial p = " +
                       num(p_value, 3) + " (< 0.01)"};
  });

  const fs::path desk_a = scratch / "desk_a", desk_b = scratch / "desk_b";
  const auto read_reports = [](const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& entry : fs::directory_iterator(dir / "report")) {
      if (entry.path().extension() == ".csv") out[entry.path().filename().string()] = io::read_text(entry.path());
    }
    return out;
  };

  report(9, "RL beats naive (directional)", [&] {
    const auto start = std::chrono::steady_clock::now();
    const RunSummary s = run_pipeline(desk_config(desk_a));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!s.failures.empty()) return Outcome{false, "desk pipeline failed: " + s.failures[0].message};
    const auto rl = read_scores(desk_a / "agents" / "T3_tau20_N5_k4_mu20" / "eval" / "scores.csv");
    const auto naive = read_scores(desk_a / "baselines" / "T3_tau20_N5_naive_mu20" / "scores.csv");
    std::size_t wins = 0;
    for (std::size_t i = 0; i < rl.size(); ++i) wins += rl[i].reward_per_step > naive[i].reward_per_step;
    const double share = static_cast<double>(wins) / static_cast<double>(rl.size());
    const AggregateScore a_rl = aggregate(rl), a_naive = aggregate(naive);
    const AggregateScore perfect = aggregate(read_scores(desk_a / "agents" / "perfect_k1_mu20" / "eval" / "scores.csv"));
    const AggregateScore oracle = aggregate(read_scores(desk_a / "baselines" / "reference_mu20" / "oracle.csv"));
    const AggregateScore stay = aggregate(read_scores(desk_a / "baselines" / "reference_mu20" / "always_stay.csv"));
    const bool margin = share >= 0.6;
    const bool control = perfect.reward_per_step >= oracle.reward_per_step - 0.1 * std::abs(oracle.reward_per_step);
    return Outcome{(margin || control) && secs < 1800.0,
                   "RL k=4 beats naive on " + std::to_string(wins) + "/" + std::to_string(rl.size()) +
                       " test episodes (>= 60%); r RL " + num(a_rl.reward_per_step) + " (eta " + num(a_rl.eta, 3) +
                       ", kappa " + num(a_rl.kappa, 3) + "), naive " + num(a_naive.reward_per_step) +
                       ", always-stay " + num(stay.reward_per_step) + "; perfect-forecast control " +
                       num(perfect.reward_per_step) + " vs oracle " + num(oracle.reward_per_step) + " (within 10%: " +
                       (control ? "yes" : "no") + ")"};
  });

  report(11, "determinism", [&] {
    const RunSummary s = run_pipeline(desk_config(desk_b));
    if (!s.failures.empty()) return Outcome{false, "second run failed: " + s.failures[0].message};
    const auto a = read_reports(desk_a), b = read_reports(desk_b);
    std::size_t same = 0;
    for (const auto& [name, text] : a) same += b.count(name) && b.at(name) == text;
    const bool ok = same == a.size() && a.size() == b.size() && !a.empty();
    return Outcome{ok, "independent rerun from scratch: " + std::to_string(same) + "/" + std::to_string(a.size()) +
                           " report CSVs byte-identical"};
  });

  report(10, "mu-sweep monotonicity", [&] {
    RunConfig c = desk_config(desk_a);
    c.mus = {0.1, 20.0, 1e4};
    const RunSummary s = run_pipeline(c);
    if (!s.failures.empty()) return Outcome{false, "sweep failed: " + s.failures[0].message};
    std::vector<AggregateScore> pts;
    std::string trail;
    for (double mu : c.mus) {
      const fs::path dir = desk_a / "agents" / ("T3_tau20_N5_k4_mu" + io::format_double(mu)) / "eval";
      pts.push_back(aggregate(read_scores(dir / "scores.csv")));
      trail += " mu=" + num(mu) + ":(" + num(pts.back().eta, 3) + "," + num(pts.back().kappa, 3) + ")";
    }
    bool monotone = true;
    for (std::size_t i = 1; i < pts.size(); ++i) {
      monotone = monotone && pts[i].eta >= pts[i - 1].eta - 1e-9 && pts[i].kappa <= pts[i - 1].kappa + 1e-9;
    }
    const bool start_near = pts.front().eta <= 0.1 && pts.front().kappa >= 0.9;
    const bool moved = pts.back().eta >= 0.5 && pts.back().kappa <= 0.5;
    return Outcome{monotone && start_near && moved,
                   "aggregate (eta,kappa)" + trail +
                       "; monotone, starts within 0.1 of (0,1), ends with eta >= 0.5 and kappa <= 0.5"};
  });

  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
