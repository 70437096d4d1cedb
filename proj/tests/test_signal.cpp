#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "knitcity/error.hpp"
#include "knitcity/random.hpp"
#include "knitcity/signal.hpp"

using namespace knitcity;

namespace {

double stddev(std::span<const double> x) {
  const double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(x.size()));
}

// Mass of x^a exp(-x/c) on [lo, hi], midpoint rule in log x.
double density_mass(double a, double c, double lo, double hi) {
  const int n = 4000;
  const double l0 = std::log(lo), l1 = std::log(hi), h = (l1 - l0) / n;
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = std::exp(l0 + (i + 0.5) * h);
    s += std::pow(x, a) * std::exp(-x / c) * x * h;
  }
  return s;
}

const EventSeries& calibrated_stream() {
  static const EventSeries s = [] {
    GeneratorConfig g;
    g.rng_seed = 11;
    return synthesize(g, 1'000'000);
  }();
  return s;
}

}  // namespace

TEST_CASE("extract_drops: single drop example") {
  const std::vector<double> f = {0, 1, 2, 1.5, 1, 2};
  const EventSeries e = extract_drops(f);
  const std::vector<double> want = {0, 0, 0, 1.0, 0, 0};
  REQUIRE(e.delta_f.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(e.delta_f[i] == doctest::Approx(want[i]).epsilon(1e-15));
}

TEST_CASE("extract_drops: increasing series has no drops") {
  std::vector<double> f(50);
  std::iota(f.begin(), f.end(), 0.0);
  for (double d : extract_drops(f).delta_f) CHECK(d == 0.0);
}

TEST_CASE("extract_drops: min_drop filters and conservation holds") {
  Rng rng(3);
  std::vector<double> f(2000);
  for (double& x : f) x = rng.normal();
  const double min_drop = 0.7;
  const EventSeries e = extract_drops(f, min_drop);
  // Brute-force oracle: walk strictly decreasing runs.
  double total = 0.0;
  std::size_t i = 1;
  while (i < f.size()) {
    if (f[i] < f[i - 1]) {
      // The drop is recorded at the first lower sample, as in the example above.
      const std::size_t start = i;
      while (i < f.size() && f[i] < f[i - 1]) ++i;
      const double drop = f[start - 1] - f[i - 1];
      if (drop > min_drop) {
        CHECK(e.delta_f[start] == doctest::Approx(drop).epsilon(1e-12));
        total += drop;
      }
    } else {
      ++i;
    }
  }
  CHECK(std::accumulate(e.delta_f.begin(), e.delta_f.end(), 0.0) == doctest::Approx(total).epsilon(1e-12));
  for (double d : e.delta_f) CHECK((d == 0.0 || d > min_drop));
}

TEST_CASE("synthesize: extract_drops recovers the generator log") {
  GeneratorConfig g;
  g.rng_seed = 5;
  const SynthesisResult r = synthesize_with_log(g, 50'000);
  const EventSeries back = extract_drops(r.series.f);
  std::size_t n_nonzero = 0;
  for (double d : back.delta_f) n_nonzero += d > 0.0;
  REQUIRE(n_nonzero == r.log.size());
  for (const DropEvent& ev : r.log) {
    CHECK(back.delta_f[ev.t] == doctest::Approx(ev.amplitude).epsilon(1e-9));
    CHECK(r.series.delta_f[ev.t] == doctest::Approx(ev.amplitude).epsilon(1e-9));
  }
}

TEST_CASE("synthesize: deterministic per seed") {
  GeneratorConfig g;
  g.rng_seed = 9;
  const EventSeries a = synthesize(g, 20'000), b = synthesize(g, 20'000);
  CHECK(a.f == b.f);
  CHECK(a.delta_f == b.delta_f);
  g.rng_seed = 10;
  CHECK(synthesize(g, 20'000).delta_f != a.delta_f);
}

TEST_CASE("synthesize: rejects invalid configs") {
  GeneratorConfig g;
  g.power_law_exponent = 0.5;
  CHECK_THROWS_AS(synthesize(g, 5000), ConfigError);
  g = {};
  g.zero_fraction_target = 1.0;
  CHECK_THROWS_AS(synthesize(g, 5000), ConfigError);
  g = {};
  g.cutoff_amplitude = std::nan("");
  CHECK_THROWS_AS(synthesize(g, 5000), ConfigError);
  CHECK_THROWS(synthesize(GeneratorConfig{}, 999));
}

TEST_CASE("calibrated stream: zero fraction, slope and class proportions") {
  const EventSeries& s = calibrated_stream();
  const ClassThresholds th = fit_class_thresholds(s, 5);
  const StatsReport st = event_statistics(s, th);
  CHECK(1.0 - st.zero_fraction >= 0.05);
  CHECK(1.0 - st.zero_fraction <= 0.08);
  REQUIRE(st.slope.has_value());
  CHECK(*st.slope == doctest::Approx(-1.3).epsilon(0.15 / 1.3));
  for (int k = 0; k < 5; ++k) {
    const double want = kReferenceClassProportions[static_cast<std::size_t>(k)];
    CHECK(std::abs(st.class_fraction_all[static_cast<std::size_t>(k)] - want) <= 0.3 * want);
  }
}

TEST_CASE("calibrated stream: histogram slope matches the integrated sampling density") {
  const EventSeries& s = calibrated_stream();
  const ClassThresholds th = fit_class_thresholds(s, 5);
  const StatsReport st = event_statistics(s, th);
  GeneratorConfig g;
  // Oracle histogram: expected counts of each bin from the density itself.
  std::vector<HistogramBin> oracle = st.histogram;
  for (HistogramBin& b : oracle) {
    b.density = density_mass(g.power_law_exponent, g.cutoff_amplitude, std::max(b.lo, g.min_amplitude), b.hi) /
                (b.hi - b.lo);
    b.count = 1;
  }
  const auto want = fit_power_law(oracle, st.fit_lo, st.fit_hi);
  REQUIRE(want.has_value());
  CHECK(*st.slope == doctest::Approx(*want).epsilon(0.05));
}

TEST_CASE("calibrated stream: nonzero class shares match the integrated density") {
  const EventSeries& s = calibrated_stream();
  const ClassThresholds th = fit_class_thresholds(s, 5);
  const StatsReport st = event_statistics(s, th);
  GeneratorConfig g;
  std::vector<double> edges = {g.min_amplitude};
  for (double b : th.bounds) edges.push_back(std::max(b, g.min_amplitude));
  edges.push_back(1e4);
  const double total = density_mass(g.power_law_exponent, g.cutoff_amplitude, g.min_amplitude, 1e4);
  for (std::size_t k = 0; k < 5; ++k) {
    const double want = edges[k + 1] > edges[k]
                            ? density_mass(g.power_law_exponent, g.cutoff_amplitude, edges[k], edges[k + 1]) / total
                            : 0.0;
    CHECK(std::abs(st.class_fraction_nonzero[k] - want) <= 0.3 * want + 1e-4);
  }
}

TEST_CASE("detrend_linear examples") {
  RawSeries r;
  r.samples = {1, 2, 3, 4};
  for (double x : detrend_linear(r).samples) CHECK(std::abs(x) < 1e-12);

  r.samples = {0, 2, 1, 3};
  const RawSeries d = detrend_linear(r);
  CHECK(std::abs(std::accumulate(d.samples.begin(), d.samples.end(), 0.0)) < 1e-12);
  double corr = 0.0;
  for (std::size_t i = 0; i < 4; ++i) corr += d.samples[i] * static_cast<double>(i);
  CHECK(std::abs(corr) < 1e-9);

  r.samples = {0, 1, 2, 3, 10, 8, 6, 4, 2};
  r.cycle_starts = {4};
  for (double x : detrend_linear(r).samples) CHECK(std::abs(x) < 1e-12);

  r.samples = {1, 2, 3};
  r.cycle_starts = {2};
  CHECK_THROWS_AS(detrend_linear(r), DataError);
}

TEST_CASE("normalize_two_stage: stationary input stays unit") {
  Rng rng(1);
  RawSeries r;
  r.samples.resize(40'000);
  for (double& x : r.samples) x = rng.normal();
  const NormalizedSeries n = normalize_two_stage(r, 2000);
  CHECK(stddev(n.f) == doctest::Approx(1.0).epsilon(0.05));
  const double mean = std::accumulate(n.f.begin(), n.f.end(), 0.0) / static_cast<double>(n.f.size());
  CHECK(std::abs(mean) < 0.05);
  // Idempotence
  RawSeries again;
  again.samples = n.f;
  CHECK(stddev(normalize_two_stage(again, 2000).f) == doctest::Approx(stddev(n.f)).epsilon(0.05));
}

TEST_CASE("normalize_two_stage: growing amplitude is flattened") {
  Rng rng(2);
  const std::size_t T = 60'000, w = 3000;
  RawSeries r;
  r.samples.resize(T);
  for (std::size_t t = 0; t < T; ++t) r.samples[t] = (1.0 + 4.0 * static_cast<double>(t) / T) * rng.normal();
  const NormalizedSeries n = normalize_two_stage(r, w);
  std::vector<double> stds;
  for (std::size_t s = 0; s + w <= T; s += w) stds.push_back(stddev(std::span(n.f).subspan(s, w)));
  const double mean = std::accumulate(stds.begin(), stds.end(), 0.0) / static_cast<double>(stds.size());
  for (double sd : stds) CHECK(std::abs(sd - mean) <= 0.1 * mean);
  // Before normalization the spread is large.
  CHECK(stddev(std::span(r.samples).subspan(T - w, w)) > 3.0 * stddev(std::span(r.samples).subspan(0, w)));
}

TEST_CASE("normalize_two_stage: constant input is degenerate") {
  RawSeries r;
  r.samples.assign(1000, 3.0);
  CHECK_THROWS_AS(normalize_two_stage(r, 100), DegenerateDataError);
}

TEST_CASE("class_of: half-open bands and monotonicity") {
  const ClassThresholds th = ClassThresholds::from_anchor(0.1, 5);
  CHECK(class_of(0.0, th) == 0);
  CHECK(class_of(std::nextafter(0.1, 0.0), th) == 0);
  CHECK(class_of(0.1, th) == 1);
  CHECK(class_of(1.0, th) == 2);
  CHECK(class_of(1e6, th) == 4);
  int prev = 0;
  for (double a = 0.0; a < 500.0; a = a * 1.07 + 1e-4) {
    const int c = class_of(a, th);
    CHECK(c >= prev);
    prev = c;
  }
}

TEST_CASE("fit_class_thresholds: N=2 uses the N=5 noise boundary") {
  const EventSeries& s = calibrated_stream();
  const ClassThresholds five = fit_class_thresholds(s, 5);
  const ClassThresholds two = fit_class_thresholds(s, 2);
  REQUIRE(two.bounds.size() == 1);
  CHECK(two.bounds[0] == five.bounds[0]);
  for (std::size_t i = 1; i < five.bounds.size(); ++i) CHECK(five.bounds[i] == doctest::Approx(10.0 * five.bounds[i - 1]));
}

TEST_CASE("fit_class_thresholds: identical drops fall into one class away from every bound") {
  EventSeries e;
  e.delta_f.assign(20'000, 0.0);
  e.f.assign(20'000, 0.0);
  const double v = 0.37;
  for (std::size_t t = 0; t < e.delta_f.size(); t += 16) e.delta_f[t] = v;
  const ClassThresholds th = fit_class_thresholds(e, 5);
  CHECK(th.bounds.front() < v);
  CHECK(th.bounds.back() > v);
  for (double b : th.bounds) CHECK(b != v);
}

TEST_CASE("fit_class_thresholds: too few drops") {
  EventSeries e;
  e.delta_f.assign(10'000, 0.0);
  e.f.assign(10'000, 0.0);
  for (std::size_t t = 0; t < 50; ++t) e.delta_f[t * 10] = 1.0;
  CHECK_THROWS_AS(fit_class_thresholds(e, 5), DataError);
}

TEST_CASE("event_statistics: all-zero series") {
  EventSeries e;
  e.delta_f.assign(1000, 0.0);
  e.f.assign(1000, 0.0);
  const StatsReport st = event_statistics(e, ClassThresholds::from_anchor(0.1, 5));
  CHECK(st.zero_fraction == 1.0);
  CHECK(st.histogram.empty());
  CHECK_FALSE(st.slope.has_value());
}

TEST_CASE("fit_power_law: exact power law") {
  std::vector<HistogramBin> bins;
  for (int i = 0; i < 20; ++i) {
    const double lo = std::pow(10.0, -1.0 + 0.2 * i), hi = lo * std::pow(10.0, 0.2);
    const double center = std::sqrt(lo * hi);
    bins.push_back({lo, hi, 10, std::pow(center, -1.7)});
  }
  const auto slope = fit_power_law(bins, 0.1, 100.0);
  REQUIRE(slope.has_value());
  CHECK(*slope == doctest::Approx(-1.7).epsilon(1e-12));
}
