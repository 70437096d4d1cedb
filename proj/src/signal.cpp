#include "knitcity/signal.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "knitcity/error.hpp"

namespace knitcity {

namespace {

// Length of the pilot run used to calibrate the trigger probability. Fixed so
// that synthesize(config, n) is a prefix of synthesize(config, m) for n < m.
constexpr std::size_t kPilotLength = 200'000;

bool finite(double x) { return std::isfinite(x); }

struct Simulation {
  const GeneratorConfig& config;
  AmplitudeSampler sampler;

  // Runs the generator with base trigger probability `p_base`. Returns the
  // number of drops; fills `out` when given.
  std::size_t run(std::size_t length, double p_base, SynthesisResult* out) const {
    Rng trigger(derive_seed(config.rng_seed, "trigger"));
    Rng activity(derive_seed(config.rng_seed, "activity"));
    Rng amplitude(derive_seed(config.rng_seed, "amplitude"));

    const double a = config.activity_modulation;
    const double rho = std::exp(-1.0 / config.activity_timescale);
    const double innovation = std::sqrt(1.0 - rho * rho);
    const double bias = -0.5 * a * a;

    double x = activity.normal();
    double level = 0.0;
    bool previous_drop = false;
    double since_drop = 0.0;
    double last_amplitude = 0.0;
    std::size_t drops = 0;

    if (out != nullptr) {
      out->series.f.assign(length, 0.0);
      out->series.delta_f.assign(length, 0.0);
      out->log.clear();
    }
    for (std::size_t t = 1; t < length; ++t) {
      x = rho * x + innovation * activity.normal();
      since_drop += 1.0;
      const double u = trigger.uniform();

      double p = p_base * std::exp(a * x + bias);
      if (config.recovery_factor > 0.0 && last_amplitude > 0.0) {
        p *= -std::expm1(-config.loading_rate * since_drop /
                         (config.recovery_factor * last_amplitude));
      }
      if (!previous_drop && u < p) {
        const double drop = sampler(amplitude);
        level -= drop;
        ++drops;
        previous_drop = true;
        since_drop = 0.0;
        last_amplitude = drop;
        if (out != nullptr) {
          out->series.delta_f[t] = drop;
          out->log.push_back({t, drop});
        }
      } else {
        level += config.loading_rate;
        previous_drop = false;
      }
      if (out != nullptr) out->series.f[t] = level;
    }
    return drops;
  }
};

double calibrate_trigger(const Simulation& sim) {
  const double target = 1.0 - sim.config.zero_fraction_target;
  const auto fraction = [&](double p) {
    return static_cast<double>(sim.run(kPilotLength, p, nullptr)) /
           static_cast<double>(kPilotLength);
  };
  double lo = std::log(1e-7);
  double hi = std::log(1.0);
  if (fraction(std::exp(hi)) < target) {
    throw ConfigError("zero_fraction_target " + std::to_string(sim.config.zero_fraction_target) +
                      " is below what the generator can reach");
  }
  for (int iter = 0; iter < 48; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (fraction(std::exp(mid)) < target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return std::exp(0.5 * (lo + hi));
}

}  // namespace

void RawSeries::validate() const {
  if (samples.empty()) throw DataError("raw series is empty");
  if (!(dt > 0.0) || !finite(dt)) throw DataError("raw series has a non-positive sampling period");
  std::size_t previous = 0;
  for (std::size_t start : cycle_starts) {
    if (start <= previous || start >= samples.size()) {
      throw DataError("cycle boundaries must be strictly increasing and inside the series");
    }
    previous = start;
  }
  for (double x : samples) {
    if (!finite(x)) throw DataError("raw series contains a non-finite sample");
  }
}

std::vector<std::array<std::size_t, 2>> RawSeries::cycles() const {
  std::vector<std::array<std::size_t, 2>> out;
  std::size_t begin = 0;
  for (std::size_t start : cycle_starts) {
    out.push_back({begin, start});
    begin = start;
  }
  out.push_back({begin, samples.size()});
  return out;
}

void EventSeries::validate() const {
  if (f.size() != delta_f.size()) throw DataError("f and delta_f lengths differ");
  for (std::size_t t = 0; t < delta_f.size(); ++t) {
    if (!finite(f[t]) || !finite(delta_f[t])) throw DataError("event series has non-finite values");
    if (delta_f[t] < 0.0) throw DataError("negative drop amplitude at t=" + std::to_string(t));
  }
}

void ClassThresholds::validate() const {
  if (n_classes < 2 || n_classes > 5) {
    throw ConfigError("n_classes must be in 2..5, got " + std::to_string(n_classes));
  }
  if (bounds.size() != static_cast<std::size_t>(n_classes - 1)) {
    throw ConfigError("thresholds need n_classes - 1 bounds");
  }
  for (std::size_t i = 0; i < bounds.size(); ++i) {
    if (!(bounds[i] > 0.0) || !finite(bounds[i])) throw ConfigError("thresholds must be positive");
    if (i > 0 && !(bounds[i] > bounds[i - 1])) {
      throw ConfigError("thresholds must be strictly increasing");
    }
  }
}

ClassThresholds ClassThresholds::from_anchor(double anchor, int n_classes) {
  ClassThresholds out;
  out.n_classes = n_classes;
  double b = anchor;
  for (int k = 0; k + 1 < n_classes; ++k) {
    out.bounds.push_back(b);
    b *= 10.0;
  }
  out.validate();
  return out;
}

void GeneratorConfig::validate() const {
  const double fields[] = {power_law_exponent, cutoff_amplitude,   min_amplitude,
                           zero_fraction_target, loading_rate,     activity_modulation,
                           activity_timescale,   recovery_factor};
  for (double v : fields) {
    if (!finite(v)) throw ConfigError("generator config has a non-finite field");
  }
  if (!(power_law_exponent < 0.0)) throw ConfigError("power_law_exponent must be negative");
  if (!(cutoff_amplitude > 0.0)) throw ConfigError("cutoff_amplitude must be positive");
  if (!(min_amplitude > 0.0)) throw ConfigError("min_amplitude must be positive");
  if (!(zero_fraction_target > 0.0 && zero_fraction_target < 1.0)) {
    throw ConfigError("zero_fraction_target must lie in (0, 1)");
  }
  if (!(loading_rate > 0.0)) throw ConfigError("loading_rate must be positive");
  if (activity_modulation < 0.0) throw ConfigError("activity_modulation must be >= 0");
  if (!(activity_timescale >= 1.0)) throw ConfigError("activity_timescale must be >= 1");
  if (recovery_factor < 0.0) throw ConfigError("recovery_factor must be >= 0");
}

AmplitudeSampler::AmplitudeSampler(const GeneratorConfig& config)
    : exponent_(config.power_law_exponent),
      cutoff_(config.cutoff_amplitude),
      minimum_(config.min_amplitude) {}

double AmplitudeSampler::operator()(Rng& rng) const {
  if (exponent_ < -1.0) {
    // Truncated Pareto proposal, thinned by the exponential cutoff.
    const double inv = 1.0 / (exponent_ + 1.0);
    for (;;) {
      const double x = minimum_ * std::pow(rng.uniform_open(), inv);
      if (rng.uniform() < std::exp(-(x - minimum_) / cutoff_)) return x;
    }
  }
  // Shifted exponential proposal, thinned by the (bounded) power-law factor.
  for (;;) {
    const double x = minimum_ - cutoff_ * std::log(rng.uniform_open());
    if (rng.uniform() < std::pow(x / minimum_, exponent_)) return x;
  }
}

SynthesisResult synthesize_with_log(const GeneratorConfig& config, std::size_t length) {
  config.validate();
  if (length < 1000) throw ConfigError("synthesis needs at least 1000 steps");
  const Simulation sim{config, AmplitudeSampler(config)};
  SynthesisResult out;
  out.trigger_probability = calibrate_trigger(sim);
  sim.run(length, out.trigger_probability, &out);
  return out;
}

EventSeries synthesize(const GeneratorConfig& config, std::size_t length) {
  return synthesize_with_log(config, length).series;
}

RawSeries detrend_linear(const RawSeries& raw) {
  raw.validate();
  RawSeries out = raw;
  for (const auto& [begin, end] : raw.cycles()) {
    const std::size_t n = end - begin;
    if (n < 2) throw DataError("cycle starting at " + std::to_string(begin) + " is too short");
    const double center = 0.5 * static_cast<double>(n - 1);
    double mean = 0.0;
    for (std::size_t i = begin; i < end; ++i) mean += raw.samples[i];
    mean /= static_cast<double>(n);
    double sxy = 0.0;
    double sxx = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
      const double tc = static_cast<double>(i - begin) - center;
      sxy += tc * (raw.samples[i] - mean);
      sxx += tc * tc;
    }
    const double slope = sxy / sxx;
    for (std::size_t i = begin; i < end; ++i) {
      const double tc = static_cast<double>(i - begin) - center;
      out.samples[i] = raw.samples[i] - mean - slope * tc;
    }
  }
  return out;
}

NormalizedSeries normalize_two_stage(const RawSeries& raw, std::size_t window) {
  raw.validate();
  const std::size_t n = raw.samples.size();
  if (window < 2 || window > n) {
    throw ConfigError("normalization window must lie in [2, series length]");
  }

  std::vector<double> x(n);
  const auto cycles = raw.cycles();
  for (std::size_t c = 0; c < cycles.size(); ++c) {
    const auto [begin, end] = cycles[c];
    const double len = static_cast<double>(end - begin);
    double mean = 0.0;
    for (std::size_t i = begin; i < end; ++i) mean += raw.samples[i];
    mean /= len;
    double var = 0.0;
    for (std::size_t i = begin; i < end; ++i) var += (raw.samples[i] - mean) * (raw.samples[i] - mean);
    const double sd = std::sqrt(var / len);
    if (!(sd > 1e-12 * (1.0 + std::abs(mean)))) {
      throw DegenerateDataError("zero variance in load cycle", c);
    }
    for (std::size_t i = begin; i < end; ++i) x[i] = (raw.samples[i] - mean) / sd;
  }

  std::vector<double> s1(n + 1, 0.0);
  std::vector<double> s2(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    s1[i + 1] = s1[i] + x[i];
    s2[i + 1] = s2[i] + x[i] * x[i];
  }
  const std::size_t half = window / 2;
  NormalizedSeries out;
  out.f.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t lo = t > half ? t - half : 0;
    const std::size_t hi = std::min(n, t + (window - half));
    const double len = static_cast<double>(hi - lo);
    const double mean = (s1[hi] - s1[lo]) / len;
    const double var = std::max(0.0, (s2[hi] - s2[lo]) / len - mean * mean);
    const double sd = std::sqrt(var);
    if (!(sd > 1e-9)) throw DegenerateDataError("zero variance in sliding window", t);
    out.f[t] = x[t] / sd;
  }

  const double mean = std::accumulate(out.f.begin(), out.f.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double v : out.f) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(n));
  if (!(sd > 0.0)) throw DegenerateDataError("zero variance in normalized series", 0);
  for (double& v : out.f) v = (v - mean) / sd;
  return out;
}

EventSeries extract_drops(std::span<const double> f, double min_drop) {
  if (f.empty()) throw DataError("cannot extract drops from an empty series");
  if (!(min_drop >= 0.0)) throw ConfigError("min_drop must be >= 0");
  EventSeries out;
  out.f.assign(f.begin(), f.end());
  out.delta_f.assign(f.size(), 0.0);
  const auto close_run = [&](std::size_t start, std::size_t last) {
    const double drop = f[start - 1] - f[last];
    if (drop > min_drop) out.delta_f[start] = drop;
  };
  std::size_t start = 0;  // 0 means "not inside a decreasing run"
  for (std::size_t t = 1; t < f.size(); ++t) {
    if (f[t] < f[t - 1]) {
      if (start == 0) start = t;
    } else if (start != 0) {
      close_run(start, t - 1);
      start = 0;
    }
  }
  if (start != 0) close_run(start, f.size() - 1);
  return out;
}

EventSeries preprocess_recording(const RawSeries& raw, std::size_t window, double min_drop) {
  const RawSeries detrended = detrend_linear(raw);
  return extract_drops(normalize_two_stage(detrended, std::min(window, raw.samples.size())),
                       min_drop);
}

int class_of(double amplitude, const ClassThresholds& thresholds) {
  if (!(amplitude > 0.0)) return 0;
  const auto it = std::upper_bound(thresholds.bounds.begin(), thresholds.bounds.end(), amplitude);
  return static_cast<int>(it - thresholds.bounds.begin());
}

ClassThresholds fit_class_thresholds(const EventSeries& events, int n_classes) {
  if (n_classes < 2 || n_classes > 5) {
    throw ConfigError("n_classes must be in 2..5, got " + std::to_string(n_classes));
  }
  std::vector<double> logs;
  for (double d : events.delta_f) {
    if (d > 0.0) logs.push_back(std::log10(d));
  }
  if (logs.size() < 100) {
    throw DataError("threshold calibration needs at least 100 drops, got " +
                    std::to_string(logs.size()));
  }
  std::sort(logs.begin(), logs.end());
  const double total = static_cast<double>(events.size());
  const double zeros = total - static_cast<double>(logs.size());

  // Number of drops with log10 amplitude >= u.
  const auto at_least = [&](double u) {
    return static_cast<double>(logs.end() - std::lower_bound(logs.begin(), logs.end(), u));
  };
  const auto loss = [&](double u) {
    std::array<double, 6> above{};
    for (int k = 0; k < 4; ++k) above[k] = at_least(u + k);
    std::array<double, 5> counts{};
    counts[0] = zeros + static_cast<double>(logs.size()) - above[0];
    for (int k = 1; k < 4; ++k) counts[k] = above[k - 1] - above[k];
    counts[4] = above[3];
    double l = 0.0;
    constexpr double eps = 1e-6;
    for (int k = 0; k < 5; ++k) {
      const double r = std::log((counts[k] / total + eps) / (kReferenceClassProportions[k] + eps));
      l += r * r;
    }
    return l;
  };

  // The loss is piecewise constant in the anchor; evaluate once per piece.
  std::vector<double> breaks;
  breaks.reserve(4 * logs.size());
  for (double u : logs) {
    for (int k = 0; k < 4; ++k) breaks.push_back(u - k);
  }
  std::sort(breaks.begin(), breaks.end());
  breaks.erase(std::unique(breaks.begin(), breaks.end()), breaks.end());

  double best_u = breaks.front() - 0.5;
  double best = loss(best_u);
  const auto consider = [&](double u) {
    const double l = loss(u);
    if (l < best) {
      best = l;
      best_u = u;
    }
  };
  for (std::size_t i = 1; i < breaks.size(); ++i) consider(0.5 * (breaks[i - 1] + breaks[i]));
  consider(breaks.back() + 0.5);
  return ClassThresholds::from_anchor(std::pow(10.0, best_u), n_classes);
}

std::optional<double> fit_power_law(std::span<const HistogramBin> histogram, double lo,
                                    double hi) {
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  std::size_t m = 0;
  for (const HistogramBin& bin : histogram) {
    if (bin.count == 0) continue;
    if (bin.lo < lo * (1.0 - 1e-9) || bin.hi > hi * (1.0 + 1e-9)) continue;
    const double x = 0.5 * (std::log10(bin.lo) + std::log10(bin.hi));
    const double y = std::log10(bin.density);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++m;
  }
  if (m < 2) return std::nullopt;
  const double n = static_cast<double>(m);
  const double denom = n * sxx - sx * sx;
  if (!(std::abs(denom) > 0.0)) return std::nullopt;
  return (n * sxy - sx * sy) / denom;
}

StatsReport event_statistics(const EventSeries& events, const ClassThresholds& thresholds,
                             const StatsOptions& options) {
  if (events.size() == 0) throw DataError("event statistics need a nonempty series");
  thresholds.validate();
  if (options.bins_per_decade < 1) throw ConfigError("bins_per_decade must be positive");

  StatsReport report;
  report.length = events.size();
  const auto nc = static_cast<std::size_t>(thresholds.n_classes);
  std::vector<std::size_t> counts(nc, 0);
  std::vector<double> amplitudes;
  for (double d : events.delta_f) {
    if (d > 0.0) amplitudes.push_back(d);
    ++counts[static_cast<std::size_t>(class_of(d, thresholds))];
  }
  report.n_events = amplitudes.size();
  const double total = static_cast<double>(report.length);
  report.zero_fraction = 1.0 - static_cast<double>(report.n_events) / total;
  report.class_fraction_all.resize(nc);
  report.class_fraction_nonzero.assign(nc, 0.0);
  for (std::size_t k = 0; k < nc; ++k) {
    report.class_fraction_all[k] = static_cast<double>(counts[k]) / total;
  }
  report.fit_lo = options.fit_lo.value_or(10.0 * thresholds.anchor());
  report.fit_hi = options.fit_hi.value_or(100.0 * thresholds.anchor());
  if (amplitudes.empty()) return report;

  const double n_events = static_cast<double>(report.n_events);
  for (double a : amplitudes) {
    report.class_fraction_nonzero[static_cast<std::size_t>(class_of(a, thresholds))] +=
        1.0 / n_events;
  }

  const auto [min_it, max_it] = std::minmax_element(amplitudes.begin(), amplitudes.end());
  const double bpd = options.bins_per_decade;
  const double first = std::floor(std::log10(*min_it) * bpd);
  const double last = std::max(first + 1.0, std::ceil(std::log10(*max_it) * bpd));
  const auto n_bins = static_cast<std::size_t>(last - first);
  report.histogram.resize(n_bins);
  for (std::size_t i = 0; i < n_bins; ++i) {
    report.histogram[i].lo = std::pow(10.0, (first + static_cast<double>(i)) / bpd);
    report.histogram[i].hi = std::pow(10.0, (first + static_cast<double>(i) + 1.0) / bpd);
  }
  for (double a : amplitudes) {
    const double pos = std::floor(std::log10(a) * bpd) - first;
    const auto i = static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(n_bins - 1)));
    ++report.histogram[i].count;
  }
  for (HistogramBin& bin : report.histogram) {
    bin.density = static_cast<double>(bin.count) / (n_events * (bin.hi - bin.lo));
  }
  report.slope = fit_power_law(report.histogram, report.fit_lo, report.fit_hi);
  return report;
}

}  // namespace knitcity
