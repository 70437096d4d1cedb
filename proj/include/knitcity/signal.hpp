#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "knitcity/random.hpp"

namespace knitcity {

/// Force recording as acquired, before any preprocessing.
struct RawSeries {
  std::vector<double> samples;
  double dt = 1.0;
  /// Start index of every load cycle after the first; index 0 is implied.
  std::vector<std::size_t> cycle_starts;

  void validate() const;
  /// Half-open [begin, end) ranges of every cycle.
  std::vector<std::array<std::size_t, 2>> cycles() const;
};

struct NormalizedSeries {
  std::vector<double> f;
};

/// Normalized fluctuations f(t) with the drop series: delta_f[t] holds the
/// amplitude of a drop beginning at t and is zero elsewhere.
struct EventSeries {
  std::vector<double> f;
  std::vector<double> delta_f;

  std::size_t size() const noexcept { return delta_f.size(); }
  void validate() const;
};

struct DropEvent {
  std::size_t t = 0;
  double amplitude = 0.0;
};

/// Decade-spaced amplitude thresholds separating N severity classes.
/// Class 0 is noise; class k >= 1 covers [bounds[k-1], bounds[k]).
struct ClassThresholds {
  int n_classes = 5;
  std::vector<double> bounds;

  void validate() const;

  /// Thresholds anchor * {1, 10, 100, 1000}, truncated to n_classes - 1 entries,
  /// so coarser schemes merge the upper classes of the five-class ladder.
  static ClassThresholds from_anchor(double anchor, int n_classes);
  double anchor() const { return bounds.front(); }
};

/// Occupancy of the five-class ladder over the full drop signal (zeros
/// included) that thresholds are calibrated against.
inline constexpr std::array<double, 5> kReferenceClassProportions = {0.937, 0.0219, 0.0258,
                                                                     0.0145, 0.0008};

struct GeneratorConfig {
  static constexpr int kSchemaVersion = 1;

  double power_law_exponent = -1.3;
  /// Scale of the exponential cutoff of the amplitude law.
  double cutoff_amplitude = 2.45;
  /// Lower truncation of the amplitude law.
  double min_amplitude = 0.01;
  double zero_fraction_target = 0.937;
  /// Slope of f during stick phases, per step.
  double loading_rate = 0.016;
  /// Strength of the slowly varying log-activity modulating the trigger rate
  /// (0 gives a memoryless Bernoulli trigger).
  double activity_modulation = 1.0;
  /// Correlation time of the activity process, in steps.
  double activity_timescale = 400.0;
  /// Quiescence after a drop: the trigger is suppressed until the reloaded
  /// force recovers this fraction of the drop (0 disables).
  double recovery_factor = 0.5;
  std::uint64_t rng_seed = 1;

  void validate() const;
};

struct SynthesisResult {
  EventSeries series;
  std::vector<DropEvent> log;
  /// Base trigger probability found by the zero-fraction calibration.
  double trigger_probability = 0.0;
};

/// Stick-slip series: f rises at loading_rate and drops by power-law
/// amplitudes at stochastically triggered single steps. Two drops never occupy
/// consecutive steps, so every drop is a separate decreasing run.
SynthesisResult synthesize_with_log(const GeneratorConfig& config, std::size_t length);
EventSeries synthesize(const GeneratorConfig& config, std::size_t length);

/// Draws one amplitude from p(x) ∝ x^exponent · exp(-x / cutoff), x >= min_amplitude.
class AmplitudeSampler {
 public:
  explicit AmplitudeSampler(const GeneratorConfig& config);
  double operator()(Rng& rng) const;

 private:
  double exponent_;
  double cutoff_;
  double minimum_;
};

RawSeries detrend_linear(const RawSeries& raw);

/// Per-cycle standardization followed by division by a centered sliding-window
/// standard deviation (window clipped at the series ends). The result is
/// finally rescaled to zero global mean and unit global variance.
NormalizedSeries normalize_two_stage(const RawSeries& raw, std::size_t window = 5000);

EventSeries extract_drops(std::span<const double> f, double min_drop = 0.0);
inline EventSeries extract_drops(const NormalizedSeries& f, double min_drop = 0.0) {
  return extract_drops(std::span<const double>(f.f), min_drop);
}

/// Detrend, normalize and extract drops from a recorded force series.
EventSeries preprocess_recording(const RawSeries& raw, std::size_t window = 5000,
                                 double min_drop = 0.0);

ClassThresholds fit_class_thresholds(const EventSeries& events, int n_classes);

int class_of(double amplitude, const ClassThresholds& thresholds);

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  /// count / (n_events * (hi - lo))
  double density = 0.0;
};

struct StatsOptions {
  int bins_per_decade = 5;
  /// Power-law fit range; defaults to [10, 100] x thresholds.anchor().
  std::optional<double> fit_lo;
  std::optional<double> fit_hi;
};

struct StatsReport {
  std::size_t length = 0;
  std::size_t n_events = 0;
  double zero_fraction = 1.0;
  std::vector<double> class_fraction_all;
  std::vector<double> class_fraction_nonzero;
  std::vector<HistogramBin> histogram;
  double fit_lo = 0.0;
  double fit_hi = 0.0;
  std::optional<double> slope;
};

StatsReport event_statistics(const EventSeries& events, const ClassThresholds& thresholds,
                             const StatsOptions& options = {});

/// Least-squares slope of log10(density) against log10(bin center) over the
/// bins fully inside [lo, hi] with nonzero counts.
std::optional<double> fit_power_law(std::span<const HistogramBin> histogram, double lo,
                                    double hi);

}  // namespace knitcity
