#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "knitcity/signal.hpp"

namespace knitcity {

/// How future drops inside [t, t + tau] are aggregated into one scalar.
enum class TargetKind : std::uint8_t {
  kT1 = 1,  ///< largest drop
  kT2 = 2,  ///< sum of drops
  kT3 = 3,  ///< exponentially weighted sum, decay constant tau / 3
};

std::string to_string(TargetKind kind);
TargetKind parse_target_kind(std::string_view text);

struct TargetSpec {
  TargetKind kind = TargetKind::kT3;
  std::size_t tau = 20;
  int n_classes = 5;
  ClassThresholds thresholds;

  void validate() const;
  /// Short identifier such as "T3_tau20_N5".
  std::string name() const;
};

/// Target value at every t whose future window [t, t + tau] lies inside the
/// series; the result has length size - tau and the trailing tau steps are absent.
std::vector<double> target_series(const EventSeries& events, const TargetSpec& spec);

std::vector<int> labelize(std::span<const double> targets, const TargetSpec& spec);

/// Non-owning view of one sample's three input channels.
struct SampleView {
  std::span<const double> f;
  std::span<const double> df;
  /// Past labels Y(t - n - tau) .. Y(t - tau - 1), scaled to [0, 1].
  std::span<const double> y;
  int label = 0;
  std::size_t t = 0;
};

struct LabeledSample {
  std::vector<double> f;
  std::vector<double> df;
  std::vector<double> y;
  int label = 0;
  std::size_t t = 0;

  SampleView view() const { return {f, df, y, label, t}; }
};

/// Channels of a whole labeled stream, from which windows are cut without copying.
struct LabeledStream {
  std::vector<double> f;
  std::vector<double> df;
  /// Scaled labels, left-padded with `pad` zeros so windows reaching before
  /// the series start read as class 0.
  std::vector<double> y_channel;
  /// Y(t) for t < size - tau.
  std::vector<int> labels;
  std::size_t pad = 0;
};

/// Windowed samples. Backed either by a shared stream (built from events) or
/// by stored samples (loaded from disk); both give the same SampleView access.
class LabeledDataset {
 public:
  LabeledDataset() = default;
  LabeledDataset(TargetSpec spec, std::size_t n_past, std::shared_ptr<const LabeledStream> stream,
                 std::vector<std::size_t> times, bool balanced);
  LabeledDataset(TargetSpec spec, std::size_t n_past,
                 std::shared_ptr<const std::vector<LabeledSample>> samples,
                 std::vector<std::size_t> rows, bool balanced);

  std::size_t size() const noexcept { return keys_.size(); }
  bool empty() const noexcept { return keys_.empty(); }
  SampleView operator[](std::size_t i) const;
  int label(std::size_t i) const;
  LabeledSample sample(std::size_t i) const;

  const TargetSpec& spec() const noexcept { return spec_; }
  std::size_t n_past() const noexcept { return n_past_; }
  bool balanced() const noexcept { return balanced_; }
  std::vector<std::size_t> class_counts() const;

  /// Dataset of the listed rows (indices into this dataset).
  LabeledDataset select(std::span<const std::size_t> rows, bool balanced) const;

 private:
  TargetSpec spec_;
  std::size_t n_past_ = 0;
  bool balanced_ = false;
  std::shared_ptr<const LabeledStream> stream_;
  std::shared_ptr<const std::vector<LabeledSample>> stored_;
  std::vector<std::size_t> keys_;
};

std::shared_ptr<const LabeledStream> make_labeled_stream(const EventSeries& events,
                                                         const TargetSpec& spec,
                                                         std::size_t n_past);

/// One sample per t in [n_past, size - 1 - tau]: inputs f, delta_f over
/// [t - n_past, t) and labels over [t - n_past - tau, t - tau), target Y(t).
LabeledDataset build_dataset(const EventSeries& events, const TargetSpec& spec,
                             std::size_t n_past);
/// Same, restricted to sample times in [t_begin, t_end).
LabeledDataset build_dataset(const EventSeries& events, const TargetSpec& spec,
                             std::size_t n_past, std::size_t t_begin, std::size_t t_end);

/// Uniform per-class subsampling down to the minority count (optionally capped).
LabeledDataset rebalance(const LabeledDataset& dataset, std::uint64_t seed,
                         std::optional<std::size_t> max_per_class = std::nullopt);

inline constexpr std::uint32_t kDatasetSchemaVersion = 1;

/// Binary container: header (sample count, n_past, target spec) followed by
/// fixed-stride records (label, t, 3 x n_past doubles).
void write_dataset(const std::filesystem::path& path, const LabeledDataset& dataset);
LabeledDataset read_dataset(const std::filesystem::path& path);
/// Human-readable dump for debugging small datasets.
void write_dataset_text(const std::filesystem::path& path, const LabeledDataset& dataset);

}  // namespace knitcity
