#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "knitcity/labeling.hpp"
#include "knitcity/network.hpp"

namespace knitcity {

/// Maps the three input channels of a sample to a probability vector over N classes.
class Forecaster {
 public:
  virtual ~Forecaster() = default;
  virtual int n_classes() const = 0;
  virtual std::vector<double> predict(const SampleView& sample) const = 0;
};

/// Always predicts one class.
class ConstantForecaster final : public Forecaster {
 public:
  ConstantForecaster(int n_classes, int cls);
  int n_classes() const override { return n_classes_; }
  std::vector<double> predict(const SampleView& sample) const override;

 private:
  int n_classes_;
  int cls_;
};

/// One-hot prediction of a class drawn uniformly, hashed from (seed, t) so
/// repeated calls agree.
class UniformRandomForecaster final : public Forecaster {
 public:
  UniformRandomForecaster(int n_classes, std::uint64_t seed);
  int n_classes() const override { return n_classes_; }
  std::vector<double> predict(const SampleView& sample) const override;

 private:
  int n_classes_;
  std::uint64_t seed_;
};

struct ClassifierConfig {
  std::size_t conv_blocks = 3;
  std::size_t channels_per_block = 16;
  std::size_t kernel_size = 3;
  double learning_rate = 0.01;
  double lr_decay = 0.5;
  std::size_t lr_decay_every = 50;
  double weight_decay = 1e-4;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double learning_rate = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double valid_loss = 0.0;
  double valid_accuracy = 0.0;
};

/// Per-window input normalisation learned from the training set:
/// f is centred on its window mean and divided by f_scale; delta_f is
/// compressed as sign(x) * log1p(|x| / df_scale); the label channel is kept.
struct InputScaling {
  double f_scale = 1.0;
  double df_scale = 1.0;

  static InputScaling fit(const LabeledDataset& data, std::size_t max_samples = 4096);
  void apply(const SampleView& sample, std::span<double> out) const;
};

class ConvClassifier final : public Forecaster {
 public:
  ConvClassifier(const ClassifierConfig& config, TargetSpec spec, std::size_t n_past);

  int n_classes() const override { return spec_.n_classes; }
  std::vector<double> predict(const SampleView& sample) const override;

  const ClassifierConfig& config() const noexcept { return config_; }
  const TargetSpec& spec() const noexcept { return spec_; }
  std::size_t n_past() const noexcept { return n_past_; }
  ConvNet& net() noexcept { return net_; }
  const ConvNet& net() const noexcept { return net_; }
  InputScaling scaling;
  std::vector<EpochRecord> curve;

 private:
  ClassifierConfig config_;
  TargetSpec spec_;
  std::size_t n_past_;
  ConvNet net_;
};

ConvNetShape network_shape(const ClassifierConfig& config, int n_classes, std::size_t n_past);

/// Minibatch Adam on cross-entropy with step learning-rate decay and L2
/// weight decay; the per-epoch curve is stored on the returned model.
std::unique_ptr<ConvClassifier> train_classifier(const LabeledDataset& train,
                                                 const LabeledDataset& valid,
                                                 const ClassifierConfig& config);

struct MetricsReport {
  int n_classes = 0;
  std::size_t n_samples = 0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  /// Absent when the class is never predicted (precision) or never true (recall).
  std::vector<std::optional<double>> class_precision;
  std::vector<std::optional<double>> class_recall;
  double random_accuracy = 0.0;
  double random_f1 = 0.0;
  double accuracy_vs_random = 0.0;
  double f1_vs_random = 0.0;
  /// Within samples whose true and predicted classes are both in {0, N-1}:
  /// share of true-0 predicted N-1, and of true-(N-1) predicted 0.
  std::optional<double> fp_edge;
  std::optional<double> fn_edge;
  /// confusion[true][predicted]
  std::vector<std::vector<std::size_t>> confusion;
};

/// Metrics of predicted against true labels. Macro precision and recall
/// average over all N classes, counting undefined per-class terms as 0.
MetricsReport score_predictions(std::span<const int> truth, std::span<const int> predicted,
                                int n_classes);

/// Argmax of the forecaster on every sample; the test set must keep its
/// natural class marginals.
MetricsReport evaluate(const Forecaster& forecaster, const LabeledDataset& test);

int argmax(std::span<const double> probs);

struct StreamPrediction {
  std::size_t t = 0;
  int cls = 0;
  std::vector<double> probs;
};

/// Causal sliding-window inference: one prediction for every t in
/// [n_past + tau, size], each using f, delta_f before t and labels known by t.
/// Restricting to [t_begin, t_end) skips windows outside that range.
std::vector<StreamPrediction> predict_stream(const Forecaster& forecaster, const EventSeries& events,
                                             const TargetSpec& spec, std::size_t n_past);
std::vector<StreamPrediction> predict_stream(const Forecaster& forecaster, const EventSeries& events,
                                             const TargetSpec& spec, std::size_t n_past,
                                             std::size_t t_begin, std::size_t t_end);

/// Largest relative difference |a - n| / max(|a|, |n|, floor) between the
/// analytic gradient a of the mean cross-entropy over `batch` and its central
/// finite difference n (step 1e-4), over every parameter.
double gradient_check(const ClassifierConfig& config, const TargetSpec& spec, std::size_t n_past,
                      std::span<const SampleView> batch, double floor = 1e-6);

void to_json(nlohmann::json& j, const ClassifierConfig& config);
void from_json(const nlohmann::json& j, ClassifierConfig& config);
void to_json(nlohmann::json& j, const TargetSpec& spec);
void from_json(const nlohmann::json& j, TargetSpec& spec);

inline constexpr std::uint32_t kCheckpointSchemaVersion = 1;

void save_classifier(const std::filesystem::path& path, const ConvClassifier& model);
std::unique_ptr<ConvClassifier> load_classifier(const std::filesystem::path& path);

/// CSV with one row per report: target,tau,n_classes followed by every metric.
std::string metrics_csv_header();
std::string metrics_csv_row(const TargetSpec& spec, const MetricsReport& report);
void write_training_curve_csv(const std::filesystem::path& path,
                              std::span<const EpochRecord> curve);

}  // namespace knitcity
