#include "knitcity/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "knitcity/error.hpp"
#include "knitcity/io.hpp"
#include "knitcity/random.hpp"
#include "knitcity/series_io.hpp"

namespace knitcity {

namespace {

std::vector<double> one_hot(int n_classes, int cls) {
  std::vector<double> p(static_cast<std::size_t>(n_classes), 0.0);
  p[static_cast<std::size_t>(cls)] = 1.0;
  return p;
}

bool same_spec(const TargetSpec& a, const TargetSpec& b) {
  return a.kind == b.kind && a.tau == b.tau && a.n_classes == b.n_classes &&
         a.thresholds.bounds == b.thresholds.bounds;
}

}  // namespace

ConstantForecaster::ConstantForecaster(int n_classes, int cls) : n_classes_(n_classes), cls_(cls) {
  if (n_classes < 2 || cls < 0 || cls >= n_classes) {
    throw ConfigError("constant forecaster: class out of range");
  }
}

std::vector<double> ConstantForecaster::predict(const SampleView&) const {
  return one_hot(n_classes_, cls_);
}

UniformRandomForecaster::UniformRandomForecaster(int n_classes, std::uint64_t seed)
    : n_classes_(n_classes), seed_(seed) {
  if (n_classes < 2) throw ConfigError("random forecaster: need at least two classes");
}

std::vector<double> UniformRandomForecaster::predict(const SampleView& sample) const {
  const std::uint64_t h = mix_seed(seed_ ^ mix_seed(sample.t + 0x9e3779b97f4a7c15ULL));
  return one_hot(n_classes_, static_cast<int>(h % static_cast<std::uint64_t>(n_classes_)));
}

void ClassifierConfig::validate() const {
  if (channels_per_block == 0 || kernel_size == 0 || batch_size == 0 || lr_decay_every == 0) {
    throw ConfigError("classifier: channels, kernel size, batch size and decay period must be positive");
  }
  if (kernel_size % 2 == 0) throw ConfigError("classifier: kernel_size must be odd");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("classifier: learning_rate must be positive");
  }
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("classifier: lr_decay must be in (0,1]");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw ConfigError("classifier: weight_decay must be >= 0");
  }
}

InputScaling InputScaling::fit(const LabeledDataset& data, std::size_t max_samples) {
  InputScaling s;
  if (data.empty()) return s;
  const std::size_t stride = std::max<std::size_t>(1, data.size() / max_samples);
  double var_sum = 0.0;
  std::size_t var_count = 0;
  std::vector<double> magnitudes;
  for (std::size_t i = 0; i < data.size(); i += stride) {
    const SampleView v = data[i];
    const double mean = std::accumulate(v.f.begin(), v.f.end(), 0.0) / static_cast<double>(v.f.size());
    for (double x : v.f) var_sum += (x - mean) * (x - mean);
    var_count += v.f.size();
    for (double d : v.df) {
      if (d != 0.0) magnitudes.push_back(std::fabs(d));
    }
  }
  const double sd = std::sqrt(var_sum / static_cast<double>(var_count));
  if (sd > 0.0 && std::isfinite(sd)) s.f_scale = sd;
  if (!magnitudes.empty()) {
    auto mid = magnitudes.begin() + static_cast<std::ptrdiff_t>(magnitudes.size() / 2);
    std::nth_element(magnitudes.begin(), mid, magnitudes.end());
    if (*mid > 0.0) s.df_scale = *mid;
  }
  return s;
}

void InputScaling::apply(const SampleView& sample, std::span<double> out) const {
  const std::size_t n = sample.f.size();
  const double mean = std::accumulate(sample.f.begin(), sample.f.end(), 0.0) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = (sample.f[i] - mean) / f_scale;
    const double d = sample.df[i];
    out[n + i] = std::copysign(std::log1p(std::fabs(d) / df_scale), d);
    out[2 * n + i] = sample.y[i];
  }
}

ConvNetShape network_shape(const ClassifierConfig& config, int n_classes, std::size_t n_past) {
  ConvNetShape shape;
  shape.in_channels = 3;
  shape.length = n_past;
  shape.channels = config.channels_per_block;
  shape.blocks = config.conv_blocks;
  shape.kernel = config.kernel_size;
  shape.outputs = static_cast<std::size_t>(n_classes);
  return shape;
}

ConvClassifier::ConvClassifier(const ClassifierConfig& config, TargetSpec spec, std::size_t n_past)
    : config_(config),
      spec_(std::move(spec)),
      n_past_(n_past),
      net_(network_shape(config, spec_.n_classes, n_past)) {
  config_.validate();
  net_.initialize(derive_seed(config_.seed, "classifier-init"));
}

std::vector<double> ConvClassifier::predict(const SampleView& sample) const {
  if (sample.f.size() != n_past_ || sample.df.size() != n_past_ || sample.y.size() != n_past_) {
    throw DataError("classifier expects windows of length " + std::to_string(n_past_));
  }
  auto ws = net_.make_workspace();
  std::vector<double> input(3 * n_past_);
  scaling.apply(sample, input);
  const auto probs = net_.forward(input, ws);
  return {probs.begin(), probs.end()};
}

namespace {

struct PassResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

PassResult evaluate_loss(const ConvClassifier& model, const LabeledDataset& data) {
  PassResult r;
  if (data.empty()) {
    r.loss = r.accuracy = std::numeric_limits<double>::quiet_NaN();
    return r;
  }
  auto ws = model.net().make_workspace();
  std::vector<double> input(3 * model.n_past());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const SampleView v = data[i];
    model.scaling.apply(v, input);
    const auto probs = model.net().forward(input, ws);
    r.loss -= std::log(std::max(probs[static_cast<std::size_t>(v.label)], 1e-300));
    if (argmax(probs) == v.label) ++correct;
  }
  r.loss /= static_cast<double>(data.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return r;
}

}  // namespace

std::unique_ptr<ConvClassifier> train_classifier(const LabeledDataset& train,
                                                 const LabeledDataset& valid,
                                                 const ClassifierConfig& config) {
  config.validate();
  if (train.empty()) throw DataError("training set is empty");
  if (!train.balanced()) throw DataError("training set must be class-balanced");
  if (!valid.empty() && (!same_spec(train.spec(), valid.spec()) || train.n_past() != valid.n_past())) {
    throw DataError("training and validation sets use different targets or windows");
  }
  auto model = std::make_unique<ConvClassifier>(config, train.spec(), train.n_past());
  model->scaling = InputScaling::fit(train);

  ConvNet& net = model->net();
  auto ws = net.make_workspace();
  Adam adam(net.parameters().size());
  std::vector<double> grad(net.parameters().size());
  std::vector<double> input(3 * train.n_past());
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(config.seed, "classifier-shuffle"));

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.learning_rate *
                      std::pow(config.lr_decay, static_cast<double>(epoch / config.lr_decay_every));
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      std::fill(grad.begin(), grad.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t k = start; k < stop; ++k) {
        const SampleView v = train[order[k]];
        model->scaling.apply(v, input);
        const auto probs = net.forward(input, ws);
        if (argmax(probs) == v.label) ++correct;
        batch_loss += net.backward(v.label, ws, grad);
      }
      if (!std::isfinite(batch_loss)) {
        throw TrainingError("non-finite training loss", epoch);
      }
      loss_sum += batch_loss;
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (double& g : grad) g *= inv;
      adam.step(net.parameters(), grad, lr, config.weight_decay);
    }
    for (double p : net.parameters()) {
      if (!std::isfinite(p)) throw TrainingError("non-finite network weights", epoch);
    }
    const PassResult vr = evaluate_loss(*model, valid);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.learning_rate = lr;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    rec.valid_loss = vr.loss;
    rec.valid_accuracy = vr.accuracy;
    model->curve.push_back(rec);
  }
  return model;
}

int argmax(std::span<const double> probs) {
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

MetricsReport score_predictions(std::span<const int> truth, std::span<const int> predicted,
                                int n_classes) {
  if (truth.size() != predicted.size()) throw DataError("metrics: label vectors differ in length");
  if (truth.empty()) throw DataError("metrics: no samples");
  if (n_classes < 2) throw ConfigError("metrics: need at least two classes");
  const auto nc = static_cast<std::size_t>(n_classes);
  MetricsReport r;
  r.n_classes = n_classes;
  r.n_samples = truth.size();
  r.confusion.assign(nc, std::vector<std::size_t>(nc, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= n_classes || predicted[i] < 0 || predicted[i] >= n_classes) {
      throw DataError("metrics: label out of range");
    }
    ++r.confusion[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predicted[i])];
  }
  const double total = static_cast<double>(truth.size());
  std::vector<std::size_t> true_count(nc, 0), pred_count(nc, 0);
  std::size_t diag = 0;
  for (std::size_t a = 0; a < nc; ++a) {
    diag += r.confusion[a][a];
    for (std::size_t b = 0; b < nc; ++b) {
      true_count[a] += r.confusion[a][b];
      pred_count[b] += r.confusion[a][b];
    }
  }
  r.accuracy = static_cast<double>(diag) / total;
  r.class_precision.assign(nc, std::nullopt);
  r.class_recall.assign(nc, std::nullopt);
  double p_sum = 0.0, r_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < nc; ++c) {
    if (pred_count[c] > 0) {
      r.class_precision[c] = static_cast<double>(r.confusion[c][c]) / static_cast<double>(pred_count[c]);
      p_sum += *r.class_precision[c];
    }
    if (true_count[c] > 0) {
      r.class_recall[c] = static_cast<double>(r.confusion[c][c]) / static_cast<double>(true_count[c]);
      r_sum += *r.class_recall[c];
      ++present;
    }
  }
  const double n = static_cast<double>(nc);
  r.precision = p_sum / n;
  r.recall = r_sum / n;
  const auto harmonic = [](double p, double q) { return p + q > 0.0 ? 2.0 * p * q / (p + q) : 0.0; };
  r.f1 = harmonic(r.precision, r.recall);

  // A uniform random predictor hits class c with probability 1/N, so its
  // expected per-class precision is the marginal of c and its recall 1/N.
  r.random_accuracy = 1.0 / n;
  const double rand_p = 1.0 / n;
  const double rand_r = static_cast<double>(present) / (n * n);
  r.random_f1 = harmonic(rand_p, rand_r);
  r.accuracy_vs_random = r.accuracy / r.random_accuracy;
  r.f1_vs_random = r.random_f1 > 0.0 ? r.f1 / r.random_f1 : 0.0;

  const std::size_t top = nc - 1;
  const std::size_t zero_edge = r.confusion[0][0] + r.confusion[0][top];
  const std::size_t top_edge = r.confusion[top][0] + r.confusion[top][top];
  if (zero_edge > 0) r.fp_edge = static_cast<double>(r.confusion[0][top]) / static_cast<double>(zero_edge);
  if (top_edge > 0) r.fn_edge = static_cast<double>(r.confusion[top][0]) / static_cast<double>(top_edge);
  return r;
}

MetricsReport evaluate(const Forecaster& forecaster, const LabeledDataset& test) {
  if (test.empty()) throw DataError("evaluation set is empty");
  if (test.balanced()) throw DataError("evaluation set must keep its natural class marginals");
  if (forecaster.n_classes() != test.spec().n_classes) {
    throw DataError("forecaster and evaluation set disagree on the class count");
  }
  std::vector<int> truth(test.size()), predicted(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    const SampleView v = test[i];
    truth[i] = v.label;
    predicted[i] = argmax(forecaster.predict(v));
  }
  return score_predictions(truth, predicted, test.spec().n_classes);
}

std::vector<StreamPrediction> predict_stream(const Forecaster& forecaster, const EventSeries& events,
                                             const TargetSpec& spec, std::size_t n_past,
                                             std::size_t t_begin, std::size_t t_end) {
  if (n_past < 1) throw ConfigError("n_past must be >= 1");
  const std::size_t size = events.size();
  if (size < n_past + spec.tau) {
    throw DataError("series of length " + std::to_string(size) + " is shorter than one window");
  }
  if (forecaster.n_classes() != spec.n_classes) {
    throw DataError("forecaster and target disagree on the class count");
  }
  const auto stream = make_labeled_stream(events, spec, n_past);
  const std::size_t first = std::max(n_past + spec.tau, t_begin);
  const std::size_t last = std::min(size + 1, t_end);
  std::vector<StreamPrediction> out;
  if (first >= last) return out;
  out.reserve(last - first);
  const std::span<const double> f(stream->f), df(stream->df), y(stream->y_channel);
  for (std::size_t t = first; t < last; ++t) {
    SampleView v{f.subspan(t - n_past, n_past), df.subspan(t - n_past, n_past),
                 y.subspan(stream->pad + t - n_past - spec.tau, n_past), -1, t};
    StreamPrediction p;
    p.t = t;
    p.probs = forecaster.predict(v);
    p.cls = argmax(p.probs);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<StreamPrediction> predict_stream(const Forecaster& forecaster, const EventSeries& events,
                                             const TargetSpec& spec, std::size_t n_past) {
  return predict_stream(forecaster, events, spec, n_past, 0, events.size() + 1);
}

double gradient_check(const ClassifierConfig& config, const TargetSpec& spec, std::size_t n_past,
                      std::span<const SampleView> batch, double floor) {
  if (batch.empty()) throw DataError("gradient check needs at least one sample");
  ConvNet net(network_shape(config, spec.n_classes, n_past));
  net.initialize(derive_seed(config.seed, "gradient-check"));
  if (net.parameters().size() > 10000) {
    throw ConfigError("gradient check is limited to networks of at most 10^4 parameters");
  }
  InputScaling scaling;
  std::vector<std::vector<double>> inputs;
  for (const SampleView& v : batch) {
    std::vector<double> in(3 * n_past);
    scaling.apply(v, in);
    inputs.push_back(std::move(in));
  }
  auto ws = net.make_workspace();
  const double inv = 1.0 / static_cast<double>(batch.size());
  std::vector<double> grad(net.parameters().size(), 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    net.forward(inputs[i], ws);
    net.backward(batch[i].label, ws, grad);
  }
  for (double& g : grad) g *= inv;

  const auto mean_loss = [&] {
    double loss = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto probs = net.forward(inputs[i], ws);
      loss -= std::log(probs[static_cast<std::size_t>(batch[i].label)]);
    }
    return loss * inv;
  };
  constexpr double h = 1e-4;
  double worst = 0.0;
  auto params = net.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double saved = params[k];
    params[k] = saved + h;
    const double up = mean_loss();
    params[k] = saved - h;
    const double down = mean_loss();
    params[k] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::fabs(grad[k]), std::fabs(numeric), floor});
    worst = std::max(worst, std::fabs(grad[k] - numeric) / denom);
  }
  return worst;
}

void to_json(nlohmann::json& j, const ClassifierConfig& c) {
  j = nlohmann::json{{"conv_blocks", c.conv_blocks},       {"channels_per_block", c.channels_per_block},
                     {"kernel_size", c.kernel_size},       {"learning_rate", c.learning_rate},
                     {"lr_decay", c.lr_decay},             {"lr_decay_every", c.lr_decay_every},
                     {"weight_decay", c.weight_decay},     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ClassifierConfig& c) {
  if (!j.is_object()) throw ConfigError("classifier config must be a JSON object");
  ClassifierConfig out;
  for (const auto& [key, value] : j.items()) {
    if (key == "conv_blocks") out.conv_blocks = value.get<std::size_t>();
    else if (key == "channels_per_block") out.channels_per_block = value.get<std::size_t>();
    else if (key == "kernel_size") out.kernel_size = value.get<std::size_t>();
    else if (key == "learning_rate") out.learning_rate = value.get<double>();
    else if (key == "lr_decay") out.lr_decay = value.get<double>();
    else if (key == "lr_decay_every") out.lr_decay_every = value.get<std::size_t>();
    else if (key == "weight_decay") out.weight_decay = value.get<double>();
    else if (key == "epochs") out.epochs = value.get<std::size_t>();
    else if (key == "batch_size") out.batch_size = value.get<std::size_t>();
    else if (key == "seed") out.seed = value.get<std::uint64_t>();
    else throw ConfigError("unknown classifier config key '" + key + "'");
  }
  out.validate();
  c = out;
}

void to_json(nlohmann::json& j, const TargetSpec& s) {
  j = nlohmann::json{{"target", to_string(s.kind)},
                     {"tau", s.tau},
                     {"n_classes", s.n_classes},
                     {"thresholds", s.thresholds}};
}

void from_json(const nlohmann::json& j, TargetSpec& s) {
  TargetSpec out;
  out.kind = parse_target_kind(j.at("target").get<std::string>());
  out.tau = j.at("tau").get<std::size_t>();
  out.n_classes = j.at("n_classes").get<int>();
  out.thresholds = j.at("thresholds").get<ClassThresholds>();
  out.validate();
  s = out;
}

namespace {
constexpr std::string_view kCheckpointMagic = "KCPM";
}

void save_classifier(const std::filesystem::path& path, const ConvClassifier& model) {
  io::BinaryWriter w(path);
  w.magic(kCheckpointMagic);
  w.put<std::uint32_t>(kCheckpointSchemaVersion);
  const nlohmann::json echo{{"config", model.config()},
                            {"spec", model.spec()},
                            {"n_past", model.n_past()},
                            {"f_scale", model.scaling.f_scale},
                            {"df_scale", model.scaling.df_scale}};
  w.put_string(echo.dump());
  w.put<double>(model.scaling.f_scale);
  w.put<double>(model.scaling.df_scale);
  w.put_span<double>(model.net().parameters());
  w.put<std::uint64_t>(model.curve.size());
  for (const EpochRecord& e : model.curve) {
    w.put<std::uint64_t>(e.epoch);
    w.put<double>(e.learning_rate);
    w.put<double>(e.train_loss);
    w.put<double>(e.train_accuracy);
    w.put<double>(e.valid_loss);
    w.put<double>(e.valid_accuracy);
  }
  w.close();
}

std::unique_ptr<ConvClassifier> load_classifier(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic(kCheckpointMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointSchemaVersion) {
    throw CheckpointError(path.string() + ": checkpoint schema_version " + std::to_string(version) +
                          " is not supported (expected " +
                          std::to_string(kCheckpointSchemaVersion) + ")");
  }
  std::unique_ptr<ConvClassifier> model;
  try {
    const auto echo = nlohmann::json::parse(r.get_string());
    model = std::make_unique<ConvClassifier>(echo.at("config").get<ClassifierConfig>(),
                                             echo.at("spec").get<TargetSpec>(),
                                             echo.at("n_past").get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": bad config echo: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": bad config echo: " + e.what());
  }
  model->scaling.f_scale = r.get<double>();
  model->scaling.df_scale = r.get<double>();
  model->net().set_parameters(r.get_vector<double>(std::size_t{1} << 28));
  const auto n_epochs = r.get<std::uint64_t>();
  if (n_epochs > (1u << 24)) throw CheckpointError(path.string() + ": bad curve length");
  for (std::uint64_t i = 0; i < n_epochs; ++i) {
    EpochRecord e;
    e.epoch = r.get<std::uint64_t>();
    e.learning_rate = r.get<double>();
    e.train_loss = r.get<double>();
    e.train_accuracy = r.get<double>();
    e.valid_loss = r.get<double>();
    e.valid_accuracy = r.get<double>();
    model->curve.push_back(e);
  }
  r.expect_end();
  return model;
}

std::string metrics_csv_header() {
  return "target,tau,n_classes,n_samples,accuracy,precision,recall,f1,random_accuracy,random_f1,"
         "accuracy_vs_random,f1_vs_random,fp_edge,fn_edge,class_precision,class_recall";
}

std::string metrics_csv_row(const TargetSpec& spec, const MetricsReport& m) {
  const auto opt = [](const std::optional<double>& x) {
    return x ? io::format_fixed(*x) : std::string("NA");
  };
  const auto list = [&](const std::vector<std::optional<double>>& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (i) s += ';';
      s += opt(xs[i]);
    }
    return s;
  };
  std::string row = to_string(spec.kind) + "," + std::to_string(spec.tau) + "," +
                    std::to_string(spec.n_classes) + "," + std::to_string(m.n_samples);
  for (double x : {m.accuracy, m.precision, m.recall, m.f1, m.random_accuracy, m.random_f1,
                   m.accuracy_vs_random, m.f1_vs_random}) {
    row += "," + io::format_fixed(x);
  }
  row += "," + opt(m.fp_edge) + "," + opt(m.fn_edge) + "," + list(m.class_precision) + "," +
         list(m.class_recall);
  return row;
}

void write_training_curve_csv(const std::filesystem::path& path,
                              std::span<const EpochRecord> curve) {
  std::string text = "epoch,learning_rate,train_loss,train_accuracy,valid_loss,valid_accuracy\n";
  for (const EpochRecord& e : curve) {
    text += std::to_string(e.epoch);
    for (double x : {e.learning_rate, e.train_loss, e.train_accuracy, e.valid_loss, e.valid_accuracy}) {
      text += "," + io::format_fixed(x);
    }
    text += '\n';
  }
  io::write_text(path, text);
}

}  // namespace knitcity
