#include "knitcity/labeling.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "knitcity/error.hpp"
#include "knitcity/io.hpp"

namespace knitcity {

std::string to_string(TargetKind kind) {
  switch (kind) {
    case TargetKind::kT1: return "T1";
    case TargetKind::kT2: return "T2";
    case TargetKind::kT3: return "T3";
  }
  return "?";
}

TargetKind parse_target_kind(std::string_view text) {
  if (text == "T1") return TargetKind::kT1;
  if (text == "T2") return TargetKind::kT2;
  if (text == "T3") return TargetKind::kT3;
  throw ConfigError("unknown target kind '" + std::string(text) + "'");
}

void TargetSpec::validate() const {
  if (kind != TargetKind::kT1 && kind != TargetKind::kT2 && kind != TargetKind::kT3) {
    throw ConfigError("invalid target kind");
  }
  if (tau < 1) throw ConfigError("tau must be >= 1");
  thresholds.validate();
  if (thresholds.n_classes != n_classes) {
    throw ConfigError("thresholds were built for a different class count");
  }
}

std::string TargetSpec::name() const {
  return to_string(kind) + "_tau" + std::to_string(tau) + "_N" + std::to_string(n_classes);
}

std::vector<double> target_series(const EventSeries& events, const TargetSpec& spec) {
  if (spec.tau < 1) throw ConfigError("tau must be >= 1");
  const std::size_t n = events.size();
  if (n < spec.tau + 1) {
    throw DataError("series of length " + std::to_string(n) + " is shorter than tau + 1");
  }
  const std::size_t tau = spec.tau;
  const std::size_t out_len = n - tau;
  std::vector<double> out(out_len, 0.0);
  std::vector<double> weights(tau + 1, 1.0);
  if (spec.kind == TargetKind::kT3) {
    const double decay = static_cast<double>(tau) / 3.0;
    for (std::size_t k = 0; k <= tau; ++k) weights[k] = std::exp(-static_cast<double>(k) / decay);
  }
  // Each drop at s contributes to every t in [s - tau, s].
  for (std::size_t s = 0; s < n; ++s) {
    const double d = events.delta_f[s];
    if (d == 0.0) continue;
    const std::size_t first = s >= tau ? s - tau : 0;
    const std::size_t last = std::min(s, out_len - 1);
    if (first >= out_len) continue;
    for (std::size_t t = first; t <= last; ++t) {
      switch (spec.kind) {
        case TargetKind::kT1: out[t] = std::max(out[t], d); break;
        case TargetKind::kT2: out[t] += d; break;
        case TargetKind::kT3: out[t] += weights[s - t] * d; break;
      }
    }
  }
  return out;
}

std::vector<int> labelize(std::span<const double> targets, const TargetSpec& spec) {
  std::vector<int> labels(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!std::isfinite(targets[i])) throw DataError("non-finite target value");
    labels[i] = class_of(targets[i], spec.thresholds);
  }
  return labels;
}

LabeledDataset::LabeledDataset(TargetSpec spec, std::size_t n_past,
                               std::shared_ptr<const LabeledStream> stream,
                               std::vector<std::size_t> times, bool balanced)
    : spec_(std::move(spec)),
      n_past_(n_past),
      balanced_(balanced),
      stream_(std::move(stream)),
      keys_(std::move(times)) {}

LabeledDataset::LabeledDataset(TargetSpec spec, std::size_t n_past,
                               std::shared_ptr<const std::vector<LabeledSample>> samples,
                               std::vector<std::size_t> rows, bool balanced)
    : spec_(std::move(spec)),
      n_past_(n_past),
      balanced_(balanced),
      stored_(std::move(samples)),
      keys_(std::move(rows)) {}

SampleView LabeledDataset::operator[](std::size_t i) const {
  const std::size_t key = keys_.at(i);
  if (stored_) return (*stored_)[key].view();
  const LabeledStream& s = *stream_;
  const std::size_t begin = key - n_past_;
  // y_channel[pad + t'] holds Y(t'); the window Y(t - n - tau) .. Y(t - tau - 1)
  // therefore starts at pad + t - n - tau.
  const std::size_t y_begin = s.pad + key - n_past_ - spec_.tau;
  return SampleView{std::span<const double>(s.f).subspan(begin, n_past_),
                    std::span<const double>(s.df).subspan(begin, n_past_),
                    std::span<const double>(s.y_channel).subspan(y_begin, n_past_),
                    s.labels[key], key};
}

int LabeledDataset::label(std::size_t i) const {
  const std::size_t key = keys_.at(i);
  return stored_ ? (*stored_)[key].label : stream_->labels[key];
}

LabeledSample LabeledDataset::sample(std::size_t i) const {
  const SampleView v = (*this)[i];
  return LabeledSample{{v.f.begin(), v.f.end()},
                       {v.df.begin(), v.df.end()},
                       {v.y.begin(), v.y.end()},
                       v.label,
                       v.t};
}

std::vector<std::size_t> LabeledDataset::class_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(spec_.n_classes), 0);
  for (std::size_t i = 0; i < size(); ++i) ++counts[static_cast<std::size_t>(label(i))];
  return counts;
}

LabeledDataset LabeledDataset::select(std::span<const std::size_t> rows, bool balanced) const {
  LabeledDataset out = *this;
  out.balanced_ = balanced;
  out.keys_.clear();
  out.keys_.reserve(rows.size());
  for (std::size_t r : rows) out.keys_.push_back(keys_.at(r));
  return out;
}

std::shared_ptr<const LabeledStream> make_labeled_stream(const EventSeries& events,
                                                         const TargetSpec& spec,
                                                         std::size_t n_past) {
  spec.validate();
  events.validate();
  auto stream = std::make_shared<LabeledStream>();
  stream->f = events.f;
  stream->df = events.delta_f;
  stream->labels = labelize(target_series(events, spec), spec);
  stream->pad = n_past + spec.tau;
  stream->y_channel.assign(stream->pad + stream->labels.size(), 0.0);
  const double scale = 1.0 / static_cast<double>(spec.n_classes - 1);
  for (std::size_t t = 0; t < stream->labels.size(); ++t) {
    stream->y_channel[stream->pad + t] = static_cast<double>(stream->labels[t]) * scale;
  }
  return stream;
}

LabeledDataset build_dataset(const EventSeries& events, const TargetSpec& spec,
                             std::size_t n_past, std::size_t t_begin, std::size_t t_end) {
  if (n_past < 1) throw ConfigError("n_past must be >= 1");
  const std::size_t n = events.size();
  if (n <= n_past + spec.tau) {
    throw DataError("series of length " + std::to_string(n) +
                    " is too short for n_past + tau = " + std::to_string(n_past + spec.tau));
  }
  auto stream = make_labeled_stream(events, spec, n_past);
  const std::size_t first = std::max(n_past, t_begin);
  const std::size_t last = std::min(n - spec.tau, t_end);  // exclusive
  std::vector<std::size_t> times;
  for (std::size_t t = first; t < last; ++t) times.push_back(t);
  return LabeledDataset(spec, n_past, std::move(stream), std::move(times), false);
}

LabeledDataset build_dataset(const EventSeries& events, const TargetSpec& spec,
                             std::size_t n_past) {
  return build_dataset(events, spec, n_past, 0, events.size());
}

LabeledDataset rebalance(const LabeledDataset& dataset, std::uint64_t seed,
                         std::optional<std::size_t> max_per_class) {
  const auto nc = static_cast<std::size_t>(dataset.spec().n_classes);
  std::vector<std::vector<std::size_t>> by_class(nc);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    by_class[static_cast<std::size_t>(dataset.label(i))].push_back(i);
  }
  std::size_t keep = SIZE_MAX;
  for (std::size_t c = 0; c < nc; ++c) {
    if (by_class[c].empty()) throw RebalanceError(static_cast<int>(c));
    keep = std::min(keep, by_class[c].size());
  }
  if (max_per_class) keep = std::min(keep, *max_per_class);

  Rng rng(derive_seed(seed, "rebalance"));
  std::vector<std::size_t> rows;
  rows.reserve(keep * nc);
  for (auto& members : by_class) {
    rng.shuffle(members.begin(), members.end());
    rows.insert(rows.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(keep));
  }
  rng.shuffle(rows.begin(), rows.end());
  return dataset.select(rows, true);
}

namespace {
constexpr std::string_view kDatasetMagic = "KCDS";
}

void write_dataset(const std::filesystem::path& path, const LabeledDataset& dataset) {
  const TargetSpec& spec = dataset.spec();
  io::BinaryWriter w(path);
  w.magic(kDatasetMagic);
  w.put<std::uint32_t>(kDatasetSchemaVersion);
  w.put<std::uint64_t>(dataset.size());
  w.put<std::uint64_t>(dataset.n_past());
  w.put<std::uint8_t>(static_cast<std::uint8_t>(spec.kind));
  w.put<std::uint64_t>(spec.tau);
  w.put<std::int32_t>(spec.n_classes);
  w.put_span<double>(spec.thresholds.bounds);
  w.put<std::uint8_t>(dataset.balanced() ? 1 : 0);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const SampleView v = dataset[i];
    w.put<std::int32_t>(v.label);
    w.put<std::uint64_t>(v.t);
    w.put_raw(v.f);
    w.put_raw(v.df);
    w.put_raw(v.y);
  }
  w.close();
}

LabeledDataset read_dataset(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic(kDatasetMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kDatasetSchemaVersion) {
    throw CheckpointError(path.string() + ": unsupported dataset schema_version " +
                          std::to_string(version));
  }
  const auto count = r.get<std::uint64_t>();
  const auto n_past = r.get<std::uint64_t>();
  TargetSpec spec;
  spec.kind = static_cast<TargetKind>(r.get<std::uint8_t>());
  spec.tau = r.get<std::uint64_t>();
  spec.n_classes = r.get<std::int32_t>();
  spec.thresholds.n_classes = spec.n_classes;
  spec.thresholds.bounds = r.get_vector<double>(16);
  const bool balanced = r.get<std::uint8_t>() != 0;
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  if (n_past == 0 || n_past > (1u << 20)) throw CheckpointError(path.string() + ": bad n_past");

  auto samples = std::make_shared<std::vector<LabeledSample>>(count);
  for (LabeledSample& s : *samples) {
    s.label = r.get<std::int32_t>();
    s.t = r.get<std::uint64_t>();
    if (s.label < 0 || s.label >= spec.n_classes) {
      throw CheckpointError(path.string() + ": label out of range");
    }
    s.f.resize(n_past);
    s.df.resize(n_past);
    s.y.resize(n_past);
    r.get_raw(s.f);
    r.get_raw(s.df);
    r.get_raw(s.y);
  }
  r.expect_end();
  std::vector<std::size_t> rows(count);
  for (std::size_t i = 0; i < count; ++i) rows[i] = i;
  return LabeledDataset(spec, n_past, std::move(samples), std::move(rows), balanced);
}

void write_dataset_text(const std::filesystem::path& path, const LabeledDataset& dataset) {
  std::ostringstream out;
  out << "# target=" << dataset.spec().name() << " n_past=" << dataset.n_past()
      << " samples=" << dataset.size() << " balanced=" << (dataset.balanced() ? 1 : 0) << "\n";
  out << "t,label,channel,values\n";
  const auto row = [&](const SampleView& v, const char* name, std::span<const double> xs) {
    out << v.t << ',' << v.label << ',' << name << ',';
    for (std::size_t i = 0; i < xs.size(); ++i) out << (i ? " " : "") << io::format_double(xs[i]);
    out << '\n';
  };
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const SampleView v = dataset[i];
    row(v, "f", v.f);
    row(v, "delta_f", v.df);
    row(v, "y", v.y);
  }
  io::write_text(path, out.str());
}

}  // namespace knitcity
