#include "knitcity/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "knitcity/error.hpp"
#include "knitcity/io.hpp"
#include "knitcity/series_io.hpp"

namespace knitcity {

namespace fs = std::filesystem;
using nlohmann::json;

std::string GridCell::name() const {
  return to_string(kind) + "_tau" + std::to_string(tau) + "_N" + std::to_string(n_classes);
}

RunConfig::RunConfig() {
  predictor.epochs = 15;
  episodes.n_train = 20;
  episodes.n_valid = 10;
  episodes.n_test = 30;
}

void RunConfig::validate() const {
  generator.validate();
  predictor.validate();
  agent.validate();
  episodes.validate();
  if (targets.empty() || taus.empty() || n_classes.empty()) {
    throw ConfigError("run config: the target grid is empty");
  }
  if (ks.empty() || mus.empty()) throw ConfigError("run config: the agent grid is empty");
  for (int n : n_classes) {
    if (n < 2 || n > 5) throw ConfigError("run config: n_classes entries must be in 2..5");
  }
  for (std::size_t tau : taus) {
    if (tau < 1) throw ConfigError("run config: tau entries must be >= 1");
  }
  for (std::size_t k : ks) {
    if (k < 1 || k > episodes.history + 1) {
      throw ConfigError("run config: k must be in 1..episodes.history+1");
    }
  }
  for (double mu : mus) {
    if (!(mu > 0.0) || !std::isfinite(mu)) throw ConfigError("run config: mu entries must be positive");
  }
  if (!(train_fraction > 0.0 && valid_fraction > 0.0 && train_fraction + valid_fraction < 1.0)) {
    throw ConfigError("run config: train and valid fractions must be positive and sum below 1");
  }
  if (n_past < 1) throw ConfigError("run config: n_past must be >= 1");
  if (predictor_stream_length < 1000 || episode_stream_length < 1000) {
    throw ConfigError("run config: stream lengths must be at least 1000");
  }
  if (max_train_per_class == 0 || max_valid_per_class == 0) {
    throw ConfigError("run config: per-class caps must be positive");
  }
  if (workers == 0) throw ConfigError("run config: workers must be positive");
  if (output_dir.empty()) throw ConfigError("run config: output_dir is empty");
}

std::vector<GridCell> RunConfig::cells() const {
  std::vector<GridCell> out;
  for (TargetKind kind : targets) {
    for (std::size_t tau : taus) {
      for (int n : n_classes) out.push_back(GridCell{kind, tau, n});
    }
  }
  return out;
}

void to_json(json& j, const RunConfig& c) {
  json targets = json::array();
  for (TargetKind k : c.targets) targets.push_back(to_string(k));
  j = json{{"schema_version", RunConfig::kSchemaVersion},
           {"seed", c.seed},
           {"output_dir", c.output_dir.generic_string()},
           {"generator", c.generator},
           {"predictor_stream_length", c.predictor_stream_length},
           {"episode_stream_length", c.episode_stream_length},
           {"train_fraction", c.train_fraction},
           {"valid_fraction", c.valid_fraction},
           {"n_past", c.n_past},
           {"targets", targets},
           {"taus", c.taus},
           {"n_classes", c.n_classes},
           {"max_train_per_class", c.max_train_per_class},
           {"max_valid_per_class", c.max_valid_per_class},
           {"predictor", c.predictor},
           {"agent", c.agent},
           {"ks", c.ks},
           {"mus", c.mus},
           {"episodes",
            {{"length", c.episodes.length},
             {"n_train", c.episodes.n_train},
             {"n_valid", c.episodes.n_valid},
             {"n_test", c.episodes.n_test},
             {"target_major_events", c.episodes.target_major_events},
             {"history", c.episodes.history}}},
           {"perfect_control", c.perfect_control},
           {"workers", c.workers}};
}

void from_json(const json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig out;
  for (const auto& [key, value] : j.items()) {
    if (key == "schema_version") {
      if (value.get<int>() != RunConfig::kSchemaVersion) {
        throw ConfigError("unsupported run config schema_version " + value.dump());
      }
    } else if (key == "seed") out.seed = value.get<std::uint64_t>();
    else if (key == "output_dir") out.output_dir = value.get<std::string>();
    else if (key == "generator") out.generator = value.get<GeneratorConfig>();
    else if (key == "predictor_stream_length") out.predictor_stream_length = value.get<std::size_t>();
    else if (key == "episode_stream_length") out.episode_stream_length = value.get<std::size_t>();
    else if (key == "train_fraction") out.train_fraction = value.get<double>();
    else if (key == "valid_fraction") out.valid_fraction = value.get<double>();
    else if (key == "n_past") out.n_past = value.get<std::size_t>();
    else if (key == "targets") {
      out.targets.clear();
      for (const auto& t : value) out.targets.push_back(parse_target_kind(t.get<std::string>()));
    } else if (key == "taus") out.taus = value.get<std::vector<std::size_t>>();
    else if (key == "n_classes") out.n_classes = value.get<std::vector<int>>();
    else if (key == "max_train_per_class") out.max_train_per_class = value.get<std::size_t>();
    else if (key == "max_valid_per_class") out.max_valid_per_class = value.get<std::size_t>();
    else if (key == "predictor") out.predictor = value.get<ClassifierConfig>();
    else if (key == "agent") out.agent = value.get<AgentConfig>();
    else if (key == "ks") out.ks = value.get<std::vector<std::size_t>>();
    else if (key == "mus") out.mus = value.get<std::vector<double>>();
    else if (key == "episodes") {
      for (const auto& [ek, ev] : value.items()) {
        if (ek == "length") out.episodes.length = ev.get<std::size_t>();
        else if (ek == "n_train") out.episodes.n_train = ev.get<std::size_t>();
        else if (ek == "n_valid") out.episodes.n_valid = ev.get<std::size_t>();
        else if (ek == "n_test") out.episodes.n_test = ev.get<std::size_t>();
        else if (ek == "target_major_events") out.episodes.target_major_events = ev.get<double>();
        else if (ek == "history") out.episodes.history = ev.get<std::size_t>();
        else throw ConfigError("unknown episodes key '" + ek + "'");
      }
    } else if (key == "perfect_control") out.perfect_control = value.get<bool>();
    else if (key == "workers") out.workers = value.get<std::size_t>();
    else throw ConfigError("unknown run config key '" + key + "'");
  }
  out.validate();
  c = out;
}

RunConfig read_run_config(const fs::path& path) {
  try {
    return json::parse(io::read_text(path)).get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string config_hash(const RunConfig& config) {
  // Where results go and how many threads compute them do not change them.
  json j = config;
  j.erase("output_dir");
  j.erase("workers");
  return io::sha256_hex(j.dump());
}

std::size_t resolve_workers(const RunConfig& config) {
  if (const char* env = std::getenv("KNITCITY_WORKERS"); env && *env) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (*end != '\0' || v == 0) throw ConfigError("KNITCITY_WORKERS must be a positive integer");
    return v;
  }
  return config.workers;
}

const char* to_string(Stage stage) {
  switch (stage) {
    case Stage::kSynthesize: return "synthesize";
    case Stage::kStats: return "stats";
    case Stage::kBuildDataset: return "build-dataset";
    case Stage::kTrainPredictor: return "train-predictor";
    case Stage::kEvalPredictor: return "eval-predictor";
    case Stage::kMakeEpisodes: return "make-episodes";
    case Stage::kTrainAgent: return "train-agent";
    case Stage::kEvalPolicy: return "eval-policy";
    case Stage::kReport: return "report";
  }
  return "?";
}

std::vector<RankingRow> report_rankings(std::span<const PolicyResult> results) {
  if (results.empty()) throw ReportError("no policy results to rank");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const auto find = [&](const std::string& cell, const std::string& policy, double mu) {
    for (const PolicyResult& r : results) {
      if (r.cell == cell && r.policy == policy && r.mu == mu) return aggregate(r.scores).reward_per_step;
    }
    return nan;
  };
  std::vector<RankingRow> rows;
  for (const PolicyResult& r : results) {
    RankingRow row;
    row.cell = r.cell;
    row.policy = r.policy;
    row.mu = r.mu;
    row.score = aggregate(r.scores);
    row.naive_reward = find(r.cell, "naive", r.mu);
    row.oracle_reward = find("-", "oracle", r.mu);
    row.always_stay_reward = find("-", "always_stay", r.mu);
    rows.push_back(row);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const RankingRow& a, const RankingRow& b) {
    if (a.mu != b.mu) return a.mu < b.mu;
    if (a.score.reward_per_step != b.score.reward_per_step) {
      return a.score.reward_per_step > b.score.reward_per_step;
    }
    if (a.cell != b.cell) return a.cell < b.cell;
    return a.policy < b.policy;
  });
  std::size_t rank = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rank = (i == 0 || rows[i].mu != rows[i - 1].mu) ? 1 : rank + 1;
    rows[i].rank = rank;
  }
  return rows;
}

namespace {

std::string fmt(double x) { return io::format_fixed(x); }

std::string mu_tag(double mu) { return "mu" + io::format_double(mu); }

// ---------------------------------------------------------------------------
// Stage bookkeeping

class Runner {
 public:
  Runner(const RunConfig& config, const RunOptions& options)
      : config_(config), options_(options), root_(config.output_dir), hash_(config_hash(config)) {}

  const RunConfig& config() const { return config_; }
  const fs::path& root() const { return root_; }
  RunSummary& summary() { return summary_; }

  /// Runs `body` in `dir` unless its stamp carries `key` and all outputs exist.
  bool stage(const fs::path& rel_dir, Stage stage, const std::string& cell, const std::string& key,
             const std::vector<std::string>& outputs, const std::function<void(const fs::path&)>& body) {
    const fs::path dir = root_ / rel_dir;
    const auto start = std::chrono::steady_clock::now();
    if (stamp_matches(dir, key, outputs)) {
      note(stage, cell, "cached", 0.0);
      std::lock_guard lock(mu_);
      ++summary_.stages_cached;
      return false;
    }
    fs::create_directories(dir);
    fs::remove(dir / "stamp.json");
    body(dir);
    json files = json::object();
    for (const std::string& name : outputs) {
      if (!fs::exists(dir / name)) throw Error("stage " + std::string(to_string(stage)) + " did not write " + name);
      files[name] = io::sha256_file(dir / name);
    }
    const json stamp{{"stage", to_string(stage)},
                     {"cell", cell},
                     {"key", key},
                     {"config_hash", hash_},
                     {"seed", config_.seed},
                     {"outputs", files}};
    io::write_text(dir / "stamp.json", stamp.dump(2) + "\n");
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    note(stage, cell, "run", secs);
    std::lock_guard lock(mu_);
    ++summary_.stages_run;
    return true;
  }

  void fail(Stage stage, const std::string& cell, const std::string& message) {
    note(stage, cell, "failed", 0.0, message);
    std::lock_guard lock(mu_);
    summary_.failures.push_back(CellFailure{cell, to_string(stage), message});
  }

  void note(Stage stage, const std::string& cell, const std::string& status, double secs,
            const std::string& message = {}) {
    json rec{{"stage", to_string(stage)}, {"cell", cell}, {"status", status}};
    if (status == "run") rec["seconds"] = std::round(secs * 1000.0) / 1000.0;
    if (!message.empty()) rec["message"] = message;
    std::lock_guard lock(mu_);
    if (options_.log) *options_.log << rec.dump() << std::endl;
    fs::create_directories(root_);
    std::ofstream(root_ / "run_log.jsonl", std::ios::app) << rec.dump() << "\n";
  }

 private:
  static bool stamp_matches(const fs::path& dir, const std::string& key,
                            const std::vector<std::string>& outputs) {
    const fs::path stamp = dir / "stamp.json";
    if (!fs::exists(stamp)) return false;
    try {
      const json j = json::parse(io::read_text(stamp));
      if (j.at("key").get<std::string>() != key) return false;
    } catch (const std::exception&) {
      return false;
    }
    for (const std::string& name : outputs) {
      if (!fs::exists(dir / name)) return false;
    }
    return true;
  }

  const RunConfig& config_;
  RunOptions options_;
  fs::path root_;
  std::string hash_;
  std::mutex mu_;
  RunSummary summary_;
};

std::string key_of(const json& inputs) { return io::sha256_hex(inputs.dump()); }

std::string read_key(const fs::path& dir) {
  return json::parse(io::read_text(dir / "stamp.json")).at("key").get<std::string>();
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Artifacts

constexpr std::string_view kPredictionsMagic = "KCPR";
constexpr std::uint32_t kPredictionsVersion = 1;

void write_episode_predictions(const fs::path& path, const std::vector<Episode>& episodes) {
  io::BinaryWriter w(path);
  w.magic(kPredictionsMagic);
  w.put<std::uint32_t>(kPredictionsVersion);
  w.put<std::uint64_t>(episodes.size());
  for (const Episode& ep : episodes) {
    w.put<std::uint64_t>(ep.start);
    w.put<std::uint64_t>(ep.history);
    w.put<std::int32_t>(ep.n_classes);
    w.put<std::uint64_t>(ep.predicted.size());
    for (std::size_t i = 0; i < ep.predicted.size(); ++i) {
      w.put<std::int32_t>(ep.predicted[i]);
      w.put_raw(ep.probs[i]);
    }
  }
  w.close();
}

void read_episode_predictions(const fs::path& path, std::vector<Episode>& episodes) {
  io::BinaryReader r(path);
  r.expect_magic(kPredictionsMagic);
  if (r.get<std::uint32_t>() != kPredictionsVersion) {
    throw CheckpointError(path.string() + ": unsupported predictions version");
  }
  if (r.get<std::uint64_t>() != episodes.size()) {
    throw CheckpointError(path.string() + ": episode count mismatch");
  }
  for (Episode& ep : episodes) {
    if (r.get<std::uint64_t>() != ep.start) throw CheckpointError(path.string() + ": episode start mismatch");
    ep.history = r.get<std::uint64_t>();
    ep.n_classes = r.get<std::int32_t>();
    if (ep.n_classes < 2 || ep.n_classes > 5) throw CheckpointError(path.string() + ": bad class count");
    const auto n = r.get<std::uint64_t>();
    if (n != ep.length() + ep.history) throw CheckpointError(path.string() + ": prediction count mismatch");
    ep.predicted.resize(n);
    ep.probs.assign(n, std::vector<double>(static_cast<std::size_t>(ep.n_classes)));
    for (std::size_t i = 0; i < n; ++i) {
      ep.predicted[i] = r.get<std::int32_t>();
      if (ep.predicted[i] < 0 || ep.predicted[i] >= ep.n_classes) {
        throw CheckpointError(path.string() + ": predicted class out of range");
      }
      r.get_raw(ep.probs[i]);
    }
  }
  r.expect_end();
}

struct WindowRow {
  std::string split;
  EpisodeWindow window;
};

void write_windows_csv(const fs::path& path, const EpisodeSplit& split, const EventSeries& events,
                       const ClassThresholds& ladder) {
  std::string text = "episode,split,start,length,class4_events\n";
  std::size_t id = 0;
  const auto put = [&](const char* name, const std::vector<EpisodeWindow>& ws) {
    for (const EpisodeWindow& w : ws) {
      const Episode ep = make_episode(events, ladder, w, id);
      text += std::to_string(id++) + "," + name + "," + std::to_string(w.start) + "," +
              std::to_string(w.length) + "," + std::to_string(ep.class_count(4)) + "\n";
    }
  };
  put("train", split.train);
  put("valid", split.valid);
  put("test", split.test);
  io::write_text(path, text);
}

std::vector<WindowRow> read_windows_csv(const fs::path& path) {
  std::istringstream in(io::read_text(path));
  std::string line;
  std::getline(in, line);
  std::vector<WindowRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id, split, start, length;
    std::getline(ls, id, ',');
    std::getline(ls, split, ',');
    std::getline(ls, start, ',');
    std::getline(ls, length, ',');
    rows.push_back(WindowRow{split, EpisodeWindow{std::stoull(start), std::stoull(length)}});
  }
  return rows;
}

EpisodeSets episodes_from_windows(const std::vector<WindowRow>& rows, const EventSeries& events,
                                  const ClassThresholds& ladder) {
  EpisodeSets sets;
  std::size_t id = 0;
  for (const WindowRow& row : rows) {
    Episode ep = make_episode(events, ladder, row.window, id++);
    if (row.split == "train") sets.train.push_back(std::move(ep));
    else if (row.split == "valid") sets.valid.push_back(std::move(ep));
    else sets.test.push_back(std::move(ep));
  }
  return sets;
}

std::vector<Episode> all_episodes(const EpisodeSets& sets) {
  std::vector<Episode> all = sets.train;
  all.insert(all.end(), sets.valid.begin(), sets.valid.end());
  all.insert(all.end(), sets.test.begin(), sets.test.end());
  return all;
}

EpisodeSets split_back(std::vector<Episode> all, const EpisodeSets& like) {
  EpisodeSets sets;
  std::size_t i = 0;
  for (std::size_t k = 0; k < like.train.size(); ++k) sets.train.push_back(std::move(all[i++]));
  for (std::size_t k = 0; k < like.valid.size(); ++k) sets.valid.push_back(std::move(all[i++]));
  for (std::size_t k = 0; k < like.test.size(); ++k) sets.test.push_back(std::move(all[i++]));
  return sets;
}

void write_scores_csv(const fs::path& path, std::span<const PolicyScore> scores) {
  std::string text = "episode,eta,kappa,r,damage_density\n";
  for (std::size_t i = 0; i < scores.size(); ++i) {
    text += std::to_string(i) + "," + fmt(scores[i].eta) + "," + fmt(scores[i].kappa) + "," +
            fmt(scores[i].reward_per_step) + "," + fmt(scores[i].damage_density) + "\n";
  }
  io::write_text(path, text);
}

std::vector<PolicyScore> read_scores_csv(const fs::path& path) {
  std::istringstream in(io::read_text(path));
  std::string line;
  std::getline(in, line);
  std::vector<PolicyScore> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    std::vector<double> v;
    while (std::getline(ls, field, ',')) v.push_back(std::stod(field));
    if (v.size() != 5) throw DataError(path.string() + ": malformed score row");
    out.push_back(PolicyScore{v[1], v[2], v[3], v[4]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-cell state shared between stages

struct CellState {
  GridCell cell;
  std::string name;
  bool failed = false;
  bool evaluated = false;
  std::string data_key, model_key, eval_key, pred_key;
};

struct AgentJob {
  std::string cell;  // grid cell name or "perfect"
  std::size_t k = 0;
  double mu = 0.0;
  std::string dir;
  std::string key;
  bool failed = false;
  bool collapsed = false;
};

struct StreamArtifacts {
  EventSeries predictor;
  EventSeries episodes;
  ClassThresholds ladder;
};

}  // namespace

RunSummary run_pipeline(const RunConfig& config, const RunOptions& options) {
  config.validate();
  Runner run(config, options);
  run.summary().output_dir = config.output_dir;
  const std::size_t workers = resolve_workers(config);
  const fs::path root = run.root();
  fs::create_directories(root);
  io::write_text(root / "config.json", json(config).dump(2) + "\n");
  const auto reached = [&](Stage s) { return static_cast<int>(options.until) >= static_cast<int>(s); };

  // -- synthesize --------------------------------------------------------------
  json gen = config.generator;
  gen.erase("rng_seed");
  json stream_inputs{{"stage", "synthesize"},
                     {"generator", gen},
                     {"predictor_stream_length", config.predictor_stream_length},
                     {"episode_stream_length", config.episode_stream_length},
                     {"seed", config.seed}};
  if (options.ingest) stream_inputs["ingest_sha256"] = io::sha256_file(*options.ingest);
  const std::string stream_key = key_of(stream_inputs);
  run.stage("stream", Stage::kSynthesize, "-", stream_key,
            {"predictor_events.bin", "episode_events.bin", "ladder.json"}, [&](const fs::path& dir) {
              EventSeries pred, epis;
              if (options.ingest) {
                const EventSeries all = preprocess_recording(read_recording_csv(*options.ingest));
                const std::size_t half = all.size() / 2;
                pred.f.assign(all.f.begin(), all.f.begin() + static_cast<std::ptrdiff_t>(half));
                pred.delta_f.assign(all.delta_f.begin(), all.delta_f.begin() + static_cast<std::ptrdiff_t>(half));
                epis.f.assign(all.f.begin() + static_cast<std::ptrdiff_t>(half), all.f.end());
                epis.delta_f.assign(all.delta_f.begin() + static_cast<std::ptrdiff_t>(half), all.delta_f.end());
              } else {
                GeneratorConfig g = config.generator;
                g.rng_seed = derive_seed(config.seed, "predictor-stream");
                pred = synthesize(g, config.predictor_stream_length);
                g.rng_seed = derive_seed(config.seed, "episode-stream");
                epis = synthesize(g, config.episode_stream_length);
              }
              const ClassThresholds ladder = fit_class_thresholds(pred, 5);
              write_series_binary(dir / "predictor_events.bin", pred);
              write_series_binary(dir / "episode_events.bin", epis);
              io::write_text(dir / "ladder.json", json(ladder).dump(2) + "\n");
            });
  StreamArtifacts streams;
  streams.predictor = read_series_binary(root / "stream" / "predictor_events.bin");
  streams.ladder = json::parse(io::read_text(root / "stream" / "ladder.json")).get<ClassThresholds>();
  if (!reached(Stage::kStats)) return run.summary();

  // -- stats -------------------------------------------------------------------
  run.stage("stream/stats", Stage::kStats, "-", key_of({{"stage", "stats"}, {"stream", stream_key}}),
            {"stats.json", "histogram.csv"}, [&](const fs::path& dir) {
              const StatsReport s = event_statistics(streams.predictor, streams.ladder);
              json j{{"length", s.length},
                     {"n_events", s.n_events},
                     {"zero_fraction", s.zero_fraction},
                     {"power_law_slope", s.slope ? json(*s.slope) : json(nullptr)},
                     {"fit_lo", s.fit_lo},
                     {"fit_hi", s.fit_hi},
                     {"class_fraction_all", s.class_fraction_all},
                     {"class_fraction_nonzero", s.class_fraction_nonzero},
                     {"anchor", streams.ladder.anchor()}};
              io::write_text(dir / "stats.json", j.dump(2) + "\n");
              std::string h = "lo,hi,count,density\n";
              for (const HistogramBin& b : s.histogram) {
                h += fmt(b.lo) + "," + fmt(b.hi) + "," + std::to_string(b.count) + "," + fmt(b.density) + "\n";
              }
              io::write_text(dir / "histogram.csv", h);
            });
  if (!reached(Stage::kBuildDataset)) return run.summary();

  // -- per-cell forecaster stages ----------------------------------------------
  std::vector<CellState> cells;
  for (const GridCell& c : config.cells()) {
    CellState cs;
    cs.cell = c;
    cs.name = c.name();
    cells.push_back(cs);
  }
  const std::size_t n = streams.predictor.size();
  const auto t_train_end = static_cast<std::size_t>(config.train_fraction * static_cast<double>(n));
  const auto t_valid_end =
      static_cast<std::size_t>((config.train_fraction + config.valid_fraction) * static_cast<double>(n));
  std::size_t max_tau = *std::max_element(config.taus.begin(), config.taus.end());

  const auto spec_of = [&](const GridCell& c) {
    TargetSpec spec;
    spec.kind = c.kind;
    spec.tau = c.tau;
    spec.n_classes = c.n_classes;
    spec.thresholds = ClassThresholds::from_anchor(streams.ladder.anchor(), c.n_classes);
    return spec;
  };
  // Gap between ranges so no sample window reaches into the previous range's targets.
  const auto range_gap = [&](const GridCell& c) { return config.n_past + c.tau; };

  parallel_for(cells.size(), workers, [&](std::size_t i) {
    CellState& cs = cells[i];
    const TargetSpec spec = spec_of(cs.cell);
    const fs::path cell_dir = fs::path("models") / cs.name;
    Stage current = Stage::kBuildDataset;
    try {
      cs.data_key = key_of({{"stage", "build-dataset"},
                            {"stream", stream_key},
                            {"cell", cs.name},
                            {"n_past", config.n_past},
                            {"train_fraction", config.train_fraction},
                            {"valid_fraction", config.valid_fraction},
                            {"max_train_per_class", config.max_train_per_class},
                            {"max_valid_per_class", config.max_valid_per_class},
                            {"seed", config.seed}});
      run.stage(cell_dir / "data", current, cs.name, cs.data_key, {"train.kcds", "valid.kcds", "counts.json"},
                [&](const fs::path& dir) {
                  const auto train_all = build_dataset(streams.predictor, spec, config.n_past, 0, t_train_end);
                  const auto valid_all = build_dataset(streams.predictor, spec, config.n_past,
                                                       t_train_end + range_gap(cs.cell), t_valid_end);
                  const auto train = rebalance(train_all, derive_seed(config.seed, cs.name + "/train"),
                                               config.max_train_per_class);
                  const auto valid = rebalance(valid_all, derive_seed(config.seed, cs.name + "/valid"),
                                               config.max_valid_per_class);
                  write_dataset(dir / "train.kcds", train);
                  write_dataset(dir / "valid.kcds", valid);
                  const json counts{{"train_natural", train_all.class_counts()},
                                    {"valid_natural", valid_all.class_counts()},
                                    {"train", train.class_counts()},
                                    {"valid", valid.class_counts()}};
                  io::write_text(dir / "counts.json", counts.dump(2) + "\n");
                });
      if (!reached(Stage::kTrainPredictor)) return;

      current = Stage::kTrainPredictor;
      ClassifierConfig pc = config.predictor;
      pc.seed = derive_seed(config.seed, cs.name + "/predictor");
      cs.model_key = key_of({{"stage", "train-predictor"}, {"data", cs.data_key}, {"predictor", pc}});
      run.stage(cell_dir / "model", current, cs.name, cs.model_key, {"model.kcpm", "curve.csv"},
                [&](const fs::path& dir) {
                  const auto train = read_dataset(root / cell_dir / "data" / "train.kcds");
                  const auto valid = read_dataset(root / cell_dir / "data" / "valid.kcds");
                  const auto model = train_classifier(train, valid, pc);
                  save_classifier(dir / "model.kcpm", *model);
                  write_training_curve_csv(dir / "curve.csv", model->curve);
                });
      if (!reached(Stage::kEvalPredictor)) return;

      current = Stage::kEvalPredictor;
      cs.eval_key = key_of({{"stage", "eval-predictor"}, {"model", cs.model_key}});
      run.stage(cell_dir / "eval", current, cs.name, cs.eval_key, {"metrics.csv"}, [&](const fs::path& dir) {
        const auto model = load_classifier(root / cell_dir / "model" / "model.kcpm");
        const auto test = build_dataset(streams.predictor, spec, config.n_past,
                                        t_valid_end + range_gap(cs.cell), n);
        const MetricsReport m = evaluate(*model, test);
        io::write_text(dir / "metrics.csv", metrics_csv_header() + "\n" + metrics_csv_row(spec, m) + "\n");
      });
      cs.evaluated = true;
    } catch (const Error& e) {
      cs.failed = true;
      run.fail(current, cs.name, e.what());
    }
  });
  if (!reached(Stage::kMakeEpisodes)) return run.summary();

  // -- episodes ------------------------------------------------------------------
  streams.episodes = read_series_binary(root / "stream" / "episode_events.bin");
  const json plan_json = json(config)["episodes"];
  const std::string windows_key = key_of({{"stage", "make-episodes"},
                                          {"stream", stream_key},
                                          {"plan", plan_json},
                                          {"n_past", config.n_past},
                                          {"max_tau", max_tau},
                                          {"seed", config.seed}});
  try {
    run.stage("episodes", Stage::kMakeEpisodes, "-", windows_key, {"windows.csv"}, [&](const fs::path& dir) {
      const std::size_t earliest = config.n_past + max_tau + config.episodes.history;
      const EpisodeSplit split = select_episode_windows(streams.episodes, streams.ladder, config.episodes,
                                                        earliest, derive_seed(config.seed, "episodes"));
      write_windows_csv(dir / "windows.csv", split, streams.episodes, streams.ladder);
    });
  } catch (const Error& e) {
    // Without episodes no policy can be trained; every cell fails from here on.
    run.fail(Stage::kMakeEpisodes, "-", e.what());
    return run.summary();
  }
  const auto windows = read_windows_csv(root / "episodes" / "windows.csv");
  const EpisodeSets bare = episodes_from_windows(windows, streams.episodes, streams.ladder);

  parallel_for(cells.size(), workers, [&](std::size_t i) {
    CellState& cs = cells[i];
    if (cs.failed) return;
    const TargetSpec spec = spec_of(cs.cell);
    const fs::path cell_dir = fs::path("models") / cs.name;
    try {
      cs.pred_key = key_of({{"stage", "predict-episodes"}, {"model", cs.model_key}, {"windows", windows_key}});
      run.stage(cell_dir / "episodes", Stage::kMakeEpisodes, cs.name, cs.pred_key, {"predictions.bin"},
                [&](const fs::path& dir) {
                  const auto model = load_classifier(root / cell_dir / "model" / "model.kcpm");
                  std::vector<Episode> all = all_episodes(bare);
                  for (Episode& ep : all) {
                    attach_predictions(ep, *model, streams.episodes, spec, config.n_past,
                                       config.episodes.history);
                  }
                  write_episode_predictions(dir / "predictions.bin", all);
                });
    } catch (const Error& e) {
      cs.failed = true;
      run.fail(Stage::kMakeEpisodes, cs.name, e.what());
    }
  });
  if (!reached(Stage::kTrainAgent)) return run.summary();

  // -- agents ----------------------------------------------------------------------
  const auto load_sets = [&](const std::string& cell) {
    std::vector<Episode> all = all_episodes(bare);
    if (cell == "perfect") {
      for (Episode& ep : all) {
        attach_perfect_predictions(ep, streams.episodes, streams.ladder, config.episodes.history);
      }
    } else {
      read_episode_predictions(root / "models" / cell / "episodes" / "predictions.bin", all);
    }
    return split_back(std::move(all), bare);
  };
  const std::string perfect_key = key_of({{"stage", "perfect-predictions"}, {"windows", windows_key}});

  std::vector<AgentJob> jobs;
  std::vector<std::string> job_cells;
  for (const CellState& cs : cells) job_cells.push_back(cs.name);
  if (config.perfect_control) job_cells.push_back("perfect");
  for (const std::string& cell : job_cells) {
    const std::vector<std::size_t> ks = cell == "perfect" ? std::vector<std::size_t>{1} : config.ks;
    for (std::size_t k : ks) {
      for (double mu : config.mus) {
        AgentJob job;
        job.cell = cell;
        job.k = k;
        job.mu = mu;
        job.dir = (fs::path("agents") / (cell + "_k" + std::to_string(k) + "_" + mu_tag(mu))).generic_string();
        jobs.push_back(job);
      }
    }
  }
  std::vector<std::size_t> cell_of_job(jobs.size());
  std::vector<std::string> distinct_cells = job_cells;
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    cell_of_job[j] = static_cast<std::size_t>(
        std::find(distinct_cells.begin(), distinct_cells.end(), jobs[j].cell) - distinct_cells.begin());
  }

  parallel_for(distinct_cells.size(), workers, [&](std::size_t ci) {
    const std::string& cell = distinct_cells[ci];
    const bool perfect = cell == "perfect";
    const CellState* cs = nullptr;
    for (const CellState& c : cells) {
      if (c.name == cell) cs = &c;
    }
    if (cs && cs->failed) {
      for (std::size_t j = 0; j < jobs.size(); ++j) {
        if (cell_of_job[j] == ci) jobs[j].failed = true;
      }
      return;
    }
    const std::string upstream = perfect ? perfect_key : cs->pred_key;
    std::optional<EpisodeSets> sets;
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      if (cell_of_job[j] != ci) continue;
      AgentJob& job = jobs[j];
      Stage current = Stage::kTrainAgent;
      try {
        AgentConfig ac = config.agent;
        ac.n_past_predictions = job.k;
        ac.seed = derive_seed(config.seed, job.dir);
        const CostModel cost = CostModel::standard(job.mu);
        job.key = key_of({{"stage", "train-agent"}, {"predictions", upstream}, {"agent", ac}, {"mu", job.mu}});
        run.stage(job.dir, current, job.dir, job.key,
                  {"policy.kcag", "training_log.csv", "validation_log.csv", "meta.json"},
                  [&](const fs::path& dir) {
                    if (!sets) sets = load_sets(cell);
                    const AgentTrainingResult res = train_agent(sets->train, sets->valid, cost, ac);
                    save_policy(dir / "policy.kcag", *res.policy);
                    write_agent_log_csv(dir / "training_log.csv", res.log);
                    write_validation_log_csv(dir / "validation_log.csv", res.validation);
                    io::write_text(dir / "meta.json",
                                   json{{"collapsed", res.collapsed}, {"k", job.k}, {"mu", job.mu}}.dump(2) + "\n");
                  });
        job.collapsed = json::parse(io::read_text(root / job.dir / "meta.json")).at("collapsed").get<bool>();
        if (!reached(Stage::kEvalPolicy)) continue;

        current = Stage::kEvalPolicy;
        const std::string eval_key = key_of({{"stage", "eval-policy"}, {"agent", job.key}});
        run.stage(fs::path(job.dir) / "eval", current, job.dir, eval_key, {"scores.csv"}, [&](const fs::path& dir) {
          if (!sets) sets = load_sets(cell);
          const auto policy = load_policy(root / job.dir / "policy.kcag");
          write_scores_csv(dir / "scores.csv", evaluate_policy(*policy, sets->test, cost));
        });
      } catch (const Error& e) {
        job.failed = true;
        run.fail(current, job.dir, e.what());
      }
    }
    if (!reached(Stage::kEvalPolicy) || perfect) return;
    // Naive baseline of this cell, one per mu.
    for (double mu : config.mus) {
      const std::string dir = (fs::path("baselines") / (cell + "_naive_" + mu_tag(mu))).generic_string();
      try {
        const std::string key = key_of({{"stage", "eval-policy"}, {"policy", "naive"}, {"predictions", upstream}, {"mu", mu}});
        run.stage(dir, Stage::kEvalPolicy, dir, key, {"scores.csv"}, [&](const fs::path& out) {
          if (!sets) sets = load_sets(cell);
          NaivePolicy naive(CostModel::standard(mu));
          write_scores_csv(out / "scores.csv", evaluate_policy(naive, sets->test, CostModel::standard(mu)));
        });
      } catch (const Error& e) {
        run.fail(Stage::kEvalPolicy, dir, e.what());
      }
    }
  });
  if (!reached(Stage::kEvalPolicy)) return run.summary();

  // Cell-independent baselines.
  for (double mu : config.mus) {
    const std::string dir = (fs::path("baselines") / ("reference_" + mu_tag(mu))).generic_string();
    const std::string key = key_of({{"stage", "eval-policy"}, {"policy", "reference"}, {"windows", windows_key}, {"mu", mu}});
    run.stage(dir, Stage::kEvalPolicy, dir, key, {"always_stay.csv", "always_leave.csv", "oracle.csv"},
              [&](const fs::path& out) {
                const CostModel cost = CostModel::standard(mu);
                AlwaysStayPolicy stay;
                AlwaysLeavePolicy leave;
                OraclePolicy oracle(cost);
                write_scores_csv(out / "always_stay.csv", evaluate_policy(stay, bare.test, cost));
                write_scores_csv(out / "always_leave.csv", evaluate_policy(leave, bare.test, cost));
                write_scores_csv(out / "oracle.csv", evaluate_policy(oracle, bare.test, cost));
              });
  }
  if (!reached(Stage::kReport)) return run.summary();

  // -- report ----------------------------------------------------------------------
  const fs::path report = root / "report";
  fs::create_directories(report);
  json sources = json::array();
  const auto add_source = [&](const fs::path& rel_dir) {
    sources.push_back(json{{"dir", rel_dir.generic_string()}, {"key", read_key(root / rel_dir)}});
  };
  add_source("stream");

  // metrics.csv: every cell, failed ones marked.
  {
    std::string text = "cell,status," + metrics_csv_header() + "\n";
    for (const CellState& cs : cells) {
      const fs::path rel = fs::path("models") / cs.name / "eval";
      if (cs.evaluated) {
        std::istringstream in(io::read_text(root / rel / "metrics.csv"));
        std::string header, row;
        std::getline(in, header);
        std::getline(in, row);
        text += cs.name + ",ok," + row + "\n";
        add_source(rel);
      } else {
        text += cs.name + ",failed," + to_string(cs.cell.kind) + "," + std::to_string(cs.cell.tau) + "," +
                std::to_string(cs.cell.n_classes);
        for (int i = 0; i < 13; ++i) text += ",NA";
        text += "\n";
      }
    }
    io::write_text(report / "metrics.csv", text);
  }

  std::vector<PolicyResult> results;
  std::string policy_text = "cell,policy,k,mu,status,n_episodes,eta,eta_se,kappa,kappa_se,r,r_se,collapsed\n";
  std::string points = "cell,policy,k,mu,episode,eta,kappa,r,damage_density\n";
  const auto add_result = [&](const std::string& cell, const std::string& policy, std::size_t k, double mu,
                              const fs::path& rel_dir, const std::string& file, bool collapsed) {
    PolicyResult r{cell, policy, k, mu, read_scores_csv(root / rel_dir / file)};
    const AggregateScore a = aggregate(r.scores);
    policy_text += cell + "," + policy + "," + std::to_string(k) + "," + fmt(mu) + ",ok," + std::to_string(a.n) +
                   "," + fmt(a.eta) + "," + fmt(a.eta_se) + "," + fmt(a.kappa) + "," + fmt(a.kappa_se) + "," +
                   fmt(a.reward_per_step) + "," + fmt(a.reward_se) + "," + (collapsed ? "1" : "0") + "\n";
    for (std::size_t e = 0; e < r.scores.size(); ++e) {
      const PolicyScore& s = r.scores[e];
      points += cell + "," + policy + "," + std::to_string(k) + "," + fmt(mu) + "," + std::to_string(e) + "," +
                fmt(s.eta) + "," + fmt(s.kappa) + "," + fmt(s.reward_per_step) + "," + fmt(s.damage_density) + "\n";
    }
    add_source(rel_dir);
    results.push_back(std::move(r));
  };
  for (double mu : config.mus) {
    const fs::path rel = fs::path("baselines") / ("reference_" + mu_tag(mu));
    add_result("-", "always_stay", 0, mu, rel, "always_stay.csv", false);
    add_result("-", "always_leave", 0, mu, rel, "always_leave.csv", false);
    add_result("-", "oracle", 0, mu, rel, "oracle.csv", false);
  }
  for (const CellState& cs : cells) {
    for (double mu : config.mus) {
      const fs::path rel = fs::path("baselines") / (cs.name + "_naive_" + mu_tag(mu));
      if (!cs.failed && fs::exists(root / rel / "scores.csv")) {
        add_result(cs.name, "naive", 1, mu, rel, "scores.csv", false);
      } else {
        policy_text += cs.name + ",naive,1," + fmt(mu) + ",failed,0,NA,NA,NA,NA,NA,NA,NA\n";
      }
    }
  }
  for (const AgentJob& job : jobs) {
    const std::string policy = "rl_k" + std::to_string(job.k);
    const fs::path rel = fs::path(job.dir) / "eval";
    if (!job.failed && fs::exists(root / rel / "scores.csv")) {
      add_result(job.cell, policy, job.k, job.mu, rel, "scores.csv", job.collapsed);
    } else {
      policy_text += job.cell + "," + policy + "," + std::to_string(job.k) + "," + fmt(job.mu) +
                     ",failed,0,NA,NA,NA,NA,NA,NA,NA\n";
    }
  }
  io::write_text(report / "policy_scores.csv", policy_text);
  io::write_text(report / "eta_kappa.csv", points);

  // Constant-reward geometry per mu from the test episodes' mean damage density.
  {
    std::string text = "mu,damage_density,c0,c1,c2\n";
    for (const PolicyResult& r : results) {
      if (r.policy != "always_stay") continue;
      double d = 0.0;
      for (const PolicyScore& s : r.scores) d += s.damage_density;
      d /= static_cast<double>(std::max<std::size_t>(1, r.scores.size()));
      const RewardLine line{-1.0 - d, 1.0, d, d};
      text += fmt(r.mu) + "," + fmt(d) + "," + fmt(line.c0) + "," + fmt(line.c1) + "," + fmt(line.c2) + "\n";
    }
    io::write_text(report / "reward_lines.csv", text);
  }

  if (results.empty()) throw ReportError("no successful policy evaluations to report");
  const auto ranking = report_rankings(results);
  {
    const auto opt = [](double x) { return std::isnan(x) ? std::string("NA") : fmt(x); };
    std::string text = "mu,rank,cell,policy,r,r_se,eta,kappa,naive_r,oracle_r,always_stay_r\n";
    for (const RankingRow& row : ranking) {
      text += fmt(row.mu) + "," + std::to_string(row.rank) + "," + row.cell + "," + row.policy + "," +
              fmt(row.score.reward_per_step) + "," + fmt(row.score.reward_se) + "," + fmt(row.score.eta) + "," +
              fmt(row.score.kappa) + "," + opt(row.naive_reward) + "," + opt(row.oracle_reward) + "," +
              opt(row.always_stay_reward) + "\n";
    }
    io::write_text(report / "rankings.csv", text);
  }

  {
    std::string text = "cell,stage,message\n";
    auto failures = run.summary().failures;
    std::sort(failures.begin(), failures.end(), [](const CellFailure& a, const CellFailure& b) {
      return std::tie(a.cell, a.stage) < std::tie(b.cell, b.stage);
    });
    for (const CellFailure& f : failures) {
      std::string msg = f.message;
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      text += f.cell + "," + f.stage + "," + msg + "\n";
    }
    io::write_text(report / "failures.csv", text);
  }

  // Scatter of per-policy means on the (eta, kappa) plane.
  {
    std::ostringstream svg;
    const double size = 520.0, pad = 50.0;
    const auto px = [&](double eta) { return pad + eta * (size - 2 * pad); };
    const auto py = [&](double kappa) { return size - pad - kappa * (size - 2 * pad); };
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size << "\">\n";
    svg << "<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << size - 2 * pad << "\" height=\""
        << size - 2 * pad << "\" fill=\"none\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << px(0) << "\" y1=\"" << py(1) << "\" x2=\"" << px(1) << "\" y2=\"" << py(0)
        << "\" stroke=\"gray\" stroke-dasharray=\"4\"/>\n";
    svg << "<text x=\"" << size / 2 << "\" y=\"" << size - 12 << "\" text-anchor=\"middle\">eta</text>\n";
    svg << "<text x=\"14\" y=\"" << size / 2 << "\">kappa</text>\n";
    for (const RankingRow& row : ranking) {
      svg << "<circle cx=\"" << fmt(px(row.score.eta)) << "\" cy=\"" << fmt(py(row.score.kappa))
          << "\" r=\"4\" fill=\"" << (row.policy.rfind("rl_", 0) == 0 ? "steelblue" : "firebrick") << "\">"
          << "<title>" << row.cell << " " << row.policy << " mu=" << fmt(row.mu) << " r=" << fmt(row.score.reward_per_step)
          << "</title></circle>\n";
    }
    svg << "</svg>\n";
    io::write_text(report / "eta_kappa.svg", svg.str());
  }

  json files = json::object();
  for (const char* name : {"metrics.csv", "policy_scores.csv", "eta_kappa.csv", "reward_lines.csv", "rankings.csv",
                           "failures.csv", "eta_kappa.svg"}) {
    files[name] = io::sha256_file(report / name);
  }
  const json manifest{{"config_hash", config_hash(config)}, {"seed", config.seed}, {"files", files}, {"sources", sources}};
  io::write_text(report / "manifest.json", manifest.dump(2) + "\n");
  run.note(Stage::kReport, "-", "run", 0.0);
  return run.summary();
}

std::vector<std::string> lint_provenance(const fs::path& output_dir) {
  std::vector<std::string> problems;
  const fs::path manifest_path = output_dir / "report" / "manifest.json";
  if (!fs::exists(manifest_path)) return {"missing report/manifest.json"};
  json manifest;
  try {
    manifest = json::parse(io::read_text(manifest_path));
  } catch (const std::exception& e) {
    return {std::string("unreadable manifest: ") + e.what()};
  }
  for (const auto& [name, sha] : manifest.at("files").items()) {
    const fs::path file = output_dir / "report" / name;
    if (!fs::exists(file)) problems.push_back("report file " + name + " is missing");
    else if (io::sha256_file(file) != sha.get<std::string>()) problems.push_back("report file " + name + " changed after stamping");
  }
  for (const auto& entry : fs::directory_iterator(output_dir / "report")) {
    const std::string name = entry.path().filename().string();
    if (name != "manifest.json" && !manifest.at("files").contains(name)) {
      problems.push_back("report file " + name + " is not listed in the manifest");
    }
  }
  std::set<std::string> stamped_dirs;
  for (const auto& src : manifest.at("sources")) {
    const std::string dir = src.at("dir").get<std::string>();
    const fs::path stamp = output_dir / dir / "stamp.json";
    if (!fs::exists(stamp)) {
      problems.push_back("source " + dir + " has no stamp");
      continue;
    }
    const json s = json::parse(io::read_text(stamp));
    if (s.at("key").get<std::string>() != src.at("key").get<std::string>()) {
      problems.push_back("source " + dir + " was re-stamped after the report");
    }
    for (const auto& [name, sha] : s.at("outputs").items()) {
      const fs::path file = output_dir / dir / name;
      if (!fs::exists(file) || io::sha256_file(file) != sha.get<std::string>()) {
        problems.push_back("artifact " + dir + "/" + name + " does not match its stamp");
      }
    }
    stamped_dirs.insert(dir);
  }
  // Intermediate artifacts not cited by the report must still match their stamps.
  for (const auto& entry : fs::recursive_directory_iterator(output_dir)) {
    if (entry.path().filename() != "stamp.json") continue;
    const fs::path dir = entry.path().parent_path();
    const std::string rel = fs::relative(dir, output_dir).generic_string();
    if (stamped_dirs.count(rel)) continue;
    try {
      const json s = json::parse(io::read_text(entry.path()));
      for (const auto& [name, sha] : s.at("outputs").items()) {
        if (!fs::exists(dir / name) || io::sha256_file(dir / name) != sha.get<std::string>()) {
          problems.push_back("artifact " + rel + "/" + name + " does not match its stamp");
        }
      }
    } catch (const std::exception& e) {
      problems.push_back("unreadable stamp in " + rel + ": " + e.what());
    }
  }
  // Every successful row of the tables must trace to a stamped source directory.
  const auto check_rows = [&](const std::string& file, auto&& dir_of) {
    std::istringstream in(io::read_text(output_dir / "report" / file));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::istringstream ls(line);
      std::string x;
      while (std::getline(ls, x, ',')) f.push_back(x);
      const std::optional<std::string> dir = dir_of(f);
      if (dir && !stamped_dirs.count(*dir)) problems.push_back(file + ": row '" + line.substr(0, 60) + "' has no stamped source");
    }
  };
  check_rows("metrics.csv", [](const std::vector<std::string>& f) -> std::optional<std::string> {
    if (f.size() < 2 || f[1] != "ok") return std::nullopt;
    return "models/" + f[0] + "/eval";
  });
  check_rows("policy_scores.csv", [](const std::vector<std::string>& f) -> std::optional<std::string> {
    if (f.size() < 5 || f[4] != "ok") return std::nullopt;
    const std::string mu = "mu" + f[3];
    if (f[0] == "-") return "baselines/reference_" + mu;
    if (f[1] == "naive") return "baselines/" + f[0] + "_naive_" + mu;
    return "agents/" + f[0] + "_k" + f[2] + "_" + mu + "/eval";
  });
  return problems;
}

}  // namespace knitcity
