#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "knitcity/error.hpp"
#include "knitcity/io.hpp"
#include "knitcity/pipeline.hpp"
#include "knitcity/series_io.hpp"

using namespace knitcity;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet = false;
};

RunConfig load(const Common& c) {
  RunConfig config = c.config.empty() ? RunConfig{} : read_run_config(c.config);
  if (c.seed) config.seed = *c.seed;
  if (!c.out.empty()) config.output_dir = c.out;
  config.validate();
  return config;
}

int finish(const RunSummary& s) {
  std::cerr << "stages run " << s.stages_run << ", cached " << s.stages_cached << ", failed "
            << s.failures.size() << " (" << s.output_dir.string() << ")\n";
  for (const CellFailure& f : s.failures) {
    std::cerr << "  " << f.cell << " [" << f.stage << "]: " << f.message << "\n";
  }
  return s.failures.empty() ? 0 : static_cast<int>(ExitCode::kPartialGrid);
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "run configuration JSON (defaults when omitted)");
  sub->add_option("--seed", c.seed, "override the global seed");
  sub->add_option("--out", c.out, "override the output directory");
  sub->add_flag("-q,--quiet", c.quiet, "no per-stage log on stderr");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"knitcity: fabric-quake forecasting and evacuation pipeline"};
  app.require_subcommand(1);
  Common common;
  std::string ingest, export_csv, lint_dir;

  struct Sub {
    const char* name;
    Stage until;
    const char* help;
  };
  const Sub subs[] = {
      {"synthesize", Stage::kSynthesize, "generate (or ingest) the drop streams and fit the class ladder"},
      {"stats", Stage::kStats, "event statistics of the predictor stream"},
      {"build-dataset", Stage::kBuildDataset, "labeled, rebalanced train/valid sets per grid cell"},
      {"train-predictor", Stage::kTrainPredictor, "train one classifier per grid cell"},
      {"eval-predictor", Stage::kEvalPredictor, "test metrics per grid cell"},
      {"make-episodes", Stage::kMakeEpisodes, "select episode windows and attach forecasts"},
      {"train-agent", Stage::kTrainAgent, "train the distributional agents"},
      {"eval-policy", Stage::kEvalPolicy, "score agents and baselines on test episodes"},
      {"report", Stage::kReport, "assemble report tables"},
      {"run", Stage::kReport, "the whole pipeline (same as report)"},
  };
  std::vector<std::pair<CLI::App*, Stage>> stage_cmds;
  for (const Sub& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    add_common(sub, common);
    if (std::string(s.name) == "synthesize") {
      sub->add_option("--ingest", ingest, "recorded force CSV (t,force[,cycle]) to use instead of the generator")
          ->check(CLI::ExistingFile);
      sub->add_option("--export-csv", export_csv, "also write the predictor stream as t,f,delta_f CSV");
    }
    stage_cmds.emplace_back(sub, s.until);
  }
  CLI::App* lint = app.add_subcommand("lint", "check that every report row traces to a stamped artifact");
  lint->add_option("dir", lint_dir, "pipeline output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  try {
    if (lint->parsed()) {
      const auto problems = lint_provenance(lint_dir);
      for (const auto& p : problems) std::cout << p << "\n";
      std::cout << (problems.empty() ? "provenance clean\n" : "provenance problems found\n");
      return problems.empty() ? 0 : static_cast<int>(ExitCode::kData);
    }
    for (const auto& [sub, until] : stage_cmds) {
      if (!sub->parsed()) continue;
      const RunConfig config = load(common);
      RunOptions options;
      options.until = until;
      if (!ingest.empty()) options.ingest = ingest;
      if (!common.quiet) options.log = &std::cerr;
      const RunSummary summary = run_pipeline(config, options);
      if (!export_csv.empty()) {
        write_series_csv(export_csv, read_series_binary(config.output_dir / "stream" / "predictor_events.bin"));
      }
      if (until == Stage::kReport && std::filesystem::exists(config.output_dir / "report" / "rankings.csv")) {
        std::cout << io::read_text(config.output_dir / "report" / "rankings.csv");
      } else if (until == Stage::kStats) {
        std::cout << io::read_text(config.output_dir / "stream" / "stats" / "stats.json");
      }
      return finish(summary);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kData);
  }
  return 0;
}
