#include "knitcity/series_io.hpp"

#include <charconv>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "knitcity/error.hpp"
#include "knitcity/io.hpp"

namespace knitcity {

namespace {

std::vector<std::string_view> split_row(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t begin = 0;
  for (;;) {
    const std::size_t comma = line.find(',', begin);
    fields.push_back(line.substr(begin, comma - begin));
    if (comma == std::string_view::npos) break;
    begin = comma + 1;
  }
  return fields;
}

double parse_number(std::string_view text, std::size_t line_no) {
  while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
  while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r')) {
    text.remove_suffix(1);
  }
  double value = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), value);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw DataError("line " + std::to_string(line_no) + ": cannot parse number '" +
                    std::string(text) + "'");
  }
  return value;
}

std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

// Reads the header and every data row, checking the column count.
std::vector<std::vector<double>> read_table(const std::filesystem::path& path,
                                            std::vector<std::string>& header,
                                            std::size_t min_columns, std::size_t max_columns) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": missing header line");
  header.clear();
  for (auto field : split_row(strip_cr(line))) header.emplace_back(field);
  if (header.size() < min_columns || header.size() > max_columns) {
    throw DataError(path.string() + ": unexpected column count in header");
  }
  std::vector<std::vector<double>> columns(header.size());
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto fields = split_row(line);
    if (fields.size() != header.size()) {
      throw DataError(path.string() + ": line " + std::to_string(line_no) +
                      " has the wrong number of columns");
    }
    for (std::size_t c = 0; c < fields.size(); ++c) {
      columns[c].push_back(parse_number(fields[c], line_no));
    }
  }
  return columns;
}

}  // namespace

void write_series_csv(const std::filesystem::path& path, const EventSeries& series) {
  series.validate();
  std::string text = "t,f,delta_f\n";
  text.reserve(series.size() * 32);
  for (std::size_t t = 0; t < series.size(); ++t) {
    text += std::to_string(t);
    text += ',';
    text += io::format_double(series.f[t]);
    text += ',';
    text += io::format_double(series.delta_f[t]);
    text += '\n';
  }
  io::write_text(path, text);
}

EventSeries read_series_csv(const std::filesystem::path& path) {
  std::vector<std::string> header;
  auto columns = read_table(path, header, 3, 3);
  if (header[0] != "t" || header[1] != "f" || header[2] != "delta_f") {
    throw DataError(path.string() + ": header must be t,f,delta_f");
  }
  for (std::size_t i = 0; i < columns[0].size(); ++i) {
    if (columns[0][i] != static_cast<double>(i)) {
      throw DataError(path.string() + ": time column must count 0, 1, 2, ...");
    }
  }
  EventSeries series{std::move(columns[1]), std::move(columns[2])};
  series.validate();
  return series;
}

namespace {
constexpr std::string_view kSeriesMagic = "KCEV";
constexpr std::uint32_t kSeriesVersion = 1;
}  // namespace

void write_series_binary(const std::filesystem::path& path, const EventSeries& series) {
  series.validate();
  io::BinaryWriter w(path);
  w.magic(kSeriesMagic);
  w.put<std::uint32_t>(kSeriesVersion);
  w.put_span<double>(series.f);
  w.put_span<double>(series.delta_f);
  w.close();
}

EventSeries read_series_binary(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic(kSeriesMagic);
  if (r.get<std::uint32_t>() != kSeriesVersion) {
    throw CheckpointError(path.string() + ": unsupported series version");
  }
  EventSeries series;
  series.f = r.get_vector<double>();
  series.delta_f = r.get_vector<double>();
  r.expect_end();
  try {
    series.validate();
  } catch (const DataError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  return series;
}

RawSeries read_recording_csv(const std::filesystem::path& path) {
  std::vector<std::string> header;
  auto columns = read_table(path, header, 2, 3);
  if (header[0] != "t" || header[1] != "force" || (header.size() == 3 && header[2] != "cycle")) {
    throw DataError(path.string() + ": header must be t,force[,cycle]");
  }
  RawSeries raw;
  raw.samples = std::move(columns[1]);
  if (columns[0].size() >= 2) raw.dt = columns[0][1] - columns[0][0];
  if (header.size() == 3) {
    for (std::size_t i = 1; i < columns[2].size(); ++i) {
      if (columns[2][i] != columns[2][i - 1]) raw.cycle_starts.push_back(i);
    }
  }
  raw.validate();
  return raw;
}

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = nlohmann::json{{"schema_version", GeneratorConfig::kSchemaVersion},
                     {"power_law_exponent", c.power_law_exponent},
                     {"cutoff_amplitude", c.cutoff_amplitude},
                     {"min_amplitude", c.min_amplitude},
                     {"zero_fraction_target", c.zero_fraction_target},
                     {"loading_rate", c.loading_rate},
                     {"activity_modulation", c.activity_modulation},
                     {"activity_timescale", c.activity_timescale},
                     {"recovery_factor", c.recovery_factor},
                     {"rng_seed", c.rng_seed}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  if (!j.is_object()) throw ConfigError("generator config must be a JSON object");
  if (j.contains("schema_version") &&
      j.at("schema_version").get<int>() != GeneratorConfig::kSchemaVersion) {
    throw ConfigError("unsupported generator schema_version");
  }
  GeneratorConfig out;
  for (const auto& [key, value] : j.items()) {
    if (key == "schema_version") continue;
    if (key == "power_law_exponent") out.power_law_exponent = value.get<double>();
    else if (key == "cutoff_amplitude") out.cutoff_amplitude = value.get<double>();
    else if (key == "min_amplitude") out.min_amplitude = value.get<double>();
    else if (key == "zero_fraction_target") out.zero_fraction_target = value.get<double>();
    else if (key == "loading_rate") out.loading_rate = value.get<double>();
    else if (key == "activity_modulation") out.activity_modulation = value.get<double>();
    else if (key == "activity_timescale") out.activity_timescale = value.get<double>();
    else if (key == "recovery_factor") out.recovery_factor = value.get<double>();
    else if (key == "rng_seed") out.rng_seed = value.get<std::uint64_t>();
    else throw ConfigError("unknown generator config key '" + key + "'");
  }
  out.validate();
  c = out;
}

void to_json(nlohmann::json& j, const ClassThresholds& t) {
  j = nlohmann::json{{"n_classes", t.n_classes}, {"bounds", t.bounds}};
}

void from_json(const nlohmann::json& j, ClassThresholds& t) {
  ClassThresholds out;
  out.n_classes = j.at("n_classes").get<int>();
  out.bounds = j.at("bounds").get<std::vector<double>>();
  out.validate();
  t = out;
}

GeneratorConfig read_generator_config(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(io::read_text(path)).get<GeneratorConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_generator_config(const std::filesystem::path& path, const GeneratorConfig& config) {
  io::write_text(path, nlohmann::json(config).dump(2) + "\n");
}

}  // namespace knitcity
