#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "knitcity/signal.hpp"

namespace knitcity {

/// Columnar text: header `t,f,delta_f`, one row per step.
void write_series_csv(const std::filesystem::path& path, const EventSeries& series);
EventSeries read_series_csv(const std::filesystem::path& path);

/// Compact binary form of an event series ("KCEV", version, length, f, delta_f).
void write_series_binary(const std::filesystem::path& path, const EventSeries& series);
EventSeries read_series_binary(const std::filesystem::path& path);

/// Recorded force: header `t,force` with an optional third `cycle` column;
/// a new load cycle starts wherever the cycle id changes.
RawSeries read_recording_csv(const std::filesystem::path& path);

void to_json(nlohmann::json& j, const GeneratorConfig& config);
void from_json(const nlohmann::json& j, GeneratorConfig& config);
void to_json(nlohmann::json& j, const ClassThresholds& thresholds);
void from_json(const nlohmann::json& j, ClassThresholds& thresholds);

/// JSON object with a `schema_version` field; unknown keys are rejected.
GeneratorConfig read_generator_config(const std::filesystem::path& path);
void write_generator_config(const std::filesystem::path& path, const GeneratorConfig& config);

}  // namespace knitcity
