#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scal/core.hpp"

namespace scal {

/// One Episode JSONL record:
/// {"id","labels","verbalizer","demos":[{"text","label"}],"query":{"text","label"|null},
///  "demo_dists","query_dist","meta"}
nlohmann::json episode_to_json(const Episode& episode);
Episode episode_from_json(const nlohmann::json& record);

/// Lossless JSONL writer; doubles use the shortest round-trip representation.
void write_episodes(const std::filesystem::path& path, std::span<const Episode> episodes);

/// Throws IoError when the file cannot be opened and ParseError(line) on the
/// first malformed record. Blank lines are skipped.
std::vector<Episode> read_episodes(const std::filesystem::path& path);

/// Generic JSONL helpers shared by dataset, embedding, and cache readers.
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& contents);
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace scal
