#include "scal/episode_io.hpp"

#include <fstream>
#include <sstream>

namespace scal {

using nlohmann::json;

namespace {

json demo_to_json(const Demonstration& demo) {
  json out = {{"text", demo.text}};
  out["label"] = demo.label ? json(*demo.label) : json(nullptr);
  return out;
}

Demonstration demo_from_json(const json& j) {
  Demonstration demo;
  demo.text = j.at("text").get<std::string>();
  if (j.contains("label") && !j.at("label").is_null()) demo.label = j.at("label").get<LabelIndex>();
  return demo;
}

}  // namespace

json episode_to_json(const Episode& episode) {
  json demos = json::array();
  for (const auto& d : episode.demos) demos.push_back(demo_to_json(d));
  json dists = json::array();
  for (const auto& d : episode.demo_dists) dists.push_back(d.probs());
  return {
      {"id", episode.id},
      {"labels", episode.labels.labels()},
      {"verbalizer", episode.labels.verbalizer()},
      {"demos", std::move(demos)},
      {"query", demo_to_json(episode.query)},
      {"demo_dists", std::move(dists)},
      {"query_dist", episode.query_dist.probs()},
      {"meta", episode.meta},
  };
}

Episode episode_from_json(const json& record) {
  Episode episode;
  episode.id = record.at("id").get<std::string>();
  episode.labels = LabelSpace::make(record.at("labels").get<std::vector<std::string>>(),
                                    record.at("verbalizer").get<std::vector<std::string>>());
  for (const auto& d : record.at("demos")) episode.demos.push_back(demo_from_json(d));
  episode.query = demo_from_json(record.at("query"));
  for (const auto& d : record.at("demo_dists")) {
    episode.demo_dists.push_back(LabelDistribution::from_probs(d.get<std::vector<double>>()));
  }
  episode.query_dist = LabelDistribution::from_probs(record.at("query_dist").get<std::vector<double>>());
  if (record.contains("meta")) episode.meta = record.at("meta");
  episode.validate();
  return episode;
}

void write_episodes(const std::filesystem::path& path, std::span<const Episode> episodes) {
  std::ostringstream out;
  for (const auto& e : episodes) out << episode_to_json(e).dump() << '\n';
  write_text_file(path, out.str());
}

std::vector<json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIoError, "cannot open " + path.string());
  std::vector<json> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw ParseError(line_no, path.string() + ": " + e.what());
    }
  }
  return records;
}

std::vector<Episode> read_episodes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIoError, "cannot open " + path.string());
  std::vector<Episode> episodes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      episodes.push_back(episode_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ParseError(line_no, path.string() + ": " + e.what());
    } catch (const ParseError&) {
      throw;
    } catch (const Error& e) {
      throw ParseError(line_no, path.string() + ": " + e.what());
    }
  }
  return episodes;
}

void write_text_file(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::kIoError, "cannot write " + path.string());
  out << contents;
  if (!out) throw Error(Errc::kIoError, "write failed for " + path.string());
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIoError, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(Errc::kParseError, path.string() + ": " + e.what());
  }
}

}  // namespace scal
