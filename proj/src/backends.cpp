#include "scal/backends.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <thread>

#include "httplib.h"
#include "scal/episode_io.hpp"

namespace scal::backends {

using nlohmann::json;

namespace {

bool is_content_free(const std::string& text) {
  const auto& cf = content_free_inputs();
  return std::find(cf.begin(), cf.end(), text) != cf.end();
}

std::string_view ltrim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\n' || s.front() == '\r')) {
    s.remove_prefix(1);
  }
  return s;
}

std::string excerpt(const std::string& body) { return body.size() <= 200 ? body : body.substr(0, 200) + "..."; }

// Accepts {"tok": lp, ...} or [{"token": "tok", "logprob": lp}, ...].
std::vector<std::pair<std::string, double>> token_list(const json& top) {
  std::vector<std::pair<std::string, double>> out;
  if (top.is_object()) {
    for (const auto& [tok, lp] : top.items()) out.emplace_back(tok, lp.get<double>());
  } else if (top.is_array()) {
    for (const auto& entry : top) out.emplace_back(entry.at("token").get<std::string>(), entry.at("logprob").get<double>());
  } else {
    throw BackendError(200, "top_logprobs entry is neither an object nor a list");
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Oracle

OracleBackend::OracleBackend(bayessim::ConceptModel model, OracleOptions options)
    : model_(std::move(model)), options_(std::move(options)) {
  model_.validate();
  for (const auto& [text, e] : options_.text_map) {
    if (e >= model_.num_inputs) throw Error(Errc::kConfigError, "oracle text_map entry '" + text + "' out of range");
  }
  if (options_.neutral_input && *options_.neutral_input >= model_.num_inputs) {
    throw Error(Errc::kConfigError, "oracle neutral_input out of range");
  }
}

std::optional<std::size_t> OracleBackend::resolve(const std::string& text) const {
  if (auto it = options_.text_map.find(text); it != options_.text_map.end()) return it->second;
  if (auto e = bayessim::parse_input_text(text); e && *e < model_.num_inputs) return e;
  if (is_content_free(text)) return options_.neutral_input;
  throw BackendError(400, "oracle cannot map input text '" + excerpt(text) + "'");
}

std::vector<bayessim::Observation> OracleBackend::observations(std::span<const Demonstration> demos) const {
  std::vector<bayessim::Observation> obs;
  for (const auto& d : demos) {
    const auto e = resolve(d.text);
    if (!e) throw BackendError(400, "oracle: content-free text used as a demonstration");
    if (!d.label || *d.label >= model_.num_classes) throw Error(Errc::kInvalidArgument, "demonstration label missing");
    obs.push_back({*e, *d.label});
  }
  return obs;
}

Episode OracleBackend::fetch_episode(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                                     const std::string& query_text, const LabelSpace& labels) {
  tmpl.validate();
  if (labels.size() != model_.num_classes) throw Error(Errc::kLabelSpaceMismatch, "label space size != model C");
  const auto obs = observations(demos);
  const auto query = resolve(query_text);
  auto episode = bayessim::simulate_episode(model_, obs, query.value_or(0), std::nullopt, labels, "");
  if (!query) episode.query_dist = bayessim::class_prior(bayessim::posterior_after(model_, obs), model_);
  episode.demos.assign(demos.begin(), demos.end());
  episode.query = {query_text, std::nullopt};
  return episode;
}

LabelDistribution OracleBackend::fetch_query(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                                             const std::string& query_text, const LabelSpace& labels) {
  tmpl.validate();
  if (labels.size() != model_.num_classes) throw Error(Errc::kLabelSpaceMismatch, "label space size != model C");
  const auto belief = bayessim::posterior_after(model_, observations(demos));
  const auto query = resolve(query_text);
  return query ? bayessim::predictive_prob(belief, *query, model_) : bayessim::class_prior(belief, model_);
}

// ---------------------------------------------------------------------------
// Replay and recording

std::string replay_key(std::span<const Demonstration> demos, const std::string& query_text) {
  json key = json::array();
  for (const auto& d : demos) key.push_back({d.text, d.label ? json(*d.label) : json(nullptr)});
  key.push_back(query_text);
  return key.dump();
}

ReplayBackend::ReplayBackend(std::span<const Episode> episodes) {
  for (const auto& ep : episodes) cache_.emplace(replay_key(ep.demos, ep.query.text), ep);
}

ReplayBackend ReplayBackend::from_files(std::span<const std::filesystem::path> paths) {
  std::vector<Episode> all;
  for (const auto& p : paths) {
    auto eps = read_episodes(p);
    all.insert(all.end(), std::make_move_iterator(eps.begin()), std::make_move_iterator(eps.end()));
  }
  return ReplayBackend(all);
}

Episode ReplayBackend::fetch_episode(const PromptTemplate&, std::span<const Demonstration> demos,
                                     const std::string& query_text, const LabelSpace& labels) {
  const auto it = cache_.find(replay_key(demos, query_text));
  if (it == cache_.end()) {
    throw Error(Errc::kCacheMiss, "no cached episode for query '" + excerpt(query_text) + "' with " +
                                      std::to_string(demos.size()) + " demonstrations");
  }
  if (!(it->second.labels == labels)) throw Error(Errc::kLabelSpaceMismatch, "cached episode uses another label space");
  return it->second;
}

Episode RecordingBackend::fetch_episode(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                                        const std::string& query_text, const LabelSpace& labels) {
  auto episode = inner_.fetch_episode(tmpl, demos, query_text, labels);
  std::lock_guard lock(mutex_);
  seen_.emplace(replay_key(demos, query_text), episode);
  return episode;
}

LabelDistribution RecordingBackend::fetch_query(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                                                const std::string& query_text, const LabelSpace& labels) {
  return fetch_episode(tmpl, demos, query_text, labels).query_dist;
}

std::vector<Episode> RecordingBackend::recorded() const {
  std::lock_guard lock(mutex_);
  std::vector<Episode> out;
  for (const auto& [key, ep] : seen_) {
    out.push_back(ep);
    out.back().query.label.reset();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Counting

void CallCounter::record(const std::string& tag, std::uint64_t requests) {
  logical_.fetch_add(1);
  requests_.fetch_add(requests);
  std::lock_guard lock(mutex_);
  ++by_tag_[tag];
}

CallSnapshot CallCounter::snapshot() const {
  std::lock_guard lock(mutex_);
  return {logical_.load(), requests_.load(), by_tag_};
}

Episode CountingBackend::fetch_episode(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                                       const std::string& query_text, const LabelSpace& labels) {
  auto episode = inner_.fetch_episode(tmpl, demos, query_text, labels);
  counter_.record(tag_, inner_.requests_per_episode(demos.size()));
  return episode;
}

LabelDistribution CountingBackend::fetch_query(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                                               const std::string& query_text, const LabelSpace& labels) {
  auto dist = inner_.fetch_query(tmpl, demos, query_text, labels);
  counter_.record(tag_, inner_.requests_per_query(demos.size()));
  return dist;
}

// ---------------------------------------------------------------------------
// HTTP

RestrictedDistribution restrict_to_labels(const std::vector<std::pair<std::string, double>>& token_logprobs,
                                          const LabelSpace& labels, bool strict) {
  const auto& verbalizer = labels.verbalizer();
  std::vector<double> mass(labels.size(), 0.0);
  std::vector<bool> found(labels.size(), false);
  double smallest = INFINITY;
  for (const auto& [token, logprob] : token_logprobs) {
    const double p = std::exp(logprob);
    smallest = std::min(smallest, p);
    const auto trimmed = ltrim(token);
    for (std::size_t c = 0; c < verbalizer.size(); ++c) {
      if (trimmed == ltrim(verbalizer[c])) {
        mass[c] += p;
        found[c] = true;
      }
    }
  }
  RestrictedDistribution out{LabelDistribution::from_probs(std::vector<double>(labels.size(), 1.0 / labels.size()))};
  for (std::size_t c = 0; c < labels.size(); ++c) {
    if (found[c]) continue;
    if (strict || !std::isfinite(smallest)) {
      throw Error(Errc::kMissingLabelToken, "label token '" + verbalizer[c] + "' not among returned top logprobs");
    }
    mass[c] = 0.5 * smallest;
    out.floored = true;
  }
  out.dist = normalize_over_labels(mass);
  return out;
}

HttpBackend::HttpBackend(HttpOptions options) : options_(std::move(options)) {
  if (options_.base_url.empty()) throw Error(Errc::kConfigError, "http backend needs base_url");
  if (options_.model.empty()) throw Error(Errc::kConfigError, "http backend needs a model name");
  if (options_.top_logprobs < 1) throw Error(Errc::kConfigError, "top_logprobs must be >= 1");
  std::string url = options_.base_url;
  while (!url.empty() && url.back() == '/') url.pop_back();
  const auto scheme = url.find("://");
  const auto slash = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  host_ = url.substr(0, slash);
  path_prefix_ = slash == std::string::npos ? "" : url.substr(slash);
  if (!options_.api_key_env.empty()) {
    const char* key = std::getenv(options_.api_key_env.c_str());
    if (key == nullptr) throw Error(Errc::kConfigError, "environment variable " + options_.api_key_env + " is not set");
    api_key_ = key;
  }
}

HttpBackend::~HttpBackend() = default;

json HttpBackend::post(const json& body) {
  httplib::Client client(host_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(options_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(options_.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

  const auto payload = body.dump();
  for (int attempt = 0;; ++attempt) {
    auto res = client.Post(path_prefix_ + "/v1/completions", headers, payload, "application/json");
    const bool transient = !res || res->status >= 500;
    if (transient && attempt < options_.max_retries) {
      retries_.fetch_add(1);
      std::this_thread::sleep_for(options_.backoff * (1 << attempt));
      continue;
    }
    if (!res) throw BackendError(0, "transport error: " + httplib::to_string(res.error()));
    if (res->status != 200) throw BackendError(res->status, excerpt(res->body));
    try {
      return json::parse(res->body);
    } catch (const json::exception&) {
      throw BackendError(res->status, "malformed JSON body: " + excerpt(res->body));
    }
  }
}

RestrictedDistribution HttpBackend::next_token(const std::string& prompt, const LabelSpace& labels) {
  const json body = {{"model", options_.model},
                     {"prompt", prompt},
                     {"max_tokens", 1},
                     {"logprobs", options_.top_logprobs},
                     {"temperature", 0}};
  const auto doc = post(body);
  try {
    const auto& top = doc.at("choices").at(0).at("logprobs").at("top_logprobs").at(0);
    return restrict_to_labels(token_list(top), labels, options_.strict);
  } catch (const json::exception& e) {
    throw BackendError(200, std::string("unexpected completions payload: ") + e.what());
  }
}

Episode HttpBackend::fetch_episode(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                                   const std::string& query_text, const LabelSpace& labels) {
  const auto prompt = assemble_prompt(tmpl, demos, query_text, labels);
  std::vector<RestrictedDistribution> dists;
  if (options_.strategy == FetchStrategy::kIncremental) {
    for (const auto cut : prompt.cut_points) dists.push_back(next_token(prompt.text.substr(0, cut), labels));
  } else {
    json body = {{"model", options_.model},      {"prompt", prompt.text}, {"max_tokens", 1},
                 {"logprobs", options_.top_logprobs}, {"temperature", 0},   {"echo", true}};
    const auto doc = post(body);
    try {
      const auto& lp = doc.at("choices").at(0).at("logprobs");
      const auto offsets = lp.at("text_offset").get<std::vector<std::size_t>>();
      const auto& tops = lp.at("top_logprobs");
      for (const auto cut : prompt.cut_points) {
        const auto it = std::find(offsets.begin(), offsets.end(), cut);
        if (it == offsets.end() || tops.at(it - offsets.begin()).is_null()) {
          throw BackendError(200, "echo: no scored token starts at offset " + std::to_string(cut));
        }
        dists.push_back(restrict_to_labels(token_list(tops.at(it - offsets.begin())), labels, options_.strict));
      }
    } catch (const json::exception& e) {
      throw BackendError(200, std::string("unexpected echo payload: ") + e.what());
    }
  }

  Episode episode;
  episode.labels = labels;
  episode.demos.assign(demos.begin(), demos.end());
  episode.query = {query_text, std::nullopt};
  bool floored = false;
  for (std::size_t j = 0; j < dists.size(); ++j) {
    floored = floored || dists[j].floored;
    if (j + 1 < dists.size()) {
      episode.demo_dists.push_back(dists[j].dist);
    } else {
      episode.query_dist = dists[j].dist;
    }
  }
  episode.meta = {{"backend", id()}, {"floored", floored}};
  return episode;
}

LabelDistribution HttpBackend::fetch_query(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                                           const std::string& query_text, const LabelSpace& labels) {
  const auto prompt = assemble_prompt(tmpl, demos, query_text, labels);
  return next_token(prompt.text, labels).dist;
}

// ---------------------------------------------------------------------------
// Factory

std::unique_ptr<LogprobBackend> make_backend(const json& spec, const std::filesystem::path& base_dir) {
  auto resolve_path = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };
  try {
    const auto kind = spec.at("kind").get<std::string>();
    if (kind == "oracle") {
      bayessim::ConceptModel model;
      if (spec.contains("model")) {
        const auto& m = spec.at("model");
        model = bayessim::model_from_json(m.is_string() ? read_json_file(resolve_path(m.get<std::string>())) : m);
      } else if (spec.contains("task")) {
        model = bayessim::generate_task(bayessim::task_config_from_json(spec.at("task")));
      } else {
        throw Error(Errc::kConfigError, "oracle backend needs \"model\" or \"task\"");
      }
      OracleOptions options;
      if (spec.contains("text_map")) options.text_map = spec.at("text_map").get<std::map<std::string, std::size_t>>();
      if (spec.contains("neutral_input") && !spec.at("neutral_input").is_null()) {
        options.neutral_input = spec.at("neutral_input").get<std::size_t>();
      }
      return std::make_unique<OracleBackend>(std::move(model), std::move(options));
    }
    if (kind == "replay") {
      std::vector<std::filesystem::path> paths;
      const auto& cache = spec.at("cache");
      if (cache.is_string()) {
        paths.push_back(resolve_path(cache.get<std::string>()));
      } else {
        for (const auto& p : cache) paths.push_back(resolve_path(p.get<std::string>()));
      }
      return std::make_unique<ReplayBackend>(ReplayBackend::from_files(paths));
    }
    if (kind == "http") {
      HttpOptions o;
      o.base_url = spec.at("base_url").get<std::string>();
      o.model = spec.at("model").get<std::string>();
      o.api_key_env = spec.value("api_key_env", std::string());
      o.top_logprobs = spec.value("top_logprobs", o.top_logprobs);
      const auto strategy = spec.value("strategy", std::string("incremental"));
      if (strategy == "echo") {
        o.strategy = FetchStrategy::kEcho;
      } else if (strategy != "incremental") {
        throw Error(Errc::kConfigError, "http strategy must be incremental or echo");
      }
      o.timeout = std::chrono::milliseconds(static_cast<long>(1000.0 * spec.value("timeout_s", 60.0)));
      o.max_retries = spec.value("max_retries", o.max_retries);
      o.strict = spec.value("strict", false);
      return std::make_unique<HttpBackend>(std::move(o));
    }
    throw Error(Errc::kConfigError, "unknown backend kind '" + kind + "'");
  } catch (const json::exception& e) {
    throw Error(Errc::kConfigError, std::string("backend spec: ") + e.what());
  }
}

}  // namespace scal::backends
