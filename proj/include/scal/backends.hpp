#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scal/bayessim.hpp"
#include "scal/core.hpp"

namespace scal::backends {

/// The three content-free query strings used by CC+.
inline const std::vector<std::string>& content_free_inputs() {
  static const std::vector<std::string> inputs = {"N/A", "", "[MASK]"};
  return inputs;
}

/// Anything that can report label-token distributions at delimiter positions.
/// Implementations must tolerate concurrent calls.
class LogprobBackend {
 public:
  virtual ~LogprobBackend() = default;

  virtual std::string id() const = 0;

  /// K+1 distributions: one before each demonstration label and one at the
  /// query. The returned episode has an empty id and no query label.
  virtual Episode fetch_episode(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                                const std::string& query_text, const LabelSpace& labels) = 0;

  /// Query-position distribution only.
  virtual LabelDistribution fetch_query(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                                        const std::string& query_text, const LabelSpace& labels) {
    return fetch_episode(tmpl, demos, query_text, labels).query_dist;
  }

  /// Physical requests issued by one fetch of each kind with K demonstrations.
  virtual std::size_t requests_per_episode(std::size_t num_demos) const = 0;
  virtual std::size_t requests_per_query(std::size_t num_demos) const = 0;
};

// ---------------------------------------------------------------------------

struct OracleOptions {
  /// Explicit text -> input index map, consulted before "input_<e>" parsing.
  std::map<std::string, std::size_t> text_map;
  /// Input index that content-free queries stand for. When unset they see the
  /// context's class prior, i.e. no input information at all.
  std::optional<std::size_t> neutral_input;
};

/// Exact-Bayes backend over a ConceptModel; fetch_episode equals simulate_episode.
class OracleBackend final : public LogprobBackend {
 public:
  explicit OracleBackend(bayessim::ConceptModel model, OracleOptions options = {});

  std::string id() const override { return "oracle"; }
  Episode fetch_episode(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                        const std::string& query_text, const LabelSpace& labels) override;
  LabelDistribution fetch_query(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                                const std::string& query_text, const LabelSpace& labels) override;
  std::size_t requests_per_episode(std::size_t) const override { return 1; }
  std::size_t requests_per_query(std::size_t) const override { return 1; }

  const bayessim::ConceptModel& model() const noexcept { return model_; }

  /// Maps labeled demonstrations to (input, label) observations.
  std::vector<bayessim::Observation> observations(std::span<const Demonstration> demos) const;

 private:
  std::optional<std::size_t> resolve(const std::string& text) const;

  bayessim::ConceptModel model_;
  OracleOptions options_;
};

// ---------------------------------------------------------------------------

/// Key identifying a fetch: demonstration texts and labels plus the query text.
std::string replay_key(std::span<const Demonstration> demos, const std::string& query_text);

/// Serves episodes from JSONL caches; never touches the network.
class ReplayBackend final : public LogprobBackend {
 public:
  explicit ReplayBackend(std::span<const Episode> episodes);
  static ReplayBackend from_files(std::span<const std::filesystem::path> paths);

  std::string id() const override { return "replay"; }
  Episode fetch_episode(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                        const std::string& query_text, const LabelSpace& labels) override;
  std::size_t requests_per_episode(std::size_t) const override { return 0; }
  std::size_t requests_per_query(std::size_t) const override { return 0; }

  std::size_t size() const noexcept { return cache_.size(); }

 private:
  std::map<std::string, Episode> cache_;
};

/// Remembers every fetch so it can be written out as a replay cache. Query-only
/// fetches are recorded as full episodes.
class RecordingBackend final : public LogprobBackend {
 public:
  explicit RecordingBackend(LogprobBackend& inner) : inner_(inner) {}

  std::string id() const override { return inner_.id(); }
  Episode fetch_episode(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                        const std::string& query_text, const LabelSpace& labels) override;
  LabelDistribution fetch_query(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                                const std::string& query_text, const LabelSpace& labels) override;
  std::size_t requests_per_episode(std::size_t k) const override { return inner_.requests_per_episode(k); }
  std::size_t requests_per_query(std::size_t k) const override { return inner_.requests_per_episode(k); }

  /// Recorded episodes sorted by replay key, duplicates dropped.
  std::vector<Episode> recorded() const;

 private:
  LogprobBackend& inner_;
  mutable std::mutex mutex_;
  std::map<std::string, Episode> seen_;
};

// ---------------------------------------------------------------------------

struct CallSnapshot {
  std::uint64_t logical = 0;
  std::uint64_t requests = 0;
  std::map<std::string, std::uint64_t> logical_by_tag;
};

/// Logical inferences (one per fetch, the Table-1 unit) and physical requests.
class CallCounter {
 public:
  void record(const std::string& tag, std::uint64_t requests);
  CallSnapshot snapshot() const;
  std::uint64_t logical() const noexcept { return logical_.load(); }
  std::uint64_t requests() const noexcept { return requests_.load(); }

 private:
  std::atomic<std::uint64_t> logical_{0};
  std::atomic<std::uint64_t> requests_{0};
  mutable std::mutex mutex_;
  std::map<std::string, std::uint64_t> by_tag_;
};

class CountingBackend final : public LogprobBackend {
 public:
  CountingBackend(LogprobBackend& inner, CallCounter& counter, std::string tag = "")
      : inner_(inner), counter_(counter), tag_(std::move(tag)) {}

  std::string id() const override { return inner_.id(); }
  Episode fetch_episode(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                        const std::string& query_text, const LabelSpace& labels) override;
  LabelDistribution fetch_query(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                                const std::string& query_text, const LabelSpace& labels) override;
  std::size_t requests_per_episode(std::size_t k) const override { return inner_.requests_per_episode(k); }
  std::size_t requests_per_query(std::size_t k) const override { return inner_.requests_per_query(k); }

 private:
  LogprobBackend& inner_;
  CallCounter& counter_;
  std::string tag_;
};

// ---------------------------------------------------------------------------

enum class FetchStrategy { kIncremental, kEcho };

struct HttpOptions {
  std::string base_url;
  std::string model;
  std::string api_key_env;  // empty: no Authorization header
  int top_logprobs = 20;
  FetchStrategy strategy = FetchStrategy::kIncremental;
  std::chrono::milliseconds timeout{60000};
  int max_retries = 2;
  std::chrono::milliseconds backoff{500};
  bool strict = false;
};

struct RestrictedDistribution {
  LabelDistribution dist;
  bool floored = false;
};

/// Sums returned mass per verbalizer token (tokens compared after trimming
/// leading whitespace) and renormalizes. A verbalizer token missing from the
/// list gets half the smallest returned probability, or MissingLabelToken when
/// strict.
RestrictedDistribution restrict_to_labels(const std::vector<std::pair<std::string, double>>& token_logprobs,
                                          const LabelSpace& labels, bool strict);

/// OpenAI-compatible completions client.
class HttpBackend final : public LogprobBackend {
 public:
  explicit HttpBackend(HttpOptions options);
  ~HttpBackend() override;

  std::string id() const override { return "http:" + options_.model; }
  Episode fetch_episode(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                        const std::string& query_text, const LabelSpace& labels) override;
  LabelDistribution fetch_query(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                                const std::string& query_text, const LabelSpace& labels) override;
  std::size_t requests_per_episode(std::size_t k) const override {
    return options_.strategy == FetchStrategy::kEcho ? 1 : k + 1;
  }
  std::size_t requests_per_query(std::size_t) const override { return 1; }

  /// Retries after 5xx or transport failures; exposed for tests.
  std::uint64_t retries() const noexcept { return retries_.load(); }

 private:
  nlohmann::json post(const nlohmann::json& body);
  RestrictedDistribution next_token(const std::string& prompt, const LabelSpace& labels);

  HttpOptions options_;
  std::string host_;
  std::string path_prefix_;
  std::string api_key_;
  std::atomic<std::uint64_t> retries_{0};
};

// ---------------------------------------------------------------------------

/// Builds a backend from its JSON spec:
///   {"kind":"oracle","model":<path or object>|"task":{...},"text_map":{...},"neutral_input":int}
///   {"kind":"replay","cache":[paths]}
///   {"kind":"http","base_url","model","api_key_env","top_logprobs","strategy","timeout_s","strict"}
/// Relative paths resolve against base_dir.
std::unique_ptr<LogprobBackend> make_backend(const nlohmann::json& spec, const std::filesystem::path& base_dir = {});

}  // namespace scal::backends
