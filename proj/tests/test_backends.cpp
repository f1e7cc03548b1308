#include "doctest.h"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <mutex>
#include <random>
#include <thread>

#include "httplib.h"
#include "scal/backends.hpp"
#include "scal/episode_io.hpp"

using namespace scal;
using namespace scal::backends;
using nlohmann::json;

namespace {

template <class Fn>
Errc code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return Errc::kInvalidArgument;
}

bayessim::ConceptModel small_model(std::uint64_t seed) {
  bayessim::SyntheticTaskConfig cfg;
  cfg.bias_strength = 0.6;
  cfg.seed = seed;
  return bayessim::generate_task(cfg);
}

LabelSpace pos_neg() { return LabelSpace::make({"negative", "positive"}, {"neg", "pos"}); }

// Minimal OpenAI-style completions server. Every scored position reports the
// same top list; the number of failures to inject before answering is configurable.
class MockServer {
 public:
  MockServer() {
    server_.Post("/v1/completions", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mutex_);
      ++requests_;
      bodies_.push_back(json::parse(req.body));
      auth_ = req.get_header_value("Authorization");
      if (failures_left_ > 0) {
        --failures_left_;
        res.status = fail_status_;
        res.set_content("{\"error\":\"busy\"}", "application/json");
        return;
      }
      const auto& body = bodies_.back();
      const auto prompt = body.at("prompt").get<std::string>();
      json top = json::object();
      for (const auto& [tok, p] : top_) top[tok] = std::log(p);
      json logprobs;
      if (body.value("echo", false)) {
        json offsets = json::array(), tops = json::array();
        offsets.push_back(0);
        tops.push_back(nullptr);
        for (std::size_t i = 0; i < prompt.size(); ++i) {
          if (prompt[i] == '>' && i + 1 < prompt.size()) {
            offsets.push_back(i + 1);
            tops.push_back(top);
          }
        }
        offsets.push_back(prompt.size());
        tops.push_back(top);
        logprobs = {{"text_offset", offsets}, {"top_logprobs", tops}};
      } else {
        logprobs = {{"text_offset", {prompt.size()}}, {"top_logprobs", {top}}};
      }
      res.set_content(json{{"choices", {{{"text", " pos"}, {"logprobs", logprobs}}}}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockServer() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  void fail_next(int n, int status) {
    std::lock_guard lock(mutex_);
    failures_left_ = n;
    fail_status_ = status;
  }
  void set_top(std::vector<std::pair<std::string, double>> top) {
    std::lock_guard lock(mutex_);
    top_ = std::move(top);
  }
  int requests() {
    std::lock_guard lock(mutex_);
    return requests_;
  }
  json last_body() {
    std::lock_guard lock(mutex_);
    return bodies_.back();
  }
  std::string auth() {
    std::lock_guard lock(mutex_);
    return auth_;
  }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::mutex mutex_;
  int requests_ = 0;
  int failures_left_ = 0;
  int fail_status_ = 500;
  std::vector<json> bodies_;
  std::string auth_;
  std::vector<std::pair<std::string, double>> top_ = {{" pos", 0.6}, {" neg", 0.3}, {" the", 0.1}};
};

HttpOptions options_for(const MockServer& server) {
  HttpOptions o;
  o.base_url = server.url();
  o.model = "mock-1";
  o.backoff = std::chrono::milliseconds(1);
  o.timeout = std::chrono::milliseconds(5000);
  return o;
}

const std::vector<Demonstration> kDemos{{"great film", 1}, {"dull plot", 0}};

}  // namespace

TEST_CASE("oracle backend equals simulate_episode") {
  const auto model = small_model(5);
  OracleBackend oracle(model);
  const auto labels = LabelSpace::generic(2);
  const std::vector<Demonstration> demos{{"input_3", 1}, {"input_7", 0}, {"input_3", 0}};
  const auto ep = oracle.fetch_episode(PromptTemplate{}, demos, "input_11", labels);
  const std::vector<bayessim::Observation> obs{{3, 1}, {7, 0}, {3, 0}};
  const auto ref = bayessim::simulate_episode(model, obs, 11, std::nullopt, labels, "");
  CHECK(ep.demo_dists == ref.demo_dists);
  CHECK(ep.query_dist == ref.query_dist);
  CHECK(ep.demos == demos);
  CHECK(oracle.fetch_query(PromptTemplate{}, demos, "input_11", labels) == ref.query_dist);

  // Content-free query sees the context's class prior.
  const auto prior = bayessim::class_prior(bayessim::posterior_after(model, obs), model);
  CHECK(oracle.fetch_query(PromptTemplate{}, demos, "N/A", labels) == prior);

  OracleBackend mapped(model, {{{"hello", 4}}, 2});
  CHECK(mapped.fetch_query(PromptTemplate{}, {}, "hello", labels) ==
        bayessim::predictive_prob(bayessim::BeliefState::from_prior(model), 4, model));
  CHECK(mapped.fetch_query(PromptTemplate{}, {}, "[MASK]", labels) ==
        bayessim::predictive_prob(bayessim::BeliefState::from_prior(model), 2, model));

  CHECK(code_of([&] { oracle.fetch_query(PromptTemplate{}, {}, "no such text", labels); }) == Errc::kBackendError);
  CHECK(code_of([&] { oracle.fetch_query(PromptTemplate{}, {}, "input_1", LabelSpace::generic(3)); }) ==
        Errc::kLabelSpaceMismatch);
}

TEST_CASE("recording, replay, and cache misses") {
  const auto model = small_model(6);
  OracleBackend oracle(model);
  RecordingBackend recorder(oracle);
  const auto labels = LabelSpace::generic(2);
  const std::vector<Demonstration> demos{{"input_1", 0}, {"input_2", 1}};
  const auto a = recorder.fetch_episode(PromptTemplate{}, demos, "input_5", labels);
  const auto b = recorder.fetch_query(PromptTemplate{}, demos, "", labels);
  recorder.fetch_episode(PromptTemplate{}, demos, "input_5", labels);
  const auto recorded = recorder.recorded();
  CHECK(recorded.size() == 2);

  const auto path = std::filesystem::temp_directory_path() / "scal_test_cache.jsonl";
  write_episodes(path, recorded);
  const std::vector<std::filesystem::path> paths{path};
  auto replay = ReplayBackend::from_files(paths);
  CHECK(replay.size() == 2);
  CHECK(replay.fetch_episode(PromptTemplate{}, demos, "input_5", labels) == a);
  CHECK(replay.fetch_query(PromptTemplate{}, demos, "", labels) == b);
  CHECK(code_of([&] { replay.fetch_query(PromptTemplate{}, demos, "input_6", labels); }) == Errc::kCacheMiss);
  const std::vector<Demonstration> relabeled{{"input_1", 1}, {"input_2", 1}};
  CHECK(code_of([&] { replay.fetch_query(PromptTemplate{}, relabeled, "input_5", labels); }) == Errc::kCacheMiss);
  std::filesystem::remove(path);
}

TEST_CASE("counting backend tallies logical calls and requests") {
  const auto model = small_model(7);
  OracleBackend oracle(model);
  CallCounter counter;
  CountingBackend test(oracle, counter, "test");
  CountingBackend aux(oracle, counter, "aux");
  const auto labels = LabelSpace::generic(2);
  const std::vector<Demonstration> demos{{"input_1", 0}};
  for (int i = 0; i < 4; ++i) test.fetch_episode(PromptTemplate{}, demos, "input_2", labels);
  for (int i = 0; i < 3; ++i) aux.fetch_query(PromptTemplate{}, demos, "N/A", labels);
  const auto snap = counter.snapshot();
  CHECK(snap.logical == 7);
  CHECK(snap.requests == 7);
  CHECK(snap.logical_by_tag.at("test") == 4);
  CHECK(snap.logical_by_tag.at("aux") == 3);

  CallCounter parallel;
  CountingBackend shared(oracle, parallel, "p");
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&] {
      for (int i = 0; i < 50; ++i) shared.fetch_query(PromptTemplate{}, demos, "input_3", labels);
    });
  }
  for (auto& t : threads) t.join();
  CHECK(parallel.logical() == 200);
}

TEST_CASE("restrict_to_labels") {
  const auto labels = pos_neg();
  const std::vector<std::pair<std::string, double>> top{
      {" pos", std::log(0.5)}, {"pos", std::log(0.1)}, {" neg", std::log(0.2)}, {" a", std::log(0.2)}};
  const auto r = restrict_to_labels(top, labels, false);
  CHECK_FALSE(r.floored);
  CHECK(r.dist[1] == doctest::Approx(0.6 / 0.8).epsilon(1e-12));

  const std::vector<std::pair<std::string, double>> partial{{" pos", std::log(0.7)}, {" a", std::log(0.1)}};
  const auto f = restrict_to_labels(partial, labels, false);
  CHECK(f.floored);
  CHECK(f.dist[0] == doctest::Approx(0.05 / 0.75).epsilon(1e-12));
  CHECK(code_of([&] { restrict_to_labels(partial, labels, true); }) == Errc::kMissingLabelToken);
}

TEST_CASE("http incremental fetch") {
  MockServer server;
  ::setenv("SCAL_TEST_KEY", "sk-test", 1);
  auto opts = options_for(server);
  opts.api_key_env = "SCAL_TEST_KEY";
  HttpBackend http(opts);
  CallCounter counter;
  CountingBackend counted(http, counter, "test");
  const auto labels = pos_neg();
  const auto ep = counted.fetch_episode(PromptTemplate{}, kDemos, "fine acting", labels);
  CHECK(server.requests() == 3);
  CHECK(counter.logical() == 1);
  CHECK(counter.requests() == 3);
  REQUIRE(ep.demo_dists.size() == 2);
  CHECK(ep.query_dist[1] == doctest::Approx(0.6 / 0.9).epsilon(1e-12));
  CHECK(ep.meta.at("floored") == false);
  CHECK(server.auth() == "Bearer sk-test");

  const auto body = server.last_body();
  CHECK(body.at("model") == "mock-1");
  CHECK(body.at("max_tokens") == 1);
  CHECK(body.at("logprobs") == 20);
  CHECK(body.at("temperature") == 0);
  CHECK_FALSE(body.contains("echo"));
  const auto prompt = assemble_prompt(PromptTemplate{}, kDemos, "fine acting", labels);
  CHECK(body.at("prompt") == prompt.text);

  counted.fetch_query(PromptTemplate{}, kDemos, "N/A", labels);
  CHECK(server.requests() == 4);
  CHECK(counter.requests() == 4);

  ::unsetenv("SCAL_TEST_KEY");
  CHECK(code_of([&] { HttpBackend missing(opts); }) == Errc::kConfigError);
}

TEST_CASE("http echo fetch") {
  MockServer server;
  auto opts = options_for(server);
  opts.strategy = FetchStrategy::kEcho;
  HttpBackend http(opts);
  const auto labels = pos_neg();
  const auto ep = http.fetch_episode(PromptTemplate{}, kDemos, "fine acting", labels);
  CHECK(server.requests() == 1);
  CHECK(server.last_body().at("echo") == true);
  REQUIRE(ep.demo_dists.size() == 2);
  CHECK(ep.demo_dists[0][1] == doctest::Approx(0.6 / 0.9).epsilon(1e-12));
  CHECK(http.requests_per_episode(2) == 1);
}

TEST_CASE("http retries and failures") {
  MockServer server;
  HttpBackend http(options_for(server));
  const auto labels = pos_neg();

  server.fail_next(2, 503);
  CHECK_NOTHROW(http.fetch_query(PromptTemplate{}, kDemos, "ok", labels));
  CHECK(server.requests() == 3);
  CHECK(http.retries() == 2);

  server.fail_next(3, 500);
  try {
    http.fetch_query(PromptTemplate{}, kDemos, "ok", labels);
    FAIL("expected BackendError");
  } catch (const BackendError& e) {
    CHECK(e.status() == 500);
    CHECK(e.is_backend_failure());
  }
  CHECK(server.requests() == 6);

  server.fail_next(1, 404);
  CHECK(code_of([&] { http.fetch_query(PromptTemplate{}, kDemos, "ok", labels); }) == Errc::kBackendError);
  CHECK(server.requests() == 7);

  server.set_top({{" pos", 0.8}, {" the", 0.1}});
  const auto floored = http.fetch_episode(PromptTemplate{}, kDemos, "ok", labels);
  CHECK(floored.meta.at("floored") == true);
  CHECK(floored.query_dist[0] == doctest::Approx(0.05 / 0.85).epsilon(1e-12));

  auto strict_opts = options_for(server);
  strict_opts.strict = true;
  HttpBackend strict(strict_opts);
  CHECK(code_of([&] { strict.fetch_query(PromptTemplate{}, kDemos, "ok", labels); }) == Errc::kMissingLabelToken);

  HttpOptions dead;
  dead.base_url = "http://127.0.0.1:1";
  dead.model = "m";
  dead.max_retries = 0;
  dead.timeout = std::chrono::milliseconds(500);
  HttpBackend down(dead);
  CHECK(code_of([&] { down.fetch_query(PromptTemplate{}, kDemos, "ok", labels); }) == Errc::kBackendError);
}

TEST_CASE("make_backend") {
  const auto model = small_model(9);
  const json spec = {{"kind", "oracle"}, {"model", bayessim::model_to_json(model)}};
  const auto backend = make_backend(spec);
  CHECK(backend->id() == "oracle");
  const json task = {{"kind", "oracle"}, {"task", {{"seed", 9}, {"bias_strength", 0.6}}}};
  CHECK(dynamic_cast<OracleBackend&>(*make_backend(task)).model().label_given == model.label_given);
  CHECK(code_of([] { make_backend({{"kind", "gpu"}}); }) == Errc::kConfigError);
  CHECK(code_of([] { make_backend({{"kind", "http"}}); }) == Errc::kConfigError);
}
