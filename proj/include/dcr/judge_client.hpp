#pragma once

#include <cstddef>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "dcr/metrics.hpp"
#include "dcr/remote.hpp"

namespace dcr {

inline constexpr const char* kRubricVersion = "compositional-fidelity/1";

// The five score levels, index 0 is score 1.
const std::vector<std::string>& rubric_levels();

struct JudgeRequest {
  std::string prompt_p;
  std::vector<std::string> factors;
  std::string attractor;
  std::vector<Frame> frames;
  std::string rubric_version = kRubricVersion;

  void validate() const;
};

struct JudgeVerdict {
  int score = 0;
  bool collapsed = false;
  std::string raw_response;
};

// Chat messages for the request. Pure function of the request.
nlohmann::json build_rubric_message(const JudgeRequest& req);

// Reads the last "score: N, collapsed: true|false" line of a judge answer.
JudgeVerdict parse_verdict(const std::string& raw);

struct JudgeClientConfig {
  EndpointConfig endpoint;  // model is sent as "model"
  RetryPolicy retry;
  std::string audit_log_path;  // empty disables the audit log
  std::size_t max_in_flight = 4;
  std::size_t frames_per_request = 8;
};

struct JudgeOutcome {
  std::optional<JudgeVerdict> verdict;
  std::string error;
  std::string raw_response;  // set when the judge answered but parsing failed
  std::size_t retries = 0;
};

class JudgeClient {
 public:
  JudgeClient(JudgeClientConfig cfg, std::shared_ptr<JsonTransport> transport);
  // Uses an HTTP transport to cfg.endpoint; throws ConfigError when unset.
  explicit JudgeClient(JudgeClientConfig cfg);

  JudgeVerdict judge(const JudgeRequest& req);
  // Results are in request order; at most cfg.max_in_flight requests run at once.
  std::vector<JudgeOutcome> judge_batch(const std::vector<JudgeRequest>& reqs);

  std::size_t last_retry_count() const { return last_retries_; }
  std::size_t total_retries() const { return total_retries_; }

 private:
  JudgeVerdict judge_counted(const JudgeRequest& req, std::size_t* retries);
  void audit(const nlohmann::json& request, const nlohmann::json* response,
             const std::string& error, std::size_t attempt);

  JudgeClientConfig cfg_;
  std::shared_ptr<JsonTransport> transport_;
  std::mutex audit_mutex_;
  std::mutex stats_mutex_;
  std::size_t last_retries_ = 0;
  std::size_t total_retries_ = 0;
};

}  // namespace dcr
