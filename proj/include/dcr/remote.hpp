#pragma once

#include <chrono>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>

#include "dcr/error.hpp"
#include "json.hpp"

namespace dcr {

// Where a remote service lives. Read from <PREFIX>_URL, <PREFIX>_MODEL and
// <PREFIX>_API_KEY when not given explicitly.
struct EndpointConfig {
  std::string url;
  std::string model;
  std::string api_key;
  double timeout_s = 60.0;

  bool configured() const { return !url.empty(); }
  static EndpointConfig from_env(const std::string& prefix);
  // Non-empty fields of `over` replace ours.
  EndpointConfig overlay(const EndpointConfig& over) const;
};

class JsonTransport {
 public:
  virtual ~JsonTransport() = default;
  // Throws TransportError (retryable or not) or FormatError for a non-JSON body.
  virtual nlohmann::json post(const nlohmann::json& body) = 0;
};

// POSTs JSON to the endpoint URL. 429 and 5xx are retryable, other 4xx are not.
class HttpJsonTransport final : public JsonTransport {
 public:
  explicit HttpJsonTransport(EndpointConfig endpoint);
  nlohmann::json post(const nlohmann::json& body) override;

 private:
  EndpointConfig endpoint_;
  std::string origin_;
  std::string path_;
};

struct RetryPolicy {
  std::size_t max_retries = 3;
  std::chrono::milliseconds initial_backoff{250};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{8000};
  std::function<void(std::chrono::milliseconds)> sleep;  // defaults to sleep_for

  std::chrono::milliseconds backoff(std::size_t retry_index) const;
};

// Runs fn, retrying retryable TransportErrors. on_retry gets the failed attempt's error.
nlohmann::json post_with_retries(JsonTransport& transport, const nlohmann::json& body,
                                 const RetryPolicy& policy, std::size_t* retries_out = nullptr,
                                 const std::function<void(const TransportError&)>& on_retry = {});

// Extracts choices[0].message.content from a chat-completions response.
std::string chat_message_content(const nlohmann::json& response);

}  // namespace dcr
