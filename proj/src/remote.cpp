#include "dcr/remote.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <thread>

#include "httplib.h"

namespace dcr {

EndpointConfig EndpointConfig::from_env(const std::string& prefix) {
  auto get = [&](const char* suffix) {
    const char* v = std::getenv((prefix + suffix).c_str());
    return v ? std::string(v) : std::string();
  };
  EndpointConfig c;
  c.url = get("_URL");
  c.model = get("_MODEL");
  c.api_key = get("_API_KEY");
  return c;
}

EndpointConfig EndpointConfig::overlay(const EndpointConfig& over) const {
  EndpointConfig c = *this;
  if (!over.url.empty()) c.url = over.url;
  if (!over.model.empty()) c.model = over.model;
  if (!over.api_key.empty()) c.api_key = over.api_key;
  return c;
}

HttpJsonTransport::HttpJsonTransport(EndpointConfig endpoint) : endpoint_(std::move(endpoint)) {
  if (!endpoint_.configured()) throw ConfigError("endpoint URL is not configured");
  const auto& url = endpoint_.url;
  auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ConfigError("endpoint URL needs a scheme: " + url);
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  if (url.rfind("https://", 0) == 0)
    throw ConfigError("https endpoint requested but this build has no TLS support");
#endif
  auto slash = url.find('/', scheme + 3);
  origin_ = url.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : url.substr(slash);
}

nlohmann::json HttpJsonTransport::post(const nlohmann::json& body) {
  httplib::Client client(origin_);
  auto secs = std::chrono::duration<double>(endpoint_.timeout_s);
  auto timeout = std::chrono::duration_cast<std::chrono::milliseconds>(secs);
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  httplib::Headers headers;
  if (!endpoint_.api_key.empty()) headers.emplace("Authorization", "Bearer " + endpoint_.api_key);

  auto res = client.Post(path_, headers, body.dump(), "application/json");
  if (!res)
    throw TransportError("request to " + endpoint_.url + " failed: " + httplib::to_string(res.error()),
                         true);
  if (res->status == 429 || res->status >= 500)
    throw TransportError("HTTP " + std::to_string(res->status) + " from " + endpoint_.url, true);
  if (res->status < 200 || res->status >= 300)
    throw TransportError("HTTP " + std::to_string(res->status) + " from " + endpoint_.url + ": " +
                             res->body.substr(0, 200),
                         false);
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::parse_error&) {
    throw FormatError("non-JSON response from " + endpoint_.url);
  }
}

std::chrono::milliseconds RetryPolicy::backoff(std::size_t retry_index) const {
  double ms = static_cast<double>(initial_backoff.count()) *
              std::pow(multiplier, static_cast<double>(retry_index));
  ms = std::min(ms, static_cast<double>(max_backoff.count()));
  return std::chrono::milliseconds(static_cast<long long>(ms));
}

nlohmann::json post_with_retries(JsonTransport& transport, const nlohmann::json& body,
                                 const RetryPolicy& policy, std::size_t* retries_out,
                                 const std::function<void(const TransportError&)>& on_retry) {
  std::size_t retries = 0;
  for (;;) {
    try {
      auto out = transport.post(body);
      if (retries_out) *retries_out = retries;
      return out;
    } catch (const TransportError& e) {
      if (!e.retryable() || retries >= policy.max_retries) {
        if (retries_out) *retries_out = retries;
        throw;
      }
      if (on_retry) on_retry(e);
      auto wait = policy.backoff(retries);
      if (policy.sleep)
        policy.sleep(wait);
      else
        std::this_thread::sleep_for(wait);
      ++retries;
    }
  }
}

std::string chat_message_content(const nlohmann::json& response) {
  try {
    const auto& content = response.at("choices").at(0).at("message").at("content");
    if (!content.is_string()) throw FormatError("chat response content is not text");
    return content.get<std::string>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError("chat response lacks choices[0].message.content");
  }
}

}  // namespace dcr
