#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <mutex>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "dcr/guidance.hpp"
#include "dcr/remote.hpp"
#include "dcr/toy_diffusion.hpp"

namespace testing {

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

inline dcr::NoisePrediction random_noise(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  return dcr::NoisePrediction(random_vector(rng, n, scale));
}

// Dimension drawn log-uniformly from [lo, hi].
inline std::size_t random_dim(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  std::uniform_real_distribution<double> u(std::log(double(lo)), std::log(double(hi) + 1.0));
  return std::min<std::size_t>(hi, static_cast<std::size_t>(std::exp(u(rng))));
}

// Long-double reference arithmetic, independent of the library's compensated sums.
inline long double ref_dot(const std::vector<double>& a, const std::vector<double>& b) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a[i]) * b[i];
  return s;
}

inline double ref_norm(const std::vector<double>& a) {
  return static_cast<double>(std::sqrt(ref_dot(a, a)));
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

inline bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
  return true;
}

// 1-D two-mode scenario at -sep/2 and +sep/2 for closed-form checks.
inline dcr::BiasScenario line_scenario(double sep = 4.0, double sigma0 = 0.5) {
  dcr::BiasScenario s;
  s.base.sigma0 = sigma0;
  s.base.components = {{"dominant", {-sep / 2}, 0.9}, {"rare", {sep / 2}, 0.1}};
  s.pi_major = 0.9;
  s.leakage_beta = 0.35;
  using dcr::ChannelKind;
  using dcr::PromptChannel;
  s.channels = {
      {"uncond", PromptChannel{ChannelKind::Uncond, "", std::nullopt}},
      {"target", PromptChannel{ChannelKind::Target, "", std::vector<double>{0.35, 0.65}}},
      {"attractor", PromptChannel{ChannelKind::Attractor, "", std::vector<double>{1.0, 0.0}}},
      {"even", PromptChannel{ChannelKind::Custom, "even", std::vector<double>{0.5, 0.5}}},
  };
  s.validate();
  return s;
}

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("dcr-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& name = "") const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

// Scripted transport: each call pops the next handler; the last one repeats.
class ScriptedTransport final : public dcr::JsonTransport {
 public:
  using Handler = std::function<nlohmann::json(const nlohmann::json&)>;
  explicit ScriptedTransport(std::vector<Handler> script) : script_(std::move(script)) {}

  nlohmann::json post(const nlohmann::json& body) override {
    Handler h;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      bodies_.push_back(body);
      h = script_[std::min(calls_, script_.size() - 1)];
      ++calls_;
    }
    return h(body);
  }
  std::size_t calls() const { return calls_; }
  const std::vector<nlohmann::json>& bodies() const { return bodies_; }

 private:
  std::vector<Handler> script_;
  std::vector<nlohmann::json> bodies_;
  std::size_t calls_ = 0;
  std::mutex mutex_;
};

inline nlohmann::json chat_reply(const std::string& content) {
  return {{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}};
}

inline dcr::RetryPolicy no_sleep_retry(std::size_t max_retries = 3) {
  dcr::RetryPolicy p;
  p.max_retries = max_retries;
  p.sleep = [](std::chrono::milliseconds) {};
  return p;
}

// Minimal valid PNG header (signature + IHDR) for the given size.
inline std::vector<std::uint8_t> png_header(std::uint32_t w, std::uint32_t h) {
  std::vector<std::uint8_t> b = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n',
                                 0, 0, 0, 13, 'I', 'H', 'D', 'R'};
  for (std::uint32_t v : {w, h})
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
  for (int i = 0; i < 9; ++i) b.push_back(0);
  return b;
}

}  // namespace testing
