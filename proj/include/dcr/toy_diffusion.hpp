#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dcr/guidance.hpp"
#include "json.hpp"

namespace dcr {

struct MixtureComponent {
  std::string name;
  std::vector<double> mean;
  double weight = 0.0;
};

struct MixtureSpec {
  std::vector<MixtureComponent> components;
  double sigma0 = 1.0;

  std::size_t dim() const;
  std::vector<double> weights() const;
  void validate() const;
};

enum class ChannelKind { Uncond, Target, Attractor, Custom };

struct PromptChannel {
  ChannelKind kind = ChannelKind::Uncond;
  std::string name;  // only meaningful for Custom
  std::optional<std::vector<double>> weights_override;

  std::string label() const;
};

// Three-component construction: dominant and rare modes share a context,
// a background mode holds the rest of the unconditional mass.
struct BiasScenario {
  MixtureSpec base;  // base weights are the unconditional weights
  std::size_t dominant_index = 0;
  std::size_t rare_index = 1;
  double pi_major = 0.9;
  double leakage_beta = 0.35;
  std::map<std::string, PromptChannel> channels;

  const PromptChannel& channel(const std::string& label) const;
  std::vector<double> channel_weights(const PromptChannel& ch) const;
  void validate() const;
};

struct ScenarioGeometry {
  std::vector<double> dominant_mean{-3.0, 0.0};
  std::vector<double> rare_mean{3.0, 0.0};
  std::vector<double> background_mean{6.0, -3.0};
  double sigma0 = 0.5;
  double pi_major = 0.9;
  double leakage_beta = 0.35;
  double context_mass = 0.1;  // unconditional mass on dominant + rare
};

BiasScenario make_bias_scenario(const ScenarioGeometry& g);
BiasScenario default_bias_scenario();

class NoiseScheduleSpec {
 public:
  // alpha_bar[k] belongs to timestep t = k + 1.
  explicit NoiseScheduleSpec(std::vector<double> alpha_bar);

  static NoiseScheduleSpec linear_logsnr(std::size_t steps, double logsnr_noisy,
                                         double logsnr_clean);
  static NoiseScheduleSpec cosine(std::size_t steps, double offset = 0.008);

  std::size_t steps() const noexcept { return alpha_bar_.size(); }
  // t in [0, T]; t = 0 is the clean end where alpha_bar is 1.
  double alpha_bar(std::size_t t) const;
  std::span<const double> values() const noexcept { return alpha_bar_; }

 private:
  std::vector<double> alpha_bar_;
};

enum class ScheduleKind { LinearLogSnr, Cosine };

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::LinearLogSnr;
  std::size_t steps = 100;
  double logsnr_noisy = -20.0;
  double logsnr_clean = 10.0;
  double cosine_offset = 0.008;

  NoiseScheduleSpec build() const;
  ScheduleConfig with_steps(std::size_t t) const;
};

std::vector<double> responsibilities(std::span<const double> x_t, std::size_t t,
                                     const PromptChannel& channel, const BiasScenario& scenario,
                                     const NoiseScheduleSpec& sched);
std::vector<double> posterior_mean(std::span<const double> x_t, std::size_t t,
                                   const PromptChannel& channel, const BiasScenario& scenario,
                                   const NoiseScheduleSpec& sched);
NoisePrediction epsilon_prediction(std::span<const double> x_t, std::size_t t,
                                   const PromptChannel& channel, const BiasScenario& scenario,
                                   const NoiseScheduleSpec& sched);
std::vector<double> forward_noising(std::span<const double> x0, std::size_t t,
                                    const NoiseScheduleSpec& sched, std::mt19937_64& rng);
std::size_t mode_assignment(std::span<const double> x0, const MixtureSpec& mixture);
std::size_t mode_assignment(std::span<const double> x0, const BiasScenario& scenario);

// Scenario file: mixture, channels, and optional schedule / guidance sections.
struct ScenarioDocument {
  BiasScenario scenario;
  ScheduleConfig schedule;
  std::optional<double> guidance_w;
};

ScenarioDocument default_scenario_document();
nlohmann::ordered_json scenario_to_json(const ScenarioDocument& doc);
ScenarioDocument scenario_from_json(const nlohmann::json& j);
ScenarioDocument load_scenario(const std::string& path);
void save_scenario(const std::string& path, const ScenarioDocument& doc);

}  // namespace dcr
