#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dcr/guidance.hpp"
#include "dcr/toy_diffusion.hpp"

namespace dcr {

inline constexpr const char* kUncondChannel = "uncond";

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual NoisePrediction predict(std::span<const double> x_t, std::size_t t,
                                  const std::string& channel) const = 0;
  virtual Shape latent_shape() const = 0;
  virtual const NoiseScheduleSpec& schedule() const = 0;
  virtual bool concurrent_safe() const { return false; }
};

class ToyDenoiser final : public Denoiser {
 public:
  ToyDenoiser(BiasScenario scenario, NoiseScheduleSpec schedule);

  NoisePrediction predict(std::span<const double> x_t, std::size_t t,
                          const std::string& channel) const override;
  Shape latent_shape() const override { return {scenario_.base.dim()}; }
  const NoiseScheduleSpec& schedule() const override { return schedule_; }
  bool concurrent_safe() const override { return true; }

  const BiasScenario& scenario() const { return scenario_; }

 private:
  BiasScenario scenario_;
  NoiseScheduleSpec schedule_;
};

enum class SchedulerKind { AncestralDDPM, DeterministicDDIM };

enum class Variant { FullDCR, PlainCFG, NegativePrompt, NoAttractorPrompt, NoRepulsion, NoSchedule };

inline constexpr Variant kAllVariants[] = {Variant::FullDCR,          Variant::PlainCFG,
                                           Variant::NegativePrompt,   Variant::NoAttractorPrompt,
                                           Variant::NoRepulsion,      Variant::NoSchedule};

std::string to_string(Variant v);
Variant parse_variant(std::string_view s);  // "full-dcr", "plain-cfg", ...
std::string to_string(SchedulerKind k);
SchedulerKind parse_scheduler(std::string_view s);  // "ddim", "ddpm"

struct SamplerConfig {
  std::size_t steps = 100;
  SchedulerKind scheduler = SchedulerKind::DeterministicDDIM;
  std::uint64_t seed = 0;
  GuidanceConfig guidance;
  Variant variant = Variant::FullDCR;

  void validate() const;
};

// Channel names the backend understands.
struct PromptPair {
  std::string text = "target";
  std::string attractor = "attractor";
};

struct StepRecord {
  std::size_t step = 0;      // i, 0 is the noisiest
  std::size_t timestep = 0;  // t = T - i
  RepulsionDiagnostics diagnostics;
  double x_mean = 0.0;
  double x_norm = 0.0;
};

struct TrajectoryTrace {
  std::vector<StepRecord> steps;
  std::vector<double> final_latent;
};

std::vector<double> ddim_update(std::span<const double> x_t, std::span<const double> eps,
                                double alpha_bar_t, double alpha_bar_prev);

std::vector<double> scheduler_step(const NoisePrediction& eps_star, std::size_t t,
                                   std::span<const double> x_t, const NoiseScheduleSpec& sched,
                                   SchedulerKind kind, std::mt19937_64& rng);

TrajectoryTrace run_sampling(const Denoiser& backend, const PromptPair& prompts,
                             const SamplerConfig& cfg);

struct BatchItem {
  std::string id;
  PromptPair prompts;
};

struct BatchRun {
  std::string item_id;
  std::size_t replicate = 0;
  std::uint64_t seed = 0;
  std::optional<TrajectoryTrace> trace;  // empty when the trajectory failed
  std::string error;
  std::optional<std::size_t> failed_step;
};

struct BatchResult {
  std::vector<BatchRun> runs;  // item-major, replicate-minor, in input item order
  std::size_t failures = 0;
};

std::uint64_t derive_seed(std::uint64_t base_seed, std::string_view item_id,
                          std::size_t replicate);

BatchResult run_batch(const Denoiser& backend, const std::vector<BatchItem>& items,
                      const SamplerConfig& cfg, std::size_t n_per_item, std::size_t threads = 1);

// One JSON object per line; step fields in a fixed order, then a final record.
void write_trace_jsonl(std::ostream& out, const std::string& trajectory_id,
                       const TrajectoryTrace& trace);

}  // namespace dcr
