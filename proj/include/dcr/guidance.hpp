#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dcr/error.hpp"

namespace dcr {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Flat latent tensor with a declared shape. The Tag keeps noise predictions
// and guidance updates from being mixed up at compile time.
template <typename Tag>
class LatentField {
 public:
  LatentField() = default;

  explicit LatentField(std::vector<double> values)
      : values_(std::move(values)), shape_{values_.size()} {
    check();
  }

  LatentField(std::vector<double> values, Shape shape)
      : values_(std::move(values)), shape_(std::move(shape)) {
    check();
  }

  std::span<const double> values() const noexcept { return values_; }
  const std::vector<double>& vec() const noexcept { return values_; }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }
  double operator[](std::size_t i) const { return values_[i]; }

 private:
  void check() const {
    if (shape_.empty()) throw DimensionError("latent shape must have at least one axis");
    if (shape_size(shape_) != values_.size())
      throw DimensionError("shape " + shape_string(shape_) + " does not match " +
                           std::to_string(values_.size()) + " values");
    for (double v : values_)
      if (!std::isfinite(v)) throw ValidationError("latent contains a non-finite value");
  }

  std::vector<double> values_;
  Shape shape_;
};

struct NoiseTag;
struct UpdateTag;
using NoisePrediction = LatentField<NoiseTag>;
using GuidanceUpdate = LatentField<UpdateTag>;

struct GuidanceConfig {
  double w = 0.0;  // no default; callers must set it
  double w_attr = 3.0;
  double eta = 1.0;
  double gamma = 2.0;
  double r_s = 0.2;
  double r_e = 0.8;
  double eps_stab = 1e-8;

  void validate() const;
};

struct StepPosition {
  std::size_t index = 0;  // 0 is the noisiest step
  std::size_t total = 2;

  double progress() const;
  void validate() const;
};

struct RepulsionDiagnostics {
  double s_t = 0.0;
  double n_t = 0.0;
  double alpha_t = 0.0;
  double lambda_t = 0.0;
  double collinearity_residual = 0.0;
};

enum class RepulsionMode {
  Scheduled,    // alpha from the progress window
  Unscheduled,  // alpha = 1 at every step
  Disabled,     // lambda forced to 0, diagnostics still computed
};

struct GuidedPrediction {
  NoisePrediction eps;
  GuidanceUpdate delta;
  RepulsionDiagnostics diagnostics;
};

// Flattened inner product and squared norm, compensated summation.
double dot(std::span<const double> a, std::span<const double> b);
double squared_norm(std::span<const double> a);

GuidanceUpdate cfg_update(const NoisePrediction& eps_uncond, const NoisePrediction& eps_text,
                          double w);
NoisePrediction target_prediction(const NoisePrediction& eps_uncond, const GuidanceUpdate& delta);
NoisePrediction probe_prediction(const NoisePrediction& eps_uncond,
                                 const NoisePrediction& eps_attr, double w_attr);

// a = probe - target.
GuidanceUpdate attractor_drift(const NoisePrediction& eps_probe,
                               const NoisePrediction& eps_target);
// Same quantity from the branch differences, w_attr(attr - u) - w(text - u).
// Avoids cancelling two nearly equal predictions.
GuidanceUpdate attractor_drift(const NoisePrediction& eps_uncond, const NoisePrediction& eps_text,
                               const NoisePrediction& eps_attr, double w, double w_attr);

double schedule_alpha(StepPosition pos, const GuidanceConfig& cfg);

RepulsionDiagnostics repulsion_coefficient(const GuidanceUpdate& drift,
                                           const GuidanceUpdate& delta_ref, double alpha_t,
                                           const GuidanceConfig& cfg);

GuidanceUpdate corrected_update(const GuidanceUpdate& delta_ref, double lambda_t,
                                const GuidanceUpdate& drift);

// |a - proj_delta(a)| / |a|, 0 when a vanishes.
double collinearity_residual(const GuidanceUpdate& drift, const GuidanceUpdate& delta_ref);

NoisePrediction cfg_prediction(const NoisePrediction& eps_uncond, const NoisePrediction& eps_text,
                               double w);
NoisePrediction negative_prompt_prediction(const NoisePrediction& eps_negative,
                                           const NoisePrediction& eps_text, double w);

GuidedPrediction dcr_guided_prediction(const NoisePrediction& eps_uncond,
                                       const NoisePrediction& eps_text,
                                       const NoisePrediction& eps_attr, StepPosition pos,
                                       const GuidanceConfig& cfg,
                                       RepulsionMode mode = RepulsionMode::Scheduled);

}  // namespace dcr
