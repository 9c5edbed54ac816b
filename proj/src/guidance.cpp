#include "dcr/guidance.hpp"

#include <algorithm>
#include <cmath>

namespace dcr {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("shape dimensions must be positive");
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

void GuidanceConfig::validate() const {
  auto finite = [](double v) { return std::isfinite(v); };
  if (!finite(w) || w <= 0.0) throw ValidationError("guidance scale w must be positive");
  if (!finite(w_attr) || w_attr < 0.0 || w_attr >= w)
    throw ValidationError("w_attr must satisfy 0 <= w_attr < w");
  if (!finite(eta) || eta < 0.0) throw ValidationError("eta must be non-negative");
  if (!finite(gamma) || gamma <= 0.0) throw ValidationError("gamma must be positive");
  if (!finite(r_s) || !finite(r_e) || r_s < 0.0 || r_e > 1.0)
    throw ValidationError("schedule interval must lie in [0, 1]");
  if (r_s >= r_e) throw ValidationError("schedule interval requires r_s < r_e");
  if (!finite(eps_stab) || eps_stab <= 0.0) throw ValidationError("eps_stab must be positive");
}

void StepPosition::validate() const {
  if (total < 2) throw ValidationError("step count T must be at least 2");
  if (index >= total) throw ValidationError("step index out of range");
}

double StepPosition::progress() const {
  validate();
  return static_cast<double>(index) / static_cast<double>(total - 1);
}

namespace {

template <typename A, typename B>
void require_same_shape(const A& a, const B& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": shape " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

template <typename Out, typename F>
Out elementwise(std::size_t n, const Shape& shape, F f) {
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(i);
  return Out(std::move(out), shape);
}

}  // namespace

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  // Neumaier summation
  double sum = 0.0, comp = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double term = a[i] * b[i];
    double t = sum + term;
    if (std::abs(sum) >= std::abs(term))
      comp += (sum - t) + term;
    else
      comp += (term - t) + sum;
    sum = t;
  }
  return sum + comp;
}

double squared_norm(std::span<const double> a) { return dot(a, a); }

GuidanceUpdate cfg_update(const NoisePrediction& eps_uncond, const NoisePrediction& eps_text,
                          double w) {
  require_same_shape(eps_uncond, eps_text, "cfg_update");
  if (!std::isfinite(w) || w <= 0.0) throw ValidationError("cfg_update: w must be positive");
  return elementwise<GuidanceUpdate>(eps_uncond.size(), eps_uncond.shape(), [&](std::size_t i) {
    return w * (eps_text[i] - eps_uncond[i]);
  });
}

NoisePrediction target_prediction(const NoisePrediction& eps_uncond, const GuidanceUpdate& delta) {
  require_same_shape(eps_uncond, delta, "target_prediction");
  return elementwise<NoisePrediction>(eps_uncond.size(), eps_uncond.shape(),
                                      [&](std::size_t i) { return eps_uncond[i] + delta[i]; });
}

NoisePrediction probe_prediction(const NoisePrediction& eps_uncond,
                                 const NoisePrediction& eps_attr, double w_attr) {
  require_same_shape(eps_uncond, eps_attr, "probe_prediction");
  if (!std::isfinite(w_attr) || w_attr < 0.0)
    throw ValidationError("probe_prediction: w_attr must be non-negative");
  if (w_attr == 0.0) return eps_uncond;
  if (w_attr == 1.0) return eps_attr;
  return elementwise<NoisePrediction>(eps_uncond.size(), eps_uncond.shape(), [&](std::size_t i) {
    return eps_uncond[i] + w_attr * (eps_attr[i] - eps_uncond[i]);
  });
}

GuidanceUpdate attractor_drift(const NoisePrediction& eps_probe,
                               const NoisePrediction& eps_target) {
  require_same_shape(eps_probe, eps_target, "attractor_drift");
  return elementwise<GuidanceUpdate>(eps_probe.size(), eps_probe.shape(),
                                     [&](std::size_t i) { return eps_probe[i] - eps_target[i]; });
}

GuidanceUpdate attractor_drift(const NoisePrediction& eps_uncond, const NoisePrediction& eps_text,
                               const NoisePrediction& eps_attr, double w, double w_attr) {
  require_same_shape(eps_uncond, eps_text, "attractor_drift");
  require_same_shape(eps_uncond, eps_attr, "attractor_drift");
  return elementwise<GuidanceUpdate>(eps_uncond.size(), eps_uncond.shape(), [&](std::size_t i) {
    return w_attr * (eps_attr[i] - eps_uncond[i]) - w * (eps_text[i] - eps_uncond[i]);
  });
}

double schedule_alpha(StepPosition pos, const GuidanceConfig& cfg) {
  double pi = pos.progress();
  if (!(cfg.r_s < cfg.r_e)) throw ValidationError("schedule interval requires r_s < r_e");
  if (pi < cfg.r_s || pi > cfg.r_e) return 0.0;
  double ramp = std::clamp((pi - cfg.r_s) / (cfg.r_e - cfg.r_s), 0.0, 1.0);
  return std::pow(ramp, cfg.gamma);
}

double collinearity_residual(const GuidanceUpdate& drift, const GuidanceUpdate& delta_ref) {
  require_same_shape(drift, delta_ref, "collinearity_residual");
  double aa = squared_norm(drift.values());
  if (aa == 0.0) return 0.0;
  double dd = squared_norm(delta_ref.values());
  if (dd == 0.0) return 1.0;
  double c = dot(drift.values(), delta_ref.values()) / dd;
  // Residual vector taken directly; 1 - cos^2 loses everything near zero.
  double rr = 0.0, comp = 0.0;
  for (std::size_t i = 0; i < drift.size(); ++i) {
    double r = drift[i] - c * delta_ref[i];
    double term = r * r;
    double t = rr + term;
    comp += (rr >= term) ? (rr - t) + term : (term - t) + rr;
    rr = t;
  }
  return std::min(1.0, std::sqrt((rr + comp) / aa));
}

RepulsionDiagnostics repulsion_coefficient(const GuidanceUpdate& drift,
                                           const GuidanceUpdate& delta_ref, double alpha_t,
                                           const GuidanceConfig& cfg) {
  require_same_shape(drift, delta_ref, "repulsion_coefficient");
  if (!(alpha_t >= 0.0 && alpha_t <= 1.0))
    throw ValidationError("repulsion_coefficient: alpha_t must lie in [0, 1]");
  RepulsionDiagnostics d;
  d.alpha_t = alpha_t;
  d.s_t = dot(drift.values(), delta_ref.values());
  d.n_t = squared_norm(drift.values()) + cfg.eps_stab;
  d.lambda_t = (d.s_t > 0.0 && alpha_t > 0.0) ? alpha_t * cfg.eta * d.s_t / d.n_t : 0.0;
  d.collinearity_residual = collinearity_residual(drift, delta_ref);
  return d;
}

GuidanceUpdate corrected_update(const GuidanceUpdate& delta_ref, double lambda_t,
                                const GuidanceUpdate& drift) {
  require_same_shape(delta_ref, drift, "corrected_update");
  if (!std::isfinite(lambda_t) || lambda_t < 0.0)
    throw ValidationError("corrected_update: lambda_t must be non-negative");
  if (lambda_t == 0.0) return delta_ref;
  return elementwise<GuidanceUpdate>(delta_ref.size(), delta_ref.shape(), [&](std::size_t i) {
    return delta_ref[i] - lambda_t * drift[i];
  });
}

NoisePrediction cfg_prediction(const NoisePrediction& eps_uncond, const NoisePrediction& eps_text,
                               double w) {
  return target_prediction(eps_uncond, cfg_update(eps_uncond, eps_text, w));
}

NoisePrediction negative_prompt_prediction(const NoisePrediction& eps_negative,
                                           const NoisePrediction& eps_text, double w) {
  return target_prediction(eps_negative, cfg_update(eps_negative, eps_text, w));
}

GuidedPrediction dcr_guided_prediction(const NoisePrediction& eps_uncond,
                                       const NoisePrediction& eps_text,
                                       const NoisePrediction& eps_attr, StepPosition pos,
                                       const GuidanceConfig& cfg, RepulsionMode mode) {
  cfg.validate();
  require_same_shape(eps_uncond, eps_text, "dcr_guided_prediction");
  require_same_shape(eps_uncond, eps_attr, "dcr_guided_prediction");

  GuidanceUpdate delta = cfg_update(eps_uncond, eps_text, cfg.w);
  GuidanceUpdate drift = attractor_drift(eps_uncond, eps_text, eps_attr, cfg.w, cfg.w_attr);

  double alpha = 0.0;
  switch (mode) {
    case RepulsionMode::Scheduled: alpha = schedule_alpha(pos, cfg); break;
    case RepulsionMode::Unscheduled: pos.validate(); alpha = 1.0; break;
    case RepulsionMode::Disabled: alpha = schedule_alpha(pos, cfg); break;
  }
  RepulsionDiagnostics diag = repulsion_coefficient(drift, delta, alpha, cfg);
  // Probe and diagnostics still run so traces show what would have been removed.
  if (mode == RepulsionMode::Disabled) diag.lambda_t = 0.0;

  GuidanceUpdate corrected = corrected_update(delta, diag.lambda_t, drift);
  NoisePrediction eps = target_prediction(eps_uncond, corrected);
  return GuidedPrediction{std::move(eps), std::move(corrected), diag};
}

}  // namespace dcr
