#include "dcr/toy_diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace dcr {

namespace {

constexpr double kWeightTol = 1e-12;
constexpr double kPi = 3.14159265358979323846;

void check_weight_list(const std::vector<double>& w, std::size_t k, const std::string& what) {
  if (w.size() != k)
    throw ValidationError(what + ": expected " + std::to_string(k) + " weights, got " +
                          std::to_string(w.size()));
  double sum = 0.0;
  for (double v : w) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
      throw ValidationError(what + ": weights must lie in [0, 1]");
    sum += v;
  }
  if (std::abs(sum - 1.0) > kWeightTol) throw ValidationError(what + ": weights must sum to 1");
}

}  // namespace

std::size_t MixtureSpec::dim() const {
  return components.empty() ? 0 : components.front().mean.size();
}

std::vector<double> MixtureSpec::weights() const {
  std::vector<double> w;
  w.reserve(components.size());
  for (const auto& c : components) w.push_back(c.weight);
  return w;
}

void MixtureSpec::validate() const {
  if (components.size() < 2) throw ValidationError("mixture needs at least 2 components");
  if (!std::isfinite(sigma0) || sigma0 <= 0.0) throw ValidationError("sigma0 must be positive");
  std::size_t d = dim();
  if (d == 0) throw ValidationError("component means must be non-empty");
  for (const auto& c : components) {
    if (c.mean.size() != d) throw DimensionError("component '" + c.name + "' has wrong dimension");
    for (double v : c.mean)
      if (!std::isfinite(v)) throw ValidationError("component '" + c.name + "' has non-finite mean");
    if (!(c.weight > 0.0 && c.weight <= 1.0))
      throw ValidationError("component '" + c.name + "' weight must lie in (0, 1]");
  }
  check_weight_list(weights(), components.size(), "mixture");
}

std::string PromptChannel::label() const {
  switch (kind) {
    case ChannelKind::Uncond: return "uncond";
    case ChannelKind::Target: return "target";
    case ChannelKind::Attractor: return "attractor";
    case ChannelKind::Custom: return name;
  }
  return name;
}

const PromptChannel& BiasScenario::channel(const std::string& label) const {
  auto it = channels.find(label);
  if (it == channels.end()) throw ConfigError("unknown prompt channel '" + label + "'");
  return it->second;
}

std::vector<double> BiasScenario::channel_weights(const PromptChannel& ch) const {
  return ch.weights_override ? *ch.weights_override : base.weights();
}

void BiasScenario::validate() const {
  base.validate();
  std::size_t k = base.components.size();
  if (dominant_index >= k || rare_index >= k || dominant_index == rare_index)
    throw ValidationError("dominant and rare indices must be distinct components");
  if (!(pi_major > 0.5 && pi_major < 1.0)) throw ValidationError("pi_major must lie in (0.5, 1)");
  if (!(leakage_beta >= 0.0 && leakage_beta < 1.0))
    throw ValidationError("leakage_beta must lie in [0, 1)");

  auto w = base.weights();
  double ctx = w[dominant_index] + w[rare_index];
  if (std::abs(w[dominant_index] / ctx - pi_major) > 1e-9)
    throw ValidationError("unconditional dominant share does not match pi_major");

  for (const auto& [label, ch] : channels) {
    if (ch.label() != label) throw ValidationError("channel key '" + label + "' mismatches its kind");
    if (ch.weights_override) check_weight_list(*ch.weights_override, k, "channel '" + label + "'");
  }
  for (const char* required : {"uncond", "target", "attractor"})
    if (!channels.count(required))
      throw ValidationError(std::string("scenario is missing the '") + required + "' channel");

  auto tw = channel_weights(channel("target"));
  for (std::size_t i = 0; i < k; ++i) {
    double expect = i == dominant_index ? leakage_beta : i == rare_index ? 1.0 - leakage_beta : 0.0;
    if (std::abs(tw[i] - expect) > kWeightTol)
      throw ValidationError("target channel must put leakage_beta on dominant, the rest on rare");
  }
  if (channel_weights(channel("attractor"))[dominant_index] < pi_major)
    throw ValidationError("attractor channel must put at least pi_major on the dominant mode");
}

BiasScenario make_bias_scenario(const ScenarioGeometry& g) {
  if (!(g.context_mass > 0.0 && g.context_mass < 1.0))
    throw ValidationError("context_mass must lie in (0, 1)");
  BiasScenario s;
  s.base.sigma0 = g.sigma0;
  s.base.components = {
      {"dominant", g.dominant_mean, g.context_mass * g.pi_major},
      {"rare", g.rare_mean, g.context_mass * (1.0 - g.pi_major)},
      {"background", g.background_mean, 1.0 - g.context_mass},
  };
  s.dominant_index = 0;
  s.rare_index = 1;
  s.pi_major = g.pi_major;
  s.leakage_beta = g.leakage_beta;

  PromptChannel uncond{ChannelKind::Uncond, "", std::nullopt};
  PromptChannel target{ChannelKind::Target, "", std::vector<double>{g.leakage_beta,
                                                                    1.0 - g.leakage_beta, 0.0}};
  PromptChannel attractor{ChannelKind::Attractor, "", std::vector<double>{1.0, 0.0, 0.0}};
  s.channels = {{"uncond", uncond}, {"target", target}, {"attractor", attractor}};
  s.validate();
  return s;
}

BiasScenario default_bias_scenario() { return make_bias_scenario(ScenarioGeometry{}); }

NoiseScheduleSpec::NoiseScheduleSpec(std::vector<double> alpha_bar)
    : alpha_bar_(std::move(alpha_bar)) {
  if (alpha_bar_.size() < 2) throw ValidationError("noise schedule needs T >= 2");
  for (std::size_t i = 0; i < alpha_bar_.size(); ++i) {
    double a = alpha_bar_[i];
    if (!std::isfinite(a) || a <= 0.0 || a > 1.0)
      throw ValidationError("alpha_bar values must lie in (0, 1]");
    if (i > 0 && !(a < alpha_bar_[i - 1]))
      throw ValidationError("alpha_bar must be strictly decreasing");
  }
}

NoiseScheduleSpec NoiseScheduleSpec::linear_logsnr(std::size_t steps, double logsnr_noisy,
                                                   double logsnr_clean) {
  if (steps < 2) throw ValidationError("noise schedule needs T >= 2");
  if (!(logsnr_clean > logsnr_noisy)) throw ValidationError("log-SNR range must be increasing");
  std::vector<double> ab(steps);
  for (std::size_t t = 1; t <= steps; ++t) {
    double frac = static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    double ls = logsnr_clean + (logsnr_noisy - logsnr_clean) * frac;
    ab[t - 1] = 1.0 / (1.0 + std::exp(-ls));
  }
  return NoiseScheduleSpec(std::move(ab));
}

NoiseScheduleSpec NoiseScheduleSpec::cosine(std::size_t steps, double offset) {
  if (steps < 2) throw ValidationError("noise schedule needs T >= 2");
  auto f = [&](double t) {
    double c = std::cos((t / static_cast<double>(steps) + offset) / (1.0 + offset) * kPi / 2.0);
    return c * c;
  };
  std::vector<double> ab(steps);
  double prev = 1.0;
  for (std::size_t t = 1; t <= steps; ++t) {
    double beta = std::min(1.0 - f(static_cast<double>(t)) / f(static_cast<double>(t - 1)), 0.999);
    prev *= 1.0 - beta;
    ab[t - 1] = prev;
  }
  return NoiseScheduleSpec(std::move(ab));
}

double NoiseScheduleSpec::alpha_bar(std::size_t t) const {
  if (t == 0) return 1.0;
  if (t > alpha_bar_.size())
    throw ValidationError("timestep " + std::to_string(t) + " beyond schedule length");
  return alpha_bar_[t - 1];
}

NoiseScheduleSpec ScheduleConfig::build() const {
  switch (kind) {
    case ScheduleKind::LinearLogSnr: return NoiseScheduleSpec::linear_logsnr(steps, logsnr_noisy, logsnr_clean);
    case ScheduleKind::Cosine: return NoiseScheduleSpec::cosine(steps, cosine_offset);
  }
  throw ConfigError("unknown schedule kind");
}

ScheduleConfig ScheduleConfig::with_steps(std::size_t t) const {
  ScheduleConfig c = *this;
  c.steps = t;
  return c;
}

std::vector<double> responsibilities(std::span<const double> x_t, std::size_t t,
                                     const PromptChannel& channel, const BiasScenario& scenario,
                                     const NoiseScheduleSpec& sched) {
  const auto& comps = scenario.base.components;
  if (x_t.size() != scenario.base.dim()) throw DimensionError("x_t dimension mismatch");
  double ab = sched.alpha_bar(t);
  double sa = std::sqrt(ab);
  double s2 = scenario.base.sigma0 * scenario.base.sigma0;
  double v = ab * s2 + (1.0 - ab);
  auto w = scenario.channel_weights(channel);

  std::vector<double> logr(comps.size(), -std::numeric_limits<double>::infinity());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < comps.size(); ++k) {
    if (w[k] <= 0.0) continue;
    double d2 = 0.0;
    for (std::size_t j = 0; j < x_t.size(); ++j) {
      double diff = x_t[j] - sa * comps[k].mean[j];
      d2 += diff * diff;
    }
    logr[k] = std::log(w[k]) - d2 / (2.0 * v);
    mx = std::max(mx, logr[k]);
  }
  double z = 0.0;
  for (double& l : logr) {
    l = std::isinf(l) ? 0.0 : std::exp(l - mx);
    z += l;
  }
  for (double& l : logr) l /= z;
  return logr;
}

std::vector<double> posterior_mean(std::span<const double> x_t, std::size_t t,
                                   const PromptChannel& channel, const BiasScenario& scenario,
                                   const NoiseScheduleSpec& sched) {
  auto r = responsibilities(x_t, t, channel, scenario, sched);
  double ab = sched.alpha_bar(t);
  double sa = std::sqrt(ab);
  double s2 = scenario.base.sigma0 * scenario.base.sigma0;
  double gain = sa * s2 / (ab * s2 + (1.0 - ab));
  std::vector<double> out(x_t.size(), 0.0);
  for (std::size_t k = 0; k < r.size(); ++k) {
    if (r[k] == 0.0) continue;
    const auto& m = scenario.base.components[k].mean;
    for (std::size_t j = 0; j < out.size(); ++j)
      out[j] += r[k] * (m[j] + gain * (x_t[j] - sa * m[j]));
  }
  return out;
}

NoisePrediction epsilon_prediction(std::span<const double> x_t, std::size_t t,
                                   const PromptChannel& channel, const BiasScenario& scenario,
                                   const NoiseScheduleSpec& sched) {
  double ab = sched.alpha_bar(t);
  if (ab >= 1.0) throw ValidationError("epsilon prediction undefined where alpha_bar = 1");
  auto pm = posterior_mean(x_t, t, channel, scenario, sched);
  double sa = std::sqrt(ab);
  double sn = std::sqrt(1.0 - ab);
  std::vector<double> eps(x_t.size());
  for (std::size_t j = 0; j < eps.size(); ++j) eps[j] = (x_t[j] - sa * pm[j]) / sn;
  return NoisePrediction(std::move(eps));
}

std::vector<double> forward_noising(std::span<const double> x0, std::size_t t,
                                    const NoiseScheduleSpec& sched, std::mt19937_64& rng) {
  double ab = sched.alpha_bar(t);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> out(x0.size());
  for (std::size_t j = 0; j < x0.size(); ++j)
    out[j] = std::sqrt(ab) * x0[j] + std::sqrt(1.0 - ab) * normal(rng);
  return out;
}

std::size_t mode_assignment(std::span<const double> x0, const MixtureSpec& mixture) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < mixture.components.size(); ++k) {
    const auto& m = mixture.components[k].mean;
    if (m.size() != x0.size()) throw DimensionError("x0 dimension mismatch");
    double d2 = 0.0;
    for (std::size_t j = 0; j < m.size(); ++j) d2 += (x0[j] - m[j]) * (x0[j] - m[j]);
    if (d2 < best_d) {  // strict: ties stay with the lower index
      best_d = d2;
      best = k;
    }
  }
  return best;
}

std::size_t mode_assignment(std::span<const double> x0, const BiasScenario& scenario) {
  return mode_assignment(x0, scenario.base);
}

// ---- scenario documents ----

namespace {

const char* kScenarioFormat = "dcr-scenario/1";

std::string kind_name(ChannelKind k) {
  switch (k) {
    case ChannelKind::Uncond: return "uncond";
    case ChannelKind::Target: return "target";
    case ChannelKind::Attractor: return "attractor";
    case ChannelKind::Custom: return "custom";
  }
  return "custom";
}

ChannelKind parse_kind(const std::string& s) {
  if (s == "uncond") return ChannelKind::Uncond;
  if (s == "target") return ChannelKind::Target;
  if (s == "attractor") return ChannelKind::Attractor;
  if (s == "custom") return ChannelKind::Custom;
  throw FormatError("unknown channel kind '" + s + "'");
}

template <typename T>
T field(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw FormatError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": field '" + key + "' has the wrong type");
  }
}

}  // namespace

ScenarioDocument default_scenario_document() {
  ScenarioDocument doc;
  doc.scenario = default_bias_scenario();
  doc.guidance_w = 3.5;
  return doc;
}

nlohmann::ordered_json scenario_to_json(const ScenarioDocument& doc) {
  const auto& s = doc.scenario;
  nlohmann::ordered_json j;
  j["format"] = kScenarioFormat;
  j["sigma0"] = s.base.sigma0;
  j["components"] = nlohmann::ordered_json::array();
  for (const auto& c : s.base.components)
    j["components"].push_back({{"name", c.name}, {"mean", c.mean}, {"weight", c.weight}});
  j["dominant_index"] = s.dominant_index;
  j["rare_index"] = s.rare_index;
  j["pi_major"] = s.pi_major;
  j["leakage_beta"] = s.leakage_beta;
  j["channels"] = nlohmann::ordered_json::object();
  for (const auto& [label, ch] : s.channels) {
    nlohmann::ordered_json c;
    c["kind"] = kind_name(ch.kind);
    if (ch.kind == ChannelKind::Custom) c["name"] = ch.name;
    if (ch.weights_override) c["weights"] = *ch.weights_override;
    j["channels"][label] = c;
  }
  nlohmann::ordered_json sched;
  sched["kind"] = doc.schedule.kind == ScheduleKind::Cosine ? "cosine" : "linear_logsnr";
  sched["steps"] = doc.schedule.steps;
  if (doc.schedule.kind == ScheduleKind::Cosine) {
    sched["offset"] = doc.schedule.cosine_offset;
  } else {
    sched["logsnr_noisy"] = doc.schedule.logsnr_noisy;
    sched["logsnr_clean"] = doc.schedule.logsnr_clean;
  }
  j["schedule"] = sched;
  if (doc.guidance_w) j["guidance"] = {{"w", *doc.guidance_w}};
  return j;
}

ScenarioDocument scenario_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("scenario: expected an object");
  if (j.contains("format") && j["format"] != kScenarioFormat)
    throw FormatError("scenario: unsupported format " + j["format"].dump());
  ScenarioDocument doc;
  auto& s = doc.scenario;
  s.base.sigma0 = field<double>(j, "sigma0", "scenario");
  auto comps = field<nlohmann::json>(j, "components", "scenario");
  if (!comps.is_array()) throw FormatError("scenario: 'components' must be an array");
  for (std::size_t i = 0; i < comps.size(); ++i) {
    std::string where = "components[" + std::to_string(i) + "]";
    MixtureComponent c;
    c.name = comps[i].value("name", "c" + std::to_string(i));
    c.mean = field<std::vector<double>>(comps[i], "mean", where);
    c.weight = field<double>(comps[i], "weight", where);
    s.base.components.push_back(std::move(c));
  }
  s.dominant_index = field<std::size_t>(j, "dominant_index", "scenario");
  s.rare_index = field<std::size_t>(j, "rare_index", "scenario");
  s.pi_major = field<double>(j, "pi_major", "scenario");
  s.leakage_beta = field<double>(j, "leakage_beta", "scenario");
  auto chans = field<nlohmann::json>(j, "channels", "scenario");
  if (!chans.is_object()) throw FormatError("scenario: 'channels' must be an object");
  for (auto it = chans.begin(); it != chans.end(); ++it) {
    std::string where = "channels." + it.key();
    PromptChannel ch;
    ch.kind = parse_kind(field<std::string>(it.value(), "kind", where));
    if (ch.kind == ChannelKind::Custom) ch.name = field<std::string>(it.value(), "name", where);
    if (it.value().contains("weights"))
      ch.weights_override = field<std::vector<double>>(it.value(), "weights", where);
    s.channels[it.key()] = std::move(ch);
  }
  if (j.contains("schedule")) {
    const auto& sj = j["schedule"];
    std::string kind = field<std::string>(sj, "kind", "schedule");
    if (kind == "cosine") {
      doc.schedule.kind = ScheduleKind::Cosine;
      doc.schedule.cosine_offset = sj.value("offset", 0.008);
    } else if (kind == "linear_logsnr") {
      doc.schedule.kind = ScheduleKind::LinearLogSnr;
      doc.schedule.logsnr_noisy = sj.value("logsnr_noisy", -20.0);
      doc.schedule.logsnr_clean = sj.value("logsnr_clean", 10.0);
    } else {
      throw FormatError("schedule: unknown kind '" + kind + "'");
    }
    doc.schedule.steps = field<std::size_t>(sj, "steps", "schedule");
    doc.schedule.build();  // validates
  }
  if (j.contains("guidance")) doc.guidance_w = field<double>(j["guidance"], "w", "guidance");
  s.validate();
  return doc;
}

ScenarioDocument load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open scenario file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
  return scenario_from_json(j);
}

void save_scenario(const std::string& path, const ScenarioDocument& doc) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write scenario file '" + path + "'");
  out << scenario_to_json(doc).dump(2) << "\n";
}

}  // namespace dcr
