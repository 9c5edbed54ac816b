#include "dcr/sampler.hpp"

#include <atomic>
#include <cmath>
#include <ostream>
#include <set>
#include <thread>

#include "json.hpp"

namespace dcr {

ToyDenoiser::ToyDenoiser(BiasScenario scenario, NoiseScheduleSpec schedule)
    : scenario_(std::move(scenario)), schedule_(std::move(schedule)) {
  scenario_.validate();
}

NoisePrediction ToyDenoiser::predict(std::span<const double> x_t, std::size_t t,
                                     const std::string& channel) const {
  return epsilon_prediction(x_t, t, scenario_.channel(channel), scenario_, schedule_);
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::FullDCR: return "full-dcr";
    case Variant::PlainCFG: return "plain-cfg";
    case Variant::NegativePrompt: return "negative-prompt";
    case Variant::NoAttractorPrompt: return "no-attractor-prompt";
    case Variant::NoRepulsion: return "no-repulsion";
    case Variant::NoSchedule: return "no-schedule";
  }
  return "unknown";
}

Variant parse_variant(std::string_view s) {
  for (Variant v : kAllVariants)
    if (to_string(v) == s) return v;
  throw ConfigError("unknown variant '" + std::string(s) + "'");
}

std::string to_string(SchedulerKind k) {
  return k == SchedulerKind::DeterministicDDIM ? "ddim" : "ddpm";
}

SchedulerKind parse_scheduler(std::string_view s) {
  if (s == "ddim") return SchedulerKind::DeterministicDDIM;
  if (s == "ddpm") return SchedulerKind::AncestralDDPM;
  throw ConfigError("unknown scheduler '" + std::string(s) + "' (expected ddim or ddpm)");
}

void SamplerConfig::validate() const {
  if (steps < 2) throw ValidationError("sampler needs T >= 2");
  guidance.validate();
}

std::vector<double> ddim_update(std::span<const double> x_t, std::span<const double> eps,
                                double alpha_bar_t, double alpha_bar_prev) {
  if (x_t.size() != eps.size()) throw DimensionError("ddim_update: length mismatch");
  if (!(alpha_bar_t > 0.0 && alpha_bar_t <= 1.0 && alpha_bar_prev > 0.0 && alpha_bar_prev <= 1.0))
    throw ValidationError("ddim_update: alpha_bar out of range");
  double sa = std::sqrt(alpha_bar_t), sn = std::sqrt(1.0 - alpha_bar_t);
  double pa = std::sqrt(alpha_bar_prev), pn = std::sqrt(1.0 - alpha_bar_prev);
  std::vector<double> out(x_t.size());
  for (std::size_t j = 0; j < out.size(); ++j) {
    double x0 = (x_t[j] - sn * eps[j]) / sa;
    out[j] = pa * x0 + pn * eps[j];
  }
  return out;
}

std::vector<double> scheduler_step(const NoisePrediction& eps_star, std::size_t t,
                                   std::span<const double> x_t, const NoiseScheduleSpec& sched,
                                   SchedulerKind kind, std::mt19937_64& rng) {
  if (t == 0) throw ValidationError("scheduler_step: t must be >= 1");
  if (eps_star.size() != x_t.size()) throw DimensionError("scheduler_step: length mismatch");
  double ab_t = sched.alpha_bar(t);
  double ab_prev = sched.alpha_bar(t - 1);
  if (kind == SchedulerKind::DeterministicDDIM)
    return ddim_update(x_t, eps_star.values(), ab_t, ab_prev);

  double alpha_t = ab_t / ab_prev;
  double beta_t = 1.0 - alpha_t;
  double c0 = std::sqrt(ab_prev) * beta_t / (1.0 - ab_t);
  double ct = std::sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t);
  double var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t;
  double sa = std::sqrt(ab_t), sn = std::sqrt(1.0 - ab_t);
  std::vector<double> out(x_t.size());
  for (std::size_t j = 0; j < out.size(); ++j) {
    double x0 = (x_t[j] - sn * eps_star[j]) / sa;
    out[j] = c0 * x0 + ct * x_t[j];
  }
  if (t > 1 && var > 0.0) {
    std::normal_distribution<double> normal(0.0, 1.0);
    double sd = std::sqrt(var);
    for (double& v : out) v += sd * normal(rng);
  }
  return out;
}

namespace {

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace

TrajectoryTrace run_sampling(const Denoiser& backend, const PromptPair& prompts,
                             const SamplerConfig& cfg) {
  cfg.validate();
  const NoiseScheduleSpec& sched = backend.schedule();
  if (sched.steps() != cfg.steps)
    throw ConfigError("sampler T=" + std::to_string(cfg.steps) + " but backend schedule has " +
                      std::to_string(sched.steps()) + " steps");
  const std::size_t T = cfg.steps;
  Shape shape = backend.latent_shape();

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> x(shape_size(shape));
  for (double& v : x) v = normal(rng);

  TrajectoryTrace trace;
  trace.steps.reserve(T);
  for (std::size_t i = 0; i < T; ++i) {
    const std::size_t t = T - i;
    StepRecord rec;
    rec.step = i;
    rec.timestep = t;
    double sum = 0.0;
    for (double v : x) sum += v;
    rec.x_mean = sum / static_cast<double>(x.size());
    rec.x_norm = std::sqrt(squared_norm(x));

    NoisePrediction eps;
    try {
      NoisePrediction eps_u = backend.predict(x, t, kUncondChannel);
      NoisePrediction eps_c = backend.predict(x, t, prompts.text);
      StepPosition pos{i, T};
      const auto& g = cfg.guidance;
      switch (cfg.variant) {
        case Variant::PlainCFG:
          eps = cfg_prediction(eps_u, eps_c, g.w);
          break;
        case Variant::NegativePrompt:
          eps = negative_prompt_prediction(backend.predict(x, t, prompts.attractor), eps_c, g.w);
          break;
        case Variant::NoAttractorPrompt: {
          auto r = dcr_guided_prediction(eps_u, eps_c, eps_c, pos, g, RepulsionMode::Scheduled);
          eps = std::move(r.eps);
          rec.diagnostics = r.diagnostics;
          break;
        }
        default: {
          RepulsionMode mode = cfg.variant == Variant::NoRepulsion  ? RepulsionMode::Disabled
                               : cfg.variant == Variant::NoSchedule ? RepulsionMode::Unscheduled
                                                                    : RepulsionMode::Scheduled;
          NoisePrediction eps_a = backend.predict(x, t, prompts.attractor);
          auto r = dcr_guided_prediction(eps_u, eps_c, eps_a, pos, g, mode);
          eps = std::move(r.eps);
          rec.diagnostics = r.diagnostics;
          break;
        }
      }
      x = scheduler_step(eps, t, x, sched, cfg.scheduler, rng);
    } catch (const TrajectoryError&) {
      throw;
    } catch (const std::exception& e) {
      throw TrajectoryError(e.what(), i);
    }
    if (!all_finite(x)) throw TrajectoryError("non-finite latent after scheduler step", i);
    trace.steps.push_back(rec);
  }
  trace.final_latent = std::move(x);
  return trace;
}

namespace {

std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base_seed, std::string_view item_id,
                          std::size_t replicate) {
  return base_seed ^ splitmix64(fnv1a64(item_id) ^ splitmix64(replicate));
}

BatchResult run_batch(const Denoiser& backend, const std::vector<BatchItem>& items,
                      const SamplerConfig& cfg, std::size_t n_per_item, std::size_t threads) {
  if (n_per_item < 1) throw ValidationError("run_batch: n_per_item must be >= 1");
  cfg.validate();
  std::set<std::string> seen;
  for (const auto& it : items)
    if (!seen.insert(it.id).second) throw ValidationError("run_batch: duplicate item id '" + it.id + "'");

  BatchResult result;
  result.runs.resize(items.size() * n_per_item);
  for (std::size_t k = 0; k < items.size(); ++k)
    for (std::size_t r = 0; r < n_per_item; ++r) {
      BatchRun& run = result.runs[k * n_per_item + r];
      run.item_id = items[k].id;
      run.replicate = r;
      run.seed = derive_seed(cfg.seed, items[k].id, r);
    }

  auto execute = [&](std::size_t idx) {
    BatchRun& run = result.runs[idx];
    SamplerConfig local = cfg;
    local.seed = run.seed;
    try {
      run.trace = run_sampling(backend, items[idx / n_per_item].prompts, local);
    } catch (const TrajectoryError& e) {
      run.error = e.what();
      run.failed_step = e.step();
    } catch (const std::exception& e) {
      run.error = e.what();
    }
  };

  std::size_t workers = backend.concurrent_safe() ? std::max<std::size_t>(threads, 1) : 1;
  workers = std::min(workers, result.runs.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < result.runs.size(); ++i) execute(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < result.runs.size(); i = next++) execute(i);
      });
    for (auto& th : pool) th.join();
  }
  for (const auto& run : result.runs)
    if (!run.trace) ++result.failures;
  return result;
}

void write_trace_jsonl(std::ostream& out, const std::string& trajectory_id,
                       const TrajectoryTrace& trace) {
  for (const auto& s : trace.steps) {
    nlohmann::ordered_json j;
    j["trajectory_id"] = trajectory_id;
    j["step"] = s.step;
    j["timestep"] = s.timestep;
    j["alpha_t"] = s.diagnostics.alpha_t;
    j["lambda_t"] = s.diagnostics.lambda_t;
    j["s_t"] = s.diagnostics.s_t;
    j["residual"] = s.diagnostics.collinearity_residual;
    j["n_t"] = s.diagnostics.n_t;
    j["x_mean"] = s.x_mean;
    j["x_norm"] = s.x_norm;
    out << j.dump() << "\n";
  }
  nlohmann::ordered_json f;
  f["trajectory_id"] = trajectory_id;
  f["final"] = true;
  f["final_x0"] = trace.final_latent;
  out << f.dump() << "\n";
}

}  // namespace dcr
