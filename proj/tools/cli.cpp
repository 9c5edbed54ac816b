#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include "dcr/bench.hpp"
#include "dcr/error.hpp"
#include "dcr/judge_client.hpp"
#include "dcr/metrics.hpp"
#include "dcr/sampler.hpp"

#ifndef DCR_VERSION
#define DCR_VERSION "unknown"
#endif

namespace dcr::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

inline constexpr const char* kManifestSchema = "dcr-manifest/1";
inline constexpr const char* kManifestFile = "manifest.json";

std::string utc_now() {
  std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string num(double v, int digits = 17) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

// ---------------------------------------------------------------- config

json load_config(const std::optional<std::string>& path) {
  if (!path) return json::object();
  std::ifstream in(*path);
  if (!in) throw ConfigError("cannot read config '" + *path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + *path + "': " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config '" + *path + "' must be a JSON object");
  // A run manifest replays its resolved configuration.
  if (j.value("schema", "") == kManifestSchema) {
    if (!j.contains("config") || !j["config"].is_object())
      throw ConfigError("manifest '" + *path + "' has no config section");
    return j["config"];
  }
  return j;
}

template <class T>
std::optional<T> cfg_get(const json& cfg, const std::string& pointer) {
  json::json_pointer p(pointer);
  if (!cfg.contains(p) || cfg.at(p).is_null()) return std::nullopt;
  try {
    return cfg.at(p).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config " + pointer + ": " + e.what());
  }
}

template <class T>
T pick(const std::optional<T>& flag, const std::optional<T>& cfg, T fallback) {
  if (flag) return *flag;
  if (cfg) return *cfg;
  return fallback;
}

struct CommonFlags {
  std::optional<std::string> config, scenario, scheduler, out;
  std::optional<std::size_t> n, steps, threads;
  std::optional<std::uint64_t> seed;
  std::optional<double> w, w_attr, eta, gamma, r_s, r_e, eps_stab;
  bool strict = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON config file or run manifest");
  cmd->add_option("--scenario", f.scenario, "'default' or a scenario JSON file");
  cmd->add_option("--n", f.n, "Trajectories per item")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", f.seed, "Base seed");
  cmd->add_option("--steps", f.steps, "Sampling steps T")->check(CLI::Range(2, 100000));
  cmd->add_option("--scheduler", f.scheduler, "ddim or ddpm");
  cmd->add_option("--w", f.w, "Guidance scale");
  cmd->add_option("--w-attr", f.w_attr, "Attractor probe scale");
  cmd->add_option("--eta", f.eta, "Repulsion strength");
  cmd->add_option("--gamma", f.gamma, "Schedule exponent");
  cmd->add_option("--r-s", f.r_s, "Schedule interval start");
  cmd->add_option("--r-e", f.r_e, "Schedule interval end");
  cmd->add_option("--eps-stab", f.eps_stab, "Stabilizer added to the drift norm");
  cmd->add_option("--threads", f.threads, "Worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_flag("--strict", f.strict, "Exit 2 when any trajectory or remote call fails");
}

struct Resolved {
  json cfg;
  ScenarioDocument doc;
  std::string scenario_ref;
  SamplerConfig sampler;
  std::size_t n = 0;
  std::size_t threads = 1;
  std::string out_dir;
  bool strict = false;
};

Resolved resolve(const CommonFlags& f, std::size_t default_n) {
  Resolved r;
  r.cfg = load_config(f.config);
  const json& cfg = r.cfg;

  if (f.scenario) {
    r.scenario_ref = *f.scenario;
  } else if (cfg.contains("scenario") && cfg["scenario"].is_object()) {
    r.scenario_ref = "inline";
    try {
      r.doc = scenario_from_json(cfg["scenario"]);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config /scenario: ") + e.what());
    }
  } else {
    r.scenario_ref = cfg_get<std::string>(cfg, "/scenario").value_or("default");
  }
  if (r.scenario_ref == "default")
    r.doc = default_scenario_document();
  else if (r.scenario_ref != "inline")
    r.doc = load_scenario(r.scenario_ref);

  auto steps = pick(f.steps, cfg_get<std::size_t>(cfg, "/sampler/steps"), r.doc.schedule.steps);
  if (steps != r.doc.schedule.steps) r.doc.schedule = r.doc.schedule.with_steps(steps);
  r.sampler.steps = steps;
  r.sampler.scheduler = parse_scheduler(
      pick(f.scheduler, cfg_get<std::string>(cfg, "/sampler/scheduler"), std::string("ddim")));
  r.sampler.seed = pick(f.seed, cfg_get<std::uint64_t>(cfg, "/sampler/seed"), std::uint64_t{0});
  r.sampler.variant = parse_variant(
      cfg_get<std::string>(cfg, "/sampler/variant").value_or("full-dcr"));

  GuidanceConfig g;
  auto w = f.w ? f.w : cfg_get<double>(cfg, "/guidance/w");
  if (!w) w = r.doc.guidance_w;
  if (!w) throw ConfigError("guidance scale w is not set (use --w, guidance.w or the scenario)");
  g.w = *w;
  g.w_attr = pick(f.w_attr, cfg_get<double>(cfg, "/guidance/w_attr"), g.w_attr);
  g.eta = pick(f.eta, cfg_get<double>(cfg, "/guidance/eta"), g.eta);
  g.gamma = pick(f.gamma, cfg_get<double>(cfg, "/guidance/gamma"), g.gamma);
  g.r_s = pick(f.r_s, cfg_get<double>(cfg, "/guidance/r_s"), g.r_s);
  g.r_e = pick(f.r_e, cfg_get<double>(cfg, "/guidance/r_e"), g.r_e);
  g.eps_stab = pick(f.eps_stab, cfg_get<double>(cfg, "/guidance/eps_stab"), g.eps_stab);
  r.sampler.guidance = g;

  r.n = pick(f.n, cfg_get<std::size_t>(cfg, "/sampler/n"), default_n);
  if (r.n == 0) throw ConfigError("n must be >= 1");
  r.threads = pick(f.threads, cfg_get<std::size_t>(cfg, "/sampler/threads"), std::size_t{1});
  if (r.threads == 0) throw ConfigError("threads must be >= 1");
  r.out_dir = pick(f.out, cfg_get<std::string>(cfg, "/out"), std::string("dcr-out"));
  r.strict = f.strict || cfg_get<bool>(cfg, "/strict").value_or(false);
  r.sampler.validate();
  return r;
}

ojson guidance_json(const GuidanceConfig& g) {
  ojson j;
  j["w"] = g.w;
  j["w_attr"] = g.w_attr;
  j["eta"] = g.eta;
  j["gamma"] = g.gamma;
  j["r_s"] = g.r_s;
  j["r_e"] = g.r_e;
  j["eps_stab"] = g.eps_stab;
  return j;
}

// Resolved configuration in the config-file format, so a manifest replays the run.
ojson config_json(const Resolved& r) {
  ojson c;
  c["scenario"] = scenario_to_json(r.doc);
  ojson s;
  s["steps"] = r.sampler.steps;
  s["scheduler"] = to_string(r.sampler.scheduler);
  s["seed"] = r.sampler.seed;
  s["variant"] = to_string(r.sampler.variant);
  s["n"] = r.n;
  s["threads"] = r.threads;
  c["sampler"] = s;
  c["guidance"] = guidance_json(r.sampler.guidance);
  c["out"] = r.out_dir;
  c["strict"] = r.strict;
  return c;
}

struct Endpoints {
  EndpointConfig judge, embedding, caption, text_model;
};

EndpointConfig endpoint_from_config(const json& cfg, const std::string& key) {
  EndpointConfig e;
  std::string base = "/endpoints/" + key;
  e.url = cfg_get<std::string>(cfg, base + "/url").value_or("");
  e.model = cfg_get<std::string>(cfg, base + "/model").value_or("");
  e.api_key = cfg_get<std::string>(cfg, base + "/api_key").value_or("");
  if (auto t = cfg_get<double>(cfg, base + "/timeout_s")) e.timeout_s = *t;
  return e;
}

EndpointConfig resolve_endpoint(const json& cfg, const std::string& key, const std::string& env,
                                const std::optional<std::string>& url,
                                const std::optional<std::string>& model) {
  EndpointConfig e = EndpointConfig::from_env(env).overlay(endpoint_from_config(cfg, key));
  if (auto t = cfg_get<double>(cfg, "/endpoints/" + key + "/timeout_s")) e.timeout_s = *t;
  EndpointConfig flags;
  flags.url = url.value_or("");
  flags.model = model.value_or("");
  return e.overlay(flags);
}

// Credentials are never written out.
ojson endpoint_json(const EndpointConfig& e) {
  ojson j;
  j["url"] = e.url;
  j["model"] = e.model;
  j["api_key_set"] = !e.api_key.empty();
  j["timeout_s"] = e.timeout_s;
  return j;
}

class Manifest {
 public:
  Manifest(std::string command, const std::vector<std::string>& args, const Resolved& r)
      : started_(utc_now()) {
    doc_["schema"] = kManifestSchema;
    doc_["command"] = std::move(command);
    doc_["version"] = DCR_VERSION;
    doc_["argv"] = args;
    doc_["seed"] = r.sampler.seed;
    doc_["scenario_ref"] = r.scenario_ref;
    doc_["config"] = config_json(r);
  }
  ojson& config() { return doc_["config"]; }
  ojson& doc() { return doc_; }
  void artifact(const std::string& name) { artifacts_.push_back(name); }

  void write(const std::string& dir) {
    doc_["started_utc"] = started_;
    doc_["finished_utc"] = utc_now();
    doc_["artifacts"] = artifacts_;
    std::ofstream out(fs::path(dir) / kManifestFile);
    if (!out) throw Error("cannot write manifest in '" + dir + "'");
    out << doc_.dump(2) << "\n";
  }

 private:
  ojson doc_;
  std::string started_;
  std::vector<std::string> artifacts_;
};

std::ofstream open_out(const std::string& dir, const std::string& name) {
  std::ofstream out(fs::path(dir) / name);
  if (!out) throw Error("cannot write '" + (fs::path(dir) / name).string() + "'");
  return out;
}

void prepare_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory '" + dir + "': " + ec.message());
}

// ---------------------------------------------------------------- runs

struct CollapseSummary {
  std::size_t n_ok = 0;
  std::size_t failures = 0;
  std::size_t collapsed = 0;
  double fraction = 0.0;
  Interval ci;
  double mean_lambda = 0.0;
  double active_fraction = 0.0;  // steps with lambda > 0
};

CollapseSummary summarize_runs(const BatchResult& res, const BiasScenario& scenario) {
  CollapseSummary s;
  s.failures = res.failures;
  RunningStat lambda;
  std::size_t steps = 0, active = 0;
  for (const auto& run : res.runs) {
    if (!run.trace) continue;
    ++s.n_ok;
    if (mode_assignment(run.trace->final_latent, scenario) == scenario.dominant_index) ++s.collapsed;
    for (const auto& st : run.trace->steps) {
      lambda.add(st.diagnostics.lambda_t);
      ++steps;
      if (st.diagnostics.lambda_t > 0.0) ++active;
    }
  }
  if (s.n_ok > 0) {
    s.fraction = static_cast<double>(s.collapsed) / static_cast<double>(s.n_ok);
    s.ci = wilson_interval(s.collapsed, s.n_ok);
  }
  if (steps > 0) {
    s.mean_lambda = lambda.stat().mean;
    s.active_fraction = static_cast<double>(active) / static_cast<double>(steps);
  }
  return s;
}

std::string trajectory_id(const BatchRun& run) {
  return run.item_id + "/" + std::to_string(run.replicate);
}

void report_failures(const BatchResult& res, std::ostream& err, ojson* sink) {
  for (const auto& run : res.runs) {
    if (run.trace) continue;
    err << "trajectory " << trajectory_id(run) << " failed: " << run.error << "\n";
    if (sink) {
      ojson f;
      f["trajectory_id"] = trajectory_id(run);
      f["seed"] = run.seed;
      f["step"] = run.failed_step ? json(*run.failed_step) : json();
      f["error"] = run.error;
      sink->push_back(f);
    }
  }
}

int finish(bool strict, std::size_t failures) {
  return strict && failures > 0 ? kRuntime : kOk;
}

const std::vector<BatchItem> kScenarioItems = {BatchItem{"scenario", PromptPair{}}};

// ---------------------------------------------------------------- sample

struct SampleFlags {
  CommonFlags common;
  std::optional<std::string> variant;
};

int cmd_sample(const SampleFlags& f, const std::vector<std::string>& args, std::ostream& out,
               std::ostream& err) {
  Resolved r = resolve(f.common, 100);
  if (f.variant) r.sampler.variant = parse_variant(*f.variant);
  ToyDenoiser backend(r.doc.scenario, r.doc.schedule.build());
  BatchResult res = run_batch(backend, kScenarioItems, r.sampler, r.n, r.threads);

  prepare_dir(r.out_dir);
  Manifest manifest("sample", args, r);
  {
    auto traces = open_out(r.out_dir, "traces.jsonl");
    traces << json{{"manifest", kManifestFile}}.dump() << "\n";
    for (const auto& run : res.runs)
      if (run.trace) write_trace_jsonl(traces, trajectory_id(run), *run.trace);
    manifest.artifact("traces.jsonl");
  }
  {
    auto csv = open_out(r.out_dir, "samples.csv");
    csv << "# manifest: " << kManifestFile << "\n";
    std::size_t dim = r.doc.scenario.base.dim();
    csv << "trajectory_id,seed,status,mode";
    for (std::size_t k = 0; k < dim; ++k) csv << ",x" << k;
    csv << "\n";
    const auto& comps = r.doc.scenario.base.components;
    for (const auto& run : res.runs) {
      csv << trajectory_id(run) << "," << run.seed << ",";
      if (run.trace) {
        csv << "ok," << comps[mode_assignment(run.trace->final_latent, r.doc.scenario)].name;
        for (double v : run.trace->final_latent) csv << "," << num(v);
      } else {
        csv << "failed,";
        for (std::size_t k = 0; k < dim; ++k) csv << ",";
      }
      csv << "\n";
    }
    manifest.artifact("samples.csv");
  }
  ojson failures = ojson::array();
  report_failures(res, err, &failures);
  CollapseSummary s = summarize_runs(res, r.doc.scenario);
  manifest.doc()["failures"] = failures;
  manifest.doc()["collapse_fraction"] = s.fraction;
  manifest.write(r.out_dir);

  out << to_string(r.sampler.variant) << ": " << s.n_ok << " trajectories, " << s.failures
      << " failed, collapse fraction " << num(s.fraction, 4) << " [" << num(s.ci.lo, 4) << ", "
      << num(s.ci.hi, 4) << "] -> " << r.out_dir << "\n";
  return finish(r.strict, s.failures);
}

// ---------------------------------------------------------------- ablate

struct AblateFlags {
  CommonFlags common;
  std::vector<std::string> variants;
  bool variants_given = false;
};

const char* kRunColumns =
    "n,failures,collapse_fraction,wilson_lo,wilson_hi,mean_lambda,active_fraction";

std::string run_columns(const CollapseSummary& s) {
  return std::to_string(s.n_ok) + "," + std::to_string(s.failures) + "," + num(s.fraction, 10) +
         "," + num(s.ci.lo, 10) + "," + num(s.ci.hi, 10) + "," + num(s.mean_lambda, 10) + "," +
         num(s.active_fraction, 10);
}

ojson run_json(const CollapseSummary& s) {
  ojson j;
  j["n"] = s.n_ok;
  j["failures"] = s.failures;
  j["collapse_fraction"] = s.fraction;
  j["wilson_lo"] = s.ci.lo;
  j["wilson_hi"] = s.ci.hi;
  j["mean_lambda"] = s.mean_lambda;
  j["active_fraction"] = s.active_fraction;
  return j;
}

int cmd_ablate(const AblateFlags& f, const std::vector<std::string>& args, std::ostream& out,
               std::ostream& err) {
  Resolved r = resolve(f.common, 2000);
  std::vector<std::string> names;
  if (f.variants_given)
    names = f.variants;
  else if (auto v = cfg_get<std::vector<std::string>>(r.cfg, "/ablate/variants"))
    names = *v;
  else
    for (Variant v : kAllVariants) names.push_back(to_string(v));
  names.erase(std::remove(names.begin(), names.end(), std::string()), names.end());
  if (names.empty()) throw ConfigError("variant list is empty");
  std::vector<Variant> variants;
  for (const auto& n : names) variants.push_back(parse_variant(n));

  ToyDenoiser backend(r.doc.scenario, r.doc.schedule.build());
  prepare_dir(r.out_dir);
  Manifest manifest("ablate", args, r);
  manifest.config()["ablate"]["variants"] = names;

  auto csv = open_out(r.out_dir, "ablation.csv");
  csv << "# manifest: " << kManifestFile << "\n";
  csv << "variant," << kRunColumns << "\n";
  ojson rows = ojson::array();
  ojson failures = ojson::array();
  std::size_t total_failures = 0;
  for (Variant v : variants) {
    SamplerConfig sc = r.sampler;
    sc.variant = v;
    BatchResult res = run_batch(backend, kScenarioItems, sc, r.n, r.threads);
    report_failures(res, err, &failures);
    CollapseSummary s = summarize_runs(res, r.doc.scenario);
    total_failures += s.failures;
    csv << to_string(v) << "," << run_columns(s) << "\n";
    ojson row;
    row["variant"] = to_string(v);
    row.update(run_json(s));
    rows.push_back(row);
    out << to_string(v) << ": collapse fraction " << num(s.fraction, 4) << " [" << num(s.ci.lo, 4)
        << ", " << num(s.ci.hi, 4) << "], n=" << s.n_ok << ", failed=" << s.failures << "\n";
  }
  csv.close();
  manifest.artifact("ablation.csv");
  {
    auto js = open_out(r.out_dir, "ablation.json");
    js << ojson{{"manifest", kManifestFile}, {"rows", rows}}.dump(2) << "\n";
    manifest.artifact("ablation.json");
  }
  manifest.doc()["failures"] = failures;
  manifest.write(r.out_dir);
  return finish(r.strict, total_failures);
}

// ---------------------------------------------------------------- sweep

struct SweepFlags {
  CommonFlags common;
  std::optional<std::string> axis;
  std::optional<std::vector<std::string>> values;
};

double parse_number(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw ConfigError(what + " '" + s + "' is not a number");
  return v;
}

GuidanceConfig apply_axis(GuidanceConfig g, const std::string& axis, const std::string& value) {
  if (axis == "w_attr") {
    g.w_attr = parse_number(value, "w_attr value");
  } else if (axis == "eta") {
    g.eta = parse_number(value, "eta value");
  } else if (axis == "interval") {
    auto colon = value.find(':');
    if (colon == std::string::npos) throw ConfigError("interval '" + value + "' must be r_s:r_e");
    g.r_s = parse_number(value.substr(0, colon), "interval start");
    g.r_e = parse_number(value.substr(colon + 1), "interval end");
  } else {
    throw ConfigError("unknown sweep axis '" + axis + "' (w_attr, eta, interval)");
  }
  g.validate();
  return g;
}

int cmd_sweep(const SweepFlags& f, const std::vector<std::string>& args, std::ostream& out,
              std::ostream& err) {
  Resolved r = resolve(f.common, 2000);
  std::string axis = pick(f.axis, cfg_get<std::string>(r.cfg, "/sweep/axis"), std::string());
  if (axis.empty()) throw ConfigError("sweep needs --axis (w_attr, eta, interval)");
  std::vector<std::string> values;
  if (f.values) {
    values = *f.values;
  } else if (r.cfg.contains(json::json_pointer("/sweep/values"))) {
    for (const auto& v : r.cfg.at(json::json_pointer("/sweep/values")))
      values.push_back(v.is_string() ? v.get<std::string>() : v.dump());
  }
  values.erase(std::remove(values.begin(), values.end(), std::string()), values.end());
  if (values.empty()) throw ConfigError("sweep needs at least one value");

  std::vector<GuidanceConfig> configs;
  for (const auto& v : values) configs.push_back(apply_axis(r.sampler.guidance, axis, v));

  ToyDenoiser backend(r.doc.scenario, r.doc.schedule.build());
  prepare_dir(r.out_dir);
  Manifest manifest("sweep", args, r);
  manifest.config()["sweep"] = ojson{{"axis", axis}, {"values", values}};

  auto csv = open_out(r.out_dir, "sweep.csv");
  csv << "# manifest: " << kManifestFile << "\n";
  csv << "axis,value,variant,w_attr,eta,r_s,r_e," << kRunColumns << "\n";
  ojson rows = ojson::array();
  ojson failures = ojson::array();
  std::size_t total_failures = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    SamplerConfig sc = r.sampler;
    sc.guidance = configs[i];
    BatchResult res = run_batch(backend, kScenarioItems, sc, r.n, r.threads);
    report_failures(res, err, &failures);
    CollapseSummary s = summarize_runs(res, r.doc.scenario);
    total_failures += s.failures;
    const auto& g = configs[i];
    csv << axis << "," << values[i] << "," << to_string(sc.variant) << "," << num(g.w_attr, 10)
        << "," << num(g.eta, 10) << "," << num(g.r_s, 10) << "," << num(g.r_e, 10) << ","
        << run_columns(s) << "\n";
    ojson row;
    row["axis"] = axis;
    row["value"] = values[i];
    row["variant"] = to_string(sc.variant);
    row["w_attr"] = g.w_attr;
    row["eta"] = g.eta;
    row["r_s"] = g.r_s;
    row["r_e"] = g.r_e;
    row.update(run_json(s));
    rows.push_back(row);
    out << axis << "=" << values[i] << ": collapse fraction " << num(s.fraction, 4) << " ["
        << num(s.ci.lo, 4) << ", " << num(s.ci.hi, 4) << "]\n";
  }
  csv.close();
  manifest.artifact("sweep.csv");
  {
    auto js = open_out(r.out_dir, "sweep.json");
    js << ojson{{"manifest", kManifestFile}, {"rows", rows}}.dump(2) << "\n";
    manifest.artifact("sweep.json");
  }
  manifest.doc()["failures"] = failures;
  manifest.write(r.out_dir);
  return finish(r.strict, total_failures);
}

// ---------------------------------------------------------------- bench

struct BenchFlags {
  CommonFlags common;
  std::optional<std::string> suite, frames_dir, method, audit_log;
  std::optional<std::string> judge_url, judge_model, embed_url, embed_model, caption_url,
      caption_model;
  std::optional<std::size_t> frames_per_item, max_in_flight;
  bool canonical = false;
  bool with_judge = false;
  bool stub_providers = false;
};

std::vector<std::string> category_names() {
  std::vector<std::string> out;
  for (Category c : kAllCategories) out.push_back(to_string(c));
  return out;
}

std::vector<std::string> judge_factors(const BenchPrompt& item) {
  std::vector<std::string> out;
  for (const auto& f : item.factors) {
    std::string s = f.name + ": ";
    if (f.threshold) {
      s += "at most " + num(*f.threshold, 6);
    } else {
      for (std::size_t i = 0; i < f.allowed.size(); ++i) s += (i ? " or " : "") + f.allowed[i];
    }
    out.push_back(s);
  }
  return out;
}

std::vector<Frame> load_item_frames(const fs::path& dir, std::size_t count) {
  if (!fs::is_directory(dir)) throw MetricError("no frame directory '" + dir.string() + "'");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg"))
      files.push_back(e.path());
  }
  if (files.empty()) throw MetricError("no PNG/JPEG frames in '" + dir.string() + "'");
  std::sort(files.begin(), files.end());
  std::vector<Frame> frames;
  for (std::size_t i : uniform_frame_indices(files.size(), count))
    frames.push_back(load_frame(files[i].string()));
  return frames;
}

std::map<std::string, std::string> load_stub_captions(const fs::path& path) {
  std::map<std::string, std::string> out;
  if (!fs::exists(path)) return out;
  std::ifstream in(path);
  try {
    out = json::parse(in).get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw ConfigError("captions file '" + path.string() + "': " + e.what());
  }
  return out;
}

int cmd_bench(const BenchFlags& f, const std::vector<std::string>& args, std::ostream& out,
              std::ostream& err) {
  Resolved r = resolve(f.common, 20);
  const json& cfg = r.cfg;
  auto suite_path = pick(f.suite, cfg_get<std::string>(cfg, "/suite"), std::string());
  if (suite_path.empty()) throw ConfigError("bench needs --suite or a 'suite' config entry");
  bool canonical = f.canonical || cfg_get<bool>(cfg, "/canonical").value_or(false);
  auto frames_dir = pick(f.frames_dir, cfg_get<std::string>(cfg, "/frames_dir"), std::string());
  bool with_judge = f.with_judge || cfg_get<bool>(cfg, "/with_judge").value_or(false);
  bool stubs = f.stub_providers || cfg_get<bool>(cfg, "/stub_providers").value_or(false);
  std::size_t frames_per_item =
      pick(f.frames_per_item, cfg_get<std::size_t>(cfg, "/frames_per_item"), std::size_t{8});
  if (frames_per_item == 0) throw ConfigError("frames_per_item must be >= 1");

  Endpoints ep;
  ep.judge = resolve_endpoint(cfg, "judge", "DCR_JUDGE", f.judge_url, f.judge_model);
  ep.embedding = resolve_endpoint(cfg, "embedding", "DCR_EMBED", f.embed_url, f.embed_model);
  ep.caption = resolve_endpoint(cfg, "caption", "DCR_CAPTION", f.caption_url, f.caption_model);
  if (with_judge && !ep.judge.configured())
    throw ConfigError("--with-judge needs a judge endpoint (DCR_JUDGE_URL, --judge-url or endpoints.judge)");
  if (with_judge && frames_dir.empty()) throw ConfigError("--with-judge needs --frames-dir");

  BenchSuite suite = load_suite(suite_path, canonical);
  std::optional<std::map<std::string, ToyExtractorKind>> kinds;
  if (cfg.contains("extractors")) {
    kinds.emplace();
    std::map<std::string, std::string> raw;
    try {
      raw = cfg["extractors"].get<std::map<std::string, std::string>>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config /extractors: ") + e.what());
    }
    for (const auto& [name, kind] : raw) (*kinds)[name] = parse_toy_extractor(kind);
  }

  prepare_dir(r.out_dir);
  Manifest manifest("bench", args, r);
  manifest.config()["suite"] = suite_path;
  manifest.config()["canonical"] = canonical;
  ojson endpoints;
  endpoints["judge"] = endpoint_json(ep.judge);
  endpoints["embedding"] = endpoint_json(ep.embedding);
  endpoints["caption"] = endpoint_json(ep.caption);
  manifest.doc()["endpoints"] = endpoints;

  std::vector<MetricRow> rows;
  std::vector<std::string> notes;
  std::size_t failures = 0;
  std::string method = f.method.value_or(to_string(r.sampler.variant));

  if (frames_dir.empty()) {
    // Toy mapping: every item samples the scenario, factors come from extractors.
    if (kinds) {
      std::set<std::string> available;
      for (const auto& [name, _] : *kinds) available.insert(name);
      auto missing = missing_extractors(suite, available);
      if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw ConfigError("no extractor configured for factors: " + list);
      }
      std::map<std::string, std::string> names;
      for (const auto& [name, kind] : *kinds) names[name] = to_string(kind);
      manifest.config()["extractors"] = names;
    }
    ToyDenoiser backend(r.doc.scenario, r.doc.schedule.build());
    std::vector<BatchItem> items;
    for (const auto& it : suite.items) items.push_back(BatchItem{it.id, PromptPair{}});
    BatchResult res = run_batch(backend, items, r.sampler, r.n, r.threads);
    ojson fail = ojson::array();
    report_failures(res, err, &fail);
    manifest.doc()["failures"] = fail;
    failures += res.failures;

    std::size_t pos = 0;
    for (const auto& item : suite.items) {
      ExtractorMap ex = make_toy_extractors(item, r.doc.scenario, kinds ? &*kinds : nullptr);
      std::size_t ok = 0, collapsed = 0, satisfied = 0;
      for (std::size_t k = 0; k < r.n; ++k, ++pos) {
        const auto& run = res.runs[pos];
        if (!run.trace) continue;
        ++ok;
        ConstraintResult c = eval_constraint(run.trace->final_latent, item, ex);
        collapsed += c.collapsed;
        satisfied += c.satisfied;
      }
      if (ok == 0) {
        notes.push_back("item '" + item.id + "': every trajectory failed; excluded");
        continue;
      }
      MetricRow row;
      row.item_id = item.id;
      row.group = to_string(item.category);
      row.collapse_fraction = static_cast<double>(collapsed) / static_cast<double>(ok);
      row.constraint_rate = static_cast<double>(satisfied) / static_cast<double>(ok);
      rows.push_back(row);
    }
  } else {
    std::unique_ptr<EmbeddingProvider> embed;
    std::unique_ptr<CaptionProvider> caption;
    if (ep.embedding.configured())
      embed = std::make_unique<HttpEmbeddingProvider>(
          std::make_shared<HttpJsonTransport>(ep.embedding), ep.embedding.model);
    else if (stubs)
      embed = std::make_unique<StubEmbeddingProvider>();
    if (ep.caption.configured())
      caption = std::make_unique<HttpCaptionProvider>(
          std::make_shared<HttpJsonTransport>(ep.caption), ep.caption.model);
    else if (stubs) {
      auto caps = load_stub_captions(fs::path(frames_dir) / "captions.json");
      if (!caps.empty()) caption = std::make_unique<StubCaptionProvider>(std::move(caps));
    }
    if (!embed && !with_judge)
      throw ConfigError("frame metrics need an embedding endpoint (DCR_EMBED_URL), "
                        "--stub-providers or --with-judge");
    manifest.config()["frames_dir"] = frames_dir;
    manifest.config()["frames_per_item"] = frames_per_item;
    manifest.config()["stub_providers"] = stubs;

    std::vector<const BenchPrompt*> judged;
    std::vector<JudgeRequest> requests;
    for (const auto& item : suite.items) {
      MetricRow row;
      row.item_id = item.id;
      row.group = to_string(item.category);
      try {
        auto frames = load_item_frames(fs::path(frames_dir) / item.id, frames_per_item);
        if (embed) {
          row.clip_score = clip_alignment(frames, item.prompt, *embed);
          row.clip_attr = clip_alignment(frames, item.attractor_prompt, *embed);
          if (caption) {
            AlignmentResult a = caption_alignment(frames, item.prompt, *caption, *embed);
            row.caption_alignment = a.value;
            for (const auto& e : a.errors) notes.push_back("item '" + item.id + "': " + e);
          }
        }
        if (with_judge) {
          JudgeRequest req;
          req.prompt_p = item.prompt;
          req.factors = judge_factors(item);
          req.attractor = item.attractor_prompt;
          req.frames = std::move(frames);
          requests.push_back(std::move(req));
          judged.push_back(&item);
        }
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        ++failures;
        notes.push_back("item '" + item.id + "' excluded: " + e.what());
        err << "item " << item.id << " excluded: " << e.what() << "\n";
        continue;
      }
      rows.push_back(row);
    }
    if (with_judge && !requests.empty()) {
      JudgeClientConfig jc;
      jc.endpoint = ep.judge;
      jc.audit_log_path = f.audit_log.value_or((fs::path(r.out_dir) / "judge_audit.jsonl").string());
      jc.max_in_flight = f.max_in_flight.value_or(4);
      jc.frames_per_request = frames_per_item;
      JudgeClient judge(jc);
      auto outcomes = judge.judge_batch(requests);
      std::map<std::string, const JudgeOutcome*> by_id;
      for (std::size_t i = 0; i < outcomes.size(); ++i) by_id[judged[i]->id] = &outcomes[i];
      for (auto& row : rows) {
        auto it = by_id.find(row.item_id);
        if (it == by_id.end()) continue;
        const JudgeOutcome& o = *it->second;
        if (o.verdict) {
          row.judge_score = o.verdict->score;
          row.collapsed = o.verdict->collapsed;
        } else {
          ++failures;
          notes.push_back("item '" + row.item_id + "': judge failed: " + o.error);
          err << "judge failed for " << row.item_id << ": " << o.error << "\n";
        }
      }
      manifest.artifact(fs::path(jc.audit_log_path).filename().string());
      manifest.doc()["judge_retries"] = judge.total_retries();
    }
  }

  ScoreReport report = aggregate_report(rows, Grouping::ByCategory, method, category_names());
  report.notes.insert(report.notes.end(), notes.begin(), notes.end());
  {
    auto csv = open_out(r.out_dir, "report.csv");
    csv << "# manifest: " << kManifestFile << "\n";
    write_report_csv(csv, {report});
    manifest.artifact("report.csv");
  }
  {
    auto js = open_out(r.out_dir, "report.json");
    js << report_to_json({report}, kManifestFile).dump(2) << "\n";
    manifest.artifact("report.json");
  }
  manifest.doc()["failure_count"] = failures;
  manifest.write(r.out_dir);

  for (const auto& g : report.groups) {
    out << g.group << ": n=" << g.n;
    if (g.collapse_fraction) out << " collapse=" << num(g.collapse_fraction->mean, 4);
    if (g.constraint_rate) out << " constraint=" << num(g.constraint_rate->mean, 4);
    if (g.clip_score) out << " clip=" << num(g.clip_score->mean, 4);
    if (g.clip_attr) out << " clip_attr=" << num(g.clip_attr->mean, 4);
    if (g.caption_alignment) out << " caption=" << num(g.caption_alignment->mean, 4);
    if (g.ccs) out << " ccs=" << num(g.ccs->mean, 4);
    if (g.cvr) out << " cvr=" << num(g.cvr->mean, 4);
    out << "\n";
  }
  for (const auto& n : report.notes) out << "note: " << n << "\n";
  return finish(r.strict, failures);
}

// ---------------------------------------------------------------- scenario

int cmd_scenario(const std::optional<std::string>& path, std::ostream& out) {
  auto doc = default_scenario_document();
  if (path) {
    save_scenario(*path, doc);
    out << "wrote " << *path << "\n";
  } else {
    out << scenario_to_json(doc).dump(2) << "\n";
  }
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Guided diffusion sampling with default-completion repulsion", "dcr"};
  app.require_subcommand(1);
  app.set_version_flag("--version", DCR_VERSION);

  SampleFlags sample_f;
  auto* sample = app.add_subcommand("sample", "Sample trajectories on the toy scenario");
  add_common(sample, sample_f.common);
  sample->add_option("--variant", sample_f.variant, "Guidance variant");

  AblateFlags ablate_f;
  auto* ablate = app.add_subcommand("ablate", "Compare guidance variants with shared seeds");
  add_common(ablate, ablate_f.common);
  auto* variants_opt =
      ablate->add_option("--variants", ablate_f.variants, "Comma-separated variants")->delimiter(',');

  SweepFlags sweep_f;
  auto* sweep = app.add_subcommand("sweep", "Sweep one guidance hyperparameter");
  add_common(sweep, sweep_f.common);
  sweep->add_option("--axis", sweep_f.axis, "w_attr, eta or interval")
      ->check(CLI::IsMember({"w_attr", "eta", "interval"}));
  sweep->add_option("--values", sweep_f.values, "Comma-separated values; intervals as r_s:r_e")
      ->delimiter(',');

  BenchFlags bench_f;
  auto* bench = app.add_subcommand("bench", "Evaluate a benchmark suite");
  add_common(bench, bench_f.common);
  bench->add_option("--suite", bench_f.suite, "Suite JSON file");
  bench->add_flag("--canonical", bench_f.canonical, "Require 50 items in each of the 8 categories");
  bench->add_option("--method", bench_f.method, "Method label in the report");
  bench->add_option("--frames-dir", bench_f.frames_dir, "Directory with one frame folder per item");
  bench->add_option("--frames-per-item", bench_f.frames_per_item, "Frames sampled per item")
      ->check(CLI::PositiveNumber);
  bench->add_flag("--with-judge", bench_f.with_judge, "Score frames with the external judge");
  bench->add_flag("--stub-providers", bench_f.stub_providers, "Use deterministic stub providers");
  bench->add_option("--audit-log", bench_f.audit_log, "Judge audit log (JSONL)");
  bench->add_option("--max-in-flight", bench_f.max_in_flight, "Concurrent judge requests")
      ->check(CLI::PositiveNumber);
  bench->add_option("--judge-url", bench_f.judge_url);
  bench->add_option("--judge-model", bench_f.judge_model);
  bench->add_option("--embed-url", bench_f.embed_url);
  bench->add_option("--embed-model", bench_f.embed_model);
  bench->add_option("--caption-url", bench_f.caption_url);
  bench->add_option("--caption-model", bench_f.caption_model);

  std::optional<std::string> scenario_out;
  auto* scenario = app.add_subcommand("scenario", "Print or save the default scenario");
  scenario->add_option("--out", scenario_out, "Write to this file instead of stdout");

  std::vector<std::string> argv_store{"dcr"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e, out, err);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*sample) return cmd_sample(sample_f, args, out, err);
    if (*ablate) {
      ablate_f.variants_given = variants_opt->count() > 0;
      return cmd_ablate(ablate_f, args, out, err);
    }
    if (*sweep) return cmd_sweep(sweep_f, args, out, err);
    if (*bench) return cmd_bench(bench_f, args, out, err);
    if (*scenario) return cmd_scenario(scenario_out, out);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const ValidationError& e) {
    err << "invalid input: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    err << "invalid input: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, out, err);
}

}  // namespace dcr::cli
