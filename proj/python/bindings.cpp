#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dcr/bench.hpp"
#include "dcr/guidance.hpp"
#include "dcr/judge_client.hpp"
#include "dcr/metrics.hpp"
#include "dcr/sampler.hpp"
#include "dcr/toy_diffusion.hpp"

namespace py = pybind11;
using namespace dcr;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<double> to_vec(const Array& a) { return {a.data(), a.data() + a.size()}; }

Shape to_shape(const Array& a) {
  Shape s;
  for (py::ssize_t k = 0; k < a.ndim(); ++k) s.push_back(static_cast<std::size_t>(a.shape(k)));
  if (s.empty()) s.push_back(1);
  return s;
}

NoisePrediction to_eps(const Array& a) { return NoisePrediction(to_vec(a), to_shape(a)); }

template <typename Tag>
py::array_t<double> to_array(const LatentField<Tag>& f) {
  std::vector<py::ssize_t> shape(f.shape().begin(), f.shape().end());
  py::array_t<double> out(shape);
  std::copy(f.vec().begin(), f.vec().end(), out.mutable_data());
  return out;
}

py::array_t<double> to_array(const std::vector<double>& v) {
  py::array_t<double> out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::dict diagnostics_dict(const RepulsionDiagnostics& d) {
  py::dict out;
  out["s_t"] = d.s_t;
  out["n_t"] = d.n_t;
  out["alpha_t"] = d.alpha_t;
  out["lambda_t"] = d.lambda_t;
  out["collinearity_residual"] = d.collinearity_residual;
  return out;
}

GuidanceConfig make_guidance(double w, double w_attr, double eta, double gamma, double r_s,
                             double r_e, double eps_stab) {
  GuidanceConfig g;
  g.w = w;
  g.w_attr = w_attr;
  g.eta = eta;
  g.gamma = gamma;
  g.r_s = r_s;
  g.r_e = r_e;
  g.eps_stab = eps_stab;
  g.validate();
  return g;
}

struct ToyModel {
  ScenarioDocument doc;
  ToyDenoiser denoiser;

  explicit ToyModel(ScenarioDocument d)
      : doc(std::move(d)), denoiser(doc.scenario, doc.schedule.build()) {}
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Guided diffusion sampling with attractor repulsion";
  m.attr("__version__") = DCR_VERSION;

  auto base = py::register_exception<Error>(m, "DcrError", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<TrajectoryError>(m, "TrajectoryError", base.ptr());
  py::register_exception<MetricError>(m, "MetricError", base.ptr());
  auto verdict = py::register_exception<VerdictError>(m, "VerdictError", base.ptr());
  py::register_exception<JudgeParseError>(m, "JudgeParseError", verdict.ptr());

  py::class_<GuidanceConfig>(m, "GuidanceConfig")
      .def(py::init(&make_guidance), py::arg("w"), py::arg("w_attr") = 3.0, py::arg("eta") = 1.0,
           py::arg("gamma") = 2.0, py::arg("r_s") = 0.2, py::arg("r_e") = 0.8,
           py::arg("eps_stab") = 1e-8)
      .def_readwrite("w", &GuidanceConfig::w)
      .def_readwrite("w_attr", &GuidanceConfig::w_attr)
      .def_readwrite("eta", &GuidanceConfig::eta)
      .def_readwrite("gamma", &GuidanceConfig::gamma)
      .def_readwrite("r_s", &GuidanceConfig::r_s)
      .def_readwrite("r_e", &GuidanceConfig::r_e)
      .def_readwrite("eps_stab", &GuidanceConfig::eps_stab)
      .def("validate", &GuidanceConfig::validate);

  m.def("cfg_update", [](const Array& u, const Array& c, double w) {
    return to_array(cfg_update(to_eps(u), to_eps(c), w));
  }, py::arg("eps_uncond"), py::arg("eps_text"), py::arg("w"));

  m.def("attractor_drift", [](const Array& u, const Array& c, const Array& a, double w, double w_attr) {
    return to_array(attractor_drift(to_eps(u), to_eps(c), to_eps(a), w, w_attr));
  }, py::arg("eps_uncond"), py::arg("eps_text"), py::arg("eps_attr"), py::arg("w"), py::arg("w_attr"));

  m.def("schedule_alpha", [](std::size_t index, std::size_t total, const GuidanceConfig& g) {
    return schedule_alpha({index, total}, g);
  }, py::arg("index"), py::arg("total"), py::arg("config"));

  m.def("collinearity_residual", [](const Array& drift, const Array& delta) {
    return collinearity_residual(GuidanceUpdate(to_vec(drift), to_shape(drift)),
                                 GuidanceUpdate(to_vec(delta), to_shape(delta)));
  }, py::arg("drift"), py::arg("delta"));

  m.def("guided_prediction",
        [](const Array& u, const Array& c, const Array& a, std::size_t index, std::size_t total,
           const GuidanceConfig& g, const std::string& mode) {
          RepulsionMode rm = mode == "scheduled"     ? RepulsionMode::Scheduled
                             : mode == "unscheduled" ? RepulsionMode::Unscheduled
                             : mode == "disabled"    ? RepulsionMode::Disabled
                                                     : throw ConfigError("unknown mode: " + mode);
          auto out = dcr_guided_prediction(to_eps(u), to_eps(c), to_eps(a), {index, total}, g, rm);
          return py::make_tuple(to_array(out.eps), to_array(out.delta), diagnostics_dict(out.diagnostics));
        },
        py::arg("eps_uncond"), py::arg("eps_text"), py::arg("eps_attr"), py::arg("index"),
        py::arg("total"), py::arg("config"), py::arg("mode") = "scheduled",
        "Returns (eps_star, delta_star, diagnostics).");

  py::class_<ToyModel>(m, "ToyModel")
      .def(py::init([] { return std::make_unique<ToyModel>(default_scenario_document()); }))
      .def_static("from_file", [](const std::string& path) {
        return std::make_unique<ToyModel>(load_scenario(path));
      })
      .def_property_readonly("steps", [](const ToyModel& t) { return t.doc.schedule.steps; })
      .def_property_readonly("dim", [](const ToyModel& t) { return t.doc.scenario.base.dim(); })
      .def_property_readonly("dominant_index", [](const ToyModel& t) { return t.doc.scenario.dominant_index; })
      .def("alpha_bar", [](const ToyModel& t, std::size_t step) { return t.denoiser.schedule().alpha_bar(step); })
      .def("epsilon", [](const ToyModel& t, const Array& x, std::size_t step, const std::string& channel) {
        return to_array(t.denoiser.predict(to_vec(x), step, channel));
      }, py::arg("x"), py::arg("t"), py::arg("channel"))
      .def("mode", [](const ToyModel& t, const Array& x0) {
        return mode_assignment(to_vec(x0), t.doc.scenario);
      })
      .def("to_json", [](const ToyModel& t) { return scenario_to_json(t.doc).dump(); });

  m.def("sample",
        [](const ToyModel& model, const std::string& variant, const GuidanceConfig& g, std::uint64_t seed,
           const std::string& scheduler) {
          SamplerConfig cfg;
          cfg.steps = model.doc.schedule.steps;
          cfg.guidance = g;
          cfg.seed = seed;
          cfg.variant = parse_variant(variant);
          cfg.scheduler = parse_scheduler(scheduler);
          TrajectoryTrace trace;
          {
            py::gil_scoped_release release;
            trace = run_sampling(model.denoiser, PromptPair{}, cfg);
          }
          py::list steps;
          for (const auto& s : trace.steps) {
            auto d = diagnostics_dict(s.diagnostics);
            d["step"] = s.step;
            d["timestep"] = s.timestep;
            steps.append(d);
          }
          return py::make_tuple(to_array(trace.final_latent), steps);
        },
        py::arg("model"), py::arg("variant"), py::arg("config"), py::arg("seed") = 0,
        py::arg("scheduler") = "ddim", "Returns (final_latent, per-step diagnostics).");

  m.def("collapse_fraction",
        [](const ToyModel& model, const std::string& variant, const GuidanceConfig& g, std::size_t n,
           std::uint64_t seed, std::size_t threads) {
          SamplerConfig cfg;
          cfg.steps = model.doc.schedule.steps;
          cfg.guidance = g;
          cfg.seed = seed;
          cfg.variant = parse_variant(variant);
          std::size_t collapsed = 0, ok = 0;
          {
            py::gil_scoped_release release;
            auto res = run_batch(model.denoiser, {{"scenario", PromptPair{}}}, cfg, n, threads);
            for (const auto& r : res.runs) {
              if (!r.trace) continue;
              ++ok;
              collapsed += mode_assignment(r.trace->final_latent, model.doc.scenario) ==
                           model.doc.scenario.dominant_index;
            }
          }
          auto ci = wilson_interval(collapsed, ok);
          return py::make_tuple(ok ? double(collapsed) / double(ok) : 0.0, py::make_tuple(ci.lo, ci.hi), ok);
        },
        py::arg("model"), py::arg("variant"), py::arg("config"), py::arg("n"), py::arg("seed") = 0,
        py::arg("threads") = 1, "Returns (fraction, (lo, hi), completed trajectories).");

  m.def("variants", [] {
    std::vector<std::string> out;
    for (Variant v : kAllVariants) out.push_back(to_string(v));
    return out;
  });

  m.def("wilson_interval", [](std::size_t k, std::size_t n) {
    auto ci = wilson_interval(k, n);
    return py::make_tuple(ci.lo, ci.hi);
  }, py::arg("successes"), py::arg("n"));
  m.def("ccs", [](const std::vector<int>& s) { return ccs(s); });
  m.def("cvr", [](const std::vector<bool>& f) { return cvr(f); });

  m.def("parse_verdict", [](const std::string& raw) {
    auto v = parse_verdict(raw);
    return py::make_tuple(v.score, v.collapsed);
  }, py::arg("raw"), "Returns (score, collapsed).");

  m.def("render_attractor_template", [](const std::string& p) { return render_attractor_template(p); });

  m.def("load_suite", [](const std::string& path, bool canonical) {
    auto suite = load_suite(path, canonical);
    return suite_to_json(suite).dump();
  }, py::arg("path"), py::arg("canonical") = false, "Validated suite as a JSON string.");
}
