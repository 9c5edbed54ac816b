#include <doctest.h>

#include <fstream>
#include <numeric>

#include "dcr/toy_diffusion.hpp"
#include "support.hpp"

using namespace dcr;

namespace {

const PromptChannel& ch(const BiasScenario& s, const std::string& label) { return s.channel(label); }

// Self-normalized estimate of E[x0 | x_t]: prior draws weighted by p(x_t | x0).
struct McMean {
  std::vector<double> mean, se;
  double ess = 0.0;
};

McMean mc_posterior_mean(const std::vector<double>& x_t, double ab, const BiasScenario& s,
                         const std::vector<double>& weights, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  std::normal_distribution<double> normal;
  std::size_t d = x_t.size();
  double sa = std::sqrt(ab), var = 1.0 - ab;
  std::vector<std::vector<double>> xs(n, std::vector<double>(d));
  std::vector<double> logw(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& m = s.base.components[pick(rng)].mean;
    double q = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      xs[i][j] = m[j] + s.base.sigma0 * normal(rng);
      double r = x_t[j] - sa * xs[i][j];
      q += r * r;
    }
    logw[i] = -q / (2.0 * var);
  }
  double mx = *std::max_element(logw.begin(), logw.end());
  long double sw = 0, sw2 = 0;
  std::vector<long double> acc(d, 0.0L);
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = std::exp(logw[i] - mx);
    sw += w[i];
    sw2 += (long double)w[i] * w[i];
    for (std::size_t j = 0; j < d; ++j) acc[j] += w[i] * xs[i][j];
  }
  McMean out;
  out.mean.resize(d);
  out.se.assign(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) out.mean[j] = (double)(acc[j] / sw);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double dev = xs[i][j] - out.mean[j];
      out.se[j] += w[i] * w[i] * dev * dev;
    }
  for (std::size_t j = 0; j < d; ++j) out.se[j] = std::sqrt(out.se[j]) / (double)sw;
  out.ess = (double)(sw * sw / sw2);
  return out;
}

}  // namespace

TEST_SUITE("toy_diffusion") {
  TEST_CASE("mixture validation") {
    MixtureSpec m;
    m.sigma0 = 0.5;
    m.components = {{"a", {0.0}, 1.0}};
    CHECK_THROWS_AS(m.validate(), ValidationError);
    m.components = {{"a", {0.0}, 0.5}, {"b", {1.0}, 0.4}};
    CHECK_THROWS_AS(m.validate(), ValidationError);
    m.components = {{"a", {0.0}, 0.5}, {"b", {1.0, 2.0}, 0.5}};
    CHECK_THROWS_AS(m.validate(), DimensionError);
    m.components = {{"a", {0.0}, 0.5}, {"b", {INFINITY}, 0.5}};
    CHECK_THROWS_AS(m.validate(), ValidationError);
    m.components = {{"a", {0.0}, 0.5}, {"b", {1.0}, 0.5}};
    CHECK_NOTHROW(m.validate());
    m.sigma0 = 0.0;
    CHECK_THROWS_AS(m.validate(), ValidationError);
  }

  TEST_CASE("default scenario geometry") {
    auto s = default_bias_scenario();
    CHECK(s.base.dim() == 2);
    CHECK(s.base.sigma0 == 0.5);
    CHECK(s.base.components[s.dominant_index].mean == std::vector<double>{-3.0, 0.0});
    CHECK(s.base.components[s.rare_index].mean == std::vector<double>{3.0, 0.0});
    CHECK(s.pi_major == 0.9);
    CHECK(s.leakage_beta == 0.35);
    auto u = s.channel_weights(ch(s, "uncond"));
    CHECK(u[0] / (u[0] + u[1]) == doctest::Approx(0.9).epsilon(1e-12));
    auto t = s.channel_weights(ch(s, "target"));
    CHECK(t[s.dominant_index] == 0.35);
    CHECK(t[s.rare_index] == doctest::Approx(0.65).epsilon(1e-15));
    CHECK(s.channel_weights(ch(s, "attractor"))[s.dominant_index] >= s.pi_major);
  }

  TEST_CASE("bias scenario validation") {
    auto s = default_bias_scenario();
    auto bad = s;
    bad.channels["target"].weights_override = std::vector<double>{0.2, 0.8, 0.0};
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = s;
    bad.channels["attractor"].weights_override = std::vector<double>{0.5, 0.5, 0.0};
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = s;
    bad.channels.erase("attractor");
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = s;
    bad.channels["target"].weights_override = std::vector<double>{0.35, 0.65};
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = s;
    bad.pi_major = 0.5;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    CHECK_THROWS_AS(s.channel("nope"), ConfigError);
  }

  TEST_CASE("noise schedules") {
    auto lin = NoiseScheduleSpec::linear_logsnr(100, -20.0, 10.0);
    CHECK(lin.steps() == 100);
    CHECK(lin.alpha_bar(0) == 1.0);
    CHECK(lin.alpha_bar(1) == doctest::Approx(1.0 / (1.0 + std::exp(-10.0))).epsilon(1e-14));
    CHECK(lin.alpha_bar(100) == doctest::Approx(1.0 / (1.0 + std::exp(20.0))).epsilon(1e-12));
    auto cos = NoiseScheduleSpec::cosine(50);
    for (const auto* sched : {&lin, &cos}) {
      auto v = sched->values();
      for (std::size_t k = 0; k < v.size(); ++k) {
        CHECK(v[k] > 0.0);
        CHECK(v[k] <= 1.0);
        if (k) CHECK(v[k] < v[k - 1]);
      }
    }
    CHECK_THROWS_AS(lin.alpha_bar(101), ValidationError);
    CHECK_THROWS_AS(NoiseScheduleSpec({0.9}), ValidationError);
    CHECK_THROWS_AS(NoiseScheduleSpec({0.9, 0.9}), ValidationError);
    CHECK_THROWS_AS(NoiseScheduleSpec({1.1, 0.5}), ValidationError);
    CHECK_THROWS_AS(NoiseScheduleSpec({0.5, 0.0}), ValidationError);
    CHECK(ScheduleConfig{}.with_steps(37).build().steps() == 37);
  }

  TEST_CASE("responsibilities sum to one, even far from every mode") {
    auto s = default_bias_scenario();
    auto sched = ScheduleConfig{}.build();
    std::mt19937_64 rng(1);
    for (int rep = 0; rep < 500; ++rep) {
      double scale = rep % 5 == 0 ? 1e6 : 4.0;
      auto x = testing::random_vector(rng, 2, scale);
      std::size_t t = 1 + rng() % sched.steps();
      for (const char* label : {"uncond", "target", "attractor"}) {
        auto r = responsibilities(x, t, ch(s, label), s, sched);
        double sum = 0.0;
        for (double v : r) {
          CHECK(std::isfinite(v));
          CHECK(v >= 0.0);
          sum += v;
        }
        CHECK(std::fabs(sum - 1.0) <= 1e-12);
      }
    }
  }

  TEST_CASE("single effective component gives the Gaussian posterior") {
    auto s = default_bias_scenario();
    s.channels["solo"] = PromptChannel{ChannelKind::Custom, "solo", std::vector<double>{0.0, 1.0, 0.0}};
    auto sched = ScheduleConfig{}.build();
    std::mt19937_64 rng(2);
    const auto& m = s.base.components[1].mean;
    double s2 = s.base.sigma0 * s.base.sigma0;
    for (std::size_t t : {1u, 10u, 50u, 90u, 100u}) {
      double ab = sched.alpha_bar(t), sa = std::sqrt(ab);
      auto x = testing::random_vector(rng, 2, 3.0);
      auto pm = posterior_mean(x, t, ch(s, "solo"), s, sched);
      double gain = sa * s2 / (ab * s2 + 1.0 - ab);
      for (int j = 0; j < 2; ++j)
        CHECK(pm[j] == doctest::Approx(m[j] + gain * (x[j] - sa * m[j])).epsilon(1e-12));
    }
  }

  TEST_CASE("symmetric modes put the posterior mean on the bisector") {
    auto s = testing::line_scenario(4.0, 0.5);
    auto sched = ScheduleConfig{}.build();
    for (std::size_t t : {5u, 40u, 80u})
      CHECK(posterior_mean(std::vector<double>{0.0}, t, ch(s, "even"), s, sched)[0] ==
            doctest::Approx(0.0).epsilon(1e-15));
  }

  TEST_CASE("posterior mean agrees with a Monte-Carlo oracle") {
    auto s = default_bias_scenario();
    auto sched = ScheduleConfig{}.build();
    std::mt19937_64 rng(2024);
    int checked = 0;
    for (int point = 0; point < 8; ++point) {
      const char* label = point % 2 ? "target" : "uncond";
      auto weights = s.channel_weights(ch(s, label));
      std::size_t t = 30 + rng() % 70;
      std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
      std::vector<double> x0 = s.base.components[pick(rng)].mean;
      for (double& v : x0) v += s.base.sigma0 * std::normal_distribution<double>()(rng);
      auto x_t = forward_noising(x0, t, sched, rng);
      auto mc = mc_posterior_mean(x_t, sched.alpha_bar(t), s, weights, 1000000, 7 + point);
      REQUIRE(mc.ess > 1000.0);
      auto pm = posterior_mean(x_t, t, ch(s, label), s, sched);
      for (int j = 0; j < 2; ++j) {
        INFO("point " << point << " t=" << t << " coord " << j << " mc " << mc.mean[j] << " se " << mc.se[j]);
        CHECK(std::fabs(pm[j] - mc.mean[j]) <= 3.0 * mc.se[j]);
      }
      ++checked;
    }
    CHECK(checked == 8);
  }

  TEST_CASE("epsilon prediction") {
    auto sched = ScheduleConfig{}.build();
    SUBCASE("vanishes on the manifold of a sharp single mode") {
      auto s = testing::line_scenario(4.0, 1e-6);
      for (std::size_t t : {10u, 50u, 90u}) {
        std::vector<double> x{std::sqrt(sched.alpha_bar(t)) * -2.0};
        CHECK(std::fabs(epsilon_prediction(x, t, ch(s, "attractor"), s, sched)[0]) < 1e-9);
      }
    }
    SUBCASE("channels with different weights differ") {
      auto s = default_bias_scenario();
      std::vector<double> x{0.3, -0.2};
      auto u = epsilon_prediction(x, 50, ch(s, "uncond"), s, sched);
      auto c = epsilon_prediction(x, 50, ch(s, "target"), s, sched);
      CHECK(testing::max_abs_diff(u.vec(), c.vec()) > 1e-3);
    }
    SUBCASE("matches its definition from the posterior mean") {
      auto s = default_bias_scenario();
      std::vector<double> x{1.0, 0.5};
      double ab = sched.alpha_bar(40);
      auto pm = posterior_mean(x, 40, ch(s, "target"), s, sched);
      auto e = epsilon_prediction(x, 40, ch(s, "target"), s, sched);
      for (int j = 0; j < 2; ++j)
        CHECK(e[j] == doctest::Approx((x[j] - std::sqrt(ab) * pm[j]) / std::sqrt(1.0 - ab)));
    }
    SUBCASE("undefined at the clean end") {
      auto s = default_bias_scenario();
      CHECK_THROWS_AS(epsilon_prediction(std::vector<double>{0.0, 0.0}, 0, ch(s, "uncond"), s, sched),
                      ValidationError);
      CHECK_THROWS_AS(epsilon_prediction(std::vector<double>{0.0}, 5, ch(s, "uncond"), s, sched),
                      DimensionError);
    }
  }

  TEST_CASE("epsilon prediction beats other predictors in denoising MSE") {
    auto s = default_bias_scenario();
    auto sched = ScheduleConfig{}.build();
    auto weights = s.channel_weights(ch(s, "target"));
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    std::mt19937_64 rng(9);
    std::normal_distribution<double> normal;
    for (std::size_t t : {20u, 50u, 80u}) {
      double ab = sched.alpha_bar(t);
      const int n = 20000;
      double mse_opt = 0, mse_zero = 0, mse_scaled = 0, mse_shift = 0;
      for (int i = 0; i < n; ++i) {
        std::vector<double> x0 = s.base.components[pick(rng)].mean;
        for (double& v : x0) v += s.base.sigma0 * normal(rng);
        std::vector<double> z{normal(rng), normal(rng)}, x(2);
        for (int j = 0; j < 2; ++j) x[j] = std::sqrt(ab) * x0[j] + std::sqrt(1 - ab) * z[j];
        auto e = epsilon_prediction(x, t, ch(s, "target"), s, sched);
        for (int j = 0; j < 2; ++j) {
          mse_opt += (e[j] - z[j]) * (e[j] - z[j]);
          mse_zero += z[j] * z[j];
          mse_scaled += (1.1 * e[j] - z[j]) * (1.1 * e[j] - z[j]);
          mse_shift += (e[j] + 0.1 - z[j]) * (e[j] + 0.1 - z[j]);
        }
      }
      CHECK(mse_opt < mse_zero);
      CHECK(mse_opt < mse_scaled);
      CHECK(mse_opt < mse_shift);
    }
  }

  TEST_CASE("forward noising") {
    auto sched = ScheduleConfig{}.build();
    std::vector<double> x0{1.5, -2.0};
    std::mt19937_64 a(5), b(5);
    CHECK(forward_noising(x0, 30, sched, a) == forward_noising(x0, 30, sched, b));

    std::mt19937_64 rng(6);
    auto near = forward_noising(x0, 1, sched, rng);  // alpha_bar(1) = sigmoid(10)
    CHECK(testing::max_abs_diff(near, x0) < 0.05);

    // Var(out) = ab Var(x0) + (1 - ab) for x0 ~ N(0, v).
    const double v = 2.0;
    const std::size_t n = 200000;
    for (std::size_t t : {10u, 60u, 95u}) {
      double ab = sched.alpha_bar(t);
      long double s1 = 0, s2 = 0;
      std::normal_distribution<double> src(0.0, std::sqrt(v));
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> x{src(rng)};
        double y = forward_noising(x, t, sched, rng)[0];
        s1 += y;
        s2 += (long double)y * y;
      }
      double mean = (double)(s1 / n);
      double var = (double)(s2 / n) - mean * mean;
      double expected = ab * v + (1.0 - ab);
      double se = expected * std::sqrt(2.0 / (n - 1));
      CHECK(std::fabs(var - expected) <= 3.0 * se);
    }
  }

  TEST_CASE("mode assignment") {
    auto s = default_bias_scenario();
    for (std::size_t k = 0; k < s.base.components.size(); ++k)
      CHECK(mode_assignment(s.base.components[k].mean, s) == k);
    auto line = testing::line_scenario(4.0, 0.5);
    CHECK(mode_assignment(std::vector<double>{0.0}, line) == 0);
    CHECK(mode_assignment(std::vector<double>{1e-12}, line) == 1);

    // Separation of 12 sigma0: nearest mean must agree with the likelihood argmax.
    std::mt19937_64 rng(8);
    std::normal_distribution<double> normal;
    std::uniform_int_distribution<std::size_t> comp(0, 2);
    double s2 = s.base.sigma0 * s.base.sigma0;
    int agree = 0;
    for (int i = 0; i < 10000; ++i) {
      const auto& m = s.base.components[comp(rng)].mean;
      std::vector<double> x{m[0] + s.base.sigma0 * normal(rng), m[1] + s.base.sigma0 * normal(rng)};
      std::size_t best = 0;
      double best_ll = -INFINITY;
      for (std::size_t k = 0; k < 3; ++k) {
        const auto& mk = s.base.components[k].mean;
        double ll = -((x[0] - mk[0]) * (x[0] - mk[0]) + (x[1] - mk[1]) * (x[1] - mk[1])) / (2 * s2) -
                    std::log(2 * M_PI * s2);
        if (ll > best_ll) best_ll = ll, best = k;
      }
      agree += mode_assignment(x, s) == best;
    }
    CHECK(agree == 10000);
  }

  TEST_CASE("scenario documents round-trip") {
    auto doc = default_scenario_document();
    REQUIRE(doc.guidance_w.has_value());
    auto j = scenario_to_json(doc);
    auto back = scenario_from_json(nlohmann::json::parse(j.dump()));
    CHECK(scenario_to_json(back).dump() == j.dump());

    testing::TempDir dir;
    save_scenario(dir.str("s.json"), doc);
    auto loaded = load_scenario(dir.str("s.json"));
    CHECK(scenario_to_json(loaded).dump() == j.dump());

    doc.schedule.kind = ScheduleKind::Cosine;
    doc.guidance_w.reset();
    auto j2 = scenario_to_json(doc);
    CHECK(scenario_to_json(scenario_from_json(nlohmann::json::parse(j2.dump()))).dump() == j2.dump());
  }

  TEST_CASE("scenario documents reject malformed input") {
    auto j = nlohmann::json::parse(scenario_to_json(default_scenario_document()).dump());
    auto missing = j;
    missing.erase("components");
    CHECK_THROWS_AS(scenario_from_json(missing), FormatError);
    auto kind = j;
    kind["channels"]["target"]["kind"] = "sideways";
    CHECK_THROWS_AS(scenario_from_json(kind), FormatError);
    auto weights = j;
    weights["leakage_beta"] = 0.5;  // target channel no longer matches
    CHECK_THROWS_AS(scenario_from_json(weights), ValidationError);
    CHECK_THROWS_AS(scenario_from_json(nlohmann::json::array()), FormatError);

    testing::TempDir dir;
    std::ofstream(dir.str("bad.json")) << "{ not json";
    CHECK_THROWS_AS(load_scenario(dir.str("bad.json")), FormatError);
    CHECK_THROWS_AS(load_scenario(dir.str("missing.json")), Error);
  }
}
