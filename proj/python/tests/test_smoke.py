import json
from pathlib import Path

import numpy as np
import pytest

import dcr

FIXTURES = Path(__file__).resolve().parents[2] / "tests" / "fixtures"


def test_cfg_update_matches_numpy():
    rng = np.random.default_rng(0)
    u, c = rng.normal(size=(2, 3, 4))
    np.testing.assert_allclose(dcr.cfg_update(u, c, 3.5), 3.5 * (c - u), rtol=0, atol=1e-14)
    assert dcr.cfg_update(u, c, 1.0).shape == (3, 4)


def test_guided_prediction_removes_aligned_component():
    rng = np.random.default_rng(1)
    u, c = rng.normal(size=(2, 64))
    a = c + 0.6 * (c - u)
    g = dcr.GuidanceConfig(w=3.5)
    eps, delta, diag = dcr.guided_prediction(u, c, a, 0, 100, g, mode="unscheduled")
    drift = g.w_attr * (a - u) - g.w * (c - u)
    ref_delta = g.w * (c - u)
    s = drift @ ref_delta
    assert s > 0
    nn = drift @ drift
    expected = s * g.eps_stab / (nn + g.eps_stab)
    assert abs(delta @ drift - expected) < 1e-9
    np.testing.assert_allclose(eps, u + delta, atol=1e-12)
    assert diag["lambda_t"] == pytest.approx(s / (nn + g.eps_stab), rel=1e-12)


def test_gated_step_returns_plain_cfg_bitwise():
    rng = np.random.default_rng(2)
    u, c, a = rng.normal(size=(3, 16))
    g = dcr.GuidanceConfig(w=3.5)
    eps, delta, diag = dcr.guided_prediction(u, c, a, 0, 100, g)
    assert diag["lambda_t"] == 0.0
    assert np.array_equal(delta, dcr.cfg_update(u, c, 3.5))


def test_schedule_alpha_window():
    g = dcr.GuidanceConfig(w=3.5, r_s=0.25, r_e=0.75)
    assert dcr.schedule_alpha(0, 5, g) == 0.0
    assert dcr.schedule_alpha(2, 5, g) == 0.25
    assert dcr.schedule_alpha(3, 5, g) == 1.0
    assert dcr.schedule_alpha(4, 5, g) == 0.0


def test_invalid_config_raises():
    with pytest.raises(dcr.ValidationError):
        dcr.GuidanceConfig(w=3.5, w_attr=3.5)
    with pytest.raises(dcr.DimensionError):
        dcr.cfg_update(np.zeros(3), np.zeros(4), 1.0)


def test_toy_sampling_is_deterministic_and_plain_variants_match():
    model = dcr.ToyModel()
    g = dcr.GuidanceConfig(w=3.5)
    x1, steps = dcr.sample(model, "full-dcr", g, seed=7)
    x2, _ = dcr.sample(model, "full-dcr", g, seed=7)
    assert np.array_equal(x1, x2)
    assert len(steps) == model.steps
    assert x1.shape == (model.dim,)
    plain, _ = dcr.sample(model, "plain-cfg", g, seed=7)
    norep, _ = dcr.sample(model, "no-repulsion", g, seed=7)
    assert np.array_equal(plain, norep)
    assert set(dcr.variants()) >= {"full-dcr", "plain-cfg", "no-schedule"}


def test_collapse_fraction_orders_full_below_plain():
    model = dcr.ToyModel()
    g = dcr.GuidanceConfig(w=3.5)
    plain, (plo, phi), n = dcr.collapse_fraction(model, "plain-cfg", g, 1000, seed=3)
    full, (flo, fhi), _ = dcr.collapse_fraction(model, "full-dcr", g, 1000, seed=3)
    assert n == 1000
    assert plo <= plain <= phi and flo <= full <= fhi
    assert full < plain


def test_toy_model_accessors():
    model = dcr.ToyModel()
    x = np.array([0.3, -0.2])
    eps = model.epsilon(x, 1, "target")
    assert eps.shape == (2,)
    assert np.all(np.isfinite(eps))
    assert 0.0 < model.alpha_bar(1) < 1.0
    assert json.loads(model.to_json())


def test_metrics_and_verdicts():
    lo, hi = dcr.wilson_interval(8, 10)
    assert lo == pytest.approx(0.4902, abs=1e-4)
    assert hi == pytest.approx(0.9433, abs=1e-4)
    assert dcr.ccs([5, 3, 4]) == 4.0
    assert dcr.cvr([True, False, False, True]) == 0.5
    assert dcr.parse_verdict("fine\nscore: 3, collapsed: true") == (3, True)
    with pytest.raises(dcr.JudgeParseError):
        dcr.parse_verdict("score: 6, collapsed: false")
    with pytest.raises(dcr.VerdictError):
        dcr.parse_verdict("no trailer")


def test_suite_and_template():
    items = dcr.load_suite(FIXTURES / "bench_suite_fixture.json")
    assert len(items) == 16
    with pytest.raises(dcr.ValidationError):
        dcr.load_suite(FIXTURES / "bench_suite_fixture.json", canonical=True)
    text = dcr.render_attractor_template("a snowy beach")
    assert "generate a single alternative prompt" in text
    assert "a snowy beach" in text
    assert text == dcr.render_attractor_template("a snowy beach")
