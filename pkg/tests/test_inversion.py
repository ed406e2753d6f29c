import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from nanoinvert.bayes import Prior, StartupError
from nanoinvert.device import Contacts, ParameterVector
from nanoinvert.inversion import (ANCHOR_SPACING, MARCH_STEP, PSA_CHARGE, RECEPTOR_DENSITY,
                                  ForwardError, ForwardModel, _GateCache,
                                  LogPosterior, MeasurementSet, StudyConfig, default_priors,
                                  forward_iv, posterior_mean, posterior_predictive_iv,
                                  prediction_error, pt_to_surface_charge, run_inversion,
                                  synthesize_measurements)
from nanoinvert.pde import SolverError

GATES = (-1.0, 0.0, 1.0)
TRUTH = ParameterVector(active=("rho_s", "c_dop"))


@pytest.fixture(scope="module")
def model():
    return ForwardModel()


@pytest.fixture(scope="module")
def data(model):
    return synthesize_measurements(TRUTH, GATES, epsilon=0.01, seed=3, model=model)


# -- probe-target map -----------------------------------------------------------------

def test_pt_map_examples():
    assert pt_to_surface_charge(0.0) == 0.0
    assert pt_to_surface_charge(1e10) == pytest.approx(-1.5e-3, rel=1e-15)
    assert pt_to_surface_charge(RECEPTOR_DENSITY) == pytest.approx(PSA_CHARGE * 3e-3, rel=1e-15)
    with pytest.raises(ValueError):
        pt_to_surface_charge(-1.0)


def test_model_maps_c_pt_to_rho_s(model):
    params = ParameterVector(c_pt=2e10, active=("c_pt", "c_dop"))
    assert model.physical(params).rho_s == pytest.approx(-3e-3)
    assert model.physical(TRUTH) is TRUTH


# -- measurements ---------------------------------------------------------------------

def test_measurement_set_invariants():
    with pytest.raises(ValueError):
        MeasurementSet((0.0, 1.0), (1.0, 2.0, 3.0), 1.0)
    with pytest.raises(ValueError):
        MeasurementSet((0.0, 1.0), (1.0, 2.0), 1.0)
    with pytest.raises(ValueError):
        MeasurementSet((0.0, 1.0, 2.0), (1.0, 2.0, 3.0), 0.0)
    m = MeasurementSet([0, 1, 2], [1, 2, 3], 0.5, {"kind": "lab"})
    assert m == MeasurementSet((0.0, 1.0, 2.0), (1.0, 2.0, 3.0), 0.5)


def test_synthetic_noise_level_and_provenance(model, data):
    clean = forward_iv(TRUTH, GATES, model)
    assert data.sigma == pytest.approx(0.01 * np.max(np.abs(clean)), rel=1e-15)
    assert data.provenance["kind"] == "synthetic" and data.provenance["seed"] == 3
    assert data.provenance["truth"]["rho_s"] == TRUTH.rho_s
    again = synthesize_measurements(TRUTH, GATES, epsilon=0.01, seed=3, model=model)
    assert again.currents == data.currents
    other = synthesize_measurements(TRUTH, GATES, epsilon=0.01, seed=4, model=model)
    assert other.currents != data.currents
    with pytest.raises(ValueError):
        synthesize_measurements(TRUTH, GATES, epsilon=0.0, model=model)


# -- forward model ----------------------------------------------------------------------

def test_memoized_sweep_is_bit_identical(model):
    params = replace(TRUTH, rho_s=-1.2)
    a = model.currents(params, GATES)
    n = model.evaluations
    b = model.currents(params, GATES)
    assert np.array_equal(a, b) and model.evaluations == n
    b[0] = 0.0  # callers get copies
    assert np.array_equal(model.currents(params, GATES), a)


def test_empty_sweep(model):
    out = model.currents(TRUTH, ())
    assert out.shape == (0,)


def test_zero_drain_bias_gives_zero_current():
    m = ForwardModel(contacts=Contacts(v_drain=0.0))
    assert abs(forward_iv(TRUTH, (0.0,), m)[0]) <= 1e-14


def test_sweep_is_monotone_in_gate_voltage(model):
    gates = tuple(np.linspace(-1.0, 1.0, 5))
    i = forward_iv(TRUTH, gates, model)
    assert np.all(i > 0)
    # p-type wire: a positive gate depletes holes
    assert np.all(np.diff(i) < 0)


def test_warm_start_matches_reference_tolerance(model):
    params = replace(TRUTH, rho_s=-1.6)
    tight = ForwardModel(tolerance=1e-9)
    ref = forward_iv(params, GATES, tight)
    assert np.allclose(model.currents(params, GATES), ref, rtol=1e-4)


def test_far_jump_marches_and_matches_cold_solve():
    m = ForwardModel()
    m.currents(TRUTH, GATES)
    far = replace(TRUTH, rho_s=0.5)
    got = m.currents(far, GATES)
    ref = ForwardModel(tolerance=1e-9).currents(far, GATES)
    assert np.allclose(got, ref, rtol=1e-4)
    anchors = m._gates[GATES[0]].anchors
    # the march from -1.5 to 0.5 leaves states every MARCH_STEP or so
    rho = sorted(z[0] for z, _ in anchors)
    assert len(rho) >= 2.0 / MARCH_STEP - 1 and np.max(np.diff(rho)) <= MARCH_STEP + 1e-12
    # a nearby later request does not march again
    near = replace(TRUTH, rho_s=0.45)
    assert np.allclose(m.currents(near, GATES), ForwardModel(tolerance=1e-9).currents(near, GATES),
                       rtol=1e-4)
    assert len(m._gates[GATES[0]].anchors) == len(anchors)


def test_anchor_store_stays_bounded_and_spread():
    cache = _GateCache(slots=2, anchors=4)
    state = SimpleNamespace()
    for rho in np.linspace(-4.0, 1.0, 30):
        cache.anchor(np.array([rho, 0.0, 0.0, 0.0]), state)
    rho = sorted(z[0] for z, _ in cache.anchors)
    assert len(rho) == 4 and rho[-1] == 1.0 and np.min(np.diff(rho)) >= ANCHOR_SPACING
    before = len(cache.anchors)
    cache.anchor(np.array([rho[1] + ANCHOR_SPACING / 2, 0.0, 0.0, 0.0]), state)
    assert len(cache.anchors) == before


def test_gummel_solver_agrees(model):
    ref = forward_iv(TRUTH, GATES, model)
    g = ForwardModel(solver="gummel")
    assert np.allclose(forward_iv(TRUTH, GATES, g), ref, rtol=1e-4)


def test_results_do_not_depend_on_thread_count():
    path = [replace(TRUTH, rho_s=r) for r in (-1.5, -1.4, -1.45)]
    one, three = ForwardModel(threads=1), ForwardModel(threads=3)
    for params in path:
        assert np.array_equal(one.currents(params, GATES), three.currents(params, GATES))


def test_failed_solve_becomes_none_and_is_memoized(monkeypatch):
    m = ForwardModel()

    def boom(*args):
        raise SolverError("singular", 1.0)

    monkeypatch.setattr(m, "_solve_gate", boom)
    assert m.currents(TRUTH, GATES) is None
    assert m.failures == 1
    assert m.currents(TRUTH, GATES) is None and m.evaluations == 1
    with pytest.raises(ForwardError):
        forward_iv(TRUTH, GATES, m)


def test_bad_model_arguments():
    with pytest.raises(ValueError):
        ForwardModel(solver="exact")
    with pytest.raises(ValueError):
        ForwardModel(threads=0)


# -- studies --------------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"active": ()},
    {"active": ("rho_s", "kappa")},
    {"active": ("rho_s", "rho_s")},
    {"active": ("rho_s", "c_pt")},
    {"active": ("rho_s",), "priors": {}},
    {"active": ("rho_s",), "n_steps": 0},
    {"active": ("rho_s",), "epsilon": 0.0},
    {"active": ("rho_s",), "proposal_std": (1.0, 2.0)},
    {"active": ("rho_s",), "adapt_scale": 0.0},
])
def test_study_invariants(kwargs):
    with pytest.raises(ValueError):
        StudyConfig(**kwargs)


def test_study_defaults():
    study = StudyConfig(("rho_s", "c_dop"))
    priors = default_priors()
    assert np.array_equal(study.prior_mean(), [priors["rho_s"].mean, priors["c_dop"].mean])
    settings = study.sampler_settings()
    assert settings.initial_std == (priors["rho_s"].std / 10, priors["c_dop"].std / 10)
    p = study.parameters([-1.0, 2e16])
    assert p.rho_s == -1.0 and p.c_dop == 2e16 and p.active == ("rho_s", "c_dop")


def test_log_posterior(model, data):
    study = StudyConfig(("rho_s", "c_dop"))
    post = LogPosterior(study, data, model)
    at_truth = post([TRUTH.rho_s, TRUTH.c_dop])
    assert math.isfinite(at_truth)
    assert post([-1.0, TRUTH.c_dop]) < at_truth
    assert post([5.0, TRUTH.c_dop]) == -math.inf  # outside the prior support


def test_failed_forward_is_minus_infinity(data):
    m = ForwardModel()
    m.currents = lambda *args: None
    post = LogPosterior(StudyConfig(("rho_s", "c_dop")), data, m)
    assert post([TRUTH.rho_s, TRUTH.c_dop]) == -math.inf


def test_short_inversion(model, data):
    study = StudyConfig(("rho_s", "c_dop"), n_steps=30, adapt_start=10, burn_in=0.2)
    chain, summary = run_inversion(study, data, model, seed=1)
    assert chain.samples.shape == (31, 2)
    assert summary.names == ("rho_s", "c_dop")
    assert 0.0 <= summary.acceptance_rate <= 1.0
    assert np.all(chain.samples[:, 0] >= -4.0) and np.all(chain.samples[:, 0] <= 1.0)
    again, _ = run_inversion(study, data, model, seed=1)
    assert np.array_equal(chain.samples, again.samples)


def test_truth_initialized_exact_data_keeps_truth():
    m = ForwardModel()
    clean = forward_iv(TRUTH, GATES, m)
    data = MeasurementSet(GATES, tuple(clean), 1e-6 * float(np.max(np.abs(clean))))
    tight = {"rho_s": Prior.uniform(-4.0, 1.0), "c_dop": Prior.uniform(1e15, 5e16)}
    study = StudyConfig(("rho_s", "c_dop"), priors={**default_priors(), **tight}, n_steps=15,
                        adapt=False)
    chain, _ = run_inversion(study, data, m, seed=2, initial=[TRUTH.rho_s, TRUTH.c_dop])
    # every proposal is far worse than the exact fit, so the chain stays at the truth
    assert np.all(chain.samples == [TRUTH.rho_s, TRUTH.c_dop])


def test_startup_error_names_the_point(data):
    m = ForwardModel()
    m.currents = lambda *args: None
    study = StudyConfig(("rho_s", "c_dop"), n_steps=5)
    with pytest.raises(StartupError, match="rho_s"):
        run_inversion(study, data, m)


def test_posterior_predictive_of_identical_samples(model):
    study = StudyConfig(("rho_s", "c_dop"))
    x = [TRUTH.rho_s, TRUTH.c_dop]
    chain = SimpleNamespace(samples=np.array([x] * 20))
    pred = posterior_predictive_iv(chain, study, GATES, model)
    assert np.array_equal(pred, forward_iv(TRUTH, GATES, model))
    assert prediction_error(pred, MeasurementSet(GATES, tuple(pred), 1.0)) == 0.0
    with pytest.raises(ValueError, match="empty"):
        posterior_mean(SimpleNamespace(samples=np.zeros((0, 2))))
