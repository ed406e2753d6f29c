from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from nanoinvert.diagnostics import autocorrelation, effective_sample_size, summarize


def _chain(samples, names=None, rate=0.5):
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    names = names or tuple(f"p{k}" for k in range(samples.shape[1]))
    return SimpleNamespace(samples=samples, names=names, acceptance_rate=rate)


def test_constant_chain():
    s = summarize(_chain(np.full(100, 3.5)), burn_in=0.0)
    p = s.parameters[0]
    assert p.mean == 3.5 and p.std == 0.0
    assert np.count_nonzero(p.counts) == 1
    assert p.ess == 100.0


def test_iid_gaussian_moments():
    x = np.random.default_rng(0).normal(2.0, 3.0, 100_000)
    s = summarize(_chain(x), burn_in=0.0)
    p = s.parameters[0]
    assert abs(p.mean - 2.0) <= 4 * 3.0 / np.sqrt(len(x))
    assert p.std == pytest.approx(3.0, rel=0.01)
    assert p.ess == pytest.approx(len(x), rel=0.1)


def test_burn_in_discards_leading_half():
    x = np.concatenate([np.full(50, 100.0), np.zeros(50)])
    s = summarize(_chain(x), burn_in=0.5)
    assert s.n_discarded == 50 and s.n_records == 100
    assert s.parameters[0].mean == 0.0


@given(arrays(np.float64, st.integers(10, 300), elements=st.floats(-1e6, 1e6)),
       st.integers(1, 80))
def test_density_integrates_to_one(x, bins):
    p = summarize(_chain(x), burn_in=0.0, bins=bins).parameters[0]
    assert abs(float(np.sum(p.density * np.diff(p.edges))) - 1.0) <= 1e-9
    assert p.counts.sum() == len(x)


@given(arrays(np.float64, st.integers(2, 500), elements=st.floats(-10, 10)))
def test_ess_bounded_by_length(x):
    ess = effective_sample_size(x)
    assert 0.0 < ess <= len(x)


def test_ess_of_correlated_series():
    rng = np.random.default_rng(1)
    phi, n = 0.9, 200_000
    e = rng.normal(size=n)
    x = np.empty(n)
    x[0] = e[0]
    for k in range(1, n):
        x[k] = phi * x[k - 1] + e[k]
    # AR(1): integrated autocorrelation time (1 + phi) / (1 - phi) = 19
    assert effective_sample_size(x) == pytest.approx(n / 19.0, rel=0.1)


def test_autocorrelation_lag_zero():
    rho = autocorrelation(np.random.default_rng(2).normal(size=300))
    assert rho[0] == 1.0 and np.all(np.abs(rho) <= 1.0 + 1e-12)


def test_too_short_after_burn_in():
    with pytest.raises(ValueError, match="too short"):
        summarize(_chain(np.arange(12.0)), burn_in=0.5)


@pytest.mark.parametrize("kwargs", [{"burn_in": 1.0}, {"burn_in": -0.1}, {"bins": 0}])
def test_bad_arguments(kwargs):
    with pytest.raises(ValueError):
        summarize(_chain(np.arange(100.0)), **kwargs)


def test_summary_lookup_and_dict():
    s = summarize(_chain(np.random.default_rng(3).normal(size=(200, 2)), ("a", "b"), 0.3))
    assert s.names == ("a", "b") and s["b"].name == "b"
    with pytest.raises(KeyError):
        s["c"]
    d = s.to_dict()
    assert d["acceptance_rate"] == 0.3 and len(d["parameters"]) == 2


def test_constant_chain_at_large_magnitude():
    p = summarize(_chain(np.full(50, 1e16)), burn_in=0.0).parameters[0]
    assert np.count_nonzero(p.counts) == 1 and p.std == 0.0
    assert abs(float(np.sum(p.density * np.diff(p.edges))) - 1.0) <= 1e-9
