"""Posterior summaries of a chain: moments, histograms and effective sample size."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_BINS = 60
DEFAULT_BURN_IN = 0.2
MIN_LENGTH = 10


def autocorrelation(x) -> np.ndarray:
    """Normalized autocorrelation of a 1D series at all lags (FFT based)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    y = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(y, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    if acov[0] <= 0.0:
        out = np.zeros(n)
        out[0] = 1.0
        return out
    return acov / acov[0]


def effective_sample_size(x) -> float:
    """ESS by Geyer's initial monotone sequence estimator, capped at len(x).

    Autocorrelations are summed in adjacent pairs; the pair sums are
    truncated at the first non-positive one and forced to be non-increasing.
    A constant series has no measurable correlation and returns len(x).
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 2 or np.ptp(x) == 0.0:
        return float(n)
    rho = autocorrelation(x)
    m = (n - 1) // 2
    pairs = rho[0:2 * m:2] + rho[1:2 * m + 1:2]
    positive = pairs > 0.0
    stop = int(np.argmin(positive)) if not positive.all() else len(pairs)
    gamma = np.minimum.accumulate(pairs[:stop])
    tau = -1.0 + 2.0 * float(np.sum(gamma))
    if tau <= 0.0:
        return float(n)
    return float(min(n, n / tau))


@dataclass
class ParameterSummary:
    name: str
    mean: float
    std: float
    edges: np.ndarray
    density: np.ndarray
    counts: np.ndarray
    ess: float

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "mean": self.mean,
            "std": self.std,
            "ess": self.ess,
            "histogram": {
                "edges": self.edges.tolist(),
                "density": self.density.tolist(),
                "counts": self.counts.tolist(),
            },
        }


@dataclass
class PosteriorSummary:
    parameters: list
    acceptance_rate: float
    n_records: int
    n_discarded: int
    meta: dict = field(default_factory=dict)

    @property
    def names(self) -> tuple:
        return tuple(p.name for p in self.parameters)

    @property
    def mean(self) -> np.ndarray:
        return np.array([p.mean for p in self.parameters])

    @property
    def std(self) -> np.ndarray:
        return np.array([p.std for p in self.parameters])

    def __getitem__(self, name) -> ParameterSummary:
        for p in self.parameters:
            if p.name == name:
                return p
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "acceptance_rate": self.acceptance_rate,
            "n_records": self.n_records,
            "n_discarded": self.n_discarded,
            "parameters": [p.to_dict() for p in self.parameters],
            **self.meta,
        }


def summarize(chain, burn_in: float = DEFAULT_BURN_IN, bins: int = DEFAULT_BINS) -> PosteriorSummary:
    """Mean, std, normalized histogram and ESS of each parameter after burn-in.

    The first ``int(burn_in * len(records))`` records are discarded; the
    acceptance rate is taken over the whole chain.
    """
    if not 0.0 <= burn_in < 1.0:
        raise ValueError("burn_in must lie in [0, 1)")
    if bins < 1:
        raise ValueError("need at least one histogram bin")
    samples = np.asarray(chain.samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    total = len(samples)
    discard = int(burn_in * total)
    kept = samples[discard:]
    if len(kept) < MIN_LENGTH:
        raise ValueError(f"chain too short: {len(kept)} records after burn-in (need {MIN_LENGTH})")
    params = []
    for k, name in enumerate(chain.names):
        col = kept[:, k]
        lo, hi = float(col.min()), float(col.max())
        if hi - lo <= 1e-12 * max(abs(lo), abs(hi)):
            # constant column: a window wide enough for `bins` distinct edges
            half = max(0.5, 1e-9 * abs(lo))
            lo, hi = lo - half, hi + half
        counts, edges = np.histogram(col, bins=bins, range=(lo, hi))
        density = counts / (len(col) * np.diff(edges))
        params.append(ParameterSummary(name, float(col.mean()), float(col.std()), edges,
                                       density, counts, effective_sample_size(col)))
    return PosteriorSummary(params, float(chain.acceptance_rate), total, discard)
