"""Bayesian machinery: priors, Gaussian likelihood, Metropolis-Hastings and DRAM.

Samplers work on plain float vectors.  The log-posterior is any callable
returning a float, with ``-inf`` for impossible points (outside the prior
bounds, or a failed forward solve).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

STAGE_INITIAL = "initial"
STAGE_FIRST = "first"
STAGE_DELAYED = "delayed"


class StartupError(RuntimeError):
    """The chain cannot start from the given initial point."""


# -- priors -----------------------------------------------------------------

@dataclass(frozen=True)
class Prior:
    """One-dimensional prior with hard bounds.

    ``kind="gaussian"`` uses (mean, std) = (a, b); ``kind="uniform"`` is flat
    on [lo, hi].  The log-density is ``-inf`` outside [lo, hi].
    """

    kind: str
    a: float
    b: float
    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind == "gaussian" and not self.b > 0:
            raise ValueError("Gaussian prior std must be positive")
        if self.kind == "uniform":
            object.__setattr__(self, "lo", max(self.lo, self.a))
            object.__setattr__(self, "hi", min(self.hi, self.b))
            if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
                raise ValueError("uniform prior needs finite bounds")
        if not self.lo < self.hi:
            raise ValueError("prior bounds need lo < hi")

    @classmethod
    def gaussian(cls, mean, std, lo=-math.inf, hi=math.inf) -> "Prior":
        return cls("gaussian", float(mean), float(std), float(lo), float(hi))

    @classmethod
    def uniform(cls, lo, hi) -> "Prior":
        return cls("uniform", float(lo), float(hi), float(lo), float(hi))

    @property
    def mean(self) -> float:
        return self.a if self.kind == "gaussian" else 0.5 * (self.lo + self.hi)

    @property
    def std(self) -> float:
        return self.b if self.kind == "gaussian" else (self.hi - self.lo) / math.sqrt(12.0)

    def logpdf(self, x: float) -> float:
        if not self.lo <= x <= self.hi:
            return -math.inf
        if self.kind == "uniform":
            return -math.log(self.hi - self.lo)
        z = (x - self.a) / self.b
        return -0.5 * z * z - math.log(self.b * math.sqrt(2.0 * math.pi))


def log_prior(priors, x) -> float:
    total = 0.0
    for prior, value in zip(priors, x):
        total += prior.logpdf(float(value))
        if total == -math.inf:
            return total
    return total


# -- likelihood ---------------------------------------------------------------

def simulation_error(simulated, observed) -> float:
    """zeta = sum_i |beta_i - I_i|^2."""
    s = np.asarray(simulated, dtype=float)
    o = np.asarray(observed, dtype=float)
    if s.shape != o.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {o.shape}")
    return float(np.sum((o - s) ** 2))


def log_likelihood(simulated, observed, sigma: float) -> float:
    """Gaussian log-likelihood -(n/2) ln(2 pi sigma^2) - zeta / (2 sigma^2)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    n = np.asarray(observed).size
    if n < 1:
        raise ValueError("need at least one measurement")
    zeta = simulation_error(simulated, observed)
    return -0.5 * n * math.log(2.0 * math.pi * sigma * sigma) - zeta / (2.0 * sigma * sigma)


# -- proposals ------------------------------------------------------------------

class GaussianProposal:
    """Random-walk proposal x + scale * R z with z standard normal (cov = R R^T)."""

    symmetric = True

    def __init__(self, chol):
        self.chol = np.atleast_2d(np.asarray(chol, dtype=float))

    @classmethod
    def diagonal(cls, std) -> "GaussianProposal":
        return cls(np.diag(np.asarray(std, dtype=float)))

    def draw(self, x, z, scale=1.0):
        return x + scale * (self.chol @ z)

    def log_density(self, to, frm, scale=1.0) -> float:
        w = solve_triangular(self.chol, np.asarray(to) - np.asarray(frm), lower=True)
        d = len(w)
        logdet = float(np.sum(np.log(np.abs(np.diag(self.chol))))) + d * math.log(scale)
        return -0.5 * float(w @ w) / scale ** 2 - logdet - 0.5 * d * math.log(2 * math.pi)


def _log_accept(delta: float) -> float:
    """log of min(1, exp(delta)), with NaN treated as impossible."""
    if delta != delta:
        return -math.inf
    return min(0.0, delta)


def acceptance_probability(log_ratio: float) -> float:
    return math.exp(_log_accept(log_ratio))


def _log1m_exp(a: float) -> float:
    """log(1 - exp(a)) for a <= 0."""
    if a == -math.inf:
        return 0.0
    if a >= 0.0:
        return -math.inf
    return math.log(-math.expm1(a))


@dataclass
class ChainState:
    x: np.ndarray
    log_post: float


@dataclass
class StepResult:
    state: ChainState
    accepted: bool
    stage: str
    lambda1: float
    lambda2: float = 0.0
    candidate: np.ndarray | None = None
    candidate_log_post: float = -math.inf


def mh_step(state: ChainState, log_post, proposal, rng: np.random.Generator) -> StepResult:
    """One Metropolis-Hastings step; the current sample is kept on rejection."""
    z = rng.standard_normal(len(state.x))
    u = rng.random()
    cand = proposal.draw(state.x, z)
    log_corr = 0.0
    if not getattr(proposal, "symmetric", False):
        fwd = proposal.log_density(cand, state.x)
        if fwd == -math.inf:
            raise ValueError("proposal has zero density at its own draw")
        log_corr = proposal.log_density(state.x, cand) - fwd
    lp = float(log_post(cand))
    lam = acceptance_probability(lp - state.log_post + log_corr)
    if u < lam:
        return StepResult(ChainState(cand, lp), True, STAGE_FIRST, lam, 0.0, cand, lp)
    return StepResult(state, False, STAGE_FIRST, lam, 0.0, cand, lp)


# -- adaptive covariance ----------------------------------------------------------

def default_adapt_scale(d: int) -> float:
    """Random-walk scale 2.38^2/d applied to the adapted covariance."""
    return 2.38 ** 2 / d


class AdaptiveProposal:
    """DRAM proposal state: running mean/covariance of the chain history.

    The running covariance equals
    Cov(a^0..a^l) = (1/l) (sum_i a^i a^i^T - (l+1) abar abar^T)
    and is kept by a Welford recursion, which avoids the cancellation of the
    sum form.  Before ``adapt_start`` samples the fixed initial factor is used;
    afterwards the proposal covariance is ``adapt_scale`` times the
    regularized chain covariance (default 2.38^2/d).
    """

    def __init__(self, initial_chol, sigma_dr: float = 0.5, adapt_start: int = 1000,
                 eps_reg: float = 1.0e-10, scale=None, adapt: bool = True,
                 adapt_scale: float | None = None):
        self.initial_chol = np.atleast_2d(np.asarray(initial_chol, dtype=float))
        d = self.initial_chol.shape[0]
        if not 0.0 < sigma_dr < 1.0:
            raise ValueError("sigma_dr must lie in (0, 1)")
        if adapt_start < 1:
            raise ValueError("adapt_start must be at least 1")
        self.sigma_dr = float(sigma_dr)
        self.adapt_start = int(adapt_start)
        self.eps_reg = float(eps_reg)
        self.scale = np.ones(d) if scale is None else np.asarray(scale, dtype=float)
        self.adapt = adapt
        self.adapt_scale = default_adapt_scale(d) if adapt_scale is None else float(adapt_scale)
        if not self.adapt_scale > 0:
            raise ValueError("adapt_scale must be positive")
        self.count = 0
        self.mean = np.zeros(d)
        self.m2 = np.zeros((d, d))
        self.chol = self.initial_chol.copy()

    @property
    def dim(self) -> int:
        return self.initial_chol.shape[0]

    def update(self, sample) -> None:
        x = np.asarray(sample, dtype=float)
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + np.outer(delta, x - self.mean)
        if self.adapt and self.count - 1 >= self.adapt_start:
            self.chol = self._factor()

    @property
    def covariance(self) -> np.ndarray:
        """Unregularized chain covariance; zero until two samples are seen."""
        ell = self.count - 1
        if ell < 1:
            return np.zeros_like(self.m2)
        m = self.m2 / ell
        return 0.5 * (m + m.T)

    def regularized(self) -> np.ndarray:
        return self.covariance + self.eps_reg * np.diag(self.scale ** 2)

    def _factor(self):
        cov = self.adapt_scale * self.regularized()
        try:
            return np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            pass
        try:
            return np.linalg.cholesky(cov + self.adapt_scale * self.eps_reg * np.eye(self.dim))
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("proposal covariance is not positive definite") from exc

    def proposal(self) -> GaussianProposal:
        return GaussianProposal(self.chol)


def delayed_log_ratio(x, lp_x, cand1, lp1, cand2, lp2, proposal: GaussianProposal) -> float:
    """log of the second-stage acceptance ratio (before min with 1).

    numerator:   pi(a**) phi(a*|a**) (1 - lambda1(a*|a**))
    denominator: pi(a)   phi(a*|a)   (1 - lambda1(a*|a))
    The second-stage proposal is symmetric about the current point and
    cancels.
    """
    if lp2 == -math.inf:
        return -math.inf
    num = lp2 + proposal.log_density(cand1, cand2) + _log1m_exp(_log_accept(lp1 - lp2))
    den = lp_x + proposal.log_density(cand1, x) + _log1m_exp(_log_accept(lp1 - lp_x))
    if num == -math.inf:
        return -math.inf
    return num - den


def dram_step(state: ChainState, log_post, adaptive: AdaptiveProposal,
              rng: np.random.Generator, rng_delayed: np.random.Generator | None = None,
              delayed: bool = True) -> StepResult:
    """One delayed-rejection step; the covariance update is left to the caller.

    Stage one draws a* = a + R z.  On rejection a second candidate
    a** = a + sigma_dr^2 R z' is tried and accepted with the
    delayed-rejection probability that keeps detailed balance.
    """
    prop = adaptive.proposal()
    first = mh_step(state, log_post, prop, rng)
    if first.accepted or not delayed:
        return first
    rng2 = rng if rng_delayed is None else rng_delayed
    z2 = rng2.standard_normal(len(state.x))
    u2 = rng2.random()
    cand2 = prop.draw(state.x, z2, adaptive.sigma_dr ** 2)
    lp2 = float(log_post(cand2))
    lam2 = acceptance_probability(delayed_log_ratio(
        state.x, state.log_post, first.candidate, first.candidate_log_post, cand2, lp2, prop))
    if u2 < lam2:
        return StepResult(ChainState(cand2, lp2), True, STAGE_DELAYED, first.lambda1, lam2,
                          cand2, lp2)
    return StepResult(state, False, STAGE_DELAYED, first.lambda1, lam2, cand2, lp2)


# -- chains -----------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerSettings:
    """Chain settings; ``initial_std`` sets the fixed diagonal start-up proposal."""

    initial_std: tuple
    sigma_dr: float = 0.5
    adapt_start: int = 1000
    eps_reg: float = 1.0e-10
    reg_scale: tuple | None = None
    delayed_rejection: bool = True
    adapt: bool = True
    adapt_scale: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "initial_std", tuple(float(v) for v in self.initial_std))
        if any(not v > 0 for v in self.initial_std):
            raise ValueError("initial proposal std must be positive")
        if self.reg_scale is not None:
            object.__setattr__(self, "reg_scale", tuple(float(v) for v in self.reg_scale))


@dataclass
class Chain:
    """Chain records: row 0 is the initial point, then one row per step."""

    names: tuple
    samples: np.ndarray
    log_post: np.ndarray
    stage: list
    accepted: np.ndarray
    seed: int | None
    settings: SamplerSettings | None = None
    lambdas: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.samples) - 1

    @property
    def acceptance_rate(self) -> float:
        return float(np.count_nonzero(self.accepted[1:])) / self.n_steps if self.n_steps else 0.0

    def stage_rates(self) -> dict:
        st = np.asarray(self.stage[1:])
        acc = self.accepted[1:]
        first = int(np.count_nonzero(acc & (st == STAGE_FIRST)))
        tried = int(np.count_nonzero(st == STAGE_DELAYED))
        second = int(np.count_nonzero(acc & (st == STAGE_DELAYED)))
        n = max(self.n_steps, 1)
        return {"first_stage": first / n,
                "delayed_attempts": tried / n,
                "delayed_accepted": second / max(tried, 1)}


def _child_generators(seed):
    ss = np.random.SeedSequence(seed)
    first, second = ss.spawn(2)
    return np.random.default_rng(first), np.random.default_rng(second)


def run_chain(n_steps: int, initial, log_post, settings: SamplerSettings, seed=None,
              names=None, sampler: str = "dram", progress=None) -> Chain:
    """Run ``n_steps`` MH or DRAM steps from ``initial``.

    First-stage and delayed-stage random numbers come from independent
    streams spawned from ``seed``, so an MH chain and a DRAM chain with the
    same seed see identical first-stage draws.
    """
    if n_steps < 1:
        raise ValueError("need at least one step")
    x0 = np.atleast_1d(np.asarray(initial, dtype=float))
    d = len(x0)
    if len(settings.initial_std) != d:
        raise ValueError("initial_std length differs from the parameter dimension")
    lp0 = float(log_post(x0))
    if not math.isfinite(lp0):
        raise StartupError("initial point has zero posterior density")
    if sampler not in ("dram", "mh"):
        raise ValueError(f"unknown sampler {sampler!r}")
    rng1, rng2 = _child_generators(seed)
    reg = settings.reg_scale if settings.reg_scale is not None else np.asarray(settings.initial_std) * 10.0
    adaptive = AdaptiveProposal(np.diag(settings.initial_std), settings.sigma_dr,
                                settings.adapt_start, settings.eps_reg, reg,
                                adapt=settings.adapt, adapt_scale=settings.adapt_scale)
    samples = np.empty((n_steps + 1, d))
    lps = np.empty(n_steps + 1)
    accepted = np.zeros(n_steps + 1, dtype=bool)
    lambdas = np.zeros((n_steps + 1, 2))
    stage = [STAGE_INITIAL]
    state = ChainState(x0, lp0)
    samples[0], lps[0] = x0, lp0
    adaptive.update(x0)
    delayed = settings.delayed_rejection and sampler == "dram"
    for k in range(1, n_steps + 1):
        res = dram_step(state, log_post, adaptive, rng1, rng2, delayed=delayed)
        state = res.state
        samples[k] = state.x
        lps[k] = state.log_post
        accepted[k] = res.accepted
        lambdas[k] = (res.lambda1, res.lambda2)
        stage.append(res.stage)
        adaptive.update(state.x)
        if progress is not None:
            progress(k, n_steps, res)
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(d))
    return Chain(names, samples, lps, stage, accepted, seed, settings, lambdas)
