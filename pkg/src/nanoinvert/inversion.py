"""Bayesian inversion of nanowire sensor I-V sweeps.

A ``ForwardModel`` maps a parameter vector to the drain currents of a
backgate sweep.  It memoizes whole sweeps by the exact parameter values and
keeps, for every gate voltage, a few recent converged states from which the
next nearby solve is warm-started.  ``run_inversion`` wires the model into
the DRAM sampler.
"""
from __future__ import annotations

import logging
import math
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .bayes import (Chain, Prior, SamplerSettings, StartupError, log_likelihood, log_prior,
                    run_chain, simulation_error)
from .coupled import CoupledState, coupled_solve
from .device import (NM2_PER_CM2, PARAMETER_NAMES, Contacts, DeviceSpec, ParameterVector,
                     PhysicalConstants, validate)
from .diagnostics import DEFAULT_BINS, DEFAULT_BURN_IN, PosteriorSummary, summarize
from .pde import SolverError, build_mesh
from .poisson import interface_from_params
from .transport import GummelStart, IterationError, SRHParams, gummel_solve

log = logging.getLogger(__name__)

DEFAULT_GATES = tuple(float(v) for v in np.linspace(-1.0, 1.0, 11))
PSA_CHARGE = -15.0  # elementary charges per probe-target complex
RECEPTOR_DENSITY = 3.0e11  # cm^-2
SAMPLING_TOLERANCE = 1.0e-6  # V, Newton error tolerance inside a chain
WARM_SLOTS = 6
ANCHOR_SLOTS = 48  # well-spread states kept per gate for far jumps
ANCHOR_SPACING = 0.1  # smallest L1 coordinate distance between two anchors
MARCH_STEP = 0.125  # largest L1 coordinate step of a continuation march
FAR = 0.5  # L1 coordinate distance beyond which anchors and marching take over


class ForwardError(RuntimeError):
    """A forward sweep did not converge."""


def pt_to_surface_charge(c_pt: float, z_mol: float = PSA_CHARGE) -> float:
    """Surface charge in q/nm^2 carried by ``c_pt`` complexes per cm^2."""
    if c_pt < 0:
        raise ValueError("probe-target density must be non-negative")
    return z_mol * c_pt / NM2_PER_CM2


# -- measurements ---------------------------------------------------------------

@dataclass(frozen=True)
class MeasurementSet:
    gate_voltages: tuple
    currents: tuple
    sigma: float
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "gate_voltages", tuple(float(v) for v in self.gate_voltages))
        object.__setattr__(self, "currents", tuple(float(v) for v in self.currents))
        if len(self.gate_voltages) != len(self.currents):
            raise ValueError("gate voltages and currents differ in length")
        if len(self.currents) < 3:
            raise ValueError("a measurement set needs at least 3 points")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


# -- forward model ----------------------------------------------------------------

def _coords(key) -> np.ndarray:
    """Parameter coordinates in which solutions vary smoothly."""
    return np.array([key[0], math.log(key[1]), math.log(key[2]), math.log(key[3])])


MAX_WEIGHT = 4.0  # largest extrapolation weight trusted in the affine predictor


class _GateCache:
    """Converged states of one gate point.

    A new solve starts from the affine combination of recent states whose
    parameter coordinates reproduce the requested point (minimum-norm
    weights).  This predicts the solution to second order in the step, where
    the nearest state alone is first-order accurate.  The factorization of
    the nearest state is reused.

    Recent states cluster around the chain.  A far proposal started from
    them needs many damped Newton steps, each with a fresh factorization:
    about 30 for a jump from rho_s = -1.5 to 0.5, against one from a start
    within ``MARCH_STEP``.  Well-spread anchor states (no factorizations, to
    bound memory) keep the region visited so far, and the forward model
    fills gaps by continuation.
    """

    def __init__(self, slots: int, anchors: int = ANCHOR_SLOTS):
        self.entries = deque(maxlen=slots)
        self.anchors = []
        self.anchor_slots = anchors

    def predict(self, key):
        """``(start, linearization, source coordinates)`` or None when empty."""
        if not self.entries:
            return None
        z = _coords(key)
        zs = np.array([e[0] for e in self.entries])
        dist = np.abs(zs - z).sum(axis=1)
        near = int(np.argmin(dist))
        if self.anchors and dist[near] > FAR:
            da = [np.abs(a[0] - z).sum() for a in self.anchors]
            best = int(np.argmin(da))
            if da[best] < 0.5 * dist[near]:
                return self.anchors[best][1], None, self.anchors[best][0]
        start = self.entries[near][1]
        # far entries (rejected far proposals) would spoil the fit
        local = np.flatnonzero(dist <= max(FAR, dist[near]))
        if len(local) > 1 and dist[near] > 0.0:
            dz = zs[local] - z
            spread = np.abs(dz).max(axis=0)
            span = spread > 0.0
            a = np.vstack([(dz[:, span] / spread[span]).T, np.ones(len(local))])
            rhs = np.zeros(a.shape[0])
            rhs[-1] = 1.0
            w = np.linalg.lstsq(a, rhs, rcond=1.0e-8)[0]
            if np.all(np.isfinite(w)) and np.max(np.abs(w)) <= MAX_WEIGHT \
                    and np.allclose(a @ w, rhs, atol=1.0e-8):
                mix = np.tensordot(w, np.array([self.entries[k][3] for k in local]), 1)
                start = CoupledState(mix[0], mix[1], mix[2])
        return start, self.entries[near][2], zs[near]

    def push(self, key, start, lin):
        stacked = np.array([start.v, start.phi_n, start.phi_p])
        z = _coords(key)
        self.entries.append((z, start, lin, stacked))
        self.anchor(z, start)

    def anchor(self, z, state):
        if self.anchor_slots <= 0:
            return
        zs = np.array([a[0] for a in self.anchors]).reshape(-1, len(z))
        gap = np.abs(zs - z).sum(axis=1)
        if len(gap) and gap.min() < ANCHOR_SPACING:
            return
        if len(self.anchors) >= self.anchor_slots:
            # drop the anchor closest to its neighbours, the most redundant one
            gaps = np.abs(zs[:, None, :] - zs[None, :, :]).sum(axis=2)
            np.fill_diagonal(gaps, np.inf)
            nearest = gaps.min(axis=1)
            worst = int(np.argmin(nearest))
            if gap.min() <= nearest[worst]:
                return
            del self.anchors[worst]
        self.anchors.append((z, state))


def _at_coords(params: ParameterVector, z) -> ParameterVector:
    return replace(params, rho_s=float(z[0]), c_dop=math.exp(z[1]), mu_n=math.exp(z[2]),
                   mu_p=math.exp(z[3]))


class ForwardModel:
    """Backgate sweeps of one device at arbitrary parameter vectors.

    ``solver="coupled"`` runs warm-started Newton solves; ``solver="gummel"``
    runs the reference Gummel loop, warm-started along the sweep.  With
    ``threads > 1`` the gate points of a sweep are solved concurrently; each
    gate owns its warm-start history, so results do not depend on the thread
    count.
    """

    def __init__(self, spec: DeviceSpec | None = None, constants: PhysicalConstants | None = None,
                 contacts: Contacts | None = None, srh: SRHParams | None = SRHParams(),
                 solver: str = "coupled", tolerance: float = SAMPLING_TOLERANCE,
                 threads: int = 1, warm_slots: int = WARM_SLOTS, z_mol: float = PSA_CHARGE,
                 dipole: float = 0.0):
        if solver not in ("coupled", "gummel"):
            raise ValueError(f"unknown solver {solver!r}")
        if threads < 1:
            raise ValueError("threads must be at least 1")
        self.spec = spec or DeviceSpec()
        self.constants = constants or PhysicalConstants()
        self.contacts = contacts or Contacts()
        self.srh = srh
        self.solver = solver
        self.tolerance = float(tolerance)
        self.threads = int(threads)
        self.warm_slots = int(warm_slots)
        self.z_mol = float(z_mol)
        self.dipole = float(dipole)
        problems = validate(self.spec, constants=self.constants)
        if problems:
            raise ValueError("; ".join(problems))
        self.mesh = build_mesh(self.spec)
        self._memo = {}
        self._lock = threading.Lock()
        self._gates = {}
        self.evaluations = 0
        self.failures = 0

    def physical(self, params: ParameterVector) -> ParameterVector:
        """Parameters as seen by the solver: rho_s follows c_pt when c_pt is active."""
        if "c_pt" in params.active:
            return replace(params, rho_s=pt_to_surface_charge(params.c_pt, self.z_mol))
        return params

    def _gate(self, vg) -> _GateCache:
        with self._lock:
            cache = self._gates.get(vg)
            if cache is None:
                cache = self._gates[vg] = _GateCache(self.warm_slots)
            return cache

    def _solve_gate(self, params, key, vg):
        contacts = replace(self.contacts, v_backgate=vg)
        itf = interface_from_params(params, self.constants, self.dipole)
        cache = self._gate(vg)
        guess = cache.predict(key)
        if guess is not None:
            start, lin0 = self._march(params, contacts, cache, guess)
            sol, state, lin = coupled_solve(self.mesh, contacts, params, self.constants, self.srh,
                                            itf, start=start, linearization=lin0,
                                            tolerance=self.tolerance)
            if sol.converged:
                cache.push(key, state, lin)
                return sol.current
        sol, state, lin = coupled_solve(self.mesh, contacts, params, self.constants, self.srh,
                                        itf, tolerance=self.tolerance)
        if not sol.converged:
            return None
        cache.push(key, state, lin)
        return sol.current

    def _march(self, params, contacts, cache, guess):
        """Continuation from the guess towards ``params`` in short steps.

        Intermediate solutions become anchors.  A failed step returns the
        best start reached so far.
        """
        start, lin, z0 = guess
        z = _coords((params.rho_s, params.c_dop, params.mu_n, params.mu_p))
        gap = np.abs(z - z0).sum()
        steps = math.ceil(gap / MARCH_STEP) if gap > FAR else 1
        for i in range(1, steps):
            zi = z0 + (z - z0) * (i / steps)
            mid = _at_coords(params, zi)
            sol, state, mid_lin = coupled_solve(
                self.mesh, contacts, mid, self.constants, self.srh,
                interface_from_params(mid, self.constants, self.dipole), start=start,
                linearization=lin, tolerance=self.tolerance)
            if not sol.converged:
                break
            cache.anchor(zi, state)
            start, lin = state, mid_lin
        return start, lin

    def _gummel_sweep(self, params, gates):
        out = []
        start = None
        itf = interface_from_params(params, self.constants, self.dipole)
        for vg in gates:
            contacts = replace(self.contacts, v_backgate=vg)
            sol = None
            if start is not None:
                try:
                    sol = gummel_solve(self.mesh, contacts, params, self.constants, self.srh,
                                       itf, start=start)
                except IterationError:
                    sol = None
            if sol is None or not sol.converged:
                # neighbouring gate too far away: fall back to a cold start
                sol = gummel_solve(self.mesh, contacts, params, self.constants, self.srh, itf)
            if not sol.converged:
                return None
            start = GummelStart(sol.v, sol.n, sol.p)
            out.append(sol.current)
        return out

    def currents(self, params: ParameterVector, gate_voltages=DEFAULT_GATES):
        """Currents of the sweep in A, or None when any gate point fails."""
        gates = tuple(float(v) for v in gate_voltages)
        if not gates:
            return np.zeros(0)
        phys = self.physical(params)
        key = (phys.rho_s, phys.c_dop, phys.mu_n, phys.mu_p)
        memo_key = (key, gates)
        with self._lock:
            hit = self._memo.get(memo_key, False)
        if hit is not False:
            return None if hit is None else hit.copy()
        self.evaluations += 1
        try:
            if self.solver == "gummel":
                values = self._gummel_sweep(phys, gates)
            elif self.threads > 1 and len(gates) > 1:
                with ThreadPoolExecutor(self.threads) as pool:
                    values = list(pool.map(lambda vg: self._solve_gate(phys, key, vg), gates))
            else:
                values = [self._solve_gate(phys, key, vg) for vg in gates]
        except (SolverError, IterationError) as exc:
            log.debug("forward sweep failed at %s: %s", key, exc)
            values = None
        result = None
        if values is not None and all(v is not None for v in values):
            result = np.array(values, dtype=float)
        else:
            self.failures += 1
        with self._lock:
            self._memo[memo_key] = result
        return None if result is None else result.copy()


def forward_iv(params: ParameterVector, gate_voltages=DEFAULT_GATES,
               model: ForwardModel | None = None) -> np.ndarray:
    """Drain currents of a backgate sweep; raises ForwardError on failure."""
    model = model or ForwardModel(tolerance=1.0e-9)
    out = model.currents(params, gate_voltages)
    if out is None:
        raise ForwardError("forward sweep did not converge")
    return out


def synthesize_measurements(true_params: ParameterVector, gate_voltages=DEFAULT_GATES,
                            epsilon: float = 0.01, seed=None,
                            model: ForwardModel | None = None) -> MeasurementSet:
    """Forward sweep plus Gaussian noise with sigma = epsilon * max|I|."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    clean = forward_iv(true_params, gate_voltages, model)
    sigma = float(epsilon * np.max(np.abs(clean)))
    noise = np.random.default_rng(seed).normal(0.0, sigma, len(clean))
    truth = {n: float(getattr(true_params, n)) for n in PARAMETER_NAMES}
    provenance = {"kind": "synthetic", "seed": seed, "epsilon": float(epsilon), "truth": truth,
                  "active": list(true_params.active)}
    return MeasurementSet(tuple(gate_voltages), tuple(clean + noise), sigma, provenance)


# -- studies ---------------------------------------------------------------------

def _range_prior(mean, lo, hi) -> Prior:
    """Gaussian prior with std = (hi - lo) / 4, truncated to [lo, hi]."""
    return Prior.gaussian(mean, (hi - lo) / 4.0, lo, hi)


def default_priors() -> dict:
    return {
        "rho_s": _range_prior(-1.5, -4.0, 1.0),
        "c_dop": _range_prior(1.0e16, 1.0e15, 5.0e16),
        "mu_n": Prior.gaussian(1170.0, 234.0, 585.0, 1755.0),
        "mu_p": Prior.gaussian(430.0, 86.0, 215.0, 645.0),
        "c_pt": _range_prior(1.05e10, 1.0e9, 2.0e10),
    }


@dataclass(frozen=True)
class StudyConfig:
    """Which parameters are inverted, their priors, and the chain settings.

    ``proposal_std`` defaults to one tenth of each prior std.
    """

    active: tuple
    priors: dict = field(default_factory=default_priors)
    fixed: ParameterVector = ParameterVector()
    n_steps: int = 300000
    burn_in: float = DEFAULT_BURN_IN
    epsilon: float = 0.01
    bins: int = DEFAULT_BINS
    sigma_dr: float = 0.5
    adapt_start: int = 1000
    eps_reg: float = 1.0e-10
    proposal_std: tuple | None = None
    delayed_rejection: bool = True
    adapt: bool = True
    adapt_scale: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "active", tuple(self.active))
        if not self.active:
            raise ValueError("at least one active unknown is required")
        unknown = set(self.active) - set(PARAMETER_NAMES)
        if unknown:
            raise ValueError(f"unknown parameter names: {sorted(unknown)}")
        if len(set(self.active)) != len(self.active):
            raise ValueError("duplicate active parameter")
        if "c_pt" in self.active and "rho_s" in self.active:
            raise ValueError("rho_s and c_pt cannot both be active unknowns")
        missing = [n for n in self.active if n not in self.priors]
        if missing:
            raise ValueError(f"no prior for {missing}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.proposal_std is not None and len(self.proposal_std) != len(self.active):
            raise ValueError("proposal_std needs one entry per active parameter")
        if self.adapt_scale is not None and not self.adapt_scale > 0:
            raise ValueError("adapt_scale must be positive")

    @property
    def prior_list(self) -> list:
        return [self.priors[n] for n in self.active]

    def prior_mean(self) -> np.ndarray:
        return np.array([p.mean for p in self.prior_list])

    def parameters(self, x) -> ParameterVector:
        return replace(self.fixed, active=self.active).with_values(self.active, x)

    def sampler_settings(self) -> SamplerSettings:
        scale = tuple(p.std for p in self.prior_list)
        std = self.proposal_std or tuple(s / 10.0 for s in scale)
        return SamplerSettings(initial_std=std, sigma_dr=self.sigma_dr,
                               adapt_start=self.adapt_start, eps_reg=self.eps_reg,
                               reg_scale=scale, delayed_rejection=self.delayed_rejection,
                               adapt=self.adapt, adapt_scale=self.adapt_scale)


class LogPosterior:
    """log prior + Gaussian log-likelihood of the data; -inf on forward failure."""

    def __init__(self, study: StudyConfig, data: MeasurementSet, model: ForwardModel):
        self.study = study
        self.data = data
        self.model = model
        self.observed = np.asarray(data.currents)

    def __call__(self, x) -> float:
        lp = log_prior(self.study.prior_list, x)
        if lp == -math.inf:
            return lp
        params = self.study.parameters(x)
        if validate(self.model.spec, params):
            return -math.inf
        sim = self.model.currents(params, self.data.gate_voltages)
        if sim is None:
            return -math.inf
        return lp + log_likelihood(sim, self.observed, self.data.sigma)


def run_inversion(study: StudyConfig, data: MeasurementSet, model: ForwardModel | None = None,
                  seed=None, initial=None, sampler: str = "dram",
                  progress=None) -> tuple[Chain, PosteriorSummary]:
    """Sample the posterior of the active parameters, starting at the prior mean."""
    model = model or ForwardModel()
    post = LogPosterior(study, data, model)
    x0 = study.prior_mean() if initial is None else np.asarray(initial, dtype=float)
    try:
        chain = run_chain(study.n_steps, x0, post, study.sampler_settings(), seed=seed,
                          names=study.active, sampler=sampler, progress=progress)
    except StartupError as exc:
        raise StartupError(f"{exc}: initial point {dict(zip(study.active, x0))}") from exc
    chain.meta.update(evaluations=model.evaluations, failures=model.failures)
    summary = summarize(chain, study.burn_in, study.bins)
    return chain, summary


def posterior_mean(source, burn_in: float = DEFAULT_BURN_IN) -> np.ndarray:
    if isinstance(source, PosteriorSummary):
        return source.mean
    samples = np.asarray(source.samples, dtype=float)
    kept = samples[int(burn_in * len(samples)):]
    if len(kept) == 0:
        raise ValueError("empty chain")
    return kept.mean(axis=0)


def posterior_predictive_iv(source, study: StudyConfig, gate_voltages=DEFAULT_GATES,
                            model: ForwardModel | None = None,
                            burn_in: float | None = None) -> np.ndarray:
    """Forward sweep at the posterior-mean parameters of a chain or summary."""
    mean = posterior_mean(source, study.burn_in if burn_in is None else burn_in)
    return forward_iv(study.parameters(mean), gate_voltages, model)


def prediction_error(currents, data: MeasurementSet) -> float:
    """zeta of a current vector against the measured currents."""
    return simulation_error(currents, data.currents)
