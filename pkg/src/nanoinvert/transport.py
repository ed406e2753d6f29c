"""Drift-diffusion transport in the silicon wire and the terminal current.

Continuity equations are discretized with Scharfetter-Gummel edge fluxes on
the silicon part of the box mesh and coupled to the Poisson solver through a
Gummel loop.  Source and drain are ohmic contacts holding the charge-neutral
equilibrium densities.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .device import Contacts, InterfaceParams, ParameterVector, PhysicalConstants
from .pde import Mesh, SolverError, SparsePattern, bernoulli
from .poisson import (PoissonProblem, interface_from_params, neutral_densities,
                      solve_poisson)

GUMMEL_TOLERANCE = 1.0e-6
GUMMEL_MAX_ITER = 200
_SCALE_CLAMP = 300.0
_REFINE_STEPS = 3


class IterationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SRHParams:
    tau_n: float = 1.0e-6
    tau_p: float = 1.0e-6

    def __post_init__(self):
        if not (self.tau_n > 0 and self.tau_p > 0):
            raise ValueError("carrier lifetimes must be positive")


def srh_rate(n, p, srh: SRHParams, n_i: float):
    """Shockley-Read-Hall net recombination rate in cm^-3 s^-1."""
    n = np.asarray(n, dtype=float)
    p = np.asarray(p, dtype=float)
    return (n * p - n_i * n_i) / (srh.tau_p * (n + n_i) + srh.tau_n * (p + n_i))


@dataclass
class TransportSolution:
    """Self-consistent fields; ``j_n``/``j_p`` are A/cm^2 along silicon edges a->b."""

    mesh: Mesh
    v: np.ndarray
    n: np.ndarray
    p: np.ndarray
    j_n: np.ndarray
    j_p: np.ndarray
    current: float
    gummel_iterations: int
    converged: bool
    updates: list = field(default_factory=list)
    cross_check: tuple = ()


class _SiliconOperator:
    """Silicon sub-mesh: edges, control volumes and the continuity pattern."""

    def __init__(self, mesh: Mesh):
        si = mesh.volume["Si"] > 0
        self.nodes = np.flatnonzero(si)
        e = mesh.edge_w["Si"] > 0
        self.a = mesh.edge_a[e]
        self.b = mesh.edge_b[e]
        self.h = mesh.edge_h[e]
        self.w = mesh.edge_w["Si"][e]
        self.horizontal = mesh.edge_horizontal[e]
        self.xa = mesh.node_x[self.a]
        self.xb = mesh.node_x[self.b]
        self.vol = mesh.volume["Si"]
        dirichlet = np.zeros(mesh.n_nodes, dtype=bool)
        for name in ("source", "drain"):
            if name in mesh.contacts:
                dirichlet[mesh.contacts[name]] = True
        self.dirichlet = dirichlet
        self.unknown = self.nodes[~dirichlet[self.nodes]]
        self.index = np.full(mesh.n_nodes, -1)
        self.index[self.unknown] = np.arange(len(self.unknown))
        a, b = self.a, self.b
        rows = np.concatenate([a, a, b, b, self.unknown])
        cols = np.concatenate([a, b, b, a, self.unknown])
        ok = (self.index[rows] >= 0) & (self.index[cols] >= 0)
        self.mask = ok
        self.pattern = SparsePattern(self.index[rows[ok]], self.index[cols[ok]], len(self.unknown))
        # Dirichlet couplings that move to the right-hand side
        self.rhs_ab = (self.index[a] >= 0) & dirichlet[b]
        self.rhs_ba = (self.index[b] >= 0) & dirichlet[a]


def silicon_operator(mesh: Mesh) -> _SiliconOperator:
    op = mesh.__dict__.get("_silicon_op")
    if op is None:
        op = mesh.__dict__["_silicon_op"] = _SiliconOperator(mesh)
    return op


def _sign(carrier):
    if carrier == "n":
        return 1.0
    if carrier == "p":
        return -1.0
    raise ValueError(f"carrier must be 'n' or 'p', got {carrier!r}")


def edge_fluxes(mesh, v, u, diffusivity, carrier, thermal_voltage):
    """SG flux (D/h)[B(s d) u_b - B(-s d) u_a] on every silicon edge a->b."""
    op = silicon_operator(mesh)
    s = _sign(carrier)
    d = (v[op.b] - v[op.a]) / thermal_voltage
    return diffusivity / op.h * (bernoulli(s * d) * u[op.b] - bernoulli(-s * d) * u[op.a])


def contact_densities(mesh: Mesh, params: ParameterVector, constants: PhysicalConstants):
    n0, p0 = neutral_densities(params, constants)
    names = [c for c in ("source", "drain") if c in mesh.contacts]
    return {c: n0 for c in names}, {c: p0 for c in names}


def solve_continuity(mesh: Mesh, carrier: str, v, other, params: ParameterVector,
                     constants: PhysicalConstants, srh: SRHParams | None,
                     boundary: dict[str, float] | None = None, previous=None):
    """Solve the SG-discretized continuity equation for ``carrier`` at fixed V.

    ``other`` is the opposite carrier density.  SRH recombination is
    linearized in the unknown carrier, with its denominator taken at
    ``previous`` (defaults to ``other``-based equilibrium); ``srh=None``
    sets R to zero.  ``boundary`` maps contacts to imposed densities and
    defaults to the charge-neutral ohmic values.
    """
    op = silicon_operator(mesh)
    ut = constants.thermal_voltage
    s = _sign(carrier)
    if boundary is None:
        bn, bpd = contact_densities(mesh, params, constants)
        boundary = bn if carrier == "n" else bpd
    diff = params.d_n if carrier == "n" else params.d_p
    if not np.all(np.isfinite(v[op.nodes])):
        raise IterationError(f"non-finite potential in the {carrier} continuity solve")
    # Slotboom scaling u = g * w with g = exp(s V / U_T): the SG operator
    # becomes a symmetric weighted Laplacian in w, with exactly zero row sums.
    sv = s * v / ut
    sv = sv - np.median(sv[op.nodes])
    g_node = np.zeros(mesh.n_nodes)
    g_node[op.nodes] = np.exp(np.clip(sv[op.nodes], -_SCALE_CLAMP, _SCALE_CLAMP))
    d = (v[op.b] - v[op.a]) / ut
    coupling = diff * op.w / op.h * bernoulli(s * d) * g_node[op.b]
    nu = len(op.unknown)
    rhs = np.zeros(nu)
    gu = g_node[op.unknown]
    diag_extra = np.zeros(nu)
    if srh is not None:
        ni = constants.n_i
        oth = other[op.unknown]
        own = previous[op.unknown] if previous is not None else ni * ni / oth
        if carrier == "n":
            den = srh.tau_p * (own + ni) + srh.tau_n * (oth + ni)
        else:
            den = srh.tau_p * (oth + ni) + srh.tau_n * (own + ni)
        vol = op.vol[op.unknown]
        diag_extra = -vol * oth / den * gu
        rhs = -vol * ni * ni / den
    base_extra, base_rhs = diag_extra, rhs.copy()
    data = np.concatenate([-coupling, coupling, -coupling, coupling, diag_extra])[op.mask]
    mat = op.pattern.matrix(data)
    wb = np.zeros(mesh.n_nodes)
    for name, value in boundary.items():
        nodes = mesh.contacts[name]
        wb[nodes] = value / g_node[nodes]
    np.subtract.at(rhs, op.index[op.a[op.rhs_ab]], coupling[op.rhs_ab] * wb[op.b[op.rhs_ab]])
    np.subtract.at(rhs, op.index[op.b[op.rhs_ba]], coupling[op.rhs_ba] * wb[op.a[op.rhs_ba]])
    try:
        lu = spla.splu(mat)
    except RuntimeError as exc:
        raise SolverError(f"continuity matrix is singular: {exc}", float("inf")) from exc
    w = lu.solve(rhs)
    # The weights span many decades, so a floating region weakly tied to the
    # contacts loses digits in the factorization.  Edge-wise residuals avoid
    # the cancellation, and a few refinement steps recover them.
    w_full = wb.copy()
    for _ in range(_REFINE_STEPS):
        w_full[op.unknown] = w
        flux = coupling * (w_full[op.b] - w_full[op.a])
        res = np.zeros(mesh.n_nodes)
        np.add.at(res, op.a, flux)
        np.subtract.at(res, op.b, flux)
        res = res[op.unknown] + base_extra * w - base_rhs
        w = w - lu.solve(res)
    sol = w * gu
    if not np.all(np.isfinite(sol)) or np.any(sol <= 0):
        raise IterationError(f"non-positive {carrier} density after continuity solve")
    u = np.full(mesh.n_nodes, np.nan)
    u[op.unknown] = sol
    for name, value in boundary.items():
        u[mesh.contacts[name]] = value
    return u


def edge_currents(mesh, v, n, p, params, constants):
    """Electron and hole current densities (A/cm^2) along silicon edges a->b."""
    ut, q = constants.thermal_voltage, constants.q
    j_n = q * edge_fluxes(mesh, v, n, params.d_n, "n", ut)
    j_p = -q * edge_fluxes(mesh, v, p, params.d_p, "p", ut)
    return j_n, j_p


def section_current(mesh, j_n, j_p, x_section):
    """Current in +x through the vertical section at ``x_section`` (A)."""
    op = silicon_operator(mesh)
    lo, hi = mesh.x[0], mesh.x[-1]
    if not lo < x_section < hi:
        raise ValueError(f"section x={x_section} lies outside the silicon wire")
    cross = op.horizontal & (np.minimum(op.xa, op.xb) <= x_section) & (np.maximum(op.xa, op.xb) > x_section)
    direction = np.sign(op.xb[cross] - op.xa[cross])
    return float(mesh.depth * np.sum((j_n[cross] + j_p[cross]) * op.w[cross] * direction))


def terminal_current(solution: TransportSolution, cross_section_x: float) -> float:
    """Drain terminal current: current flowing from drain to source (A)."""
    return -section_current(solution.mesh, solution.j_n, solution.j_p, cross_section_x)


def _quarter_sections(mesh):
    lo, hi = mesh.x[0], mesh.x[-1]
    span = hi - lo
    # nudge off grid lines so a section never coincides with a node column
    eps = 1e-9 * span
    return [lo + f * span + eps for f in (0.5, 0.25, 0.75)]


@dataclass
class GummelStart:
    """Optional warm start: potential and carriers from a nearby solution."""

    v: np.ndarray
    n: np.ndarray
    p: np.ndarray


def gummel_solve(mesh: Mesh, contacts: Contacts, params: ParameterVector,
                 constants: PhysicalConstants, srh: SRHParams | None = SRHParams(),
                 interface: InterfaceParams | None = None, start: GummelStart | None = None,
                 tolerance=GUMMEL_TOLERANCE, max_iter=GUMMEL_MAX_ITER) -> TransportSolution:
    """Gummel loop: Poisson at frozen quasi-Fermi levels, then n, then p."""
    if interface is None:
        interface = interface_from_params(params, constants)
    op = silicon_operator(mesh)
    ut = constants.thermal_voltage
    ni = constants.n_i
    bn, bp = contact_densities(mesh, params, constants)

    if start is None:
        # quasi-Fermi levels linear between source and drain
        frac = (mesh.node_x - mesh.x[0]) / (mesh.x[-1] - mesh.x[0])
        phi = constants.phi_f + contacts.v_source + (contacts.v_drain - contacts.v_source) * frac
        v_ref = np.zeros(mesh.n_nodes)
        first = PoissonProblem(mesh, contacts, constants, interface, params, mode="frozen",
                               n_ref=np.full(mesh.n_nodes, ni) * np.exp(-phi / ut),
                               p_ref=np.full(mesh.n_nodes, ni) * np.exp(phi / ut),
                               v_ref=v_ref)
        v, rep = solve_poisson(first)
        if not rep.converged:
            return _failed(mesh, v, 0)
        arg = np.clip((v - phi) / ut, -60, 60)
        n = ni * np.exp(arg)
        p = ni * np.exp(-arg)
    else:
        v, n, p = start.v.copy(), start.n.copy(), start.p.copy()
        for name, value in bn.items():
            n[mesh.contacts[name]] = value
        for name, value in bp.items():
            p[mesh.contacts[name]] = value
    off = ~(mesh.volume["Si"] > 0)
    n[off] = ni
    p[off] = ni

    updates = []
    converged = False
    it = 0
    def carriers(v, n, p):
        n = solve_continuity(mesh, "n", v, p, params, constants, srh, bn, previous=n)
        p = solve_continuity(mesh, "p", v, n, params, constants, srh, bp, previous=p)
        n[off] = ni
        p[off] = ni
        return n, p

    for it in range(1, max_iter + 1):
        n, p = carriers(v, n, p)
        prob = PoissonProblem(mesh, contacts, constants, interface, params, mode="frozen",
                              n_ref=n, p_ref=p, v_ref=v)
        v_new, rep = solve_poisson(prob, v)
        if not rep.converged:
            return _failed(mesh, v_new, it, updates)
        delta = float(np.max(np.abs(v_new - v)))
        updates.append(delta)
        v = v_new
        if delta <= tolerance:
            # carriers consistent with the final potential keep the current conservative
            n, p = carriers(v, n, p)
            converged = True
            break
    j_n, j_p = edge_currents(mesh, v, n, p, params, constants)
    sol = TransportSolution(mesh, v, n, p, j_n, j_p, float("nan"), it, converged, updates)
    sections = _quarter_sections(mesh)
    values = [terminal_current(sol, x) for x in sections]
    sol.current = values[0]
    sol.cross_check = tuple(values)
    return sol


def _failed(mesh, v, iterations, updates=()):
    nan = np.full(mesh.n_nodes, np.nan)
    return TransportSolution(mesh, v, nan, nan, np.zeros(0), np.zeros(0), float("nan"),
                             iterations, False, list(updates))
