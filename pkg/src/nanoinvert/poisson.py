"""Nonlinear Poisson(-Boltzmann) solver over silicon, oxide and electrolyte.

Silicon carries q(C_dop + p - n) with Boltzmann carriers, the oxide is
charge free and the electrolyte carries -2 q phi sinh((V - Phi_F)/U_T).
The molecule layer enters as a surface charge and dipole density on the
oxide/liquid interface, realised through the doubled interface nodes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .device import (Contacts, InterfaceParams, ParameterVector, PhysicalConstants,
                     surface_charge_to_si)
from .pde import REGIONS, Mesh, SolverError, SparsePattern, SparseSystem, laplacian

EXP_CLAMP = 60.0
NEWTON_TOLERANCE = 1.0e-8
NEWTON_MAX_ITER = 100
MAX_HALVINGS = 10


class AssemblyError(RuntimeError):
    pass


@dataclass
class NewtonReport:
    iterations: int = 0
    residual: float = float("inf")
    converged: bool = False
    damping_events: int = 0
    clamp_events: int = 0


@dataclass
class PoissonProblem:
    """Inputs of one electrostatic solve.

    ``mode="equilibrium"`` uses n = n_i exp((V - Phi_F)/U_T) in silicon.
    ``mode="frozen"`` keeps the quasi-Fermi levels of given carrier fields:
    n = n_ref exp((V - v_ref)/U_T), p = p_ref exp(-(V - v_ref)/U_T), which
    returns exactly ``n_ref``/``p_ref`` at ``V = v_ref``.
    """

    mesh: Mesh
    contacts: Contacts
    constants: PhysicalConstants
    interface: InterfaceParams
    params: ParameterVector
    mode: str = "equilibrium"
    n_ref: np.ndarray | None = None
    p_ref: np.ndarray | None = None
    v_ref: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("equilibrium", "frozen"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "frozen":
            si = self.mesh.volume["Si"] > 0
            for name in ("n_ref", "p_ref", "v_ref"):
                arr = getattr(self, name)
                if arr is None or len(arr) != self.mesh.n_nodes:
                    raise ValueError(f"frozen-carriers mode needs {name} on every node")
                if name != "v_ref" and not np.all(arr[si] > 0):
                    raise ValueError(f"{name} must be positive on silicon nodes")


def interface_from_params(params: ParameterVector, constants: PhysicalConstants,
                          dipole: float = 0.0) -> InterfaceParams:
    return InterfaceParams(
        surface_charge=surface_charge_to_si(params.rho_s, constants.q),
        dipole=dipole,
        a_plus=constants.eps_liq,
    )


def builtin_potential(params: ParameterVector, constants: PhysicalConstants) -> float:
    """Potential of charge-neutral silicon in equilibrium."""
    ut = constants.thermal_voltage
    return constants.phi_f + ut * math.asinh(params.signed_doping / (2.0 * constants.n_i))


def neutral_densities(params: ParameterVector, constants: PhysicalConstants):
    """(n, p) of charge-neutral silicon, used at the ohmic contacts."""
    c = params.signed_doping
    ni = constants.n_i
    root = math.sqrt(c * c / 4.0 + ni * ni)
    if c >= 0:
        n = c / 2.0 + root
        p = ni * ni / n
    else:
        p = -c / 2.0 + root
        n = ni * ni / p
    return n, p


def dirichlet_values(mesh: Mesh, contacts: Contacts, params: ParameterVector,
                     constants: PhysicalConstants) -> dict[str, float]:
    psi = builtin_potential(params, constants)
    values = {
        "source": contacts.v_source + psi,
        "drain": contacts.v_drain + psi,
        "backgate": contacts.v_backgate,
        "solution": contacts.v_solution,
    }
    return {name: values[name] for name in mesh.contacts if name in values}


def space_charge(v, region, params: ParameterVector, constants: PhysicalConstants,
                 n_ref=None, p_ref=None, v_ref=None, counter=None):
    """Charge density in C/cm^3 at potential ``v`` and its derivative dρ/dV.

    Exponents are clamped at |arg| <= 60; ``counter`` (a one-element list)
    accumulates the number of clamped evaluations.
    """
    v = np.asarray(v, dtype=float)
    q, ut = constants.q, constants.thermal_voltage
    if region == "Ox":
        return np.zeros_like(v), np.zeros_like(v)
    if region == "Liq":
        arg = (v - constants.phi_f) / ut
        clipped = np.clip(arg, -EXP_CLAMP, EXP_CLAMP)
        if counter is not None:
            counter[0] += int(np.count_nonzero(clipped != arg))
        rho = -2.0 * q * constants.ion_concentration * np.sinh(clipped)
        drho = -2.0 * q * constants.ion_concentration * np.cosh(clipped) / ut
        return rho, drho
    if region == "Si":
        if v_ref is None:
            arg = (v - constants.phi_f) / ut
            n0 = p0 = constants.n_i
        else:
            arg = (v - v_ref) / ut
            n0, p0 = n_ref, p_ref
        clipped = np.clip(arg, -EXP_CLAMP, EXP_CLAMP)
        if counter is not None:
            counter[0] += int(np.count_nonzero(clipped != arg))
        e = np.exp(clipped)
        n = n0 * e
        p = p0 / e
        rho = q * (params.signed_doping + p - n)
        drho = -q * (p + n) / ut
        return rho, drho
    raise ValueError(f"unknown region {region!r}")


class _Operator:
    """Mesh-dependent pieces of the Newton system, built once per mesh."""

    def __init__(self, mesh: Mesh, constants: PhysicalConstants):
        self.mesh = mesh
        n = mesh.n_nodes
        eps = {r: constants.permittivity(r) for r in REGIONS}
        self.lap = laplacian(mesh, eps).tocsr()
        self.dirichlet = mesh.dirichlet_mask()
        if np.any(self.dirichlet[mesh.gamma_ox]) or np.any(self.dirichlet[mesh.gamma_liq]):
            raise AssemblyError("interface nodes cannot carry Dirichlet conditions")
        self.unknown = np.flatnonzero(~self.dirichlet)
        self.index = np.full(n, -1)
        self.index[self.unknown] = np.arange(len(self.unknown))
        self.row_target = np.arange(n)
        self.row_target[mesh.gamma_liq] = mesh.gamma_ox
        self.is_constraint = np.zeros(n, dtype=bool)
        self.is_constraint[mesh.gamma_liq] = True

        coo = self.lap.tocoo()
        # liquid-copy equations are added onto the oxide-copy rows
        lrow = self.row_target[coo.row]
        lcol = coo.col
        ldat = coo.data
        crow = np.concatenate([mesh.gamma_liq, mesh.gamma_liq])
        ccol = np.concatenate([mesh.gamma_liq, mesh.gamma_ox])
        cdat = np.concatenate([np.ones(len(mesh.gamma_liq)), -np.ones(len(mesh.gamma_liq))])
        drow = self.row_target
        dcol = np.arange(n)
        rows = np.concatenate([lrow, crow, drow])
        cols = np.concatenate([lcol, ccol, dcol])
        self.n_lap = len(lrow)
        self.n_con = len(crow)
        ok = (self.index[rows] >= 0) & (self.index[cols] >= 0)
        self.entry_mask = ok
        self.rows = self.index[rows[ok]]
        self.cols = self.index[cols[ok]]
        self.pattern = SparsePattern(self.rows, self.cols, len(self.unknown))
        self.const_data = np.concatenate([ldat, cdat])
        # equation scale (V): merged Laplacian diagonal, 1 for constraint rows
        diag = np.bincount(self.row_target, weights=self.lap.diagonal(), minlength=n)
        diag[self.is_constraint] = 1.0
        self.scale = diag
        self.volumes = {r: mesh.volume[r] for r in ("Si", "Liq")}
        self.si = mesh.volume["Si"] > 0
        self.liq = mesh.volume["Liq"] > 0

    def charge(self, problem: PoissonProblem, v, counter):
        """Integrated node charge (C per unit depth) and its derivative."""
        n = self.mesh.n_nodes
        q_tot = np.zeros(n)
        dq = np.zeros(n)
        si = self.si
        if problem.mode == "frozen":
            rho, drho = space_charge(v[si], "Si", problem.params, problem.constants,
                                     problem.n_ref[si], problem.p_ref[si], problem.v_ref[si],
                                     counter)
        else:
            rho, drho = space_charge(v[si], "Si", problem.params, problem.constants,
                                     counter=counter)
        q_tot[si] += self.volumes["Si"][si] * rho
        dq[si] += self.volumes["Si"][si] * drho
        liq = self.liq
        rho, drho = space_charge(v[liq], "Liq", problem.params, problem.constants,
                                 counter=counter)
        q_tot[liq] += self.volumes["Liq"][liq] * rho
        dq[liq] += self.volumes["Liq"][liq] * drho
        return q_tot, dq

    def surface_source(self, problem: PoissonProblem):
        s = np.zeros(self.mesh.n_nodes)
        s[self.mesh.gamma_ox] = problem.interface.surface_charge * self.mesh.gamma_length
        return s

    def jump(self, problem: PoissonProblem):
        itf = problem.interface
        return itf.dipole / (problem.constants.eps0 * itf.a_plus)

    def residual(self, problem, v, counter):
        """Merged residual over all nodes (Dirichlet rows included, ignored later)."""
        q_tot, dq = self.charge(problem, v, counter)
        return self.merged_residual(problem, v, q_tot), dq

    def merged_residual(self, problem, v, q_tot):
        """Interface-merged residual for a given integrated node charge."""
        f = self.lap @ v - q_tot - self.surface_source(problem)
        fm = np.bincount(self.row_target, weights=f, minlength=self.mesh.n_nodes)
        g = self.mesh
        fm[g.gamma_liq] = v[g.gamma_liq] - v[g.gamma_ox] - self.jump(problem)
        return fm

    def jacobian_data(self, dq):
        """Entry values matching ``rows``/``cols``."""
        return np.concatenate([self.const_data, -dq])[self.entry_mask]

    def jacobian(self, dq):
        return self.pattern.matrix(self.jacobian_data(dq))

    def scaled_norm(self, fm):
        r = fm[self.unknown] / self.scale[self.unknown]
        return float(np.max(np.abs(r))) if len(r) else 0.0, r


def _operator(mesh: Mesh, constants: PhysicalConstants) -> _Operator:
    cache = mesh.__dict__.setdefault("_poisson_ops", {})
    op = cache.get(constants)
    if op is None:
        op = cache[constants] = _Operator(mesh, constants)
    return op


def apply_dirichlet(problem: PoissonProblem, v: np.ndarray) -> np.ndarray:
    v = np.array(v, dtype=float)
    values = dirichlet_values(problem.mesh, problem.contacts, problem.params, problem.constants)
    for name, nodes in problem.mesh.contacts.items():
        v[nodes] = values[name]
    return v


def assemble_poisson(problem: PoissonProblem, v_current: np.ndarray) -> SparseSystem:
    """Newton system J dV = -F restricted to the non-Dirichlet nodes."""
    mesh = problem.mesh
    if len(v_current) != mesh.n_nodes:
        raise AssemblyError("potential must be defined on every node")
    known = set(dirichlet_values(mesh, problem.contacts, problem.params, problem.constants))
    missing = set(mesh.contacts) - known
    if missing:
        raise AssemblyError(f"unmapped Dirichlet contact(s): {sorted(missing)}")
    op = _operator(mesh, problem.constants)
    fm, dq = op.residual(problem, np.asarray(v_current, dtype=float), [0])
    return SparseSystem(op.jacobian(dq), -fm[op.unknown])


def initial_guess(problem: PoissonProblem) -> np.ndarray:
    """Charge-neutral potential in silicon, linear in y between the vertical contacts."""
    mesh = problem.mesh
    values = dirichlet_values(mesh, problem.contacts, problem.params, problem.constants)
    y0, y1 = mesh.y[0], mesh.y[-1]
    lo = values.get("backgate", problem.contacts.v_backgate)
    hi = values.get("solution", problem.contacts.v_solution)
    t = (mesh.node_y - y0) / (y1 - y0)
    v = lo + (hi - lo) * t
    si = mesh.volume["Si"] > 0
    if np.any(si):
        psi = builtin_potential(problem.params, problem.constants)
        if problem.mode == "frozen":
            v[si] = problem.v_ref[si]
        else:
            xs = mesh.node_x[si]
            frac = (xs - mesh.x[0]) / (mesh.x[-1] - mesh.x[0])
            c = problem.contacts
            v[si] = psi + c.v_source + (c.v_drain - c.v_source) * frac
    return apply_dirichlet(problem, v)


def solve_poisson(problem: PoissonProblem, v_initial=None, tolerance=NEWTON_TOLERANCE,
                  max_iter=NEWTON_MAX_ITER):
    """Damped Newton iteration; returns (V, NewtonReport) whether or not it converged."""
    op = _operator(problem.mesh, problem.constants)
    v = initial_guess(problem) if v_initial is None else apply_dirichlet(problem, v_initial)
    if not np.all(np.isfinite(v)):
        raise ValueError("initial potential must be finite")
    report = NewtonReport()
    counter = [0]
    ut = problem.constants.thermal_voltage
    fm, dq = op.residual(problem, v, counter)
    res, r = op.scaled_norm(fm)
    norm = float(np.linalg.norm(r))
    unknown = op.unknown
    for it in range(1, max_iter + 1):
        if res <= tolerance * ut:
            report.converged = True
            break
        jac = op.jacobian(dq)
        try:
            step = spla.splu(jac).solve(-fm[unknown])
        except RuntimeError as exc:
            raise SolverError(f"Newton Jacobian is singular: {exc}", float("inf")) from exc
        report.iterations = it
        lam = 1.0
        for _ in range(MAX_HALVINGS + 1):
            trial = v.copy()
            trial[unknown] += lam * step
            tf, tdq = op.residual(problem, trial, counter)
            tres, tr = op.scaled_norm(tf)
            tnorm = float(np.linalg.norm(tr))
            if tnorm < norm or not np.isfinite(norm):
                break
            lam *= 0.5
            report.damping_events += 1
        v, fm, dq, res, norm = trial, tf, tdq, tres, tnorm
    else:
        report.converged = res <= tolerance * ut
    report.residual = res
    report.clamp_events = counter[0]
    return v, report


def interface_fluxes(problem: PoissonProblem, v: np.ndarray):
    """Displacement flux leaving the interface boxes on each side (C per unit depth).

    Returns (oxide_side, liquid_side, enclosed_volume_charge) summed over all
    interface nodes; Gauss's law requires their balance to equal the surface
    charge times the interface length.
    """
    mesh = problem.mesh
    op = _operator(mesh, problem.constants)
    flux = op.lap @ v
    q_tot, _ = op.charge(problem, v, [0])
    ox = flux[mesh.gamma_ox].sum()
    liq = flux[mesh.gamma_liq].sum()
    enclosed = q_tot[mesh.gamma_ox].sum() + q_tot[mesh.gamma_liq].sum()
    return ox, liq, enclosed
