"""Fully coupled Newton solver for the drift-diffusion-Poisson system.

The unknowns are the potential V on every non-Dirichlet node and the
quasi-Fermi potentials phi_n, phi_p on the free silicon nodes, with
n = n_i exp((V - phi_n)/U_T) and p = n_i exp((phi_p - V)/U_T).  The
discretization is the one used by the Gummel loop (box method, SG fluxes,
nodal SRH), so both solvers converge to the same discrete solution.

Written in quasi-Fermi form the SG flux along an edge a->b reads

    F = (D/h) B(s d) u_b (1 - exp(s (phi_b - phi_a) / U_T))

which vanishes exactly at constant phi: equilibrium is represented without
cancellation, and thermal equilibrium gives np = n_i^2 and zero current to
roundoff.

A factorization of the Jacobian can be carried from one solve to the next
(chord iteration).  Sampling a posterior evaluates the same sweep at many
nearby parameter vectors, and a stale factorization then converges in a few
triangular solves; it is refreshed whenever the contraction degrades.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .device import Contacts, InterfaceParams, ParameterVector, PhysicalConstants
from .pde import Mesh, SolverError, SparsePattern, bernoulli_derivative, bernoulli_pair
from .poisson import (EXP_CLAMP, PoissonProblem, _operator, dirichlet_values,
                      interface_from_params, space_charge)
from .transport import (SRHParams, TransportSolution, _quarter_sections, gummel_solve,
                        silicon_operator, terminal_current)

UPDATE_TOLERANCE = 1.0e-9  # V, max-norm of the Newton update
MAX_ITER = 60
STEP_CAP = 0.05  # V, largest update of one component in one step
CHORD_RATE = 0.8  # refactor once a stale Jacobian contracts slower than this
ANDERSON_DEPTH = 3  # chord steps mixed per update
COLD_START_TOLERANCE = 1.0e-3  # V, Gummel update norm before switching to Newton


@dataclass
class CoupledState:
    """Nodal potential and quasi-Fermi potentials (V)."""

    v: np.ndarray
    phi_n: np.ndarray
    phi_p: np.ndarray

    def copy(self) -> "CoupledState":
        return CoupledState(self.v.copy(), self.phi_n.copy(), self.phi_p.copy())


@dataclass
class Linearization:
    """A factorized, row-equilibrated Jacobian that can be reused."""

    lu: object
    row_scale: np.ndarray


class _CoupledOperator:
    def __init__(self, mesh: Mesh, constants: PhysicalConstants):
        self.mesh = mesh
        self.pop = pop = _operator(mesh, constants)
        self.sop = sop = silicon_operator(mesh)
        n = mesh.n_nodes
        vu, cu = pop.unknown, sop.unknown
        # interleave (V, phi_n, phi_p) per node to keep the fill local
        keys = np.concatenate([3 * vu, 3 * cu + 1, 3 * cu + 2])
        pos = np.empty(len(keys), dtype=np.int64)
        pos[np.argsort(keys, kind="stable")] = np.arange(len(keys))
        self.size = len(keys)
        self.pos_v = pos[: len(vu)]
        self.pos_n = pos[len(vu): len(vu) + len(cu)]
        self.pos_p = pos[len(vu) + len(cu):]
        gv = np.full(n, -1, dtype=np.int64)
        gn = gv.copy()
        gp = gv.copy()
        gv[vu] = self.pos_v
        gn[cu] = self.pos_n
        gp[cu] = self.pos_p
        a, b = sop.a, sop.b
        rows = [self.pos_v[pop.rows], gv[cu], gv[cu]]
        cols = [self.pos_v[pop.cols], gn[cu], gp[cu]]
        for gc in (gn, gp):
            ra, rb = gc[a], gc[b]
            edge_cols = [gv[a], gv[b], gc[a], gc[b]]
            rows += [ra] * 4 + [rb] * 4
            cols += edge_cols * 2
            rows += [gc[cu]] * 3
            cols += [gv[cu], gn[cu], gp[cu]]
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        self.n_poisson = len(pop.rows)
        self.mask = (rows >= 0) & (cols >= 0)
        self.mask[: self.n_poisson] = True
        self.rows = rows[self.mask]
        self.pattern = SparsePattern(self.rows, cols[self.mask], self.size)
        self.si = sop.nodes
        self.liq = np.flatnonzero(mesh.volume["Liq"] > 0)
        self.vol_si = mesh.volume["Si"]
        self.vol_liq = mesh.volume["Liq"][self.liq]
        self.srcdrn = [c for c in ("source", "drain") if c in mesh.contacts]

    def dirichlet(self, state: CoupledState, contacts: Contacts, params: ParameterVector,
                  constants: PhysicalConstants) -> CoupledState:
        values = dirichlet_values(self.mesh, contacts, params, constants)
        for name, nodes in self.mesh.contacts.items():
            state.v[nodes] = values[name]
        for name in self.srcdrn:
            applied = getattr(contacts, f"v_{name}") + constants.phi_f
            state.phi_n[self.mesh.contacts[name]] = applied
            state.phi_p[self.mesh.contacts[name]] = applied
        return state

    def densities(self, state: CoupledState, constants: PhysicalConstants):
        ut, ni = constants.thermal_voltage, constants.n_i
        n = np.zeros(self.mesh.n_nodes)
        p = np.zeros(self.mesh.n_nodes)
        si = self.si
        n[si] = ni * np.exp(np.clip((state.v[si] - state.phi_n[si]) / ut, -EXP_CLAMP, EXP_CLAMP))
        p[si] = ni * np.exp(np.clip((state.phi_p[si] - state.v[si]) / ut, -EXP_CLAMP, EXP_CLAMP))
        return n, p

    def edge_terms(self, state, u, phi, s, ut, pair=None):
        """SG flux per unit width along silicon edges, plus pieces of its derivative."""
        sop = self.sop
        d = (state.v[sop.b] - state.v[sop.a]) / ut
        if pair is None:
            pair = bernoulli_pair(d)
        bs, bms = pair if s > 0 else pair[::-1]
        e = s * (phi[sop.b] - phi[sop.a]) / ut
        big_e = -np.expm1(e)
        flux = bs * u[sop.b] * big_e / sop.h
        return flux, d, (bs, bms), big_e

    def evaluate(self, state: CoupledState, problem: PoissonProblem, srh: SRHParams | None,
                 jacobian: bool):
        """Residual vector (global ordering) and, optionally, Jacobian entries."""
        mesh, sop, pop = self.mesh, self.sop, self.pop
        constants, params = problem.constants, problem.params
        ut, ni, q = constants.thermal_voltage, constants.n_i, constants.q
        n, p = self.densities(state, constants)
        nn = mesh.n_nodes
        vol = self.vol_si
        q_tot = vol * q * (params.signed_doping + p - n)
        q_tot[vol == 0] = 0.0
        rho_l, drho_l = space_charge(state.v[self.liq], "Liq", params, constants)
        q_tot[self.liq] += self.vol_liq * rho_l
        fv = pop.merged_residual(problem, state.v, q_tot)

        cu = sop.unknown
        res = np.empty(self.size)
        res[self.pos_v] = fv[pop.unknown]
        parts = {}
        pair = bernoulli_pair((state.v[sop.b] - state.v[sop.a]) / ut)
        for carrier, s, u, phi, diff in (("n", 1.0, n, state.phi_n, params.d_n),
                                         ("p", -1.0, p, state.phi_p, params.d_p)):
            flux, d, bs, big_e = self.edge_terms(state, u, phi, s, ut, pair)
            g = diff * sop.w
            f = g * flux
            r = np.bincount(sop.a, f, nn) - np.bincount(sop.b, f, nn)
            parts[carrier] = (r, g, d, bs, big_e, s, u)
        if srh is not None:
            nc, pc = n[cu], p[cu]
            excess = nc * pc - ni * ni
            den = srh.tau_p * (nc + ni) + srh.tau_n * (pc + ni)
            rate = excess / den
        else:
            rate = np.zeros(len(cu))
        vc = vol[cu]
        res[self.pos_n] = parts["n"][0][cu] - vc * rate
        res[self.pos_p] = parts["p"][0][cu] - vc * rate
        if not jacobian:
            return res, None

        dq = np.zeros(nn)
        dq[self.si] = -vol[self.si] * q * (n[self.si] + p[self.si]) / ut
        dq[self.liq] += self.vol_liq * drho_l
        data = [pop.jacobian_data(dq), -vc * q * n[cu] / ut, -vc * q * p[cu] / ut]
        if srh is not None:
            dr_dn = (pc * den - excess * srh.tau_p) / den ** 2
            dr_dp = (nc * den - excess * srh.tau_n) / den ** 2
            r_v = dr_dn * nc / ut - dr_dp * pc / ut
            r_n = -dr_dn * nc / ut
            r_p = dr_dp * pc / ut
        else:
            r_v = r_n = r_p = np.zeros(len(cu))
        for carrier in ("n", "p"):
            _, g, d, (bs, bms), big_e, s, u = parts[carrier]
            ub = g * u[sop.b] / sop.h / ut
            dbs = bernoulli_derivative(s * d, (bs, bms))
            d_vb = big_e * s * ub * (dbs + bs)
            d_va = -big_e * s * ub * dbs
            d_pb = -bs * ub * s
            d_pa = bs * ub * s * (1.0 - big_e)
            edge = [d_va, d_vb, d_pa, d_pb]
            data += edge + [-x for x in edge]
            data += [-vc * r_v, -vc * r_n, -vc * r_p]
        data = np.concatenate(data)[self.mask]
        return res, data

    def factor(self, data) -> Linearization:
        weight = np.bincount(self.rows, np.abs(data), self.size)
        if np.any(weight == 0) or not np.all(np.isfinite(weight)):
            raise SolverError("coupled Jacobian has an empty or non-finite row", float("inf"))
        scale = 1.0 / weight
        mat = self.pattern.matrix(data * scale[self.rows])
        try:
            lu = spla.splu(mat, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1)
        except RuntimeError as exc:
            raise SolverError(f"coupled Jacobian is singular: {exc}", float("inf")) from exc
        return Linearization(lu, scale)

    def gather(self, state: CoupledState) -> np.ndarray:
        x = np.empty(self.size)
        x[self.pos_v] = state.v[self.pop.unknown]
        cu = self.sop.unknown
        x[self.pos_n] = state.phi_n[cu]
        x[self.pos_p] = state.phi_p[cu]
        return x

    def apply(self, state: CoupledState, step, lam):
        new = state.copy()
        new.v[self.pop.unknown] += lam * step[self.pos_v]
        cu = self.sop.unknown
        new.phi_n[cu] += lam * step[self.pos_n]
        new.phi_p[cu] += lam * step[self.pos_p]
        return new


def coupled_operator(mesh: Mesh, constants: PhysicalConstants) -> _CoupledOperator:
    cache = mesh.__dict__.setdefault("_coupled_ops", {})
    op = cache.get(constants)
    if op is None:
        op = cache[constants] = _CoupledOperator(mesh, constants)
    return op


@dataclass
class CoupledReport:
    iterations: int = 0
    factorizations: int = 0
    converged: bool = False
    updates: list | None = None


def _converged(norm, prev, tolerance) -> bool:
    """Update below tolerance, or the error left after it estimated to be.

    With contraction ``theta = norm / prev`` the distance from the updated
    state to the solution is about ``theta / (1 - theta) * norm``.
    """
    if norm <= tolerance:
        return True
    if prev is None or prev <= 0.0:
        return False
    theta = norm / prev
    return theta < 0.5 and theta / (1.0 - theta) * norm <= tolerance


def _newton(op, state, problem, srh, lin, tolerance, max_iter, report):
    prev = None
    fresh = False
    hist_x, hist_f = [], []
    for _ in range(max_iter):
        need = lin is None
        res, data = op.evaluate(state, problem, srh, jacobian=need)
        if need:
            lin = op.factor(data)
            report.factorizations += 1
            fresh = True
        step = -lin.lu.solve(res * lin.row_scale)
        norm = float(np.max(np.abs(step))) if len(step) else 0.0
        stalled = not np.isfinite(norm) or (prev is not None and norm > CHORD_RATE * prev)
        if stalled and not fresh:
            # the reused factorization is too far off: refresh it here
            res, data = op.evaluate(state, problem, srh, jacobian=True)
            lin = op.factor(data)
            report.factorizations += 1
            fresh = True
            step = -lin.lu.solve(res * lin.row_scale)
            norm = float(np.max(np.abs(step))) if len(step) else 0.0
            hist_x, hist_f = [], []
        if not np.isfinite(norm):
            return state, lin, False
        report.iterations += 1
        report.updates.append(norm)
        # limit each component separately: a few minority-carrier levels can
        # swing wildly far from the solution without that stalling the rest
        limited = norm > STEP_CAP
        if limited:
            hist_x, hist_f = [], []
            update = np.clip(step, -STEP_CAP, STEP_CAP)
        else:
            update = _anderson(hist_x, hist_f, op.gather(state), step)
        state = op.apply(state, update, 1.0)
        if not limited and _converged(norm, prev, tolerance):
            return state, lin, True
        prev = None if limited else norm
        fresh = False
        if limited:
            # far from the solution a stale Jacobian diverges: full Newton until the cap releases
            lin = None
    return state, lin, False


def _anderson(hist_x, hist_f, x, f):
    """Anderson-mixed update for the chord fixed-point map x -> x + f.

    A stale factorization leaves a linear iteration whose slow modes are
    few; mixing the last ``ANDERSON_DEPTH`` steps removes them.
    """
    hist_x.append(x)
    hist_f.append(f)
    if len(hist_x) > ANDERSON_DEPTH + 1:
        del hist_x[0], hist_f[0]
    if len(hist_x) < 2:
        return f
    d_f = np.diff(np.array(hist_f), axis=0)
    d_x = np.diff(np.array(hist_x), axis=0)
    # least squares through the small Gram system; the depth is a handful
    gram = d_f @ d_f.T
    gamma = np.linalg.lstsq(gram, d_f @ f, rcond=1.0e-12)[0]
    if not np.all(np.isfinite(gamma)):
        return f
    return f - gamma @ (d_x + d_f)


def state_from_solution(solution: TransportSolution, constants: PhysicalConstants) -> CoupledState:
    """Quasi-Fermi form of a (Gummel) transport solution."""
    ut, ni = constants.thermal_voltage, constants.n_i
    v = solution.v.copy()
    return CoupledState(v, v - ut * np.log(solution.n / ni), v + ut * np.log(solution.p / ni))


def coupled_solve(mesh: Mesh, contacts: Contacts, params: ParameterVector,
                  constants: PhysicalConstants, srh: SRHParams | None = SRHParams(),
                  interface: InterfaceParams | None = None, start: CoupledState | None = None,
                  linearization: Linearization | None = None,
                  tolerance: float = UPDATE_TOLERANCE, max_iter: int = MAX_ITER):
    """Newton solve of the coupled system.

    Returns ``(solution, state, linearization)``; pass the last two back in
    to warm-start a nearby solve.  Without ``start`` a loosely converged
    Gummel iteration provides the initial state.
    """
    if interface is None:
        interface = interface_from_params(params, constants)
    op = coupled_operator(mesh, constants)
    report = CoupledReport(updates=[])
    lin = linearization
    if start is None:
        # decoupled iterations bring the state into Newton's basin
        rough = gummel_solve(mesh, contacts, params, constants, srh, interface,
                             tolerance=COLD_START_TOLERANCE)
        if not rough.converged:
            return _failed(mesh, report), None, None
        state = state_from_solution(rough, constants)
        lin = None
    else:
        state = start.copy()
    prob = PoissonProblem(mesh, contacts, constants, interface, params)
    state = op.dirichlet(state, contacts, params, constants)
    try:
        state, lin, ok = _newton(op, state, prob, srh, lin, tolerance, max_iter, report)
    except SolverError:
        ok = False
    if not ok:
        return _failed(mesh, report), None, None
    report.converged = True
    return _solution(op, state, params, constants, report), state, lin


def _solution(op, state, params, constants, report) -> TransportSolution:
    ut, q = constants.thermal_voltage, constants.q
    n, p = op.densities(state, constants)
    sop = op.sop
    pair = bernoulli_pair((state.v[sop.b] - state.v[sop.a]) / ut)
    fn = op.edge_terms(state, n, state.phi_n, 1.0, ut, pair)[0]
    fp = op.edge_terms(state, p, state.phi_p, -1.0, ut, pair)[0]
    j_n = q * params.d_n * fn
    j_p = -q * params.d_p * fp
    off = op.vol_si == 0
    n[off] = constants.n_i
    p[off] = constants.n_i
    sol = TransportSolution(op.mesh, state.v, n, p, j_n, j_p, float("nan"),
                            report.iterations, True, list(report.updates))
    values = [terminal_current(sol, x) for x in _quarter_sections(op.mesh)]
    sol.current = values[0]
    sol.cross_check = tuple(values)
    return sol


def _failed(mesh, report) -> TransportSolution:
    nan = np.full(mesh.n_nodes, np.nan)
    return TransportSolution(mesh, nan, nan, nan, np.zeros(0), np.zeros(0), float("nan"),
                             report.iterations, False, list(report.updates or []))
