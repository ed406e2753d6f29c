import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nanoinvert.device import Contacts, ParameterVector, PhysicalConstants
from nanoinvert.pde import Mesh
from nanoinvert.poisson import PoissonProblem, interface_from_params, solve_poisson
from nanoinvert.transport import (IterationError, SRHParams, edge_currents, gummel_solve,
                                  section_current, solve_continuity, srh_rate, terminal_current)

C = PhysicalConstants()
NI = C.n_i
P = ParameterVector()


# -- SRH -----------------------------------------------------------------------------

def test_srh_examples():
    srh = SRHParams(1e-6, 1e-6)
    assert srh_rate(NI, NI, srh, NI) == 0.0
    assert srh_rate(2 * NI, NI / 2, srh, NI) == 0.0
    assert srh_rate(2 * NI, 2 * NI, srh, NI) == pytest.approx(NI / 2e-6, rel=1e-12)


@given(st.floats(0, 1e20), st.floats(0, 1e20), st.floats(1e-9, 1e-3), st.floats(1e-9, 1e-3))
def test_srh_sign_follows_mass_action(n, p, tau_n, tau_p):
    r = float(srh_rate(n, p, SRHParams(tau_n, tau_p), NI))
    excess = n * p - NI * NI
    assert math.isfinite(r)
    assert np.sign(r) == np.sign(excess) or abs(excess) <= 1e-12 * NI * NI


@pytest.mark.parametrize("taus", [(0.0, 1e-6), (1e-6, -1.0)])
def test_srh_lifetimes_must_be_positive(taus):
    with pytest.raises(ValueError):
        SRHParams(*taus)


# -- continuity ---------------------------------------------------------------------

def _equilibrium(mesh, vg):
    prob = PoissonProblem(mesh, Contacts(v_backgate=vg, v_drain=0.0), C,
                          interface_from_params(P, C), P)
    v, rep = solve_poisson(prob)
    assert rep.converged
    return v, NI * np.exp(v / C.thermal_voltage), NI * np.exp(-v / C.thermal_voltage)


@pytest.mark.parametrize("vg", [-1.0, 0.0, 1.0])
@pytest.mark.parametrize("srh", [None, SRHParams()])
def test_continuity_equilibrium_fixed_point(default_mesh, vg, srh):
    si = default_mesh.volume["Si"] > 0
    v, n_eq, p_eq = _equilibrium(default_mesh, vg)
    n = solve_continuity(default_mesh, "n", v, p_eq, P, C, srh, previous=n_eq)
    p = solve_continuity(default_mesh, "p", v, n_eq, P, C, srh, previous=p_eq)
    assert np.max(np.abs(n[si] / n_eq[si] - 1)) <= 1e-6
    assert np.max(np.abs(p[si] / p_eq[si] - 1)) <= 1e-6


def _wire(n_cols=40, length=1e-4):
    return Mesh.from_layers([("Si", 1e-5, 4)], length=length, n_cols=n_cols,
                            contacts=("source", "drain"))


@pytest.mark.parametrize("carrier", ["n", "p"])
def test_pure_diffusion_gives_linear_profile(carrier):
    mesh = _wire()
    v = np.zeros(mesh.n_nodes)
    u = solve_continuity(mesh, carrier, v, np.full(mesh.n_nodes, NI), P, C, None,
                         {"source": 1e16, "drain": 3e16})
    exact = 1e16 + 2e16 * mesh.node_x / mesh.x[-1]
    assert np.max(np.abs(u / exact - 1)) <= 1e-12


def test_bad_potential_is_iteration_error():
    mesh = _wire()
    v = np.zeros(mesh.n_nodes)
    v[7] = np.nan
    with pytest.raises(IterationError):
        solve_continuity(mesh, "n", v, np.full(mesh.n_nodes, NI), P, C, None,
                         {"source": 1e16, "drain": 3e16})


def test_negative_contact_density_is_iteration_error():
    mesh = _wire()
    with pytest.raises(IterationError):
        solve_continuity(mesh, "n", np.zeros(mesh.n_nodes), np.full(mesh.n_nodes, NI), P, C,
                         None, {"source": -1e16, "drain": 3e16})


def test_unknown_carrier_rejected():
    mesh = _wire()
    with pytest.raises(ValueError):
        solve_continuity(mesh, "x", np.zeros(mesh.n_nodes), np.ones(mesh.n_nodes), P, C, None)


# -- Gummel ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def biased(default_mesh):
    sol = gummel_solve(default_mesh, Contacts(), P, C)
    assert sol.converged
    return sol


def test_gummel_converges_with_monotone_tail(biased):
    assert biased.gummel_iterations <= 200
    assert biased.updates[-1] <= 1e-6
    tail = biased.updates[-4:]
    assert all(b < a for a, b in zip(tail, tail[1:]))


def test_positive_carriers_on_silicon(biased, default_mesh):
    si = default_mesh.volume["Si"] > 0
    assert np.all(biased.n[si] > 0) and np.all(biased.p[si] > 0)


def test_p_type_device_conducts_from_drain_to_source(biased):
    assert biased.current > 0
    spread = np.ptp(biased.cross_check) / abs(biased.current)
    assert spread <= 1e-6


@pytest.mark.parametrize("vg", [-1.0, 0.0])
def test_zero_bias_current(default_mesh, vg):
    sol = gummel_solve(default_mesh, Contacts(v_backgate=vg, v_drain=0.0), P, C)
    si = default_mesh.volume["Si"] > 0
    assert sol.converged and abs(sol.current) <= 1e-14
    assert np.max(np.abs(sol.n[si] * sol.p[si] / NI ** 2 - 1)) <= 1e-6


def test_conservation_without_recombination(default_mesh):
    sol = gummel_solve(default_mesh, Contacts(v_backgate=-0.5), P, C, srh=None)
    span = default_mesh.x[-1]
    currents = [terminal_current(sol, f * span + 1e-9 * span) for f in np.linspace(0.1, 0.9, 9)]
    assert np.ptp(currents) / abs(np.mean(currents)) <= 1e-8


def test_section_outside_the_wire(biased, default_mesh):
    with pytest.raises(ValueError):
        terminal_current(biased, default_mesh.x[-1] * 1.5)
    with pytest.raises(ValueError):
        section_current(default_mesh, biased.j_n, biased.j_p, default_mesh.x[0])


def test_halved_bias_needs_no_more_iterations(default_mesh, biased):
    half = gummel_solve(default_mesh, replace(Contacts(), v_drain=0.1), P, C)
    quarter = gummel_solve(default_mesh, replace(Contacts(), v_drain=0.05), P, C)
    assert half.converged and quarter.converged
    assert quarter.gummel_iterations <= half.gummel_iterations <= biased.gummel_iterations


def test_current_grows_with_negative_surface_charge(default_mesh):
    currents = []
    for rho in (0.0, -0.5, -1.5, -3.0):
        sol = gummel_solve(default_mesh, Contacts(), replace(P, rho_s=rho), C)
        assert sol.converged
        currents.append(abs(sol.current))
    assert all(b > a for a, b in zip(currents, currents[1:]))


def test_hole_mobility_doubling_at_frozen_field(biased, default_mesh):
    sol = biased
    sections = [default_mesh.x[-1] * 0.5 + 1e-9]
    j_n, j_p = edge_currents(default_mesh, sol.v, sol.n, sol.p, P, C)
    j_n2, j_p2 = edge_currents(default_mesh, sol.v, sol.n, sol.p, replace(P, mu_p=2 * P.mu_p), C)
    assert np.allclose(j_p2, 2 * j_p, rtol=1e-14, atol=0)
    i1 = section_current(default_mesh, j_n, j_p, sections[0])
    i2 = section_current(default_mesh, j_n2, j_p2, sections[0])
    assert i2 / i1 == pytest.approx(2.0, rel=1e-3)


def test_einstein_relation_enters_currents(biased, default_mesh):
    j_n, j_p = edge_currents(default_mesh, biased.v, biased.n, biased.p, P, C)
    assert np.allclose(j_n, biased.j_n) and np.allclose(j_p, biased.j_p)
