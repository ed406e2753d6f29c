import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nanoinvert.device import Contacts, InterfaceParams, ParameterVector, PhysicalConstants
from nanoinvert.pde import Mesh
from nanoinvert.poisson import (AssemblyError, PoissonProblem, assemble_poisson,
                                builtin_potential, interface_fluxes, interface_from_params,
                                neutral_densities, solve_poisson, space_charge)

from oracles import gouy_chapman, solve_electrolyte

C = PhysicalConstants()
UT = C.thermal_voltage


# -- space charge ---------------------------------------------------------------------

def test_liquid_charge_vanishes_at_fermi_level():
    rho, _ = space_charge(np.array([C.phi_f]), "Liq", ParameterVector(), C)
    assert rho[0] == 0.0


@given(st.floats(-5, 5))
def test_oxide_is_charge_free(v):
    rho, drho = space_charge(np.array([v]), "Ox", ParameterVector(), C)
    assert rho[0] == 0.0 and drho[0] == 0.0


def test_intrinsic_silicon_is_neutral():
    rho, _ = space_charge(np.array([C.phi_f]), "Si", ParameterVector(c_dop=0.0), C)
    assert rho[0] == 0.0


@given(st.floats(-1, 1))
def test_liquid_charge_formula(v):
    rho, drho = space_charge(np.array([v]), "Liq", ParameterVector(), C)
    a = 2 * C.q * C.ion_concentration
    assert rho[0] == pytest.approx(-a * math.sinh(v / UT), rel=1e-12)
    assert drho[0] == pytest.approx(-a * math.cosh(v / UT) / UT, rel=1e-12)


def test_silicon_charge_formula():
    p = ParameterVector(c_dop=1e16)
    v = 0.1
    rho, _ = space_charge(np.array([v]), "Si", p, C)
    n, h = C.n_i * math.exp(v / UT), C.n_i * math.exp(-v / UT)
    assert rho[0] == pytest.approx(C.q * (-1e16 + h - n), rel=1e-12)


def test_exponent_clamp_is_counted():
    counter = [0]
    rho, _ = space_charge(np.array([0.0, 2.0, -2.0]), "Liq", ParameterVector(), C,
                          counter=counter)
    assert counter[0] == 2
    assert np.all(np.isfinite(rho))


def test_neutral_silicon():
    p = ParameterVector(c_dop=1e16)
    n, h = neutral_densities(p, C)
    assert n * h == pytest.approx(C.n_i ** 2, rel=1e-12)
    assert h - n == pytest.approx(1e16, rel=1e-12)
    rho, _ = space_charge(np.array([builtin_potential(p, C)]), "Si", p, C)
    assert abs(rho[0]) <= 1e-12 * C.q * 1e16


# -- assembly and Newton ------------------------------------------------------------

def _column(layers, contacts=("backgate", "solution")):
    return Mesh.from_layers(layers, length=1e-7, n_cols=1, contacts=contacts)


def test_uncharged_oxide_converges_in_one_step():
    mesh = _column([("Ox", 1e-6, 20)])
    prob = PoissonProblem(mesh, Contacts(v_backgate=0.3, v_solution=0.3), C, InterfaceParams(),
                          ParameterVector())
    v, rep = solve_poisson(prob, np.zeros(mesh.n_nodes))
    assert rep.converged and rep.iterations == 1
    assert np.max(np.abs(v - 0.3)) <= 1e-12


def _stack(n_liq=400):
    return _column([("Ox", 8e-7, 32), ("Liq", 4e-6, n_liq)])


def test_discrete_gauss_law_at_interface():
    mesh = _stack()
    itf = InterfaceParams(surface_charge=-2e-7, a_plus=C.eps_liq)
    prob = PoissonProblem(mesh, Contacts(v_drain=0.0), C, itf, ParameterVector())
    v, rep = solve_poisson(prob)
    assert rep.converged
    ox, liq, enclosed = interface_fluxes(prob, v)
    expected = itf.surface_charge * mesh.gamma_length.sum()
    assert ox + liq - enclosed == pytest.approx(expected, rel=1e-8)


def test_displacement_jump_equals_minus_surface_charge():
    mesh = _stack(n_liq=2000)
    charge = -2e-7
    itf = InterfaceParams(surface_charge=charge, a_plus=C.eps_liq)
    prob = PoissonProblem(mesh, Contacts(v_drain=0.0), C, itf, ParameterVector())
    v, _ = solve_poisson(prob)
    g = mesh.gamma_row
    y = mesh.y
    v_ox = v[mesh.gamma_ox[0]]
    below = v[(g - 1) * 2]  # one cell wide mesh: two nodes per row
    above = v[(g + 1) * 2]
    d_plus = C.permittivity("Liq") * (above - v[mesh.gamma_liq[0]]) / (y[g + 1] - y[g])
    d_minus = C.permittivity("Ox") * (v_ox - below) / (y[g] - y[g - 1])
    assert d_plus - d_minus == pytest.approx(-charge, rel=1e-3)


def test_dipole_potential_jump():
    mesh = _stack()
    dipole = 1e-14
    itf = InterfaceParams(surface_charge=0.0, dipole=dipole, a_plus=C.eps_liq)
    prob = PoissonProblem(mesh, Contacts(v_drain=0.0), C, itf, ParameterVector())
    v, rep = solve_poisson(prob)
    assert rep.converged
    jump = v[mesh.gamma_liq] - v[mesh.gamma_ox]
    assert np.allclose(jump, dipole / (C.eps0 * C.eps_liq), rtol=1e-12)


def test_neutral_device_has_zero_potential(default_mesh):
    params = ParameterVector(rho_s=0.0, c_dop=0.0)
    prob = PoissonProblem(default_mesh, Contacts(v_drain=0.0), C,
                          interface_from_params(params, C), params)
    v, rep = solve_poisson(prob)
    assert rep.converged
    assert np.max(np.abs(v)) <= 1e-8 * UT


def test_debye_huckel_decay():
    psi0 = 0.05 * UT
    x, v, rep = solve_electrolyte(400, psi0)
    lam = C.debye_length
    k = int(np.argmin(np.abs(x - 4 * lam)))
    assert v[k] == pytest.approx(psi0 * math.exp(-x[k] / lam), rel=0.01)


def test_gouy_chapman_profile():
    psi0 = 4 * UT
    x, v, rep = solve_electrolyte(512, psi0)
    exact = gouy_chapman(x, psi0, UT, C.debye_length)
    assert rep.converged
    assert np.max(np.abs(v - exact) / exact) <= 1e-3


def test_gouy_chapman_second_order_convergence():
    psi0 = 4 * UT
    errors = []
    for n in (256, 512, 1024):
        x, v, _ = solve_electrolyte(n, psi0)
        errors.append(np.max(np.abs(v - gouy_chapman(x, psi0, UT, C.debye_length))))
    for a, b in zip(errors, errors[1:]):
        assert 3.6 <= a / b <= 4.4


def test_report_invariant(default_mesh):
    params = ParameterVector()
    prob = PoissonProblem(default_mesh, Contacts(), C, interface_from_params(params, C), params)
    v, rep = solve_poisson(prob)
    assert rep.converged and rep.residual <= 1e-8 * UT
    _, short = solve_poisson(prob, max_iter=1)
    assert not short.converged


def test_holes_accumulate_with_negative_surface_charge(default_mesh):
    mesh = default_mesh
    si = np.flatnonzero(mesh.volume["Si"] > 0)
    top = si[np.isclose(mesh.node_y[si], mesh.node_y[si].max())]
    density = []
    for rho in (0.5, 0.0, -0.5, -1.5, -3.0):
        params = ParameterVector(rho_s=rho)
        prob = PoissonProblem(mesh, Contacts(v_drain=0.0), C, interface_from_params(params, C),
                              params)
        v, rep = solve_poisson(prob)
        assert rep.converged
        density.append(np.mean(C.n_i * np.exp(-(v[top] - C.phi_f) / UT)))
    assert all(b >= a for a, b in zip(density, density[1:]))


def test_frozen_mode_reproduces_reference_carriers():
    mesh = _column([("Si", 1e-5, 10)], contacts=("backgate",))
    n = np.full(mesh.n_nodes, 1e5)
    p = np.full(mesh.n_nodes, 1e16)
    v_ref = np.full(mesh.n_nodes, 0.1)
    rho, _ = space_charge(v_ref, "Si", ParameterVector(c_dop=1e16), C, n, p, v_ref)
    assert np.allclose(rho, C.q * (-1e16 + 1e16 - 1e5), rtol=1e-12)


def test_frozen_mode_requires_fields(default_mesh):
    with pytest.raises(ValueError, match="frozen"):
        PoissonProblem(default_mesh, Contacts(), C, InterfaceParams(), ParameterVector(),
                       mode="frozen")


def test_unmapped_dirichlet_contact_is_assembly_error():
    mesh = _column([("Ox", 1e-6, 8)])
    mesh.contacts = dict(mesh.contacts, gate2=np.array([2]))
    prob = PoissonProblem(mesh, Contacts(), C, InterfaceParams(), ParameterVector())
    with pytest.raises(AssemblyError, match="gate2"):
        assemble_poisson(prob, np.zeros(mesh.n_nodes))


def test_potential_on_every_node_required():
    mesh = _column([("Ox", 1e-6, 8)])
    prob = PoissonProblem(mesh, Contacts(), C, InterfaceParams(), ParameterVector())
    with pytest.raises(AssemblyError):
        assemble_poisson(prob, np.zeros(3))


def test_nonfinite_initial_guess_rejected():
    mesh = _column([("Ox", 1e-6, 8)])
    prob = PoissonProblem(mesh, Contacts(), C, InterfaceParams(), ParameterVector())
    v0 = np.zeros(mesh.n_nodes)
    v0[3] = np.nan
    with pytest.raises(ValueError):
        solve_poisson(prob, v0)


def test_surface_charge_conversion():
    itf = interface_from_params(ParameterVector(rho_s=-1.5), C, dipole=2e-14)
    assert itf.surface_charge == pytest.approx(-1.5 * C.q * 1e14, rel=1e-15)
    assert itf.dipole == 2e-14 and itf.a_plus == C.eps_liq
