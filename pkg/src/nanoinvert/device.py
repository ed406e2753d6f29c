"""Device description: geometry, material constants, contacts and parameters.

Lengths are given in nm at this boundary and converted to cm exactly once,
through :func:`nm_to_cm`.  Everything downstream works in cm, cm^-3, V, A.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

ELEMENTARY_CHARGE = 1.602176634e-19  # C
VACUUM_PERMITTIVITY = 8.8541878128e-14  # F/cm
AVOGADRO = 6.02214076e23  # 1/mol

NM_PER_CM = 1.0e7
NM2_PER_CM2 = 1.0e14

PARAMETER_NAMES = ("rho_s", "c_dop", "mu_n", "mu_p", "c_pt")


def nm_to_cm(length_nm: float) -> float:
    return length_nm / NM_PER_CM


def molar_to_per_cm3(concentration_mol_per_l: float) -> float:
    """Convert a salt concentration in mol/L to a number density in cm^-3."""
    return concentration_mol_per_l * AVOGADRO / 1000.0


def surface_charge_to_si(rho_s: float, q: float = ELEMENTARY_CHARGE) -> float:
    """Convert a surface charge from elementary charges per nm^2 to C/cm^2."""
    return rho_s * q * NM2_PER_CM2


@dataclass(frozen=True)
class DeviceSpec:
    """Geometry of the 2D sensor cross-section.

    ``grid_nx`` counts cells along the vertical stack (backgate oxide,
    silicon, top oxide, liquid); ``grid_ny`` counts cells along the wire.
    """

    wire_length: float = 1000.0
    wire_thickness: float = 100.0
    wire_width: float = 50.0
    oxide_thickness: float = 8.0
    liquid_height: float = 50.0
    grid_nx: int = 48
    grid_ny: int = 48

    @property
    def layers(self) -> tuple[tuple[str, float], ...]:
        """Vertical stack from the backgate upwards: (region, thickness in nm)."""
        return (
            ("Ox", self.oxide_thickness),
            ("Si", self.wire_thickness),
            ("Ox", self.oxide_thickness),
            ("Liq", self.liquid_height),
        )


@dataclass(frozen=True)
class PhysicalConstants:
    q: float = ELEMENTARY_CHARGE
    thermal_voltage: float = 0.021
    n_i: float = 1.5e10
    eps_si: float = 11.7
    eps_ox: float = 3.9
    eps_liq: float = 78.4
    ion_concentration: float = molar_to_per_cm3(1.0e-5)
    phi_f: float = 0.0
    eps0: float = VACUUM_PERMITTIVITY

    def permittivity(self, region: str) -> float:
        """Absolute permittivity of a region in F/cm."""
        rel = {"Si": self.eps_si, "Ox": self.eps_ox, "Liq": self.eps_liq}[region]
        return rel * self.eps0

    @property
    def debye_length(self) -> float:
        """Debye length of the electrolyte in cm."""
        return math.sqrt(
            self.eps_liq * self.eps0 * self.thermal_voltage
            / (2.0 * self.q * self.ion_concentration)
        )


@dataclass(frozen=True)
class Contacts:
    v_source: float = 0.0
    v_drain: float = 0.2
    v_backgate: float = 0.0
    v_solution: float = 0.0


@dataclass(frozen=True)
class InterfaceParams:
    """Homogenized boundary layer at the oxide/liquid interface.

    ``surface_charge`` is in C/cm^2, ``dipole`` in C/cm; the potential jump
    across the interface is ``dipole / (eps0 * a_plus)``.
    """

    surface_charge: float = 0.0
    dipole: float = 0.0
    a_plus: float = 78.4


@dataclass(frozen=True)
class ParameterVector:
    """The physical unknowns of the inversion.

    rho_s is in q/nm^2 (negative for the PSA-like targets), c_dop is an
    acceptor concentration in cm^-3, mobilities are in cm^2/(V s) and c_pt is
    the probe-target complex density in cm^-2.
    """

    rho_s: float = -1.5
    c_dop: float = 1.0e16
    mu_n: float = 1170.0
    mu_p: float = 430.0
    c_pt: float = 0.0
    active: tuple[str, ...] = ()
    thermal_voltage: float = 0.021

    def __post_init__(self):
        unknown = set(self.active) - set(PARAMETER_NAMES)
        if unknown:
            raise ValueError(f"unknown parameter names: {sorted(unknown)}")
        object.__setattr__(self, "active", tuple(self.active))

    @property
    def d_n(self) -> float:
        return self.thermal_voltage * self.mu_n

    @property
    def d_p(self) -> float:
        return self.thermal_voltage * self.mu_p

    @property
    def signed_doping(self) -> float:
        """Net donor-minus-acceptor concentration (negative for P-type)."""
        return -self.c_dop

    def values(self, names=None) -> tuple[float, ...]:
        names = self.active if names is None else names
        return tuple(getattr(self, name) for name in names)

    def with_values(self, names, values) -> "ParameterVector":
        return replace(self, **{n: float(v) for n, v in zip(names, values)})


def build_default_device() -> tuple[DeviceSpec, PhysicalConstants, Contacts]:
    return DeviceSpec(), PhysicalConstants(), Contacts()


# Arora, Hauser & Roulston (1982) fit for silicon, T in kelvin.
_ARORA = {
    "n": dict(mu_min=88.0, mu_0=7.4e8, t_mu0=-2.33, n_ref=1.26e17),
    "p": dict(mu_min=54.3, mu_0=1.36e8, t_mu0=-2.23, n_ref=2.35e17),
}


def arora_mobility(c_dop: float, temperature: float = 300.0) -> tuple[float, float]:
    """Doping-dependent electron and hole mobilities in cm^2/(V s)."""
    if not c_dop > 0:
        raise ValueError("doping must be positive")
    tn = temperature / 300.0
    alpha = 0.88 * tn ** -0.146
    out = []
    for carrier in ("n", "p"):
        c = _ARORA[carrier]
        mu_min = c["mu_min"] * tn ** -0.57
        mu_0 = c["mu_0"] * temperature ** c["t_mu0"]
        n_ref = c["n_ref"] * tn ** 2.4
        out.append(mu_min + mu_0 / (1.0 + (c_dop / n_ref) ** alpha))
    return out[0], out[1]


MIN_CELLS_PER_REGION = 4


def validate(spec: DeviceSpec, params: ParameterVector | None = None,
             constants: PhysicalConstants | None = None) -> list[str]:
    """Check every invariant and return all violations (empty list when ok)."""
    problems = []
    for f in fields(spec):
        value = getattr(spec, f.name)
        if f.name.startswith("grid_"):
            continue
        if not value > 0:
            problems.append(f"{f.name} must be strictly positive (got {value})")
    n_layers = len(spec.layers)
    if spec.grid_nx < MIN_CELLS_PER_REGION * n_layers:
        problems.append(
            f"insufficient resolution: grid_nx={spec.grid_nx} < "
            f"{MIN_CELLS_PER_REGION * n_layers} ({MIN_CELLS_PER_REGION} cells per region)"
        )
    if spec.grid_ny < MIN_CELLS_PER_REGION:
        problems.append(
            f"insufficient resolution: grid_ny={spec.grid_ny} < {MIN_CELLS_PER_REGION}"
        )
    if params is not None:
        if not params.c_dop > 0:
            problems.append("doping must be positive")
        if not params.mu_n > 0:
            problems.append("electron mobility must be positive")
        if not params.mu_p > 0:
            problems.append("hole mobility must be positive")
        if params.c_pt < 0:
            problems.append("probe-target density must be non-negative")
        if "c_pt" in params.active and "rho_s" in params.active:
            problems.append("rho_s and c_pt cannot both be active unknowns")
    if constants is not None:
        if not constants.ion_concentration > 0:
            problems.append("ionic concentration must be positive")
        for name in ("eps_si", "eps_ox", "eps_liq"):
            if not getattr(constants, name) > 1:
                problems.append(f"{name} must exceed 1")
        if not constants.thermal_voltage > 0:
            problems.append("thermal voltage must be positive")
        if not constants.n_i > 0:
            problems.append("intrinsic density must be positive")
    return problems
