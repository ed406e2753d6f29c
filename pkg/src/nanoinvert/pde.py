"""Structured box-method mesh, Scharfetter-Gummel fluxes and sparse solves.

The mesh is a tensor grid over the cross-section: ``y`` runs up through the
layer stack, ``x`` along the wire.  Unknowns live on grid vertices; each
vertex owns the dual box made of quarter cells around it.  Nodes on the
oxide/liquid interface are doubled, one copy per side, so the potential may
jump across it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .device import MIN_CELLS_PER_REGION, DeviceSpec, nm_to_cm

REGIONS = ("Si", "Ox", "Liq")


class ConfigurationError(ValueError):
    pass


class SolverError(RuntimeError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


def allocate_cells(thicknesses, total, minimum=MIN_CELLS_PER_REGION):
    """Split ``total`` cells over layers roughly in proportion to thickness.

    Thin layers are clamped to ``minimum`` cells; the remainder is shared by
    the other layers with largest-remainder rounding.
    """
    t = np.asarray(thicknesses, dtype=float)
    if total < minimum * len(t):
        raise ConfigurationError(
            f"insufficient resolution: {total} cells for {len(t)} regions"
        )
    fixed = np.zeros(len(t), dtype=bool)
    while True:
        free = ~fixed
        budget = total - minimum * fixed.sum()
        share = budget * t / t[free].sum()
        newly = free & (share < minimum)
        if not newly.any():
            break
        fixed |= newly
    counts = np.where(fixed, minimum, np.floor(share)).astype(int)
    left = total - counts.sum()
    order = np.argsort(-(np.where(fixed, -1.0, share - np.floor(share))), kind="stable")
    counts[order[:left]] += 1
    return counts


@dataclass
class Mesh:
    """Tensor-product box mesh with region labels and contacts.

    Node ``i * (nx_nodes) + k`` sits at ``(x[k], y[i])``; the liquid-side copies
    of interface nodes are appended after the regular nodes.
    """

    x: np.ndarray
    y: np.ndarray
    row_region: tuple[str, ...]
    contacts: dict[str, np.ndarray]
    depth: float = 1.0
    # derived
    n_nodes: int = 0
    node_x: np.ndarray = field(default=None, repr=False)
    node_y: np.ndarray = field(default=None, repr=False)
    edge_a: np.ndarray = field(default=None, repr=False)
    edge_b: np.ndarray = field(default=None, repr=False)
    edge_h: np.ndarray = field(default=None, repr=False)
    edge_horizontal: np.ndarray = field(default=None, repr=False)
    edge_w: dict = field(default=None, repr=False)
    volume: dict = field(default=None, repr=False)
    gamma_row: int | None = None
    gamma_ox: np.ndarray = field(default=None, repr=False)
    gamma_liq: np.ndarray = field(default=None, repr=False)
    gamma_length: np.ndarray = field(default=None, repr=False)

    @classmethod
    def from_layers(cls, layers, length, n_cols, contacts=("backgate", "solution", "source", "drain"),
                    depth=1.0):
        """Build a mesh from ``layers`` = [(region, thickness_cm, n_cells), ...].

        ``contacts`` selects which Dirichlet boundaries exist: ``backgate``
        (bottom row), ``solution`` (top row), ``source``/``drain`` (left/right
        silicon nodes).
        """
        ys = [0.0]
        row_region = []
        for region, thickness, n in layers:
            if region not in REGIONS:
                raise ConfigurationError(f"unknown region {region!r}")
            if not thickness > 0:
                raise ConfigurationError(f"region {region} has non-positive thickness")
            if n < 1:
                raise ConfigurationError(f"region {region} is thinner than one cell")
            ys.extend(ys[-1] + thickness * np.arange(1, n + 1) / n)
            row_region.extend([region] * n)
        y = np.array(ys)
        x = np.linspace(0.0, length, n_cols + 1)
        mesh = cls(x=x, y=y, row_region=tuple(row_region), contacts={}, depth=depth)
        mesh._build(set(contacts))
        return mesh

    # -- construction -------------------------------------------------
    def _build(self, contact_names):
        ny, nx = len(self.y), len(self.x)
        n_base = ny * nx
        regions = np.array(self.row_region)
        gamma = [i for i in range(1, len(regions))
                 if {regions[i - 1], regions[i]} == {"Ox", "Liq"}]
        if len(gamma) > 1:
            raise ConfigurationError("more than one oxide/liquid interface")
        self.gamma_row = gamma[0] if gamma else None
        liq_below = self.gamma_row is not None and regions[self.gamma_row - 1] == "Liq"
        self.n_nodes = n_base + (nx if self.gamma_row is not None else 0)

        ii, kk = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
        self.node_y = np.concatenate([self.y[ii.ravel()],
                                      np.full(self.n_nodes - n_base, self.y[self.gamma_row or 0])])
        self.node_x = np.concatenate([self.x[kk.ravel()], self.x[:self.n_nodes - n_base]])

        self.volume = {r: np.zeros(self.n_nodes) for r in REGIONS}
        halves = {}  # (a, b, horizontal) -> [h, {region: w}]
        dx = np.diff(self.x)
        dy = np.diff(self.y)
        for i in range(len(dy)):
            region = regions[i]
            for k in range(len(dx)):
                corners = [(i, k), (i, k + 1), (i + 1, k), (i + 1, k + 1)]
                ids = []
                for (ci, ck) in corners:
                    if self.gamma_row is not None and ci == self.gamma_row and region == "Liq":
                        ids.append(n_base + ck)
                    else:
                        ids.append(ci * nx + ck)
                quarter = dx[k] * dy[i] / 4.0
                for idx in ids:
                    self.volume[region][idx] += quarter
                n00, n01, n10, n11 = ids
                for a, b, h, w, horiz in (
                    (n00, n01, dx[k], dy[i] / 2, True),
                    (n10, n11, dx[k], dy[i] / 2, True),
                    (n00, n10, dy[i], dx[k] / 2, False),
                    (n01, n11, dy[i], dx[k] / 2, False),
                ):
                    entry = halves.setdefault((a, b, horiz), [h, {r: 0.0 for r in REGIONS}])
                    entry[1][region] += w
        keys = sorted(halves)
        self.edge_a = np.array([k[0] for k in keys])
        self.edge_b = np.array([k[1] for k in keys])
        self.edge_horizontal = np.array([k[2] for k in keys])
        self.edge_h = np.array([halves[k][0] for k in keys])
        self.edge_w = {r: np.array([halves[k][1][r] for k in keys]) for r in REGIONS}

        if self.gamma_row is not None:
            ox_copy = self.gamma_row * nx + np.arange(nx)
            liq_copy = n_base + np.arange(nx)
            self.gamma_ox, self.gamma_liq = ox_copy, liq_copy
            if liq_below:
                raise ConfigurationError("liquid must lie above the oxide")
            self.gamma_length = np.zeros(nx)
            self.gamma_length[:-1] += dx / 2
            self.gamma_length[1:] += dx / 2
        else:
            self.gamma_ox = self.gamma_liq = np.zeros(0, dtype=int)
            self.gamma_length = np.zeros(0)

        si_nodes = self.volume["Si"] > 0
        contacts = {}
        bottom = np.arange(nx)
        top = (ny - 1) * nx + np.arange(nx)
        if self.gamma_row == ny - 1:
            top = n_base + np.arange(nx)
        if "backgate" in contact_names:
            contacts["backgate"] = bottom
        if "solution" in contact_names:
            contacts["solution"] = top
        left = np.arange(ny) * nx
        right = np.arange(ny) * nx + nx - 1
        if "source" in contact_names:
            contacts["source"] = left[si_nodes[left]]
        if "drain" in contact_names:
            contacts["drain"] = right[si_nodes[right]]
        taken = np.zeros(self.n_nodes, dtype=int)
        for nodes in contacts.values():
            taken[nodes] += 1
        if np.any(taken > 1):
            raise ConfigurationError("a Dirichlet node belongs to more than one contact")
        self.contacts = {name: np.asarray(v, dtype=int) for name, v in contacts.items() if len(v)}

    # -- queries ------------------------------------------------------
    @property
    def shape(self):
        return len(self.y), len(self.x)

    def region_thickness(self, region):
        dy = np.diff(self.y)
        return float(dy[np.array(self.row_region) == region].sum())

    @property
    def n_gamma_faces(self):
        return 0 if self.gamma_row is None else len(self.x) - 1

    def region_nodes(self, region):
        return np.flatnonzero(self.volume[region] > 0)

    def dirichlet_mask(self):
        mask = np.zeros(self.n_nodes, dtype=bool)
        for nodes in self.contacts.values():
            mask[nodes] = True
        return mask

    def boundary_tags(self):
        """Per-node tag: contact name, ``"neumann"`` or ``"interior"``."""
        ny, nx = self.shape
        tags = np.array(["interior"] * self.n_nodes, dtype=object)
        on_edge = (np.isclose(self.node_x, self.x[0]) | np.isclose(self.node_x, self.x[-1])
                   | np.isclose(self.node_y, self.y[0]) | np.isclose(self.node_y, self.y[-1]))
        tags[on_edge] = "neumann"
        for name, nodes in self.contacts.items():
            tags[nodes] = name
        return tags

    def node_regions(self, idx):
        return [r for r in REGIONS if self.volume[r][idx] > 0]

    def dump(self) -> str:
        """Plain-text node table: index, x_cm, y_cm, tag, regions."""
        tags = self.boundary_tags()
        lines = ["# index x_cm y_cm tag regions"]
        for i in range(self.n_nodes):
            lines.append(f"{i} {self.node_x[i]:.9e} {self.node_y[i]:.9e} {tags[i]} "
                         f"{','.join(self.node_regions(i))}")
        return "\n".join(lines) + "\n"


def build_mesh(spec: DeviceSpec) -> Mesh:
    layers = spec.layers
    for region, thickness in layers:
        if not thickness > 0:
            raise ConfigurationError(f"region {region} has non-positive thickness {thickness}")
    if spec.grid_ny < MIN_CELLS_PER_REGION:
        raise ConfigurationError(f"insufficient resolution: grid_ny={spec.grid_ny}")
    counts = allocate_cells([t for _, t in layers], spec.grid_nx)
    return Mesh.from_layers(
        [(r, nm_to_cm(t), int(n)) for (r, t), n in zip(layers, counts)],
        length=nm_to_cm(spec.wire_length),
        n_cols=spec.grid_ny,
        depth=nm_to_cm(spec.wire_width),
    )


_SERIES_SWITCH = 1.0e-4


def bernoulli_pair(x):
    """Return (B(x), B(-x)) with B(x) = x / (exp(x) - 1), safe for all finite x.

    Both values come from q = B(-|x|) = |x| / (1 - exp(-|x|)), which never
    overflows; the smaller one is q exp(-|x|).
    """
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    small = ax < _SERIES_SWITCH
    t = np.where(small, -1.0, -ax)
    q = t / np.expm1(t)
    low = q * np.exp(t)
    x2 = x * x
    even = 1.0 + x2 / 12.0 - x2 * x2 / 720.0
    pos = x > 0
    b_plus = np.where(small, even - x / 2.0, np.where(pos, low, q))
    b_minus = np.where(small, even + x / 2.0, np.where(pos, q, low))
    return b_plus, b_minus


def bernoulli(x):
    """B(x) = x / (exp(x) - 1), safe for all finite x."""
    out = bernoulli_pair(x)[0]
    return out if out.ndim else float(out)


def bernoulli_derivative(x, pair=None):
    """dB/dx = B(x) (1 - B(-x)) / x, with its Taylor series near zero."""
    x = np.asarray(x, dtype=float)
    b_plus, b_minus = bernoulli_pair(x) if pair is None else pair
    small = np.abs(x) < 1.0e-3
    safe = np.where(small, 1.0, x)
    out = np.where(small, -0.5 + x / 6.0 - x ** 3 / 180.0, b_plus * (1.0 - b_minus) / safe)
    return out if out.ndim else float(out)


def sg_edge_flux(v_i, v_j, u_i, u_j, mobility, edge_length, carrier_sign, thermal_voltage):
    """Scharfetter-Gummel flux along edge i->j, in the diffusive sign convention.

    Returns (D/h) [B(s d) u_j - B(-s d) u_i] with d = (V_j - V_i)/U_T, which
    is J_n/q for electrons (s=+1) and -J_p/q for holes (s=-1).
    """
    d = (np.asarray(v_j) - np.asarray(v_i)) / thermal_voltage
    diff = thermal_voltage * mobility
    s = carrier_sign
    return diff / edge_length * (bernoulli(s * d) * u_j - bernoulli(-s * d) * u_i)


class SparsePattern:
    """Fixed COO sparsity pattern that is turned into CSC matrices quickly."""

    def __init__(self, rows, cols, n):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        key = cols * n + rows
        uniq, self.slot = np.unique(key, return_inverse=True)
        self.n = n
        self.nnz = len(uniq)
        self.indices = (uniq % n).astype(np.int32)
        ucols = uniq // n
        self.indptr = np.searchsorted(ucols, np.arange(n + 1)).astype(np.int32)

    def matrix(self, data):
        vals = np.bincount(self.slot, weights=data, minlength=self.nnz)
        return sp.csc_matrix((vals, self.indices, self.indptr), shape=(self.n, self.n))


@dataclass
class SparseSystem:
    matrix: sp.spmatrix
    rhs: np.ndarray

    def __post_init__(self):
        n, m = self.matrix.shape
        if n != m or len(self.rhs) != n:
            raise ValueError("system must be square and match the right-hand side")


RESIDUAL_TOLERANCE = 1.0e-10


def solve_sparse(system: SparseSystem, tolerance=RESIDUAL_TOLERANCE) -> np.ndarray:
    """Direct sparse LU solve with a relative-residual guarantee."""
    a = sp.csc_matrix(system.matrix)
    b = np.asarray(system.rhs, dtype=float)
    try:
        x = spla.splu(a).solve(b)
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed: {exc}", float("inf")) from exc
    bnorm = np.linalg.norm(b)
    res = np.linalg.norm(a @ x - b) / (bnorm if bnorm > 0 else 1.0)
    if not np.isfinite(res) or res > tolerance:
        raise SolverError("linear solve did not reach the residual tolerance", res)
    return x


def laplacian(mesh: Mesh, permittivity: dict[str, float]) -> sp.csr_matrix:
    """Box-method stiffness matrix sum_e c_e (V_i - V_j) over all nodes."""
    c = sum(permittivity[r] * mesh.edge_w[r] for r in REGIONS) / mesh.edge_h
    a, b = mesh.edge_a, mesh.edge_b
    rows = np.concatenate([a, b, a, b])
    cols = np.concatenate([a, b, b, a])
    data = np.concatenate([c, c, -c, -c])
    n = mesh.n_nodes
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))
