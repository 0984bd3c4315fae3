"""Lattices, Brillouin-zone geometry, and truncated Fourier index sets.

A lattice is given by d basis vectors (d = 1, 2, 3).  The dual basis is
normalized so that <b_l, a_j> = 2*pi*delta_lj; the Brillouin zone is the
open Voronoi cell of the origin in the dual lattice.  All Galerkin
assemblies in the package run over the truncated index sets built here.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

# Shell of dual multi-indices scanned for the shortest dual vector and for
# zone-membership tests.  The shortest nonzero dual vector of any basis
# accepted by build_lattice lies within |m|_inf <= 3 (asserted against a
# wider scan in the test suite).
SCAN_SHELL = 3

# Boundary clamping tolerance for zone membership: |k| <= |k - b| + ZONE_TOL.
ZONE_TOL = 1e-12


class LatticeError(ValueError):
    """Degenerate or unusable lattice input."""


@dataclass(frozen=True)
class LatticeInfo:
    """Geometry of a lattice and its dual.

    Attributes
    ----------
    basis : (d, d) array, rows are the primitive vectors a_1..a_d
    dual_basis : (d, d) array, rows b_1..b_d with <b_l, a_j> = 2 pi delta_lj
    cell_volume : volume of the elementary cell
    dual_cell_volume : volume of the Brillouin zone
    r0 : inradius of the closed Brillouin zone (half the shortest dual vector)
    r1 : max |k| over the zone boundary
    """

    basis: np.ndarray
    dual_basis: np.ndarray
    cell_volume: float
    dual_cell_volume: float
    r0: float
    r1: float
    _shell: np.ndarray = field(repr=False, default=None)

    @property
    def dimension(self) -> int:
        return self.basis.shape[0]

    def dual_point(self, m) -> np.ndarray:
        """Dual lattice point b(m) = sum_j m_j b_j."""
        return np.asarray(m, dtype=float) @ self.dual_basis

    def dual_shell(self, max_norm: int = SCAN_SHELL) -> np.ndarray:
        """All nonzero dual points with multi-index max-norm <= max_norm."""
        if max_norm == SCAN_SHELL and self._shell is not None:
            return self._shell
        d = self.dimension
        ms = [m for m in itertools.product(range(-max_norm, max_norm + 1), repeat=d)
              if any(m)]
        return np.array(ms, dtype=float) @ self.dual_basis

    def in_zone(self, k, tol: float = ZONE_TOL) -> bool:
        """Closed-zone membership: |k| <= |k - b| + tol for all scanned b != 0."""
        k = np.asarray(k, dtype=float)
        nk = np.linalg.norm(k)
        shell = self.dual_shell()
        return bool(np.all(nk <= np.linalg.norm(k - shell, axis=1) + tol))

    def fold(self, k) -> np.ndarray:
        """Translate k by a dual lattice vector into the closed zone.

        Ties on the boundary keep the representative closest to the input,
        preferring no translation, so grid endpoints stay put.
        """
        k = np.asarray(k, dtype=float)
        # reduce modulo the dual lattice first so far-away inputs land in
        # one fundamental cell, then polish against the nearby shell
        frac = np.linalg.solve(self.dual_basis.T, k)
        rounded = np.round(frac)
        if np.max(np.abs(rounded)) > 0:
            shift = rounded @ self.dual_basis
            shifted = k - shift
            if np.linalg.norm(shifted) < np.linalg.norm(k) - ZONE_TOL:
                k = shifted
        shell = self.dual_shell()
        dists = np.linalg.norm(k - shell, axis=1)
        best = dists.min(initial=np.inf)
        if best < np.linalg.norm(k) - ZONE_TOL:
            return k - shell[int(np.argmin(dists))]
        return k

    def boundary_radius(self, direction) -> float:
        """Distance from 0 to the zone boundary along a unit direction."""
        u = np.asarray(direction, dtype=float)
        u = u / np.linalg.norm(u)
        shell = self.dual_shell()
        proj = shell @ u
        mask = proj > 1e-14
        return float(np.min(0.5 * np.sum(shell[mask] ** 2, axis=1) / proj[mask]))


def build_lattice(basis) -> LatticeInfo:
    """Construct lattice geometry from d basis vectors (rows of `basis`)."""
    a = np.atleast_2d(np.asarray(basis, dtype=float))
    d = a.shape[0]
    if a.shape != (d, d) or d not in (1, 2, 3):
        raise LatticeError(f"basis must be d x d with d in {{1,2,3}}, got {a.shape}")
    det = np.linalg.det(a)
    scale = np.max(np.abs(a)) ** d
    if abs(det) <= 1e-12 * max(scale, 1.0):
        raise LatticeError(
            f"basis vectors are linearly dependent (det = {det:.3e}); "
            "provide a non-singular basis")
    b = 2.0 * np.pi * np.linalg.inv(a).T
    cell_volume = abs(det)
    dual_cell_volume = (2.0 * np.pi) ** d / cell_volume

    ms = [m for m in itertools.product(range(-SCAN_SHELL, SCAN_SHELL + 1), repeat=d)
          if any(m)]
    shell = np.array(ms, dtype=float) @ b
    r0 = 0.5 * float(np.min(np.linalg.norm(shell, axis=1)))
    r1 = _boundary_max_radius(d, shell, r0)

    info = LatticeInfo(basis=a, dual_basis=b, cell_volume=cell_volume,
                       dual_cell_volume=dual_cell_volume, r0=r0, r1=r1)
    object.__setattr__(info, "_shell", shell)
    return info


def _boundary_max_radius(d: int, shell: np.ndarray, r0: float) -> float:
    """Max |k| over the Brillouin-zone boundary.

    d = 1: the zone is an interval, r1 = r0.  d = 2: exact maximum over the
    Voronoi-cell vertices.  d = 3: dense boundary sampling.
    """
    if d == 1:
        return r0
    if d == 2:
        from scipy.spatial import Voronoi

        pts = np.vstack([np.zeros(2), shell])
        vor = Voronoi(pts)
        region = vor.regions[vor.point_region[0]]
        verts = vor.vertices[[i for i in region if i >= 0]]
        return float(np.max(np.linalg.norm(verts, axis=1)))
    # d == 3: per-direction boundary radius over a dense sphere sample
    dirs = _sphere_directions(65536)
    proj = dirs @ shell.T                          # (n_dirs, n_shell)
    half_sq = 0.5 * np.sum(shell ** 2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(proj > 1e-14, half_sq / proj, np.inf)
    return float(np.max(np.min(t, axis=1)))


def _sphere_directions(n: int) -> np.ndarray:
    """Fibonacci-spiral sample of the unit sphere in R^3."""
    i = np.arange(n) + 0.5
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z ** 2)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def unit_directions(dimension: int, count: int) -> np.ndarray:
    """Deterministic unit-direction sample: {+1,-1} in 1D, uniform angles in
    2D, Fibonacci sphere in 3D."""
    if dimension == 1:
        return np.array([[1.0], [-1.0]])[: max(count, 1)]
    if dimension == 2:
        ang = 2.0 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(ang), np.sin(ang)])
    return _sphere_directions(count)


@dataclass(frozen=True)
class FourierIndexSet:
    """Integer multi-indices m with |m|_inf <= cutoff, in lexicographic order.

    Index m represents the dual point b(m) = sum_j m_j b_j.  Closed under
    negation; the ordinal of the zero frequency is recorded.
    """

    cutoff: int
    dimension: int
    indices: np.ndarray            # (count, d) int
    position: dict                 # tuple(m) -> ordinal
    zero_ordinal: int

    def __len__(self) -> int:
        return self.indices.shape[0]

    def ordinal(self, m) -> int | None:
        return self.position.get(tuple(int(x) for x in m))

    def dual_points(self, lattice: LatticeInfo) -> np.ndarray:
        """b(m) for every index, as a (count, d) array."""
        return self.indices.astype(float) @ lattice.dual_basis


def build_index_set(cutoff: int, dimension: int) -> FourierIndexSet:
    if cutoff < 0:
        raise ValueError("cutoff must be nonnegative")
    rng = range(-cutoff, cutoff + 1)
    indices = np.array(list(itertools.product(rng, repeat=dimension)), dtype=int)
    position = {tuple(m): i for i, m in enumerate(indices.tolist())}
    zero = position[(0,) * dimension]
    return FourierIndexSet(cutoff=cutoff, dimension=dimension, indices=indices,
                           position=position, zero_ordinal=zero)


class GridSpecError(ValueError):
    """Malformed or out-of-range Brillouin sampling request."""


def brillouin_uniform(lattice: LatticeInfo, per_axis) -> np.ndarray:
    """Uniform tensor grid on the zone: fractional grid over the dual basis,
    folded into the closed zone.  Endpoints are kept (clamped on ties)."""
    d = lattice.dimension
    counts = [per_axis] * d if np.isscalar(per_axis) else list(per_axis)
    if len(counts) != d or any(c < 1 for c in counts):
        raise GridSpecError(f"per-axis counts {counts} invalid for d={d}")
    axes = [np.linspace(-0.5, 0.5, c) if c > 1 else np.array([0.0])
            for c in counts]
    fracs = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    ks = fracs @ lattice.dual_basis
    return np.array([lattice.fold(k) for k in ks])


def brillouin_radial(lattice: LatticeInfo, ts, directions) -> list[tuple[np.ndarray, np.ndarray]]:
    """Radial family {t_i * theta_j}, grouped by direction.

    Every requested t must satisfy t <= r0 so the points stay inside the
    inscribed ball of the zone.
    """
    ts = np.asarray(ts, dtype=float)
    if ts.size and float(np.max(ts)) > lattice.r0 + ZONE_TOL:
        raise GridSpecError(
            f"radial distance {np.max(ts):.6g} exceeds the zone inradius "
            f"r0 = {lattice.r0:.6g}")
    groups = []
    for theta in np.atleast_2d(np.asarray(directions, dtype=float)):
        u = theta / np.linalg.norm(theta)
        groups.append((u, ts[:, None] * u[None, :]))
    return groups


def brillouin_sample(lattice: LatticeInfo, spec):
    """Dispatch on a grid description.

    ``{"kind": "uniform", "per_axis": n}`` -> (P, d) array of folded points.
    ``{"kind": "radial", "t": [...], "directions": [...]}`` -> list of
    (direction, points) groups.
    """
    if not isinstance(spec, dict) or "kind" not in spec:
        raise GridSpecError("grid spec must be a dict with a 'kind' field")
    if spec["kind"] == "uniform":
        return brillouin_uniform(lattice, spec["per_axis"])
    if spec["kind"] == "radial":
        return brillouin_radial(lattice, spec["t"], spec["directions"])
    raise GridSpecError(f"unknown grid kind {spec['kind']!r}")
