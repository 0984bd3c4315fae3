"""Canonical scenarios covering the convergence-rate regimes.

Each builtin carries a validated operator model, the regime its
coefficients are designed to realize, and default knobs (cutoffs, grids,
ladders) sized for desk-scale runs.  The complex-Hermitian scenario is
verified at build time to actually produce a nonvanishing cubic band
coefficient; if a modification breaks that, the builder refuses rather
than shipping a wrong regime.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coefficients import (OperatorModel, PeriodicMatrixFunction, SymbolB,
                           validate_model)
from .cell import solve_corrector
from .germ import third_order_matrix
from .lattice import build_lattice, unit_directions
from .study import CauchyData, KGridSpec

BUILTIN_NAMES = ("model1d", "acoustics2d_real", "acoustics2d_hermitian",
                 "acoustics_weighted", "elasticity2d", "hill2d")


class ScenarioError(ValueError):
    """Unknown scenario or a builder self-check failed."""


@dataclass
class Scenario:
    """A ready-to-run model with default study parameters."""

    name: str
    model: OperatorModel
    expected_regime: str
    cutoff: int
    band_cutoff: int
    eps_ladder: list
    taus: list
    ss: list
    kgrid: KGridSpec
    theta_count: int
    cauchy: CauchyData | None = None
    cauchy_eps: list = field(default_factory=list)
    description: str = ""

    def directions(self) -> np.ndarray:
        return unit_directions(self.model.lattice.dimension, self.theta_count)

    def to_config(self) -> dict:
        """Serializable scenario description (the CLI config format)."""
        model = self.model
        cfg = {
            "name": self.name,
            "lattice": {"basis": model.lattice.basis.tolist()},
            "symbol": [_matrix_entry(b) for b in model.symbol.matrices],
            "g": _field_entry(model.g),
            "cutoff": self.cutoff,
            "band_cutoff": self.band_cutoff,
            "eps": self.eps_ladder,
            "taus": self.taus,
            "ss": self.ss,
            "kgrid": self.kgrid.describe(),
            "expected_regime": self.expected_regime,
            "theta_count": self.theta_count,
        }
        if model.Q is not None:
            cfg["Q"] = _field_entry(model.Q)
        return cfg


def _matrix_entry(mat: np.ndarray) -> dict:
    mat = np.asarray(mat, dtype=complex)
    return {"real": mat.real.tolist(), "imag": mat.imag.tolist()}


def _field_entry(fld: PeriodicMatrixFunction) -> dict:
    return {
        "rows": fld.rows, "cols": fld.cols, "hermitian": fld.hermitian,
        "coefficients": [
            {"multi_index": list(m), **_matrix_entry(c)}
            for m, c in sorted(fld.coeffs.items())
        ],
    }


def _scalar_field(coeffs: dict, dimension: int) -> PeriodicMatrixFunction:
    return PeriodicMatrixFunction(
        1, 1, dimension, {m: [[v]] for m, v in coeffs.items()}, hermitian=True)


def _gradient_symbol(dimension: int) -> SymbolB:
    cols = []
    for l in range(dimension):
        m = np.zeros((dimension, 1))
        m[l, 0] = 1.0
        cols.append(m)
    return SymbolB(cols)


def _model1d() -> Scenario:
    lattice = build_lattice([[1.0]])
    g = _scalar_field({(0,): 2.0, (1,): 0.5, (-1,): 0.5}, 1)
    model = OperatorModel(lattice, _gradient_symbol(1), g)
    validate_model(model)
    cauchy = CauchyData(psi={(0,): [0.2], (1,): [0.4], (-1,): [0.35],
                             (2,): [0.15], (-2,): [0.12]})
    return Scenario(
        name="model1d", model=model, expected_regime="improved",
        cutoff=16, band_cutoff=16,
        eps_ladder=[2.0 ** (-j) for j in range(7, 12)],
        taus=[1.0], ss=[0.5, 1.0, 1.5],
        kgrid=KGridSpec(per_axis=64, radial_per_direction=64,
                        bundle_points=40),
        theta_count=2, cauchy=cauchy,
        cauchy_eps=[1 / 8, 1 / 16, 1 / 32, 1 / 64],
        description="1D medium 2 + cos(2 pi x); harmonic-mean effective "
                    "coefficient, vanishing cubic and nonzero quartic band "
                    "coefficients")


def _acoustics2d_real() -> Scenario:
    lattice = build_lattice(np.eye(2))
    coeffs = {
        (0, 0): [[2.0, 0.0], [0.0, 2.0]],
        (1, 0): [[0.5, 0.15], [0.15, 0.0]],
        (-1, 0): [[0.5, 0.15], [0.15, 0.0]],
        (0, 1): [[0.0, 0.1], [0.1, 0.5]],
        (0, -1): [[0.0, 0.1], [0.1, 0.5]],
    }
    g = PeriodicMatrixFunction(2, 2, 2, coeffs, hermitian=True)
    model = OperatorModel(lattice, _gradient_symbol(2), g)
    validate_model(model)
    return Scenario(
        name="acoustics2d_real", model=model, expected_regime="improved",
        cutoff=6, band_cutoff=6,
        eps_ladder=[2.0 ** (-j) for j in range(4, 9)],
        taus=[1.0], ss=[0.5, 1.0, 1.5],
        kgrid=KGridSpec(per_axis=17, radial_per_direction=48,
                        bundle_points=32),
        theta_count=16,
        description="2D scalar acoustics with a real symmetric trigonometric "
                    "coefficient matrix; third-order operator vanishes")


def _acoustics2d_hermitian() -> Scenario:
    # off-diagonal harmonics tuned for a strong cubic band coefficient
    # (max |mu|/sqrt(gamma) ~ 0.13) so the quadratic critical scaling sits
    # inside the zone across the default epsilon ladder; positivity and
    # mu != 0 are re-verified at build time
    lattice = build_lattice(np.eye(2))
    diag = {(0, 0): 2.8, (1, 0): 0.03, (-1, 0): 0.03,
            (0, 1): 0.24, (0, -1): 0.24}
    off = {(1, 0): -0.46 + 0.0j,
           (1, 1): -0.51 + 0.35j,
           (1, -1): -1.9 - 0.7j}
    coeffs = {m: np.diag([v, v]).astype(complex) for m, v in diag.items()}
    for m, amp in off.items():
        up = np.array([[0.0, amp], [0.0, 0.0]])
        coeffs[m] = coeffs.get(m, np.zeros((2, 2), dtype=complex)) + up
        neg = tuple(-x for x in m)
        coeffs[neg] = coeffs.get(neg, np.zeros((2, 2), dtype=complex)) \
            + up.conj().T
    g = PeriodicMatrixFunction(2, 2, 2, coeffs, hermitian=True)
    model = OperatorModel(lattice, _gradient_symbol(2), g)
    validate_model(model)
    _verify_nonzero_mu(model)
    return Scenario(
        name="acoustics2d_hermitian", model=model, expected_regime="general",
        cutoff=6, band_cutoff=6,
        eps_ladder=[2.0 ** (-j) for j in range(3, 8)],
        taus=[1.0], ss=[0.5, 1.0, 2.0],
        kgrid=KGridSpec(per_axis=13, radial_per_direction=40, directions=8,
                        bundle_points=24),
        theta_count=16,
        description="2D scalar acoustics with complex Hermitian coefficients "
                    "chosen so the cubic band coefficient is nonzero "
                    "(verified at build time)")


def _verify_nonzero_mu(model: OperatorModel, threshold: float = 1e-3):
    """Builder self-check: the cubic band coefficient must not vanish."""
    cell = solve_corrector(model, max(6, model.g.bandwidth() + 2))
    best = 0.0
    for theta in unit_directions(model.lattice.dimension, 16):
        third = third_order_matrix(cell, model, theta)
        best = max(best, float(np.max(np.abs(third))))
    if best < threshold:
        raise ScenarioError(
            "complex-Hermitian coefficients produced a numerically vanishing "
            f"cubic band coefficient (max |third-order matrix| = {best:.2e}); "
            "the scenario would not realize the general regime")


def _acoustics_weighted() -> Scenario:
    lattice = build_lattice([[1.0]])
    g = _scalar_field({(0,): 2.0, (1,): 0.5, (-1,): 0.5}, 1)
    q = _scalar_field({(0,): 1.5, (1,): 0.25, (-1,): 0.25}, 1)
    model = OperatorModel(lattice, _gradient_symbol(1), g, Q=q)
    validate_model(model)
    cauchy = CauchyData(psi={(0,): [0.2], (1,): [0.4], (-1,): [0.35],
                             (2,): [0.15], (-2,): [0.12]})
    return Scenario(
        name="acoustics_weighted", model=model, expected_regime="improved",
        cutoff=16, band_cutoff=16,
        eps_ladder=[2.0 ** (-j) for j in range(7, 12)],
        taus=[1.0], ss=[0.5],
        kgrid=KGridSpec(per_axis=64, radial_per_direction=64,
                        bundle_points=40),
        theta_count=2, cauchy=cauchy,
        cauchy_eps=[1 / 8, 1 / 16, 1 / 32, 1 / 64],
        description="1D acoustics with a positive oscillating density weight; "
                    "exercises the two-factor problem with f = Q^{-1/2}")


def _elasticity_field(K_coeffs: dict, mu_coeffs: dict) -> PeriodicMatrixFunction:
    """Isotropic plane-strain stiffness in the symmetric-strain ordering:
    rows/cols (e11, mixed shear, e22)."""
    coeffs: dict = {}

    def add(m, mat):
        m = tuple(m)
        mat = np.asarray(mat, dtype=complex)
        coeffs[m] = coeffs.get(m, np.zeros((3, 3), dtype=complex)) + mat

    for m, K in K_coeffs.items():
        add(m, [[K, 0, K], [0, 0, 0], [K, 0, K]])
    for m, mu in mu_coeffs.items():
        add(m, [[mu, 0, -mu], [0, 4 * mu, 0], [-mu, 0, mu]])
    return PeriodicMatrixFunction(3, 3, 2, coeffs, hermitian=True)


def _elasticity_symbol() -> SymbolB:
    b1 = np.array([[1.0, 0.0], [0.0, 0.5], [0.0, 0.0]])
    b2 = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 1.0]])
    return SymbolB([b1, b2])


def _elasticity2d() -> Scenario:
    lattice = build_lattice(np.eye(2))
    g = _elasticity_field(
        K_coeffs={(0, 0): 3.0, (1, 0): 0.5, (-1, 0): 0.5,
                  (0, 1): 0.25, (0, -1): 0.25},
        mu_coeffs={(0, 0): 2.0, (1, 1): 0.4, (-1, -1): 0.4})
    model = OperatorModel(lattice, _elasticity_symbol(), g)
    validate_model(model)
    return Scenario(
        name="elasticity2d", model=model, expected_regime="improved",
        cutoff=6, band_cutoff=5,
        eps_ladder=[2.0 ** (-j) for j in range(4, 9)],
        taus=[1.0], ss=[0.5, 1.0, 1.5],
        kgrid=KGridSpec(per_axis=13, radial_per_direction=40,
                        bundle_points=24),
        theta_count=16,
        description="plane-strain isotropic elasticity with oscillating "
                    "compression and shear moduli")


def _hill2d() -> Scenario:
    lattice = build_lattice(np.eye(2))
    mu0 = 2.0
    beta = {(0, 0): (3.0 + mu0) / 2, (1, 0): 0.25, (-1, 0): 0.25,
            (0, 1): 0.125, (0, -1): 0.125}
    coeffs = {m: np.diag([b, 0.0]).astype(complex) for m, b in beta.items()}
    coeffs[(0, 0)] = np.diag([beta[(0, 0)], mu0 / 2]).astype(complex)
    g = PeriodicMatrixFunction(2, 2, 2, coeffs, hermitian=True)
    b1 = np.array([[1.0, 0.0], [0.0, -1.0]])
    b2 = np.array([[0.0, 1.0], [1.0, 0.0]])
    model = OperatorModel(lattice, SymbolB([b1, b2]), g)
    validate_model(model)
    return Scenario(
        name="hill2d", model=model, expected_regime="improved",
        cutoff=6, band_cutoff=5,
        eps_ladder=[2.0 ** (-j) for j in range(4, 9)],
        taus=[1.0], ss=[0.5, 1.0, 1.5],
        kgrid=KGridSpec(per_axis=13, radial_per_direction=40,
                        bundle_points=24),
        theta_count=16,
        description="isotropic elastic body with constant shear modulus in "
                    "the reduced two-component factorization; the effective "
                    "matrix is the harmonic mean")


_BUILDERS = {
    "model1d": _model1d,
    "acoustics2d_real": _acoustics2d_real,
    "acoustics2d_hermitian": _acoustics2d_hermitian,
    "acoustics_weighted": _acoustics_weighted,
    "elasticity2d": _elasticity2d,
    "hill2d": _hill2d,
}


def builtin(name: str) -> Scenario:
    """Construct a builtin scenario by name."""
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise ScenarioError(
            f"unknown scenario {name!r}; available: {', '.join(BUILTIN_NAMES)}")
    return builder()
