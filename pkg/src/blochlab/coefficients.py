"""Periodic coefficient fields, first-order symbols, and operator models.

Coefficients are band-limited: a field is a finite set of Fourier
coefficients against the dual lattice, so cell averages, products, and
Galerkin blocks are exact finite convolutions.  In fractional coordinates
x = sum_j f_j a_j the phase is exp(2*pi*i <m, f>), which keeps every grid
evaluation lattice-independent.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .lattice import LatticeInfo, unit_directions

HERMITIAN_TOL = 1e-14
EIG_FLOOR = 1e-13         # eigenvalue guard for Hermitian square roots
RANK_TOL = 1e-10          # alpha_0 below this rejects the symbol


class CoefficientError(ValueError):
    """Inconsistent coefficient data."""


class ModelValidationError(ValueError):
    """Operator model violates a standing assumption."""


def _as_key(m) -> tuple:
    return tuple(int(x) for x in np.atleast_1d(m))


@dataclass
class PeriodicMatrixFunction:
    """Band-limited periodic matrix field given by Fourier coefficients.

    ``coeffs`` maps integer multi-indices m to (rows x cols) complex
    matrices; the field is sum_m coeffs[m] * exp(i <b(m), x>).
    """

    rows: int
    cols: int
    dimension: int
    coeffs: dict = field(default_factory=dict)
    hermitian: bool = False

    def __post_init__(self):
        clean = {}
        for m, c in self.coeffs.items():
            key = _as_key(m)
            if len(key) != self.dimension:
                raise CoefficientError(f"index {key} has wrong dimension")
            mat = np.asarray(c, dtype=complex)
            if mat.shape != (self.rows, self.cols):
                raise CoefficientError(
                    f"coefficient at {key} has shape {mat.shape}, "
                    f"expected {(self.rows, self.cols)}")
            if np.any(mat != 0):
                clean[key] = mat
        self.coeffs = clean
        if self.hermitian:
            if self.rows != self.cols:
                raise CoefficientError("hermitian flag requires a square field")
            scale = max(self.sup_coeff_norm(), 1.0)
            for m, c in self.coeffs.items():
                neg = self.coeffs.get(tuple(-x for x in m))
                other = np.zeros_like(c) if neg is None else neg
                if np.max(np.abs(other.conj().T - c)) > HERMITIAN_TOL * scale:
                    raise CoefficientError(
                        f"field is not Hermitian: coefficient at {m} does not "
                        "match the conjugate transpose at the negated index")

    # -- basic queries -------------------------------------------------

    def coeff(self, m) -> np.ndarray:
        c = self.coeffs.get(_as_key(m))
        return np.zeros((self.rows, self.cols), dtype=complex) if c is None else c

    def mean(self) -> np.ndarray:
        return self.coeff((0,) * self.dimension)

    def bandwidth(self) -> int:
        if not self.coeffs:
            return 0
        return max(max(abs(x) for x in m) for m in self.coeffs)

    def sup_coeff_norm(self) -> float:
        if not self.coeffs:
            return 0.0
        return max(np.max(np.abs(c)) for c in self.coeffs.values())

    def is_constant(self) -> bool:
        return all(not any(m) for m in self.coeffs)

    # -- algebra (finite convolutions) ---------------------------------

    def __add__(self, other: "PeriodicMatrixFunction") -> "PeriodicMatrixFunction":
        if (self.rows, self.cols) != (other.rows, other.cols):
            raise CoefficientError("shape mismatch in field addition")
        out = {m: c.copy() for m, c in self.coeffs.items()}
        for m, c in other.coeffs.items():
            out[m] = out.get(m, 0) + c
        return PeriodicMatrixFunction(self.rows, self.cols, self.dimension, out)

    def scaled(self, factor: complex) -> "PeriodicMatrixFunction":
        return PeriodicMatrixFunction(
            self.rows, self.cols, self.dimension,
            {m: factor * c for m, c in self.coeffs.items()})

    def matmul(self, other: "PeriodicMatrixFunction") -> "PeriodicMatrixFunction":
        """Pointwise product, computed as the convolution of coefficients."""
        if self.cols != other.rows:
            raise CoefficientError("inner dimensions do not match")
        out: dict = {}
        for m1, c1 in self.coeffs.items():
            for m2, c2 in other.coeffs.items():
                key = tuple(a + b for a, b in zip(m1, m2))
                prod = c1 @ c2
                if key in out:
                    out[key] = out[key] + prod
                else:
                    out[key] = prod
        return PeriodicMatrixFunction(self.rows, other.cols, self.dimension, out)

    def adjoint(self) -> "PeriodicMatrixFunction":
        """Pointwise conjugate transpose."""
        return PeriodicMatrixFunction(
            self.cols, self.rows, self.dimension,
            {tuple(-x for x in m): c.conj().T for m, c in self.coeffs.items()})

    def shifted(self, const: np.ndarray) -> "PeriodicMatrixFunction":
        """Field plus a constant matrix."""
        zero = (0,) * self.dimension
        out = {m: c.copy() for m, c in self.coeffs.items()}
        out[zero] = out.get(zero, 0) + np.asarray(const, dtype=complex)
        return PeriodicMatrixFunction(self.rows, self.cols, self.dimension, out)

    # -- evaluation ----------------------------------------------------

    def evaluate_fractional(self, fracs: np.ndarray) -> np.ndarray:
        """Samples at fractional coordinates f (points x = sum f_j a_j)."""
        fracs = np.atleast_2d(np.asarray(fracs, dtype=float))
        out = np.zeros((fracs.shape[0], self.rows, self.cols), dtype=complex)
        for m, c in self.coeffs.items():
            phase = np.exp(2j * np.pi * (fracs @ np.asarray(m, dtype=float)))
            out += phase[:, None, None] * c[None, :, :]
        return out


def fractional_grid(dimension: int, per_axis: int) -> np.ndarray:
    """Uniform periodic quadrature grid on [0,1)^d, flattened to (P^d, d)."""
    axes = [np.arange(per_axis) / per_axis] * dimension
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dimension)


def evaluate_on_grid(field_fn: PeriodicMatrixFunction, lattice: LatticeInfo,
                     per_axis: int) -> np.ndarray:
    """Samples of the field on a uniform per_axis^d cell grid."""
    if per_axis < 1:
        raise ValueError("per_axis must be >= 1")
    if lattice.dimension != field_fn.dimension:
        raise CoefficientError("lattice and field dimensions differ")
    samples = field_fn.evaluate_fractional(fractional_grid(field_fn.dimension, per_axis))
    if field_fn.hermitian:
        scale = max(field_fn.sup_coeff_norm(), 1.0)
        dev = np.max(np.abs(samples - samples.conj().transpose(0, 2, 1)))
        if dev > 1e-12 * scale:
            raise CoefficientError(f"hermitian field produced non-Hermitian samples ({dev:.2e})")
    return samples


def field_from_samples(samples: np.ndarray, cutoff: int, dimension: int,
                       hermitian: bool = False, tol: float = 1e-14) -> PeriodicMatrixFunction:
    """Recover Fourier coefficients with |m|_inf <= cutoff from grid samples.

    ``samples`` has shape (P, ..., P, rows, cols) with P > 2*cutoff on every
    axis; the forward FFT is exact for band-limited data below P/2.
    """
    grid_shape = samples.shape[:-2]
    rows, cols = samples.shape[-2:]
    if len(grid_shape) != dimension:
        raise CoefficientError("sample array rank does not match dimension")
    if min(grid_shape) <= 2 * cutoff:
        raise CoefficientError("grid too coarse for the requested cutoff")
    hat = np.fft.fftn(samples, axes=tuple(range(dimension))) / np.prod(grid_shape)
    coeffs = {}
    scale = max(np.max(np.abs(hat)), 1.0)
    for m in itertools.product(range(-cutoff, cutoff + 1), repeat=dimension):
        c = hat[tuple(mi % p for mi, p in zip(m, grid_shape))]
        if np.max(np.abs(c)) > tol * scale:
            coeffs[m] = c
    return PeriodicMatrixFunction(rows, cols, dimension, coeffs, hermitian=hermitian)


def mean_product(left: PeriodicMatrixFunction, right: PeriodicMatrixFunction) -> np.ndarray:
    """Cell mean of left(x)^H right(x), exact for band-limited fields."""
    if left.rows != right.rows:
        raise CoefficientError("row mismatch in mean_product")
    out = np.zeros((left.cols, right.cols), dtype=complex)
    for m, c in left.coeffs.items():
        other = right.coeffs.get(m)
        if other is not None:
            out += c.conj().T @ other
    return out


def hermitian_sqrt(mat: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Hermitian positive square root (or inverse square root) of a matrix."""
    w, v = np.linalg.eigh(np.asarray(mat, dtype=complex))
    w = np.maximum(w, EIG_FLOOR)
    p = -0.5 if inverse else 0.5
    return (v * (w ** p)) @ v.conj().T


@dataclass
class SymbolB:
    """First-order symbol b(xi) = sum_l xi_l b_l with constant m x n blocks."""

    matrices: list
    alpha0: float = None
    alpha1: float = None

    def __post_init__(self):
        mats = [np.asarray(b, dtype=complex) for b in self.matrices]
        shape = mats[0].shape
        if any(b.shape != shape for b in mats):
            raise CoefficientError("symbol blocks must share one shape")
        if shape[0] < shape[1]:
            raise CoefficientError(
                f"symbol must have m >= n, got m={shape[0]}, n={shape[1]}")
        self.matrices = mats

    @property
    def dimension(self) -> int:
        return len(self.matrices)

    @property
    def m(self) -> int:
        return self.matrices[0].shape[0]

    @property
    def n(self) -> int:
        return self.matrices[0].shape[1]

    def __call__(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        out = np.zeros((self.m, self.n), dtype=complex)
        for x, b in zip(xi, self.matrices):
            out += x * b
        return out

    def alpha_range(self, sphere_samples: int = 256) -> tuple[float, float]:
        """min/max eigenvalue of b(theta)^* b(theta) over sampled directions."""
        thetas = unit_directions(self.dimension, sphere_samples)
        lo, hi = np.inf, 0.0
        for theta in thetas:
            bt = self(theta)
            w = np.linalg.eigvalsh(bt.conj().T @ bt)
            lo = min(lo, w[0])
            hi = max(hi, w[-1])
        return float(lo), float(hi)


@dataclass
class ValidationReport:
    """Derived constants of a validated operator model.

    c_star, delta, t0 are the unweighted threshold constants; the
    weighted problem shrinks them by powers of the weight condition
    number (fields with suffix _weighted, equal to the plain ones when
    no weight is present).
    """

    alpha0: float
    alpha1: float
    g_norm: float
    g_inv_norm: float
    q_norm: float | None
    q_inv_norm: float | None
    c_star: float          # alpha0 / ||g^-1||_inf  (unweighted ellipticity)
    delta: float           # c_star * r0^2 / 4, threshold interval radius
    t0: float              # radius of the analytic threshold ball, <= r0/2
    per_axis: int
    sphere_samples: int
    c_star_weighted: float = None
    delta_weighted: float = None
    t0_weighted: float = None


@dataclass
class OperatorModel:
    """The operator family b(D)^* g(x) b(D), optionally weighted by Q(x).

    Q enters only through the Hermitian positive factor f = Q^{-1/2}; Q
    absent means the unweighted problem.
    """

    lattice: LatticeInfo
    symbol: SymbolB
    g: PeriodicMatrixFunction
    Q: PeriodicMatrixFunction | None = None
    validation: ValidationReport | None = None

    def __post_init__(self):
        if self.g.rows != self.symbol.m or self.g.cols != self.symbol.m:
            raise CoefficientError(
                f"g must be {self.symbol.m} x {self.symbol.m}")
        if self.Q is not None and (self.Q.rows != self.symbol.n or
                                   self.Q.cols != self.symbol.n):
            raise CoefficientError(
                f"Q must be {self.symbol.n} x {self.symbol.n}")
        if self.symbol.dimension != self.lattice.dimension:
            raise CoefficientError("symbol and lattice dimensions differ")

    @property
    def weighted(self) -> bool:
        return self.Q is not None

    def q_mean(self) -> np.ndarray:
        if self.Q is None:
            return np.eye(self.symbol.n, dtype=complex)
        return self.Q.mean()

    def f0(self) -> np.ndarray:
        """Constant factor (mean Q)^{-1/2} of the homogenized weighted operator."""
        return hermitian_sqrt(self.q_mean(), inverse=True)

    def require_validation(self) -> ValidationReport:
        if self.validation is None:
            validate_model(self)
        return self.validation


def _spectral_norm_bounds(samples: np.ndarray) -> tuple[float, float, float]:
    """(min eigenvalue, sup |field|, sup |field^-1|) over Hermitian samples."""
    w = np.linalg.eigvalsh(samples)
    min_eig = float(np.min(w[:, 0]))
    sup = float(np.max(np.abs(w)))
    sup_inv = float(np.max(1.0 / np.abs(w[:, 0]))) if min_eig > 0 else np.inf
    return min_eig, sup, sup_inv


def validate_model(model: OperatorModel, per_axis: int = 32,
                   sphere_samples: int = 256) -> ValidationReport:
    """Check the standing assumptions and compute the derived constants.

    Rejects rank-deficient symbols (alpha0 <= 1e-10) and indefinite g or Q.
    The norms are grid estimates: max spectral norm over per_axis^d samples.
    """
    d = model.lattice.dimension
    if per_axis < 8:
        raise ValueError("per_axis must be >= 8 for validation")
    if d >= 2 and sphere_samples < 16:
        raise ValueError("need at least 16 sphere samples for d >= 2")

    alpha0, alpha1 = model.symbol.alpha_range(sphere_samples)
    if alpha0 <= RANK_TOL:
        raise ModelValidationError(
            f"symbol is rank deficient on the sphere (alpha0 = {alpha0:.3e})")

    g_samples = evaluate_on_grid(model.g, model.lattice, per_axis)
    g_min, g_norm, g_inv_norm = _spectral_norm_bounds(g_samples)
    if g_min <= 0:
        raise ModelValidationError(
            f"g is not positive definite (min sample eigenvalue {g_min:.3e})")

    q_norm = q_inv_norm = None
    if model.Q is not None:
        q_samples = evaluate_on_grid(model.Q, model.lattice, per_axis)
        q_min, q_norm, q_inv_norm = _spectral_norm_bounds(q_samples)
        if q_min <= 0:
            raise ModelValidationError(
                f"Q is not positive definite (min sample eigenvalue {q_min:.3e})")

    r0 = model.lattice.r0
    c_star = alpha0 / g_inv_norm
    delta = 0.25 * c_star * r0 ** 2
    t0 = 0.5 * r0 * np.sqrt(alpha0 / alpha1) / np.sqrt(g_norm * g_inv_norm)
    # weighted problem: the factor f = Q^{-1/2} enters the ellipticity
    # through ||f^{-1}||^2 = ||Q|| and the threshold ball through the
    # condition number of the weight
    q_cond = 1.0 if q_norm is None else q_norm * q_inv_norm
    c_star_w = c_star / (q_norm if q_norm is not None else 1.0)
    report = ValidationReport(
        alpha0=alpha0, alpha1=alpha1, g_norm=g_norm, g_inv_norm=g_inv_norm,
        q_norm=q_norm, q_inv_norm=q_inv_norm, c_star=c_star, delta=delta,
        t0=float(t0), per_axis=per_axis, sphere_samples=sphere_samples,
        c_star_weighted=c_star_w,
        delta_weighted=0.25 * c_star_w * r0 ** 2,
        t0_weighted=float(t0 / np.sqrt(q_cond)))
    model.validation = report
    return report


def weight_factor_field(model: OperatorModel, cutoff: int,
                        inverse: bool = False) -> PeriodicMatrixFunction:
    """Fourier coefficients of Q^{-1/2} (or Q^{1/2}) at the given cutoff.

    Computed by pointwise Hermitian square roots on a grid followed by a
    forward FFT; the grid oversamples the cutoff so aliasing from the
    analytic tail stays below the coefficient tolerance.
    """
    if model.Q is None:
        raise ModelValidationError("weight factor requested but Q is absent")
    d = model.lattice.dimension
    per_axis = max(64, 4 * cutoff + 4)
    fracs = fractional_grid(d, per_axis)
    samples = model.Q.evaluate_fractional(fracs)
    roots = np.stack([hermitian_sqrt(s, inverse=not inverse) for s in samples])
    shaped = roots.reshape(*([per_axis] * d), model.symbol.n, model.symbol.n)
    return field_from_samples(shaped, cutoff, d, hermitian=True)
