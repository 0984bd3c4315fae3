"""Bloch-fiber Galerkin operators, propagators, and fiber error norms.

For quasimomentum k the fiber operator acts on cell-periodic functions;
its truncated Fourier Galerkin matrix is Hermitian positive semidefinite
with the constant vectors as exact kernel at k = 0.  Propagator functions
(cos and the sin-based wave kernel) come from one eigen-decomposition per
fiber; every error variant is a dense matrix whose spectral norm is the
reported fiber error.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg

from .cell import CellSolution
from .coefficients import OperatorModel, PeriodicMatrixFunction, weight_factor_field
from .lattice import FourierIndexSet, build_index_set

HERM_TOL = 1e-12
EIG_CLAMP = 1e-10
KERNEL_TOL = 1e-10

VARIANTS = ("J1_cos", "J2_sinc", "J3_sinc_sandwich", "J_energy_corrector",
            "J1_weighted", "J3_weighted", "J_energy_weighted")
WEIGHTED_VARIANTS = ("J1_weighted", "J3_weighted", "J_energy_weighted")
# sin-based variants report the epsilon-scaled physical quantity
SINC_SCALED_VARIANTS = ("J2_sinc", "J3_sinc_sandwich", "J3_weighted")


class FiberError(RuntimeError):
    """Fiber assembly or evaluation failed."""


@dataclass
class FiberSpectrum:
    """Eigen-decomposition of one fiber Galerkin matrix.

    Degrees of freedom are mode-major: flat index = mode_ordinal * n + comp.
    """

    k: np.ndarray
    index_set: FourierIndexSet
    n: int
    matrix: np.ndarray
    eigenvalues: np.ndarray        # ascending, clamped at 0
    eigenvectors: np.ndarray       # orthonormal columns
    weighted: bool = False

    @property
    def dim(self) -> int:
        return self.eigenvalues.size

    def propagator(self, tau: float, kind: str) -> np.ndarray:
        return fiber_propagator(self, tau, kind)

    def sqrt_matrix(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * np.sqrt(self.eigenvalues)) @ v.conj().T

    def apply_function(self, values: np.ndarray) -> np.ndarray:
        v = self.eigenvectors
        return (v * values) @ v.conj().T


@dataclass
class FiberErrorRequest:
    """One fiber error evaluation: variant, scales, and corrector choice."""

    variant: str
    epsilon: float
    tau: float
    s: float
    corrector: str = "with_Pi"      # none | with_Pi | without_Pi

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise FiberError(f"unknown variant {self.variant!r}")
        if not 0.0 <= self.s <= 2.0:
            raise FiberError(f"smoothing exponent s={self.s} outside [0, 2]")
        if self.epsilon <= 0:
            raise FiberError("epsilon must be positive")
        if self.corrector not in ("none", "with_Pi", "without_Pi"):
            raise FiberError(f"unknown corrector mode {self.corrector!r}")

    @property
    def needs_weight(self) -> bool:
        return self.variant in WEIGHTED_VARIANTS


def _eigh_checked(mat: np.ndarray, what: str):
    scale = max(1.0, float(np.max(np.abs(mat))))
    dev = float(np.max(np.abs(mat - mat.conj().T)))
    if dev > HERM_TOL * scale:
        raise FiberError(f"{what} deviates from Hermitian by {dev:.2e}")
    w, v = scipy.linalg.eigh(0.5 * (mat + mat.conj().T))
    if w[0] < -EIG_CLAMP * scale:
        raise FiberError(f"{what} has negative eigenvalue {w[0]:.2e}")
    return np.maximum(w, 0.0), v


def _galerkin_multiplier(fld: PeriodicMatrixFunction,
                         index_set: FourierIndexSet) -> np.ndarray:
    """Galerkin matrix of pointwise multiplication by a periodic field."""
    count, n = len(index_set), fld.rows
    out = np.zeros((count, n, count, n), dtype=complex)
    indices = index_set.indices
    for p, c in fld.coeffs.items():
        shifted = indices + np.asarray(p, dtype=int)
        for j in range(count):
            i = index_set.position.get(tuple(shifted[j]))
            if i is not None:
                out[i, :, j, :] = c
    return out.reshape(count * n, count * n)


class FiberAssembler:
    """Per-(cutoff, weighted) precomputation of the fiber matrix family.

    The Galerkin matrix is quadratic in the quasimomentum, so it splits
    into k-independent pieces assembled once; per-k evaluation is a few
    dense matrix combinations.  Cached on the model instance.
    """

    def __init__(self, model: OperatorModel, cutoff: int, weighted: bool):
        bw = model.g.bandwidth()
        if cutoff < bw + 2:
            raise FiberError(f"cutoff {cutoff} below coefficient bandwidth + 2")
        self.model = model
        self.cutoff = cutoff
        self.weighted = weighted
        d = model.lattice.dimension
        self.index_set = build_index_set(cutoff, d)
        count = len(self.index_set)
        n = model.symbol.n
        self.dim = count * n
        pts = self.index_set.dual_points(model.lattice)
        mats = np.stack(model.symbol.matrices, axis=0)
        base = np.tensordot(pts, mats, axes=(1, 0))      # (count, m, n)
        base_h = base.conj().transpose(0, 2, 1)
        mats_h = mats.conj().transpose(0, 2, 1)

        def accumulate(left, right, left_const, right_const):
            out = np.zeros((count, n, count, n), dtype=complex)
            for p, gp in model.g.coeffs.items():
                shifted = self.index_set.indices + np.asarray(p, dtype=int)
                if left_const:
                    lg = left @ gp
                else:
                    lg = left @ gp[None, :, :]
                for j in range(count):
                    i = self.index_set.position.get(tuple(shifted[j]))
                    if i is None:
                        continue
                    lgi = lg if left_const else lg[i]
                    out[i, :, j, :] += lgi @ (right if right_const else right[j])
            return out.reshape(self.dim, self.dim)

        self.p0 = accumulate(base_h, base, False, False)
        self.p1 = [accumulate(mats_h[l], base, True, False)
                   for l in range(d)]
        self.p2 = [[accumulate(mats_h[l], mats[l2], True, True)
                    for l2 in range(d)] for l in range(d)]
        if weighted:
            f = _weight_multiplier(model, cutoff)
            fm = _galerkin_multiplier(f, self.index_set)
            fmh = fm.conj().T
            self.f_mult = fm
            self.p0 = fmh @ self.p0 @ fm
            self.p1 = [fmh @ p @ fm for p in self.p1]
            self.p2 = [[fmh @ p @ fm for p in row] for row in self.p2]
        else:
            self.f_mult = None
        # fold the adjoint of the linear pieces and the symmetric pairs of
        # the quadratic pieces once, so per-k assembly is a short sum of
        # contiguous arrays
        self.p1_sym = [np.ascontiguousarray(p + p.conj().T) for p in self.p1]
        self.p2_sym = {}
        for l in range(d):
            for l2 in range(l, d):
                if l == l2:
                    self.p2_sym[(l, l2)] = np.ascontiguousarray(self.p2[l][l])
                else:
                    self.p2_sym[(l, l2)] = np.ascontiguousarray(
                        self.p2[l][l2] + self.p2[l2][l])
        # structural hermiticity check once on the pieces
        scale = max(1.0, float(np.max(np.abs(self.p0))))
        if float(np.max(np.abs(self.p0 - self.p0.conj().T))) > HERM_TOL * scale:
            raise FiberError("assembled base fiber matrix is not Hermitian")
        self._refine = None

    def matrix(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        mat = self.p0.copy()
        for l, kl in enumerate(k):
            if kl != 0.0:
                mat += kl * self.p1_sym[l]
        for (l, l2), piece in self.p2_sym.items():
            factor = k[l] * k[l2]
            if factor != 0.0:
                mat += factor * piece
        return mat

    def refine_context(self):
        """Cached quadrature data for the cancellation-free form."""
        if self._refine is None:
            from .coefficients import fractional_grid

            model = self.model
            d = model.lattice.dimension
            per_axis = 2 * self.cutoff + model.g.bandwidth() + 2
            fracs = fractional_grid(d, per_axis)
            g_samples = model.g.evaluate_fractional(fracs)
            phases = np.exp(2j * np.pi *
                            (fracs @ self.index_set.indices.T.astype(float)))
            base_pts = self.index_set.dual_points(model.lattice)
            mats = np.stack(model.symbol.matrices, axis=0)
            base_bmats = np.tensordot(base_pts, mats, axes=(1, 0))
            self._refine = (fracs, phases, g_samples, mats, base_bmats)
        return self._refine


def fiber_assembler(model: OperatorModel, cutoff: int,
                    weighted: bool = False) -> FiberAssembler:
    cache = getattr(model, "_fiber_assemblers", None)
    if cache is None:
        cache = {}
        model._fiber_assemblers = cache
    key = (cutoff, weighted)
    if key not in cache:
        cache[key] = FiberAssembler(model, cutoff, weighted)
    return cache[key]


def _fiber_matrix(model: OperatorModel, k, cutoff: int, weighted: bool):
    """Assemble the fiber Galerkin matrix and its index set."""
    asm = fiber_assembler(model, cutoff, weighted)
    return asm.matrix(k), asm.index_set, np.asarray(k, dtype=float)


def assemble_fiber(model: OperatorModel, k, cutoff: int,
                   weighted: bool = False) -> FiberSpectrum:
    """Fiber Galerkin matrix at quasimomentum k and its eigen-decomposition.

    Blocks are b(b(m')+k)^H g(m'-m) b(b(m)+k); the weighted fiber conjugates
    by the multiplication matrix of the factor Q^{-1/2}.
    """
    mat, index_set, k = _fiber_matrix(model, k, cutoff, weighted)
    w, v = _eigh_checked(mat, f"fiber matrix at k={k}")
    spec = FiberSpectrum(k=k, index_set=index_set, n=model.symbol.n,
                         matrix=mat, eigenvalues=w, eigenvectors=v,
                         weighted=weighted)
    _check_fiber_invariants(model, spec)
    return spec


def lowest_bands(model: OperatorModel, k, cutoff: int, count: int,
                 weighted: bool = False, refine: bool = True):
    """The lowest band values and eigenvectors at one quasimomentum.

    Uses a subset eigensolver and the cancellation-free quadrature form to
    restore relative precision of near-kernel eigenvalues (see
    refine_low_eigenvalues).  Returns (values, eigenvector columns).
    """
    mat, index_set, k = _fiber_matrix(model, k, cutoff, weighted)
    # hermiticity is structural here: the assembler's pieces are checked
    # once and every k-combination is Hermitian by construction; the
    # eigensolver reads one triangle
    w, v = scipy.linalg.eigh(mat, subset_by_index=[0, count - 1],
                             check_finite=False)
    spec = FiberSpectrum(k=k, index_set=index_set, n=model.symbol.n,
                         matrix=mat, eigenvalues=np.maximum(w, 0.0),
                         eigenvectors=v, weighted=weighted)
    if refine:
        return refine_low_eigenvalues(model, spec, count), v
    return spec.eigenvalues, v


def _check_fiber_invariants(model: OperatorModel, spec: FiberSpectrum):
    rep = model.validation
    if rep is None:
        return
    nk = float(np.linalg.norm(spec.k))
    if nk <= 1e-14:
        low = int(np.sum(spec.eigenvalues < rep.delta))
        if low != spec.n or np.any(spec.eigenvalues[:spec.n] > KERNEL_TOL):
            raise FiberError(
                f"kernel at k=0 has {low} low eigenvalues, expected {spec.n}")
    else:
        c_star = rep.c_star_weighted if spec.weighted else rep.c_star
        floor = c_star * nk ** 2 * (1.0 - 1e-6)
        if spec.eigenvalues[0] < floor - 1e-12:
            raise FiberError(
                f"fiber at |k|={nk:.3e} dips below the ellipticity floor: "
                f"{spec.eigenvalues[0]:.6e} < {floor:.6e}")


def effective_fiber(model: OperatorModel, cell: CellSolution, k, cutoff: int,
                    weighted: bool = False) -> FiberSpectrum:
    """Fiber of the homogenized operator: block-diagonal over modes."""
    k = np.asarray(k, dtype=float)
    d = model.lattice.dimension
    index_set = build_index_set(cutoff, d)
    n = model.symbol.n
    pts = index_set.dual_points(model.lattice) + k[None, :]
    mats = np.stack(model.symbol.matrices, axis=0)
    bmats = np.tensordot(pts, mats, axes=(1, 0))
    blocks = bmats.conj().transpose(0, 2, 1) @ cell.g_eff[None, :, :] @ bmats
    if weighted:
        f0 = model.f0()
        blocks = f0.conj().T[None, :, :] @ blocks @ f0[None, :, :]
    count = len(index_set)
    mat = np.zeros((count, n, count, n), dtype=complex)
    ev = np.zeros((count, n))
    vecs = np.zeros((count, n, count, n), dtype=complex)
    for i in range(count):
        w, v = np.linalg.eigh(0.5 * (blocks[i] + blocks[i].conj().T))
        mat[i, :, i, :] = blocks[i]
        ev[i] = np.maximum(w, 0.0)
        vecs[i, :, i, :] = v.T          # row j of v.T is the j-th eigenvector
    flat_mat = mat.reshape(count * n, count * n)
    order = np.argsort(ev.reshape(-1), kind="stable")
    w_flat = ev.reshape(-1)[order]
    v_flat = vecs.reshape(count * n, count * n)[order].T
    return FiberSpectrum(k=k, index_set=index_set, n=n, matrix=flat_mat,
                         eigenvalues=w_flat, eigenvectors=v_flat,
                         weighted=weighted)


def fiber_propagator(spectrum: FiberSpectrum, tau: float, kind: str) -> np.ndarray:
    """Spectral propagator: cos(tau sqrt(A)) or A^{-1/2} sin(tau sqrt(A)).

    The sin kernel is realized as tau * sinc(tau sqrt(lambda)) which extends
    continuously through the kernel at k = 0 (value tau).
    """
    root = np.sqrt(spectrum.eigenvalues)
    if kind == "cos":
        vals = np.cos(tau * root)
    elif kind == "sinc":
        vals = tau * np.sinc(tau * root / np.pi)
    else:
        raise FiberError(f"unknown propagator kind {kind!r}")
    return spectrum.apply_function(vals)


def smoothing_diag(k, epsilon: float, s: float, index_set: FourierIndexSet,
                   lattice, n: int) -> np.ndarray:
    """Diagonal smoothing weights eps^s (|b(m)+k|^2 + eps^2)^(-s/2) per mode,
    replicated across the n vector components."""
    if epsilon <= 0 or s < 0:
        raise FiberError("need epsilon > 0 and s >= 0")
    pts = index_set.dual_points(lattice) + np.asarray(k, dtype=float)[None, :]
    sq = np.sum(pts ** 2, axis=1)
    w = epsilon ** s * (sq + epsilon ** 2) ** (-0.5 * s)
    return np.repeat(w, n)


def corrector_multiplier(cell: CellSolution, model: OperatorModel, k,
                         index_set: FourierIndexSet,
                         use_averaging: bool = True) -> np.ndarray:
    """Matrix of I + corrector * b(D+k) composed with the cell average.

    With ``use_averaging`` the symbol factor acts on the zero mode only
    (the projection onto cell means); without it the convolution acts on
    every mode, which models the corrector with the frequency cutoff
    removed.
    """
    n = model.symbol.n
    count = len(index_set)
    out = np.eye(count * n, dtype=complex)
    k = np.asarray(k, dtype=float)
    if use_averaging:
        bk = model.symbol(k)
        for mm, c in cell.corrector.coeffs.items():
            i = index_set.position.get(mm)
            if i is not None:
                out[i * n:(i + 1) * n,
                    index_set.zero_ordinal * n:(index_set.zero_ordinal + 1) * n] += c @ bk
        return out
    pts = index_set.dual_points(model.lattice) + k[None, :]
    for j in range(count):
        bkj = model.symbol(pts[j])
        for mm, c in cell.corrector.coeffs.items():
            i = index_set.position.get(tuple(np.asarray(mm) + index_set.indices[j]))
            if i is not None:
                out[i * n:(i + 1) * n, j * n:(j + 1) * n] += c @ bkj
    return out


def _weight_multiplier(model: OperatorModel, cutoff: int,
                       inverse: bool = False) -> PeriodicMatrixFunction:
    """Factor field Q^{-1/2} (or Q^{1/2}) at doubled bandwidth, cached on the
    model instance."""
    cache = getattr(model, "_weight_fields", None)
    if cache is None:
        cache = {}
        model._weight_fields = cache
    key = (2 * cutoff, inverse)
    if key not in cache:
        cache[key] = weight_factor_field(model, 2 * cutoff, inverse=inverse)
    return cache[key]


def refine_low_eigenvalues(model: OperatorModel, spec: FiberSpectrum,
                           count: int) -> np.ndarray:
    """Re-evaluate the lowest eigenvalues as nonnegative quadrature forms.

    The Galerkin matrix carries entries of size (symbol * cutoff)^2, so a
    dense eigensolver resolves near-kernel eigenvalues only to an absolute
    epsilon * norm floor.  Evaluating the energy form of the computed
    eigenvector as a pointwise-positive quadrature sum has no cancellation,
    which restores relative precision (the eigenvector error enters only at
    second order).
    """
    asm = fiber_assembler(model, spec.index_set.cutoff, spec.weighted)
    n = model.symbol.n
    fracs, phases, g_samples, mats, base_bmats = asm.refine_context()
    bmats = base_bmats + np.tensordot(spec.k, mats, axes=(0, 0))[None, :, :]
    out = spec.eigenvalues[:count].copy()
    for j in range(count):
        u_flat = spec.eigenvectors[:, j]
        u_eff = (asm.f_mult @ u_flat) if spec.weighted else u_flat
        u = u_eff.reshape(len(spec.index_set), n)
        w_modes = np.einsum("imn,in->im", bmats, u)
        w_grid = phases @ w_modes                         # (points, m)
        energy = np.einsum("xa,xab,xb->", w_grid.conj(), g_samples, w_grid)
        norm_sq = float(np.sum(np.abs(u_flat) ** 2))
        out[j] = max(float(np.real(energy)) / fracs.shape[0] / norm_sq, 0.0)
    return out


@dataclass
class FiberWorkspace:
    """Spectra and multipliers for one k, reused across (eps, tau, s) cells."""

    model: OperatorModel
    cell: CellSolution
    k: np.ndarray
    cutoff: int
    plain: FiberSpectrum = None
    plain_eff: FiberSpectrum = None
    weighted: FiberSpectrum = None
    weighted_eff: FiberSpectrum = None
    f_mult: np.ndarray = None
    f_inv_mult: np.ndarray = None

    def require(self, weighted: bool):
        if weighted:
            if self.weighted is None:
                self.weighted = assemble_fiber(self.model, self.k, self.cutoff,
                                               weighted=True)
                self.weighted_eff = effective_fiber(self.model, self.cell,
                                                    self.k, self.cutoff,
                                                    weighted=True)
                iset = self.weighted.index_set
                self.f_mult = _galerkin_multiplier(
                    _weight_multiplier(self.model, self.cutoff), iset)
                self.f_inv_mult = _galerkin_multiplier(
                    _weight_multiplier(self.model, self.cutoff, inverse=True), iset)
            return self.weighted, self.weighted_eff
        if self.plain is None:
            self.plain = assemble_fiber(self.model, self.k, self.cutoff)
            self.plain_eff = effective_fiber(self.model, self.cell, self.k,
                                             self.cutoff)
        return self.plain, self.plain_eff

def fiber_error_matrix(ws: FiberWorkspace, request: FiberErrorRequest) -> np.ndarray:
    """Dense matrix of the requested fiber error composed with smoothing."""
    model, cell = ws.model, ws.cell
    if request.needs_weight and model.Q is None:
        raise FiberError(f"variant {request.variant} requires a weight Q")
    tau_f = request.tau / request.epsilon
    spec, spec_eff = ws.require(request.needs_weight)
    iset = spec.index_set
    weights = smoothing_diag(ws.k, request.epsilon, request.s, iset,
                             model.lattice, spec.n)
    v = request.variant
    if v == "J1_cos":
        diff = spec.propagator(tau_f, "cos") - spec_eff.propagator(tau_f, "cos")
    elif v == "J2_sinc":
        diff = spec.propagator(tau_f, "sinc") - spec_eff.propagator(tau_f, "sinc")
    elif v == "J_energy_corrector":
        mult = _corrector_for(ws, request, iset)
        diff = spec.propagator(tau_f, "sinc") - mult @ spec_eff.propagator(tau_f, "sinc")
        plain, _ = ws.require(False)
        diff = plain.sqrt_matrix() @ diff
    elif v == "J1_weighted":
        f0 = _constant_multiplier(model.f0(), iset)
        f0_inv = _constant_multiplier(np.linalg.inv(model.f0()), iset)
        diff = ws.f_mult @ spec.propagator(tau_f, "cos") @ ws.f_inv_mult \
            - f0 @ spec_eff.propagator(tau_f, "cos") @ f0_inv
    elif v == "J3_weighted" or v == "J3_sinc_sandwich":
        f0 = _constant_multiplier(model.f0(), iset)
        diff = ws.f_mult @ spec.propagator(tau_f, "sinc") @ ws.f_mult.conj().T \
            - f0 @ spec_eff.propagator(tau_f, "sinc") @ f0
    elif v == "J_energy_weighted":
        f0 = _constant_multiplier(model.f0(), iset)
        f0_inv = _constant_multiplier(np.linalg.inv(model.f0()), iset)
        mult = _corrector_for(ws, request, iset)
        diff = ws.f_mult @ spec.propagator(tau_f, "sinc") @ ws.f_inv_mult \
            - mult @ f0 @ spec_eff.propagator(tau_f, "sinc") @ f0_inv
        plain, _ = ws.require(False)
        diff = plain.sqrt_matrix() @ diff
    else:  # pragma: no cover
        raise FiberError(f"unhandled variant {v}")
    return diff * weights[None, :]


def _corrector_for(ws: FiberWorkspace, request: FiberErrorRequest, iset):
    if request.corrector == "none":
        return np.eye(len(iset) * ws.model.symbol.n, dtype=complex)
    if ws.cutoff < ws.cell.cutoff:
        raise FiberError(
            f"fiber cutoff {ws.cutoff} below the cell solution cutoff "
            f"{ws.cell.cutoff}: corrector coefficients would be truncated")
    return corrector_multiplier(ws.cell, ws.model, ws.k, iset,
                                use_averaging=(request.corrector == "with_Pi"))


def _constant_multiplier(mat: np.ndarray, index_set: FourierIndexSet) -> np.ndarray:
    return np.kron(np.eye(len(index_set)), mat)


def fiber_error_norm(model: OperatorModel, cell: CellSolution, k,
                     request: FiberErrorRequest, cutoff: int,
                     workspace: FiberWorkspace | None = None) -> float:
    """Spectral norm of the requested fiber error at quasimomentum k."""
    ws = workspace or FiberWorkspace(model=model, cell=cell,
                                     k=np.asarray(k, dtype=float), cutoff=cutoff)
    mat = fiber_error_matrix(ws, request)
    return float(np.linalg.norm(mat, 2))
