"""Periodic cell problems: corrector, flux, effective matrix, bounds.

All solves are Fourier Galerkin over zero-mean modes; for band-limited
coefficients the assembly is an exact finite convolution and the residual
is measured on the doubled index range after the solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .coefficients import (OperatorModel, PeriodicMatrixFunction,
                           fractional_grid, hermitian_sqrt)
from .lattice import build_index_set


class CellProblemError(RuntimeError):
    """Cell solve could not be carried out as requested."""


@dataclass
class CellSolution:
    """Corrector and effective data of one operator model.

    corrector : zero-mean n x m periodic field
    flux : g(x) (b(D) corrector + 1)
    g_eff : cell mean of the flux (Hermitian positive)
    g_mean / g_harmonic : arithmetic and harmonic means of g
    residual_norm : discrete H^-1-type residual of the cell equation,
        recomputed from the flux by convolution and projected on the
        Galerkin test modes (solver-consistency indicator)
    tail_residual : same quantity over the untested band of modes between
        the cutoff and twice the cutoff (truncation indicator; decays
        spectrally with the cutoff for band-limited smooth coefficients)
    corrector_sup_norm : max |corrector(x)| over a sample grid (feeds the
        conditions under which the smoothing cutoff can be dropped)
    """

    cutoff: int
    corrector: PeriodicMatrixFunction
    flux: PeriodicMatrixFunction
    g_eff: np.ndarray
    g_mean: np.ndarray
    g_harmonic: np.ndarray
    residual_norm: float
    tail_residual: float
    corrector_sup_norm: float

    def to_dict(self) -> dict:
        return {
            "cutoff": self.cutoff,
            "g_eff": _matrix_payload(self.g_eff),
            "g_mean": _matrix_payload(self.g_mean),
            "g_harmonic": _matrix_payload(self.g_harmonic),
            "residual_norm": self.residual_norm,
            "tail_residual": self.tail_residual,
            "corrector_sup_norm": self.corrector_sup_norm,
        }


@dataclass
class SecondOrderCorrector:
    """Per-axis second cell solutions; combined on demand per direction."""

    cutoff: int
    fields: list                      # d zero-mean n x m periodic fields
    residuals: list

    def combined(self, theta) -> PeriodicMatrixFunction:
        theta = np.asarray(theta, dtype=float)
        out = self.fields[0].scaled(theta[0])
        for t, f in zip(theta[1:], self.fields[1:]):
            out = out + f.scaled(t)
        return out


@dataclass
class WeightedCorrector:
    """Corrector recentered to zero weighted mean, plus the constant shift."""

    corrector: PeriodicMatrixFunction   # corrector + shift
    shift: np.ndarray                   # -(mean Q)^{-1} mean(Q corrector)
    f0: np.ndarray                      # (mean Q)^{-1/2}


def _matrix_payload(mat: np.ndarray) -> list:
    return [[[float(np.real(v)), float(np.imag(v))] for v in row] for row in mat]


def _symbol_blocks(model: OperatorModel, index_set, k=None):
    """b(b(m) + k) for every index, stacked (count, m, n)."""
    pts = index_set.dual_points(model.lattice)
    if k is not None:
        pts = pts + np.asarray(k, dtype=float)[None, :]
    mats = np.stack(model.symbol.matrices, axis=0)      # (d, m, n)
    return np.tensordot(pts, mats, axes=(1, 0))


def _gram_matrix(model: OperatorModel, bmats: np.ndarray, index_set) -> np.ndarray:
    """Hermitian Galerkin matrix with blocks b_i^H g(m_i - m_j) b_j."""
    count = len(index_set)
    n = model.symbol.n
    gram = np.zeros((count, n, count, n), dtype=complex)
    indices = index_set.indices
    for p, gp in model.g.coeffs.items():
        shifted = indices + np.asarray(p, dtype=int)
        left = bmats.conj().transpose(0, 2, 1) @ gp[None, :, :]
        for j in range(count):
            i = index_set.position.get(tuple(shifted[j]))
            if i is not None:
                gram[i, :, j, :] += left[i] @ bmats[j]
    mat = gram.reshape(count * n, count * n)
    return 0.5 * (mat + mat.conj().T)


def _drop_zero(index_set):
    """Zero-mean trial set: same ordering with the zero mode removed."""
    keep = [i for i in range(len(index_set)) if i != index_set.zero_ordinal]
    return keep


def solve_corrector(model: OperatorModel, cutoff: int,
                    sup_grid: int = 64) -> CellSolution:
    """Galerkin solve of the corrector cell problem at the given cutoff."""
    bw = model.g.bandwidth()
    if cutoff < bw + 2:
        raise CellProblemError(
            f"cutoff {cutoff} too small for coefficient bandwidth {bw}; "
            f"need at least {bw + 2}")
    d = model.lattice.dimension
    n, m = model.symbol.n, model.symbol.m
    index_set = build_index_set(cutoff, d)
    bmats = _symbol_blocks(model, index_set)
    keep = _drop_zero(index_set)

    gram = _gram_matrix(model, bmats, index_set)
    sel = np.concatenate([np.arange(i * n, (i + 1) * n) for i in keep])
    system = gram[np.ix_(sel, sel)]

    # right-hand side: -b_i^H g(m_i) per retained mode, for each unit column
    rhs = np.zeros((len(keep) * n, m), dtype=complex)
    for row, i in enumerate(keep):
        gm = model.g.coeffs.get(tuple(index_set.indices[i]))
        if gm is not None:
            rhs[row * n:(row + 1) * n, :] = -bmats[i].conj().T @ gm
    try:
        sol = scipy.linalg.solve(system, rhs, assume_a="pos")
    except np.linalg.LinAlgError as exc:  # pragma: no cover - g > 0 prevents this
        raise CellProblemError(f"Galerkin matrix singular: {exc}") from exc

    coeffs = {}
    for row, i in enumerate(keep):
        block = sol[row * n:(row + 1) * n, :]
        if np.max(np.abs(block)) > 0:
            coeffs[tuple(index_set.indices[i])] = block
    corrector = PeriodicMatrixFunction(n, m, d, coeffs)

    flux = _flux_field(model, corrector)
    g_eff = flux.mean()
    g_eff = 0.5 * (g_eff + g_eff.conj().T)
    if np.min(np.linalg.eigvalsh(g_eff)) <= 0:
        raise CellProblemError("effective matrix is not positive definite")

    g_mean = model.g.mean()
    g_harmonic = _harmonic_mean(model)
    residual, tail = _cell_residual(model, flux, cutoff)
    sup_norm = _sup_spectral_norm(corrector, sup_grid)
    return CellSolution(cutoff=cutoff, corrector=corrector, flux=flux,
                        g_eff=g_eff, g_mean=g_mean, g_harmonic=g_harmonic,
                        residual_norm=residual, tail_residual=tail,
                        corrector_sup_norm=sup_norm)


def _flux_field(model: OperatorModel,
                corrector: PeriodicMatrixFunction) -> PeriodicMatrixFunction:
    """g(x) (b(D) corrector + identity)."""
    grad = _symbol_gradient(model, corrector)
    return model.g.matmul(grad.shifted(np.eye(model.symbol.m)))


def _symbol_gradient(model: OperatorModel,
                     fld: PeriodicMatrixFunction) -> PeriodicMatrixFunction:
    """b(D) applied to a periodic field: coefficient m picks up b(b(m))."""
    out = {}
    for mm, c in fld.coeffs.items():
        bmat = model.symbol(model.lattice.dual_point(mm))
        prod = bmat @ c
        if np.max(np.abs(prod)) > 0:
            out[mm] = prod
    return PeriodicMatrixFunction(model.symbol.m, fld.cols,
                                  fld.dimension, out)


def _cell_residual(model: OperatorModel, flux: PeriodicMatrixFunction,
                   cutoff: int) -> tuple[float, float]:
    """H^-1-type residual of b(D)^* flux = 0, recomputed by convolution.

    Returns (tested, tail): the contribution of the Galerkin test modes
    (nonzero only through solver roundoff) and of the untested band up to
    twice the cutoff (governed by the corrector's spectral tail).
    """
    tested = 0.0
    tail = 0.0
    for mm, c in flux.coeffs.items():
        if not any(mm) or max(abs(x) for x in mm) > 2 * cutoff:
            continue
        b_pt = model.lattice.dual_point(mm)
        bmat = model.symbol(b_pt)
        contrib = float(np.sum(np.abs(bmat.conj().T @ c) ** 2))
        contrib /= 1.0 + float(np.dot(b_pt, b_pt))
        if max(abs(x) for x in mm) <= cutoff:
            tested += contrib
        else:
            tail += contrib
    return float(np.sqrt(tested)), float(np.sqrt(tail))


def _harmonic_mean(model: OperatorModel, per_axis: int | None = None) -> np.ndarray:
    """(mean of g^{-1})^{-1} by uniform quadrature (spectrally accurate)."""
    d = model.lattice.dimension
    if per_axis is None:
        per_axis = max(128 if d == 1 else 64, 8 * (model.g.bandwidth() + 1))
    fracs = fractional_grid(d, per_axis)
    samples = model.g.evaluate_fractional(fracs)
    inv_mean = np.mean(np.linalg.inv(samples), axis=0)
    out = np.linalg.inv(inv_mean)
    return 0.5 * (out + out.conj().T)


def _sup_spectral_norm(fld: PeriodicMatrixFunction, per_axis: int) -> float:
    if not fld.coeffs:
        return 0.0
    samples = fld.evaluate_fractional(fractional_grid(fld.dimension, per_axis))
    return float(np.max(np.linalg.norm(samples, ord=2, axis=(1, 2))))


def voigt_reuss(model: OperatorModel, cell: CellSolution):
    """Arithmetic/harmonic means and the bracket margins around g_eff.

    Returns (g_mean, g_harmonic, margins) where margins holds the minimal
    eigenvalues of g_mean - g_eff and g_eff - g_harmonic.
    """
    upper = float(np.min(np.linalg.eigvalsh(cell.g_mean - cell.g_eff)))
    lower = float(np.min(np.linalg.eigvalsh(cell.g_eff - cell.g_harmonic)))
    margins = {"upper_margin": upper, "lower_margin": lower}
    return cell.g_mean, cell.g_harmonic, margins


def solve_second_corrector(model: OperatorModel, cell: CellSolution,
                           cutoff: int | None = None) -> SecondOrderCorrector:
    """Second cell problems, one per coordinate axis.

    For axis l the zero-mean solution satisfies, tested against zero-mean
    modes, b(D)^* g (b(D) field_l + b_l corrector) = b_l^* (g_eff - flux).
    """
    if cutoff is None:
        cutoff = cell.cutoff
    if cutoff < cell.cutoff:
        raise CellProblemError("second corrector cutoff below cell cutoff")
    d = model.lattice.dimension
    n, m = model.symbol.n, model.symbol.m
    index_set = build_index_set(cutoff, d)
    bmats = _symbol_blocks(model, index_set)
    keep = _drop_zero(index_set)
    gram = _gram_matrix(model, bmats, index_set)
    sel = np.concatenate([np.arange(i * n, (i + 1) * n) for i in keep])
    system = gram[np.ix_(sel, sel)]
    factor = scipy.linalg.cho_factor(system)

    fields, residuals = [], []
    for l in range(d):
        bl = model.symbol.matrices[l]
        # solvability: the right-hand side has zero mean by construction
        mean_rhs = bl.conj().T @ (cell.g_eff - cell.flux.mean())
        if np.max(np.abs(mean_rhs)) > 1e-12 * max(1.0, np.max(np.abs(cell.g_eff))):
            raise CellProblemError("second cell problem right-hand side has nonzero mean")
        transport = model.g.matmul(_left_mul(cell.corrector, bl))
        rhs = np.zeros((len(keep) * n, m), dtype=complex)
        for row, i in enumerate(keep):
            mm = tuple(index_set.indices[i])
            r = -bmats[i].conj().T @ transport.coeff(mm) - bl.conj().T @ cell.flux.coeff(mm)
            rhs[row * n:(row + 1) * n, :] = r
        sol = scipy.linalg.cho_solve(factor, rhs)
        coeffs = {}
        for row, i in enumerate(keep):
            block = sol[row * n:(row + 1) * n, :]
            if np.max(np.abs(block)) > 0:
                coeffs[tuple(index_set.indices[i])] = block
        fld = PeriodicMatrixFunction(n, m, d, coeffs)
        fields.append(fld)
        residuals.append(_second_residual(model, cell, fld, bl, cutoff))
    return SecondOrderCorrector(cutoff=cutoff, fields=fields, residuals=residuals)


def _left_mul(fld: PeriodicMatrixFunction, mat: np.ndarray) -> PeriodicMatrixFunction:
    """Constant matrix times a periodic field."""
    return PeriodicMatrixFunction(
        mat.shape[0], fld.cols, fld.dimension,
        {m: mat @ c for m, c in fld.coeffs.items()})


def _second_residual(model, cell, fld, bl, cutoff) -> float:
    grad = _symbol_gradient(model, fld) + _left_mul(cell.corrector, bl)
    lhs = model.g.matmul(grad)
    total = 0.0
    for mm, c in lhs.coeffs.items():
        if max(abs(x) for x in mm) > 2 * cutoff:
            continue
        bmat = model.symbol(model.lattice.dual_point(mm))
        target = -bl.conj().T @ cell.flux.coeff(mm) if any(mm) else \
            bl.conj().T @ (cell.g_eff - cell.flux.coeff(mm))
        total += float(np.sum(np.abs(bmat.conj().T @ c - target) ** 2))
    return float(np.sqrt(total))


def weighted_corrector(model: OperatorModel, cell: CellSolution) -> WeightedCorrector:
    """Recenter the corrector to zero Q-weighted mean.

    The shift is -(mean Q)^{-1} mean(Q * corrector); the recentered field
    solves the same cell equation and has zero weighted mean.
    """
    if model.Q is None:
        shift = np.zeros((model.symbol.n, model.symbol.m))
        return WeightedCorrector(corrector=cell.corrector, shift=shift,
                                 f0=np.eye(model.symbol.n))
    q_mean = model.Q.mean()
    weighted_mean = model.Q.matmul(cell.corrector).mean()
    shift = -np.linalg.solve(q_mean, weighted_mean)
    recentered = cell.corrector.shifted(shift)
    f0 = hermitian_sqrt(q_mean, inverse=True)
    check = model.Q.matmul(recentered).mean()
    scale = max(1.0, float(np.max(np.abs(q_mean))))
    if np.max(np.abs(check)) > 1e-12 * scale * max(1.0, cell.corrector_sup_norm):
        raise CellProblemError("weighted mean of the recentered corrector is nonzero")
    return WeightedCorrector(corrector=recentered, shift=shift, f0=f0)
