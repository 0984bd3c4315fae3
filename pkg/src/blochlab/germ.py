"""Direction-resolved threshold analytics of the lowest fiber bands.

For a unit direction theta the lowest n eigenvalues of the fiber operator
behave like gamma_l t^2 + mu_l t^3 + nu_l t^4 + ... as the quasimomentum
t*theta shrinks.  Two independent routes produce the coefficients: closed
formulas built from cell solutions, and least-squares fits to computed
band values.  Their agreement is a standing cross-check, and the mu/nu
verdicts select which convergence-rate regime applies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment

from .cell import CellSolution, SecondOrderCorrector, WeightedCorrector, _left_mul
from .coefficients import OperatorModel, PeriodicMatrixFunction, weight_factor_field
from .fiber import assemble_fiber, lowest_bands
from .lattice import unit_directions

CLUSTER_RTOL = 1e-8        # relative gap treating germ eigenvalues as equal
ZERO_OP_TOL = 1e-8         # operator-norm tolerance for "vanishes" verdicts
OVERLAP_MIN = 0.7          # branch-matching confidence threshold


class GermError(RuntimeError):
    """Threshold analytics could not be carried out as requested."""


@dataclass
class GermExpansion:
    """Threshold data of one direction.

    gamma/mu/nu are the coefficients of t^2, t^3, t^4 in the low-band
    expansion, ordered by ascending gamma.  ``vectors`` holds the germ
    eigenvectors as columns (weighted case: orthonormal against the mean
    weight matrix).  ``clusters`` lists index ranges of equal gamma.
    """

    theta: np.ndarray
    germ: np.ndarray                  # n x n Hermitian matrix of the direction
    gamma: np.ndarray
    vectors: np.ndarray
    clusters: list
    mu: np.ndarray | None = None
    nu: np.ndarray | None = None
    mu_source: str = "none"           # none | formula | band_fit | both
    nu_source: str = "none"
    fit_residual: float | None = None
    fit_condition: float | None = None
    branch_reliable: bool = True

    @property
    def n(self) -> int:
        return self.gamma.size

    def to_row(self) -> dict:
        row = {
            "theta": [float(x) for x in self.theta],
            "gamma": [float(x) for x in self.gamma],
            "clusters": [list(map(int, c)) for c in self.clusters],
            "mu_source": self.mu_source,
            "nu_source": self.nu_source,
            "branch_reliable": bool(self.branch_reliable),
        }
        if self.mu is not None:
            row["mu"] = [float(x) for x in self.mu]
        if self.nu is not None:
            row["nu"] = [None if not np.isfinite(x) else float(x) for x in self.nu]
        if self.fit_residual is not None:
            row["fit_residual"] = float(self.fit_residual)
        return row


@dataclass
class RegimeReport:
    """Vanishing verdicts over sampled directions and the selected regime."""

    thetas: np.ndarray
    third_order_norms: np.ndarray       # |N(theta)| per direction
    diagonal_norms: np.ndarray          # |N0(theta)| per direction
    fourth_order_norms: np.ndarray | None
    third_order_vanishes: bool
    diagonal_vanishes: bool
    separation: float | None            # min over theta/pairs of the cluster gap constant
    regime: str                         # exact | improved | general

    def to_dict(self) -> dict:
        return {
            "third_order_vanishes": bool(self.third_order_vanishes),
            "diagonal_vanishes": bool(self.diagonal_vanishes),
            "separation": None if self.separation is None else float(self.separation),
            "regime": self.regime,
            "max_third_order_norm": float(np.max(self.third_order_norms)),
            "max_diagonal_norm": float(np.max(self.diagonal_norms)),
        }


def _cluster_ranges(values: np.ndarray, rtol: float = CLUSTER_RTOL) -> list:
    """Group ascending values into clusters by relative gap."""
    clusters, start = [], 0
    scale = max(float(np.max(np.abs(values))), 1e-300)
    for i in range(1, values.size):
        if values[i] - values[start] > rtol * scale:
            clusters.append(list(range(start, i)))
            start = i
    clusters.append(list(range(start, values.size)))
    return clusters


def germ_matrix(cell: CellSolution, model: OperatorModel, theta,
                q_mean: np.ndarray | None = None) -> GermExpansion:
    """Germ of one direction: b(theta)^* g_eff b(theta) with eigenpairs.

    With a mean weight matrix the generalized problem
    germ * zeta = gamma * q_mean * zeta is solved instead; eigenvectors are
    then orthonormal with weight q_mean.
    """
    theta = np.asarray(theta, dtype=float)
    if abs(np.linalg.norm(theta) - 1.0) > 1e-12:
        raise GermError("direction must be a unit vector")
    bt = model.symbol(theta)
    germ = bt.conj().T @ cell.g_eff @ bt
    germ = 0.5 * (germ + germ.conj().T)
    if q_mean is None:
        gamma, vecs = np.linalg.eigh(germ)
    else:
        gamma, vecs = scipy.linalg.eigh(germ, 0.5 * (q_mean + q_mean.conj().T))
    rep = model.validation
    if rep is not None:
        floor = rep.c_star if q_mean is None else rep.c_star_weighted
        if gamma[0] < floor - 1e-8 * max(1.0, abs(floor)):
            raise GermError(
                f"germ eigenvalue {gamma[0]:.6e} below the ellipticity floor")
    return GermExpansion(theta=theta, germ=germ, gamma=gamma, vectors=vecs,
                         clusters=_cluster_ranges(gamma))


def default_t_ladder(t0: float, levels=None) -> np.ndarray:
    """Geometric quasimomentum ladder t0 * 2^-j used by the band fits."""
    if levels is None:
        levels = np.arange(2.0, 8.51, 0.5)
    return np.array([t0 * 2.0 ** (-j) for j in levels])


def band_fit_expansion(model: OperatorModel, cell: CellSolution, theta,
                       t_samples=None, cutoff: int | None = None,
                       weighted: bool = False) -> GermExpansion:
    """Fit gamma, mu, nu per branch from fiber eigenvalues along +-t*theta.

    Each branch is sampled on both rays of the line through theta and
    tracked by eigenvector overlap, with germ eigenvectors as the anchor at
    the smallest t.  Splitting into even and odd parts of t decouples
    (gamma, nu) from mu and removes one order of truncation bias from each
    fit; both fits carry one guard term past the reported coefficient.
    """
    if cutoff is None:
        cutoff = cell.cutoff
    theta = np.asarray(theta, dtype=float)
    rep = model.require_validation()
    t_top = rep.t0_weighted if weighted else rep.t0
    if t_samples is None:
        t_samples = default_t_ladder(t_top)
    ts = np.sort(np.asarray(t_samples, dtype=float))[::-1]
    if ts.size < 6:
        raise GermError("band fit needs at least 6 quasimomentum samples")
    if ts[0] > t_top + 1e-12 or ts[-1] <= 0:
        raise GermError("band-fit samples must lie in (0, t0]")

    n = model.symbol.n
    q_mean = model.q_mean() if weighted else None
    base = germ_matrix(cell, model, theta, q_mean=q_mean)
    anchor = _embed_germ_vectors(model, base, cutoff, weighted)

    rays = {}
    reliable = True
    for sign in (1.0, -1.0):
        lams = np.zeros((ts.size, n))
        tracked = None                  # columns = branch slots on this ray
        for i, t in enumerate(ts):
            vals, vv = lowest_bands(model, sign * t * theta, cutoff, n,
                                    weighted=weighted)
            if tracked is None:
                assign = np.arange(n)
            else:
                overlap = np.abs(tracked.conj().T @ vv)
                slots, cols = linear_sum_assignment(-overlap)
                if np.min(overlap[slots, cols]) < OVERLAP_MIN:
                    reliable = False
                assign = np.empty(n, dtype=int)
                assign[slots] = cols    # slot -> eigencolumn at this t
            lams[i] = vals[assign]
            tracked = vv[:, assign]
        # anchor slots to germ labels at the smallest t of the ray
        overlap = np.abs(anchor.conj().T @ tracked)
        germ_idx, slots = linear_sum_assignment(-overlap)
        if np.min(overlap[germ_idx, slots]) < OVERLAP_MIN:
            reliable = False
        slot_of_germ = np.empty(n, dtype=int)
        slot_of_germ[germ_idx] = slots
        rays[sign] = lams[:, slot_of_germ]

    u = ts ** 2
    even_design = np.vstack([np.ones_like(u), u, u ** 2, u ** 3]).T
    # odd part fitted on raw differences: eigensolver noise is absolute, so
    # dividing by t^3 first would let the smallest t dominate the fit
    odd_design = np.vstack([ts ** 3, ts ** 5, ts ** 7]).T
    cond = float(max(np.linalg.cond(even_design), np.linalg.cond(odd_design)))
    gamma_fit = np.zeros(n)
    mu_fit = np.zeros(n)
    nu_fit = np.zeros(n)
    resid = 0.0
    for l in range(n):
        even = 0.5 * (rays[1.0][:, l] + rays[-1.0][:, l]) / u
        odd = 0.5 * (rays[1.0][:, l] - rays[-1.0][:, l])
        ce, *_ = np.linalg.lstsq(even_design, even, rcond=None)
        co, *_ = np.linalg.lstsq(odd_design, odd, rcond=None)
        gamma_fit[l], nu_fit[l] = ce[0], ce[1]
        mu_fit[l] = co[0]
        resid = max(resid, float(np.max(np.abs(even_design @ ce - even))),
                    float(np.max(np.abs(odd_design @ co - odd)) /
                          max(ts[0] ** 3, 1e-300)))

    return GermExpansion(theta=theta, germ=base.germ, gamma=gamma_fit,
                         vectors=base.vectors, clusters=base.clusters,
                         mu=mu_fit, nu=nu_fit,
                         mu_source="band_fit", nu_source="band_fit",
                         fit_residual=resid, fit_condition=cond,
                         branch_reliable=reliable)


def _embed_germ_vectors(model: OperatorModel, base: GermExpansion,
                        cutoff: int, weighted: bool) -> np.ndarray | None:
    """Fiber-space embedding of the germ eigenvectors (zero-mode limit of
    the low-band eigenvectors)."""
    from .lattice import build_index_set

    iset = build_index_set(cutoff, model.lattice.dimension)
    n = model.symbol.n
    dim = len(iset) * n
    out = np.zeros((dim, n), dtype=complex)
    z = iset.zero_ordinal
    if not weighted:
        out[z * n:(z + 1) * n, :] = base.vectors
        return out
    # weighted limit vectors are f^{-1} * zeta_l, with Fourier content of Q^{1/2}
    factor = weight_factor_field(model, cutoff, inverse=True)
    for mm, c in factor.coeffs.items():
        i = iset.position.get(mm)
        if i is not None:
            out[i * n:(i + 1) * n, :] = c @ base.vectors
    norms = np.linalg.norm(out, axis=0)
    return out / norms[None, :]


def third_order_matrix(cell: CellSolution, model: OperatorModel, theta,
                       corrector: PeriodicMatrixFunction | None = None) -> np.ndarray:
    """The n x n third-order threshold matrix of one direction.

    Built from the cell means of corrector^H b(theta)^H flux plus its
    adjoint, contracted with the symbol on both sides.
    """
    theta = np.asarray(theta, dtype=float)
    bt = model.symbol(theta)
    lam = corrector if corrector is not None else cell.corrector
    half = np.zeros((model.symbol.m, model.symbol.m), dtype=complex)
    for mm, c in lam.coeffs.items():
        half += c.conj().T @ bt.conj().T @ cell.flux.coeff(mm)
    full = half + half.conj().T
    out = bt.conj().T @ full @ bt
    return 0.5 * (out + out.conj().T)


def diagonal_part(matrix: np.ndarray, germ: GermExpansion) -> tuple[np.ndarray, np.ndarray]:
    """Block-diagonal part over germ eigenspaces and the per-branch values.

    Returns (matrix restricted-and-summed over clusters, mu values), where
    the branch values within a cluster are the eigenvalues of its block.
    """
    v = germ.vectors
    coeff = v.conj().T @ matrix @ v        # matrix elements in the germ basis
    out = np.zeros_like(matrix)
    mus = np.zeros(germ.n)
    for cluster in germ.clusters:
        idx = np.ix_(cluster, cluster)
        block = coeff[idx]
        block = 0.5 * (block + block.conj().T)
        mus[cluster] = np.sort(np.linalg.eigvalsh(block))
        proj = v[:, cluster]
        out += proj @ block @ proj.conj().T
    return out, mus


def weighted_diagonal_part(matrix: np.ndarray, germ: GermExpansion,
                           q_mean: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Skew block-diagonal part over generalized eigenspaces (weighted case)."""
    v = germ.vectors                      # q_mean-orthonormal columns
    coeff = v.conj().T @ matrix @ v
    out = np.zeros_like(matrix)
    mus = np.zeros(germ.n)
    for cluster in germ.clusters:
        idx = np.ix_(cluster, cluster)
        block = 0.5 * (coeff[idx] + coeff[idx].conj().T)
        mus[cluster] = np.sort(np.linalg.eigvalsh(block))
        proj = v[:, cluster]
        skew = proj @ proj.conj().T @ q_mean
        out += skew.conj().T @ matrix @ skew
    return out, mus


def weighted_third_order_matrix(cell: CellSolution, model: OperatorModel,
                                weighted: WeightedCorrector, theta) -> np.ndarray:
    """Third-order matrix with the weighted (recentered) corrector."""
    return third_order_matrix(cell, model, theta, corrector=weighted.corrector)


def fourth_order_operator(cell: CellSolution, second: SecondOrderCorrector,
                          model: OperatorModel, theta,
                          germ: GermExpansion | None = None):
    """Per-cluster fourth-order operators and the quartic coefficients nu_l.

    Valid only when the diagonal third-order part vanishes at this theta;
    otherwise the construction does not give the quartic coefficients and
    the call is refused.
    """
    theta = np.asarray(theta, dtype=float)
    if germ is None:
        germ = germ_matrix(cell, model, theta)
    third = third_order_matrix(cell, model, theta)
    _, mus = diagonal_part(third, germ)
    scale = max(1.0, float(np.max(germ.gamma)))
    if np.max(np.abs(mus)) > ZERO_OP_TOL * scale:
        raise GermError(
            "fourth-order construction requires a vanishing diagonal "
            f"third-order part; found |mu| up to {np.max(np.abs(mus)):.3e}")

    bt = model.symbol(theta)
    combined = second.combined(theta)

    # first cell-mean block: combined^H b(theta)^H flux + adjoint
    half = np.zeros((model.symbol.m, model.symbol.m), dtype=complex)
    for mm, c in combined.coeffs.items():
        half += c.conj().T @ bt.conj().T @ cell.flux.coeff(mm)
    l2 = half + half.conj().T

    # second cell-mean block: (b(D) combined + b(theta) corrector)^H g (same)
    grad = _symbol_gradient_local(model, combined) + _left_mul(cell.corrector, bt)
    gw = model.g.matmul(grad)
    quad = np.zeros((model.symbol.m, model.symbol.m), dtype=complex)
    for mm, c in grad.coeffs.items():
        quad += c.conj().T @ gw.coeff(mm)
    l2 = l2 + 0.5 * (quad + quad.conj().T)

    n1 = bt.conj().T @ l2 @ bt
    n1 = 0.5 * (n1 + n1.conj().T)

    # corrector Gram contracted with the symbol
    gram = np.zeros((model.symbol.m, model.symbol.m), dtype=complex)
    for mm, c in cell.corrector.coeffs.items():
        gram += c.conj().T @ c
    zz = bt.conj().T @ gram @ bt

    core = n1 - 0.5 * (zz @ germ.germ + germ.germ @ zz)

    v = germ.vectors
    nus = np.full(germ.n, np.nan)
    blocks = []
    gamma_rep = np.array([germ.gamma[c[0]] for c in germ.clusters])
    for qi, cluster in enumerate(germ.clusters):
        vq = v[:, cluster]
        block = vq.conj().T @ core @ vq
        for ji, other in enumerate(germ.clusters):
            if ji == qi:
                continue
            gap = gamma_rep[qi] - gamma_rep[ji]
            if abs(gap) < 1e-6 * max(1.0, abs(gamma_rep[qi])):
                raise GermError("cross-cluster term is ill conditioned: "
                                f"gap {gap:.3e} between clusters {qi} and {ji}")
            vj = v[:, other]
            block = block + (vq.conj().T @ third @ vj @ vj.conj().T @ third @ vq) / gap
        block = 0.5 * (block + block.conj().T)
        blocks.append(block)
        nus[cluster] = np.sort(np.linalg.eigvalsh(block))
    return blocks, nus


def _symbol_gradient_local(model: OperatorModel,
                           fld: PeriodicMatrixFunction) -> PeriodicMatrixFunction:
    out = {}
    for mm, c in fld.coeffs.items():
        bmat = model.symbol(model.lattice.dual_point(mm))
        prod = bmat @ c
        if np.max(np.abs(prod)) > 0:
            out[mm] = prod
    return PeriodicMatrixFunction(model.symbol.m, fld.cols, fld.dimension, out)


def regime_classify(model: OperatorModel, cell: CellSolution,
                    thetas=None, second: SecondOrderCorrector | None = None,
                    weighted: WeightedCorrector | None = None) -> RegimeReport:
    """Empirical vanishing verdicts over sampled directions.

    The verdicts and the selected regime apply to the sampled directions
    only.  The returned separation constant is the minimum over sampled
    directions and coupled branch pairs of min(c_*, |gamma_k - gamma_r|/n).
    """
    d = model.lattice.dimension
    if thetas is None:
        thetas = unit_directions(d, 2 if d == 1 else 32)
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if d >= 2 and thetas.shape[0] < 32:
        raise GermError("need at least 32 sampled directions for d >= 2")
    rep = model.require_validation()
    q_mean = model.q_mean() if (model.weighted and weighted is not None) else None

    n_norms, d_norms, f_norms = [], [], []
    separation = None
    for theta in thetas:
        germ = germ_matrix(cell, model, theta, q_mean=q_mean)
        if weighted is not None:
            third = weighted_third_order_matrix(cell, model, weighted, theta)
            diag, _ = weighted_diagonal_part(third, germ, q_mean)
        else:
            third = third_order_matrix(cell, model, theta)
            diag, _ = diagonal_part(third, germ)
        n_norms.append(np.linalg.norm(third, 2))
        d_norms.append(np.linalg.norm(diag, 2))
        v = germ.vectors
        coeff = v.conj().T @ third @ v
        for a, ca in enumerate(germ.clusters):
            for b, cb in enumerate(germ.clusters):
                if a >= b:
                    continue
                block = coeff[np.ix_(ca, cb)]
                if np.max(np.abs(block)) > ZERO_OP_TOL * max(1.0, float(np.max(germ.gamma))):
                    gap = abs(germ.gamma[ca[0]] - germ.gamma[cb[0]]) / germ.n
                    cand = min(rep.c_star, gap)
                    separation = cand if separation is None else min(separation, cand)
        if second is not None and np.max(np.abs(d_norms[-1])) < ZERO_OP_TOL:
            try:
                _, nus = fourth_order_operator(cell, second, model, theta, germ=germ)
                f_norms.append(float(np.max(np.abs(nus))))
            except GermError:
                f_norms.append(np.nan)

    n_norms = np.array(n_norms)
    d_norms = np.array(d_norms)
    scale = max(1.0, float(np.max(np.abs(cell.g_eff))))
    third_vanishes = bool(np.max(n_norms) < ZERO_OP_TOL * scale)
    diag_vanishes = bool(np.max(d_norms) < ZERO_OP_TOL * scale)
    if not cell.corrector.coeffs:
        regime = "exact"
    elif diag_vanishes:
        regime = "improved"
    else:
        regime = "general"
    return RegimeReport(thetas=thetas, third_order_norms=n_norms,
                        diagonal_norms=d_norms,
                        fourth_order_norms=np.array(f_norms) if f_norms else None,
                        third_order_vanishes=third_vanishes,
                        diagonal_vanishes=diag_vanishes,
                        separation=separation, regime=regime)


def rate_exponents(regime: str, s: float) -> float:
    """Expected convergence exponent of the cos-propagator error at
    smoothing order s, per regime."""
    if regime == "exact":
        return np.inf
    if regime == "improved":
        if s > 1.5:
            raise GermError("improved regime covers s <= 3/2")
        return 2.0 * s / 3.0
    if regime == "general":
        if s > 2.0:
            raise GermError("general regime covers s <= 2")
        return s / 2.0
    raise GermError(f"unknown regime {regime!r}")
