"""Rate studies, sharpness probes, and periodic Cauchy problems.

The operator-norm studies estimate the sup over quasimomenta of a fiber
error for ladders of (epsilon, tau, smoothing order), then fit log-log
convergence rates.  Sharpness probes evaluate the propagator discrepancy
along the critical quasimomentum scalings from the lower-bound
constructions.  Cauchy problems run on the unit torus with epsilon = 1/M,
solved by eigen-decomposition with an independent leapfrog time stepper as
cross-check.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .cell import CellSolution
from .coefficients import (OperatorModel, PeriodicMatrixFunction,
                           evaluate_on_grid, fractional_grid, hermitian_sqrt,
                           weight_factor_field)
from .fiber import (SINC_SCALED_VARIANTS, FiberErrorRequest, FiberWorkspace,
                    fiber_error_matrix, smoothing_diag)
from .germ import GermExpansion
from .lattice import LatticeInfo, brillouin_uniform, build_index_set, unit_directions

MU_ZERO_TOL = 1e-8


class StudyError(RuntimeError):
    """Study request malformed or outside its validity region."""


# ---------------------------------------------------------------------------
# rate fitting
# ---------------------------------------------------------------------------

@dataclass
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    n_used: int
    excluded: int = 0
    reliable: bool = True


def rate_fit(pairs) -> RateFit:
    """Ordinary least squares of log(error) against log(eps).

    Zero errors are excluded (and counted); at least 3 positive pairs are
    required.  Fits with R^2 below 0.98 are marked unreliable.
    """
    pairs = [(float(e), float(v)) for e, v in pairs]
    kept = [(e, v) for e, v in pairs if v > 0.0]
    excluded = len(pairs) - len(kept)
    if len(kept) < 3:
        raise StudyError("rate fit needs at least 3 positive (eps, error) pairs")
    x = np.log([e for e, _ in kept])
    y = np.log([v for _, v in kept])
    design = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    total = y - np.mean(y)
    denom = float(np.sum(total ** 2))
    r2 = 1.0 if denom == 0 else 1.0 - float(np.sum(resid ** 2)) / denom
    return RateFit(slope=float(coef[0]), intercept=float(coef[1]),
                   r_squared=r2, n_used=len(kept), excluded=excluded,
                   reliable=r2 >= 0.98)


# ---------------------------------------------------------------------------
# k grids for the sup estimator
# ---------------------------------------------------------------------------

@dataclass
class KGridSpec:
    """Sup-over-k estimator grid: uniform fold grid, radial ladders, and
    per-epsilon bundles around the critical quasimomentum scales."""

    per_axis: int = 32
    radial_per_direction: int = 64
    directions: int | None = None        # unit-direction count (2D: angles)
    radial_depth: float = 12.0           # radial ladder reaches r0 * 2^-depth
    bundle_points: int = 32
    bundle_span: tuple = (0.55, 1.7)
    include_uniform: bool = True

    def describe(self) -> dict:
        return {
            "per_axis": self.per_axis,
            "radial_per_direction": self.radial_per_direction,
            "directions": self.directions,
            "radial_depth": self.radial_depth,
            "bundle_points": self.bundle_points,
            "bundle_span": list(self.bundle_span),
        }


def _grid_directions(lattice: LatticeInfo, spec: KGridSpec) -> np.ndarray:
    count = spec.directions
    if count is None:
        count = {1: 2, 2: 8, 3: 26}[lattice.dimension]
    return unit_directions(lattice.dimension, count)


def base_k_points(lattice: LatticeInfo, spec: KGridSpec) -> list[np.ndarray]:
    """Uniform folded grid plus radial geometric ladders (k = 0 dropped:
    every fiber error vanishes there by construction)."""
    pts: list[np.ndarray] = []
    if spec.include_uniform and spec.per_axis > 1:
        pts.extend(brillouin_uniform(lattice, spec.per_axis))
    ts = lattice.r0 * 2.0 ** (-np.linspace(1e-4, spec.radial_depth,
                                           spec.radial_per_direction))
    for theta in _grid_directions(lattice, spec):
        pts.extend(t * theta for t in ts)
    out, seen = [], set()
    for k in pts:
        key = tuple(np.round(np.asarray(k, dtype=float), 12))
        if key not in seen and np.linalg.norm(k) > 1e-13:
            seen.add(key)
            out.append(np.asarray(k, dtype=float))
    return out


def critical_scales(germ: GermExpansion, epsilon: float, tau: float) -> list[float]:
    """Critical |k| values of the lower-bound constructions for one
    direction: quadratic scale per branch with cubic coefficient mu != 0,
    cubic scale per branch with mu = 0 but quartic coefficient nu != 0."""
    out = []
    if germ.mu is None or germ.nu is None or tau == 0.0:
        return out
    for l in range(germ.n):
        gamma = germ.gamma[l]
        mu, nu = germ.mu[l], germ.nu[l]
        if abs(mu) > MU_ZERO_TOL * max(1.0, gamma):
            c_flat = np.sqrt(np.pi / 2.0) * gamma ** 0.25 / np.sqrt(abs(mu))
            out.append(c_flat * np.sqrt(epsilon / abs(tau)))
        elif abs(nu) > MU_ZERO_TOL * max(1.0, gamma):
            c = (2.0 * np.pi) ** (1 / 3) * gamma ** (1 / 6) / abs(nu * tau) ** (1 / 3)
            out.append(c * epsilon ** (1 / 3))
    return out


def bundle_k_points(lattice: LatticeInfo, spec: KGridSpec,
                    germs: dict | None, epsilon: float, taus,
                    directions=None) -> list[np.ndarray]:
    """Per-epsilon bundle points: around every critical scale predicted by
    the threshold coefficients, and around the smoothing crossover |k| ~
    epsilon where the weight transitions."""
    pts = []
    xs = np.linspace(spec.bundle_span[0], spec.bundle_span[1], spec.bundle_points)
    for theta_key, germ in (germs or {}).items():
        theta = np.asarray(theta_key, dtype=float)
        for tau in taus:
            for scale in critical_scales(germ, epsilon, tau):
                for x in xs:
                    t = x * scale
                    if 0 < t <= lattice.r0 * (1.0 - 1e-9):
                        pts.append(t * theta)
    if directions is None and germs:
        directions = [np.asarray(t, dtype=float) for t in germs]
    if directions is not None and spec.bundle_points > 0:
        for theta in directions:
            for x in np.geomspace(0.25, 8.0, spec.bundle_points):
                t = x * epsilon
                if 0 < t <= lattice.r0 * (1.0 - 1e-9):
                    pts.append(t * np.asarray(theta, dtype=float))
    return pts


# ---------------------------------------------------------------------------
# operator-norm error studies
# ---------------------------------------------------------------------------

@dataclass
class ErrorStudyReport:
    """Sup-over-k fiber errors on an (eps, tau, s) grid with fitted rates.

    ``errors[(eps, tau, s)]`` is the estimated sup (sin-based variants
    carry the epsilon factor of the scaled operator identity, so every
    entry is directly the physical operator-norm estimate).
    """

    scenario: str
    variant: str
    cutoff: int
    grid: dict
    eps_ladder: list
    taus: list
    ss: list
    errors: dict = field(default_factory=dict)
    argmax_k: dict = field(default_factory=dict)
    slopes: dict = field(default_factory=dict)
    monotone: dict = field(default_factory=dict)
    regime: str | None = None

    def rows(self) -> list[dict]:
        out = []
        for (eps, tau, s), err in sorted(self.errors.items()):
            fit = self.slopes.get((tau, s))
            out.append({
                "scenario": self.scenario, "variant": self.variant,
                "eps": eps, "tau": tau, "s": s, "error": err,
                "kmax_at": list(map(float, self.argmax_k[(eps, tau, s)])),
                "slope": None if fit is None else fit.slope,
                "r2": None if fit is None else fit.r_squared,
            })
        return out


def _study_values_for_k(model, cell, k, cutoff, variant, corrector,
                        eps_list, taus, ss):
    """All requested cell values at one quasimomentum.

    The unsmoothed error matrix is built once per (eps, tau) and the
    smoothing diagonal is applied per s before taking the spectral norm.
    """
    ws = FiberWorkspace(model=model, cell=cell, k=np.asarray(k, dtype=float),
                        cutoff=cutoff)
    vals = np.empty((len(eps_list), len(taus), len(ss)))
    for ie, eps in enumerate(eps_list):
        for it, tau in enumerate(taus):
            req0 = FiberErrorRequest(variant, epsilon=eps, tau=tau, s=0.0,
                                     corrector=corrector)
            base = fiber_error_matrix(ws, req0)
            spec = ws.weighted if ws.weighted is not None else ws.plain
            for is_, s in enumerate(ss):
                w = smoothing_diag(ws.k, eps, s, spec.index_set,
                                   model.lattice, model.symbol.n)
                vals[ie, it, is_] = float(np.linalg.norm(base * w[None, :], 2))
    return vals


def operator_error_study(model: OperatorModel, cell: CellSolution,
                         eps_ladder, taus, ss, variant: str,
                         kgrid: KGridSpec | None = None,
                         cutoff: int | None = None,
                         germs: dict | None = None,
                         corrector: str = "with_Pi",
                         threads: int = 1,
                         scenario: str = "",
                         regime: str | None = None) -> ErrorStudyReport:
    """Sup-over-k fiber errors over an (eps, tau, s) grid with rate fits.

    ``germs`` maps direction tuples to threshold expansions and is used to
    place per-epsilon sample bundles at the critical quasimomentum scales.
    One radial refinement pass is added near k = 0 when a sup is attained
    in the innermost sampled shell.
    """
    eps_ladder = [float(e) for e in eps_ladder]
    if len(eps_ladder) < 4:
        raise StudyError("epsilon ladder needs at least 4 values")
    if any(e2 >= e1 for e1, e2 in zip(eps_ladder, eps_ladder[1:])):
        raise StudyError("epsilon ladder must be strictly descending")
    ratios = [eps_ladder[i] / eps_ladder[i + 1] for i in range(len(eps_ladder) - 1)]
    if max(ratios) / min(ratios) > 1.2:
        raise StudyError("epsilon ladder must be (close to) geometric")
    if variant in ("J1_weighted", "J3_weighted", "J_energy_weighted") and model.Q is None:
        raise StudyError(f"variant {variant} requires a weight Q in the model")
    taus = [float(t) for t in taus]
    ss = [float(s) for s in ss]
    if kgrid is None:
        kgrid = KGridSpec()
    if cutoff is None:
        cutoff = cell.cutoff

    base = base_k_points(model.lattice, kgrid)
    grid_dirs = _grid_directions(model.lattice, kgrid)
    bundles = {e: bundle_k_points(model.lattice, kgrid, germs, e, taus,
                                  directions=grid_dirs)
               for e in eps_ladder}

    report = ErrorStudyReport(scenario=scenario, variant=variant, cutoff=cutoff,
                              grid=kgrid.describe(), eps_ladder=eps_ladder,
                              taus=taus, ss=ss, regime=regime)

    def eval_points(points, eps_subset):
        """(values, argmax bookkeeping) for a list of k points."""
        def task(k):
            return _study_values_for_k(model, cell, k, cutoff, variant,
                                       corrector, eps_subset, taus, ss)
        if threads > 1 and len(points) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(task, points))
        else:
            results = [task(k) for k in points]
        return results

    best = {}
    best_k = {}

    def absorb(points, eps_subset, results):
        for k, vals in zip(points, results):
            for ie, eps in enumerate(eps_subset):
                for it, tau in enumerate(taus):
                    for is_, s in enumerate(ss):
                        key = (eps, tau, s)
                        v = vals[ie, it, is_]
                        if v > best.get(key, -1.0):
                            best[key] = v
                            best_k[key] = np.asarray(k, dtype=float)

    absorb(base, eps_ladder, eval_points(base, eps_ladder))
    for eps in eps_ladder:
        pts = bundles[eps]
        if pts:
            absorb(pts, [eps], eval_points(pts, [eps]))

    # one radial refinement pass near k = 0 where the sup sits innermost
    inner = model.lattice.r0 * 2.0 ** (-kgrid.radial_depth) * 2.0
    refine = {}
    for key, k in best_k.items():
        t = np.linalg.norm(k)
        if t <= inner:
            theta = k / t
            for f in np.geomspace(0.2, 1.0, 8):
                refine.setdefault(key[0], []).append(f * t * theta)
    for eps, pts in refine.items():
        absorb(pts, [eps], eval_points(pts, [eps]))

    scale_eps = variant in SINC_SCALED_VARIANTS
    for (eps, tau, s), v in best.items():
        report.errors[(eps, tau, s)] = v * (eps if scale_eps else 1.0)
        report.argmax_k[(eps, tau, s)] = best_k[(eps, tau, s)]

    for tau in taus:
        for s in ss:
            series = [(e, report.errors[(e, tau, s)]) for e in eps_ladder]
            vals = [v for _, v in series]
            report.monotone[(tau, s)] = all(b <= a * (1 + 1e-9)
                                            for a, b in zip(vals, vals[1:]))
            if max(vals) < 1e-13:
                # roundoff-level series: the approximation is exact
                report.slopes[(tau, s)] = None
                continue
            try:
                report.slopes[(tau, s)] = rate_fit(series)
            except StudyError:
                report.slopes[(tau, s)] = None
    return report


# ---------------------------------------------------------------------------
# sharpness probes
# ---------------------------------------------------------------------------

@dataclass
class SharpnessTrace:
    order: str
    s: float
    tau: float
    branch: int
    eps: np.ndarray
    t_of_eps: np.ndarray
    values: np.ndarray

    @property
    def ratio(self) -> float:
        return float(np.max(self.values) / np.min(self.values))


def critical_scale(germ: GermExpansion, branch: int, tau: float,
                   epsilon: float, order: str) -> float:
    gamma = germ.gamma[branch]
    if order == "cubic":
        nu = germ.nu[branch]
        return float((2 * np.pi) ** (1 / 3) * gamma ** (1 / 6)
                     * abs(nu * tau) ** (-1 / 3) * epsilon ** (1 / 3))
    if order == "quadratic":
        mu = germ.mu[branch]
        return float(np.sqrt(np.pi / 2) * gamma ** 0.25
                     * abs(mu) ** (-0.5) * (epsilon / abs(tau)) ** 0.5)
    raise StudyError(f"unknown probe order {order!r}")


def sharpness_probe(model: OperatorModel, cell: CellSolution,
                    germ: GermExpansion, branch: int, theta, tau: float,
                    eps_ladder, order: str, s: float,
                    cutoff: int | None = None) -> SharpnessTrace:
    """Propagator discrepancy along the critical quasimomentum scaling.

    Per epsilon the probe samples the fiber band at exactly the critical
    |k| and reports |cos at band - cos at limit slope| * eps^s
    (t^2+eps^2)^{-s/2} / eps.  A growing trace at low smoothing order and a
    bounded one at the threshold order are the sharpness signature.
    """
    from .fiber import lowest_bands

    if germ.mu is None or germ.nu is None:
        raise StudyError("probe needs a germ expansion with mu and nu")
    if cutoff is None:
        cutoff = cell.cutoff
    theta = np.asarray(theta, dtype=float)
    rep = model.require_validation()
    gamma = germ.gamma[branch]
    mu, nu = germ.mu[branch], germ.nu[branch]
    scale = max(1.0, gamma)
    if order == "cubic":
        if abs(mu) > MU_ZERO_TOL * scale:
            raise StudyError(
                f"cubic probe requires a vanishing cubic band coefficient; "
                f"branch has mu = {mu:.3e}")
        if abs(nu) <= MU_ZERO_TOL * scale:
            raise StudyError("cubic probe requires a nonzero quartic coefficient")
    elif order == "quadratic":
        if abs(mu) <= MU_ZERO_TOL * scale:
            raise StudyError("quadratic probe requires a nonzero cubic coefficient")
    else:
        raise StudyError(f"unknown probe order {order!r}")

    eps = np.asarray(sorted(eps_ladder, reverse=True), dtype=float)
    ts = np.array([critical_scale(germ, branch, tau, e, order) for e in eps])
    if np.max(ts) > rep.t0 + 1e-12:
        raise StudyError(
            f"critical scale t(eps) = {np.max(ts):.4g} exceeds the threshold "
            f"radius t0 = {rep.t0:.4g}; the probe asymptotics are valid only "
            "inside the threshold ball")

    values = np.empty(eps.size)
    for i, (e, t) in enumerate(zip(eps, ts)):
        vals, _ = lowest_bands(model, t * theta, cutoff, branch + 1)
        lam = vals[branch]
        a = np.cos(tau / e * np.sqrt(lam))
        b = np.cos(tau / e * t * np.sqrt(gamma))
        values[i] = abs(a - b) * e ** s * (t ** 2 + e ** 2) ** (-s / 2) / e
    return SharpnessTrace(order=order, s=s, tau=tau, branch=branch,
                          eps=eps, t_of_eps=ts, values=values)


def tuned_epsilon_ladder(germ: GermExpansion, branch: int, tau: float,
                         order: str, count: int, t_max: float,
                         t_min_factor: float = 0.05) -> np.ndarray:
    """Epsilon sequence with the probe phase locked at its extremum.

    Cubic order: eps_k = alpha^{3/2} (2 pi k)^{-3/2} with
    alpha = (2 pi)^{1/3} gamma^{2/3} |tau|^{2/3} |nu|^{-1/3}; quadratic
    order: eps_k = gamma c_flat^2 |tau| (2 pi k + pi/2)^{-2}.  Returns
    ``count`` geometrically spread admissible values whose critical scale
    stays below t_max.
    """
    gamma = germ.gamma[branch]
    if order == "cubic":
        nu = germ.nu[branch]
        alpha = ((2 * np.pi) ** (1 / 3) * gamma ** (2 / 3)
                 * abs(tau) ** (2 / 3) * abs(nu) ** (-1 / 3))
        def eps_of(k):
            return alpha ** 1.5 * (2 * np.pi * k) ** -1.5
        def t_of(e):
            return critical_scale(germ, branch, tau, e, "cubic")
    elif order == "quadratic":
        mu = germ.mu[branch]
        c_flat = np.sqrt(np.pi / 2) * gamma ** 0.25 * abs(mu) ** -0.5
        def eps_of(k):
            return gamma * c_flat ** 2 * abs(tau) * (2 * np.pi * k + np.pi / 2) ** -2
        def t_of(e):
            return critical_scale(germ, branch, tau, e, "quadratic")
    else:
        raise StudyError(f"unknown probe order {order!r}")

    k = 1
    while t_of(eps_of(k)) > t_max:
        k += 1
        if k > 10 ** 8:
            raise StudyError("no admissible tuned epsilon found")
    k_lo = k
    k_hi = k_lo
    while t_of(eps_of(k_hi)) > t_max * t_min_factor and k_hi < 10 ** 8:
        k_hi *= 2
    ks = np.unique(np.round(np.geomspace(k_lo, k_hi, count)).astype(int))
    return np.array([eps_of(int(kk)) for kk in ks])


# ---------------------------------------------------------------------------
# Cauchy problems on the unit torus
# ---------------------------------------------------------------------------

@dataclass
class CauchyData:
    """Band-limited torus data: maps of integer multi-index -> C^n vector.

    ``rho`` carries d stacked blocks of length n (divergence-form initial
    velocity); ``forcing`` is piecewise constant in time: a list of
    (t_end, coefficient map) entries covering [0, tau]; ``forcing_div``
    likewise for the divergence-form source.
    """

    phi: dict | None = None
    psi: dict | None = None
    rho: dict | None = None
    forcing: list | None = None
    forcing_div: list | None = None

    def bandwidth(self) -> int:
        bw = 0
        for data in (self.phi, self.psi, self.rho):
            if data:
                bw = max(bw, max(max(abs(x) for x in m) for m in data))
        for lst in (self.forcing, self.forcing_div):
            for _, data in lst or []:
                if data:
                    bw = max(bw, max(max(abs(x) for x in m) for m in data))
        return bw


@dataclass
class CauchyResult:
    epsilon: float
    tau_grid: np.ndarray
    norms: dict                         # name -> array over tau_grid
    energy: np.ndarray                  # conserved quadratic form per tau
    energy_drift: float
    box_cutoff: int

    def final(self, name: str) -> float:
        return float(self.norms[name][-1])


class TorusOperator:
    """Galerkin matrices of the oscillatory operator on the unit torus.

    With epsilon = 1/M the coefficients g(x/eps) couple torus modes whose
    index difference is M times a coefficient mode, so the matrix is
    block-sparse over cosets; it is assembled dense and eigen-decomposed
    once.
    """

    def __init__(self, model: OperatorModel, M: int, box_cutoff: int):
        if box_cutoff < M * model.g.bandwidth():
            raise StudyError(
                f"box cutoff {box_cutoff} cannot resolve the oscillatory "
                f"coefficient (needs >= {M * model.g.bandwidth()})")
        self.model = model
        self.M = M
        self.iset = build_index_set(box_cutoff, model.lattice.dimension)
        self.n = model.symbol.n
        pts = self.iset.dual_points(model.lattice)
        mats = np.stack(model.symbol.matrices, axis=0)
        self.bmats = np.tensordot(pts, mats, axes=(1, 0))
        self.dim = len(self.iset) * self.n
        self._dual_pts = pts

    def oscillatory_matrix(self) -> np.ndarray:
        count, n = len(self.iset), self.n
        out = np.zeros((count, n, count, n), dtype=complex)
        idx = self.iset.indices
        for p, gp in self.model.g.coeffs.items():
            shifted = idx + self.M * np.asarray(p, dtype=int)
            left = self.bmats.conj().transpose(0, 2, 1) @ gp[None, :, :]
            for j in range(count):
                i = self.iset.position.get(tuple(shifted[j]))
                if i is not None:
                    out[i, :, j, :] += left[i] @ self.bmats[j]
        mat = out.reshape(self.dim, self.dim)
        return 0.5 * (mat + mat.conj().T)

    def effective_matrix(self, g_eff: np.ndarray) -> np.ndarray:
        count, n = len(self.iset), self.n
        out = np.zeros((count, n, count, n), dtype=complex)
        blocks = self.bmats.conj().transpose(0, 2, 1) @ g_eff[None, :, :] @ self.bmats
        for i in range(count):
            out[i, :, i, :] = blocks[i]
        mat = out.reshape(self.dim, self.dim)
        return 0.5 * (mat + mat.conj().T)

    def multiplier_matrix(self, fld: PeriodicMatrixFunction) -> np.ndarray:
        """Multiplication by fld(x/eps) as a torus Galerkin matrix."""
        count, n = len(self.iset), self.n
        out = np.zeros((count, n, count, n), dtype=complex)
        idx = self.iset.indices
        for p, c in fld.coeffs.items():
            shifted = idx + self.M * np.asarray(p, dtype=int)
            for j in range(count):
                i = self.iset.position.get(tuple(shifted[j]))
                if i is not None:
                    out[i, :, j, :] = c
        return out.reshape(self.dim, self.dim)

    def vector_from_map(self, data: dict | None) -> np.ndarray:
        v = np.zeros(self.dim, dtype=complex)
        if data:
            for m, vec in data.items():
                i = self.iset.ordinal(m)
                if i is None:
                    raise StudyError(f"data mode {m} outside the box cutoff")
                v[i * self.n:(i + 1) * self.n] = np.asarray(vec, dtype=complex)
        return v

    def divergence_vector(self, data: dict | None) -> np.ndarray:
        """Coefficients of D^* rho for stacked rho blocks."""
        v = np.zeros(self.dim, dtype=complex)
        if data:
            d = self.model.lattice.dimension
            for m, vec in data.items():
                i = self.iset.ordinal(m)
                if i is None:
                    raise StudyError(f"data mode {m} outside the box cutoff")
                vec = np.asarray(vec, dtype=complex).reshape(d, self.n)
                xi = self._dual_pts[i]
                v[i * self.n:(i + 1) * self.n] = xi @ vec
        return v

    def zone_mask(self) -> np.ndarray:
        """Modes whose scaled frequency eps*b(j) lies in the closed zone."""
        lat = self.model.lattice
        mask = np.array([lat.in_zone(p / self.M) for p in self._dual_pts])
        return np.repeat(mask, self.n)

    def h_weights(self, order: float = 1.0) -> np.ndarray:
        w = (1.0 + np.sum(self._dual_pts ** 2, axis=1)) ** (order / 2.0)
        return np.repeat(w, self.n)


def _sinc_vals(tau, lam):
    return tau * np.sinc(tau * np.sqrt(lam) / np.pi)


def _duhamel_coeffs(tau, lam, breaks):
    """Per-eigenvalue weights of int_0^tau sin((tau-s) sqrt(lam))/sqrt(lam)
    over piecewise-constant source intervals, computed exactly."""
    out = []
    prev = 0.0
    for t_end in breaks:
        hi = min(float(t_end), tau)
        if hi <= prev:
            out.append(np.zeros_like(lam))
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(lam > 0,
                         (np.cos((tau - hi) * np.sqrt(lam))
                          - np.cos((tau - prev) * np.sqrt(lam))) / np.where(lam > 0, lam, 1.0),
                         0.5 * ((tau - prev) ** 2 - (tau - hi) ** 2))
        out.append(w)
        prev = hi
    return out


def cauchy_solve(model: OperatorModel, cell: CellSolution, epsilon: float,
                 data: CauchyData, tau_grid, box_cutoff: int,
                 with_correctors: bool = True) -> CauchyResult:
    """Propagate torus Cauchy data by eigen-decomposition and compare with
    the homogenized and corrector-equipped approximations.

    Requires epsilon = 1/M with integer M so the oscillatory coefficient is
    exactly periodic on the torus.  Tracked norms: solution error in L2 and
    H1 against the homogenized solution, H1 error against the first-order
    approximation (with and without the frequency cutoff in the corrector),
    and the flux error.
    """
    M = round(1.0 / epsilon)
    if abs(M * epsilon - 1.0) > 1e-12:
        raise StudyError(f"epsilon = {epsilon} is not the reciprocal of an integer")
    if data.bandwidth() > box_cutoff:
        raise StudyError("data bandwidth exceeds the box cutoff")
    tau_grid = np.asarray(tau_grid, dtype=float)

    box = TorusOperator(model, M, box_cutoff)
    n = box.n
    vol = model.lattice.cell_volume

    weighted = model.Q is not None
    osc = box.oscillatory_matrix()
    if weighted:
        f_field = weight_factor_field(model, max(2, int(np.ceil(box_cutoff / M))))
        fmat = box.multiplier_matrix(f_field)
        osc = fmat.conj().T @ osc @ fmat
        osc = 0.5 * (osc + osc.conj().T)
    lam, vec = scipy.linalg.eigh(osc)
    lam = np.maximum(lam, 0.0)

    f0 = model.f0()
    g_eff = cell.g_eff
    eff = box.effective_matrix(g_eff)
    if weighted:
        f0m = np.kron(np.eye(len(box.iset)), f0)
        eff = f0m @ eff @ f0m
    lam0, vec0 = scipy.linalg.eigh(eff)
    lam0 = np.maximum(lam0, 0.0)

    phi = box.vector_from_map(data.phi)
    psi = box.vector_from_map(data.psi) + box.divergence_vector(data.rho)
    if weighted:
        # solve for z = f^{-eps} u; data transform uses the factor matrices
        finv_field = weight_factor_field(model, max(2, int(np.ceil(box_cutoff / M))),
                                         inverse=True)
        finv = box.multiplier_matrix(finv_field)
        phi_z, psi_z = finv @ phi, finv @ psi
    else:
        fmat = finv = None
        phi_z, psi_z = phi, psi

    breaks = [t for t, _ in (data.forcing or [])]
    f_vecs = [box.vector_from_map(m) for _, m in (data.forcing or [])]
    breaks_div = [t for t, _ in (data.forcing_div or [])]
    g_vecs = [box.divergence_vector(m) for _, m in (data.forcing_div or [])]

    c_phi = vec.conj().T @ phi_z
    c_psi = vec.conj().T @ psi_z
    if weighted:
        f0invm = np.kron(np.eye(len(box.iset)), np.linalg.inv(f0))
        c0_phi = vec0.conj().T @ (f0invm @ phi)
        c0_psi = vec0.conj().T @ (f0invm @ psi)
    else:
        f0m = f0invm = None
        c0_phi = vec0.conj().T @ phi
        c0_psi = vec0.conj().T @ psi

    zone = box.zone_mask()
    hw1 = box.h_weights(1.0)

    # corrector convolution: maps torus coefficients of b(D) u0 (m-vector
    # per mode) to n-vector coefficients of corrector(x/eps) * input
    def corrector_apply(w_modes):
        out = np.zeros(box.dim, dtype=complex)
        for p, cmat in cell.corrector.coeffs.items():
            shift = box.M * np.asarray(p, dtype=int)
            for j in range(len(box.iset)):
                i = box.iset.position.get(tuple(box.iset.indices[j] + shift))
                if i is not None:
                    out[i * n:(i + 1) * n] += cmat @ w_modes[j]
        return out

    def flux_apply(fld, w_modes):
        out = np.zeros((len(box.iset), model.symbol.m), dtype=complex)
        for p, cmat in fld.coeffs.items():
            shift = box.M * np.asarray(p, dtype=int)
            for j in range(len(box.iset)):
                i = box.iset.position.get(tuple(box.iset.indices[j] + shift))
                if i is not None:
                    out[i] += cmat @ w_modes[j]
        return out

    def l2(vecflat):
        return float(np.sqrt(vol * np.sum(np.abs(vecflat) ** 2)))

    names = ["l2_vs_hom", "h1_vs_hom", "h1_vs_corrector", "h1_vs_corrector_nocut",
             "flux_error"]
    norms = {name: np.zeros(tau_grid.size) for name in names}
    energies = np.zeros(tau_grid.size)

    for i_tau, tau in enumerate(tau_grid):
        cos_c = np.cos(tau * np.sqrt(lam))
        sinc_c = _sinc_vals(tau, lam)
        z_tau = vec @ (cos_c * c_phi + sinc_c * c_psi)
        dz_tau = vec @ (-np.sqrt(lam) * np.sin(tau * np.sqrt(lam)) * c_phi
                        + np.cos(tau * np.sqrt(lam)) * c_psi)
        if f_vecs:
            for w, fv in zip(_duhamel_coeffs(tau, lam, breaks), f_vecs):
                z_tau += vec @ (w * (vec.conj().T @ (finv @ fv if weighted else fv)))
        if g_vecs:
            for w, gv in zip(_duhamel_coeffs(tau, lam, breaks_div), g_vecs):
                z_tau += vec @ (w * (vec.conj().T @ (fmat.conj().T @ gv if weighted else gv)))

        cos0 = np.cos(tau * np.sqrt(lam0))
        sinc0 = _sinc_vals(tau, lam0)
        z0_tau = vec0 @ (cos0 * c0_phi + sinc0 * c0_psi)
        if f_vecs:
            for w, fv in zip(_duhamel_coeffs(tau, lam0, breaks), f_vecs):
                rhs = f0invm @ fv if weighted else fv
                z0_tau += vec0 @ (w * (vec0.conj().T @ rhs))
        if g_vecs:
            for w, gv in zip(_duhamel_coeffs(tau, lam0, breaks_div), g_vecs):
                rhs = f0m @ gv if weighted else gv
                z0_tau += vec0 @ (w * (vec0.conj().T @ rhs))

        u_tau = fmat @ z_tau if weighted else z_tau
        u0_tau = (f0m @ z0_tau) if weighted else z0_tau

        norms["l2_vs_hom"][i_tau] = l2(u_tau - u0_tau)
        norms["h1_vs_hom"][i_tau] = l2(hw1 * (u_tau - u0_tau))

        energies[i_tau] = float(np.sum(np.abs(dz_tau) ** 2)
                                + np.sum(lam * np.abs(vec.conj().T @ z_tau) ** 2)) * vol

        if with_correctors:
            u0_modes = u0_tau.reshape(len(box.iset), n)
            w_all = np.einsum("imn,in->im", box.bmats, u0_modes)
            w_cut = np.einsum("imn,in->im", box.bmats,
                              (u0_tau * zone).reshape(len(box.iset), n))
            v_corr = u0_tau + epsilon * corrector_apply(w_cut)
            v_nocut = u0_tau + epsilon * corrector_apply(w_all)
            norms["h1_vs_corrector"][i_tau] = l2(hw1 * (u_tau - v_corr))
            norms["h1_vs_corrector_nocut"][i_tau] = l2(hw1 * (u_tau - v_nocut))

            u_modes = u_tau.reshape(len(box.iset), n)
            flux_true = flux_apply(model.g, np.einsum("imn,in->im", box.bmats, u_modes))
            flux_approx = flux_apply(cell.flux, w_cut)
            norms["flux_error"][i_tau] = l2((flux_true - flux_approx).reshape(-1))

    drift = 0.0
    if energies[0] > 0:
        drift = float(np.max(np.abs(energies - energies[0])) / energies[0])
    return CauchyResult(epsilon=epsilon, tau_grid=tau_grid, norms=norms,
                        energy=energies, energy_drift=drift,
                        box_cutoff=box_cutoff)


# ---------------------------------------------------------------------------
# leapfrog oracle
# ---------------------------------------------------------------------------

def leapfrog_oracle(model: OperatorModel, epsilon: float, data: CauchyData,
                    tau_end: float, dt: float, grid_per_axis: int,
                    mode_filter: int | None = None):
    """Explicit central-difference integration on a real-space torus grid.

    The spatial operator applies the symbol spectrally (FFT) and the
    coefficient pointwise; an optional mode filter truncates to the same
    Fourier box as the eigen-decomposition route for matched-discretization
    comparisons.  Returns (grid solution at tau_end, relative energy drift).
    """
    M = round(1.0 / epsilon)
    if abs(M * epsilon - 1.0) > 1e-12:
        raise StudyError("epsilon must be the reciprocal of an integer")
    d = model.lattice.dimension
    P = grid_per_axis
    rep = model.require_validation()
    h = min(np.linalg.norm(model.lattice.basis[j]) for j in range(d)) / P
    q_min = 1.0 / rep.q_inv_norm if rep.q_inv_norm else 1.0
    cfl = 0.5 * h / np.sqrt(rep.g_norm / q_min)
    if dt > cfl:
        raise StudyError(f"dt = {dt} violates the CFL bound {cfl:.3e}")

    fracs = fractional_grid(d, P)
    osc_fracs = np.mod(M * fracs, 1.0)
    g_samples = model.g.evaluate_fractional(osc_fracs).reshape(*([P] * d),
                                                               model.symbol.m,
                                                               model.symbol.m)
    if model.Q is not None:
        q_samples = model.Q.evaluate_fractional(osc_fracs)
        q_inv = np.linalg.inv(q_samples).reshape(*([P] * d), model.symbol.n,
                                                 model.symbol.n)
    else:
        q_inv = None

    freqs = np.fft.fftfreq(P, d=1.0 / P)          # integer mode numbers
    mode_axes = np.meshgrid(*([freqs] * d), indexing="ij")
    modes = np.stack(mode_axes, axis=-1)          # (..., d) integers
    dual = modes @ model.lattice.dual_basis       # b(j) at every FFT bin
    mats = np.stack(model.symbol.matrices, axis=0)
    bsym = np.tensordot(dual, mats, axes=(-1, 0))  # (..., m, n)
    if mode_filter is not None:
        keep = np.all(np.abs(modes) <= mode_filter, axis=-1)
    else:
        keep = None

    axes = tuple(range(d))

    def to_modes(u):
        return np.fft.fftn(u, axes=axes)

    def to_grid(uh):
        return np.fft.ifftn(uh, axes=axes)

    def filt(uh):
        if keep is None:
            return uh
        return uh * keep[..., None]

    def apply_op(u):
        uh = filt(to_modes(u))
        w = to_grid(np.einsum("...mn,...n->...m", bsym, uh))
        fw = np.einsum("...ab,...b->...a", g_samples, w)
        yh = np.einsum("...mn,...m->...n", bsym.conj(), filt(to_modes(fw)))
        y = to_grid(yh)
        if q_inv is not None:
            y = np.einsum("...ab,...b->...a", q_inv, y)
        return y

    def field_from_map(mp, blocks=1):
        out = np.zeros((*([P] * d), blocks * model.symbol.n), dtype=complex)
        if mp:
            for m, vecv in mp.items():
                phase = np.exp(2j * np.pi * (fracs @ np.asarray(m, dtype=float)))
                out += phase.reshape(*([P] * d), 1) * np.asarray(vecv, dtype=complex)
        return out

    u0 = field_from_map(data.phi)
    v0 = field_from_map(data.psi)
    if data.rho:
        rho = field_from_map(data.rho, blocks=d).reshape(*([P] * d), d,
                                                         model.symbol.n)
        rho_h = np.fft.fftn(rho, axes=axes)
        v0 += to_grid(np.einsum("...k,...kn->...n", dual, rho_h))
    if data.forcing or data.forcing_div:
        raise StudyError("leapfrog oracle supports source-free data only")

    steps = int(round(tau_end / dt))
    if abs(steps * dt - tau_end) > 1e-12:
        raise StudyError("tau_end must be an integer number of steps")
    acc0 = -apply_op(u0)
    u_prev = u0
    u_cur = u0 + dt * v0 + 0.5 * dt ** 2 * acc0

    def energy(ua, ub):
        vel = (ub - ua) / dt
        mid = 0.5 * (ua + ub)
        uh = filt(to_modes(mid))
        w = to_grid(np.einsum("...mn,...n->...m", bsym, uh))
        strain = np.einsum("...ab,...b->...a", g_samples, w)
        kin = np.sum(np.abs(vel) ** 2)
        if q_inv is not None:
            qs = np.linalg.inv(q_inv.reshape(-1, model.symbol.n, model.symbol.n))
            velf = vel.reshape(-1, model.symbol.n)
            kin = float(np.real(np.einsum("ia,iab,ib->", velf.conj(), qs, velf)))
        pot = float(np.real(np.sum(strain.conj() * w)))
        return (kin + pot) / P ** d

    e0 = energy(u_prev, u_cur)
    e_max_dev = 0.0
    for _ in range(steps - 1):
        u_next = 2.0 * u_cur - u_prev - dt ** 2 * apply_op(u_cur)
        u_prev, u_cur = u_cur, u_next
        e = energy(u_prev, u_cur)
        if e0 > 0:
            e_max_dev = max(e_max_dev, abs(e - e0) / e0)
    return u_cur, e_max_dev


def grid_to_coefficients(u_grid: np.ndarray, cutoff: int, dimension: int) -> dict:
    """Torus-grid samples to a coefficient map below the cutoff."""
    P = u_grid.shape[0]
    n = u_grid.shape[-1]
    hat = np.fft.fftn(u_grid, axes=tuple(range(dimension))) / P ** dimension
    out = {}
    for m in itertools.product(range(-cutoff, cutoff + 1), repeat=dimension):
        vec = hat[tuple(mi % P for mi in m)]
        out[m] = vec
    return out


def coefficients_to_vector(coeff_map: dict, iset, n: int) -> np.ndarray:
    v = np.zeros(len(iset) * n, dtype=complex)
    for m, vecv in coeff_map.items():
        i = iset.ordinal(m)
        if i is not None:
            v[i * n:(i + 1) * n] = vecv
    return v
