"""Wave propagation on the torus: homogenized vs corrector approximations.

Solves the oscillatory Cauchy problem by eigen-decomposition for a ladder
of scale ratios, cross-checks one run against the leapfrog oracle, and
shows that the corrector is what restores energy-norm convergence.
"""

import numpy as np

from blochlab import builtin, cauchy_solve, leapfrog_oracle, rate_fit, solve_corrector
from blochlab.study import TorusOperator, coefficients_to_vector, grid_to_coefficients

sc = builtin("model1d")
cell = solve_corrector(sc.model, sc.cutoff)
taus = [0.25, 0.5, 0.75, 1.0]

series = {"l2_vs_hom": [], "h1_vs_hom": [], "h1_vs_corrector": [],
          "flux_error": []}
for eps in sc.cauchy_eps:
    M = round(1 / eps)
    res = cauchy_solve(sc.model, cell, eps, sc.cauchy, taus,
                       box_cutoff=max(8 * M, 64))
    line = f"eps = 1/{M:2d}:"
    for name in series:
        val = float(np.max(res.norms[name]))
        series[name].append((eps, val))
        line += f"  {name} {val:.3e}"
    print(line + f"  (energy drift {res.energy_drift:.1e})")

print("\nfitted slopes over the epsilon ladder:")
for name, pairs in series.items():
    fit = rate_fit(pairs)
    print(f"  {name:18s} slope {fit.slope:+.3f} (R^2 {fit.r_squared:.3f})")
print("  -> the plain homogenized solution stalls in the energy norm; the")
print("     corrector restores first-order convergence, as does the flux.")

print("\ncross-check against the leapfrog oracle at eps = 1/16:")
M, J = 16, 128
u_grid, drift = leapfrog_oracle(sc.model, 1 / M, sc.cauchy, 1.0,
                                dt=1.25e-4, grid_per_axis=512, mode_filter=J)
box = TorusOperator(sc.model, M, J)
lam, vec = np.linalg.eigh(box.oscillatory_matrix())
lam = np.maximum(lam, 0)
psi_vec = box.vector_from_map(sc.cauchy.psi)
u_eig = vec @ (np.sinc(np.sqrt(lam) / np.pi) * (vec.conj().T @ psi_vec))
got = coefficients_to_vector(grid_to_coefficients(u_grid, J, 1), box.iset, 1)
err = np.sqrt(np.sum(np.abs(u_eig - got) ** 2))
print(f"  route difference in L2: {err:.2e} (leapfrog energy drift {drift:.1e})")
