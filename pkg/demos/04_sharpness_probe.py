"""Sharpness signature of the rate thresholds.

Along the phase-locked epsilon sequence of the lower-bound construction,
the normalized propagator discrepancy grows without bound below the
threshold smoothing order and stays bounded at it.  The probe refuses
epsilon values whose critical quasimomentum leaves the validity ball.
"""

import numpy as np

from blochlab import (band_fit_expansion, builtin, sharpness_probe,
                      solve_corrector, tuned_epsilon_ladder)
from blochlab.study import StudyError

sc = builtin("model1d")
cell = solve_corrector(sc.model, sc.cutoff)
fit = band_fit_expansion(sc.model, cell, [1.0])
t0 = sc.model.validation.t0
print(f"quartic band coefficient: {fit.nu[0]:.6f}; threshold radius t0 = {t0:.4f}")

eps = tuned_epsilon_ladder(fit, 0, 1.0, "cubic", 9, t_max=t0)
print(f"phase-locked ladder: eps in [{eps.min():.3e}, {eps.max():.3e}]")

for s in (1.0, 1.5):
    trace = sharpness_probe(sc.model, cell, fit, 0, [1.0], 1.0, eps, "cubic", s)
    verdict = "grows (signature of unboundedness)" if trace.ratio >= 4 else \
        "bounded"
    print(f"\n  s = {s}: max/min of the normalized trace = {trace.ratio:.2f} "
          f"-> {verdict}")
    for e, t, v in zip(trace.eps, trace.t_of_eps, trace.values):
        print(f"    eps {e:.3e}  t(eps) {t:.4f}  value {v:.5f}")

print("\nout-of-ball request is refused:")
try:
    sharpness_probe(sc.model, cell, fit, 0, [1.0], 1.0,
                    [2.0 ** (-j) for j in range(4, 13)], "cubic", 1.0)
except StudyError as exc:
    print(f"  {exc}")
