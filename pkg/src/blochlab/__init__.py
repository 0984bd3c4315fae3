"""Numerical laboratory for periodic homogenization of hyperbolic systems.

Cell problems and effective matrices, Bloch-fiber spectra and propagator
error norms, direction-resolved threshold expansions, convergence-rate
studies with sharpness probes, and torus Cauchy problems with corrector
approximations.
"""

__version__ = "0.1.0"

from .lattice import (FourierIndexSet, LatticeInfo, LatticeError,
                      brillouin_sample, build_index_set, build_lattice,
                      unit_directions)
from .coefficients import (OperatorModel, PeriodicMatrixFunction, SymbolB,
                           ValidationReport, evaluate_on_grid, validate_model)
from .cell import (CellSolution, SecondOrderCorrector, WeightedCorrector,
                   solve_corrector, solve_second_corrector, voigt_reuss,
                   weighted_corrector)
from .fiber import (FiberErrorRequest, FiberSpectrum, FiberWorkspace,
                    assemble_fiber, corrector_multiplier, effective_fiber,
                    fiber_error_norm, fiber_propagator, smoothing_diag)
from .germ import (GermExpansion, RegimeReport, band_fit_expansion,
                   diagonal_part, fourth_order_operator, germ_matrix,
                   rate_exponents, regime_classify, third_order_matrix,
                   weighted_third_order_matrix)
from .study import (CauchyData, CauchyResult, ErrorStudyReport, KGridSpec,
                    RateFit, cauchy_solve, leapfrog_oracle,
                    operator_error_study, rate_fit, sharpness_probe,
                    tuned_epsilon_ladder)
from .scenarios import BUILTIN_NAMES, Scenario, builtin

__all__ = [name for name in dir() if not name.startswith("_")]
