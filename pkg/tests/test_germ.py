import numpy as np
import pytest

from blochlab.cell import solve_corrector, solve_second_corrector, weighted_corrector
from blochlab.coefficients import (OperatorModel, PeriodicMatrixFunction,
                                   SymbolB, validate_model)
from blochlab.germ import (GermError, band_fit_expansion, diagonal_part,
                           fourth_order_operator, germ_matrix, rate_exponents,
                           regime_classify, third_order_matrix,
                           weighted_diagonal_part, weighted_third_order_matrix)
from blochlab.lattice import build_lattice, unit_directions


def test_acoustics_germ_is_scalar_form(model1d, cell1d):
    germ = germ_matrix(cell1d, model1d.model, [1.0])
    assert germ.gamma[0] == pytest.approx(np.sqrt(3.0), abs=1e-10)
    assert germ.germ.shape == (1, 1)


def test_elasticity_germ_identity_g():
    lat = build_lattice(np.eye(2))
    b1 = np.array([[1.0, 0.0], [0.0, 0.5], [0.0, 0.0]])
    b2 = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 1.0]])
    g = PeriodicMatrixFunction(3, 3, 2, {(0, 0): np.eye(3)}, hermitian=True)
    model = OperatorModel(lat, SymbolB([b1, b2]), g)
    validate_model(model)
    cell = solve_corrector(model, 4)
    germ = germ_matrix(cell, model, [1.0, 0.0])
    assert np.allclose(germ.gamma, [0.25, 1.0], atol=1e-12)


def test_germ_homogeneity(cell1d, model1d):
    # degree-one symbol makes the germ quadratic in the direction length
    rng = np.random.default_rng(7)
    theta = np.array([1.0])
    base = germ_matrix(cell1d, model1d.model, theta)
    for c in rng.uniform(0.3, 2.5, size=3):
        bt = model1d.model.symbol(c * theta)
        scaled = bt.conj().T @ cell1d.g_eff @ bt
        assert np.allclose(scaled, c ** 2 * base.germ, rtol=1e-12)


def test_band_fit_constant_g_is_exact():
    lat = build_lattice([[1.0]])
    g = PeriodicMatrixFunction(1, 1, 1, {(0,): [[2.0]]}, hermitian=True)
    model = OperatorModel(lat, SymbolB([[[1.0]]]), g)
    validate_model(model)
    cell = solve_corrector(model, 8)
    fit = band_fit_expansion(model, cell, [1.0])
    assert fit.gamma[0] == pytest.approx(2.0, rel=1e-12)
    assert abs(fit.mu[0]) < 1e-12
    assert abs(fit.nu[0]) < 1e-9
    assert fit.fit_residual < 1e-12


def test_band_fit_route_agreement_1d(model1d, cell1d):
    fit = band_fit_expansion(model1d.model, cell1d, [1.0])
    germ = germ_matrix(cell1d, model1d.model, [1.0])
    assert abs(fit.gamma[0] - germ.gamma[0]) <= 1e-8 * germ.gamma[0]
    assert abs(fit.mu[0]) < 1e-8 * max(1.0, germ.gamma[0])
    assert fit.branch_reliable


def test_germ_limit_richardson(model1d, cell1d):
    # lambda_1(t)/t^2 converges to gamma with observed order >= 1 in t
    from blochlab.fiber import assemble_fiber

    gamma = germ_matrix(cell1d, model1d.model, [1.0]).gamma[0]
    ts = np.array([0.1 * 2.0 ** (-j) for j in range(4)])
    errs = np.array([
        abs(assemble_fiber(model1d.model, [t], 16).eigenvalues[0] / t ** 2 - gamma)
        for t in ts])
    orders = np.log2(errs[:-1] / errs[1:])
    assert np.all(orders >= 1.0)


def test_third_order_vanishes_real_case(model1d, cell1d):
    third = third_order_matrix(cell1d, model1d.model, [1.0])
    assert np.max(np.abs(third)) < 1e-12


def test_third_order_matches_band_fit_hermitian(hermitian2d, cell_hermitian):
    model = hermitian2d.model
    for ang in (0.0, 0.7, 2.1):
        theta = [np.cos(ang), np.sin(ang)]
        third = third_order_matrix(cell_hermitian, model, theta)
        germ = germ_matrix(cell_hermitian, model, theta)
        _, mus = diagonal_part(third, germ)
        fit = band_fit_expansion(model, cell_hermitian, theta)
        assert abs(mus[0] - fit.mu[0]) < 1e-6
        assert np.max(np.abs(third)) > 1e-3


def test_third_order_hermitian_and_diagonal_structure(hermitian2d, cell_hermitian):
    theta = [0.6, 0.8]
    third = third_order_matrix(cell_hermitian, hermitian2d.model, theta)
    assert np.allclose(third, third.conj().T, atol=1e-14)
    germ = germ_matrix(cell_hermitian, hermitian2d.model, theta)
    diag, _ = diagonal_part(third, germ)
    coeff = germ.vectors.conj().T @ diag @ germ.vectors
    off = coeff - np.diag(np.diag(coeff))
    # single cluster per eigenvalue here, so projected off-diagonals vanish
    for cluster in germ.clusters:
        for i in cluster:
            for j in cluster:
                if i != j:
                    assert abs(coeff[i, j]) < 1e-10


def test_fourth_order_two_routes_1d(model1d, cell1d, second1d):
    blocks, nus = fourth_order_operator(cell1d, second1d, model1d.model, [1.0])
    fit = band_fit_expansion(model1d.model, cell1d, [1.0])
    assert abs(nus[0]) > 1e-3
    assert abs(nus[0] - fit.nu[0]) <= 1e-5 * abs(nus[0])
    # the -theta direction carries the same quartic coefficient
    blocks_m, nus_m = fourth_order_operator(cell1d, second1d, model1d.model, [-1.0])
    assert nus_m[0] == pytest.approx(nus[0], rel=1e-9)


def test_fourth_order_constant_g_vanishes():
    lat = build_lattice([[1.0]])
    g = PeriodicMatrixFunction(1, 1, 1, {(0,): [[2.0]]}, hermitian=True)
    model = OperatorModel(lat, SymbolB([[[1.0]]]), g)
    validate_model(model)
    cell = solve_corrector(model, 8)
    second = solve_second_corrector(model, cell)
    _, nus = fourth_order_operator(cell, second, model, [1.0])
    assert np.max(np.abs(nus)) < 1e-12


def test_fourth_order_refuses_nonvanishing_diagonal(hermitian2d, cell_hermitian):
    second = solve_second_corrector(hermitian2d.model, cell_hermitian)
    with pytest.raises(GermError, match="vanishing diagonal"):
        fourth_order_operator(cell_hermitian, second, hermitian2d.model,
                              [1.0, 0.0])


def test_weighted_third_order_identity_weight(model1d, cell1d):
    wc = weighted_corrector(model1d.model, cell1d)
    a = third_order_matrix(cell1d, model1d.model, [1.0])
    b = weighted_third_order_matrix(cell1d, model1d.model, wc, [1.0])
    assert np.allclose(a, b, atol=1e-14)


def test_weighted_third_order_vanishes_real_case(weighted1d, cell_weighted):
    wc = weighted_corrector(weighted1d.model, cell_weighted)
    for theta in ([1.0], [-1.0]):
        third = weighted_third_order_matrix(cell_weighted, weighted1d.model,
                                            wc, theta)
        assert np.max(np.abs(third)) < 1e-12


def test_weighted_germ_generalized_problem(weighted1d, cell_weighted):
    model = weighted1d.model
    germ = germ_matrix(cell_weighted, model, [1.0], q_mean=model.q_mean())
    assert germ.gamma[0] == pytest.approx(np.sqrt(3.0) / 1.5, rel=1e-10)
    # eigenvectors orthonormal against the mean weight
    z = germ.vectors
    gram = z.conj().T @ model.q_mean() @ z
    assert np.allclose(gram, np.eye(1), atol=1e-10)
    fit = band_fit_expansion(model, cell_weighted, [1.0], weighted=True)
    assert abs(fit.gamma[0] - germ.gamma[0]) <= 1e-7 * germ.gamma[0]


def test_weighted_diagonal_part_skew_projections():
    q_mean = np.array([[2.0, 0.3], [0.3, 1.0]])
    germ_mat = np.array([[1.0, 0.1], [0.1, 2.0]])
    import scipy.linalg
    gamma, z = scipy.linalg.eigh(germ_mat, q_mean)
    from blochlab.germ import GermExpansion, _cluster_ranges
    germ = GermExpansion(theta=np.array([1.0, 0.0]), germ=germ_mat,
                         gamma=gamma, vectors=z,
                         clusters=_cluster_ranges(gamma))
    matrix = np.array([[0.0, 0.2j], [-0.2j, 0.5]])
    diag, mus = weighted_diagonal_part(matrix, germ, q_mean)
    want = np.array([np.real(z[:, l].conj() @ matrix @ z[:, l])
                     for l in range(2)])
    assert np.allclose(np.sort(mus), np.sort(want), atol=1e-12)


def test_regime_classification_per_scenario(model1d, cell1d, hermitian2d,
                                            cell_hermitian):
    rep = regime_classify(model1d.model, cell1d)
    assert rep.regime == "improved"
    assert rep.third_order_vanishes
    rep2 = regime_classify(hermitian2d.model, cell_hermitian)
    assert rep2.regime == "general"
    assert not rep2.diagonal_vanishes
    lat = build_lattice([[1.0]])
    g = PeriodicMatrixFunction(1, 1, 1, {(0,): [[2.0]]}, hermitian=True)
    const = OperatorModel(lat, SymbolB([[[1.0]]]), g)
    validate_model(const)
    cell = solve_corrector(const, 8)
    assert regime_classify(const, cell).regime == "exact"


def test_rate_exponents():
    assert rate_exponents("general", 2.0) == pytest.approx(1.0)
    assert rate_exponents("improved", 1.5) == pytest.approx(1.0)
    assert rate_exponents("improved", 0.75) == pytest.approx(0.5)
    with pytest.raises(GermError):
        rate_exponents("improved", 2.0)


def test_band_fit_needs_enough_samples(model1d, cell1d):
    with pytest.raises(GermError, match="at least 6"):
        band_fit_expansion(model1d.model, cell1d, [1.0],
                           t_samples=[0.1, 0.05, 0.025])
