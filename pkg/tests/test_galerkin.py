import json

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from pcmpc.basis import (
    GAUSSIAN,
    OrthoBasis,
    PCExpansion,
    gaussian_basis,
)
from pcmpc.galerkin import (
    CONST_INPUT,
    ExpandedOde,
    InputFunction,
    Monomial,
    PolynomialOde,
    ProjectionTensor,
    build_tensors,
    project_dynamics,
    project_initial_conditions,
)

U_ID = InputFunction(fn=lambda u: float(u[0]), grad=lambda u: np.array([1.0]))


def h1(order):
    return OrthoBasis([(GAUSSIAN, 0.0, 1.0)], order)


def decay_model(basis, p0, p1):
    """x' = -p x with p = p0 + p1 xi_1 expanded over `basis`."""
    coeffs = np.zeros(basis.n_terms)
    coeffs[0] = p0
    coeffs[1] = p1
    p = PCExpansion(basis, coeffs)
    terms = [[Monomial(coeff=-1.0, exponents=(1,), param_id="p")]]
    return PolynomialOde(1, 1, terms, params={"p": p})


def test_tensor_trivial_entries():
    b = h1(1)
    t = build_tensors(b, 2)
    assert t.value((1, 1), 0) == pytest.approx(1.0)  # E[xi^2] = 1
    assert t.value((1, 1), 1) == 0.0  # odd Gaussian moment


def test_tensor_quadratic_entry_against_quadrature():
    # oracle: 12-node Gauss-Hermite quadrature of E[xi * xi * He2] / E[He2^2]
    from numpy.polynomial.hermite_e import hermegauss

    x, w = hermegauss(12)
    w = w / np.sqrt(2 * np.pi)
    he2 = x**2 - 1.0
    oracle = np.sum(w * x * x * he2) / np.sum(w * he2 * he2)
    assert oracle == pytest.approx(1.0, abs=1e-12)

    t = build_tensors(h1(2), 2)
    assert t.value((1, 1), 2) == pytest.approx(oracle, abs=1e-12)


def test_tensor_symmetry_and_exactness_small_mixed():
    b = OrthoBasis([(GAUSSIAN, 0.0, 1.0), ("uniform", -1.0, 1.0)], 2)
    t = build_tensors(b, 3)
    from numpy.polynomial.hermite_e import hermegauss
    from numpy.polynomial.legendre import leggauss

    from pcmpc.basis import eval_basis

    xh, wh = hermegauss(14)
    wh /= np.sqrt(2 * np.pi)
    xl, wl = leggauss(14)
    wl /= 2.0
    pts = np.array([(a, c) for a in xh for c in xl])
    w = np.array([wa * wc for wa in wh for wc in wl])
    psi = eval_basis(b, pts)
    rng = np.random.default_rng(0)
    for _ in range(40):
        i, j, k, o = rng.integers(0, b.n_terms, size=4)
        brute = np.sum(w * psi[:, i] * psi[:, j] * psi[:, k] * psi[:, o]) / b.norms[o]
        stored = t.value((int(i), int(j), int(k)), int(o))
        assert stored == pytest.approx(brute, abs=1e-10)
        assert t.value((int(j), int(i), int(k)), int(o)) == pytest.approx(stored, abs=1e-13)
    meta = t.metadata
    assert meta["drop_tol"] == 1e-12
    assert 0.0 < meta["sparsity"][2] < 1.0


def test_projected_decay_dynamics_coefficients():
    b = h1(1)
    ode = project_dynamics(decay_model(b, 0.7, 0.2), b, build_tensors(b, 3))
    f10 = ode.rhs(0.0, np.array([1.0, 0.0]), np.array([0.0]))
    f01 = ode.rhs(0.0, np.array([0.0, 1.0]), np.array([0.0]))
    np.testing.assert_allclose(f10, [-0.7, -0.2], atol=1e-13)
    np.testing.assert_allclose(f01, [-0.2, -0.7], atol=1e-13)


def test_projected_pure_input_dynamics():
    b = h1(2)
    terms = [[Monomial(coeff=1.0, exponents=(0,), input_id="u")]]
    model = PolynomialOde(1, 1, terms, inputs={"u": U_ID})
    ode = project_dynamics(model, b, build_tensors(b, 2))
    f = ode.rhs(0.0, np.array([5.0, 1.0, 2.0]), np.array([3.0]))
    np.testing.assert_allclose(f, [3.0, 0.0, 0.0], atol=1e-14)


def test_projected_square_term():
    # x^2 with x = a + b xi: projection is a^2 + b^2 on Psi_0 and 2ab on Psi_1
    b = h1(1)
    terms = [[Monomial(coeff=1.0, exponents=(2,))]]
    model = PolynomialOde(1, 1, terms)
    ode = project_dynamics(model, b, build_tensors(b, 2))
    a, bb = 1.3, -0.4
    f = ode.rhs(0.0, np.array([a, bb]), np.array([0.0]))
    np.testing.assert_allclose(f, [a * a + bb * bb, 2 * a * bb], atol=1e-13)


def test_decay_mean_matches_lognormal_expectation():
    # E[x0 exp(-p t)] = x0 exp(-p0 t + p1^2 t^2 / 2) for Gaussian p
    p0, p1, x0 = 1.0, 0.25, 2.0
    b = h1(6)
    ode = project_dynamics(decay_model(b, p0, p1), b, build_tensors(b, 3))
    z0 = np.zeros(ode.dim)
    z0[0] = x0
    t_end = 0.3 / p1
    sol = solve_ivp(
        ode.rhs, [0, t_end], z0, args=(np.array([0.0]),), rtol=1e-10, atol=1e-12
    )
    analytic = x0 * np.exp(-p0 * t_end + 0.5 * p1**2 * t_end**2)
    assert sol.y[0, -1] == pytest.approx(analytic, rel=1e-6)


def test_linear_gaussian_moments_against_mc():
    # x' = -p x, Gaussian p and Gaussian x(0); oracle is exact-solution MC
    p0, p1 = 1.0, 0.15
    m0, s0 = 2.0, 0.1
    t_end = 0.3 / p1
    rng = np.random.default_rng(123)
    n = 10**6
    p = p0 + p1 * rng.standard_normal(n)
    x0 = m0 + s0 * rng.standard_normal(n)
    xs = x0 * np.exp(-p * t_end)
    mc_mean, mc_var = xs.mean(), xs.var()
    se_mean = xs.std() / np.sqrt(n)
    se_var = np.sqrt((np.mean((xs - mc_mean) ** 4) - mc_var**2) / n)

    b = gaussian_basis([0.0, 0.0], [1.0, 1.0], 3)
    coeffs = np.zeros(b.n_terms)
    coeffs[0], coeffs[1] = p0, p1
    model = PolynomialOde(
        1, 1,
        [[Monomial(coeff=-1.0, exponents=(1,), param_id="p")]],
        params={"p": PCExpansion(b, coeffs)},
    )
    ode = project_dynamics(model, b, build_tensors(b, 3, first_slot_cap=1))
    z0 = project_initial_conditions([("gaussian", m0, s0, 1)], b)
    sol = solve_ivp(ode.rhs, [0, t_end], z0, args=(np.array([0.0]),),
                    rtol=1e-10, atol=1e-12)
    xt = sol.y[:, -1]
    pce_mean = xt[0]
    pce_var = float(np.sum(xt[1:] ** 2 * b.norms[1:]))
    assert abs(pce_mean - mc_mean) <= 3 * se_mean
    assert abs(pce_var - mc_var) <= 3 * se_var


def test_degenerate_uncertainty_reproduces_nominal():
    b = gaussian_basis([0.0, 0.0], [1.0, 1.0], 2)
    coeffs = np.zeros(b.n_terms)
    coeffs[0] = 0.8
    model = PolynomialOde(
        2, 1,
        [
            [Monomial(coeff=-1.0, exponents=(2, 0), param_id="p"),
             Monomial(coeff=0.5, exponents=(0, 1), input_id="u")],
            [Monomial(coeff=1.0, exponents=(1, 1))],
        ],
        inputs={"u": U_ID},
        params={"p": PCExpansion(b, coeffs)},
    )
    ode = project_dynamics(model, b, build_tensors(b, 3, first_slot_cap=1))
    x_nom = np.array([1.2, -0.7])
    u = np.array([0.3])
    z = np.zeros(ode.dim)
    z[0] = x_nom[0]
    z[ode.n_terms] = x_nom[1]
    f = ode.rhs(0.0, z, u)
    f_nom = model.nominal_rhs(0.0, x_nom, u)
    np.testing.assert_allclose(ode.index0_states(f), f_nom, atol=1e-13)
    np.testing.assert_allclose(f.reshape(2, -1)[:, 1:], 0.0, atol=1e-13)


def test_dense_and_sparse_assembly_agree():
    b = gaussian_basis([0.0, 0.0], [1.0, 1.0], 2)
    rng = np.random.default_rng(5)
    coeffs = np.zeros(b.n_terms)
    coeffs[:3] = [1.0, 0.3, -0.2]
    model = PolynomialOde(
        2, 1,
        [
            [Monomial(coeff=-1.0, exponents=(1, 1), param_id="p"),
             Monomial(coeff=0.5, exponents=(0, 1), input_id="u")],
            [Monomial(coeff=1.0, exponents=(2, 0)),
             Monomial(coeff=-0.3, exponents=(0, 0), input_id="u")],
        ],
        inputs={"u": U_ID},
        params={"p": PCExpansion(b, coeffs)},
    )
    ode = project_dynamics(model, b, build_tensors(b, 3, first_slot_cap=2))
    x = rng.normal(size=ode.dim)
    u = np.array([0.7])
    np.testing.assert_allclose(
        ode.rhs(0.0, x, u), ode.rhs_dense_reference(0.0, x, u), atol=1e-13
    )


def test_jacobian_against_finite_differences():
    b = gaussian_basis([0.0, 0.0], [1.0, 1.0], 2)
    coeffs = np.zeros(b.n_terms)
    coeffs[:2] = [0.9, 0.2]
    model = PolynomialOde(
        2, 1,
        [
            [Monomial(coeff=-1.0, exponents=(1, 1), param_id="p")],
            [Monomial(coeff=1.0, exponents=(2, 0)),
             Monomial(coeff=1.0, exponents=(0, 1), input_id="u")],
        ],
        inputs={"u": U_ID},
        params={"p": PCExpansion(b, coeffs)},
    )
    ode = project_dynamics(model, b, build_tensors(b, 3, first_slot_cap=1))
    rng = np.random.default_rng(2)
    x = rng.normal(size=ode.dim)
    u = np.array([0.4])
    J = ode.jacobian(0.0, x, u).toarray()
    h = 1e-7
    fd = np.empty_like(J)
    for j in range(ode.dim):
        e = np.zeros(ode.dim)
        e[j] = h
        fd[:, j] = (ode.rhs(0, x + e, u) - ode.rhs(0, x - e, u)) / (2 * h)
    np.testing.assert_allclose(J, fd, atol=1e-6)
    # input gradient from the same pass
    f, dfdu = ode.rhs_and_input_jac(0.0, x, u)
    fdu = (ode.rhs(0, x, u + 1e-7) - ode.rhs(0, x, u - 1e-7)) / 2e-7
    np.testing.assert_allclose(dfdu[:, 0], fdu, atol=1e-6)
    np.testing.assert_allclose(f, ode.rhs(0.0, x, u), atol=1e-15)


def test_initial_condition_projection_variants():
    b = gaussian_basis([0.0] * 3, [1.0] * 3, 3)
    z = project_initial_conditions(
        [("gaussian", 1.5, 0.3, 1), ("dirac", 4.0)], b
    )
    nt = b.n_terms
    first = z[:nt]
    assert first[0] == 1.5
    k = [tuple(r) for r in b.index_set.indices].index((0, 1, 0))
    assert first[k] == 0.3
    assert np.count_nonzero(first) == 2
    second = z[nt:]
    assert second[0] == 4.0
    assert np.count_nonzero(second) == 1


def test_initial_condition_fit_matches_mc_oracle():
    # oracle: brute-force MC of E[1/x7] with x7 ~ N(2, 0.02^2)
    rng = np.random.default_rng(np.random.SeedSequence(77))
    draws = 2.0 + 0.02 * rng.standard_normal(10**6)
    mc = np.mean(1.0 / draws)

    b = gaussian_basis([0.0] * 2, [1.0] * 2, 3)
    z = project_initial_conditions(
        [("fit", lambda xi: 1.0 / (2.0 + 0.02 * xi[:, 1]))], b
    )
    assert abs(z[0] - mc) <= 1e-5


def test_initial_condition_errors():
    b = h1(2)
    with pytest.raises(ValueError, match="fit"):
        project_initial_conditions([lambda xi: xi[:, 0]], b)
    with pytest.raises(ValueError):
        project_initial_conditions([("mystery", 1.0)], b)
    other = h1(3)
    exp = PCExpansion(other, np.zeros(other.n_terms))
    with pytest.raises(ValueError):
        project_initial_conditions([("expansion", exp)], b)


def test_projection_basis_mismatch():
    b = h1(1)
    other = h1(2)
    model = decay_model(other, 1.0, 0.1)
    with pytest.raises(ValueError):
        project_dynamics(model, b, build_tensors(b, 3))


def test_expanded_ode_serialization_roundtrip():
    b = h1(2)
    model = decay_model(b, 0.7, 0.2)
    ode = project_dynamics(model, b, build_tensors(b, 3))
    blob = json.dumps(ode.to_json_dict())
    back = ExpandedOde.from_json_dict(json.loads(blob), inputs={})
    rng = np.random.default_rng(8)
    x = rng.normal(size=ode.dim)
    u = np.array([0.1])
    np.testing.assert_allclose(back.rhs(0.0, x, u), ode.rhs(0.0, x, u), atol=1e-15)
    assert back.metadata["instruction_count"] == ode.metadata["instruction_count"]


def test_model_validation():
    with pytest.raises(ValueError):
        PolynomialOde(1, 1, [[Monomial(coeff=1.0, exponents=(1, 2))]])
    with pytest.raises(ValueError):
        PolynomialOde(1, 1, [[Monomial(coeff=1.0, exponents=(1,), input_id="nope")]])
    with pytest.raises(ValueError):
        PolynomialOde(1, 1, [[Monomial(coeff=1.0, exponents=(3,))]], d_max=2)
