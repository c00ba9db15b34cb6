import json

import numpy as np
import pytest

from pcmpc.basis import (
    GAUSSIAN,
    UNIFORM,
    CollocationRankError,
    IndexSetSizeError,
    MultiIndexSet,
    OrthoBasis,
    PCExpansion,
    SampleMatrix,
    build_index_set,
    central_moment,
    eval_basis,
    fit_collocation,
    fit_function,
    gaussian_basis,
    mean,
    sample_evaluate,
    variance,
)


def h1d(order):
    return OrthoBasis([(GAUSSIAN, 0.0, 1.0)], order)


def test_index_set_sizes():
    assert build_index_set(10, 3).n_terms == 286
    assert build_index_set(5, 0).n_terms == 1
    assert np.array_equal(build_index_set(5, 0).indices, np.zeros((1, 5), dtype=int))


def test_index_set_graded_lex_order():
    s = build_index_set(2, 2)
    expected = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
    assert [tuple(r) for r in s.indices] == expected


def test_index_set_unique_and_zero_first():
    s = build_index_set(4, 3)
    assert tuple(s.indices[0]) == (0, 0, 0, 0)
    seen = {tuple(r) for r in s.indices}
    assert len(seen) == s.n_terms
    degs = s.degrees()
    assert np.all(np.diff(degs) >= 0)


def test_index_set_validation():
    with pytest.raises(ValueError):
        build_index_set(0, 2)
    with pytest.raises(ValueError):
        build_index_set(2, -1)
    with pytest.raises(IndexSetSizeError):
        build_index_set(600, 12)


def test_eval_basis_hermite_at_zero():
    b = h1d(2)
    np.testing.assert_allclose(eval_basis(b, [0.0]), [1.0, 0.0, -1.0], atol=1e-14)


def test_eval_basis_legendre_at_one():
    b = OrthoBasis([(UNIFORM, -1.0, 1.0)], 1)
    np.testing.assert_allclose(eval_basis(b, [1.0]), [1.0, 1.0], atol=1e-14)


def test_eval_basis_mixed_product_entry():
    b = gaussian_basis([0.0, 0.0], [1.0, 1.0], 2)
    vals = eval_basis(b, [1.0, 1.0])
    k = [tuple(r) for r in b.index_set.indices].index((1, 1))
    assert vals[0] == 1.0
    assert vals[k] == pytest.approx(1.0, abs=1e-14)


def test_eval_basis_rejects_nonfinite():
    b = h1d(2)
    with pytest.raises(ValueError):
        eval_basis(b, [np.nan])


def test_orthogonality_by_quadrature():
    # every off-diagonal Gram entry up to order 4 vanishes to 1e-10 relative
    from numpy.polynomial.hermite_e import hermegauss
    from numpy.polynomial.legendre import leggauss

    b = OrthoBasis([(GAUSSIAN, 0.0, 1.0), (UNIFORM, -1.0, 1.0)], 4)
    xh, wh = hermegauss(12)
    wh = wh / np.sqrt(2 * np.pi)
    xl, wl = leggauss(12)
    wl = wl / 2.0
    pts = np.array([(a, c) for a in xh for c in xl])
    w = np.array([wa * wc for wa in wh for wc in wl])
    psi = eval_basis(b, pts)
    gram = (psi * w[:, None]).T @ psi
    scale = np.sqrt(np.outer(np.diag(gram), np.diag(gram)))
    off = np.abs(gram - np.diag(np.diag(gram))) / scale
    assert off.max() <= 1e-10
    np.testing.assert_allclose(np.diag(gram), b.norms, rtol=1e-12)
    assert b.norms[0] == 1.0


def test_hermite_norms_factorial():
    b = h1d(4)
    np.testing.assert_allclose(b.norms, [1.0, 1.0, 2.0, 6.0, 24.0])


def test_sample_evaluate_constant_identity_square():
    b2 = h1d(2)
    sm = SampleMatrix.generate(b2, 100, seed=3)
    const = PCExpansion(b2, np.array([4.2, 0.0, 0.0]))
    np.testing.assert_allclose(sample_evaluate(const, sm), 4.2)

    b1 = h1d(1)
    xi = SampleMatrix(samples=np.array([[-1.0], [0.0], [2.0]]), seed=0)
    ident = PCExpansion(b1, np.array([0.0, 1.0]))
    np.testing.assert_allclose(sample_evaluate(ident, xi), [-1.0, 0.0, 2.0])

    sq = PCExpansion(b2, np.array([1.0, 0.0, 1.0]))  # 1 + He2 = xi^2
    xi3 = SampleMatrix(samples=np.array([[3.0]]), seed=0)
    np.testing.assert_allclose(sample_evaluate(sq, xi3), [9.0])


def test_sample_evaluate_dimension_mismatch():
    e = PCExpansion(h1d(1), np.array([0.0, 1.0]))
    sm = SampleMatrix.generate(gaussian_basis([0, 0], [1, 1], 1), 5, seed=1)
    with pytest.raises(ValueError):
        sample_evaluate(e, sm)


def test_moments():
    assert mean(PCExpansion(h1d(1), np.array([3.0, 0.5]))) == 3.0
    assert variance(PCExpansion(h1d(1), np.array([1.0, 2.0]))) == pytest.approx(4.0)
    assert variance(PCExpansion(h1d(2), np.array([0.0, 0.0, 1.0]))) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        central_moment(PCExpansion(h1d(1), np.array([1.0, 1.0])), 0)


def test_central_moments_sampled():
    b = h1d(1)
    e = PCExpansion(b, np.array([1.0, 2.0]))  # N(1, 4)
    sm = SampleMatrix.generate(b, 10**6, seed=11)
    assert central_moment(e, 3, sm) == pytest.approx(0.0, abs=0.15)
    assert central_moment(e, 4, sm) == pytest.approx(3 * 16, rel=0.02)
    # moment estimates do not depend on sample ordering
    perm = np.random.default_rng(0).permutation(sm.n_samples)
    shuffled = SampleMatrix(samples=sm.samples[perm], seed=sm.seed)
    assert central_moment(e, 4, shuffled) == pytest.approx(
        central_moment(e, 4, sm), rel=1e-12
    )


def test_parseval_consistency():
    b = gaussian_basis([0.0, 0.0], [1.0, 1.0], 3)
    rng = np.random.default_rng(7)
    e = PCExpansion(b, rng.normal(size=b.n_terms))
    n = 10**6
    sm = SampleMatrix.generate(b, n, seed=5)
    vals = sample_evaluate(e, sm)
    sample_var = vals.var(ddof=1)
    # standard error of a sample variance ~ var * sqrt(2/(n-1) + kurt_excess/n)
    m = vals.mean()
    kurt = np.mean((vals - m) ** 4) / sample_var**2 - 3.0
    se = sample_var * np.sqrt(2.0 / (n - 1) + max(kurt, 0.0) / n)
    assert abs(variance(e) - sample_var) <= 3 * se


def test_fit_collocation_exact_cases():
    b = h1d(2)
    rng = np.random.default_rng(1)
    xi = rng.standard_normal((50, 1))
    fit = fit_collocation(xi, xi[:, 0] ** 2, b)
    np.testing.assert_allclose(fit.coeffs, [1.0, 0.0, 1.0], atol=1e-10)
    fit7 = fit_collocation(xi, np.full(50, 7.0), b)
    np.testing.assert_allclose(fit7.coeffs, [7.0, 0.0, 0.0], atol=1e-10)


def test_fit_collocation_reciprocal_against_mc():
    # oracle: brute-force Monte-Carlo estimate of E[1/(2 + 0.02 xi)]
    rng = np.random.default_rng(np.random.SeedSequence(20260811))
    draws = rng.standard_normal(10**6)
    mc_mean = np.mean(1.0 / (2.0 + 0.02 * draws))
    assert mc_mean == pytest.approx(0.5000507648504829, abs=1e-12)

    b = h1d(3)
    fit = fit_function(lambda x: 1.0 / (2.0 + 0.02 * x[:, 0]), b, n_samples=200, seed=2)
    assert abs(mean(fit) - mc_mean) <= 1e-5


def test_fit_collocation_is_projection():
    b = gaussian_basis([0.0, 0.0], [1.0, 1.0], 2)
    rng = np.random.default_rng(9)
    e = PCExpansion(b, rng.normal(size=b.n_terms))
    sm = SampleMatrix.generate(b, 3 * b.n_terms, seed=4)
    refit = fit_collocation(sm.samples, sample_evaluate(e, sm), b)
    np.testing.assert_allclose(refit.coeffs, e.coeffs, atol=1e-10)


def test_fit_collocation_errors():
    b = h1d(2)
    with pytest.raises(ValueError):
        fit_collocation(np.zeros((2, 1)), np.zeros(2), b)
    # all points identical: vandermonde columns dependent
    xi = np.zeros((10, 1))
    with pytest.raises(CollocationRankError) as err:
        fit_collocation(xi, np.ones(10), b)
    assert "deficient" in str(err.value)


def test_sample_matrix_determinism_and_partitions():
    b = OrthoBasis([(GAUSSIAN, 0.0, 1.0), (UNIFORM, 0.0, 2.0)], 1)
    a = SampleMatrix.generate(b, 70000, seed=42)
    c = SampleMatrix.generate(b, 70000, seed=42)
    assert np.array_equal(a.samples, c.samples)
    part = SampleMatrix.generate(b, 70000, seed=42, row_start=65000, row_stop=70000)
    assert np.array_equal(part.samples, a.samples[65000:70000])
    assert a.samples[:, 1].min() >= -1.0 and a.samples[:, 1].max() <= 1.0


def test_sample_matrix_csv(tmp_path):
    b = h1d(1)
    sm = SampleMatrix.generate(b, 10, seed=0)
    p = tmp_path / "samples.csv"
    sm.to_csv(p)
    back = np.loadtxt(p, delimiter=",")
    np.testing.assert_allclose(back, sm.samples[:, 0])


def test_expansion_serialization_roundtrip():
    b = OrthoBasis([(GAUSSIAN, 1.5, 0.3), (UNIFORM, -2.0, 5.0)], 2)
    rng = np.random.default_rng(3)
    e = PCExpansion(b, rng.normal(size=b.n_terms))
    d = json.loads(json.dumps(e.to_json_dict()))
    e2 = PCExpansion.from_json_dict(d)
    assert e2.basis.same_structure(b)
    np.testing.assert_allclose(e2.coeffs, e.coeffs)


def test_physical_map():
    b = OrthoBasis([(GAUSSIAN, 2.0, 0.5), (UNIFORM, 1.0, 3.0)], 1)
    np.testing.assert_allclose(b.to_physical(np.array([0.0, 0.0])), [2.0, 2.0])
    np.testing.assert_allclose(b.to_physical(np.array([1.0, 1.0])), [2.5, 3.0])


def test_expansion_validation():
    b = h1d(1)
    with pytest.raises(ValueError):
        PCExpansion(b, np.array([1.0]))
    with pytest.raises(ValueError):
        PCExpansion(b, np.array([1.0, np.inf]))
