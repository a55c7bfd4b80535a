import numpy as np
import pytest

from nmipw import aipw, ipw
from nmipw import missingness as mm
from nmipw import simulation as sim
from nmipw.data_model import ObservedDataset, PatternRegistry, VariableSchema

import oracles
from conftest import random_dataset


def _setup(rng, n=400):
    data = random_dataset(rng, n=n)
    reg = data.registry
    params = mm.fit_umle(data, reg).params
    ef = ipw.LogisticScore(0, (1, 2))
    bases = aipw.build_default_bases(data.schema, reg, ef)
    beta = ipw.solve_ipw(data, reg, params, ef).beta
    return data, reg, params, ef, bases, beta


def test_simulation_h_has_nine_terms():
    fb, ab = aipw.build_default_bases(sim.SCHEMA, sim.REGISTRY, sim.logistic_ef())
    assert len(fb.h_terms) == 9
    assert fb.l == 10  # 1, A, C1, C2 and the six second-order terms
    assert [len(t) for t in ab.pattern_terms] == [9, 5, 6, 5]


def test_binary_squares_collapse():
    schema = VariableSchema(("y", "b"), ("binary", "binary"))
    ef = ipw.LogisticScore(0, (1,))
    fb, _ = aipw.build_default_bases(schema, PatternRegistry(2, ((0, 1),)), ef)
    assert fb.terms == ((), (1,))


def test_pattern_terms_binary_outcome():
    reg = PatternRegistry(3, ((0, 1, 2), (0, 1)))
    schema = VariableSchema(("Y", "A", "C"), ("binary", "continuous", "continuous"))
    _, ab = aipw.build_default_bases(schema, reg, ipw.LogisticScore(0, (1, 2)))
    labels = ab.labels(schema.names)
    # {1, Y, A, YA, Y^2, A^2} with Y^2 folded into Y
    assert sorted(labels) == sorted(["R2:1", "R2:Y", "R2:A", "R2:Y:A", "R2:A^2"])


def test_parse_and_spec():
    schema = sim.SCHEMA
    assert aipw.parse_term("1", schema) == ()
    assert aipw.parse_term("A^2", schema) == (1, 1)
    assert aipw.parse_term("C1:A", schema) == (1, 2)
    fb, ab = aipw.bases_from_spec({"h": ["A^2"], "t": {"3": ["1", "Y"]}}, schema, sim.REGISTRY, sim.logistic_ef())
    assert fb.terms == ((), (1,), (2,), (3,), (1, 1))
    assert ab.pattern_terms[1] == ((), (0,))
    with pytest.raises(ValueError):
        aipw.AugmentationBasis(((), ((3,),), (), ())).evaluate(*sim.replicate_data(sim.SimConfig(n=50), 0)[1:],
                                                                  sim.REGISTRY, sim.SimConfig().gamma_params())


def test_enumeration_augmentation_mean_zero():
    means, k = oracles.population_augmentation_mean()
    assert k == 4
    assert np.max(np.abs(means)) < 1e-14


def test_score_columns_have_zero_mean_at_umle(rng):
    data = random_dataset(rng, n=300)
    reg = data.registry
    params = mm.fit_umle(data, reg, config=mm.UmleConfig(score_tol=1e-10)).params
    terms = tuple(((),) + tuple((v,) for v in reg.observed_for(c)) for c in range(2, reg.M + 1))
    A = aipw.AugmentationBasis(terms).evaluate(data, reg, params)
    # these columns are the negated per-row missingness scores
    np.testing.assert_allclose(A, -mm.score_contributions(params, data, reg), atol=1e-12)
    assert np.max(np.abs(aipw.center_augmentation(A, "umle").mean(axis=0))) < 1e-8


def test_small_matrices_by_hand():
    reg = PatternRegistry(2, ((0, 1), (1,)))
    schema = VariableSchema(("y", "x"), ("binary", "continuous"))
    rows = [(1, 1.0, 0.4), (1, 0.0, -0.8), (2, np.nan, -1.5)]
    data = ObservedDataset(schema, [r[0] for r in rows], [[r[1], r[2]] for r in rows], reg)
    params = mm.MissingnessParams(((-0.5, 0.7),))
    ef = ipw.LogisticScore(0, (1,))
    fb = aipw.FullDataBasis.build(ef, [])
    ab = aipw.AugmentationBasis((((), (1,)),))
    beta = np.array([0.3, -0.2])
    opt = aipw.estimate_opt_matrices(data, reg, params, fb, ab, beta)
    assert opt.kept_u.size == 2 and opt.kept_a.size == 2

    n = 3
    U11, U12, U22, H1 = np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2))
    for code, y, x in rows:
        xx = np.array([1.0, x])
        pr = 1 / (1 + np.exp(-(-0.5 + 0.7 * x)))
        if code == 1:
            w = 1 / (1 - pr)
            mu = 1 / (1 + np.exp(-(xx @ beta)))
            wu = w * xx * (y - mu)
            a = pr * (1 - pr) / (1 - pr) * xx
            U11 += np.outer(wu, wu)
            U12 += np.outer(wu, a)
            H1 += w * mu * (1 - mu) * np.outer(xx, xx)
        else:
            a = -(1 - pr) * xx
        U22 += np.outer(a, a)
    np.testing.assert_allclose(opt.U11, U11 / n, rtol=1e-12)
    np.testing.assert_allclose(opt.U12, U12 / n, rtol=1e-12)
    np.testing.assert_allclose(opt.U22, U22 / n, rtol=1e-12)
    np.testing.assert_allclose(opt.H1, H1 / n, rtol=1e-12)


def test_block_system_residual(rng):
    data, reg, params, ef, (fb, ab), beta = _setup(rng)
    opt = aipw.estimate_opt_matrices(data, reg, params, fb, ab, beta)
    assert opt.block_residual() < 1e-8


def test_center_augmentation(rng):
    data, reg, params, ef, (fb, ab), beta = _setup(rng)
    A = ab.evaluate(data, reg, params)
    C = aipw.center_augmentation(A, "cbe")
    assert np.max(np.abs(C.mean(axis=0))) < 1e-14
    assert np.linalg.matrix_rank(C) == np.linalg.matrix_rank(A)
    assert aipw.center_augmentation(A, "umle") is A
    with pytest.raises(ValueError):
        aipw.center_augmentation(A, "other")


def test_no_augmentation_reproduces_ipw(rng):
    data, reg, params, ef, _, beta = _setup(rng)
    fb = aipw.FullDataBasis.build(ef, [])
    ab = aipw.AugmentationBasis(tuple(() for _ in range(reg.M - 1)))
    rep = aipw.one_step_aipw(data, reg, params, ef, (fb, ab), beta)
    np.testing.assert_allclose(rep.beta, beta, atol=1e-8)


def test_variance_without_cross_term():
    H1 = np.array([[2.0, 0.3], [0.1, 1.0]])
    U11 = np.array([[1.5, 0.2], [0.2, 0.8]])
    opt = aipw.OptMatrices(U11, np.zeros((2, 3)), np.eye(3), H1, np.zeros((2, 3)), None, None, 10,
                           np.arange(2), np.arange(3))
    want = np.linalg.inv(H1 @ np.linalg.inv(U11) @ H1.T)
    np.testing.assert_allclose(aipw.aipw_variance(opt, asymptotic=True), want, rtol=1e-12)
    np.testing.assert_allclose(aipw.aipw_variance(opt), want / 10, rtol=1e-12)


def test_aipw_variance_below_ipw(rng):
    for _ in range(5):
        data, reg, params, ef, (fb, ab), beta = _setup(rng, n=300)
        opt = aipw.estimate_opt_matrices(data, reg, params, fb, ab, beta)
        gap = ipw.variance_corrected(data, reg, params, ef, beta) - aipw.aipw_variance(opt)
        assert np.linalg.eigvalsh(gap).min() >= -1e-8 * np.abs(gap).max()


def test_one_step_close_to_full_solve():
    cfg = sim.SimConfig(n=2000)
    ef = sim.logistic_ef()
    bases = aipw.build_default_bases(sim.SCHEMA, sim.REGISTRY, ef)
    _, data = sim.replicate_data(cfg, 3)
    params = mm.fit_umle(data, sim.REGISTRY).params
    ip = ipw.fit_ipw(data, sim.REGISTRY, params, ef)
    one = aipw.one_step_aipw(data, sim.REGISTRY, params, ef, bases, ip.beta)
    full = oracles.full_aipw_solve(data, sim.REGISTRY, params, *bases, ip.beta, "umle")
    assert np.max(np.abs(one.beta - full)) < 0.5 * one.se.min()


def test_rescaled_basis_gives_same_estimate(rng):
    # the optimal restricted estimator depends on the spanned spaces only
    data, reg, params, ef, (fb, ab), beta = _setup(rng)
    a = aipw.one_step_aipw(data, reg, params, ef, (fb, ab), beta)
    scaled = data.values * np.array([1.0, 3.0, 0.5])
    schema = data.schema
    data2 = ObservedDataset(schema, data.codes, scaled, reg)
    params2 = mm.fit_umle(data2, reg).params
    ef2 = ipw.LogisticScore(0, (1, 2))
    beta2 = ipw.solve_ipw(data2, reg, params2, ef2).beta
    b = aipw.one_step_aipw(data2, reg, params2, ef2, aipw.build_default_bases(schema, reg, ef2), beta2)
    np.testing.assert_allclose(b.beta[1:] * [3.0, 0.5], a.beta[1:], rtol=1e-6)
    np.testing.assert_allclose(b.beta[0], a.beta[0], rtol=1e-6)
