import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import expit, log_expit

from nmipw import cbe
from nmipw import missingness as mm
from nmipw.data_model import ObservedDataset, PatternRegistry, VariableSchema

from conftest import random_dataset

SMALL = cbe.ChainConfig(n_chains=2, n_iterations=1500, n_adapt=500, seed=7)


def _intercept_only(n_cc, n_miss):
    reg = PatternRegistry(1, ((0,), ()))
    schema = VariableSchema(("x",), ("continuous",))
    vals = np.r_[np.ones(n_cc), np.full(n_miss, np.nan)][:, None]
    codes = np.r_[np.ones(n_cc, int), np.full(n_miss, 2)]
    return reg, ObservedDataset(schema, codes, vals, reg)


def test_log_posterior_components(rng):
    data = random_dataset(rng)
    reg = data.registry
    prior = cbe.PriorSpec(0.0, 10.0)
    params = mm.MissingnessParams(tuple(np.r_[-2.0, np.zeros(len(reg.observed_for(c)))] for c in range(2, reg.M + 1)))
    want = mm.log_likelihood(params, data, reg) + stats.norm(0, np.sqrt(10)).logpdf(params.vector).sum()
    assert cbe.log_posterior(params, data, reg, prior) == pytest.approx(want, abs=1e-12)
    bad = mm.MissingnessParams(tuple(np.r_[3.0, b[1:]] for b in params.blocks))
    assert cbe.log_posterior(bad, data, reg, prior) == -np.inf


def test_log_posterior_no_incomplete_patterns():
    reg = PatternRegistry(1, ((0,),))
    data = ObservedDataset(VariableSchema(("x",), ("continuous",)), [1, 1], [[0.0], [1.0]], reg)
    assert cbe.log_posterior(mm.MissingnessParams(()), data, reg) == 0.0


def test_log_posterior_respects_sigma_star():
    reg, data = _intercept_only(2, 2)
    params = mm.MissingnessParams(((0.0,),))  # pi_2 = 0.5
    assert np.isfinite(cbe.log_posterior(params, data, reg, sigma_star=0.4))
    assert cbe.log_posterior(params, data, reg, sigma_star=0.5) == -np.inf


def test_identical_seeds_identical_draws(rng):
    data = random_dataset(rng)
    a = cbe.sample_posterior(data, data.registry, config=SMALL)
    b = cbe.sample_posterior(data, data.registry, config=SMALL)
    np.testing.assert_array_equal(a.draws, b.draws)
    c = cbe.sample_posterior(data, data.registry, config=cbe.ChainConfig(**{**SMALL.__dict__, "seed": 8}))
    assert not np.array_equal(a.draws, c.draws)


def test_draws_satisfy_constraint(rng):
    data = random_dataset(rng, n=80)
    config = cbe.ChainConfig(n_chains=2, n_iterations=2000, n_adapt=1000, seed=1, sigma_star=0.05)
    draws = cbe.sample_posterior(data, data.registry, config=config)
    model = mm.PatternModel(data, data.registry)
    pooled = draws.pooled()
    assert all(cbe.constraint_satisfied(v, model, 0.05) for v in pooled)
    assert np.all((draws.acceptance > 0.2) & (draws.acceptance < 0.7))


def _exact_cdf(logdens, lo, hi, grid):
    xs = np.linspace(lo, hi, 4001)
    ld = logdens(xs)
    dens = np.exp(ld - ld.max())
    cum = integrate.cumulative_trapezoid(dens, xs, initial=0.0)
    return np.interp(grid, xs, cum / cum[-1])


@pytest.mark.parametrize("sigma_star", [1e-8, 0.5])
def test_sampler_targets_truncated_posterior(sigma_star):
    # pi_2 = expit(g); complete cases contribute 1 - pi_2; truncation at pi_2 < 1 - sigma_star
    n_cc, n_miss = 3, 6
    reg, data = _intercept_only(n_cc, n_miss)
    prior = cbe.PriorSpec(0.0, 4.0)
    config = cbe.ChainConfig(n_chains=3, n_iterations=22000, n_adapt=2000, seed=3, sigma_star=sigma_star)
    draws = cbe.sample_posterior(data, reg, prior, config).pooled()[:, 0]
    upper = np.log((1 - sigma_star) / sigma_star)

    def logdens(g):
        return n_miss * log_expit(g) + n_cc * log_expit(-g) - g ** 2 / 8.0

    assert draws.max() < upper
    lo = -12.0
    hi = min(upper, 12.0)
    ks = stats.kstest(draws, lambda x: _exact_cdf(logdens, lo, hi, np.atleast_1d(x))).statistic
    assert ks < 0.05


def test_gelman_rubin_behaviour():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 500, 2))
    copies = np.concatenate([x, x, x])
    gr = cbe.gelman_rubin(copies)
    assert np.all(gr.rhat <= 1.0 + 1e-12)
    iid = rng.normal(size=(4, 20000, 3))
    assert np.all(np.abs(cbe.gelman_rubin(iid).rhat - 1) < 0.05)
    apart = rng.normal(size=(3, 1000, 1)) + np.array([0.0, 5.0, 10.0])[:, None, None]
    assert cbe.gelman_rubin(apart).rhat[0] > 3
    const = np.ones((2, 50, 1))
    gr = cbe.gelman_rubin(const)
    assert gr.rhat[0] == 1.0 and gr.degenerate[0]


def _draws(arr, target=None):
    arr = np.asarray(arr, dtype=float)
    reg = PatternRegistry(1, ((0,), ()))
    return cbe.PosteriorDraws(arr, np.zeros((arr.shape[0], arr.shape[2])), np.ones((arr.shape[0], arr.shape[2])),
                              reg, arr[:, 0], target)


def test_point_estimate_trivial_cases():
    reg, data = _intercept_only(3, 2)
    target = cbe._Target(data, reg, cbe.PriorSpec(), 1e-8)
    one = _draws([[[0.7]]], target)
    assert cbe.point_estimate(one, "mean").vector[0] == 0.7
    assert cbe.point_estimate(one, "mode").vector[0] == 0.7
    sym = _draws([[[1.3]], [[-1.3]]])
    assert cbe.point_estimate(sym, "mean").vector[0] == 0.0
    with pytest.raises(ValueError):
        cbe.point_estimate(sym, "median")


def test_point_estimate_mode_is_scan_argmax(rng):
    data = random_dataset(rng)
    draws = cbe.sample_posterior(data, data.registry, config=SMALL)
    mode = cbe.point_estimate(draws, "mode").vector
    pooled = draws.pooled()
    lps = np.array([cbe.log_posterior(mm.MissingnessParams.from_vector(data.registry, v), data, data.registry)
                    for v in pooled])
    np.testing.assert_array_equal(mode, pooled[np.argmax(lps)])


def test_infeasible_start_raises():
    # a margin this close to one leaves no start reachable by lowering intercepts
    reg, data = _intercept_only(1, 50)
    config = cbe.ChainConfig(n_chains=2, n_iterations=20, n_adapt=10, sigma_star=1 - 1e-12)
    with pytest.raises(cbe.InfeasibleStart):
        cbe.sample_posterior(data, reg, config=config)


def test_chain_config_validation():
    with pytest.raises(ValueError):
        cbe.ChainConfig(n_chains=1)
    with pytest.raises(ValueError):
        cbe.ChainConfig(n_iterations=10, n_adapt=10)
    with pytest.raises(ValueError):
        cbe.ChainConfig(sigma_star=0.0)


def test_fit_cbe_returns_summary(rng):
    data = random_dataset(rng, n=100)
    params, draws, gr = cbe.fit_cbe(data, data.registry, config=SMALL)
    np.testing.assert_allclose(params.vector, draws.pooled().mean(axis=0))
    assert gr.rhat.shape == (params.size,)
    text = draws.to_csv()
    assert text.count("\n") == 1 + 2 * 1000
