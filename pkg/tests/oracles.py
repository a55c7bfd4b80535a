"""Independent reference computations shared by unit and acceptance tests."""
import numpy as np
from scipy.special import expit

from nmipw import aipw, ipw
from nmipw import missingness as mm
from nmipw.data_model import ObservedDataset, PatternRegistry, VariableSchema

# (Y, A) binary; pattern 2 observes Y only, pattern 3 observes A only
TOY_REGISTRY = PatternRegistry(2, ((0, 1), (0,), (1,)))
TOY_SCHEMA = VariableSchema(("Y", "A"), ("binary", "binary"))
TOY_LAW = {(0, 0): 0.30, (0, 1): 0.15, (1, 0): 0.20, (1, 1): 0.35}
TOY_GAMMA = mm.MissingnessParams(((-1.0, 0.8), (-1.3, -0.6)))


def toy_truth_beta(law=TOY_LAW):
    """Saturated logistic parameters of ``Y`` on ``A`` under the full-data law."""
    p0 = law[(1, 0)] / (law[(0, 0)] + law[(1, 0)])
    p1 = law[(1, 1)] / (law[(0, 1)] + law[(1, 1)])
    logit = lambda p: np.log(p / (1 - p))
    return np.array([logit(p0), logit(p1) - logit(p0)])


def toy_pattern_probs(y, a, gamma=TOY_GAMMA):
    p2 = expit(gamma.block(2)[0] + gamma.block(2)[1] * y)
    p3 = expit(gamma.block(3)[0] + gamma.block(3)[1] * a)
    return 1 - p2 - p3, p2, p3


def toy_outcome_space(law=TOY_LAW, gamma=TOY_GAMMA):
    """Every ``(r, y, a)`` cell as an observed row with its exact probability."""
    codes, values, probs = [], [], []
    for (y, a), p in law.items():
        p1, p2, p3 = toy_pattern_probs(y, a, gamma)
        codes += [1, 2, 3]
        values += [[y, a], [y, np.nan], [np.nan, a]]
        probs += [p * p1, p * p2, p * p3]
    data = ObservedDataset(TOY_SCHEMA, codes, np.array(values, dtype=float), TOY_REGISTRY)
    return data, np.array(probs)


def population_ipw_moment(beta, law=TOY_LAW, gamma=TOY_GAMMA):
    data, probs = toy_outcome_space(law, gamma)
    ef = ipw.LogisticScore(0, (1,))
    w = ipw.ipw_weights(data, TOY_REGISTRY, gamma)
    L = np.nan_to_num(data.values)
    G = w[:, None] * ef.evaluate(L, beta)
    return probs @ G


def population_cc_moment(beta, law=TOY_LAW, gamma=TOY_GAMMA):
    data, probs = toy_outcome_space(law, gamma)
    ef = ipw.LogisticScore(0, (1,))
    L = np.nan_to_num(data.values)
    G = data.complete[:, None] * ef.evaluate(L, beta)
    return probs @ G


def population_augmentation_mean(law=TOY_LAW, gamma=TOY_GAMMA):
    data, probs = toy_outcome_space(law, gamma)
    ef = ipw.LogisticScore(0, (1,))
    _, ab = aipw.build_default_bases(TOY_SCHEMA, TOY_REGISTRY, ef)
    A = ab.evaluate(data, TOY_REGISTRY, gamma)
    return probs @ A, A.shape[1]


def logistic_sandwich(X, y, beta):
    """Textbook GLM sandwich for a logistic fit, written without the library."""
    p = 1 / (1 + np.exp(-X @ beta))
    bread = np.linalg.inv(X.T @ (X * (p * (1 - p))[:, None]))
    meat = X.T @ (X * ((y - p) ** 2)[:, None])
    return bread @ meat @ bread


def full_aipw_solve(dataset, registry, params, fbasis, abasis, beta0, path, tol=1e-10, max_iter=50):
    """Root of the optimal restricted moment with coefficients re-estimated at every beta."""
    beta = np.asarray(beta0, dtype=float).copy()
    for _ in range(max_iter):
        g = aipw.aipw_moment(dataset, registry, params, fbasis, abasis, beta, path)
        if np.max(np.abs(g)) < tol:
            return beta
        J = np.zeros((beta.size, beta.size))
        for j in range(beta.size):
            e = np.zeros(beta.size)
            e[j] = 1e-6
            J[:, j] = (aipw.aipw_moment(dataset, registry, params, fbasis, abasis, beta + e, path)
                       - aipw.aipw_moment(dataset, registry, params, fbasis, abasis, beta - e, path)) / 2e-6
        beta = beta - np.linalg.solve(J, g)
    raise RuntimeError("full AIPW solve did not converge")


def irls_logistic(X, y, tol=1e-12, max_iter=100):
    """Plain iteratively reweighted least squares for a logistic regression."""
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        p = 1 / (1 + np.exp(-X @ beta))
        w = p * (1 - p)
        z = X @ beta + (y - p) / w
        new = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * z))
        if np.max(np.abs(new - beta)) < tol:
            return new
        beta = new
    return beta


def constraint_violations(draws, dataset, registry, sigma_star, chunk=2000):
    """Count draws with some complete case at ``sum_m pi_m >= 1 - sigma_star``, using plain numpy."""
    L = dataset.values[dataset.complete]
    sizes = [1 + len(registry.observed_for(c)) for c in range(2, registry.M + 1)]
    starts = np.cumsum([0] + sizes)
    bad = 0
    for lo in range(0, draws.shape[0], chunk):
        G = draws[lo:lo + chunk]
        total = np.zeros((G.shape[0], L.shape[0]))
        for b, code in enumerate(range(2, registry.M + 1)):
            X = np.column_stack([np.ones(L.shape[0]), L[:, list(registry.observed_for(code))]])
            total += expit(G[:, starts[b]:starts[b + 1]] @ X.T)
        bad += int(np.sum(np.any(total >= 1 - sigma_star, axis=1)))
    return bad
