"""Inverse probability weighted estimating equations and their variances.

The IPW moment for a full-data estimating function ``M(L; beta)`` is
``Gamma = 1(R=1) / pi_1(L; gamma) * M(L; beta)``.  Three variance estimators
are provided:

* ``sandwich``: ``D^-1 E[Gamma Gamma'] D^-T``, ignoring that gamma was estimated.
* ``corrected``: replaces Gamma by its residual after projection on the
  missingness score, which accounts for estimating gamma by maximum likelihood.
* ``cbe_corrected``: as ``corrected`` with the projection re-centred to have
  empirical mean zero, for posterior point estimates that do not solve the
  score equation exactly.

Second moments are uncentred empirical averages throughout, which is what
makes the re-centring meaningful.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from . import missingness as mm
from .data_model import ObservedDataset, PatternRegistry
from .linalg import inv_psd, solve_psd, symmetrize

VARIANCE_KINDS = ("corrected", "cbe_corrected", "sandwich")


class InvalidWeights(ValueError):
    pass


class SingularJacobian(np.linalg.LinAlgError):
    pass


class EstimatingFunction:
    """Full-data moment ``M(L; beta)``; subclasses fill in the two methods.

    ``evaluate`` maps an ``n x K`` array to ``n x q``; ``jacobian`` returns the
    per-row derivatives ``n x q x q`` with ``[i, a, b] = dM_a / dbeta_b``.
    """

    q: int
    names: tuple[str, ...]

    def evaluate(self, L: np.ndarray, beta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, L: np.ndarray, beta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def initial(self) -> np.ndarray:
        return np.zeros(self.q)


@dataclass(frozen=True)
class LogisticScore(EstimatingFunction):
    """Logistic-regression score ``(1, X)' (Y - expit(beta . (1, X)))``."""

    outcome: int
    covariates: tuple[int, ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(int(c) for c in self.covariates))
        if not self.names:
            object.__setattr__(self, "names", ("(Intercept)",) + tuple(f"x{c}" for c in self.covariates))

    @property
    def q(self) -> int:
        return 1 + len(self.covariates)

    def design(self, L):
        L = np.atleast_2d(L)
        return np.column_stack([np.ones(L.shape[0]), L[:, list(self.covariates)]])

    def residual(self, L, beta):
        L = np.atleast_2d(L)
        return L[:, self.outcome] - expit(self.design(L) @ beta)

    def evaluate(self, L, beta):
        return self.design(L) * self.residual(L, beta)[:, None]

    def jacobian(self, L, beta):
        X = self.design(L)
        p = expit(X @ beta)
        return -(p * (1 - p))[:, None, None] * X[:, :, None] * X[:, None, :]

    @classmethod
    def from_names(cls, schema, outcome: str, covariates) -> "LogisticScore":
        cov = tuple(schema.index(c) for c in covariates)
        return cls(schema.index(outcome), cov, ("(Intercept)",) + tuple(covariates))


@dataclass
class FitReport:
    beta: np.ndarray
    vcov: np.ndarray | None = None
    variance_kind: str | None = None
    iterations: int = 0
    converged: bool = True
    names: tuple[str, ...] = ()
    n: int = 0
    estimator: str = ""
    warnings: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0, None))

    def confint(self, level: float = 0.95) -> np.ndarray:
        z = norm.ppf(0.5 + level / 2)
        return np.column_stack([self.beta - z * self.se, self.beta + z * self.se])

    def odds_ratios(self, level: float = 0.95) -> np.ndarray:
        """``exp(beta)`` with the exponentiated Wald interval, one row per coefficient."""
        return np.column_stack([np.exp(self.beta), np.exp(self.confint(level))])

    def to_json(self) -> dict:
        out = {
            "estimator": self.estimator,
            "names": list(self.names),
            "beta": [float(b) for b in self.beta],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "n": int(self.n),
            "variance_kind": self.variance_kind,
            "warnings": list(self.warnings),
        }
        if self.vcov is not None:
            ci = self.confint()
            orr = self.odds_ratios()
            out.update(
                vcov=[[float(v) for v in row] for row in self.vcov],
                se=[float(s) for s in self.se],
                ci95=[[float(a), float(b)] for a, b in ci],
                odds_ratio=[[float(v) for v in row] for row in orr],
            )
        out.update({k: v for k, v in self.extra.items()})
        return out


def ipw_weights(dataset: ObservedDataset, registry: PatternRegistry, params: mm.MissingnessParams | None) -> np.ndarray:
    """``1(R=1) / pi_1`` for every row; raises when a complete case has ``pi_1 <= 0``."""
    w = np.zeros(dataset.n)
    cc = dataset.complete
    if params is None or registry.M == 1:
        w[cc] = 1.0
        return w
    params.check(registry)
    pi1 = mm.fitted_pi1(params, dataset, registry)
    if np.any(pi1 <= 0) or not np.all(np.isfinite(pi1)):
        bad = int(np.sum(pi1 <= 0))
        raise InvalidWeights(f"invalid weights: {bad} complete case(s) with fitted pi_1 <= 0 (min {pi1.min():.3g})")
    w[cc] = 1.0 / pi1
    return w


def _moments(L, w, ef, beta):
    """Per-row ``Gamma`` (n x q) and mean Jacobian; rows with zero weight are skipped."""
    n = L.shape[0]
    use = w != 0
    G = np.zeros((n, ef.q))
    G[use] = w[use, None] * ef.evaluate(L[use], beta)
    D = np.einsum("i,iab->ab", w[use], ef.jacobian(L[use], beta)) / n
    return G, D


def solve_weighted(L, w, ef: EstimatingFunction, init=None, tol: float = 1e-8,
                   max_iter: int = 100, max_halvings: int = 50):
    """Newton iterations with step halving on ``mean(w * M(L; beta)) = 0``.

    Returns ``(beta, iterations, converged, warnings)``.  A Jacobian whose
    smallest singular value vanishes relative to its scale stops the
    iteration as non-converged (separation in the logistic case).
    """
    beta = ef.initial() if init is None else np.array(init, dtype=float)
    warnings = []

    def mom(b):
        G, D = _moments(L, w, ef, b)
        return (G.mean(axis=0) if G.size else np.zeros(ef.q)), D

    g, D = mom(beta)
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < tol:
            return beta, it - 1, _well_posed(D, warnings), warnings
        sv = np.linalg.svd(D, compute_uv=False)
        if sv[-1] <= 1e-12 * max(sv[0], 1e-300) or sv[-1] < 1e-10:
            warnings.append(f"singular Jacobian (condition {sv[0] / max(sv[-1], 1e-300):.3g})")
            return beta, it, False, warnings
        step = -np.linalg.solve(D, g)
        t, f0 = 1.0, np.sum(g * g)
        for _ in range(max_halvings):
            bn = beta + t * step
            gn, Dn = mom(bn)
            if np.all(np.isfinite(gn)) and np.sum(gn * gn) < f0:
                break
            t *= 0.5
        else:
            warnings.append("step halving exhausted")
            return beta, it, False, warnings
        beta, g, D = bn, gn, Dn
    converged = np.max(np.abs(g)) < tol
    if not converged:
        warnings.append(f"no convergence in {max_iter} iterations")
    return beta, max_iter, bool(converged and _well_posed(D, warnings)), warnings


def _well_posed(D, warnings):
    sv = np.linalg.svd(D, compute_uv=False)
    if sv[-1] < 1e-8:
        warnings.append(f"near-singular Jacobian at solution (smallest singular value {sv[-1]:.3g}); "
                        "possible separation")
        return False
    return True


def solve_ipw(dataset: ObservedDataset, registry: PatternRegistry, params: mm.MissingnessParams | None,
              ef: EstimatingFunction, init=None) -> FitReport:
    w = ipw_weights(dataset, registry, params)
    beta, it, conv, warn = solve_weighted(_filled(dataset), w, ef, init)
    return FitReport(beta=beta, iterations=it, converged=conv, names=tuple(ef.names), n=dataset.n,
                     estimator="ipw", warnings=warn)


def _filled(dataset: ObservedDataset) -> np.ndarray:
    # zero-weight rows never reach ef.evaluate; zeros keep the arithmetic finite
    return np.nan_to_num(dataset.values, nan=0.0)


def _bread(D, warnings):
    try:
        return np.linalg.inv(D)
    except np.linalg.LinAlgError:
        raise SingularJacobian(f"IPW Jacobian is singular (condition {np.linalg.cond(D):.3g})") from None


def _projection_residual(G, S, recenter: bool, warnings: list):
    """``Gamma - W`` (plus ``mean(W)`` when re-centring) with ``W`` the score projection."""
    n = G.shape[0]
    if S is None or S.shape[1] == 0:
        return G.copy(), np.zeros(G.shape[1])
    B = S.T @ S / n
    C = G.T @ S / n
    W = S @ solve_psd(B, C.T, warnings, "score Gram matrix")
    R = G - W
    wbar = W.mean(axis=0)
    if recenter:
        R = R + wbar
    return R, wbar


def ipw_variance(dataset: ObservedDataset, registry: PatternRegistry, params: mm.MissingnessParams | None,
                 ef: EstimatingFunction, beta_hat, kind: str = "corrected", score_provider=None,
                 warnings: list | None = None) -> np.ndarray:
    """Variance of ``beta_hat`` (already divided by n) for the requested estimator kind."""
    if kind not in VARIANCE_KINDS:
        raise ValueError(f"unknown variance kind {kind!r}")
    warnings = [] if warnings is None else warnings
    w = ipw_weights(dataset, registry, params)
    G, D = _moments(_filled(dataset), w, ef, np.asarray(beta_hat, dtype=float))
    n = dataset.n
    Dinv = _bread(D, warnings)
    if kind == "sandwich" or params is None or registry.M == 1:
        R = G
    else:
        provider = score_provider or mm.score_contributions
        S = provider(params, dataset, registry)
        R, _ = _projection_residual(G, S, kind == "cbe_corrected", warnings)
    meat = R.T @ R / n
    return symmetrize(Dinv @ meat @ Dinv.T) / n


def variance_corrected(dataset, registry, params, ef, beta_hat, score_provider=None, warnings=None):
    return ipw_variance(dataset, registry, params, ef, beta_hat, "corrected", score_provider, warnings)


def variance_cbe_corrected(dataset, registry, params, ef, beta_hat, score_provider=None, warnings=None):
    return ipw_variance(dataset, registry, params, ef, beta_hat, "cbe_corrected", score_provider, warnings)


def variance_sandwich(dataset, registry, params, ef, beta_hat, warnings=None):
    return ipw_variance(dataset, registry, params, ef, beta_hat, "sandwich", None, warnings)


def cbe_correction_term(dataset, registry, params, ef, beta_hat, score_provider=None) -> np.ndarray:
    """Empirical mean of the score projection ``W``; zero at an exact score root."""
    w = ipw_weights(dataset, registry, params)
    G, _ = _moments(_filled(dataset), w, ef, np.asarray(beta_hat, dtype=float))
    provider = score_provider or mm.score_contributions
    _, wbar = _projection_residual(G, provider(params, dataset, registry), False, [])
    return wbar


def fit_ipw(dataset, registry, params, ef, variance: str = "corrected", init=None) -> FitReport:
    rep = solve_ipw(dataset, registry, params, ef, init)
    rep.vcov = ipw_variance(dataset, registry, params, ef, rep.beta, variance, warnings=rep.warnings)
    rep.variance_kind = variance
    return rep


def fit_complete_case(dataset: ObservedDataset, ef: EstimatingFunction, init=None) -> FitReport:
    """Unweighted fit on complete cases, with a sandwich variance."""
    w = dataset.complete.astype(float)
    L = _filled(dataset)
    beta, it, conv, warn = solve_weighted(L, w, ef, init)
    rep = FitReport(beta=beta, iterations=it, converged=conv, names=tuple(ef.names), n=dataset.n,
                    estimator="cc", warnings=warn)
    rep.vcov = _plain_sandwich(L, w, ef, beta, warn)
    rep.variance_kind = "sandwich"
    return rep


def fit_full_mle(full: np.ndarray, ef: EstimatingFunction, init=None) -> FitReport:
    """Fit on data without missingness; ``full`` is an ``n x K`` array."""
    full = np.asarray(full, dtype=float)
    if np.isnan(full).any():
        raise ValueError("full-data fit needs a table without missing values")
    w = np.ones(full.shape[0])
    beta, it, conv, warn = solve_weighted(full, w, ef, init)
    rep = FitReport(beta=beta, iterations=it, converged=conv, names=tuple(ef.names), n=full.shape[0],
                    estimator="mle", warnings=warn)
    try:
        rep.vcov = _plain_sandwich(full, w, ef, beta, warn)
        rep.variance_kind = "sandwich"
    except SingularJacobian as exc:
        warn.append(str(exc))
    return rep


def _plain_sandwich(L, w, ef, beta, warnings):
    G, D = _moments(L, w, ef, beta)
    n = L.shape[0]
    Dinv = _bread(D, warnings)
    return symmetrize(Dinv @ (G.T @ G / n) @ Dinv.T) / n


def wald_covers(beta, se, truth, level: float = 0.95) -> np.ndarray:
    z = norm.ppf(0.5 + level / 2)
    return np.abs(np.asarray(beta) - np.asarray(truth)) <= z * np.asarray(se)
