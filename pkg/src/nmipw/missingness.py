"""Logistic pattern-probability model for nonmonotone MAR missingness.

Each incomplete pattern ``m = 2..M`` has its own logistic regression on the
variables it observes, ``pi_m = expit(gamma_m . (1, L_(m)))``.  The complete
case probability is what is left over, ``pi_1 = 1 - sum_m pi_m``; nothing in
the parametrisation keeps it positive, which is why maximum likelihood can
wander off the feasible region.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit

from .data_model import ObservedDataset, PatternRegistry

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MissingnessParams:
    """Stacked coefficients, one block (intercept first) per incomplete pattern."""

    blocks: tuple[np.ndarray, ...]

    def __post_init__(self):
        blocks = tuple(np.array(b, dtype=float).reshape(-1) for b in self.blocks)
        for b in blocks:
            if not np.all(np.isfinite(b)):
                raise ValueError("missingness coefficients must be finite")
            b.setflags(write=False)
        object.__setattr__(self, "blocks", blocks)

    @property
    def vector(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate(self.blocks)

    @property
    def size(self) -> int:
        return sum(b.size for b in self.blocks)

    def block(self, code: int) -> np.ndarray:
        return self.blocks[code - 2]

    def check(self, registry: PatternRegistry) -> None:
        want = block_sizes(registry)
        got = [b.size for b in self.blocks]
        if got != want:
            raise ValueError(f"block lengths {got} do not match registry {want}")

    @classmethod
    def from_vector(cls, registry: PatternRegistry, vec) -> "MissingnessParams":
        vec = np.asarray(vec, dtype=float)
        sizes = block_sizes(registry)
        if vec.size != sum(sizes):
            raise ValueError(f"expected {sum(sizes)} coefficients, got {vec.size}")
        cuts = np.cumsum(sizes)[:-1]
        return cls(tuple(np.split(vec, cuts)) if sizes else ())

    @classmethod
    def zeros(cls, registry: PatternRegistry) -> "MissingnessParams":
        return cls(tuple(np.zeros(s) for s in block_sizes(registry)))

    def to_json(self) -> dict:
        return {"gamma": {str(c): [float(x) for x in b] for c, b in enumerate(self.blocks, start=2)}}

    @classmethod
    def from_json(cls, obj, registry: PatternRegistry | None = None) -> "MissingnessParams":
        if isinstance(obj, str):
            obj = json.loads(obj)
        gamma = obj["gamma"]
        codes = sorted(int(k) for k in gamma)
        if codes != list(range(2, len(codes) + 2)):
            raise ValueError(f"gamma blocks must be keyed 2..M, got {codes}")
        params = cls(tuple(np.asarray(gamma[str(c)], dtype=float) for c in codes))
        if registry is not None:
            params.check(registry)
        return params


def block_sizes(registry: PatternRegistry) -> list[int]:
    return [1 + len(registry.observed_for(c)) for c in registry.codes if c != 1]


def coefficient_names(registry: PatternRegistry, names) -> list[str]:
    out = []
    for c in registry.codes:
        if c == 1:
            continue
        out.append(f"g{c}_(Intercept)")
        out.extend(f"g{c}_{names[j]}" for j in registry.observed_for(c))
    return out


def pattern_probability(gamma_m, l_obs) -> float:
    gamma_m = np.asarray(gamma_m, dtype=float)
    l_obs = np.atleast_1d(np.asarray(l_obs, dtype=float))
    if gamma_m.size != l_obs.size + 1:
        raise ValueError(f"block of length {gamma_m.size} needs {gamma_m.size - 1} observed values, got {l_obs.size}")
    return float(expit(gamma_m[0] + gamma_m[1:] @ l_obs))


def complete_case_probability(params: MissingnessParams, registry: PatternRegistry, row) -> float:
    """``1 - sum_m pi_m`` for one fully observed row; not clamped."""
    row = np.asarray(row, dtype=float)
    total = 0.0
    for c in registry.codes:
        if c == 1:
            continue
        total += pattern_probability(params.block(c), row[list(registry.observed_for(c))])
    return 1.0 - total


class PatternModel:
    """Likelihood machinery for one dataset, with designs built once.

    Only two kinds of rows carry information about block ``m``: rows of pattern
    ``m`` (through ``log pi_m``) and complete cases (through ``log pi_1``).
    """

    def __init__(self, dataset: ObservedDataset, registry: PatternRegistry):
        self.dataset = dataset
        self.registry = registry
        self.sizes = block_sizes(registry)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.p = int(self.offsets[-1])
        self.cc_rows = np.flatnonzero(dataset.complete)
        self.own_rows = []
        self.X_own = []
        self.X_cc = []
        vals = dataset.values
        for c in registry.codes:
            if c == 1:
                continue
            obs = list(registry.observed_for(c))
            rows = dataset.rows_of(c)
            self.own_rows.append(rows)
            self.X_own.append(np.column_stack([np.ones(rows.size), vals[np.ix_(rows, obs)]]))
            self.X_cc.append(np.column_stack([np.ones(self.cc_rows.size), vals[np.ix_(self.cc_rows, obs)]]))

    def _split(self, vec):
        return [vec[self.offsets[b]:self.offsets[b + 1]] for b in range(len(self.sizes))]

    def pattern_probs_cc(self, vec) -> np.ndarray:
        """``n_cc x (M-1)`` matrix of incomplete-pattern probabilities at complete cases."""
        blocks = self._split(np.asarray(vec, dtype=float))
        if not blocks:
            return np.zeros((self.cc_rows.size, 0))
        return np.column_stack([expit(X @ g) for X, g in zip(self.X_cc, blocks)])

    def pi1_cc(self, vec) -> np.ndarray:
        return 1.0 - self.pattern_probs_cc(vec).sum(axis=1)

    def loglik(self, vec) -> float:
        vec = np.asarray(vec, dtype=float)
        pi1 = self.pi1_cc(vec)
        if np.any(pi1 <= 0) or not np.all(np.isfinite(pi1)):
            return -np.inf
        total = float(np.sum(np.log(pi1)))
        for X, g in zip(self.X_own, self._split(vec)):
            total += float(np.sum(log_expit(X @ g)))
        return total

    def score(self, vec) -> np.ndarray:
        vec = np.asarray(vec, dtype=float)
        blocks = self._split(vec)
        probs = self.pattern_probs_cc(vec)
        pi1 = 1.0 - probs.sum(axis=1)
        if np.any(pi1 <= 0):
            return np.full(self.p, np.nan)
        out = np.empty(self.p)
        for b, (Xo, Xc, g) in enumerate(zip(self.X_own, self.X_cc, blocks)):
            pm = probs[:, b]
            own = Xo.T @ (1.0 - expit(Xo @ g))
            cc = Xc.T @ (pm * (1.0 - pm) / pi1)
            out[self.offsets[b]:self.offsets[b + 1]] = own - cc
        return out

    def score_contributions(self, vec) -> np.ndarray:
        """Per-row score, ``n x p``; rows of unrelated patterns contribute zero."""
        vec = np.asarray(vec, dtype=float)
        blocks = self._split(vec)
        probs = self.pattern_probs_cc(vec)
        pi1 = 1.0 - probs.sum(axis=1)
        S = np.zeros((self.dataset.n, self.p))
        for b, (Xo, Xc, g, rows) in enumerate(zip(self.X_own, self.X_cc, blocks, self.own_rows)):
            sl = slice(self.offsets[b], self.offsets[b + 1])
            pm = probs[:, b]
            S[rows, sl] = Xo * (1.0 - expit(Xo @ g))[:, None]
            S[self.cc_rows, sl] = -Xc * (pm * (1.0 - pm) / pi1)[:, None]
        return S

    def frequency_init(self) -> np.ndarray:
        """Empirical-frequency intercepts, zero slopes; always feasible."""
        n = max(self.dataset.n, 1)
        vec = np.zeros(self.p)
        for b, rows in enumerate(self.own_rows):
            phat = np.clip(rows.size / n, 0.5 / n, 1 - 0.5 / n)
            vec[self.offsets[b]] = np.log(phat / (1 - phat))
        return vec


def log_likelihood(params: MissingnessParams, dataset: ObservedDataset, registry: PatternRegistry) -> float:
    """Unconstrained log-likelihood; ``-inf`` when some complete case has ``pi_1 <= 0``."""
    params.check(registry)
    return PatternModel(dataset, registry).loglik(params.vector)


def score(params: MissingnessParams, dataset: ObservedDataset, registry: PatternRegistry) -> MissingnessParams:
    params.check(registry)
    vec = PatternModel(dataset, registry).score(params.vector)
    return MissingnessParams.from_vector(registry, vec) if np.all(np.isfinite(vec)) else vec


def score_contributions(params: MissingnessParams, dataset: ObservedDataset,
                        registry: PatternRegistry) -> np.ndarray:
    params.check(registry)
    return PatternModel(dataset, registry).score_contributions(params.vector)


def fitted_pi1(params: MissingnessParams, dataset: ObservedDataset, registry: PatternRegistry) -> np.ndarray:
    """Complete-case probability at every complete case, in row order."""
    return PatternModel(dataset, registry).pi1_cc(params.vector)


def default_init(dataset: ObservedDataset, registry: PatternRegistry) -> MissingnessParams:
    return MissingnessParams.from_vector(registry, PatternModel(dataset, registry).frequency_init())


@dataclass(frozen=True)
class UmleConfig:
    score_tol: float = 1e-6
    max_iter: int = 500
    fallback_max_evals: int = 2000


@dataclass
class UmleReport:
    params: MissingnessParams
    converged: bool
    method: str
    loglik: float
    max_abs_score: float
    min_pi1: float
    iterations: int
    message: str = ""
    fallback_evals: int = 0

    def to_json(self) -> dict:
        out = self.params.to_json()
        out.update(converged=self.converged, method=self.method, loglik=self.loglik,
                   max_abs_score=self.max_abs_score, min_pi1=self.min_pi1,
                   iterations=self.iterations, fallback_evals=self.fallback_evals,
                   message=self.message)
        return out


def _bfgs(f, grad, x0, tol, max_iter):
    """Inverse-Hessian BFGS with backtracking; infeasible points return ``inf``.

    Returns ``(x, fx, gx, iterations, status)`` with status one of
    ``"converged"``, ``"max_iter"``, ``"line_search"``.
    """
    x = np.array(x0, dtype=float)
    fx, gx = f(x), grad(x)
    if not np.isfinite(fx) or not np.all(np.isfinite(gx)):
        return x, fx, gx, 0, "line_search"
    n = x.size
    H = np.eye(n)
    first = True
    for it in range(1, max_iter + 1):
        if np.max(np.abs(gx), initial=0.0) <= tol:
            return x, fx, gx, it - 1, "converged"
        d = -H @ gx
        slope = gx @ d
        if slope >= 0:
            H = np.eye(n)
            d, slope = -gx, -(gx @ gx)
        step = 1.0
        # keep the first trial step from leaving the data scale
        dmax = np.max(np.abs(d))
        if first and dmax > 1.0:
            step = 1.0 / dmax
        while True:
            xn = x + step * d
            fn = f(xn)
            if np.isfinite(fn):
                if fn <= fx + 1e-4 * step * slope:
                    break
                # roundoff regime: f is flat to machine precision, judge by the gradient instead
                if abs(fn - fx) <= 1e-12 * max(1.0, abs(fx)):
                    gn = grad(xn)
                    if np.all(np.isfinite(gn)) and np.max(np.abs(gn)) < np.max(np.abs(gx)):
                        break
            step *= 0.5
            if step < 1e-20:
                return x, fx, gx, it, "line_search"
        gn = grad(xn)
        if not np.all(np.isfinite(gn)):
            return x, fx, gx, it, "line_search"
        s, y = xn - x, gn - gx
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if first:
                H = np.eye(n) * (sy / (y @ y))
            rho = 1.0 / sy
            Hy = H @ y
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * (y @ Hy) + rho) * np.outer(s, s)
            first = False
        x, fx, gx = xn, fn, gn
    if np.max(np.abs(gx), initial=0.0) <= tol:
        return x, fx, gx, max_iter, "converged"
    return x, fx, gx, max_iter, "max_iter"


def fit_umle(dataset: ObservedDataset, registry: PatternRegistry,
             init: MissingnessParams | None = None, config: UmleConfig = UmleConfig()) -> UmleReport:
    """Maximise the unconstrained likelihood by BFGS, Nelder-Mead as fallback.

    Non-convergence is reported, never raised.  The minimum fitted
    complete-case probability is returned so that boundary failures are
    visible.
    """
    model = PatternModel(dataset, registry)
    if model.cc_rows.size == 0:
        raise ValueError("positivity unverifiable: no complete cases")
    x0 = model.frequency_init() if init is None else init.vector
    if init is not None:
        init.check(registry)

    def f(x):
        return -model.loglik(x)

    def g(x):
        return -model.score(x)

    x, fx, gx, iters, status = _bfgs(f, g, x0, config.score_tol, config.max_iter)
    method, evals, message = "quasi-newton", 0, status
    if status != "converged":
        start = x if np.isfinite(fx) else x0
        res = minimize(f, start, method="Nelder-Mead",
                       options={"maxfev": config.fallback_max_evals, "xatol": 1e-10, "fatol": 1e-12})
        if np.isfinite(res.fun) and res.fun <= f(start):
            x = res.x
        method, evals = "derivative-free-fallback", int(res.nfev)
        message = f"{status}; simplex: {res.message}"
    sc = model.score(x)
    max_score = float(np.max(np.abs(sc), initial=0.0)) if np.all(np.isfinite(sc)) else float("inf")
    converged = max_score <= config.score_tol
    pi1 = model.pi1_cc(x)
    if not converged:
        log.info("UMLE not converged (%s); min pi1 = %.3g", message, pi1.min())
    return UmleReport(
        params=MissingnessParams.from_vector(registry, x),
        converged=bool(converged),
        method=method,
        loglik=float(model.loglik(x)),
        max_abs_score=max_score,
        min_pi1=float(pi1.min()),
        iterations=int(iters),
        message=message,
        fallback_evals=evals,
    )
