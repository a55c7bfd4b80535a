"""Constrained Bayesian estimation of the missingness model.

The posterior is the unconstrained likelihood times independent normal priors,
truncated to coefficient values for which every complete case satisfies
``sum_m pi_m < 1 - sigma_star``.  It is sampled by random-walk Metropolis, one
coordinate at a time in a fixed Gibbs order; a proposal outside the truncation
region has zero density and is rejected.  Proposal scales follow a
Robbins-Monro recursion towards 44% acceptance during the adaptive phase and
are frozen afterwards, so the retained draws come from a fixed Markov kernel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from . import missingness as mm
from .data_model import ObservedDataset, PatternRegistry


class InfeasibleStart(RuntimeError):
    pass


@dataclass(frozen=True)
class PriorSpec:
    mean: float | tuple = 0.0
    var: float | tuple = 1e3

    def arrays(self, p: int):
        mean = np.broadcast_to(np.asarray(self.mean, dtype=float), (p,)).copy()
        var = np.broadcast_to(np.asarray(self.var, dtype=float), (p,)).copy()
        if np.any(var <= 0):
            raise ValueError("prior variances must be positive")
        return mean, var

    def logpdf(self, vec) -> float:
        vec = np.asarray(vec, dtype=float)
        mean, var = self.arrays(vec.size)
        return float(np.sum(-0.5 * (vec - mean) ** 2 / var - 0.5 * np.log(2 * np.pi * var)))


@dataclass(frozen=True)
class ChainConfig:
    n_chains: int = 3
    n_iterations: int = 20000
    n_adapt: int = 10000
    sigma_star: float = 1e-8
    seed: int = 0
    init_jitter: float = 0.1
    initial_scale: float = 0.1
    target_accept: float = 0.44

    def __post_init__(self):
        if self.n_chains < 2:
            raise ValueError("need at least two chains")
        if not 0 <= self.n_adapt < self.n_iterations:
            raise ValueError("n_adapt must be smaller than n_iterations")
        if not 0 < self.sigma_star < 1:
            raise ValueError("sigma_star must lie in (0, 1)")

    @classmethod
    def reduced(cls, **kw) -> "ChainConfig":
        """Desk-scale budget: two chains, 4000 adaptive plus 2000 retained iterations."""
        base = dict(n_chains=2, n_iterations=6000, n_adapt=4000)
        base.update(kw)
        return cls(**base)


@dataclass
class PosteriorDraws:
    draws: np.ndarray  # chains x retained x p
    acceptance: np.ndarray  # chains x p, retained phase
    scales: np.ndarray  # chains x p, frozen proposal sd
    registry: PatternRegistry
    starts: np.ndarray
    target: "_Target | None" = field(default=None, repr=False)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    def pooled(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])

    def to_csv(self, names=None) -> str:
        p = self.draws.shape[-1]
        names = names or [f"gamma{j}" for j in range(p)]
        lines = ["iteration,chain," + ",".join(names)]
        for c in range(self.n_chains):
            for t, row in enumerate(self.draws[c]):
                lines.append(f"{t},{c}," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class _Target:
    dataset: ObservedDataset
    registry: PatternRegistry
    prior: PriorSpec
    sigma_star: float


def log_posterior(params: mm.MissingnessParams, dataset: ObservedDataset, registry: PatternRegistry,
                  prior: PriorSpec = PriorSpec(), sigma_star: float = 1e-8) -> float:
    """Unnormalised log posterior; ``-inf`` outside the complete-case constraint."""
    params.check(registry)
    vec = params.vector
    lp = prior.logpdf(vec)
    if registry.M == 1:
        return lp
    model = mm.PatternModel(dataset, registry)
    total = model.pattern_probs_cc(vec).sum(axis=1)
    if np.any(total >= 1 - sigma_star):
        return -np.inf
    return model.loglik(vec) + lp


def constraint_satisfied(params_vec, model: mm.PatternModel, sigma_star: float) -> bool:
    return bool(np.all(model.pattern_probs_cc(params_vec).sum(axis=1) < 1 - sigma_star))


@numba.njit(cache=True)
def _log_expit(x):
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@numba.njit(cache=True)
def _expit(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True)
def _refresh(gamma, Lcc, Lown, own_ptr, coef_block, coef_col, eta_cc, pi_cc, eta_own, S, logq, lown):
    B, ncc = eta_cc.shape
    eta_cc[:, :] = 0.0
    eta_own[:] = 0.0
    for j in range(gamma.shape[0]):
        b, c = coef_block[j], coef_col[j]
        for i in range(ncc):
            eta_cc[b, i] += gamma[j] * (1.0 if c < 0 else Lcc[i, c])
        for r in range(own_ptr[b], own_ptr[b + 1]):
            eta_own[r] += gamma[j] * (1.0 if c < 0 else Lown[r, c])
    S[:] = 0.0
    for b in range(B):
        for i in range(ncc):
            pi_cc[b, i] = _expit(eta_cc[b, i])
            S[i] += pi_cc[b, i]
    for i in range(ncc):
        logq[i] = math.log1p(-S[i])
    for r in range(eta_own.shape[0]):
        lown[r] = _log_expit(eta_own[r])


@numba.njit(cache=True)
def _run_chain(gamma0, Lcc, Lown, own_ptr, coef_block, coef_col, prior_mean, prior_var,
               sigma_star, scale0, z, u, n_adapt, target):
    n_iter, p = z.shape
    B = own_ptr.shape[0] - 1
    ncc = Lcc.shape[0]
    gamma = gamma0.copy()
    log_scale = np.log(scale0.copy())
    eta_cc = np.zeros((B, ncc))
    pi_cc = np.zeros((B, ncc))
    eta_own = np.zeros(Lown.shape[0])
    S = np.zeros(ncc)
    new_pi = np.zeros(ncc)
    new_logq = np.zeros(ncc)
    logq = np.zeros(ncc)
    lown = np.zeros(Lown.shape[0])
    new_lown = np.zeros(Lown.shape[0])
    draws = np.zeros((n_iter - n_adapt, p))
    accepted = np.zeros(p)
    bound = 1.0 - sigma_star
    for t in range(n_iter):
        # recompute cached predictors once per sweep so incremental updates cannot drift
        _refresh(gamma, Lcc, Lown, own_ptr, coef_block, coef_col, eta_cc, pi_cc, eta_own, S, logq, lown)
        for j in range(p):
            b, c = coef_block[j], coef_col[j]
            delta = math.exp(log_scale[j]) * z[t, j]
            feasible = True
            dll = 0.0
            for i in range(ncc):
                x = 1.0 if c < 0 else Lcc[i, c]
                pn = _expit(eta_cc[b, i] + delta * x)
                snew = S[i] - pi_cc[b, i] + pn
                if not snew < bound:
                    feasible = False
                    break
                new_pi[i] = pn
                new_logq[i] = math.log1p(-snew)
                dll += new_logq[i] - logq[i]
            acc = 0.0
            if feasible:
                for r in range(own_ptr[b], own_ptr[b + 1]):
                    x = 1.0 if c < 0 else Lown[r, c]
                    new_lown[r] = _log_expit(eta_own[r] + delta * x)
                    dll += new_lown[r] - lown[r]
                g_old = gamma[j]
                g_new = g_old + delta
                dlp = -0.5 * ((g_new - prior_mean[j]) ** 2 - (g_old - prior_mean[j]) ** 2) / prior_var[j]
                log_ratio = dll + dlp
                if math.log(u[t, j]) < log_ratio:
                    acc = 1.0
                    gamma[j] = g_new
                    for i in range(ncc):
                        x = 1.0 if c < 0 else Lcc[i, c]
                        eta_cc[b, i] += delta * x
                        S[i] += new_pi[i] - pi_cc[b, i]
                        pi_cc[b, i] = new_pi[i]
                        logq[i] = new_logq[i]
                    for r in range(own_ptr[b], own_ptr[b + 1]):
                        x = 1.0 if c < 0 else Lown[r, c]
                        eta_own[r] += delta * x
                        lown[r] = new_lown[r]
            if t < n_adapt:
                log_scale[j] += (acc - target) / (t + 1.0) ** 0.6
            else:
                accepted[j] += acc
        if t >= n_adapt:
            draws[t - n_adapt, :] = gamma
    return draws, accepted / max(n_iter - n_adapt, 1), np.exp(log_scale)


def _pack(model: mm.PatternModel):
    ds, reg = model.dataset, model.registry
    vals = np.nan_to_num(ds.values, nan=0.0)
    Lcc = np.ascontiguousarray(vals[model.cc_rows])
    own = [rows for rows in model.own_rows]
    own_ptr = np.concatenate([[0], np.cumsum([r.size for r in own])]).astype(np.int64)
    Lown = np.ascontiguousarray(vals[np.concatenate(own)] if own else np.zeros((0, ds.schema.K)))
    coef_block, coef_col = [], []
    for b, code in enumerate(c for c in reg.codes if c != 1):
        coef_block.append(b)
        coef_col.append(-1)
        for v in reg.observed_for(code):
            coef_block.append(b)
            coef_col.append(v)
    return Lcc, Lown, own_ptr, np.array(coef_block, dtype=np.int64), np.array(coef_col, dtype=np.int64)


def feasible_start(model: mm.PatternModel, sigma_star: float) -> np.ndarray:
    """Frequency-based start, with intercepts lowered stepwise until feasible."""
    base = model.frequency_init()
    for shift in range(0, 11):
        x = base.copy()
        x[model.offsets[:-1]] -= shift
        if constraint_satisfied(x, model, sigma_star):
            return x
    raise InfeasibleStart("infeasible start: no starting point satisfies the complete-case constraint")


def sample_posterior(dataset: ObservedDataset, registry: PatternRegistry, prior: PriorSpec = PriorSpec(),
                     config: ChainConfig = ChainConfig()) -> PosteriorDraws:
    model = mm.PatternModel(dataset, registry)
    if model.cc_rows.size == 0:
        raise ValueError("positivity unverifiable: no complete cases")
    p = model.p
    mean, var = prior.arrays(p)
    base = feasible_start(model, config.sigma_star)
    Lcc, Lown, own_ptr, coef_block, coef_col = _pack(model)
    n_keep = config.n_iterations - config.n_adapt
    draws = np.zeros((config.n_chains, n_keep, p))
    acc = np.zeros((config.n_chains, p))
    scales = np.zeros((config.n_chains, p))
    starts = np.zeros((config.n_chains, p))
    for c in range(config.n_chains):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, c]))
        jitter = rng.standard_normal(p) * config.init_jitter
        start = base
        for k in range(20):
            cand = base + jitter * 0.5 ** k
            if constraint_satisfied(cand, model, config.sigma_star):
                start = cand
                break
        z = rng.standard_normal((config.n_iterations, p))
        u = rng.random((config.n_iterations, p))
        scale0 = np.full(p, config.initial_scale)
        d, a, s = _run_chain(start, Lcc, Lown, own_ptr, coef_block, coef_col, mean, var,
                             float(config.sigma_star), scale0, z, u, int(config.n_adapt),
                             float(config.target_accept))
        draws[c], acc[c], scales[c], starts[c] = d, a, s, start
    return PosteriorDraws(draws, acc, scales, registry, starts,
                          _Target(dataset, registry, prior, config.sigma_star))


@dataclass(frozen=True)
class GelmanRubin:
    rhat: np.ndarray
    degenerate: np.ndarray

    def passed(self, threshold: float = 1.1) -> np.ndarray:
        return self.rhat <= threshold


def gelman_rubin(draws) -> GelmanRubin:
    """Potential scale reduction per coefficient from ``chains x n x p`` draws."""
    x = draws.draws if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    m, n, _ = x.shape
    if m < 2 or n < 10:
        raise ValueError("need at least 2 chains with 10 draws each")
    chain_means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean(axis=0)
    B = n * chain_means.var(axis=0, ddof=1)
    V = (n - 1) / n * W + B / n
    degenerate = W <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.where(degenerate, 1.0, np.sqrt(V / np.where(degenerate, 1.0, W)))
    return GelmanRubin(rhat, degenerate)


def point_estimate(draws: PosteriorDraws, kind: str = "mean") -> mm.MissingnessParams:
    pooled = draws.pooled()
    if pooled.shape[0] == 0:
        raise ValueError("no retained draws")
    if kind == "mean":
        vec = pooled.mean(axis=0)
    elif kind == "mode":
        if draws.target is None:
            raise ValueError("mode needs the posterior target attached to the draws")
        uniq, first = np.unique(pooled, axis=0, return_index=True)
        uniq = uniq[np.argsort(first)]
        t = draws.target
        lps = [log_posterior(mm.MissingnessParams.from_vector(t.registry, v), t.dataset, t.registry,
                             t.prior, t.sigma_star) for v in uniq]
        vec = uniq[int(np.argmax(lps))]
    else:
        raise ValueError(f"unknown point estimate {kind!r}")
    return mm.MissingnessParams.from_vector(draws.registry, vec)


def fit_cbe(dataset, registry, prior: PriorSpec = PriorSpec(), config: ChainConfig = ChainConfig(),
            kind: str = "mean"):
    """Sample, then summarise: returns ``(params, draws, gelman_rubin)``."""
    draws = sample_posterior(dataset, registry, prior, config)
    return point_estimate(draws, kind), draws, gelman_rubin(draws)
