"""Optimal augmented IPW within finite-dimensional restricted spaces.

The full-data space is spanned by ``U*(L; beta) = f(X) (Y - expit(beta . (1, X)))``
for a feature vector ``f = [1, X, h(X)]``.  The augmentation space is spanned by
``A*_rk = [1(R=1)/pi_1 - 1(R=r)/pi_r] pi_r (1 - pi_r) t_rk(L_(r))``, one block per
incomplete pattern.  With ``t_r`` containing ``(1, L_(r))`` the missingness
scores lie in that span.

Terms are monomials written as sorted tuples of variable indices: ``()`` is the
constant, ``(i,)`` a main effect, ``(i, i)`` a square and ``(i, j)`` an
interaction.  Powers of binary variables collapse (``x**2 == x``).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import missingness as mm
from .data_model import ObservedDataset, PatternRegistry, VariableSchema
from .ipw import FitReport, LogisticScore, _filled, _moments, ipw_weights
from .linalg import independent_columns, inv_psd, solve_psd, symmetrize

Term = tuple


def canonical(term, schema: VariableSchema | None = None) -> Term:
    term = tuple(sorted(int(i) for i in term))
    if schema is None:
        return term
    out = []
    for i in term:
        if schema.is_binary(i) and i in out:
            continue
        out.append(i)
    return tuple(out)


def dedupe(terms, schema=None) -> tuple[Term, ...]:
    seen, out = set(), []
    for t in terms:
        c = canonical(t, schema)
        if c not in seen:
            seen.add(c)
            out.append(c)
    return tuple(out)


def quadratic_terms(variables) -> list[Term]:
    """Main effects, squares and pairwise interactions, in that order."""
    variables = list(variables)
    mains = [(v,) for v in variables]
    squares = [(v, v) for v in variables]
    inter = [(a, b) for a, b in itertools.combinations(variables, 2)]
    return mains + squares + inter


def term_values(L: np.ndarray, terms) -> np.ndarray:
    out = np.ones((L.shape[0], len(terms)))
    for k, t in enumerate(terms):
        for i in t:
            out[:, k] *= L[:, i]
    return out


def term_label(term, names) -> str:
    if not term:
        return "1"
    parts = []
    for i, grp in itertools.groupby(term):
        p = len(list(grp))
        parts.append(names[i] if p == 1 else f"{names[i]}^{p}")
    return ":".join(parts)


def parse_term(text: str, schema: VariableSchema) -> Term:
    """Parse ``"1"``, ``"A"``, ``"A^2"`` or ``"A:C1"`` into a term."""
    text = text.strip()
    if text == "1":
        return ()
    out = []
    for part in text.split(":"):
        name, _, power = part.partition("^")
        out.extend([schema.index(name.strip())] * (int(power) if power else 1))
    return tuple(sorted(out))


@dataclass(frozen=True)
class FullDataBasis:
    outcome: int
    covariates: tuple[int, ...]
    h_terms: tuple[Term, ...]
    terms: tuple[Term, ...]

    @classmethod
    def build(cls, ef: LogisticScore, h_terms, schema=None) -> "FullDataBasis":
        h_terms = tuple(canonical(t, schema) for t in h_terms)
        base = [()] + [(c,) for c in ef.covariates]
        return cls(ef.outcome, tuple(ef.covariates), h_terms, dedupe(base + list(h_terms), schema))

    @property
    def l(self) -> int:
        return len(self.terms)

    @property
    def q(self) -> int:
        return 1 + len(self.covariates)

    def features(self, L):
        return term_values(L, self.terms)

    def _design(self, L):
        return np.column_stack([np.ones(L.shape[0]), L[:, list(self.covariates)]])

    def evaluate(self, L, beta):
        r = L[:, self.outcome] - expit(self._design(L) @ beta)
        return self.features(L) * r[:, None]

    def jacobian(self, L, beta):
        X = self._design(L)
        p = expit(X @ beta)
        return -(p * (1 - p))[:, None, None] * self.features(L)[:, :, None] * X[:, None, :]


@dataclass(frozen=True)
class AugmentationBasis:
    """Per incomplete pattern (codes ``2..M``), the terms ``t_r`` over ``L_(r)``."""

    pattern_terms: tuple[tuple[Term, ...], ...]

    @property
    def k(self) -> int:
        return sum(len(t) for t in self.pattern_terms)

    def evaluate(self, dataset: ObservedDataset, registry: PatternRegistry,
                 params: mm.MissingnessParams) -> np.ndarray:
        if len(self.pattern_terms) != registry.M - 1:
            raise ValueError("augmentation basis does not match the registry")
        L = _filled(dataset)
        cc = np.flatnonzero(dataset.complete)
        model = mm.PatternModel(dataset, registry)
        probs_cc = model.pattern_probs_cc(params.vector)
        pi1 = 1.0 - probs_cc.sum(axis=1)
        cols = []
        for b, (code, terms) in enumerate(zip(range(2, registry.M + 1), self.pattern_terms)):
            if not terms:
                continue
            allowed = set(registry.observed_for(code))
            if any(i not in allowed for t in terms for i in t):
                raise ValueError(f"pattern {code} terms use unobserved variables")
            own = model.own_rows[b]
            pr_own = expit(model.X_own[b] @ params.block(code))
            pr_cc = probs_cc[:, b]
            factor = np.zeros(dataset.n)
            factor[cc] = pr_cc * (1 - pr_cc) / pi1
            factor[own] = -(1 - pr_own)
            cols.append(term_values(L, terms) * factor[:, None])
        if not cols:
            return np.zeros((dataset.n, 0))
        return np.hstack(cols)

    def labels(self, names) -> list[str]:
        return [f"R{c}:{term_label(t, names)}"
                for c, terms in enumerate(self.pattern_terms, start=2) for t in terms]


def build_default_bases(schema: VariableSchema, registry: PatternRegistry,
                        ef: LogisticScore) -> tuple[FullDataBasis, AugmentationBasis]:
    """Quadratic recipe: ``h`` and every ``t_r`` hold main effects, squares, interactions.

    Each ``t_r`` also starts with the constant so the missingness score is spanned.
    Squares of binary variables collapse onto their main effect.
    """
    h = quadratic_terms(ef.covariates)
    fb = FullDataBasis.build(ef, h, schema)
    pattern_terms = []
    for code in registry.codes:
        if code == 1:
            continue
        obs = registry.observed_for(code)
        pattern_terms.append(dedupe([()] + quadratic_terms(obs), schema))
    return fb, AugmentationBasis(tuple(pattern_terms))


def bases_from_spec(spec: dict, schema: VariableSchema, registry: PatternRegistry,
                    ef: LogisticScore) -> tuple[FullDataBasis, AugmentationBasis]:
    """Build bases from ``{"h": [...], "t": {"2": [...], ...}}`` term strings.

    Missing keys fall back to the quadratic default for that part.
    """
    fb_default, ab_default = build_default_bases(schema, registry, ef)
    if "h" in spec:
        fb = FullDataBasis.build(ef, [parse_term(s, schema) for s in spec["h"]], schema)
    else:
        fb = fb_default
    tspec = spec.get("t", {})
    pattern_terms = []
    for b, code in enumerate(range(2, registry.M + 1)):
        if str(code) in tspec:
            pattern_terms.append(dedupe([parse_term(s, schema) for s in tspec[str(code)]], schema))
        else:
            pattern_terms.append(ab_default.pattern_terms[b])
    return fb, AugmentationBasis(tuple(pattern_terms))


def center_augmentation(A: np.ndarray, path: str) -> np.ndarray:
    """Subtract column means on the constrained-Bayes path; identity for UMLE."""
    if path == "cbe":
        return A - A.mean(axis=0)
    if path == "umle":
        return A
    raise ValueError(f"unknown path {path!r}")


@dataclass
class OptMatrices:
    U11: np.ndarray
    U12: np.ndarray
    U22: np.ndarray
    H1: np.ndarray
    H2: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    n: int
    kept_u: np.ndarray
    kept_a: np.ndarray
    warnings: list = field(default_factory=list)

    def block_residual(self) -> float:
        G = np.block([[self.U11, self.U12], [self.U12.T, self.U22]])
        C = np.hstack([self.C1, self.C2])
        H = np.hstack([self.H1, self.H2])
        return float(np.max(np.abs(C @ G - H), initial=0.0))


@dataclass
class _Evaluated:
    w: np.ndarray
    U: np.ndarray
    dU: np.ndarray
    A: np.ndarray


def _evaluate(dataset, registry, params, fbasis, abasis, beta, path):
    w = ipw_weights(dataset, registry, params)
    L = _filled(dataset)
    cc = w != 0
    U = np.zeros((dataset.n, fbasis.l))
    U[cc] = fbasis.evaluate(L[cc], beta)
    dU = np.zeros((dataset.n, fbasis.l, fbasis.q))
    dU[cc] = fbasis.jacobian(L[cc], beta)
    if registry.M > 1 and abasis.k:
        A = center_augmentation(abasis.evaluate(dataset, registry, params), path)
    else:
        A = np.zeros((dataset.n, 0))
    return _Evaluated(w, U, dU, A)


def _opt_from(ev: _Evaluated, kept_u=None, kept_a=None) -> OptMatrices:
    warnings = []
    w, n = ev.w, ev.w.shape[0]
    if kept_u is None:
        kept_u = independent_columns(ev.U * w[:, None])
        if kept_u.size < ev.U.shape[1]:
            warnings.append(f"dropped {ev.U.shape[1] - kept_u.size} dependent full-data column(s)")
    if kept_a is None:
        kept_a = independent_columns(ev.A)
        if kept_a.size < ev.A.shape[1]:
            warnings.append(f"dropped {ev.A.shape[1] - kept_a.size} dependent augmentation column(s)")
    U, A, dU = ev.U[:, kept_u], ev.A[:, kept_a], ev.dU[:, kept_u, :]
    wU = U * w[:, None]
    U11 = symmetrize(wU.T @ wU / n)
    U12 = wU.T @ A / n
    U22 = symmetrize(A.T @ A / n)
    H1 = -np.einsum("i,ilq->lq", w, dU).T / n
    q, l, k = H1.shape[0], U.shape[1], A.shape[1]
    H2 = np.zeros((q, k))
    G = np.block([[U11, U12], [U12.T, U22]])
    C = solve_psd(G, np.hstack([H1, H2]).T, warnings, "block Gram matrix").T
    return OptMatrices(U11, U12, U22, H1, H2, C[:, :l], C[:, l:], n, kept_u, kept_a, warnings)


def estimate_opt_matrices(dataset: ObservedDataset, registry: PatternRegistry, params: mm.MissingnessParams,
                          fbasis: FullDataBasis, abasis: AugmentationBasis, beta, path: str = "umle") -> OptMatrices:
    """Empirical ``U11, U12, U22, H1`` at ``beta`` and the optimal ``(C1, C2)``.

    ``U11``, ``U12`` and ``H1`` are inverse-probability-weighted averages over
    complete cases; ``U22`` averages the augmentation over all rows.
    """
    ev = _evaluate(dataset, registry, params, fbasis, abasis, np.asarray(beta, dtype=float), path)
    return _opt_from(ev)


def aipw_variance(opt: OptMatrices, asymptotic: bool = False) -> np.ndarray:
    """``(H1 U^11 H1')^-1`` with ``U^11 = (U11 - U12 U22^-1 U12')^-1``.

    Divided by ``n`` unless ``asymptotic``, so that it is the variance of the
    estimate itself.
    """
    warnings = opt.warnings
    if opt.U22.size:
        schur = opt.U11 - opt.U12 @ solve_psd(opt.U22, opt.U12.T, warnings, "U22")
    else:
        schur = opt.U11
    Uup = inv_psd(symmetrize(schur), warnings, "U11 Schur complement")
    V = inv_psd(symmetrize(opt.H1 @ Uup @ opt.H1.T), warnings, "H1 U^11 H1'")
    V = symmetrize(V)
    return V if asymptotic else V / opt.n


def one_step_aipw(dataset: ObservedDataset, registry: PatternRegistry, params: mm.MissingnessParams,
                  ef: LogisticScore, bases, beta_ipw, path: str = "umle") -> FitReport:
    """One Newton-type update of the IPW estimate towards the optimal AIPW root.

    The optimal ``(C1, C2)`` are only defined up to a left multiplication; they
    are rescaled so that the combined moment has the same Jacobian as the IPW
    moment, which makes the update use the IPW Jacobian as its slope.
    """
    fbasis, abasis = bases
    if tuple(fbasis.covariates) != tuple(ef.covariates) or fbasis.outcome != ef.outcome:
        raise ValueError("full-data basis must extend the estimating function")
    beta_ipw = np.asarray(beta_ipw, dtype=float)
    ev = _evaluate(dataset, registry, params, fbasis, abasis, beta_ipw, path)
    opt = _opt_from(ev)
    n = dataset.n
    _, D = _moments(_filled(dataset), ev.w, ef, beta_ipw)
    if np.linalg.matrix_rank(D) < ef.q:
        raise np.linalg.LinAlgError("IPW Jacobian is singular")
    U, A = ev.U[:, opt.kept_u], ev.A[:, opt.kept_a]
    psi = (ev.w[:, None] * U) @ opt.C1.T + A @ opt.C2.T
    slope = opt.C1 @ opt.H1.T  # minus the Jacobian of the combined moment
    K = np.linalg.solve(slope.T, -D.T).T
    C1n, C2n = K @ opt.C1, K @ opt.C2
    psi_n = (ev.w[:, None] * U) @ C1n.T + A @ C2n.T
    step = np.linalg.solve(-n * D, psi_n.sum(axis=0))
    beta = beta_ipw + step

    opt_new = estimate_opt_matrices(dataset, registry, params, fbasis, abasis, beta, path)
    rep = FitReport(beta=beta, vcov=aipw_variance(opt_new), variance_kind="aipw", iterations=1,
                    converged=True, names=tuple(ef.names), n=n, estimator="aipw",
                    warnings=opt.warnings + opt_new.warnings)
    rep.extra = {"path": path, "l": int(opt.kept_u.size), "k": int(opt.kept_a.size),
                 "moment_at_ipw": [float(v) for v in psi.mean(axis=0)]}
    return rep


def aipw_moment(dataset, registry, params, fbasis, abasis, beta, path="umle") -> np.ndarray:
    """Mean optimal restricted moment with ``(C1, C2)`` re-estimated at ``beta``."""
    beta = np.asarray(beta, dtype=float)
    ev = _evaluate(dataset, registry, params, fbasis, abasis, beta, path)
    opt = _opt_from(ev)
    U, A = ev.U[:, opt.kept_u], ev.A[:, opt.kept_a]
    return ((ev.w[:, None] * U) @ opt.C1.T + A @ opt.C2.T).mean(axis=0)
