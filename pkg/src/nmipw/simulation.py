"""Monte Carlo study of CC, full-data MLE, IPW and AIPW under nonmonotone MAR.

Full data ``(Y, A, C1, C2)``: ``(A, C1, C2)`` are normal-CDF transforms of
correlated standard normals and ``Y`` follows a logistic model.  Five
missingness patterns are drawn from the logistic pattern model; every
replicate runs the selected estimators and never aborts on a failed fit.
"""
from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit, ndtr

from . import aipw, cbe, ipw
from . import missingness as mm
from .data_model import ObservedDataset, PatternRegistry, VariableSchema

log = logging.getLogger(__name__)

SCHEMA = VariableSchema(("Y", "A", "C1", "C2"), ("binary", "continuous", "continuous", "continuous"))
# R=2 (Y,A,C1), R=3 (Y,A), R=4 (C1,C2), R=5 (Y,C2)
REGISTRY = PatternRegistry(4, ((0, 1, 2, 3), (0, 1, 2), (0, 1), (2, 3), (0, 3)))
BETA_TRUTH = (-0.3, -0.4, 0.3, 0.5)
GAMMA_TRUTH = ((-1.2, -1.2, -0.6, -0.3), (-1.0, -0.9, -0.8), (-1.2, -0.7, -0.8), (-1.1, -1.0, -0.8))
COEF_NAMES = ("(Intercept)", "A", "C1", "C2")
ESTIMATORS = ("CC", "MLE", "UMLE-IPW", "UMLE-AIPW", "CBE-IPW", "CBE-AIPW")


def logistic_ef() -> ipw.LogisticScore:
    return ipw.LogisticScore(0, (1, 2, 3), COEF_NAMES)


@dataclass(frozen=True)
class SimConfig:
    n: int = 1000
    replicates: int = 1000
    beta: tuple = BETA_TRUTH
    gamma: tuple = GAMMA_TRUTH
    rho12: float = 0.1
    rho13: float = -0.1
    rho23: float = 0.0
    estimators: tuple = ESTIMATORS
    seed: int = 20160101
    chain: cbe.ChainConfig = cbe.ChainConfig.reduced()
    prior: cbe.PriorSpec = cbe.PriorSpec()
    umle: mm.UmleConfig = mm.UmleConfig()

    def __post_init__(self):
        if self.n < 1 or self.replicates < 1:
            raise ValueError("n and replicates must be positive")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ValueError(f"unknown estimators {sorted(unknown)}")
        np.linalg.cholesky(self.covariance())

    def covariance(self) -> np.ndarray:
        return np.array([[1.0, self.rho12, self.rho13],
                         [self.rho12, 1.0, self.rho23],
                         [self.rho13, self.rho23, 1.0]])

    def gamma_params(self) -> mm.MissingnessParams:
        return mm.MissingnessParams(tuple(np.asarray(g, dtype=float) for g in self.gamma))

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["estimators"] = list(self.estimators)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "SimConfig":
        obj = dict(obj)
        if "chain" in obj:
            base = dataclasses.asdict(cbe.ChainConfig.reduced())
            base.update(obj["chain"])
            obj["chain"] = cbe.ChainConfig(**base)
        if "prior" in obj:
            obj["prior"] = cbe.PriorSpec(**obj["prior"])
        if "umle" in obj:
            obj["umle"] = mm.UmleConfig(**obj["umle"])
        for key in ("beta", "estimators"):
            if key in obj:
                obj[key] = tuple(obj[key])
        if "gamma" in obj:
            g = obj["gamma"]
            if isinstance(g, dict):
                g = [g[k] for k in sorted(g, key=int)]
            obj["gamma"] = tuple(tuple(float(v) for v in b) for b in g)
        return cls(**obj)


def generate_full_data(config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """``n x 4`` array of ``(Y, A, C1, C2)``."""
    chol = np.linalg.cholesky(config.covariance())
    X = rng.standard_normal((config.n, 3)) @ chol.T
    U = ndtr(X)
    eta = config.beta[0] + U @ np.asarray(config.beta[1:])
    Y = (rng.random(config.n) < expit(eta)).astype(float)
    return np.column_stack([Y, U])


def pattern_probabilities(full: np.ndarray, params: mm.MissingnessParams,
                          registry: PatternRegistry = REGISTRY) -> np.ndarray:
    """``n x M`` true pattern probabilities, complete case in column 0."""
    cols = []
    for code in registry.codes:
        if code == 1:
            continue
        obs = list(registry.observed_for(code))
        g = params.block(code)
        cols.append(expit(g[0] + full[:, obs] @ g[1:]))
    P = np.column_stack(cols) if cols else np.zeros((full.shape[0], 0))
    return np.column_stack([1.0 - P.sum(axis=1), P])


def generate_missingness(full: np.ndarray, params: mm.MissingnessParams, rng: np.random.Generator,
                         registry: PatternRegistry = REGISTRY, schema: VariableSchema = SCHEMA) -> ObservedDataset:
    P = pattern_probabilities(full, params, registry)
    if np.any(P[:, 0] <= 0):
        raise ValueError("complete-case probability is not positive for every row")
    cum = np.cumsum(P, axis=1)
    u = rng.random(full.shape[0]) * cum[:, -1]
    codes = np.minimum((u[:, None] >= cum).sum(axis=1), registry.M - 1) + 1
    values = full.copy()
    values[~registry.masks()[codes - 1]] = np.nan
    return ObservedDataset(schema, codes, values, registry)


@dataclass
class ReplicateResult:
    replicate: int
    records: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def add(self, estimator, rep: ipw.FitReport | None, truth, converged=True, error=""):
        for j, name in enumerate(COEF_NAMES):
            rec = {"replicate": self.replicate, "estimator": estimator, "coef": name,
                   "estimate": np.nan, "var": np.nan, "cover": np.nan,
                   "converged": bool(converged), "error": error}
            if rep is not None:
                rec["estimate"] = float(rep.beta[j])
                if rep.vcov is not None:
                    v = float(rep.vcov[j, j])
                    rec["var"] = v
                    rec["cover"] = float(ipw.wald_covers(rep.beta[j], np.sqrt(max(v, 0.0)), truth[j]))
            self.records.append(rec)


def _replicate_seeds(seed: int, r: int):
    ss = np.random.SeedSequence([seed, r])
    data_ss, chain_ss = ss.spawn(2)
    return np.random.default_rng(data_ss), int(chain_ss.generate_state(1)[0])


def _psd_min_eig(A):
    return float(np.linalg.eigvalsh(0.5 * (A + A.T)).min())


def replicate_data(config: SimConfig, r: int) -> tuple[np.ndarray, ObservedDataset]:
    """Full data and its observed version for replicate ``r``."""
    rng, _ = _replicate_seeds(config.seed, r)
    full = generate_full_data(config, rng)
    return full, generate_missingness(full, config.gamma_params(), rng)


def run_replicate(config: SimConfig, r: int) -> ReplicateResult:
    _, chain_seed = _replicate_seeds(config.seed, r)
    full, data = replicate_data(config, r)
    ef = logistic_ef()
    bases = aipw.build_default_bases(SCHEMA, REGISTRY, ef)
    truth = np.asarray(config.beta)
    res = ReplicateResult(r)
    res.diagnostics["complete_share"] = float(data.complete.mean())
    est = set(config.estimators)

    if "CC" in est:
        _guarded(res, "CC", truth, lambda: ipw.fit_complete_case(data, ef))
    if "MLE" in est:
        _guarded(res, "MLE", truth, lambda: ipw.fit_full_mle(full, ef))

    fams = [("UMLE", "umle"), ("CBE", "cbe")]
    for fam, path in fams:
        want_ipw, want_aipw = f"{fam}-IPW" in est, f"{fam}-AIPW" in est
        if not (want_ipw or want_aipw):
            continue
        try:
            if path == "umle":
                um = mm.fit_umle(data, REGISTRY, config=config.umle)
                params, ok = um.params, um.converged
                res.diagnostics.update(umle_converged=ok, umle_min_pi1=um.min_pi1, umle_method=um.method,
                                       umle_max_score=um.max_abs_score)
                kind = "corrected"
            else:
                chain = dataclasses.replace(config.chain, seed=chain_seed)
                params, draws, gr = cbe.fit_cbe(data, REGISTRY, config.prior, chain)
                ok = True
                res.diagnostics.update(cbe_rhat_max=float(gr.rhat.max()),
                                       cbe_rhat_pass=float(np.mean(gr.passed())),
                                       cbe_accept_mean=float(draws.acceptance.mean()))
                kind = "cbe_corrected"
        except Exception as exc:  # noqa: BLE001 - any failure is data for the study
            for name, want in ((f"{fam}-IPW", want_ipw), (f"{fam}-AIPW", want_aipw)):
                if want:
                    res.add(name, None, truth, converged=False, error=f"missingness fit: {exc}")
            continue
        try:
            ip = ipw.fit_ipw(data, REGISTRY, params, ef, variance=kind)
            sw = ipw.variance_sandwich(data, REGISTRY, params, ef, ip.beta)
            res.diagnostics[f"{path}_sandwich_gap_min_eig"] = _psd_min_eig(sw - ip.vcov)
            if want_ipw:
                res.add(f"{fam}-IPW", ip, truth, converged=ok and ip.converged)
        except Exception as exc:  # noqa: BLE001
            for name, want in ((f"{fam}-IPW", want_ipw), (f"{fam}-AIPW", want_aipw)):
                if want:
                    res.add(name, None, truth, converged=False, error=f"ipw: {exc}")
            continue
        if want_aipw:
            try:
                ap = aipw.one_step_aipw(data, REGISTRY, params, ef, bases, ip.beta, path)
                res.add(f"{fam}-AIPW", ap, truth, converged=ok and ip.converged)
                res.diagnostics[f"{path}_aipw_le_ipw"] = [bool(a <= b) for a, b in
                                                          zip(np.diag(ap.vcov), np.diag(ip.vcov))]
            except Exception as exc:  # noqa: BLE001
                res.add(f"{fam}-AIPW", None, truth, converged=False, error=f"aipw: {exc}")
    return res


def _guarded(res, name, truth, fn):
    try:
        rep = fn()
        res.add(name, rep, truth, converged=rep.converged)
    except Exception as exc:  # noqa: BLE001
        res.add(name, None, truth, converged=False, error=str(exc))


def _run_one(args):
    config, r = args
    return run_replicate(config, r)


def run_replicates(config: SimConfig, n_jobs: int = 1, start: int = 0) -> list[ReplicateResult]:
    """Replicates ``start .. start + replicates - 1``; results do not depend on ``n_jobs``."""
    idx = range(start, start + config.replicates)
    if n_jobs == 1:
        return [run_replicate(config, r) for r in idx]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_run_one, [(config, r) for r in idx], chunksize=4))


def results_frame(results) -> pd.DataFrame:
    rows = [rec for res in results for rec in res.records]
    return pd.DataFrame(rows, columns=["replicate", "estimator", "coef", "estimate", "var", "cover",
                                       "converged", "error"])


def diagnostics_frame(results) -> pd.DataFrame:
    rows = []
    for res in results:
        d = {"replicate": res.replicate}
        for k, v in res.diagnostics.items():
            d[k] = ";".join(str(x) for x in v) if isinstance(v, list) else v
        rows.append(d)
    return pd.DataFrame(rows)


def summarize(results, truth=BETA_TRUTH, n: int | None = None) -> pd.DataFrame:
    """Bias, Monte Carlo variance, mean estimated variance, ARE and coverage.

    ``results`` is a list of :class:`ReplicateResult` or their long frame.
    Variances are on the scale of the estimate (``var``) and multiplied by
    ``n`` (``*_scaled``) when ``n`` is given.  Only converged replicates
    enter each estimator's row; ``conv_rate`` reports the share.
    """
    df = results if isinstance(results, pd.DataFrame) else results_frame(results)
    truth = dict(zip(COEF_NAMES, truth))
    out = []
    for (est, coef), g in df.groupby(["estimator", "coef"], sort=False):
        total = g["replicate"].nunique()
        ok = g[g["converged"].astype(bool) & g["estimate"].notna()]
        row = {"estimator": est, "coef": coef, "replicates": total, "used": len(ok),
               "conv_rate": 100.0 * len(ok) / total if total else np.nan}
        if len(ok) >= 2:
            row["bias"] = float(ok["estimate"].mean() - truth[coef])
            row["mcv"] = float(ok["estimate"].var(ddof=1))
            row["av"] = float(ok["var"].mean())
            row["cover"] = float(100.0 * ok["cover"].mean())
        else:
            row.update(bias=np.nan, mcv=np.nan, av=np.nan, cover=np.nan)
        out.append(row)
    table = pd.DataFrame(out)
    table["are"] = np.nan
    for fam in ("UMLE", "CBE"):
        for coef in COEF_NAMES:
            a = df[(df.estimator == f"{fam}-AIPW") & (df.coef == coef)]
            b = df[(df.estimator == f"{fam}-IPW") & (df.coef == coef)]
            if a.empty or b.empty:
                continue
            m = a.merge(b, on="replicate", suffixes=("_a", "_i"))
            m = m[m.converged_a.astype(bool) & m.converged_i.astype(bool) & m.var_a.notna() & m.var_i.notna()]
            if len(m):
                sel = (table.estimator == f"{fam}-AIPW") & (table.coef == coef)
                table.loc[sel, "are"] = float(m.var_a.mean() / m.var_i.mean())
    if n is not None:
        table["mcv_scaled"] = table["mcv"] * n
        table["av_scaled"] = table["av"] * n
    order = {e: i for i, e in enumerate(ESTIMATORS)}
    table["_o"] = table.estimator.map(order)
    table["_c"] = table.coef.map({c: i for i, c in enumerate(COEF_NAMES)})
    return table.sort_values(["_c", "_o"]).drop(columns=["_o", "_c"]).reset_index(drop=True)


def format_table(summary: pd.DataFrame, coef: str = "A") -> str:
    """Text table in the usual Bias / MCV / AV / ARE / %Cover layout for one coefficient."""
    sub = summary[summary.coef == coef]
    head = f"{'Method':<12}{'Bias':>8}{'MCV':>9}{'AV':>9}{'ARE':>7}{'%Cover':>8}{'%Conv':>8}"
    lines = [f"coefficient {coef}", head, "-" * len(head)]
    for _, r in sub.iterrows():
        are = "" if np.isnan(r["are"]) else f"{r['are']:.2f}"
        lines.append(f"{r['estimator']:<12}{r['bias']:>8.2f}{r['mcv']:>9.4f}{r['av']:>9.4f}{are:>7}"
                     f"{r['cover']:>8.1f}{r['conv_rate']:>8.1f}")
    return "\n".join(lines)
