"""Command-line front end: ``tabulate``, ``fit`` and ``simulate``.

Exit codes: 0 on success, 2 when the unconstrained missingness fit does not
converge (a partial report is still written), 1 for usage or data errors.
Every run that writes to ``--out-dir`` leaves a ``manifest.json`` with the
resolved configuration, its hash, the seed, input digests and package
versions.  Outputs carry no timestamps, so reruns are bit-identical.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd

from . import aipw, cbe, ipw, simulation
from . import missingness as mm
from .data_model import DataError, combine_sparse_patterns, load_dataset, tabulate_patterns

log = logging.getLogger("nmipw")

EXIT_OK, EXIT_ERROR, EXIT_NONCONVERGED = 0, 1, 2
ESTIMATOR_CHOICES = ("cc", "mle", "ipw", "aipw")

FIT_DEFAULTS = {
    "outcome": None,
    "covariates": None,
    "types": {},
    "estimators": ["ipw", "aipw"],
    "missingness": "umle",
    "variance": None,
    "sigma_star": 1e-8,
    "prior": {"mean": 0.0, "var": 1e3},
    "chain": {},
    "point_estimate": "mean",
    "basis": {},
    "combine_sparse": 0,
    "seed": 0,
    "umle": {},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default, which is reserved for non-convergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dump_json(obj) -> str:
    """Canonical JSON text used for every output file."""
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def config_hash(config: dict) -> str:
    text = json.dumps(_clean(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "pandas", "numba"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


class _Writer:
    """Collects output files so the manifest can list their digests."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir) if out_dir else None
        self.files = {}
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str):
        if self.dir is None:
            return
        data = text.encode("utf-8")
        (self.dir / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def manifest(self, command: str, config: dict, seed, inputs: dict):
        self.write("manifest.json", dump_json({
            "command": command,
            "config": config,
            "config_hash": config_hash(config),
            "seed": seed,
            "inputs": inputs,
            "outputs": dict(sorted(self.files.items())),
            "versions": _versions(),
        }))


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise UsageError(f"config {path}: expected a JSON object")
    return obj


def _require_input(path):
    if path is None:
        raise UsageError("--input is required")
    if not Path(path).is_file():
        raise UsageError(f"input file not found: {path}")
    return path


def _load(path, types, min_count):
    registry, data = load_dataset(path, types or None)
    if min_count:
        registry, data = combine_sparse_patterns(registry, data, int(min_count))
    return registry, data


# ---------------------------------------------------------------- tabulate

def cmd_tabulate(args) -> int:
    path = _require_input(args.input)
    cfg = _read_config(args.config)
    if args.combine_sparse is not None:
        cfg["combine_sparse"] = args.combine_sparse
    registry, data = _load(path, cfg.get("types"), cfg.get("combine_sparse", 0))
    text = tabulate_patterns(registry, data).to_csv()
    sys.stdout.write(text)
    out = _Writer(args.out_dir)
    out.write("patterns.csv", text)
    if out.dir is not None:
        out.manifest("tabulate", cfg, None, {Path(path).name: _sha256(path)})
    return EXIT_OK


# --------------------------------------------------------------------- fit

def resolve_fit_config(args) -> dict:
    cfg = dict(FIT_DEFAULTS)
    user = _read_config(args.config)
    unknown = set(user) - set(FIT_DEFAULTS) - {"estimator"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    cfg.update(user)
    if "estimator" in user:
        cfg["estimators"] = [cfg.pop("estimator")]
    for flag, key in (("missingness", "missingness"), ("sigma_star", "sigma_star"), ("seed", "seed"),
                      ("combine_sparse", "combine_sparse")):
        val = getattr(args, flag)
        if val is not None:
            cfg[key] = val
    if args.estimator is not None:
        cfg["estimators"] = [args.estimator]
    if args.variance is not None:
        cfg["variance"] = args.variance
    if cfg["variance"] is None:
        cfg["variance"] = "corrected" if cfg["missingness"] == "umle" else "cbe_corrected"
    cfg["variance"] = str(cfg["variance"]).replace("-", "_")

    if not cfg["outcome"] or not cfg["covariates"]:
        raise UsageError("config must name 'outcome' and 'covariates'")
    if isinstance(cfg["estimators"], str):
        cfg["estimators"] = [cfg["estimators"]]
    bad = [e for e in cfg["estimators"] if e not in ESTIMATOR_CHOICES]
    if bad:
        raise UsageError(f"unknown estimators {bad}")
    if cfg["missingness"] not in ("umle", "cbe"):
        raise UsageError(f"unknown missingness fit {cfg['missingness']!r}")
    if cfg["variance"] not in ipw.VARIANCE_KINDS:
        raise UsageError(f"unknown variance {cfg['variance']!r}")
    if not 0 < float(cfg["sigma_star"]) < 1:
        raise UsageError("sigma_star must lie in (0, 1)")
    if int(cfg["combine_sparse"]) < 0:
        raise UsageError("combine_sparse must be non-negative")
    return cfg


def _fit_missingness(cfg, registry, data, out: _Writer, names):
    """Returns ``(params, converged, summary dict)``."""
    if cfg["missingness"] == "umle":
        rep = mm.fit_umle(data, registry, config=mm.UmleConfig(**cfg["umle"]))
        summary = {"method": "umle", **rep.to_json()}
        if not rep.converged:
            summary["advice"] = "unconstrained fit did not converge; rerun with --missingness cbe"
        return rep.params, rep.converged, summary
    chain = cbe.ChainConfig(**{**cfg["chain"], "sigma_star": float(cfg["sigma_star"]), "seed": int(cfg["seed"])})
    prior = cbe.PriorSpec(**cfg["prior"])
    params, draws, gr = cbe.fit_cbe(data, registry, prior, chain, kind=cfg["point_estimate"])
    coef_names = mm.coefficient_names(registry, names)
    out.write("draws.csv", draws.to_csv(coef_names))
    pooled = draws.pooled()
    model = mm.PatternModel(data, registry)
    violations = int(sum(not cbe.constraint_satisfied(v, model, chain.sigma_star) for v in np.unique(pooled, axis=0)))
    summary = {"method": "cbe", **params.to_json(), "coefficients": coef_names,
               "rhat": gr.rhat, "rhat_degenerate": gr.degenerate, "rhat_pass": gr.passed(),
               "acceptance": draws.acceptance.mean(axis=0), "posterior_sd": pooled.std(axis=0, ddof=1),
               "constraint_violations": violations, "chain": dataclasses.asdict(chain)}
    return params, True, summary


def _odds_table(reports) -> pd.DataFrame:
    rows = []
    for rep in reports:
        orr = rep.odds_ratios()
        for name, (o, lo, hi), b, se in zip(rep.names, orr, rep.beta, rep.se):
            rows.append({"estimator": rep.estimator, "term": name, "beta": b, "se": se,
                         "odds_ratio": o, "lower95": lo, "upper95": hi})
    return pd.DataFrame(rows, columns=["estimator", "term", "beta", "se", "odds_ratio", "lower95", "upper95"])


def _format_odds(table: pd.DataFrame) -> str:
    lines = [f"{'estimator':<10}{'term':<14}{'OR':>9}{'95% CI':>22}"]
    for _, r in table.iterrows():
        ci = f"({r.lower95:.3f}, {r.upper95:.3f})"
        lines.append(f"{r.estimator:<10}{r.term:<14}{r.odds_ratio:>9.3f}{ci:>22}")
    return "\n".join(lines) + "\n"


def run_fit(cfg: dict, input_path, out: _Writer) -> tuple[int, list]:
    """The ``fit`` pipeline on a resolved configuration; returns ``(exit code, reports)``."""
    registry, data = _load(input_path, cfg["types"], cfg["combine_sparse"])
    out.write("patterns.csv", tabulate_patterns(registry, data).to_csv())
    ef = ipw.LogisticScore.from_names(data.schema, cfg["outcome"], cfg["covariates"])
    if not data.schema.is_binary(ef.outcome):
        raise DataError(f"outcome {cfg['outcome']!r} must be binary 0/1")
    wanted = list(dict.fromkeys(cfg["estimators"]))
    reports, code = [], EXIT_OK

    if "cc" in wanted:
        reports.append(ipw.fit_complete_case(data, ef))
    if "mle" in wanted:
        if not data.complete.all():
            raise DataError("estimator 'mle' needs fully observed data")
        reports.append(ipw.fit_full_mle(data.values, ef))

    if "ipw" in wanted or "aipw" in wanted:
        params, ok, summary = _fit_missingness(cfg, registry, data, out, data.schema.names)
        out.write("missingness.json", dump_json(summary))
        if not ok:
            log.warning("unconstrained missingness fit did not converge; weighted estimators skipped")
            code = EXIT_NONCONVERGED
        else:
            ip = ipw.fit_ipw(data, registry, params, ef, variance=cfg["variance"])
            ip.estimator = "ipw"
            if "ipw" in wanted:
                reports.append(ip)
            if "aipw" in wanted:
                path = cfg["missingness"]
                bases = aipw.bases_from_spec(cfg["basis"], data.schema, registry, ef)
                ap = aipw.one_step_aipw(data, registry, params, ef, bases, ip.beta, path)
                ap.extra["beta_ipw"] = ip.beta
                reports.append(ap)

    for rep in reports:
        out.write(f"fit_{rep.estimator}.json", dump_json(rep.to_json()))
    table = _odds_table(reports)
    out.write("odds_ratios.csv", table.to_csv(index=False, lineterminator="\n"))
    sys.stdout.write(_format_odds(table))
    return code, reports


def cmd_fit(args) -> int:
    path = _require_input(args.input)
    if args.out_dir is None:
        raise UsageError("--out-dir is required")
    cfg = resolve_fit_config(args)
    out = _Writer(args.out_dir)
    code, _ = run_fit(cfg, path, out)
    out.manifest("fit", cfg, cfg["seed"], {Path(path).name: _sha256(path)})
    return code


# ---------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    if args.out_dir is None:
        raise UsageError("--out-dir is required")
    raw = _read_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.sigma_star is not None:
        raw["chain"] = {**raw.get("chain", {}), "sigma_star": args.sigma_star}
    try:
        config = simulation.SimConfig.from_json(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid simulation config: {exc}") from None
    results = simulation.run_replicates(config, n_jobs=args.jobs)
    summary = simulation.summarize(results, config.beta, n=config.n)
    out = _Writer(args.out_dir)
    csv = dict(index=False, lineterminator="\n")
    out.write("results.csv", simulation.results_frame(results).to_csv(**csv))
    out.write("diagnostics.csv", simulation.diagnostics_frame(results).to_csv(**csv))
    out.write("summary.csv", summary.to_csv(**csv))
    text = "\n\n".join(simulation.format_table(summary, c) for c in simulation.COEF_NAMES) + "\n"
    out.write("table.txt", text)
    sys.stdout.write(text)
    resolved = config.to_json()
    out.manifest("simulate", resolved, config.seed, {})
    return EXIT_OK


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nmipw", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    tab = sub.add_parser("tabulate", help="tabulate missingness patterns of a CSV file")
    tab.add_argument("--input", help="CSV file; NA or an empty cell marks a missing value")
    tab.add_argument("--config", help="JSON config (optional 'types', 'combine_sparse')")
    tab.add_argument("--out-dir", help="also write patterns.csv and a manifest here")
    tab.add_argument("--combine-sparse", type=int, metavar="N", help="merge incomplete patterns with < N rows")

    fit = sub.add_parser("fit", help="fit the missingness model and the weighted estimators")
    fit.add_argument("--input", help="CSV file; NA or an empty cell marks a missing value")
    fit.add_argument("--config", help="JSON config naming 'outcome' and 'covariates'")
    fit.add_argument("--out-dir", help="directory for reports and the manifest")
    fit.add_argument("--seed", type=int, help="sampler seed (default 0)")
    fit.add_argument("--estimator", choices=ESTIMATOR_CHOICES, help="run a single estimator")
    fit.add_argument("--missingness", choices=("umle", "cbe"), help="missingness-model fit (default umle)")
    fit.add_argument("--variance", choices=("corrected", "cbe-corrected", "sandwich"),
                     help="IPW variance (default follows --missingness)")
    fit.add_argument("--combine-sparse", type=int, metavar="N", help="merge incomplete patterns with < N rows")
    fit.add_argument("--sigma-star", type=float, metavar="X", help="complete-case margin for cbe (default 1e-8)")

    sim = sub.add_parser("simulate", help="run the Monte Carlo study")
    sim.add_argument("--config", help="JSON study config; omitted keys take the default design")
    sim.add_argument("--out-dir", help="directory for results, summary and manifest")
    sim.add_argument("--seed", type=int, help="study seed")
    sim.add_argument("--sigma-star", type=float, metavar="X", help="complete-case margin for cbe")
    sim.add_argument("--jobs", type=int, default=1, help="worker processes; outputs do not depend on it")
    return parser


COMMANDS = {"tabulate": cmd_tabulate, "fit": cmd_fit, "simulate": cmd_simulate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, DataError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"nmipw {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
