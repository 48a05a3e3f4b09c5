"""Command-line interface: ``ddpstar {fit,predict,simulate,diagnose,roc}``.

Run configuration is JSON::

    {
      "response": "y",
      "categorical": ["sex"],
      "terms": "sex + smooth(age, J=23, by=sex)",
      "hyper": {"a_tau2": 1, "b_tau2": 0.05},
      "L": 20, "iters": 5000, "burnin": 1000, "thin": 1,
      "chains": 1, "seed": 0
    }

Every key is optional except ``terms``; command-line flags override the
file. All tabular input and output is CSV with a header row.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, diagnostics, scenarios
from .formula import read_dataset
from .functionals import FunctionalRequest, posterior_functional, roc_curve
from .model import fit as fit_model
from .persist import ArtifactError, load_draws, save_draws

log = logging.getLogger("ddpstar")

CONFIG_KEYS = {"data", "response", "categorical", "terms", "hyper", "L", "iters", "burnin",
               "thin", "chains", "seed", "out"}


class CLIError(RuntimeError):
    pass


@dataclass
class RunConfig:
    terms: object
    data: str | None = None
    response: str = "y"
    categorical: list = field(default_factory=list)
    hyper: dict = field(default_factory=dict)
    L: int = 20
    iters: int = 5000
    burnin: int = 1000
    thin: int = 1
    chains: int = 1
    seed: int = 0
    out: str | None = None

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise CLIError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(raw, dict):
            raise CLIError(f"{path}: the configuration must be a JSON object")
        unknown = set(raw) - CONFIG_KEYS
        if unknown:
            raise CLIError(f"{path}: unknown configuration key(s) {sorted(unknown)}")
        if "terms" not in raw:
            raise CLIError(f"{path}: the configuration needs a 'terms' entry")
        return cls(**raw)

    def override(self, args) -> "RunConfig":
        for k in ("data", "iters", "burnin", "thin", "chains", "seed", "out"):
            v = getattr(args, k, None)
            if v is not None:
                setattr(self, k, v)
        return self


def max_workers() -> int:
    env = os.environ.get("DDPSTAR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CLIError(f"DDPSTAR_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def parse_grid(text: str | None):
    """``"lo:hi:n"`` for an equispaced grid or a comma-separated list."""
    if text is None:
        return None
    text = text.strip()
    try:
        if ":" in text:
            lo, hi, n = text.split(":")
            return np.linspace(float(lo), float(hi), int(n))
        return np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError:
        raise CLIError(f"cannot parse grid {text!r}; use lo:hi:n or a comma list") from None


def parse_at(text: str) -> pd.DataFrame:
    """``"x=0.1,0.2;sex=Men"``: the Cartesian product of per-variable values."""
    names, values = [], []
    for part in (p.strip() for p in text.split(";")):
        if not part:
            continue
        if "=" not in part:
            raise CLIError(f"--at entry {part!r} must look like name=v1,v2")
        name, vals = part.split("=", 1)
        items = [v.strip() for v in vals.split(",") if v.strip()]
        conv = []
        for v in items:
            try:
                conv.append(float(v))
            except ValueError:
                conv.append(v)
        names.append(name.strip())
        values.append(conv)
    if not names:
        raise CLIError("--at is empty")
    return pd.DataFrame(list(itertools.product(*values)), columns=names)


def _queries(args, manifest) -> pd.DataFrame:
    if args.at:
        q = parse_at(args.at)
    elif args.data:
        q = pd.read_csv(args.data)
    else:
        raise CLIError("give query points with --at or a CSV via --data")
    for c in manifest.get("categorical", []):
        if c in q.columns:
            q[c] = q[c].astype(str)
    return q


def _fit_dir(path) -> Path:
    p = Path(path)
    if (p / "manifest.json").exists():
        return p
    chains = sorted(p.glob("chain_*"))
    if chains:
        raise CLIError(f"{p} holds {len(chains)} chains; point at one of them, e.g. {chains[0]}")
    raise CLIError(f"{p} is not a fit artifact (no manifest.json)")


# ------------------------------------------------------------ commands

def _fit_chain(cfg: RunConfig, data: pd.DataFrame, chain: int):
    return fit_model(data, cfg.terms, response=cfg.response, categorical=cfg.categorical,
                     hyper=cfg.hyper, L=cfg.L, iters=cfg.iters, burnin=cfg.burnin,
                     thin=cfg.thin, seed=cfg.seed, stream=chain)


def _write_chain(cfg: RunConfig, draws, chain: int, out: Path) -> dict:
    meta = draws.manifest["meta"]
    # wall time goes to the run log so that identical runs give identical artifacts
    elapsed = meta.pop("elapsed_seconds")
    meta["chain"] = chain
    save_draws(draws, out)
    occ = draws.occupancy
    run_log = {"chain": chain, "seed": cfg.seed, "stream": chain, "iters": cfg.iters,
               "burnin": cfg.burnin, "thin": cfg.thin, "retained": draws.n_draws,
               "wall_seconds": elapsed,
               "occupancy_mean": float(occ[draws.iterations].mean()) if draws.n_draws else None,
               "occupancy_max": int(occ.max()), "warnings": meta.get("warnings", [])}
    (out / "run_log.json").write_text(json.dumps(run_log, indent=2))
    return run_log


def cmd_fit(args) -> int:
    if args.config is None:
        raise CLIError("fit needs --config")
    cfg = RunConfig.from_json(args.config).override(args)
    if not cfg.data:
        raise CLIError("fit needs --data (or 'data' in the configuration)")
    if not cfg.out:
        raise CLIError("fit needs --out")
    if cfg.chains < 1:
        raise CLIError("--chains must be at least 1")
    data = read_dataset(cfg.data, cfg.categorical)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    targets = [out] if cfg.chains == 1 else [out / f"chain_{k}" for k in range(cfg.chains)]
    workers = min(cfg.chains, max_workers())
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            chains = list(ex.map(_fit_chain, [cfg] * cfg.chains, [data] * cfg.chains,
                                 range(cfg.chains)))
    else:
        chains = [_fit_chain(cfg, data, k) for k in range(cfg.chains)]
    logs = [_write_chain(cfg, d, k, t) for k, (d, t) in enumerate(zip(chains, targets))]
    for lg in logs:
        print(f"chain {lg['chain']}: {cfg.iters} iterations in {lg['wall_seconds']:.1f}s, "
              f"mean occupied components {lg['occupancy_mean']:.2f}")
        for w in lg["warnings"]:
            print(f"warning: {w}", file=sys.stderr)
    return 0


def cmd_predict(args) -> int:
    fit_dir = _fit_dir(args.fit)
    draws = load_draws(fit_dir)
    queries = _queries(args, draws.manifest)
    requests = FunctionalRequest.parse_list(args.functionals)
    res = posterior_functional(draws, queries, requests, level=args.level, ygrid=parse_grid(args.ygrid))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    queries.rename_axis("query").to_csv(out / "queries.csv")
    res.to_csv(out / "functionals.csv")
    print(f"wrote {len(res.table)} rows for {len(queries)} query point(s) to {out / 'functionals.csv'}")
    return 0


def cmd_simulate(args) -> int:
    if args.scenario is None or args.n is None:
        raise CLIError("simulate needs --scenario and --n")
    df = scenarios.generate(args.scenario, args.n, seed=args.seed or 0)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(args.out, index=False, float_format="%.17g")
        print(f"wrote {len(df)} rows to {args.out}")
    else:
        df.to_csv(sys.stdout, index=False, float_format="%.17g")
    return 0


def cmd_diagnose(args) -> int:
    fit_dir = _fit_dir(args.fit)
    draws = load_draws(fit_dir)
    if not args.data:
        raise CLIError("diagnose needs the training data via --data")
    data = read_dataset(args.data, draws.manifest.get("categorical", []))
    anchors = parse_at(args.at) if args.at else None
    rep = diagnostics.diagnose(draws, data, n_rep=args.n_rep, seed=args.seed or 0, anchors=anchors)
    out = rep.write(args.out)
    ks = rep.ks_residuals()
    print(f"residual KS p-value {ks.pvalue:.3g}; PPC flagged: {rep.ppc.flagged or 'none'}; "
          f"reports in {out}")
    return 0


def cmd_roc(args) -> int:
    dd = load_draws(_fit_dir(args.fit_d))
    dn = load_draws(_fit_dir(args.fit_nd))
    queries = _queries(args, dd.manifest)
    t = parse_grid(args.tgrid)
    roc, auc = roc_curve(dd, dn, queries, t_grid=t, level=args.level)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    queries.rename_axis("query").to_csv(out / "queries.csv")
    roc.to_csv(out / "roc.csv")
    auc.to_csv(out / "auc.csv")
    for _, r in auc.table.iterrows():
        print(f"query {int(r['query'])}: AUC {r['median']:.4f} ({r['lo']:.4f}, {r['hi']:.4f})")
    return 0


# ------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddpstar", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="run the Gibbs sampler and write a fit artifact")
    f.add_argument("--config", required=True, help="JSON run configuration")
    f.add_argument("--data", help="training CSV (overrides the configuration)")
    f.add_argument("--out", help="output directory")
    f.add_argument("--seed", type=int)
    f.add_argument("--iters", type=int, help="total sweeps including burn-in")
    f.add_argument("--burnin", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--chains", type=int)
    f.set_defaults(func=cmd_fit)

    def add_query(sp):
        sp.add_argument("--at", help='query grid, e.g. "x=0.1,0.5,0.9;sex=Men"')
        sp.add_argument("--data", help="CSV of query points")
        sp.add_argument("--level", type=float, default=0.95, help="credible level")
        sp.add_argument("--out", required=True, help="output directory")

    pr = sub.add_parser("predict", help="posterior functionals at query points")
    pr.add_argument("--fit", required=True, help="fit artifact directory")
    pr.add_argument("--functionals", default="density,mean,variance,quantile:0.25:0.5:0.75",
                    help="comma list: density, mean, variance, quantile:p..., exceedance:y...")
    pr.add_argument("--ygrid", help="density grid, lo:hi:n or comma list")
    add_query(pr)
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("simulate", help="simulate a benchmark scenario")
    s.add_argument("--scenario", required=True, help="I to VIII")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="output CSV (stdout when omitted)")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("diagnose", help="posterior predictive checks, residuals, convergence")
    d.add_argument("--fit", required=True)
    d.add_argument("--data", required=True, help="training CSV")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--n-rep", type=int, default=500, help="replicates for predictive checks")
    d.add_argument("--at", help="anchor points for convergence functionals")
    d.set_defaults(func=cmd_diagnose)

    r = sub.add_parser("roc", help="covariate-specific ROC curves and AUC")
    r.add_argument("--fit-d", required=True, help="fit artifact for the diseased population")
    r.add_argument("--fit-nd", required=True, help="fit artifact for the non-diseased population")
    r.add_argument("--tgrid", help="false-positive-rate grid (default 0:1:201)")
    add_query(r)
    r.set_defaults(func=cmd_roc)
    return p


def _where(exc: BaseException) -> str:
    tb = traceback.extract_tb(exc.__traceback__)
    if not tb:
        return ""
    fr = tb[-1]
    return f" [{Path(fr.filename).name}:{fr.lineno}]"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except (CLIError, ArtifactError, ValueError, RuntimeError, OSError, KeyError,
            np.linalg.LinAlgError) as e:
        print(f"error: {e}{_where(e)}", file=sys.stderr)
        return 1
    log.info("%s finished in %.2fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
