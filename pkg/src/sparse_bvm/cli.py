"""Command-line entry point: ``sparse-bvm {generate,fit,diagnose,coverage,audit}``."""

from __future__ import annotations

import argparse
import json
import math
import sys
import traceback

from .diagnostics import (assumption_audit, coverage_experiment, hellinger_contraction, renyi_separation,
                          score_envelope_experiment, support_recovery_experiment, tv_between_support_mixtures)
from .experiments import (SUBCOMMANDS, ArtifactWriter, ConfigError, generate_dataset, load_config,
                          make_prior_for, validate_config)
from .posterior import ExactBudget, mixture_weights, posterior_mode_support, support_posterior

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparse-bvm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
        p.add_argument("--alpha", type=float, help="override the fractional power")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
        if name == "fit":
            p.add_argument("--mode", choices=("exact", "laplace"), help="marginal likelihood method")
        if name == "coverage":
            p.add_argument("--level", type=float, help="credible level 1 - gamma")
    return parser


def _config(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.alpha is not None:
        cfg["alpha"] = args.alpha
    if getattr(args, "mode", None):
        cfg["mode"] = args.mode
    if getattr(args, "level", None) is not None:
        cfg["level"] = args.level
    return validate_config(cfg)


def _budget(cfg) -> ExactBudget:
    tol = cfg["tolerances"]
    return ExactBudget(gh_tol=float(tol.get("gh", 1e-8)), min_ess=float(tol.get("min_ess", 100)),
                       seed=int(cfg["seed"]))


def cmd_generate(cfg, writer) -> dict:
    ds = generate_dataset(cfg)
    files = writer.dataset(ds)
    return {"files": files, "digest": ds.digest()}


def cmd_fit(cfg, writer) -> dict:
    ds = generate_dataset(cfg)
    prior = make_prior_for(cfg)
    screen = cfg["tolerances"].get("exact_screen")
    sp = support_posterior(ds, prior, cfg["alpha"], cfg["s_max"], mode=cfg["mode"], budget=_budget(cfg),
                           exact_screen=screen)
    s_hat = posterior_mode_support(sp)
    writer.json("posterior.json", {"dataset_digest": ds.digest(), "posterior": sp.to_json_dict()})
    n = ds.n
    rows = [(n, "mode_size", len(s_hat), math.nan), (n, "n_supports", len(sp.entries), math.nan)]
    if ds.truth is not None and ds.truth.support:
        rows.insert(0, (n, "posterior_recovery", sp.weight_of(ds.truth.support), math.nan))
        rows.insert(1, (n, "mode_recovery", float(s_hat == tuple(ds.truth.support)), math.nan))
    writer.metrics("metrics.csv", rows)
    return {"mode_support": list(s_hat), "files": writer.written}


def _datasets_over_grid(cfg) -> dict:
    grid = cfg["n_grid"] or [cfg["design"]["n"]]
    return {n: generate_dataset(cfg, n=n) for n in grid}


def cmd_diagnose(cfg, writer) -> dict:
    alpha, s_max, k_dim, seed = cfg["alpha"], cfg["s_max"], cfg["k_dim"], cfg["seed"]
    reps = cfg["replications"]
    wanted = cfg["diagnostics"]
    rows, report = [], {}
    datasets = _datasets_over_grid(cfg)
    prior = make_prior_for(cfg)
    metrics = tuple(m for m in ("recovery", "oracle_tv") if m in wanted)
    if metrics:
        pts = support_recovery_experiment(datasets, prior, alpha, s_max, reps["recovery"], seed, k_dim, metrics)
        rows += [(p.n, p.metric, p.value, p.se) for p in pts]
        report["recovery_curves"] = pts
    n_top = max(datasets)
    top = datasets[n_top]
    if "tv_exact_mixture" in wanted:
        exact = support_posterior(top, prior, alpha, s_max, mode="exact", budget=_budget(cfg),
                                  exact_screen=cfg["tolerances"].get("exact_screen"))
        mix = mixture_weights(top, prior, alpha, k_dim=k_dim)
        tv = tv_between_support_mixtures(exact, mix, mc=int(cfg["tolerances"].get("tv_mc", 40000)), seed=seed)
        rows.append((n_top, "tv_exact_mixture", tv.value, tv.se))
        report["tv_exact_mixture"] = tv
    if "renyi" in wanted:
        if not alpha < 1.0:
            raise ConfigError(["diagnostics: the renyi table needs alpha < 1"])
        tables = {}
        for n, ds in datasets.items():
            tab = renyi_separation(ds.family, ds.design, ds.tau, ds.truth, alpha, s_max,
                                   c_r=cfg["renyi_c"], seed=seed)
            rows.append((n, "renyi_min", tab.min_R(), math.nan))
            rows.append((n, "renyi_summability", tab.summability, math.nan))
            tables[str(n)] = tab
        report["renyi"] = tables
    if "score_envelope" in wanted:
        res = score_envelope_experiment(top.family, top.design, top.truth, cfg["score_s"], reps["score"],
                                        seed, tau=top.tau)
        rows.append((n_top, "score_exceedance", res.exceedance, res.se))
        rows.append((n_top, "score_bound", res.bound, math.nan))
        report["score_envelope"] = res
    if "hellinger" in wanted:
        pts = hellinger_contraction(datasets, prior, alpha, s_max, reps["hellinger"], seed, cfg["hellinger_k"])
        rows += [(p.n, p.metric, p.value, p.se) for p in pts]
        report["hellinger"] = pts
    writer.json("report.json", report)
    writer.metrics("metrics.csv", rows)
    return {"files": writer.written}


def cmd_coverage(cfg, writer) -> dict:
    ds = generate_dataset(cfg)
    prior = make_prior_for(cfg)
    res = coverage_experiment(ds.family, ds.design, ds.truth, prior, cfg["alpha"], cfg["level"],
                              cfg["replications"]["coverage"], cfg["seed"], cfg["s_max"], tau=ds.tau)
    writer.json("coverage.json", {"coverage": res})
    writer.metrics("metrics.csv", [(ds.n, "coverage", res.coverage, res.se),
                                   (ds.n, "credibility_gap", res.credibility_gap, res.gap_se),
                                   (ds.n, "excluded", res.excluded, math.nan),
                                   (ds.n, "selection_rate", res.selection_rate, math.nan)])
    return {"coverage": res.coverage, "se": res.se, "files": writer.written}


def cmd_audit(cfg, writer) -> dict:
    ds = generate_dataset(cfg)
    prior = make_prior_for(cfg)
    rep = assumption_audit(ds, prior, k_dim=cfg["k_dim"], seed=cfg["seed"])
    writer.json("report.json", {"report": rep.to_dict()})
    writer.metrics("metrics.csv", [(ds.n, r.name, r.value if r.value is not None else math.nan, math.nan)
                                   for r in rep.rows])
    return {"rows": len(rep.rows), "flagged": [r.name for r in rep.rows if r.ok is False],
            "files": writer.written}


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "diagnose": cmd_diagnose,
            "coverage": cmd_coverage, "audit": cmd_audit}


def _error(kind: str, message: str, **extra) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
    except ConfigError as exc:
        _error("config", str(exc), problems=exc.problems)
        return EXIT_CONFIG
    try:
        writer = ArtifactWriter(args.out, cfg, cfg["seed"], force=args.force)
        summary = COMMANDS[args.command](cfg, writer)
    except ConfigError as exc:
        _error("config", str(exc), problems=exc.problems)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every failure maps to the runtime exit code
        _error("runtime", str(exc), type=type(exc).__name__,
               trace=traceback.format_exc(limit=3).splitlines()[-3:])
        return EXIT_RUNTIME
    sys.stdout.write(json.dumps({"command": args.command, **summary}, sort_keys=True, default=str) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
