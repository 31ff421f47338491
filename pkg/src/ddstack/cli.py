"""Command-line surface: estimate-plm, estimate-atet, simulate, weights.

Runs are driven by a declarative config file (TOML or JSON). Reports embed
the fully resolved config and the master seed; all wall-clock numbers live
under a single "timings" key so payloads are reproducible modulo timing.
Outputs are written to temp files and atomically renamed, so a failing run
leaves no partial files. Exit codes: 2 configuration error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import __version__
from .core_data import load_csv
from .errors import ConfigurationError, DataError, DdstackError, NumericalError
from .learners import make_spec
from .pipeline import EstimatorSettings, RunResult, ddml_atet, ddml_plm
from .simulation import (EstimatorConfig, calibrate_generative, run_monte_carlo,
                         toy_spec)

SCHEMA_VERSION = 1


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {path}")
    text = p.read_bytes()
    if p.suffix.lower() == ".json":
        return json.loads(text)
    try:
        return tomllib.loads(text.decode())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"cannot parse config: {exc}")


def _atomic_write(path: Path, payload: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _resolve_estimator(config: dict, master_seed: int) -> EstimatorSettings:
    block = config.get("estimator")
    if not block:
        raise ConfigurationError("config needs an [estimator] block")
    learners = [make_spec(entry, seed_stream=master_seed)
                for entry in block.get("learners", [])]
    propensity = block.get("propensity_learners")
    if propensity:
        propensity = [make_spec(entry, seed_stream=master_seed)
                      for entry in propensity]
    return EstimatorSettings(
        learners=learners,
        mode=block.get("mode", "short"),
        final=block.get("final", "cls"),
        K=int(block.get("K", 5)),
        V=int(block.get("V", 5)),
        R=int(block.get("R", 1)),
        aggregation=block.get("aggregation", "median"),
        stratify_folds=bool(block.get("stratify_folds", False)),
        propensity_learners=propensity,
    )


def _load_dataset(config: dict):
    block = config.get("data")
    if not block or "path" not in block:
        raise ConfigurationError("config needs a [data] block with a path")
    return load_csv(block["path"], outcome=block.get("outcome", "y"),
                    treatments=block.get("treatments", ["d"]),
                    covariates=block.get("covariates", "rest"))


def _settings_dict(settings: EstimatorSettings) -> dict:
    return {
        "mode": settings.mode,
        "final": settings.final,
        "K": settings.K,
        "V": settings.V,
        "R": settings.R,
        "aggregation": settings.aggregation,
        "stratify_folds": settings.stratify_folds,
        "learners": [
            {"name": s.name, "kind": s.kind,
             "hyperparameters": {k: v for k, v in s.hyperparameters.items()
                                 if k != "truth"},
             "transform": s.transform}
            for s in settings.learners],
    }


def _run_report(result: RunResult, command: str, master_seed: int) -> dict:
    reps = []
    for detail in result.details:
        reps.append({
            "seed": detail.seed,
            "estimate": detail.estimate.to_dict(),
            "weights": {
                target: {
                    "mode": sw.mode,
                    "final": sw.final,
                    "weights": sw.weights.tolist(),
                    "learners": sw.learner_names,
                }
                for target, sw in detail.weights.items()},
            "mspe": {target: values.tolist()
                     for target, values in detail.mspe.items()},
            "learner_fits": detail.n_fits,
        })
    targets = list(result.details[0].weights)
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "version": __version__,
        "master_seed": master_seed,
        "config": _settings_dict(result.settings),
        "aggregate": result.aggregate.to_dict(),
        "aggregation": result.repetition_set.aggregation,
        "repetitions": reps,
        "mean_weights": {t: result.mean_weights(t).tolist() for t in targets},
        "mean_mspe": {t: result.mean_mspe(t).tolist() for t in targets},
        "learners": result.learner_names,
        "total_learner_fits": result.total_fits,
        "timings": {"elapsed_seconds": result.elapsed_seconds},
    }


def _weights_text(report: dict) -> str:
    lines = []
    learners = report.get("learners", [])
    mean_weights = report.get("mean_weights", {})
    mean_mspe = report.get("mean_mspe", {})
    for target in mean_weights:
        lines.append(f"-- {target} --")
        lines.append(f"{'learner':<24}{'weight':>12}{'mspe':>14}")
        for j, name in enumerate(learners):
            mspe = mean_mspe.get(target, [float('nan')] * len(learners))[j]
            lines.append(f"{name:<24}{mean_weights[target][j]:>12.4f}"
                         f"{mspe:>14.6g}")
        lines.append("")
    return "\n".join(lines)


def _estimate_text(report: dict) -> str:
    agg = report["aggregate"]
    lines = [
        f"ddstack {report['command']} (schema {report['schema_version']})",
        f"mode={report['config']['mode']} final={report['config']['final']} "
        f"K={report['config']['K']} R={report['config']['R']} "
        f"aggregation={report['aggregation']}",
        "",
        f"{'coef':<8}{'theta_hat':>14}{'se':>12}{'ci_low':>12}{'ci_high':>12}",
    ]
    for i, theta in enumerate(agg["theta_hat"]):
        lines.append(f"{i:<8}{theta:>14.6g}{agg['se'][i]:>12.4g}"
                     f"{agg['ci_low'][i]:>12.6g}{agg['ci_high'][i]:>12.6g}")
    lines.append("")
    lines.append(_weights_text(report))
    return "\n".join(lines)


def _write_reports(report: dict, out_dir: Path, fmt: str,
                   csv_rows=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    if fmt in ("json", "both"):
        outputs.append((out_dir / "report.json",
                        json.dumps(report, indent=2, sort_keys=True) + "\n"))
    if fmt in ("csv", "both") and csv_rows:
        import io
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(csv_rows[0]))
        writer.writeheader()
        writer.writerows(csv_rows)
        outputs.append((out_dir / "metrics.csv", buf.getvalue()))
    text = report.get("_text")
    if text:
        outputs.append((out_dir / "report.txt", text))
    report.pop("_text", None)
    for path, payload in outputs:
        _atomic_write(path, payload)


def _estimate_csv_rows(report: dict) -> list[dict]:
    rows = []
    for r, rep in enumerate(report["repetitions"]):
        est = rep["estimate"]
        for i, theta in enumerate(est["theta_hat"]):
            rows.append({"repetition": r + 1, "coef": i, "theta_hat": theta,
                         "se": est["se"][i], "ci_low": est["ci_low"][i],
                         "ci_high": est["ci_high"][i]})
    return rows


def cmd_estimate(args, which: str) -> int:
    config = _load_config(args.config)
    master_seed = args.seed if args.seed is not None \
        else int(config.get("master_seed", 0))
    dataset = _load_dataset(config)
    settings = _resolve_estimator(config, master_seed)
    runner = ddml_plm if which == "estimate-plm" else ddml_atet
    result = runner(dataset, settings, base_seed=master_seed,
                    threads=args.threads)
    report = _run_report(result, which, master_seed)
    report["data"] = {"path": config["data"]["path"], "n": dataset.n,
                      "p": dataset.p, "q": dataset.q,
                      "dropped_rows": dataset.drop_count}
    report["_text"] = _estimate_text(report)
    _write_reports(report, Path(args.out), args.format,
                   csv_rows=_estimate_csv_rows(report))
    print(f"wrote report to {args.out}", file=sys.stderr)
    return 0


def _resolve_sim_estimators(block: dict) -> list[EstimatorConfig]:
    configs = []
    for entry in block.get("estimators", []):
        configs.append(EstimatorConfig(
            name=entry.get("name") or entry.get("mode", "short"),
            learners=entry.get("learners", []),
            mode=entry.get("mode", "short"),
            final=entry.get("final", "cls"),
        ))
    if not configs:
        raise ConfigurationError("simulate config needs at least one estimator")
    return configs


def cmd_simulate(args) -> int:
    config = _load_config(args.config)
    block = config.get("simulate")
    if not block:
        raise ConfigurationError("config needs a [simulate] block")
    master_seed = args.seed if args.seed is not None \
        else int(config.get("master_seed", 0))
    kind = block.get("kind", "toy_linear")
    if kind == "calibrated":
        dataset = _load_dataset(config)
        dgp = calibrate_generative(dataset, engine=block.get("engine", "linear"),
                                   theta0=float(block.get("theta0", 6000.0)),
                                   seed=master_seed)
    else:
        dgp = toy_spec(kind, n=int(block.get("n", 1000)),
                       theta0=float(block.get("theta0", 0.5)),
                       p=int(block.get("p", 13)),
                       rho=float(block.get("rho", 0.5)),
                       seed=master_seed,
                       literal_fifth=bool(block.get("literal_fifth", False)))
    estimators = _resolve_sim_estimators(block)
    sim = run_monte_carlo(
        dgp, estimators,
        reps=int(block.get("reps", 100)),
        base_seed=master_seed,
        K=int(block.get("K", 2)),
        V=int(block.get("V", 5)),
        n_b=int(block["n_b"]) if "n_b" in block else None,
        reference=float(block["reference"]) if "reference" in block else None,
        threads=args.threads,
    )
    report = sim.to_json_dict()
    report["command"] = "simulate"
    report["master_seed"] = master_seed
    report["config"] = block
    _write_reports(report, Path(args.out), args.format,
                   csv_rows=sim.csv_rows())
    print(f"wrote simulation report to {args.out}", file=sys.stderr)
    return 0


def cmd_weights(args) -> int:
    path = Path(args.report)
    if not path.exists():
        raise ConfigurationError(f"report file not found: {path}")
    report = json.loads(path.read_text())
    print(_weights_text(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ddstack",
        description="Double/debiased ML with stacking: estimation and "
                    "Monte Carlo simulation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="TOML or JSON config")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed (overrides config)")
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap; results are independent of it")
        p.add_argument("--out", default="ddstack-out", help="output directory")
        p.add_argument("--format", choices=("json", "csv", "both"),
                       default="both")

    common(sub.add_parser("estimate-plm",
                          help="partially linear model coefficient(s)"))
    common(sub.add_parser("estimate-atet",
                          help="average treatment effect on the treated"))
    common(sub.add_parser("simulate", help="Monte Carlo study"))
    weights = sub.add_parser("weights",
                             help="print weight tables from a saved report")
    weights.add_argument("report", help="path to a report.json")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("estimate-plm", "estimate-atet"):
            return cmd_estimate(args, args.command)
        if args.command == "simulate":
            return cmd_simulate(args)
        return cmd_weights(args)
    except ConfigurationError as exc:
        print(f"error=config reason={exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error=data reason={exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error=numerical reason={exc}", file=sys.stderr)
        return 4
    except DdstackError as exc:  # pragma: no cover - safety net
        print(f"error=unknown reason={exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
