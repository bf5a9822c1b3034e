"""Command-line experiment runner.

    deepdemand [--config FILE] [--out DIR] [--seed S] COMMAND [flags]

Commands: simulate, train, benchmark, infer, coverage, empirical. A YAML
config (validated against ``config_schema.json``) supplies defaults and
command-line flags override it. Every run writes a ``manifest.json`` and a
``config.yaml`` echo into the output directory; rerunning with that echo
reproduces the CSV outputs byte for byte in single-worker mode.

Exit codes: 0 ok, 2 configuration error, 3 data validation error,
4 numeric failure (1 for anything unexpected). Set ``DEEPDEMAND_WORKERS``
to run replications in that many processes.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import platform
import subprocess
import sys
from dataclasses import asdict
from importlib import metadata, resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import autos, baselines, causal, deepset, elastic, io, simgen
from .errors import ConfigError, DataValidationError, DeepDemandError

log = logging.getLogger("deepdemand")

WORKERS_ENV = "DEEPDEMAND_WORKERS"
COMMANDS = ("simulate", "train", "benchmark", "infer", "coverage", "empirical")

BENCHMARK_PRESETS = {
    "baseline-rcl": dict(dgp="RCL", J=10, M=100, K=10),
    "baseline-mnl": dict(dgp="MNL", J=10, M=100, K=10),
    "rcl-j5": dict(dgp="RCL", J=5, M=100, K=10),
    "rcl-j20": dict(dgp="RCL", J=20, M=100, K=10),
    "nonlinear-log": dict(dgp="RCL_LOG", J=10, M=100, K=0, epochs=2000),
    "nonlinear-sin": dict(dgp="RCL_SIN", J=10, M=100, K=0, epochs=2000),
    "inattention": dict(dgp="INATTENTION", J=2, M=1000, K=0, epochs=2000),
    "new-product": dict(dgp="RCL", J=10, M=100, K=10, new_product=True,
                        estimators=["deepset", "mnl", "rcl", "np", "mean"]),
}

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "simulate": {"dgp": "RCL", "J": 10, "M": 100, "K": 10, "N": 10_000, "truth_seed": None},
    "train": {"estimator": "deepset", "epochs": 500, "lr": 1e-3, "rcl_draws": 500},
    "benchmark": {"preset": "baseline-rcl", "reps": 20, "estimators": list(elastic.ESTIMATORS), "N": 10_000,
                  "epochs": 500, "lr": 1e-3, "new_product": False, "elasticities": True, "pct": 0.01},
    "infer": {"folds": 5, "pct": 0.01, "delta": None, "elasticity": False, "epochs": 500},
    "coverage": {"preset": "coverage", "sims": 50, "folds": 5, "epochs": 500},
    "empirical": {"data": None, "iv": "blp", "first_stage": "ols", "delta": 1.0, "epochs": 1000, "folds": 5,
                  "intervals": True},
}


# -- configuration ---------------------------------------------------------------------


def load_schema() -> dict:
    return json.loads(resources.files("deepdemand").joinpath("config_schema.json").read_text(encoding="utf-8"))


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None


def read_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    validate_config(cfg)
    return cfg


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults <- config file <- flags; the result is validated before any work."""
    file_cfg = read_config_file(args.config) if args.config else {}
    if file_cfg.get("command") not in (None, args.command):
        raise ConfigError(f"config is for command {file_cfg['command']!r}, not {args.command!r}")
    cfg = {"command": args.command, "seed": DEFAULTS["seed"], "workers": DEFAULTS["workers"],
           args.command: copy.deepcopy(DEFAULTS[args.command])}
    if args.command == "benchmark":
        preset = (file_cfg.get("benchmark", {}).get("preset") or getattr(args, "preset", None)
                  or DEFAULTS["benchmark"]["preset"])
        if preset not in BENCHMARK_PRESETS:
            raise ConfigError(f"unknown benchmark preset {preset!r}; choose from {sorted(BENCHMARK_PRESETS)}")
        cfg["benchmark"].update(copy.deepcopy(BENCHMARK_PRESETS[preset]))
    file_cfg = {k: v for k, v in file_cfg.items() if k in ("command", "seed", "workers", "out", args.command)}
    cfg = _deep_merge(cfg, file_cfg)
    env_workers = os.environ.get(WORKERS_ENV)
    if env_workers:
        try:
            cfg["workers"] = int(env_workers)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env_workers!r}") from None
    for key in ("seed", "workers", "out"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    section = cfg[args.command]
    for dest, value in vars(args).items():
        if dest.startswith("opt_") and value is not None:
            section[dest[4:]] = value
    if args.command == "benchmark" and getattr(args, "preset", None) is not None:
        section["preset"] = args.preset
    cfg.setdefault("out", str(Path("runs") / args.command))
    validate_config(cfg)
    return cfg


# -- manifest ----------------------------------------------------------------------------


def version_string() -> str:
    """``git describe`` of the source tree when available, else the installed version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_manifest(out: Path, cfg: dict, seeds: dict, outputs: list, extra: dict | None = None) -> None:
    manifest = {
        "version": version_string(),
        "command": cfg["command"],
        "config": cfg,
        "seeds": seeds,
        "outputs": sorted(outputs),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    if extra:
        manifest.update(extra)
    io.atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    io.atomic_write_text(out / "config.yaml", yaml.safe_dump(cfg, sort_keys=True))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _write_json(path: Path, obj) -> None:
    io.atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


# -- commands ------------------------------------------------------------------------------


def cmd_simulate(cfg: dict, out: Path) -> dict:
    s = cfg["simulate"]
    sim = simgen.SimConfig(J=s["J"], M=s["M"], K=s["K"], N=s["N"], dgp=s["dgp"], seed=cfg["seed"],
                           truth_seed=s.get("truth_seed"))
    ds = simgen.simulate(sim)
    io.write_dataset(out / "data.csv", ds)
    return {"outputs": ["data.csv"], "seeds": {"seed": cfg["seed"], "truth_seed": sim.frozen_seed}}


def _read_data(path) -> "simgen.Dataset":
    if not path:
        raise ConfigError("a --data CSV is required")
    try:
        return io.read_dataset(path)
    except FileNotFoundError:
        raise DataValidationError(f"data file not found: {path}") from None


def cmd_train(cfg: dict, out: Path) -> dict:
    t = cfg["train"]
    ds = _read_data(t.get("data"))
    for m in ds.markets:
        m.validate_shares()
    name = t["estimator"]
    seed = cfg["seed"]
    outputs = ["predictions.csv"]
    if name == "deepset":
        fit = deepset.fit(ds.markets, cfg=deepset.TrainConfig(lr=t["lr"], epochs=t["epochs"], seed=seed))
        deepset.save(fit, out / "model.json")
        outputs.append("model.json")
        predict = fit.predict
    else:
        bcfg = elastic.BenchmarkConfig(rcl_draws=t["rcl_draws"])
        fit = elastic.fit_estimator(name, ds, bcfg, seed)
        _write_json(out / "fit.json", fit.to_dict())
        outputs.append("fit.json")
        predict = fit.predict
    rows = []
    for m in ds.markets:
        for j, s_hat in enumerate(predict(m)):
            rows.append([int(m.market_id), int(m.product_ids[j]), m.shares[j], float(s_hat)])
    io.write_csv(out / "predictions.csv", ["market_id", "product_id", "share", "predicted_share"], rows)
    return {"outputs": outputs, "seeds": {"seed": seed}}


def _benchmark_config(cfg: dict) -> elastic.BenchmarkConfig:
    b = cfg["benchmark"]
    ests = tuple(b["estimators"])
    return elastic.BenchmarkConfig(
        dgp=b["dgp"], J=b["J"], M=b["M"], K=b["K"], N=b["N"], reps=b["reps"], seed=cfg["seed"],
        estimators=ests, pct=b["pct"], elasticities=b["elasticities"], new_product=b["new_product"],
        deepset_train=deepset.TrainConfig(lr=b["lr"], epochs=b["epochs"]),
        np_grid={k: tuple(v) for k, v in b["np_grid"].items()} if b.get("np_grid") else None,
    )


def wide_table(rows: list) -> tuple:
    """Wide layout: one line per quantity with MAE/RMSE columns per estimator."""
    ests = []
    for r in rows:
        if r.estimator not in ests:
            ests.append(r.estimator)
    header = ["quantity", "dgp", "J", "M", "K", *[f"{e}_{s}" for e in ests for s in ("MAE", "RMSE")], "n_obs"]
    out = []
    for q in elastic.QUANTITIES:
        sub = {r.estimator: r for r in rows if r.quantity == q}
        if not sub:
            continue
        first = next(iter(sub.values()))
        line = [q, first.dgp, first.J, first.M, first.K]
        for e in ests:
            r = sub.get(e)
            line += [r.MAE, r.RMSE] if r else [float("nan"), float("nan")]
        line.append(max(r.n_obs for r in sub.values()))
        out.append(line)
    return header, out


def cmd_benchmark(cfg: dict, out: Path) -> dict:
    bc = _benchmark_config(cfg)
    rows = elastic.benchmark_run(bc, workers=cfg["workers"])
    io.write_csv(out / "metrics.csv", elastic.MetricRow.header(), [r.as_list() for r in rows])
    header, table = wide_table(rows)
    io.write_csv(out / "table.csv", header, table)
    outputs = ["metrics.csv", "table.csv"]
    core = ["dgp", "J", "M", "K", "estimator", "MAE", "RMSE", "n_obs"]
    for q in elastic.QUANTITIES:
        sub = [[getattr(r, c) for c in core] for r in rows if r.quantity == q]
        if sub:
            io.write_csv(out / f"{q}.csv", core, sub)
            outputs.append(f"{q}.csv")
    if bc.dgp == "INATTENTION" and bc.J == 2:
        outputs.append(_inattention_curve(bc, out))
    return {"outputs": outputs, "seeds": {"seed": bc.seed, "replication_seeds": [bc.seed + r for r in range(bc.reps)]}}


def _inattention_curve(bc: elastic.BenchmarkConfig, out: Path) -> str:
    """Own/cross elasticity against price for the top-priced product (one replication)."""
    sim = simgen.SimConfig(J=bc.J, M=bc.M, K=bc.K, N=bc.N, dgp=bc.dgp, seed=bc.seed)
    ds = simgen.simulate(sim)
    train, test = simgen.split(ds, bc.train_ratio, elastic.rng_stream(bc.seed, 5))
    fits = {}
    for name in ("deepset", "mnl", "rcl"):
        if name in bc.estimators:
            fits[name] = elastic.fit_estimator(name, train, bc, bc.seed, ds.truth)
    rows = elastic.elasticity_curve(fits, test.markets, ds.truth, bc.pct)
    io.write_csv(out / "elasticity_curve.csv",
                 ["market_id", "price", "estimator", "own_elasticity", "other_price", "cross_elasticity"], rows)
    return "elasticity_curve.csv"


def cmd_infer(cfg: dict, out: Path) -> dict:
    f = cfg["infer"]
    ds = _read_data(f.get("data"))
    for m in ds.markets:
        m.validate_shares()
    if (f.get("pct") is None) == (f.get("delta") is None):
        f = {**f, "pct": None} if f.get("delta") is not None else f
    shift = elastic.Perturbation(pct=f.get("pct"), delta=f.get("delta"))
    moment = causal.MomentSpec(shift, elasticity=f["elasticity"])
    hyper = causal.CrossfitHyper(demand=deepset.TrainConfig(epochs=f["epochs"]), seed=cfg["seed"])
    res = causal.crossfit_debiased(ds, f["folds"], moment, hyper)
    _write_json(out / "inference.json", res.to_dict())
    return {"outputs": ["inference.json"], "seeds": {"seed": cfg["seed"]}}


def cmd_coverage(cfg: dict, out: Path) -> dict:
    c = cfg["coverage"]
    names = ["coverage-mnl", "coverage-rcl"] if c["preset"] == "coverage" else [c["preset"]]
    hyper = causal.CrossfitHyper(demand=deepset.TrainConfig(epochs=c["epochs"]))
    rows, summaries = [], []
    for name in names:
        res = causal.coverage_experiment(name, c["sims"], c["folds"], hyper, seed=cfg["seed"], workers=cfg["workers"])
        rows += [[name, *r] for r in res.csv_rows()]
        summaries.append(res.summary())
        log.info("%s: coverage %.2f, mean bias %.2e, theta0 %.6f", name, res.coverage, res.mean_bias, res.theta0)
    io.write_csv(out / "coverage.csv", ["preset", *causal.CoverageResult.CSV_HEADER], rows)
    io.write_csv(out / "coverage_summary.csv", list(summaries[0]), [list(s.values()) for s in summaries])
    return {"outputs": ["coverage.csv", "coverage_summary.csv"],
            "seeds": {"seed": cfg["seed"], "sim_seeds": [cfg["seed"] + s for s in range(c["sims"])],
                      "truth_seed": causal.COVERAGE_PRESETS[names[0]].truth_seed}}


def cmd_empirical(cfg: dict, out: Path) -> dict:
    e = cfg["empirical"]
    outputs = []
    if e.get("data"):
        try:
            data = autos.load_auto_csv(e["data"])
        except FileNotFoundError:
            raise DataValidationError(f"data file not found: {e['data']}") from None
    else:
        data = autos.records_to_data(autos.synthetic_autos(autos.SyntheticAutoConfig(seed=cfg["seed"])))
        autos.write_auto_csv(out / "synthetic_autos.csv", data.records)
        outputs.append("synthetic_autos.csv")
    ecfg = autos.EmpiricalConfig(iv=e["iv"], first_stage=e["first_stage"], delta=e["delta"], epochs=e["epochs"],
                                 seed=cfg["seed"], folds=e["folds"], intervals=e["intervals"])
    res = autos.run_empirical(data, ecfg)
    io.write_csv(out / "elasticities.csv", autos.EmpiricalResult.ROW_HEADER, res.rows)
    io.write_csv(out / "summary.csv", autos.EmpiricalResult.SUMMARY_HEADER, res.summary)
    outputs += ["elasticities.csv", "summary.csv"]
    if res.first_stage is not None:
        _write_json(out / "first_stage.json", res.first_stage.to_dict())
        outputs.append("first_stage.json")
    return {"outputs": outputs, "seeds": {"seed": cfg["seed"]}}


HANDLERS = {
    "simulate": cmd_simulate, "train": cmd_train, "benchmark": cmd_benchmark,
    "infer": cmd_infer, "coverage": cmd_coverage, "empirical": cmd_empirical,
}


def run_experiment(cfg: dict) -> dict:
    """Run a resolved config; returns the manifest payload written next to the outputs."""
    validate_config(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    info = HANDLERS[cfg["command"]](cfg, out)
    write_manifest(out, cfg, info["seeds"], info["outputs"])
    return info


# -- argument parsing -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepdemand", description="Deep-set demand estimation experiments")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML config file; flags override it")
        sp.add_argument("--out", help="output directory (default runs/<command>)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, help=f"worker processes (or set {WORKERS_ENV})")

    sp = sub.add_parser("simulate", help="generate a synthetic share dataset")
    common(sp)
    sp.add_argument("--dgp", dest="opt_dgp", type=str.upper, choices=simgen.DGPS)
    for k in ("J", "M", "K", "N"):
        sp.add_argument(f"--{k}", dest=f"opt_{k}", type=int)
    sp.add_argument("--truth-seed", dest="opt_truth_seed", type=int)

    sp = sub.add_parser("train", help="fit one estimator to a dataset CSV")
    common(sp)
    sp.add_argument("--data", dest="opt_data")
    sp.add_argument("--estimator", dest="opt_estimator", choices=elastic.ESTIMATORS)
    sp.add_argument("--epochs", dest="opt_epochs", type=int)
    sp.add_argument("--lr", dest="opt_lr", type=float)
    sp.add_argument("--rcl-draws", dest="opt_rcl_draws", type=int)

    sp = sub.add_parser("benchmark", help="replicated simulate/fit/evaluate comparison")
    common(sp)
    sp.add_argument("--preset", choices=sorted(BENCHMARK_PRESETS))
    sp.add_argument("--reps", dest="opt_reps", type=int)
    sp.add_argument("--estimators", dest="opt_estimators", type=lambda s: [x.strip() for x in s.split(",") if x.strip()])
    sp.add_argument("--dgp", dest="opt_dgp", type=str.upper, choices=simgen.DGPS)
    for k in ("J", "M", "K", "N"):
        sp.add_argument(f"--{k}", dest=f"opt_{k}", type=int)
    sp.add_argument("--epochs", dest="opt_epochs", type=int)
    sp.add_argument("--lr", dest="opt_lr", type=float)
    sp.add_argument("--new-product", dest="opt_new_product", action="store_const", const=True)
    sp.add_argument("--no-elasticities", dest="opt_elasticities", action="store_const", const=False)

    sp = sub.add_parser("infer", help="cross-fit debiased estimate of a price-change effect")
    common(sp)
    sp.add_argument("--data", dest="opt_data")
    sp.add_argument("--folds", dest="opt_folds", type=int)
    sp.add_argument("--pct", dest="opt_pct", type=float)
    sp.add_argument("--delta", dest="opt_delta", type=float)
    sp.add_argument("--elasticity", dest="opt_elasticity", action="store_const", const=True)
    sp.add_argument("--epochs", dest="opt_epochs", type=int)

    sp = sub.add_parser("coverage", help="confidence-interval coverage simulation")
    common(sp)
    sp.add_argument("--preset", dest="opt_preset", choices=["coverage", "coverage-mnl", "coverage-rcl"])
    sp.add_argument("--sims", dest="opt_sims", type=int)
    sp.add_argument("--folds", dest="opt_folds", type=int)
    sp.add_argument("--epochs", dest="opt_epochs", type=int)

    sp = sub.add_parser("empirical", help="automobile-data pipeline (synthetic fixture without --data)")
    common(sp)
    sp.add_argument("--data", dest="opt_data")
    sp.add_argument("--iv", dest="opt_iv", choices=["blp", "none"])
    sp.add_argument("--first-stage", dest="opt_first_stage", choices=["ols", "mlp"])
    sp.add_argument("--delta", dest="opt_delta", type=float)
    sp.add_argument("--epochs", dest="opt_epochs", type=int)
    sp.add_argument("--folds", dest="opt_folds", type=int)
    sp.add_argument("--no-intervals", dest="opt_intervals", action="store_const", const=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        info = run_experiment(cfg)
    except DeepDemandError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        print(json.dumps(err), file=sys.stderr)
        return exc.exit_code
    print(json.dumps({"status": "ok", "out": cfg["out"], "outputs": info["outputs"]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
