"""``netident`` command line: simulate, identify, diagnose, montecarlo.

Exit codes: 0 ok, 2 input/config error, 3 generation error, 4 estimation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .dataset import Dataset
from .errors import (
    ConditioningError,
    ConvergenceError,
    EstimationError,
    GenerationError,
    NetidentError,
    StabilityError,
    StructureError,
)
from .estimator import OBJECTIVES, EstimatorConfig, estimate
from .experiments import (
    MonteCarloConfig,
    RandomNetworkSpec,
    ab_part,
    empirical_snr_db,
    generate_random_network,
    generate_reference,
    informativity_check,
    monte_carlo,
    simulate,
    validation_fit,
)
from .model import NetworkModel, Topology, assemble_closed_loop, signal_index, validate_model
from .riccati import solve_dare
from .toeplitz import assemble_structural, eliminate, reduced_full_row_rank

log = logging.getLogger("netident")

EXIT_OK, EXIT_INPUT, EXIT_GENERATION, EXIT_ESTIMATION = 0, 2, 3, 4


class InputError(Exception):
    pass


def _schema(name):
    text = resources.files("netident").joinpath(f"schemas/{name}.json").read_text()
    return json.loads(text)


def load_config(path, command) -> tuple[dict, Path]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    try:
        jsonschema.validate(cfg, _schema(command))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"{path}: schema violation at {where}: {exc.message}") from None
    return cfg, path.parent


def _resolve(base: Path, rel) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else base / p


def _load_model(spec, base: Path) -> NetworkModel:
    if isinstance(spec, str):
        path = _resolve(base, spec)
        if not path.is_file():
            raise InputError(f"model file not found: {path}")
        try:
            spec = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from None
        try:
            jsonschema.validate(spec, _schema("simulate")["$defs"]["model"])
        except jsonschema.ValidationError as exc:
            raise InputError(f"{path}: schema violation: {exc.message}") from None
    try:
        return NetworkModel.from_dict(spec)
    except (StructureError, KeyError, IndexError, TypeError) as exc:
        raise InputError(f"invalid model: {exc}") from None


def _load_dataset(base: Path, rel, labels=()) -> Dataset:
    path = _resolve(base, rel)
    if not path.is_file():
        raise InputError(f"dataset file not found: {path}")
    try:
        return Dataset.load_csv(path, labels)
    except StructureError as exc:
        raise InputError(f"{path}: {exc}") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows, columns=None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})


def _observed(model: NetworkModel, names) -> NetworkModel:
    if not names:
        return model
    try:
        idx = [signal_index(s, model.M) for s in names]
        return model.with_topology(model.topology.with_observed(idx))
    except StructureError as exc:
        raise InputError(str(exc)) from None


# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg, base = load_config(args.config, "simulate")
    seed = args.seed
    if "model" in cfg:
        model = _load_model(cfg["model"], base)
    else:
        rnd = cfg["random"]
        spec = RandomNetworkSpec(
            orders=tuple(rnd.get("orders", (2, 2, 2))), lam_bar=rnd.get("lam_bar", 0.1)
        )
        model = generate_random_network(rnd.get("model_seed", seed), spec)
    model = _observed(model, cfg.get("observed"))
    report = validate_model(model)
    if not report.passed:
        raise InputError("model fails validation: " + "; ".join(report.messages))
    N = cfg["N"]
    scale = cfg.get("noise_scale", 1.0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = tuple(model.topology.labels)
    r = generate_reference(seed, N, model.topology.m)
    train = simulate(model, r, seed, scale)
    train.save_csv(out / "train.csv")
    meta = {
        "seed": seed,
        "N": N,
        "labels": list(labels),
        "noise_scale": scale,
        "model": model.to_dict(),
        "theta0": model.theta.tolist(),
        "snr_db": empirical_snr_db(model, train).tolist() if scale > 0 else None,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if cfg.get("validation", True):
        vseed = seed + 1_000_003
        val = simulate(model, generate_reference(vseed, N, model.topology.m), vseed, scale)
        val.save_csv(out / "validation.csv")
        meta["validation_seed"] = vseed
    _write_json(out / "meta.json", meta)
    return EXIT_OK


def cmd_identify(args) -> int:
    cfg, base = load_config(args.config, "identify")
    model_true = None
    if "model" in cfg:
        model_true = _load_model(cfg["model"], base)
    if "topology" in cfg:
        try:
            topo = Topology.from_dict(cfg["topology"])
        except (StructureError, KeyError) as exc:
            raise InputError(f"invalid topology: {exc}") from None
    else:
        topo = model_true.topology
    orders = tuple(cfg.get("orders") or model_true.orders)
    if len(orders) != topo.M:
        raise InputError(f"{len(orders)} orders given for {topo.M} nodes")
    data = _load_dataset(base, cfg["data"], tuple(topo.labels))
    if data.p != topo.p or data.m != topo.m:
        raise InputError(
            f"dataset has m={data.m}, p={data.p}; topology expects m={topo.m}, p={topo.p}"
        )
    est = dict(cfg.get("estimator", {}))
    if args.objective:
        est["objective"] = args.objective
    if args.seed is not None:
        est["seed"] = args.seed
    try:
        est_cfg = EstimatorConfig.from_dict(est)
    except StructureError as exc:
        raise InputError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = estimate(data, topo, orders, est_cfg)
    except EstimationError as exc:
        partial = getattr(exc, "partial_stages", [])
        _write_json(out / "stages.json", {
            "objective": est_cfg.objective,
            "failed_stage": exc.stage,
            "error": str(exc),
            "stages": [s.to_dict() for s in partial],
        })
        raise
    model_hat = res.model
    _write_json(out / "theta_hat.json", {
        "objective": res.objective,
        "theta_hat": res.theta_hat.tolist(),
        "converged": res.converged,
        "model": model_hat.to_dict(),
    })
    _write_json(out / "stages.json", {"objective": res.objective, "stages": [s.to_dict() for s in res.stages]})
    val_path = cfg.get("validation")
    val = _load_dataset(base, val_path, tuple(topo.labels)) if val_path else data
    fr = validation_fit(model_hat, val)
    metrics = {"validation": "validation" if val_path else "training", **fr.to_dict()}
    if model_true is not None and model_true.orders == orders:
        err = ab_part(res.theta_hat, orders) - ab_part(model_true.theta, orders)
        metrics["ab_error_norm"] = float(np.linalg.norm(err))
        metrics["ab_error_max"] = float(np.max(np.abs(err)))
    _write_json(out / "metrics.json", metrics)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg, base = load_config(args.config, "diagnose")
    model = _load_model(cfg["model"], base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    diag = {"validation": validate_model(model).to_dict()}
    ss = assemble_closed_loop(model)
    try:
        diag["riccati"] = solve_dare(ss, model=model).to_dict()
    except (ConvergenceError, StabilityError, ConditioningError, NetidentError) as exc:
        diag["riccati"] = {"error": str(exc)}
    if "data" in cfg:
        data = _load_dataset(base, cfg["data"])
        r = data.r
    else:
        r = generate_reference(args.seed, cfg.get("N", 500), model.topology.m)
    N_struct = cfg.get("N", r.shape[0])
    try:
        sys_ = assemble_structural(model, r[:N_struct], N_struct)
        red = eliminate(sys_)
        rep = red.report()
        rep["structural_shape"] = list(sys_.A.shape)
        rep["reduced_min_singular_value"] = reduced_full_row_rank(red)
        diag["reduced_system"] = rep
    except NetidentError as exc:
        diag["reduced_system"] = {"error": str(exc)}
    diag["informativity"] = informativity_check(r, cfg.get("grid_size", 64)).to_dict()
    _write_json(out / "diagnostics.json", diag)
    return EXIT_OK


def _fmt_rows(rows):
    return [{k: v for k, v in row.items() if not isinstance(v, list)} for row in rows]


def _error_vs_N(report):
    """Median (a, b) error per observation set and N from the main grid."""
    models = [NetworkModel.from_dict(m) for m in report["models"]]
    groups = {}
    for c in report["cells"]:
        rec = c["methods"].get("ML", {})
        if "theta_hat" not in rec:
            continue
        m = models[c["model"]]
        e = np.linalg.norm(ab_part(rec["theta_hat"], m.orders) - ab_part(m.theta, m.orders))
        groups.setdefault(("+".join(c["observed"]), c["N"]), []).append(float(e))
    return [
        {"observed": k[0], "N": k[1], "estimates": len(v),
         "median_error": float(np.median(v)), "mean_error": float(np.mean(v))}
        for k, v in sorted(groups.items())
    ]


def cmd_montecarlo(args) -> int:
    cfg, _ = load_config(args.config, "montecarlo")
    if args.seed is not None:
        cfg["master_seed"] = args.seed
    if args.jobs is not None:
        cfg["jobs"] = args.jobs
    if args.objective:
        cfg.setdefault("estimator", {})["objective"] = args.objective
    try:
        mc = MonteCarloConfig.from_dict(cfg)
    except StructureError as exc:
        raise InputError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = monte_carlo(mc)
    _write_json(out / "report.json", report)
    _write_csv(out / "table1.csv", _fmt_rows(report["table1"]),
               sorted({k for row in report["table1"] for k in row if k != "bias"},
                      key=lambda k: (k not in ("observed", "N", "method", "runs", "converged", "mean_time"), k)))
    _write_csv(out / "table2.csv", _fmt_rows(report["table2"]),
               ["observed", "N", "method", "model", "replicates", "bias_norm",
                "cov_trace", "cov_max_eig", "mse"])
    if "consistency" in report:
        rows = [{"observed": "+".join(mc.consistency.get("observed", ["u3"])), **r}
                for r in report["consistency"]]
    else:
        rows = _error_vs_N(report)
    _write_csv(out / "consistency.csv", rows,
               ["observed", "N", "estimates", "median_error", "mean_error"])
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "identify": cmd_identify,
    "diagnose": cmd_diagnose,
    "montecarlo": cmd_montecarlo,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="netident", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON configuration file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None if name in ("identify", "montecarlo") else 0)
        sp.add_argument("--objective", choices=OBJECTIVES, default=None)
        sp.add_argument("--jobs", type=int, default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_INPUT
    try:
        return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except GenerationError as exc:
        print(f"generation error: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    except EstimationError as exc:
        print(f"estimation error (stage {exc.stage}): {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except StructureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
