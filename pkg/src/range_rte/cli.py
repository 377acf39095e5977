"""Command-line entry points.

Subcommands:
  estimate   one-shot transform estimate from odometry + range CSV logs
  simulate   Monte-Carlo evaluation cells from a JSON config
  fim        information analysis of a dataset at a given transform
  drift      sliding-window drift-correction scenario

Exit codes: 0 success, 2 parse/config error, 3 insufficient or singular
data, 4 solver failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import io_formats as iof
from .estimators import (
    DegenerateSolutionError,
    ESTIMATORS,
    HeadingUndefinedError,
    solve_sdp_relaxation,
    assemble_qcqp,
    extract_transform,
    recover_rank_one,
)
from .fisher import (
    InsufficientDataError,
    SingularFimError,
    confidence_intervals,
    det_fim_geometric,
    fim,
    singularity_report,
)
from .geometry import LeverArm, Pose, Transform4DoF
from .measurement import NoOverlapError, ingest_logs, motion_excitation_check, sliding_outlier_filter
from .simulation import (
    DriftConfig,
    ScenarioConfig,
    drift_scenario,
    monte_carlo_run,
    resolve_threads,
    trial_data,
)

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_SINGULAR = 3
EXIT_SOLVER = 4

ESTIMATE_DEFAULTS = {
    "sigma_r_m": 0.1,
    "estimator": "qcqp",
    "lever_arm_a_m": [0.0, 0.0, 0.0],
    "lever_arm_b_m": [0.0, 0.0, 0.0],
    "d0_m": None,
    "use_first_range_as_d0": True,
    "outlier_window": 20,
    "outlier_threshold_m2": 0.005,
    "outlier_mode": "absolute",
    "excitation_var_m2": 0.05,
    "excitation_n": 100,
    "kappa_threshold": 1e6,
}

SIM_DEFAULTS = {
    "d0_m": 3.0,
    "radius_m": 1.0,
    "n_poses": 20,
    "sigma_r_m": 0.1,
    "sigma_o_m": 0.001,
    "trials": 100,
    "seed": 0,
    "estimator": "qcqp",
    "lever_arm_a_m": [0.0, 0.0, 0.0],
    "lever_arm_b_m": [0.0, 0.0, 0.0],
    "record_timing": True,
    "emit_logs": False,
    "threads": None,
    "cells": None,
}

DRIFT_DEFAULTS = {
    "d0_m": 15.0,
    "radius_m": 2.0,
    "sigma_r_m": 0.1,
    "sigma_o_m": 0.001,
    "seed": 0,
    "estimator": "qcqp",
    "sigma_t_m": 0.1,
    "sigma_theta_rad": None,
    "sigma_theta_deg": None,
    "duration_s": 600.0,
    "window": 50,
    "rate_hz": 25.0,
    "stride": None,
}

CELL_KEYS = {"d0_m", "radius_m", "n_poses", "sigma_r_m", "sigma_o_m", "trials", "estimator", "seed"}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _flags_payload(flags) -> dict:
    return {
        "configuration_singular": flags.configuration_singular,
        "per_param_unobservable": list(flags.per_param_unobservable),
        "kappa_threshold": flags.kappa_threshold,
    }


def _scenario_from_config(cfg: dict) -> ScenarioConfig:
    return ScenarioConfig(
        d0=cfg["d0_m"],
        D=cfg["radius_m"],
        n_poses=cfg["n_poses"],
        sigma_r=cfg["sigma_r_m"],
        sigma_o=cfg["sigma_o_m"],
        trials=cfg["trials"],
        seed=cfg["seed"],
        lever_arms=(
            LeverArm(np.asarray(cfg["lever_arm_a_m"], dtype=float)),
            LeverArm(np.asarray(cfg["lever_arm_b_m"], dtype=float)),
        ),
    )


def cmd_estimate(args) -> int:
    cfg = dict(ESTIMATE_DEFAULTS)
    if args.config:
        cfg = iof.load_config(args.config, set(ESTIMATE_DEFAULTS), ESTIMATE_DEFAULTS)
    if args.estimator:
        cfg["estimator"] = args.estimator
    if cfg["estimator"] not in ESTIMATORS:
        raise CliError(f"unknown estimator {cfg['estimator']!r}", EXIT_PARSE)

    odom_a = iof.read_odometry_csv(args.odom_a)
    odom_b = iof.read_odometry_csv(args.odom_b)
    ranges = iof.read_ranges_csv(args.ranges)

    kept = sliding_outlier_filter(
        ranges,
        window=cfg["outlier_window"],
        threshold=cfg["outlier_threshold_m2"],
        mode=cfg["outlier_mode"],
    )
    n_outliers = len(ranges) - len(kept)
    dataset, n_dropped = ingest_logs(
        odom_a,
        odom_b,
        kept,
        arm_a=LeverArm(np.asarray(cfg["lever_arm_a_m"], dtype=float)),
        arm_b=LeverArm(np.asarray(cfg["lever_arm_b_m"], dtype=float)),
        sigma_r=cfg["sigma_r_m"],
        d0=cfg["d0_m"],
        use_first_range_as_d0=cfg["use_first_range_as_d0"],
    )

    report = {
        "command": "estimate",
        "config": cfg,
        "config_hash": iof.config_hash(cfg),
        "counts": {
            "ranges_in": len(ranges),
            "outliers_rejected": n_outliers,
            "uncovered_dropped": n_dropped,
            "used": len(dataset),
        },
    }

    excited = motion_excitation_check(
        dataset.pa, dataset.pb, var_threshold=cfg["excitation_var_m2"], n=cfg["excitation_n"]
    )
    report["excitation_ok"] = excited
    if not excited:
        # No estimation on unexcited data; still report which parameters
        # the information matrix cannot pin down at a crude reference point.
        try:
            problem = assemble_qcqp(dataset)
            X, _ = solve_sdp_relaxation(problem, tol=1e-9)
            T_ref = extract_transform(recover_rank_one(X))
        except Exception:
            scale = dataset.d0 or float(np.median(dataset.d))
            T_ref = Transform4DoF(t=np.array([scale, 0.0, 0.0]), theta=0.0)
        rep = fim(T_ref, dataset)
        flags = singularity_report(rep.F, kappa_threshold=cfg["kappa_threshold"])
        report["flags"] = _flags_payload(flags)
        report["kappa"] = rep.kappa
        report["error"] = "insufficient motion excitation: configuration treated as singular"
        _write_report(args.out, report)
        return EXIT_SINGULAR

    est = ESTIMATORS[cfg["estimator"]](dataset)
    report["estimate"] = {"t_m": est.theta_hat.t, "theta_rad": est.theta_hat.theta}
    report["std_errors"] = est.std_errors
    report["kappa"] = est.kappa
    report["flags"] = _flags_payload(est.flags)
    report["solver"] = est.solver
    try:
        rep = fim(est.theta_hat, dataset)
        report["ci95"] = confidence_intervals(est.theta_hat, rep.F)
    except SingularFimError:
        report["ci95"] = None
    _write_report(args.out, report)
    if est.flags.configuration_singular:
        return EXIT_SINGULAR
    return EXIT_OK


def _write_report(path, payload) -> None:
    iof.dump_json(path, iof.jsonable(payload))


def _expand_cells(cfg: dict) -> list[dict]:
    base = {k: cfg[k] for k in CELL_KEYS}
    cells = cfg.get("cells")
    if not cells:
        return [base]
    out = []
    for i, overrides in enumerate(cells):
        if not isinstance(overrides, dict):
            raise iof.ParseError(f"cells[{i}] must be an object")
        unknown = set(overrides) - CELL_KEYS
        if unknown:
            raise iof.ParseError(f"cells[{i}]: unknown keys {sorted(unknown)}")
        cell = dict(base)
        cell.update(overrides)
        out.append(cell)
    return out


def _emit_trial_logs(out_dir, cell_idx, trial, cfg_cell, base_cfg, T_true, dataset):
    """Write antenna-frame logs reproducing this trial's dataset.

    Poses carry the (noisy) antenna positions directly with identity
    orientation, so re-ingestion with zero lever arms reproduces the
    in-process dataset bit for bit.
    """
    logs = os.path.join(out_dir, "logs")
    os.makedirs(logs, exist_ok=True)
    stem = os.path.join(logs, f"cell{cell_idx:02d}_trial{trial:03d}")
    poses_a = [Pose(t=s.t, p=s.pa) for s in dataset.samples]
    poses_b = [Pose(t=s.t, p=s.pb) for s in dataset.samples]
    iof.write_odometry_csv(stem + "_odom_a.csv", poses_a)
    iof.write_odometry_csv(stem + "_odom_b.csv", poses_b)
    from .measurement import RangeSample

    iof.write_ranges_csv(stem + "_ranges.csv", [RangeSample(t=s.t, d=s.d) for s in dataset.samples])
    estimate_cfg = dict(ESTIMATE_DEFAULTS)
    estimate_cfg["sigma_r_m"] = max(cfg_cell["sigma_r_m"], 1e-9)
    estimate_cfg["estimator"] = cfg_cell["estimator"]
    # outlier filter must stay transparent for exact reproduction
    estimate_cfg["outlier_threshold_m2"] = float("inf")
    iof.dump_json(stem + "_estimate_config.json", iof.jsonable(estimate_cfg))
    iof.dump_json(
        stem + "_truth.json",
        iof.jsonable({"t_m": T_true.t, "theta_rad": T_true.theta, "d0_m": dataset.d0}),
    )


def cmd_simulate(args) -> int:
    cfg = iof.load_config(args.config, set(SIM_DEFAULTS), SIM_DEFAULTS)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.estimator:
        cfg["estimator"] = args.estimator
    threads = args.threads if args.threads is not None else cfg["threads"]
    n_threads = resolve_threads(threads)
    chash = iof.config_hash(cfg)

    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    results_path = args.results or os.path.join(out_dir, "results.csv")
    summary_path = args.summary or os.path.join(out_dir, "summary.json")

    cells = _expand_cells(cfg)
    rows = ["cell,trial,e_t,e_theta,crlb_t,crlb_theta,solve_ms,status"]
    summary_cells = []
    for ci, cell in enumerate(cells):
        if cell["estimator"] not in ESTIMATORS:
            raise CliError(f"unknown estimator {cell['estimator']!r}", EXIT_PARSE)
        scen = _scenario_from_config({**cfg, **cell})
        stats = monte_carlo_run(scen, estimator=cell["estimator"], threads=n_threads)
        failed = {int(msg.split()[1].rstrip(":")) for msg in stats.failures}
        for trial in range(scen.trials):
            ok = trial not in failed
            ms = repr(float(stats.solve_ms[trial])) if cfg["record_timing"] else ""
            rows.append(
                f"{ci},{trial},{_csv_num(stats.e_t[trial])},{_csv_num(stats.e_theta[trial])},"
                f"{_csv_num(stats.crlb_t[trial])},{_csv_num(stats.crlb_theta[trial])},"
                f"{ms},{'ok' if ok else 'failed'}"
            )
        summary_cells.append(
            {
                "cell": ci,
                "params": cell,
                "rmse_t": stats.rmse_t,
                "rmse_theta": stats.rmse_theta,
                "mse_t": stats.mse_t,
                "mse_theta": stats.mse_theta,
                "crlb_t_mean": stats.crlb_t_mean,
                "crlb_theta_mean": stats.crlb_theta_mean,
                "failures": len(stats.failures),
                "failure_messages": stats.failures,
            }
        )
        if cfg["emit_logs"]:
            for trial in range(scen.trials):
                T_true, dataset = trial_data(scen, trial)
                _emit_trial_logs(out_dir, ci, trial, {**cfg, **cell}, cfg, T_true, dataset)

    iof.atomic_write_text(results_path, "\n".join(rows) + "\n")
    iof.dump_json(
        summary_path,
        iof.jsonable({"command": "simulate", "config": cfg, "config_hash": chash, "seed": cfg["seed"], "cells": summary_cells}),
    )
    return EXIT_OK


def _csv_num(x) -> str:
    if x is None:
        return "nan"
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def cmd_fim(args) -> int:
    theta = Transform4DoF(t=np.array(args.theta[:3], dtype=float), theta=float(args.theta[3]))
    if args.scenario:
        cfg = iof.load_config(args.scenario, set(SIM_DEFAULTS), SIM_DEFAULTS)
        if args.seed is not None:
            cfg["seed"] = args.seed
        scen = _scenario_from_config(cfg)
        _, dataset = trial_data(scen, 0)
        meta = {"source": "scenario", "config": cfg, "config_hash": iof.config_hash(cfg)}
    else:
        if not (args.odom_a and args.odom_b and args.ranges):
            raise CliError("either --scenario or --odom-a/--odom-b/--ranges required", EXIT_PARSE)
        odom_a = iof.read_odometry_csv(args.odom_a)
        odom_b = iof.read_odometry_csv(args.odom_b)
        ranges = iof.read_ranges_csv(args.ranges)
        dataset, _ = ingest_logs(odom_a, odom_b, ranges, sigma_r=args.sigma_r)
        meta = {"source": "logs"}

    rep = fim(theta, dataset)
    flags = singularity_report(rep.F)
    payload = {
        "command": "fim",
        **meta,
        "k": len(dataset),
        "theta": {"t_m": theta.t, "theta_rad": theta.theta},
        "F": rep.F,
        "kappa": rep.kappa,
        "rank": rep.rank,
        "crlb_t": rep.crlb_t,
        "crlb_theta": rep.crlb_theta,
        "det_direct": rep.det_f,
        "flags": _flags_payload(flags),
    }
    if len(dataset) >= 4:
        payload["det_geometric"] = det_fim_geometric(theta, dataset)
    else:
        payload["note"] = "fewer than 4 measurements: determinant decomposition unavailable"
        payload.pop("det_direct")
    try:
        payload["ci95"] = confidence_intervals(theta, rep.F)
    except SingularFimError:
        payload["ci95"] = None
    _write_report(args.out, payload)
    return EXIT_OK


def cmd_drift(args) -> int:
    cfg = iof.load_config(args.config, set(DRIFT_DEFAULTS), DRIFT_DEFAULTS)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.estimator:
        cfg["estimator"] = args.estimator
    if cfg["estimator"] not in ESTIMATORS:
        raise CliError(f"unknown estimator {cfg['estimator']!r}", EXIT_PARSE)
    if cfg["sigma_theta_rad"] is not None and cfg["sigma_theta_deg"] is not None:
        raise iof.ParseError("specify only one of sigma_theta_rad / sigma_theta_deg")
    if cfg["sigma_theta_deg"] is not None:
        sigma_theta, unit = cfg["sigma_theta_deg"], "deg"
    else:
        sigma_theta = cfg["sigma_theta_rad"] if cfg["sigma_theta_rad"] is not None else 0.1
        unit = "rad"

    drift = DriftConfig(
        sigma_t=cfg["sigma_t_m"],
        sigma_theta=sigma_theta,
        duration=cfg["duration_s"],
        window=cfg["window"],
        rate=cfg["rate_hz"],
        stride=cfg["stride"],
        theta_unit=unit,
    )
    scen = ScenarioConfig(
        d0=cfg["d0_m"],
        D=cfg["radius_m"],
        n_poses=1,
        sigma_r=cfg["sigma_r_m"],
        sigma_o=cfg["sigma_o_m"],
        trials=1,
        seed=cfg["seed"],
        drift=drift,
    )
    result = drift_scenario(scen, estimator=cfg["estimator"])
    windows = []
    for w in result.windows:
        entry = {"index": w.index, "t_end_s": w.t_end, "status": "skipped" if w.skipped else "estimated"}
        if not w.skipped:
            entry["t_m"] = w.report.theta_hat.t
            entry["theta_rad"] = w.report.theta_hat.theta
            entry["kappa"] = w.report.kappa
            entry["cost"] = w.report.solver.get("final_cost")
        windows.append(entry)
    payload = {
        "command": "drift",
        "config": cfg,
        "config_hash": iof.config_hash(cfg),
        "seed": cfg["seed"],
        "nc_rmse_m": result.nc_rmse,
        "corrected_rmse_m": result.corrected_rmse,
        "improvement_ratio": (result.corrected_rmse / result.nc_rmse) if result.nc_rmse else None,
        "n_windows": len(result.windows),
        "n_skipped": result.n_skipped,
        "windows": windows,
    }
    _write_report(args.out, payload)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="range-rte", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    pe = sub.add_parser("estimate", help="estimate the transform from CSV logs")
    pe.add_argument("--odom-a", required=True)
    pe.add_argument("--odom-b", required=True)
    pe.add_argument("--ranges", required=True)
    pe.add_argument("--config")
    pe.add_argument("--estimator", choices=sorted(ESTIMATORS))
    pe.add_argument("--out", default="report.json")
    pe.set_defaults(func=cmd_estimate)

    ps = sub.add_parser("simulate", help="Monte-Carlo evaluation")
    ps.add_argument("--config", required=True)
    ps.add_argument("--out-dir")
    ps.add_argument("--results")
    ps.add_argument("--summary")
    ps.add_argument("--seed", type=int)
    ps.add_argument("--estimator", choices=sorted(ESTIMATORS))
    ps.add_argument("--threads", type=int)
    ps.set_defaults(func=cmd_simulate)

    pf = sub.add_parser("fim", help="information analysis at a given transform")
    pf.add_argument("--odom-a")
    pf.add_argument("--odom-b")
    pf.add_argument("--ranges")
    pf.add_argument("--sigma-r", type=float, default=0.1)
    pf.add_argument("--scenario")
    pf.add_argument("--seed", type=int)
    pf.add_argument("--theta", type=float, nargs=4, required=True, metavar=("TX", "TY", "TZ", "YAW"))
    pf.add_argument("--out", default="fim.json")
    pf.set_defaults(func=cmd_fim)

    pd = sub.add_parser("drift", help="sliding-window drift correction scenario")
    pd.add_argument("--config", required=True)
    pd.add_argument("--seed", type=int)
    pd.add_argument("--estimator", choices=sorted(ESTIMATORS))
    pd.add_argument("--out", default="drift_report.json")
    pd.set_defaults(func=cmd_drift)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except iof.ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (NoOverlapError, InsufficientDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DegenerateSolutionError, HeadingUndefinedError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
