"""Command-line pipeline: data -> GP -> LQR init -> synthesis -> certificate -> simulation.

Every stage reads its inputs from and writes its outputs to the output
directory, so stages can be rerun individually.  Exit status 1 signals a
failed precondition or numerical failure, 2 an invalid configuration; both
print a JSON error object on stderr.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import _accel
from .certifier import certify
from .config import ConfigError, load_config
from .controller import (ClosedLoopModel, CostSpec, Margin, NotStabilizable, RiccatiDiverged,
                         ValueFunction, init_lqr, synthesize)
from .geometry import Triangulation, triangulate_box
from .gpmodel import (NotPositiveDefinite, TrainingSet, fit_mean, gp_from_json, gp_to_json,
                      optimize_hyperparams)
from .simulator import PENDULUM_G, PlantSpec, grid_states, pendulum_f, sweep

STAGES = ("gen-data", "fit-gp", "init-lqr", "synthesize", "certify", "simulate")


class StageError(RuntimeError):
    def __init__(self, stage: str, **info):
        super().__init__(json.dumps({"stage": stage, **info}))
        self.payload = {"stage": stage, **info}


# --- helpers ------------------------------------------------------------------------

def axis_points(lo: float, hi: float, step: float) -> np.ndarray:
    return np.linspace(lo, hi, int(round((hi - lo) / step)) + 1)


def box_grid(box, step: float) -> np.ndarray:
    axes = [axis_points(lo, hi, step) for lo, hi in box]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _require(stage: str, out: Path, name: str) -> Path:
    p = out / name
    if not p.is_file():
        raise StageError(stage, missing=name)
    return p


def _read_json(path: Path):
    with open(path) as fh:
        return json.load(fh)


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _plant(cfg):
    # only the pendulum ships; the schema rejects anything else
    return pendulum_f, PENDULUM_G


def _cost(cfg, n: int) -> CostSpec:
    return CostSpec(np.eye(n), np.asarray(cfg["cost"]["R"], dtype=float))


def _check_states(cfg) -> np.ndarray:
    return box_grid(cfg["box"], cfg["check"]["step"])


def load_model(out: Path, stage: str, controller_file: str = "controller.json") -> ClosedLoopModel:
    gp = gp_from_json(_read_json(_require(stage, out, "gp.json")))
    c = _read_json(_require(stage, out, controller_file))
    cost = CostSpec(np.asarray(c["Q"], dtype=float), np.asarray(c["R"], dtype=float))
    return ClosedLoopModel(gp, np.asarray(c["g"], dtype=float), ValueFunction.from_json(c["value"]), cost)


def _controller_json(m: ClosedLoopModel, gp_path: Path, metadata: dict) -> dict:
    return {
        "value": m.value.to_json(),
        "kernels": {"source": gp_path.name, "sha256": _digest(gp_path)},
        "offset": m.value.offset,
        "g": m.g.tolist(),
        "Q": m.cost.Q.tolist(),
        "R": m.cost.R.tolist(),
        "metadata": metadata,
    }


# --- stages -------------------------------------------------------------------------

def stage_gen_data(cfg, out: Path) -> dict:
    f, _ = _plant(cfg)
    rng = np.random.default_rng(cfg["seed"])
    X = box_grid(cfg["box"], cfg["data"]["step"])
    Y = np.array([f(x) for x in X], dtype=float)
    noise = cfg["data"]["noise"]
    ts = TrainingSet(X, Y + rng.uniform(-noise, noise, size=Y.shape))
    _write_text(out / "data.csv", ts.to_csv())
    return {"points": ts.size}


def stage_fit_gp(cfg, out: Path) -> dict:
    ts = TrainingSet.from_csv(_require("fit-gp", out, "data.csv").read_text())
    n = ts.dim
    theta_ini = cfg["gp"]["theta_ini"]
    if theta_ini is None:
        theta_ini = [0.0] * (n + 1) + [math.log(0.1)]
    res = optimize_hyperparams(ts, theta_ini, cfg["gp"]["budget"], cfg["gp"]["kappa_theta"])
    gp = fit_mean(ts, res.hp)
    doc = gp_to_json(gp)
    doc["optimizer"] = {"initial_objective": res.initial_value, "final_objective": res.value,
                        "evaluations": res.evaluations, "theta_ini": list(map(float, theta_ini))}
    _write_json(out / "gp.json", doc)
    return {"initial_objective": res.initial_value, "final_objective": res.value}


def stage_init_lqr(cfg, out: Path) -> dict:
    gp_path = _require("init-lqr", out, "gp.json")
    gp = gp_from_json(_read_json(gp_path))
    _, g = _plant(cfg)
    cost = _cost(cfg, gp.centers.shape[1])
    li = init_lqr(gp, g, cost, _check_states(cfg), cfg["lqr"]["kappa_alpha"])
    m = ClosedLoopModel(gp, g, li.value, cost)
    meta = {"P": li.P.tolist(), "A": li.A.tolist(), "normal_equation_residual": li.normal_residual}
    _write_json(out / "controller_lqr.json", _controller_json(m, gp_path, meta))
    return {"normal_equation_residual": li.normal_residual}


def stage_synthesize(cfg, out: Path) -> dict:
    gp_path = _require("synthesize", out, "gp.json")
    m0 = load_model(out, "synthesize", "controller_lqr.json")
    s = cfg["synthesis"]
    res = synthesize(m0, _check_states(cfg), s["kappa"], s["kappa_grad"], s["iterations"],
                     Margin(s["eta_quad"], s["eta_const"]))
    m1 = m0.with_value(res.value)
    meta = {"initial_objective": res.initial_objective, "best_objective": res.best_objective,
            "best_iteration": res.best_iteration, "iterations": s["iterations"],
            "objective_trace": res.trace[:, 0].tolist()}
    _write_json(out / "controller.json", _controller_json(m1, gp_path, meta))
    _write_text(out / "synthesis.csv", res.trace_csv())
    return {"initial_objective": res.initial_objective, "best_objective": res.best_objective}


def _triangulation(cfg) -> Triangulation:
    return triangulate_box(cfg["box"], cfg["certify"]["grid_step"])


def stage_certify(cfg, out: Path) -> dict:
    m = load_model(out, "certify")
    t = _triangulation(cfg)
    c = cfg["certify"]
    cert = certify(m, t, c["margin"], c["refine_depth"])
    summary = cert.summary()
    if c["compare_lqr"] and (out / "controller_lqr.json").is_file():
        base = certify(load_model(out, "certify", "controller_lqr.json"), t, c["margin"], c["refine_depth"])
        _write_text(out / "certificate_lqr.csv", base.to_csv())
        _write_json(out / "certificate_lqr.json", base.summary())
        summary["lqr_certified_fraction"] = base.certified_fraction
    _write_text(out / "certificate.csv", cert.to_csv())
    _write_json(out / "certificate.json", summary)
    return {"certified_fraction": cert.certified_fraction, "counts": summary["counts"]}


def read_region(path: Path) -> np.ndarray:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return np.array([r["region"] == "1" for r in rows], dtype=bool)


def stage_simulate(cfg, out: Path) -> dict:
    m = load_model(out, "simulate")
    f, g = _plant(cfg)
    sim = cfg["simulation"]
    plant = PlantSpec(f, g, sim["dt"], sim["horizon"], sim["convergence_radius"], sim["divergence_radius"])
    starts = grid_states(cfg["box"], sim["starts_per_axis"])
    region = None
    if (out / "certificate.csv").is_file():
        region = read_region(out / "certificate.csv")
        t = _triangulation(cfg)
        if region.size != t.simplex_count:
            region = None
    trajs = sweep(plant, m, starts)
    zero = sweep(plant, None, starts)
    tdir = out / "trajectories"
    entries = []
    for k, (tr, tz) in enumerate(zip(trajs, zero)):
        _write_text(tdir / f"traj_{k:03d}.csv", tr.to_csv())
        e = tr.summary()
        e["file"] = f"traj_{k:03d}.csv"
        e["zero_control_status"] = tz.status
        e["in_region"] = None if region is None else bool(region[t.locate(starts[k])])
        entries.append(e)
    summary = {
        "trajectories": entries,
        "converged": sum(tr.converged for tr in trajs),
        "converged_zero_control": sum(tz.converged for tz in zero),
        "total": len(trajs),
    }
    _write_json(tdir / "summary.json", summary)
    return {"converged": summary["converged"], "total": summary["total"]}


STAGE_FUNCS = {
    "gen-data": stage_gen_data,
    "fit-gp": stage_fit_gp,
    "init-lqr": stage_init_lqr,
    "synthesize": stage_synthesize,
    "certify": stage_certify,
    "simulate": stage_simulate,
}


def run_stage(name: str, cfg: dict, out: Path) -> dict:
    try:
        return STAGE_FUNCS[name](cfg, out)
    except StageError:
        raise
    except (NotStabilizable, RiccatiDiverged, NotPositiveDefinite, ValueError, KeyError) as exc:
        raise StageError(name, error=type(exc).__name__, detail=str(exc)) from exc


def run_pipeline(cfg: dict, out: Path) -> dict:
    return {name: run_stage(name, cfg, out) for name in STAGES}


# --- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpcert", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=STAGES + ("pipeline",))
    p.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
    p.add_argument("--out", help="output directory (overrides config 'out')")
    p.add_argument("--seed", type=int, help="RNG seed (overrides config 'seed')")
    p.add_argument("--threads", type=int, help="threads for certification")
    p.add_argument("--stage-overrides", default=None,
                   help='JSON object of dotted-path patches, e.g. \'{"synthesis.iterations": 2000}\'')
    return p


def _fail(code: int, payload: dict) -> int:
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = json.loads(args.stage_overrides) if args.stage_overrides else {}
        if not isinstance(overrides, dict):
            raise ConfigError("--stage-overrides must be a JSON object")
        for key, val in (("out", args.out), ("seed", args.seed), ("threads", args.threads)):
            if val is not None:
                overrides[key] = val
        cfg = load_config(args.config, overrides)
    except (ConfigError, json.JSONDecodeError) as exc:
        return _fail(2, {"stage": "config", "error": str(exc)})
    except FileNotFoundError:
        return _fail(1, {"stage": "config", "missing": os.path.basename(args.config)})
    _accel.set_threads(cfg["threads"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "pipeline":
            result = run_pipeline(cfg, out)
        else:
            result = run_stage(args.command, cfg, out)
    except StageError as exc:
        return _fail(1, exc.payload)
    print(json.dumps(result, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
