"""Experiment sweeps: (dgp x gamma x d x function) cells, replicated seeds,
AGMM plus baselines, records and summary tables on disk."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from agmm.baselines import fit_2sls, fit_2sls_poly, fit_direct_nn, fit_direct_poly
from agmm.critics import CriticSet
from agmm.data import Rng, stable_hash
from agmm.dgp import FUNCTIONS, DgpConfig, generate
from agmm.evaluation import (
    R2Record,
    format_table,
    grid_points,
    marginal_points,
    mse,
    percentile_summary,
    r_squared,
    write_records,
    write_summary,
)
from agmm.trainer import CriticConfig, TrainConfig, predict, train, write_traces_csv

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
AGMM_ESTIMATORS = ("AGMM-avg", "AGMM-final", "AGMM-best")
BASELINES = ("2SLSPoly", "2SLS", "DirectPoly", "DirectNN")
SCHEMES = ("grid", "marginal")


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


@dataclass
class DirectNNConfig:
    widths: tuple[int, ...] = (1, 100, 100, 100, 1)
    epochs: int = 50
    lr: float = 0.007
    batch_size: int = 100


@dataclass
class ExperimentConfig:
    functions: list[str]
    dgps: list[int] = field(default_factory=lambda: [1])
    gammas: list[float] = field(default_factory=lambda: [0.5])
    dims: list[int] = field(default_factory=lambda: [1])
    n: int = 1000
    M_experiments: int = 20
    base_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    baselines: list[str] = field(default_factory=lambda: list(BASELINES))
    schemes: list[str] = field(default_factory=lambda: list(SCHEMES))
    grid_count: int = 100
    marginal_count: int = 1000
    scale_convention: str = "std"
    gamma_weights: str = "instrument"
    direct_nn: DirectNNConfig = field(default_factory=DirectNNConfig)
    save_runs: bool = True
    output_dir: str | None = None

    @property
    def estimators(self) -> list[str]:
        return list(AGMM_ESTIMATORS) + list(self.baselines)

    def cells(self) -> list[tuple[int, float, int, str]]:
        """Valid (dgp, gamma, d, function) cells in canonical order; DGP 2
        cells with a single instrument are dropped."""
        return [
            (dgp, gamma, d, fn)
            for dgp, gamma, d, fn in itertools.product(self.dgps, self.gammas, self.dims, self.functions)
            if not (dgp == 2 and d < 2)
        ]


_TOP_KEYS = {f.name for f in fields(ExperimentConfig)} | {"schema_version"}


def _expect(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(path, msg)


def _nonempty_list(obj, key, kind, check=None):
    val = obj.get(key)
    _expect(isinstance(val, list) and len(val) > 0, key, "must be a non-empty list")
    for i, v in enumerate(val):
        ok = isinstance(v, kind) and not isinstance(v, bool)
        _expect(ok, f"{key}[{i}]", f"expected {getattr(kind, '__name__', kind)}, got {v!r}")
        if check is not None:
            msg = check(v)
            _expect(msg is None, f"{key}[{i}]", msg or "")
    return val


def _dataclass_from(cls, obj, path):
    _expect(isinstance(obj, dict), path, "must be an object")
    names = {f.name for f in fields(cls)}
    for key in obj:
        _expect(key in names, f"{path}.{key}", f"unknown field (allowed: {sorted(names)})")
    obj = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def parse_config(obj: dict) -> ExperimentConfig:
    """Validate a decoded JSON config; raises :class:`ConfigError` naming the
    offending field."""
    _expect(isinstance(obj, dict), "<root>", "config must be a JSON object")
    _expect(obj.get("schema_version") == SCHEMA_VERSION, "schema_version",
            f"must be {SCHEMA_VERSION}")
    for key in obj:
        _expect(key in _TOP_KEYS, key, "unknown field")
    kw = {}
    kw["functions"] = _nonempty_list(
        obj, "functions", str, lambda v: None if v in FUNCTIONS else f"unknown function {v!r}")
    if "dgps" in obj:
        kw["dgps"] = _nonempty_list(obj, "dgps", int, lambda v: None if v in (1, 2) else "dgp must be 1 or 2")
    if "gammas" in obj:
        kw["gammas"] = [float(g) for g in _nonempty_list(
            obj, "gammas", (int, float), lambda v: None if 0 <= v <= 1 else "gamma must be in [0, 1]")]
    if "dims" in obj:
        kw["dims"] = _nonempty_list(obj, "dims", int, lambda v: None if v >= 1 else "d must be >= 1")
    for key in ("n", "M_experiments", "grid_count", "marginal_count"):
        if key in obj:
            v = obj[key]
            _expect(isinstance(v, int) and not isinstance(v, bool) and v >= 1, key, "must be a positive integer")
            kw[key] = v
    if "base_seed" in obj:
        _expect(isinstance(obj["base_seed"], int) and obj["base_seed"] >= 0, "base_seed",
                "must be a nonnegative integer")
        kw["base_seed"] = obj["base_seed"]
    if "baselines" in obj:
        b = obj["baselines"]
        if isinstance(b, bool):
            kw["baselines"] = list(BASELINES) if b else []
        else:
            _expect(isinstance(b, list), "baselines", "must be a boolean or a list")
            for i, name in enumerate(b):
                _expect(name in BASELINES, f"baselines[{i}]", f"unknown baseline {name!r}")
            kw["baselines"] = list(b)
    if "schemes" in obj:
        kw["schemes"] = _nonempty_list(
            obj, "schemes", str, lambda v: None if v in SCHEMES else f"unknown scheme {v!r}")
    for key, allowed in (("scale_convention", ("std", "variance")),
                         ("gamma_weights", ("instrument", "confounder"))):
        if key in obj:
            _expect(obj[key] in allowed, key, f"must be one of {allowed}")
            kw[key] = obj[key]
    if "save_runs" in obj:
        _expect(isinstance(obj["save_runs"], bool), "save_runs", "must be a boolean")
        kw["save_runs"] = obj["save_runs"]
    if "output_dir" in obj:
        _expect(isinstance(obj["output_dir"], str), "output_dir", "must be a string")
        kw["output_dir"] = obj["output_dir"]
    train_obj = dict(obj.get("train", {}))
    _expect(isinstance(train_obj, dict), "train", "must be an object")
    if "critic" in train_obj:
        train_obj["critic"] = _dataclass_from(CriticConfig, train_obj["critic"], "train.critic")
    kw["train"] = _dataclass_from(TrainConfig, train_obj, "train")
    if "direct_nn" in obj:
        kw["direct_nn"] = _dataclass_from(DirectNNConfig, obj["direct_nn"], "direct_nn")
    kw["n"] = kw.get("n", 1000)
    cfg = ExperimentConfig(**kw)
    if not cfg.cells():
        raise ConfigError("dims", "no valid (dgp, d) combination: DGP 2 needs d >= 2")
    return cfg


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno} col {exc.colno}", f"invalid JSON: {exc.msg}") from None
    return parse_config(obj)


def replicate_seed(base_seed: int, cell, replicate: int) -> int:
    dgp, gamma, d, fn = cell
    key = f"dgp={dgp}|gamma={gamma!r}|d={d}|fn={fn}|rep={replicate}"
    return (base_seed + stable_hash(key)) % (1 << 64)


def run_id(cell, replicate: int) -> str:
    dgp, gamma, d, fn = cell
    return f"dgp{dgp}_{fn}_g{gamma:g}_d{d}_r{replicate:03d}"


@dataclass
class ReplicateOutput:
    run_id: str
    records: list[R2Record]
    error: str | None = None
    artifact: dict | None = None


def run_replicate(cfg: ExperimentConfig, cell, replicate: int) -> ReplicateOutput:
    rid = run_id(cell, replicate)
    try:
        return _run_replicate(cfg, cell, replicate, rid)
    except Exception as exc:  # a failed replicate must not stop the sweep
        log.warning("replicate %s failed: %s", rid, exc)
        return ReplicateOutput(rid, [], error=f"{type(exc).__name__}: {exc}",
                               artifact={"traceback": traceback.format_exc()})


def _run_replicate(cfg: ExperimentConfig, cell, replicate: int, rid: str) -> ReplicateOutput:
    dgp, gamma, d, fn = cell
    seed = replicate_seed(cfg.base_seed, cell, replicate)
    rng = Rng(seed)
    dcfg = DgpConfig(dgp, gamma, d, cfg.n, fn, seed=seed,
                     scale_convention=cfg.scale_convention, gamma_weights=cfg.gamma_weights)
    gen = generate(dcfg, rng.spawn("data"))
    ds, h0 = gen.data, gen.true_fn

    points = {}
    if "grid" in cfg.schemes:
        points["grid"] = grid_points(ds.w, cfg.grid_count)
    if "marginal" in cfg.schemes:
        fresh_cfg = DgpConfig(dgp, gamma, d, cfg.marginal_count, fn, seed=seed,
                              scale_convention=cfg.scale_convention, gamma_weights=cfg.gamma_weights)
        points["marginal"] = marginal_points(generate(fresh_cfg, rng.spawn("marginal"), true_fn=h0).data)

    tcfg = replace(cfg.train, seed=rng.spawn("train").seed)
    res = train(ds, tcfg)
    estimators = {
        "AGMM-avg": res.model_avg,
        "AGMM-final": res.model_final,
        "AGMM-best": res.model_best,
    }
    fitters = {
        "2SLSPoly": lambda: fit_2sls_poly(ds),
        "2SLS": lambda: fit_2sls(ds),
        "DirectPoly": lambda: fit_direct_poly(ds),
        "DirectNN": lambda: fit_direct_nn(
            ds, cfg.direct_nn.widths, cfg.direct_nn.epochs, cfg.direct_nn.lr,
            cfg.direct_nn.batch_size, seed=rng.spawn("direct_nn").seed),
    }
    for name in cfg.baselines:
        estimators[name] = fitters[name]()

    records = []
    for name, est in estimators.items():
        wrapped = _Predictor(est, predict)
        for scheme, pts in points.items():
            records.append(R2Record(
                name, fn, dgp, gamma, d, scheme, replicate,
                mse(wrapped, h0, pts), r_squared(wrapped, h0, pts),
            ))
    artifact = None
    if cfg.save_runs:
        artifact = {
            "run_id": rid,
            "seed": seed,
            "cell": {"dgp": dgp, "gamma": gamma, "d": d, "function": fn},
            "true_fn": h0.to_json(),
            "traces": {k: v.tolist() for k, v in res.traces.items()},
            "best_step": res.best_step,
            "snapshot_steps": res.snapshot_steps.tolist(),
            "kernels": {"initial": res.critics_initial.to_json(), "final": res.critics_final.to_json()},
        }
    return ReplicateOutput(rid, records, artifact=artifact)


class _Predictor:
    def __init__(self, est, predict):
        self.est, self._predict = est, predict

    def predict(self, w):
        return self._predict(self.est, w)


def _task(args):
    cfg, cell, rep = args
    return run_replicate(cfg, cell, rep)


@dataclass
class ExperimentOutcome:
    records: list[R2Record]
    errors: list[tuple[str, str]]
    out_dir: Path

    @property
    def exit_code(self) -> int:
        return 2 if self.errors else 0


def run_experiment(cfg: ExperimentConfig, out_dir, workers: int | None = None,
                   only_cell: int | None = None) -> ExperimentOutcome:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = cfg.cells()
    if only_cell is not None:
        if not 0 <= only_cell < len(cells):
            raise ConfigError("--only-cell", f"cell index must be in [0, {len(cells)})")
        cells = [cells[only_cell]]
    tasks = [(cfg, cell, rep) for cell in cells for rep in range(cfg.M_experiments)]
    workers = workers or os.cpu_count() or 1
    if workers <= 1 or len(tasks) <= 1:
        outputs = [_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_task, tasks, chunksize=1))

    records, errors = [], []
    for o in outputs:
        records.extend(o.records)
        if o.error is not None:
            errors.append((o.run_id, o.error))
        elif o.artifact is not None:
            rdir = out / "runs" / o.run_id
            rdir.mkdir(parents=True, exist_ok=True)
            (rdir / "run.json").write_text(json.dumps(o.artifact))

    write_records(records, out / "records.csv")
    with open(out / "errors.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "error"])
        writer.writerows(errors)
    write_outputs(records, cfg, out)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "cells": [dict(zip(("dgp", "gamma", "d", "function"), c)) for c in cells],
        "replicates": cfg.M_experiments,
        "estimators": cfg.estimators,
        "n_records": len(records),
        "n_errors": len(errors),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return ExperimentOutcome(records, errors, out)


def write_outputs(records, cfg: ExperimentConfig, out: Path) -> None:
    rows = percentile_summary(records)
    write_summary(rows, out / "summary.csv")
    pooled = [r for r in records if r.function != "rand_pw"]
    merged = percentile_summary(pooled, keys=("estimator", "dgp", "gamma", "d", "scheme"))
    write_summary(merged, out / "summary_pooled.csv")
    tables = out / "tables"
    tables.mkdir(exist_ok=True)
    by_block = {}
    for r in rows:
        by_block.setdefault((r["dgp"], r["gamma"], r["d"], r["scheme"]), []).append(r)
    for (dgp, gamma, d, scheme), block in sorted(by_block.items()):
        fns = [f for f in cfg.functions if any(r["function"] == f for r in block)]
        std = [f for f in fns if f != "rand_pw"]
        text = f"DGP {dgp}, gamma={gamma:g}, d={d}, {scheme} test points: median R^2 (p5, p95)\n\n"
        if std:
            text += format_table(block, cfg.estimators, std) + "\n"
        if "rand_pw" in fns:
            text += "\nrand_pw: median R^2 (p10, p90)\n" + format_table(block, cfg.estimators, ["rand_pw"], "p10", "p90") + "\n"
        name = f"dgp{dgp}_g{gamma:g}_d{d}_{scheme}.txt"
        (tables / name).write_text(text)


def _run_file(out_dir, rid: str) -> Path:
    path = Path(out_dir) / "runs" / rid / "run.json"
    if not path.exists():
        raise KeyError(f"unknown run id {rid!r} (no {path})")
    return path


def export_traces(out_dir, rid: str, dest=None) -> Path:
    art = json.loads(_run_file(out_dir, rid).read_text())
    dest = Path(dest) if dest else Path(out_dir) / "runs" / rid / "traces.csv"
    write_traces_csv({k: np.asarray(v) for k, v in art["traces"].items()}, dest)
    return dest


def export_kernels(out_dir, rid: str, dest=None) -> Path:
    art = json.loads(_run_file(out_dir, rid).read_text())
    dest = Path(dest) if dest else Path(out_dir) / "runs" / rid / "kernels.json"
    kernels = art["kernels"]
    # round-trip through CriticSet to validate the payload
    payload = {k: CriticSet.from_json(v).to_json() for k, v in kernels.items()}
    dest.write_text(json.dumps(payload, indent=1))
    return dest
