"""Pipeline orchestration: generate -> simulate -> sample -> train -> evaluate -> report.

A single JSON config drives every stage. Stage outputs are stamped with a
content hash of everything they depend on, so re-running a finished or
interrupted pipeline skips completed work. Output paths and worker counts
can be overridden by flags or the DYNID_OUT / DYNID_WORKERS environment
variables.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import control, dataset as ds_mod, estimator, model_gen
from .control import PidGains, Status
from .dataset import DatasetConfig
from .errors import ConfigError, DynidError
from .estimator import EncoderConfig, TrainConfig

#: Desk-scale preset: completes in minutes on a laptop.
DESK_PRESET = {
    "robots": 64,
    "seed": 0,
    "waypoints_per_robot": 4,
    "ranges": {},
    "gains": {},
    "waypoint": {},
    "dataset_grid": [{"seq_len": 16, "stride": 16, "ssr": 16}],
    "encoder_grid": [{"d_model": 32, "n_layers": 2, "n_heads": 4, "d_ff": 64}],
    "train": {"learning_rate": 1e-3, "batch_size": 64, "epochs": 150, "seed": 0},
    "split_ratio": 0.9,
    "split_seed": 0,
    "out": "runs/desk",
    "workers": 0,
}

STAGES = ("generate", "simulate", "sample", "train", "evaluate", "report")


def _require(mapping: dict, field: str, types, where: str):
    if field not in mapping:
        raise ConfigError(f"{where}: missing field {field!r}")
    value = mapping[field]
    if not isinstance(value, types):
        raise ConfigError(f"{where}: field {field!r} has type {type(value).__name__}")
    return value


def load_config(path=None, overrides=None) -> dict:
    """Read, default-fill, and validate a pipeline config."""
    cfg = copy.deepcopy(DESK_PRESET)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(user) - set(DESK_PRESET) - {"stages"}
        if unknown:
            raise ConfigError(f"unknown config field {sorted(unknown)[0]!r}")
        cfg.update(user)
    if overrides:
        cfg.update({k: v for k, v in overrides.items() if v is not None})
    if os.environ.get("DYNID_OUT"):
        cfg["out"] = os.environ["DYNID_OUT"]
    if os.environ.get("DYNID_WORKERS"):
        cfg["workers"] = int(os.environ["DYNID_WORKERS"])

    if _require(cfg, "robots", int, "config") < 2:
        raise ConfigError("config: robots must be >= 2")
    _require(cfg, "seed", int, "config")
    if _require(cfg, "waypoints_per_robot", int, "config") < 1:
        raise ConfigError("config: waypoints_per_robot must be >= 1")
    grid = _require(cfg, "dataset_grid", list, "config")
    if not grid:
        raise ConfigError("config: dataset_grid must not be empty")
    if not _require(cfg, "encoder_grid", list, "config"):
        raise ConfigError("config: encoder_grid must not be empty")
    ratio = _require(cfg, "split_ratio", (int, float), "config")
    if not 0 < ratio < 1:
        raise ConfigError("config: split_ratio must lie strictly between 0 and 1")
    # construct nested configs now so field errors surface before any work
    parse_ranges(cfg)
    parse_gains(cfg)
    for cell in grid:
        dataset_config(cell)
    cfg["train"] = {**DESK_PRESET["train"], **cfg.get("train", {})}
    train_config(cfg).validate()
    return cfg


def parse_ranges(cfg: dict) -> model_gen.VariationRanges:
    r = cfg.get("ranges") or {}
    allowed = {"diameter", "com_offset_frac", "mu_c", "mu_v", "density", "shapes"}
    unknown = set(r) - allowed
    if unknown:
        raise ConfigError(f"ranges: unknown field {sorted(unknown)[0]!r}")
    kwargs = {k: tuple(v) for k, v in r.items()}
    ranges = model_gen.VariationRanges(**kwargs)
    ranges.validate()
    return ranges


def parse_gains(cfg: dict) -> PidGains:
    g = cfg.get("gains") or {}
    allowed = {"kp", "ki", "kd", "kg", "integral_limit", "torque_limit", "signed_jz"}
    unknown = set(g) - allowed
    if unknown:
        raise ConfigError(f"gains: unknown field {sorted(unknown)[0]!r}")
    gains = PidGains(**g)
    gains.validate()
    return gains


def dataset_config(cell: dict) -> DatasetConfig:
    allowed = {"seq_len", "stride", "ssr", "include_jacobian", "include_torques"}
    unknown = set(cell) - allowed
    if unknown:
        raise ConfigError(f"dataset_grid: unknown field {sorted(unknown)[0]!r}")
    cfg = DatasetConfig(**cell)
    cfg.validate()
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    allowed = {"learning_rate", "batch_size", "epochs", "seed", "beta1", "beta2",
               "adam_eps", "clip_norm", "patience"}
    t = cfg.get("train") or {}
    unknown = set(t) - allowed
    if unknown:
        raise ConfigError(f"train: unknown field {sorted(unknown)[0]!r}")
    return TrainConfig(**t)


def _hash(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


class Pipeline:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = cfg["out"]
        self.ranges = parse_ranges(cfg)
        self.gains = parse_gains(cfg)
        self.template = model_gen.DEFAULT_TEMPLATE
        self.stage_seconds: dict[str, float] = {}
        for sub in ("models", "logs", "datasets", "trained", "tables", "stamps"):
            os.makedirs(os.path.join(self.out, sub), exist_ok=True)

    # -- stamps -----------------------------------------------------------

    def _stamp_path(self, stage: str) -> str:
        return os.path.join(self.out, "stamps", f"{stage}.json")

    def _is_done(self, stage: str, content_hash: str) -> bool:
        path = self._stamp_path(stage)
        if not os.path.exists(path):
            return False
        with open(path) as fh:
            stamp = json.load(fh)
        return stamp.get("hash") == content_hash and all(os.path.exists(p) for p in stamp.get("outputs", []))

    def _mark_done(self, stage: str, content_hash: str, outputs: list[str]) -> None:
        with open(self._stamp_path(stage), "w") as fh:
            json.dump({"hash": content_hash, "outputs": outputs, "time": time.time()}, fh)

    def _timed(self, stage, fn):
        start = time.time()
        result = fn()
        self.stage_seconds[stage] = round(time.time() - start, 3)
        return result

    # -- stage hashes -----------------------------------------------------

    def generate_hash(self) -> str:
        return _hash({"robots": self.cfg["robots"], "seed": self.cfg["seed"],
                      "ranges": asdict(self.ranges),
                      "template": model_gen.template_to_dict(self.template)})

    def simulate_hash(self) -> str:
        return _hash({"generate": self.generate_hash(), "gains": asdict(self.gains),
                      "waypoints_per_robot": self.cfg["waypoints_per_robot"],
                      "waypoint": self.cfg.get("waypoint") or {}})

    def train_hash(self) -> str:
        return _hash({"simulate": self.simulate_hash(),
                      "dataset_grid": self.cfg["dataset_grid"],
                      "encoder_grid": self.cfg["encoder_grid"],
                      "train": self.cfg["train"],
                      "split": [self.cfg["split_ratio"], self.cfg["split_seed"]]})

    # -- stages -----------------------------------------------------------

    def generate(self) -> None:
        content = self.generate_hash()
        manifest = os.path.join(self.out, "models", "manifest.jsonl")
        if self._is_done("generate", content):
            return
        def run():
            models = []
            base = self.cfg["seed"]
            for i in range(self.cfg["robots"]):
                model = model_gen.generate_robot(seed=base + i, template=self.template,
                                                 ranges=self.ranges, robot_id=i)
                with open(os.path.join(self.out, "models", f"robot_{i}.urdf"), "w") as fh:
                    fh.write(model_gen.serialize_urdf(model))
                models.append(model)
            model_gen.write_manifest(manifest, models, self.ranges, self.template)
        self._timed("generate", run)
        self._mark_done("generate", content, [manifest])

    def _load_models(self) -> list[model_gen.RobotModel]:
        models = []
        for i in range(self.cfg["robots"]):
            path = os.path.join(self.out, "models", f"robot_{i}.urdf")
            with open(path) as fh:
                models.append(model_gen.parse_urdf(fh.read()))
        return models

    def simulate(self) -> None:
        content = self.simulate_hash()
        if self._is_done("simulate", content):
            return
        summary_path = os.path.join(self.out, "logs", "summaries.txt")
        wp_opts = self.cfg.get("waypoint") or {}

        def run():
            models = self._load_models()
            jobs = [(model, self.cfg["seed"] + 104729 + model.id) for model in models]
            workers = int(self.cfg.get("workers") or 0)
            if workers > 1:
                from concurrent.futures import ProcessPoolExecutor
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    logs = list(pool.map(_simulate_one, [
                        (model, seed, self.cfg["waypoints_per_robot"], wp_opts, self.gains)
                        for model, seed in jobs]))
            else:
                logs = [_simulate_one((model, seed, self.cfg["waypoints_per_robot"],
                                       wp_opts, self.gains)) for model, seed in jobs]
            with open(summary_path, "w") as fh:
                for log in logs:
                    control.save_log(os.path.join(self.out, "logs", f"robot_{log.robot_id}.trj"), log)
                    fh.write(log.summary_line() + "\n")
        self._timed("simulate", run)
        self._mark_done("simulate", content, [summary_path])

    def _load_logs(self) -> list[control.TrajectoryLog]:
        logs = []
        for i in range(self.cfg["robots"]):
            path = os.path.join(self.out, "logs", f"robot_{i}.trj")
            if os.path.exists(path):
                logs.append(control.load_log(path))
        return logs

    def sample(self) -> list[ds_mod.Dataset]:
        manifest = os.path.join(self.out, "models", "manifest.jsonl")
        header, records = model_gen.read_manifest(manifest)
        logs = [log for log in self._load_logs() if log.status is Status.OK]
        datasets = []
        def run():
            for cell in self.cfg["dataset_grid"]:
                cfg = dataset_config(cell)
                datasets.append(ds_mod.build_dataset(
                    logs, header, records, cfg,
                    split_ratio=self.cfg["split_ratio"], split_seed=self.cfg["split_seed"],
                    cache_dir=os.path.join(self.out, "datasets")))
        self._timed("sample", run)
        return datasets

    def train(self) -> dict:
        content = self.train_hash()
        report_path = os.path.join(self.out, "report.json")
        if self._is_done("train", content):
            with open(report_path) as fh:
                return json.load(fh)
        datasets = self.sample()
        t_cfg = train_config(self.cfg)
        cells = []

        def run():
            for dset in datasets:
                for enc_cell in self.cfg["encoder_grid"]:
                    enc = EncoderConfig(**{**enc_cell,
                                           "seq_len": dset.config.seq_len,
                                           "n_features": dset.train_X.shape[-1],
                                           "n_outputs": dset.train_y.shape[-1]})
                    cell_hash = _hash({"dataset": dset.content_hash, "encoder": asdict(enc),
                                       "train": asdict(t_cfg)})
                    ckpt = os.path.join(self.out, "trained", f"model_{cell_hash[:16]}.npz")
                    start = time.time()
                    if os.path.exists(ckpt):
                        model = estimator.load_model(ckpt)
                        history = []
                    else:
                        model, history = estimator.train(dset, enc, t_cfg)
                        estimator.save_model(ckpt, model)
                    val = estimator.evaluate(model, dset.val_X, dset.val_y, dset.target_names)
                    train_m = estimator.evaluate(model, dset.train_X, dset.train_y, dset.target_names)
                    cells.append({
                        "dataset": asdict(dset.config),
                        "encoder": {k: v for k, v in asdict(enc).items() if k != "feature_groups"},
                        "dataset_hash": dset.content_hash,
                        "cell_hash": cell_hash,
                        "checkpoint": ckpt,
                        "effective_time": ds_mod.effective_time(dset.config.seq_len, dset.config.stride),
                        "utilization": ds_mod.utilization(dset.config),
                        "sequences": {"train": int(dset.train_X.shape[0]), "val": int(dset.val_X.shape[0])},
                        "epochs_run": len(history),
                        "val": val.to_dict(),
                        "train_split": {"r2_mean": train_m.r2_mean, "rmse_mean": train_m.rmse_mean},
                        "wall_clock_s": round(time.time() - start, 3),
                    })
        self._timed("train", run)
        report = {"config_hash": content, "cells": cells, "stage_seconds": self.stage_seconds}
        with open(report_path, "w") as fh:
            json.dump(report, fh, indent=2)
        self._mark_done("train", content, [report_path])
        return report

    def evaluate(self) -> dict:
        report = self.train()
        return report

    def report(self) -> dict:
        report = self.evaluate()
        emit_tables(report, os.path.join(self.out, "tables"))
        return report


def _simulate_one(job):
    model, seed, n_waypoints, wp_opts, gains = job
    waypoints = control.sample_waypoints(model, n_waypoints, seed, **wp_opts)
    return control.simulate_trajectory(model, waypoints, gains)


_ORDER = {name: idx for idx, name in enumerate(STAGES)}


def run_pipeline(config_path=None, overrides=None, upto: str = "report") -> dict:
    """Run every enabled stage up to and including ``upto``.

    Completed stages are skipped via their content-hash stamps, so an
    interrupted pipeline resumes where it stopped and an unchanged rerun
    performs no recomputation.
    """
    cfg = load_config(config_path, overrides)
    pipe = Pipeline(cfg)
    if upto not in _ORDER:
        raise ConfigError(f"unknown stage {upto!r}")
    level = _ORDER[upto]
    enabled = {s: True for s in STAGES}
    enabled.update(cfg.get("stages") or {})
    report: dict = {}
    try:
        if level >= 0 and enabled["generate"]:
            pipe.generate()
        if level >= 1 and enabled["simulate"]:
            pipe.simulate()
        if level == 2 and enabled["sample"]:
            pipe.sample()
        if level >= 3 and enabled["train"]:
            report = pipe.train()
        if level >= 5 and enabled["report"]:
            report = pipe.report()
    except DynidError as exc:
        failure = {"stage_seconds": pipe.stage_seconds,
                   "failure": {"error": type(exc).__name__, "message": str(exc)}}
        with open(os.path.join(pipe.out, "report_partial.json"), "w") as fh:
            json.dump(failure, fh, indent=2)
        raise
    return report


# --------------------------------------------------------------------------
# Report tables

def _fmt_cell(value, width=10, decimals=4) -> str:
    if value is None or (isinstance(value, float) and not np.isfinite(value)):
        return "n/a".rjust(width)
    return f"{value:.{decimals}f}".rjust(width)


def _table(title: str, headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = [title, ""]
    lines.append(" | ".join(h.rjust(w) for h, w in zip(headers, widths)))
    lines.append("-+-".join("-" * w for w in widths))
    for row in rows:
        lines.append(" | ".join(c.rjust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def _metric(metrics: estimator.Metrics | None, name: str) -> tuple[float | None, float | None]:
    if metrics is None or name not in metrics.target_names:
        return None, None
    r2, rmse = metrics.by_name(name)
    return (None if np.isnan(r2) else r2), rmse


def best_cell(report: dict) -> dict | None:
    cells = report.get("cells") or []
    scored = [(c["val"].get("r2_mean"), c) for c in cells]
    scored = [(s if s is not None and np.isfinite(s) else -np.inf, c) for s, c in scored]
    return max(scored, key=lambda sc: sc[0])[1] if scored else None


def emit_tables(report: dict, out_dir) -> list[str]:
    """Write the five report tables; returns the file paths."""
    os.makedirs(out_dir, exist_ok=True)
    cells = report.get("cells") or []
    paths = []

    first_encoder = cells[0]["encoder"] if cells else None
    rows = []
    for c in cells:
        if first_encoder is not None and c["encoder"] != first_encoder:
            continue
        d = c["dataset"]
        rows.append([str(d["seq_len"]), str(d["stride"]), str(d["ssr"]),
                     f"{c['effective_time']:.3f}", f"{100 * c['utilization']:.2f}%",
                     _fmt_cell(c["val"].get("r2_mean")).strip()])
    path = os.path.join(out_dir, "table_dataset_grid.txt")
    with open(path, "w") as fh:
        fh.write(_table("Dataset configuration grid (fixed architecture)",
                        ["Seq Len", "Stride", "SSR", "Effective Time (s)", "Utilization", "Val R2"], rows))
    paths.append(path)

    first_dataset = cells[0]["dataset"] if cells else None
    rows = []
    for c in cells:
        if first_dataset is not None and c["dataset"] != first_dataset:
            continue
        e = c["encoder"]
        rows.append([str(e["n_layers"]), str(e["n_heads"]), str(e["d_model"]),
                     _fmt_cell(c["val"].get("r2_mean")).strip(),
                     _fmt_cell(c["val"].get("rmse_mean")).strip()])
    path = os.path.join(out_dir, "table_architecture_grid.txt")
    with open(path, "w") as fh:
        fh.write(_table("Architecture grid (fixed dataset configuration)",
                        ["Layers", "Heads", "Embedding Dim", "Val R2", "Val RMSE"], rows))
    paths.append(path)

    best = best_cell(report)
    metrics = estimator.Metrics.from_dict(best["val"]) if best else None

    rows = []
    for j in range(6):
        cr2, crmse = _metric(metrics, f"mu_c[J{j}]")
        vr2, vrmse = _metric(metrics, f"mu_v[J{j}]")
        rows.append([f"J{j}", _fmt_cell(cr2).strip(), _fmt_cell(crmse).strip(),
                     _fmt_cell(vr2).strip(), _fmt_cell(vrmse).strip()])
    path = os.path.join(out_dir, "table_friction.txt")
    with open(path, "w") as fh:
        fh.write(_table("Friction parameter estimation (best cell)",
                        ["Joint", "Coulomb R2", "Coulomb RMSE", "Viscous R2", "Viscous RMSE"], rows))
    paths.append(path)

    rows = []
    for l in range(2, 7):
        mr2, mrmse = _metric(metrics, f"mass[L{l}]")
        cr2, crmse = _metric(metrics, f"com[L{l}]")
        rows.append([f"L{l}", _fmt_cell(mr2).strip(), _fmt_cell(mrmse).strip(),
                     _fmt_cell(cr2).strip(), _fmt_cell(crmse).strip()])
    path = os.path.join(out_dir, "table_mass_com.txt")
    with open(path, "w") as fh:
        fh.write(_table("Mass and center-of-mass estimation (best cell)",
                        ["Link", "Mass R2", "Mass RMSE", "COM R2", "COM RMSE"], rows))
    paths.append(path)

    rows = []
    for l in range(1, 7):
        row = [f"L{l}"]
        for comp in ("Ixx", "Iyy", "Izz"):
            name = f"{comp}[L{l}]"
            if l == 1 and comp in ("Ixx", "Iyy"):
                row += ["-", "-"]
                continue
            r2, rmse = _metric(metrics, name)
            row += [_fmt_cell(r2).strip(), _fmt_cell(rmse).strip()]
        rows.append(row)
    path = os.path.join(out_dir, "table_inertia.txt")
    with open(path, "w") as fh:
        fh.write(_table("Inertia tensor estimation (best cell)",
                        ["Link", "Ixx R2", "Ixx RMSE", "Iyy R2", "Iyy RMSE", "Izz R2", "Izz RMSE"], rows))
    paths.append(path)
    return paths


# --------------------------------------------------------------------------
# Entry point

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dynid",
                                     description="Manipulator generation, simulation, and "
                                                 "dynamic-parameter regression pipeline.")
    parser.add_argument("verb", choices=[*STAGES, "all"], help="pipeline stage to run")
    parser.add_argument("--config", help="path to a JSON pipeline config (default: desk preset)")
    parser.add_argument("--out", help="output directory override")
    parser.add_argument("--seed", type=int, help="generation seed override")
    parser.add_argument("--workers", type=int, help="parallel workers for simulation")
    parser.add_argument("--resume", action="store_true",
                        help="reuse completed stage outputs (default behavior; kept for clarity)")
    args = parser.parse_args(argv)

    overrides = {"out": args.out, "seed": args.seed, "workers": args.workers}
    upto = "report" if args.verb == "all" else args.verb
    try:
        report = run_pipeline(args.config, overrides, upto)
    except DynidError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    if report:
        best = best_cell(report)
        if best is not None:
            print(f"best cell: val R2 {best['val'].get('r2_mean'):.4f} "
                  f"(seq_len={best['dataset']['seq_len']}, stride={best['dataset']['stride']}, "
                  f"ssr={best['dataset']['ssr']})")
    print("done")
    return 0


if __name__ == "__main__":
    sys.exit(main())
