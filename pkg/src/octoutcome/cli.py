"""Command-line experiment runner.

Every command reads an optional JSON config (``--config``) whose values are
overridden by flags, writes ``resolved_config.json`` next to its outputs and
only ever writes below ``--out``. Failures exit nonzero with a single JSON
line on stderr, e.g. ``{"error": "FileNotFoundError", "message": "..."}``.

    python -m octoutcome synth-gen --seed 0 --out data
    python -m octoutcome train-vision --config exp.json --preset cbr-tiny --runs 10 --jobs 2 --out runs/tiny
    python -m octoutcome evaluate runs/tiny --out eval/tiny
    python -m octoutcome report eval/tiny/results.json --out report
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from typing import Dict, List, Optional, Sequence

import numpy as np

from .byol import BYOLConfig, pretrain
from .dataset import DatasetManifest, labels, read_manifest
from .metrics import MetricSet, SingleClassError, evaluate_scores
from .pipeline import cnn_probabilities, fuse, train_regression
from .report import (ResultRow, emit_csv, emit_figure, emit_importance_figure, emit_markdown, load_rows,
                     rows_from_runs, save_rows)
from .synthetic import SyntheticConfig, generate_synthetic
from .tabular import CVConfig
from .training import PRESETS, TrainConfig, get_preset, resolve_init, save_run, train_run
from .weights import atomic_write_bytes, load_weights, save_weights

TABULAR_PRESETS = ("regression", "fusion")
CONFIG_KEYS = {"data", "preset", "runs", "seed", "jobs", "out", "train", "cv", "byol", "synthetic",
               "weights", "architecture", "cnn_runs"}


class CLIError(Exception):
    """A user-facing failure: bad config, missing input, empty results."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, 2)


def _fail(kind: str, message: str, code: int = 1):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    sys.exit(code)


def _dump(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _write_json(path: str, obj) -> None:
    atomic_write_bytes(path, _dump(obj))


# ------------------------------------------------------------------ config

def load_config(args) -> dict:
    cfg: dict = {}
    if args.config:
        if not os.path.isfile(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        with open(args.config, encoding="utf-8") as fh:
            try:
                cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise CLIError(f"malformed config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise CLIError("config must be a JSON object")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise CLIError(f"unknown config keys: {sorted(unknown)}")
    for key in ("data", "preset", "runs", "seed", "jobs", "out", "architecture", "cnn_runs"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    cfg.setdefault("seed", 0)
    cfg.setdefault("runs", 10)
    cfg.setdefault("jobs", 1)
    if not cfg.get("out"):
        raise CLIError("an output directory is required (--out or config 'out')")
    if int(cfg["runs"]) < 1 or int(cfg["jobs"]) < 1:
        raise CLIError("runs and jobs must be positive")
    if "preset" in cfg and cfg["preset"] not in TABULAR_PRESETS:
        try:
            cfg["preset"] = get_preset(cfg["preset"]).name
        except KeyError as exc:
            raise CLIError(exc.args[0]) from exc
    return cfg


def _section(cfg: dict, name: str, cls):
    values = cfg.get(name) or {}
    allowed = {f.name for f in fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise CLIError(f"unknown {name} config keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid {name} config: {exc}") from exc


def _manifest(cfg: dict) -> DatasetManifest:
    data = cfg.get("data")
    if not data:
        raise CLIError("a dataset is required (--data or config 'data')")
    path = os.path.join(data, "manifest.csv") if os.path.isdir(data) else data
    if not os.path.isfile(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    return read_manifest(path)


def _prepare_out(cfg: dict) -> str:
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "resolved_config.json"), cfg)
    return out


def _input_size(cfg: dict) -> int:
    return int((cfg.get("train") or {}).get("input_size", 224))


# ---------------------------------------------------------------- commands

def cmd_synth_gen(cfg: dict) -> None:
    synth = dict(cfg.get("synthetic") or {})
    separable = bool(synth.pop("separable", False))
    try:
        config = SyntheticConfig.separable(**synth) if separable else SyntheticConfig(**synth)
    except TypeError as exc:
        raise CLIError(f"invalid synthetic config: {exc}") from exc
    out = _prepare_out(cfg)
    ds = generate_synthetic(config, int(cfg["seed"]), out)
    print(f"wrote {len(ds.manifest.records)} patients to {out}")


def cmd_pretrain_byol(cfg: dict) -> None:
    config = _section(cfg, "byol", BYOLConfig)
    arch = cfg.get("architecture", "ResNet-50")
    data = cfg.get("data")
    if not data or not os.path.isdir(data):
        raise FileNotFoundError(f"image corpus directory not found: {data}")
    out = _prepare_out(cfg)
    result = pretrain(arch, data, config, int(cfg["seed"]), log=print)
    save_weights(result.weights, os.path.join(out, "encoder.weights"))
    _write_json(os.path.join(out, "byol.json"), {"architecture": arch, "epoch_losses": result.epoch_losses,
                                                 "steps": result.steps, "config": config.to_dict()})


def _vision_job(job: dict) -> str:
    manifest = read_manifest(job["manifest"])
    config = TrainConfig(**job["train"])
    result = train_run(job["architecture"], manifest, config)
    result.config = dict(job["sidecar"], train=config.to_dict(), seed=config.seed)
    save_run(result, job["out"], job["name"])
    return job["name"]


def cmd_train_vision(cfg: dict) -> None:
    if cfg.get("preset") in (None, *TABULAR_PRESETS):
        raise CLIError(f"train-vision needs a vision preset: {', '.join(PRESETS)}")
    preset = get_preset(cfg["preset"])
    manifest = _manifest(cfg)
    init = resolve_init(preset, cfg.get("weights"))
    base = _section(cfg, "train", TrainConfig).to_dict()
    out = _prepare_out(cfg)
    manifest_path = os.path.join(manifest.root, "manifest.csv")
    sidecar = {"preset": preset.name, "model": preset.label, "data": cfg["data"]}
    jobs = []
    for i in range(int(cfg["runs"])):
        train = dict(base, seed=int(cfg["seed"]) + i, init=init, freeze=preset.freeze)
        jobs.append({"manifest": manifest_path, "train": train, "architecture": preset.architecture,
                     "out": out, "name": f"run_{i}", "sidecar": sidecar})
    if int(cfg["jobs"]) > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=int(cfg["jobs"])) as pool:
            for name in pool.map(_vision_job, jobs):
                print(f"finished {name}")
    else:
        for job in jobs:
            print(f"finished {_vision_job(job)}")


def _tabular_runs(cfg: dict, outcome_for_run) -> None:
    out = _prepare_out(cfg)
    for i in range(int(cfg["runs"])):
        outcome, extra = outcome_for_run(i)
        doc = dict(outcome.sidecar(), **extra, seed=int(cfg["seed"]) + i)
        _write_json(os.path.join(out, f"run_{i}.json"), doc)
        outcome.model.save(os.path.join(out, f"run_{i}.model.json"))
        print(f"finished run_{i}")


def cmd_train_regression(cfg: dict) -> None:
    manifest = _manifest(cfg)
    cv = _section(cfg, "cv", CVConfig)
    sidecar = {"preset": "regression", "model": "Regression", "data": cfg["data"]}
    # every repetition uses the same CV seed, so the fitted model is identical across runs
    _tabular_runs(cfg, lambda i: (train_regression(manifest, cv), sidecar))


def cmd_fuse(cfg: dict) -> None:
    manifest = _manifest(cfg)
    cv = _section(cfg, "cv", CVConfig)
    cnn_dir = cfg.get("cnn_runs")
    names = _run_names(cnn_dir, "weights") if cnn_dir else []
    if not names:
        raise CLIError(f"no CNN runs (run_*.weights) found in {cnn_dir!r}")
    cfg["runs"] = len(names)
    size = _input_size(cfg)

    def one(i: int):
        with open(os.path.join(cnn_dir, f"{names[i]}.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        input_size = int(((meta.get("config") or {}).get("train") or {}).get("input_size", size))
        weights = load_weights(os.path.join(cnn_dir, f"{names[i]}.weights"))
        probs = cnn_probabilities(weights, manifest, input_size)
        return fuse(manifest, probs, cv), {"preset": "fusion", "model": "Regression + CNN",
                                           "data": cfg["data"], "cnn_run": names[i]}

    _tabular_runs(cfg, one)


def _run_names(directory: str, ext: str) -> List[str]:
    if not directory or not os.path.isdir(directory):
        raise FileNotFoundError(f"results directory not found: {directory}")
    found = []
    for p in glob.glob(os.path.join(directory, f"run_*.{ext}")):
        m = re.fullmatch(r"run_(\d+)", os.path.basename(p)[: -len(ext) - 1])
        if m:
            found.append((int(m.group(1)), f"run_{m.group(1)}"))
    return [name for _, name in sorted(found)]


def _run_metrics(doc: dict, manifest_cache: Dict[str, DatasetManifest]) -> Optional[MetricSet]:
    """Recompute test metrics from stored probabilities and the dataset's labels."""
    probs = doc.get("test_probabilities") or {}
    data = (doc.get("config") or {}).get("data") or doc.get("data")
    if probs and data:
        if data not in manifest_cache:
            manifest_cache[data] = _manifest({"data": data})
        by_id = {r.patient_id: r for r in manifest_cache[data].records}
        ids = sorted(probs)
        y = labels([by_id[i] for i in ids])
        try:
            return evaluate_scores([probs[i] for i in ids], y)
        except SingleClassError:
            return None
    tm = doc.get("test_metrics")
    return MetricSet(**tm) if tm else None


def cmd_evaluate(cfg: dict, results: Sequence[str]) -> None:
    if not results:
        raise CLIError("evaluate needs at least one results directory")
    rows, per_dir, importance = [], {}, {}
    cache: Dict[str, DatasetManifest] = {}
    # everything is computed before anything is written, so failures leave no partial output
    for directory in results:
        names = _run_names(directory, "json")
        if not names:
            raise CLIError(f"no run results (run_*.json) in {directory}")
        docs = []
        for name in names:
            with open(os.path.join(directory, f"{name}.json"), encoding="utf-8") as fh:
                docs.append(json.load(fh))
        metrics = [_run_metrics(d, cache) for d in docs]
        valid = [m for m in metrics if m is not None]
        if len(valid) < 2:
            raise CLIError(f"{directory}: need at least 2 runs with two-class test metrics, got {len(valid)}")
        meta = dict(docs[0].get("config") or {}, **{k: docs[0][k] for k in ("model", "preset") if k in docs[0]})
        model = meta.get("model", os.path.basename(os.path.normpath(directory)))
        rows.append(rows_from_runs(model, meta.get("preset", ""), valid))
        per_dir[directory] = {name: (m.as_dict() if m else None) for name, m in zip(names, metrics)}
        imps = [d["importance"] for d in docs if d.get("importance")]
        if imps:
            importance[model] = {k: float(np.mean([imp[k] for imp in imps])) for k in imps[0]}
    out = _prepare_out(cfg)
    atomic_write_bytes(os.path.join(out, "results.json"), save_rows(rows).encode())
    _write_json(os.path.join(out, "per_run_metrics.json"), per_dir)
    if importance:
        _write_json(os.path.join(out, "importance.json"), importance)
    print(emit_markdown(rows, show_max=True, config_header="Config"), end="")


def cmd_report(cfg: dict, inputs: Sequence[str], show_max: bool, importance: Optional[str],
               config_header: str) -> None:
    if not inputs:
        raise CLIError("report needs at least one results.json")
    rows: List[ResultRow] = []
    for path in inputs:
        if not os.path.isfile(path):
            raise FileNotFoundError(f"results file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            rows += load_rows(fh.read())
    if not rows:
        raise CLIError("no result rows to report")
    markdown = emit_markdown(rows, show_max=show_max, config_header=config_header)
    csv = emit_csv(rows)
    svg = emit_figure(rows)
    imp_svg = None
    if importance:
        with open(importance, encoding="utf-8") as fh:
            imp_svg = emit_importance_figure(json.load(fh))
    out = _prepare_out(cfg)
    atomic_write_bytes(os.path.join(out, "report.md"), markdown.encode())
    atomic_write_bytes(os.path.join(out, "report.csv"), csv.encode())
    atomic_write_bytes(os.path.join(out, "results.svg"), svg.encode())
    if imp_svg:
        atomic_write_bytes(os.path.join(out, "importance.svg"), imp_svg.encode())
    print(markdown, end="")


def cmd_gradcheck(cfg: dict) -> None:
    from .gradcheck import verification_suite

    results = verification_suite(int(cfg["seed"]))
    doc = {name: {"max_rel_error": float(r.max_rel_error), "compared": r.n_compared,
                  "excluded": r.n_excluded, "passed": r.passed()} for name, r in results.items()}
    out = _prepare_out(cfg)
    _write_json(os.path.join(out, "gradcheck.json"), doc)
    for name, d in doc.items():
        print(f"{'PASS' if d['passed'] else 'FAIL'} {name}: max rel err {d['max_rel_error']:.2e} "
              f"over {d['compared']} coordinates")
    failed = [n for n, d in doc.items() if not d["passed"]]
    if failed:
        raise CLIError(f"gradient check failed for {failed}")


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="octoutcome", description="OCT outcome-prediction experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True):
        p.add_argument("--config", help="JSON config document; flags override its values")
        p.add_argument("--seed", type=int, help="base seed (run i uses seed + i)")
        p.add_argument("--out", help="output directory")
        if data:
            p.add_argument("--data", help="dataset directory (with manifest.csv) or manifest path")
        return p

    common(sub.add_parser("synth-gen", help="generate a synthetic dataset"), data=False)
    p = common(sub.add_parser("pretrain-byol", help="BYOL-pretrain an encoder on a PNG corpus"))
    p.add_argument("--architecture", help="backbone architecture (default ResNet-50)")
    for name, text in (("train-vision", "train replicate vision models"),
                       ("train-regression", "fit the clinical-only regression"),
                       ("fuse", "fit regressions on clinical data plus CNN predictions")):
        p = common(sub.add_parser(name, help=text))
        p.add_argument("--preset", help="model preset: " + ", ".join(list(PRESETS) + list(TABULAR_PRESETS)))
        p.add_argument("--runs", type=int, help="number of replicate runs (default 10)")
        p.add_argument("--jobs", type=int, help="parallel worker processes (default 1)")
        if name == "fuse":
            p.add_argument("--cnn-runs", dest="cnn_runs", help="directory of trained CNN runs")
    p = common(sub.add_parser("evaluate", help="compute metrics over run directories"), data=False)
    p.add_argument("results", nargs="*", help="run directories, one table row each")
    p = common(sub.add_parser("report", help="emit markdown/CSV tables and SVG figures"), data=False)
    p.add_argument("inputs", nargs="*", help="results.json files written by evaluate")
    p.add_argument("--max", action="store_true", help="show the best single run in parentheses")
    p.add_argument("--importance", help="importance.json to plot as a feature-importance chart")
    p.add_argument("--config-header", default="Config", help="heading of the second table column")
    common(sub.add_parser("gradcheck", help="run the gradient verification suite"), data=False)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        cmd = args.command
        if cmd == "synth-gen":
            cmd_synth_gen(cfg)
        elif cmd == "pretrain-byol":
            cmd_pretrain_byol(cfg)
        elif cmd == "train-vision":
            cmd_train_vision(cfg)
        elif cmd == "train-regression":
            cmd_train_regression(cfg)
        elif cmd == "fuse":
            cmd_fuse(cfg)
        elif cmd == "evaluate":
            cmd_evaluate(cfg, args.results)
        elif cmd == "report":
            cmd_report(cfg, args.inputs, args.max, args.importance, args.config_header)
        elif cmd == "gradcheck":
            cmd_gradcheck(cfg)
    except (CLIError, OSError, ValueError, KeyError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        _fail(type(exc).__name__, str(message).replace("\n", " "))
    return 0


if __name__ == "__main__":
    sys.exit(main())
