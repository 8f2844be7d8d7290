"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 configuration or input
error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, gradcheck, kernels
from .data import BenchmarkConfig, ConfigError, Dataset, build_benchmark, load_dataset, save_dataset
from .metrics import IoUReport, metrics_csv
from .plots import bar_chart, line_chart
from .trainer import (Checkpoint, NumericalAbort, TrainConfig, evaluate, evaluate_params, load_checkpoint,
                      save_checkpoint, train)

log = logging.getLogger("sceneenc")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.json"
ABLATION_RUNS = "ablation_runs.json"

# (row label, scene encoder, region similarity, selection strategy)
CELLS = (
    ("base", False, False, "top_confidence"),
    ("+SE", True, False, "top_confidence"),
    ("+RSL", False, True, "top_confidence"),
    ("+both", True, True, "top_confidence"),
    ("+both top_confidence", True, True, "top_confidence"),
    ("+both random", True, True, "random"),
)
REFERENCE_HEADER = (
    "# published reference ordering (real indoor scans, mIoU %): base 55.6 / +SE 58.6 / +RSL 58.7 / +both 62.8",
    "# published selection strategies on +both (mIoU %): random 60.2 / top_confidence 62.8",
)


class VerificationFailure(RuntimeError):
    pass


# -- configuration ---------------------------------------------------------------

ABLATE_DEFAULTS = {"seeds": 5, "which": "best", "split": "test"}
GRADCHECK_DEFAULTS = {"trials": 100, "h": 1e-5, "seed": 0}
TOP_LEVEL = ("seed", "benchmark", "train", "ablate", "gradcheck")


def _strip_comments(text: str) -> str:
    """Drop whole-line ``//`` comments so the shipped template is loadable as is."""
    return "\n".join(line for line in text.splitlines() if not line.lstrip().startswith("//"))


def read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError("config", f"file not found: {p}")
    try:
        raw = json.loads(_strip_comments(p.read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{p}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    for key in raw:
        if key not in TOP_LEVEL:
            raise ConfigError(key, f"unknown section; expected one of {TOP_LEVEL}")
    return raw


def _section(raw: dict, name: str, defaults: dict) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(name, "must be an object")
    for key in sec:
        if key not in defaults:
            raise ConfigError(f"{name}.{key}", "unknown field")
    return {**defaults, **sec}


def benchmark_config(raw: dict) -> BenchmarkConfig:
    defaults = asdict(BenchmarkConfig())
    values = _section(raw, "benchmark", defaults)
    values["templates"] = tuple(values["templates"])
    try:
        cfg = BenchmarkConfig(**values)
        cfg.validate()
    except TypeError as exc:
        raise ConfigError("benchmark", str(exc)) from None
    return cfg


def resolve(args) -> dict:
    """Resolved configuration with every default materialized."""
    raw = read_config(args.config)
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
        raise ConfigError("seed", f"must be an unsigned 64-bit integer, got {seed!r}")
    train_raw = dict(raw.get("train", {}))
    if not isinstance(train_raw, dict):
        raise ConfigError("train", "must be an object")
    if args.seed is not None or "seed" not in train_raw:
        train_raw["seed"] = seed
    if getattr(args, "paper_exact", False):
        train_raw["descriptor_variant"] = "paper_exact"
        train_raw["eq3_exact"] = True
    tcfg = TrainConfig.from_dict(train_raw)
    ablate = _section(raw, "ablate", ABLATE_DEFAULTS)
    if not isinstance(ablate["seeds"], int) or ablate["seeds"] < 1:
        raise ConfigError("ablate.seeds", "must be a positive integer")
    if ablate["which"] not in ("best", "final"):
        raise ConfigError("ablate.which", "must be 'best' or 'final'")
    gc = _section(raw, "gradcheck", GRADCHECK_DEFAULTS)
    if not isinstance(gc["trials"], int) or gc["trials"] < 1:
        raise ConfigError("gradcheck.trials", "must be a positive integer")
    if not gc["h"] > 0:
        raise ConfigError("gradcheck.h", "must be positive")
    return {"seed": seed, "benchmark": benchmark_config(raw), "train": tcfg, "ablate": ablate, "gradcheck": gc}


def _jsonable(resolved: dict) -> dict:
    out = dict(resolved)
    out["benchmark"] = asdict(resolved["benchmark"])
    out["benchmark"]["templates"] = list(out["benchmark"]["templates"])
    out["train"] = resolved["train"].to_dict()
    return out


# -- helpers ---------------------------------------------------------------------

def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write(path: Path, text: str, artifacts: dict) -> Path:
    path.write_text(text)
    artifacts[str(path)] = _digest(path)
    return path


def _out_dir(args, required=True) -> Path:
    if args.out is None:
        if required:
            raise ConfigError("--out", "an output directory is required")
        return Path(".")
    out = Path(args.out)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory {out.parent} does not exist")
    out.mkdir(exist_ok=True)
    return out


def _dataset(args, resolved) -> Dataset:
    if args.data is None:
        raise ConfigError("--data", "a dataset directory is required")
    return load_dataset(args.data)


def history_csv(history: list[dict], class_names) -> str:
    rows = []
    for row in history:
        flat = {}
        for key, value in row.items():
            if isinstance(value, list):
                for name, v in zip(class_names, value):
                    flat[f"{key}_{name}"] = v
            else:
                flat[key] = value
        rows.append(flat)
    columns = list(dict.fromkeys(k for r in rows for k in r))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                    for c in columns])
    return buf.getvalue()


def loss_curve_svg(history: list[dict]) -> str:
    series = {}
    for term in ("total", "cls", "des", "rs"):
        ys = [row.get(f"train_{term}") for row in history]
        if any(v for v in ys):
            series[term] = ys
    return line_chart(series, "training loss per epoch")


def eval_csv(result: dict, class_names, extra: dict) -> str:
    iou = np.array([np.nan if v is None else v for v in result["iou"]])
    report = IoUReport(iou, result["miou"], result["mciou"])
    summary = {k: result.get(k) for k in ("noise", "descriptor_f1", "confusable_rate", "scene_encoder")}
    summary.update(extra)
    return metrics_csv(report, class_names, summary)


# -- commands --------------------------------------------------------------------

def cmd_gen(args, resolved, ctx):
    out = Path(args.out) if args.out else None
    if out is None:
        raise ConfigError("--out", "an output directory is required")
    ds = build_benchmark(resolved["benchmark"], resolved["seed"])
    manifest = save_dataset(ds, out)
    for path in sorted(out.rglob("*.csv")) + [manifest]:
        ctx["artifacts"][str(path)] = _digest(path)
    print(f"wrote {len(ds.clouds)} scenes to {out}")
    return EXIT_OK


def cmd_train(args, resolved, ctx):
    ds = _dataset(args, resolved)
    out = _out_dir(args)
    cfg = resolved["train"]
    ck = train(cfg, ds, progress=lambda row: log.info("epoch %s done", row["epoch"]))
    path = out / "checkpoint.ckpt"
    save_checkpoint(ck, path)
    ctx["artifacts"][str(path)] = _digest(path)
    _write(out / "history.csv", history_csv(ck.history, ds.class_names), ctx["artifacts"])
    _write(out / "loss_curve.svg", loss_curve_svg(ck.history), ctx["artifacts"])
    last = ck.history[-1]
    print(f"trained {cfg.epochs} epochs; final val mIoU {last.get('val_miou')}; best epoch {ck.best_epoch}")
    return EXIT_OK


def cmd_eval(args, resolved, ctx):
    ds = _dataset(args, resolved)
    out = _out_dir(args)
    ck_path = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.ckpt"
    ck = load_checkpoint(ck_path)
    ctx["paths"]["checkpoint"] = str(ck_path)
    result = evaluate(ck, ds, args.split, args.which)
    text = eval_csv(result, ds.class_names, {"split": args.split, "params": args.which})
    _write(out / "metrics.csv", text, ctx["artifacts"])
    print(f"{args.split} mIoU {result['miou']:.4f}  scene encoder {result['scene_encoder']}")
    return EXIT_OK


def _cell_config(base: TrainConfig, seed: int, se: bool, rsl: bool, strategy: str) -> TrainConfig:
    d = base.to_dict()
    d.update(seed=seed, scene_encoder=se, rsl=rsl, strategy=strategy)
    return TrainConfig.from_dict(d)


_WORKER_DATASET: Dataset | None = None


def _init_worker(dataset):
    global _WORKER_DATASET
    _WORKER_DATASET = dataset


def run_cell(job, dataset: Dataset | None = None) -> dict:
    """Train one (cell, seed) job and score it on the held-out split."""
    cfg_dict, split, which = job
    dataset = dataset if dataset is not None else _WORKER_DATASET
    cfg = TrainConfig.from_dict(cfg_dict)
    with threadpool_limits(1):
        ck = train(cfg, dataset)
        params = ck.best_params if which == "best" and ck.best_params is not None else ck.params
        result = evaluate_params(params, cfg, dataset.split(split), dataset.n_classes)
    return {"seed": cfg.seed, "scene_encoder": cfg.scene_encoder, "rsl": cfg.rsl, "strategy": cfg.strategy,
            "best_epoch": ck.best_epoch, "split": split, "params": which, "metrics": result}


def ablation_jobs(resolved) -> list[tuple]:
    base, ab = resolved["train"], resolved["ablate"]
    seeds = [resolved["seed"] + s for s in range(ab["seeds"])]
    unique = []
    for _, se, rsl, strategy in CELLS:
        if (se, rsl, strategy) not in unique:
            unique.append((se, rsl, strategy))
    return [(_cell_config(base, s, se, rsl, st).to_dict(), ab["split"], ab["which"])
            for se, rsl, st in unique for s in seeds]


def run_ablation(resolved, dataset: Dataset, threads: int = 1) -> list[dict]:
    jobs = ablation_jobs(resolved)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker, initargs=(dataset,)) as pool:
            return list(pool.map(run_cell, jobs))
    return [run_cell(job, dataset) for job in jobs]


def summarize_ablation(runs: list[dict]) -> list[dict]:
    rows = []
    for label, se, rsl, strategy in CELLS:
        mine = [r for r in runs if (r["scene_encoder"], r["rsl"], r["strategy"]) == (se, rsl, strategy)]
        mine.sort(key=lambda r: r["seed"])

        def stat(key):
            vals = [r["metrics"][key] for r in mine if r["metrics"].get(key) is not None]
            return (float(np.mean(vals)), float(np.std(vals))) if vals else (None, None)

        row = {"cell": label, "scene_encoder": se, "rsl": rsl, "strategy": strategy, "n_seeds": len(mine),
               "seeds": [r["seed"] for r in mine], "miou_per_seed": [r["metrics"]["miou"] for r in mine]}
        for key in ("miou", "mciou", "noise", "confusable_rate", "descriptor_f1"):
            row[f"{key}_mean"], row[f"{key}_std"] = stat(key)
        rows.append(row)
    return rows


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    for line in REFERENCE_HEADER:
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    cols = ["cell", "scene_encoder", "rsl", "strategy", "n_seeds", "miou_mean", "miou_std", "mciou_mean",
            "noise_mean", "confusable_rate_mean", "descriptor_f1_mean", "miou_per_seed"]
    w.writerow(cols)
    for r in rows:
        vals = []
        for c in cols:
            v = r[c]
            if c == "miou_per_seed":
                v = ";".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            vals.append("" if v is None else v)
        w.writerow(vals)
    return buf.getvalue()


def ablation_svg(rows: list[dict]) -> str:
    return bar_chart([r["cell"].replace("top_confidence", "top") for r in rows],
                     [r["miou_mean"] or 0.0 for r in rows], [r["miou_std"] or 0.0 for r in rows],
                     "ablation: mean test mIoU over seeds")


def _emit_ablation(out: Path, runs: list[dict], artifacts: dict) -> list[dict]:
    rows = summarize_ablation(runs)
    _write(out / ABLATION_RUNS, json.dumps(runs, indent=2, sort_keys=True) + "\n", artifacts)
    _write(out / "ablation.csv", ablation_csv(rows), artifacts)
    _write(out / "ablation.svg", ablation_svg(rows), artifacts)
    return rows


def cmd_ablate(args, resolved, ctx):
    out = _out_dir(args)
    if args.data is not None:
        ds = load_dataset(args.data)
    else:
        ds = build_benchmark(resolved["benchmark"], resolved["seed"])
    runs = run_ablation(resolved, ds, args.threads)
    rows = _emit_ablation(out, runs, ctx["artifacts"])
    for r in rows:
        print(f"{r['cell']:<22} mIoU {r['miou_mean']:.4f} ± {r['miou_std']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args, resolved, ctx):
    gc = resolved["gradcheck"]
    _out_dir(args, required=False)
    failures = []
    for tag in sorted(gradcheck.PRIMITIVE_CASES):
        err = gradcheck.check_primitive(tag, gc["trials"], gc["seed"], gc["h"])
        ok = err <= gradcheck.PRIMITIVE_TOLERANCE
        print(f"primitive {tag:<16} max rel err {err:.3e}  {'ok' if ok else 'FAIL'}")
        if not ok:
            failures.append(f"primitive {tag}: max relative error {err:.3e} > {gradcheck.PRIMITIVE_TOLERANCE:g}")
    results, messages = gradcheck.check_model(gc["seed"], gc["h"], stop_gradient=not args.no_stop_gradient)
    for r in results:
        tail = f"  ({r.note})" if r.note else ""
        print(f"group {r.term}/{r.group:<6} max rel err {r.error:.3e}  {'ok' if r.ok else 'FAIL'}{tail}")
        if not r.ok:
            failures.append(f"group {r.term}/{r.group}: max relative error {r.error:.3e} > {gradcheck.TOLERANCE:g}")
    for m in messages:
        print(m)
        if m.startswith("FAIL"):
            failures.append(m[5:])
    ctx["result"] = {"failures": failures, "groups": [asdict(r) for r in results]}
    if failures:
        raise VerificationFailure("; ".join(failures))
    print("gradcheck passed")
    return EXIT_OK


def cmd_report(args, resolved, ctx):
    out = _out_dir(args, required=False)
    done = []
    runs_path = out / ABLATION_RUNS
    if runs_path.exists():
        rows = _emit_ablation(out, json.loads(runs_path.read_text()), ctx["artifacts"])
        for r in rows:
            print(f"{r['cell']:<22} mIoU {r['miou_mean']:.4f} ± {r['miou_std']:.4f}")
        done.append("ablation")
    ck_path = out / "checkpoint.ckpt"
    if ck_path.exists():
        ck = load_checkpoint(ck_path)
        _write(out / "history.csv", history_csv(ck.history, ck.class_names), ctx["artifacts"])
        _write(out / "loss_curve.svg", loss_curve_svg(ck.history), ctx["artifacts"])
        done.append("training")
    if not done:
        raise FileNotFoundError(f"nothing to report in {out}: expected {ABLATION_RUNS} or checkpoint.ckpt")
    print(f"regenerated {' and '.join(done)} reports in {out}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck, "report": cmd_report}


# -- entry -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file ('//' line comments allowed)")
    common.add_argument("--data", help="dataset directory holding manifest.json")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads, or ablation workers")
    common.add_argument("--paper-exact", action="store_true",
                        help="positive-only descriptor loss and sum-over-M region similarity normalization")
    p = argparse.ArgumentParser(prog="sceneenc", description="scene-descriptor point cloud segmentation toolkit")
    p.add_argument("--version", action="version", version=f"sceneenc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate the synthetic benchmark")
    sub.add_parser("train", parents=[common], help="train a model")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", help="checkpoint path (default OUT/checkpoint.ckpt)")
    e.add_argument("--split", default="test", help="dataset split to score")
    e.add_argument("--which", choices=("final", "best"), default="final", help="parameter set to score")
    sub.add_parser("ablate", parents=[common], help="train and tabulate the ablation cells")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    g.add_argument("--no-stop-gradient", action="store_true",
                   help="debug: let the classification loss reach the descriptor head")
    sub.add_parser("report", parents=[common], help="regenerate tables and plots from OUT")
    return p


def _manifest_path(args) -> Path:
    if args.out is not None and Path(args.out).is_dir():
        return Path(args.out) / MANIFEST_NAME
    return Path(f"sceneenc-{args.command}-{MANIFEST_NAME}")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SCENEENC_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    ctx = {"artifacts": {}, "paths": {"config": args.config, "data": args.data, "out": args.out}}
    manifest = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv),
                "version": __version__, "knn_backend": kernels.BACKEND, "started": _now(),
                "threads": args.threads}
    resolved = None
    try:
        if args.threads < 1:
            raise ConfigError("--threads", "must be at least 1")
        if args.out is not None and Path(args.out).parent.is_dir():
            Path(args.out).mkdir(exist_ok=True)
        resolved = resolve(args)
        with threadpool_limits(args.threads):
            code = COMMANDS[args.command](args, resolved, ctx)
        message = "ok"
    except ConfigError as exc:
        code, message = EXIT_CONFIG, f"configuration error in {exc.field}: {exc}"
    except (FileNotFoundError, NotADirectoryError, KeyError, ValueError) as exc:
        code, message = EXIT_CONFIG, f"input error: {exc}"
    except NumericalAbort as exc:
        code, message = EXIT_NUMERIC, f"numerical abort: {exc}"
    except VerificationFailure as exc:
        code, message = EXIT_VERIFY, f"verification failed: {exc}"
    if code != EXIT_OK:
        print(message, file=sys.stderr)
    manifest.update({
        "config": _jsonable(resolved) if resolved else None,
        "seed": resolved["seed"] if resolved else args.seed,
        "paths": ctx["paths"], "artifacts": dict(sorted(ctx["artifacts"].items())),
        "exit_code": code, "message": message, "finished": _now(),
    })
    if "result" in ctx:
        manifest["result"] = ctx["result"]
    try:
        _manifest_path(args).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        log.error("could not write run manifest: %s", exc)
    return code


if __name__ == "__main__":
    sys.exit(main())
