"""Command-line entry point.

Every command resolves its settings from built-in defaults, then an optional
``--config`` file of key=value lines, then ``--key value`` overrides, and
writes the result to ``experiment.txt`` in its output directory before doing
anything else. Passing that file back through ``--config`` repeats the run.

Exit codes: 0 success, 1 other errors, 2 configuration, 3 data format,
4 divergence, 5 failed gradient check.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from dcd import gradcheck
from dcd.data import DatasetManifest, generate_synthetic, load_features
from dcd.errors import ConfigError, DCDError, DivergenceError, FormatError, GradcheckError
from dcd.evaluate import evaluate_retrieval, separability_trace, write_metrics
from dcd.model import TEACHER_HIDDEN, load_checkpoint, read_kv
from dcd.train import TrainConfig, student_uncertainty_variant, train_student, train_teacher

log = logging.getLogger("dcd")

OUTPUT_ROOT_ENV = "DCD_OUTPUT_ROOT"
SNAPSHOT = "experiment.txt"
DEFAULT_GRID = "16:16,32:4,32:8,64:4,64:8,64:16"
ABLATION_ROWS = {
    "vanilla": dict(regime="vanilla_kd"),
    "ds_ka": dict(regime="ablation", ds_ka=True, hw=False, sw=False),
    "ds_ka+hw": dict(regime="ablation", ds_ka=True, hw=True, sw=False),
    "ds_ka+sw": dict(regime="ablation", ds_ka=True, hw=False, sw=True),
    "full": dict(regime="dcd"),
}
EXTRA_ROWS = {
    "finetune": dict(regime="finetune"),
    "student_uncertainty": dict(regime="student_uncertainty"),
}
PATH_KEYS = {"features", "teacher", "init", "checkpoint", "checkpoints"}
METRIC_KEYS = ("text_r1", "text_r5", "text_r10", "image_r1", "image_r5", "image_r10")


def _train_defaults(**over) -> dict:
    return {k: _fmt(v) for k, v in asdict(TrainConfig(**over)).items()}


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


# defaults per command; every accepted key must appear here
COMMAND_KEYS = {
    "gen-data": {k: _fmt(v) for k, v in asdict(DatasetManifest()).items()},
    "train-teacher": {"features": "", "resume": "false",
                      **_train_defaults(regime="teacher", hidden=TEACHER_HIDDEN, epochs=30)},
    "distill": {"features": "", "teacher": "", "init": "", "resume": "false", "eval_split": "test", **_train_defaults()},
    "evaluate": {"features": "", "checkpoint": "", "split": "test"},
    "trace": {"features": "", "checkpoints": "", "split": "val", "probe_images": "100"},
    "sweep-mm": {"features": "", "teacher": "", "init": "", "grid": DEFAULT_GRID, "seeds": "1", "jobs": "1",
                 "eval_split": "test", **_train_defaults()},
    "ablate": {"features": "", "teacher": "", "init": "", "seeds": "5", "jobs": "1", "alphas": "", "extra": "",
               "eval_split": "test", **_train_defaults()},
    "gradcheck": {"instances": "20", "seed": "0", "corrupt": ""},
}
for _k in ("sweep-mm", "ablate"):
    COMMAND_KEYS[_k].pop("regime")
COMMAND_KEYS["train-teacher"].pop("regime")


# -- settings resolution -------------------------------------------------------


def parse_overrides(tokens: list[str]) -> dict:
    """``--key value`` / ``--key=value`` pairs; dashes in keys become underscores."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or tok == "--":
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for --{key}")
            value = tokens[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def resolve(command: str, config_file: str | None, overrides: dict) -> dict:
    allowed = COMMAND_KEYS[command]
    settings = dict(allowed)
    layers = []
    if config_file:
        path = Path(config_file)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        layers.append(read_kv(path.read_text(encoding="utf-8")))
    layers.append(overrides)
    for layer in layers:
        for key, value in layer.items():
            if key == "command":
                if value != command:
                    raise ConfigError(f"config was written by {value!r}, not {command!r}")
                continue
            if key == "out":
                continue
            if key not in allowed:
                raise ConfigError(f"unknown setting {key!r} for {command}")
            settings[key] = str(value)
    for key in PATH_KEYS & settings.keys():
        if settings[key]:
            settings[key] = ",".join(str(Path(p).resolve()) for p in settings[key].split(",") if p)
    return settings


def output_dir(command: str, out: str | None) -> Path:
    if out:
        return Path(out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command


def write_snapshot(out: Path, command: str, settings: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"command={command}"] + [f"{k}={v}" for k, v in sorted(settings.items())]
    path = out / SNAPSHOT
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _bool(s: dict, key: str) -> bool:
    v = s[key].strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"{key} must be a boolean, got {s[key]!r}")


def _int(s: dict, key: str) -> int:
    try:
        return int(s[key])
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {s[key]!r}") from None


def _require(s: dict, key: str) -> str:
    if not s[key]:
        raise ConfigError(f"--{key.replace('_', '-')} is required")
    return s[key]


def _train_config(s: dict, **fixed) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    kv = {k: v for k, v in s.items() if k in names}
    kv.update({k: _fmt(v) for k, v in fixed.items()})
    return TrainConfig.from_mapping(kv)


def parse_grid(text: str) -> list[tuple[int, int]]:
    """Pairs written as (M+1):(M'+1), i.e. total candidates with the positive included."""
    cells = []
    for part in text.split(","):
        try:
            a, b = (int(x) for x in part.split(":"))
        except ValueError:
            raise ConfigError(f"bad grid cell {part!r}; expected e.g. 64:8") from None
        if b < 2 or a < b:
            raise ConfigError(f"grid cell {part!r} needs 2 <= M'+1 <= M+1")
        cells.append((a - 1, b - 1))
    return cells


# -- commands --------------------------------------------------------------------


def cmd_gen_data(s: dict, out: Path) -> int:
    try:
        manifest = DatasetManifest.from_mapping(s)
    except FormatError as e:  # from_mapping reports bad numbers as format problems
        raise ConfigError(str(e)) from None
    write_snapshot(out, "gen-data", s)
    generate_synthetic(manifest, out)
    print(f"wrote dataset to {out}")
    return 0


def cmd_train_teacher(s: dict, out: Path) -> int:
    config = _train_config(s, regime="teacher")
    features = _require(s, "features")
    write_snapshot(out, "train-teacher", s)
    dataset = load_features(features)
    _, record = train_teacher(dataset, config, out, resume=_bool(s, "resume"))
    print(f"teacher best val mean R@1 {record.best_val.get('mean_r1', float('nan')):.2f} "
          f"(epoch {record.best_epoch}); checkpoint {record.checkpoint}")
    return 0


def _run_student(features: str, teacher_path: str, config: TrainConfig, out: Path, eval_split: str,
                 resume: bool = False, init_path: str = "") -> dict:
    """One student run plus evaluation of its best checkpoint; returns a summary row."""
    dataset = load_features(features)
    teacher = load_checkpoint(teacher_path) if teacher_path else None
    init = load_checkpoint(init_path) if init_path else None
    if config.regime == "student_uncertainty":
        record = student_uncertainty_variant(dataset, teacher, config, out, init=init)
    else:
        _, record = train_student(dataset, teacher, config, out, resume=resume, init=init)
    row = {"status": record.status, "wall_time": record.wall_time, "seed": config.seed,
           "diagnostic": record.diagnostic}
    if record.checkpoint:
        metrics = evaluate_retrieval(load_checkpoint(record.checkpoint), dataset[eval_split])
        write_metrics(metrics, out, {"split": eval_split, "wall_time": record.wall_time,
                                     "best_epoch": record.best_epoch, "status": record.status})
        row.update(metrics.as_dict())
        row["mean_r1"] = metrics.mean_r1
    return row


def cmd_distill(s: dict, out: Path) -> int:
    config = _train_config(s)
    features = _require(s, "features")
    teacher = s["teacher"] if config.regime == "finetune" else _require(s, "teacher")
    if s["eval_split"] not in ("train", "val", "test"):
        raise ConfigError(f"eval_split must be train, val or test, got {s['eval_split']!r}")
    write_snapshot(out, "distill", s)
    row = _run_student(features, teacher, config, out, s["eval_split"], _bool(s, "resume"), s["init"])
    print(json.dumps(row, sort_keys=True))
    return 0


def cmd_evaluate(s: dict, out: Path) -> int:
    features, ckpt = _require(s, "features"), _require(s, "checkpoint")
    if s["split"] not in ("train", "val", "test"):
        raise ConfigError(f"split must be train, val or test, got {s['split']!r}")
    write_snapshot(out, "evaluate", s)
    metrics = evaluate_retrieval(load_checkpoint(ckpt), load_features(features)[s["split"]])
    write_metrics(metrics, out, {"split": s["split"], "checkpoint": ckpt})
    sys.stdout.write(metrics.to_text())
    return 0


def _expand_checkpoints(text: str) -> list[Path]:
    paths = []
    for part in (p for p in text.split(",") if p):
        p = Path(part)
        epochs = sorted((p / "checkpoints").glob("epoch_*")) if (p / "checkpoints").is_dir() else []
        paths.extend(epochs or [p])
    return paths


def cmd_trace(s: dict, out: Path) -> int:
    features, ckpts = _require(s, "features"), _require(s, "checkpoints")
    n = _int(s, "probe_images")
    write_snapshot(out, "trace", s)
    probe = load_features(features)[s["split"]].subset(n)
    trace = separability_trace(_expand_checkpoints(ckpts), probe)
    (out / "trace.tsv").write_text(trace.to_tsv(), encoding="utf-8")
    sys.stdout.write(trace.to_tsv())
    return 0


def _cell(args) -> dict:
    features, teacher, init, config, out, eval_split, labels = args
    try:
        row = _run_student(features, teacher, config, Path(out), eval_split, init_path=init)
    except DCDError as e:
        row = {"status": "failed", "diagnostic": f"{type(e).__name__}: {e}", "seed": config.seed}
    return {**labels, **row}


def _run_cells(cells: list, jobs: int) -> list[dict]:
    if jobs <= 1:
        return [_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_cell, cells))


def _tsv(rows: list[dict], columns: list[str]) -> str:
    lines = ["\t".join(columns)]
    for r in rows:
        lines.append("\t".join(_cellfmt(r.get(c, "")) for c in columns))
    return "\n".join(lines) + "\n"


def _cellfmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _aggregate(rows: list[dict], key_cols: list[str]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[c] for c in key_cols), []).append(r)
    out = []
    for key, members in groups.items():
        ok = [m for m in members if "mean_r1" in m]
        agg = dict(zip(key_cols, key))
        agg["runs"] = len(members)
        agg["completed"] = len(ok)
        for m in (*METRIC_KEYS, "mean_r1", "wall_time"):
            vals = np.array([r[m] for r in ok], dtype=float) if ok else np.array([np.nan])
            agg[m] = float(vals.mean())
            agg[f"{m}_sd"] = float(vals.std())
        out.append(agg)
    return out


def cmd_sweep_mm(s: dict, out: Path) -> int:
    base = _train_config(s, regime="dcd")
    features, teacher = _require(s, "features"), _require(s, "teacher")
    grid = parse_grid(s["grid"])
    seeds, jobs = _int(s, "seeds"), _int(s, "jobs")
    for m, mp in grid:
        replace(base, M=m, M_prime=mp)  # validates each cell before any work
    write_snapshot(out, "sweep-mm", s)
    cells = []
    for m, mp in grid:
        for i in range(seeds):
            cfg = replace(base, M=m, M_prime=mp, seed=base.seed + i)
            cell_dir = out / f"M{m + 1}_Mp{mp + 1}" / f"seed{cfg.seed}"
            cells.append((features, teacher, s["init"], cfg, str(cell_dir), s["eval_split"],
                          {"M+1": m + 1, "M'+1": mp + 1}))
    rows = _run_cells(cells, jobs)
    cols = ["M+1", "M'+1", "seed", "status", "wall_time", "text_r1", "image_r1", "mean_r1"]
    (out / "runs.tsv").write_text(_tsv(rows, cols), encoding="utf-8")
    summary = _aggregate(rows, ["M+1", "M'+1"])
    table = _tsv(summary, ["M+1", "M'+1", "completed", "wall_time", "text_r1", "image_r1", "mean_r1"])
    (out / "summary.tsv").write_text(table, encoding="utf-8")
    (out / "summary.json").write_text(json.dumps({"runs": rows, "summary": summary}, indent=2), encoding="utf-8")
    sys.stdout.write(table)
    return 0


def cmd_ablate(s: dict, out: Path) -> int:
    base = _train_config(s, regime="dcd")
    features, teacher = _require(s, "features"), _require(s, "teacher")
    seeds, jobs = _int(s, "seeds"), _int(s, "jobs")
    try:
        alphas = [float(a) for a in s["alphas"].split(",") if a] or [base.alpha]
    except ValueError:
        raise ConfigError(f"alphas must be comma-separated numbers, got {s['alphas']!r}") from None
    extra = [x for x in s["extra"].split(",") if x]
    unknown = set(extra) - set(EXTRA_ROWS)
    if unknown:
        raise ConfigError(f"unknown extra rows {sorted(unknown)}; choose from {sorted(EXTRA_ROWS)}")
    rows_def = {**ABLATION_ROWS, **{k: EXTRA_ROWS[k] for k in extra}}
    for a in alphas:
        replace(base, alpha=a)
    write_snapshot(out, "ablate", s)
    cells = []
    for a in alphas:
        for name, flags in rows_def.items():
            for i in range(seeds):
                cfg = replace(base, alpha=a, seed=base.seed + i, **flags)
                cell_dir = out / f"alpha{a:g}" / name / f"seed{cfg.seed}"
                cells.append((features, teacher, s["init"], cfg, str(cell_dir), s["eval_split"], {"row": name, "alpha": a}))
    rows = _run_cells(cells, jobs)
    cols = ["alpha", "row", "seed", "status", "wall_time", *METRIC_KEYS, "mean_r1", "diagnostic"]
    (out / "runs.tsv").write_text(_tsv(rows, cols), encoding="utf-8")
    summary = _aggregate(rows, ["alpha", "row"])
    table_cols = ["alpha", "row", "completed"]
    for m in METRIC_KEYS:
        table_cols += [m, f"{m}_sd"]
    table = _tsv(summary, table_cols + ["mean_r1"])
    (out / "summary.tsv").write_text(table, encoding="utf-8")
    (out / "summary.json").write_text(json.dumps({"runs": rows, "summary": summary}, indent=2), encoding="utf-8")
    sys.stdout.write(table)
    return 0


def cmd_gradcheck(s: dict, out: Path) -> int:
    corrupt = s["corrupt"] or None
    if corrupt and corrupt not in gradcheck.names():
        raise ConfigError(f"unknown check {corrupt!r}; choose from {', '.join(gradcheck.names())}")
    write_snapshot(out, "gradcheck", s)
    results = gradcheck.run_all(_int(s, "instances"), _int(s, "seed"), corrupt)
    text = gradcheck.report(results)
    (out / "gradcheck.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise GradcheckError(f"gradient check failed for: {', '.join(failed)}")
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic paired-feature dataset"),
    "train-teacher": (cmd_train_teacher, "train the large scorer on random negatives"),
    "distill": (cmd_distill, "train a student under one regime and evaluate it"),
    "evaluate": (cmd_evaluate, "recall@1/5/10 of a checkpoint in both directions"),
    "trace": (cmd_trace, "positive/negative score separability across checkpoints"),
    "sweep-mm": (cmd_sweep_mm, "student runs over a grid of (M+1, M'+1) candidate counts"),
    "ablate": (cmd_ablate, "vanilla / ds_ka / +hw / +sw / full over several seeds"),
    "gradcheck": (cmd_gradcheck, "compare analytic and finite-difference gradients"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dcd",
        description="Teacher-mined hard negatives and uncertainty-weighted distillation on paired features.",
        epilog=f"Output directories default to ${OUTPUT_ROOT_ENV}/<command> (or ./runs/<command>). "
               "Any setting can be given as --key value; run '<command> --show-defaults' to list them.",
    )
    p.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="key=value settings file, e.g. a previous experiment.txt")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--show-defaults", action="store_true", help="print every setting with its default")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    if args.show_defaults:
        for k, v in sorted(COMMAND_KEYS[args.command].items()):
            print(f"{k}={v}")
        return 0
    fn = COMMANDS[args.command][0]
    t0 = time.perf_counter()
    try:
        settings = resolve(args.command, args.config, parse_overrides(rest))
        code = fn(settings, output_dir(args.command, args.out))
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return e.exit_code
    except DCDError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
