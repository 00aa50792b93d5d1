"""Command-line entry point.

Commands: train-teacher, distill, evaluate, probe-neighbors.  Runs are
described by a flat INI-style config file; training commands write an output
bundle (config-echo.txt, trainlog.csv, metrics.json, epoch_metrics.jsonl,
checkpoint, subclass_assignments.csv).  Unknown sections or keys are hard
errors, and all paths resolve relative to the config file.

All randomness flows from the single [model] seed: data shuffling uses
seed+1, parameter init seed+2, dropout masks seed+3, the penultimate
projection seed+4.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import netcore as nc
from .data import DatasetSpec, IdxFormatError, load_dataset
from .metrics import knn_probe
from .training import (OptimizerConfig, RunConfig, ScheduleConfig,
                       TrainingDivergedError, distill_student, evaluate,
                       subclass_assignments, train_teacher)


class ConfigError(Exception):
    """Bad config file; message carries the file and line number."""


_REQUIRED = object()

# section -> key -> (converter, default); _REQUIRED defaults must be present
SCHEMA = {
    "dataset": {
        "source": (str, _REQUIRED),          # synthetic | idx
        "grouping": (str, "mnist_2x5"),
        "train_images": (str, None),
        "train_labels": (str, None),
        "val_images": (str, None),
        "val_labels": (str, None),
        "normalization": (str, "scale_255"),
        "classes": (int, 2),
        "subclasses": (int, 5),
        "dim": (int, 16),
        "separation": (float, 10.0),
        "train_size": (int, None),
        "val_size": (int, None),
    },
    "model": {
        "architecture": (str, _REQUIRED),
        "classes": (int, 2),
        "subclasses": (int, 5),
        "seed": (int, 0),
    },
    "teacher": {
        "aux_weight": (float, 1.0),
        "aux_temperature": (float, 1.0),
    },
    "distill": {
        "mode": (str, None),
        "temperature": (float, 4.0),
        "task_balance": (float, 0.5),
    },
    "optimizer": {
        "kind": (str, "adam"),
        "lr": (float, 1e-3),
        "momentum": (float, 0.9),
        "weight_decay": (float, 0.0),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "epsilon": (float, 1e-7),
    },
    "schedule": {
        "kind": (str, "constant"),
        "total_steps": (int, None),
        "peak_lr": (float, 0.1),
        "warmup_steps": (int, 10_000),
        "epochs": (int, 12),
        "batch_size": (int, 256),
    },
    "output": {
        "dir": (str, _REQUIRED),
    },
}


def parse_config(path):
    """Strict INI-style parser; unknown sections/keys and duplicates are
    errors reported with their line number."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e}") from None
    values = {section: {} for section in SCHEMA}
    present = set()
    section = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown section [{section}]")
            present.add(section)
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        if section is None:
            raise ConfigError(f"{path}:{lineno}: key outside any section")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA[section]:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r} in [{section}]")
        if key in values[section]:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r} in [{section}]")
        conv = SCHEMA[section][key][0]
        try:
            values[section][key] = conv(value)
        except ValueError:
            raise ConfigError(
                f"{path}:{lineno}: bad {conv.__name__} value {value!r} "
                f"for {key!r}") from None
    return values, present


def resolve_config(values, present, path, need_sections):
    """Fill defaults and enforce required sections/keys."""
    path = Path(path)
    for section in need_sections:
        if section not in present:
            raise ConfigError(f"{path}: missing required section [{section}]")
    effective = {}
    for section, keys in SCHEMA.items():
        effective[section] = {}
        for key, (_, default) in keys.items():
            if key in values[section]:
                effective[section][key] = values[section][key]
            elif default is _REQUIRED:
                if section in need_sections:
                    raise ConfigError(
                        f"{path}: missing required key {key!r} in [{section}]")
                effective[section][key] = None
            else:
                effective[section][key] = default
    return effective


def echo_config(effective):
    """Canonical text form of the effective config (schema order)."""
    out = []
    for section, keys in SCHEMA.items():
        out.append(f"[{section}]")
        for key in keys:
            value = effective[section][key]
            out.append(f"{key} = {'' if value is None else value}")
        out.append("")
    return "\n".join(out)


def _dataset_spec(cfg, config_path):
    d = cfg["dataset"]
    spec = DatasetSpec(
        source=d["source"], grouping=d["grouping"],
        train_images=d["train_images"], train_labels=d["train_labels"],
        val_images=d["val_images"], val_labels=d["val_labels"],
        normalization=d["normalization"], classes=d["classes"],
        subclasses=d["subclasses"], dim=d["dim"], separation=d["separation"],
        train_size=d["train_size"], val_size=d["val_size"],
        seed=cfg["model"]["seed"] + 1)
    if spec.source == "idx":
        missing = [k for k in ("train_images", "train_labels",
                               "val_images", "val_labels")
                   if getattr(spec, k) is None]
        if missing:
            raise ConfigError(f"idx dataset needs keys {missing} in [dataset]")
    base = Path(config_path).resolve().parent
    return spec, (lambda p: str(base / p))


def _run_config(cfg, mode):
    o, s, m = cfg["optimizer"], cfg["schedule"], cfg["model"]
    return RunConfig(
        architecture=m["architecture"], c=m["classes"], s=m["subclasses"],
        temperature=cfg["distill"]["temperature"],
        aux_temperature=cfg["teacher"]["aux_temperature"],
        alpha=cfg["distill"]["task_balance"],
        beta=cfg["teacher"]["aux_weight"],
        optimizer=OptimizerConfig(kind=o["kind"], lr0=o["lr"],
                                  momentum=o["momentum"],
                                  weight_decay=o["weight_decay"],
                                  beta1=o["beta1"], beta2=o["beta2"],
                                  epsilon=o["epsilon"]),
        schedule=ScheduleConfig(kind=s["kind"], total_steps=s["total_steps"],
                                peak_lr=s["peak_lr"],
                                warmup_steps=s["warmup_steps"]),
        epochs=s["epochs"], batch_size=s["batch_size"],
        seed=m["seed"], distill_mode=mode)


def _load_data(cfg, config_path):
    spec, resolve = _dataset_spec(cfg, config_path)
    train, val = load_dataset(spec, resolve)
    if train.y_class.shape[1] != cfg["model"]["classes"]:
        raise ConfigError(
            f"dataset has {train.y_class.shape[1]} classes but [model] "
            f"declares {cfg['model']['classes']}")
    return train, val


def _write_bundle(out_dir, effective, net, log, ckpt_name, val_set,
                  extra_files=()):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config-echo.txt").write_text(echo_config(effective))
    log.write_csv(out / "trainlog.csv")
    with open(out / "epoch_metrics.jsonl", "w") as fh:
        for report in log.epoch_reports:
            fh.write(report.to_json() + "\n")
    final = log.epoch_reports[-1]
    (out / "metrics.json").write_text(final.to_json() + "\n")
    nc.save_checkpoint(net, out / ckpt_name)
    with open(out / "subclass_assignments.csv", "w") as fh:
        fh.write("example_index,predicted_subclass,true_subclass\n")
        for idx, pred, true in subclass_assignments(net, val_set):
            fh.write(f"{idx},{pred},{'' if true is None else true}\n")
    for name, text in extra_files:
        (out / name).write_text(text)
    return final


def cmd_train_teacher(args):
    values, present = parse_config(args.config)
    cfg = resolve_config(values, present, args.config,
                         need_sections=("dataset", "model", "output"))
    if cfg["distill"]["mode"] not in (None, "none"):
        raise ConfigError("train-teacher requires [distill] mode unset or 'none'")
    run = _run_config(cfg, "none")
    train, val = _load_data(cfg, args.config)
    net, log = train_teacher(run, (train, val))
    out_dir = Path(args.config).resolve().parent / cfg["output"]["dir"]
    final = _write_bundle(out_dir, cfg, net, log, "teacher.ckpt", val)
    print(final.to_json())
    return 0


def cmd_distill(args):
    values, present = parse_config(args.config)
    cfg = resolve_config(values, present, args.config,
                         need_sections=("dataset", "model", "distill", "output"))
    mode = cfg["distill"]["mode"]
    if mode in (None, "none"):
        raise ConfigError("distill requires [distill] mode to name a distillation mode")
    ckpt = Path(args.teacher)
    if not ckpt.exists():
        print(f"error: teacher checkpoint {ckpt} does not exist", file=sys.stderr)
        return 1
    teacher = nc.load_checkpoint(ckpt)
    run = _run_config(cfg, mode)
    train, val = _load_data(cfg, args.config)
    net, log = distill_student(run, teacher, (train, val))
    digest = hashlib.sha256(ckpt.read_bytes()).hexdigest()
    out_dir = Path(args.config).resolve().parent / cfg["output"]["dir"]
    final = _write_bundle(out_dir, cfg, net, log, "student.ckpt",
                          val, extra_files=[("teacher_sha256.txt",
                                             f"{digest}  {ckpt.name}\n")])
    print(final.to_json())
    return 0


def _eval_dataset(args):
    values, present = parse_config(args.dataset)
    cfg = resolve_config(values, present, args.dataset, need_sections=("dataset",))
    train, val = _load_data(cfg, args.dataset)
    return train if args.split == "train" else val


def cmd_evaluate(args):
    net = nc.load_checkpoint(args.checkpoint)
    dataset = _eval_dataset(args)
    print(evaluate(net, dataset).to_json())
    return 0


def cmd_probe_neighbors(args):
    net = nc.load_checkpoint(args.checkpoint)
    dataset = _eval_dataset(args)
    if not 0 <= args.query_index < dataset.n:
        print(f"error: query index {args.query_index} outside "
              f"[0, {dataset.n})", file=sys.stderr)
        return 1
    reps = []
    for start in range(0, dataset.n, 512):
        res = nc.forward(net, dataset.x[start:start + 512], mode="eval")
        reps.append(res.penultimate if args.layer == "penultimate"
                    else res.logits.reshape(res.logits.shape[0], -1))
    reps = np.concatenate(reps, axis=0)
    idx, dist = knn_probe(reps[args.query_index], reps, args.k)
    print("rank,index,distance")
    for rank, (i, d) in enumerate(zip(idx, dist)):
        print(f"{rank},{int(i)},{float(d)!r}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="subdistill",
        description="Subclass distillation: teacher training, distillation, "
                    "and subclass-discovery diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train a subclass teacher")
    p.add_argument("config")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill a student from a teacher")
    p.add_argument("config")
    p.add_argument("--teacher", required=True, metavar="CHECKPOINT")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, metavar="CONFIG")
    p.add_argument("--split", choices=("train", "validation"),
                   default="validation")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("probe-neighbors",
                       help="nearest neighbors in representation space")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, metavar="CONFIG")
    p.add_argument("--query-index", type=int, required=True)
    p.add_argument("--layer", choices=("penultimate", "logits"),
                   default="penultimate")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--split", choices=("train", "validation"),
                   default="validation")
    p.set_defaults(func=cmd_probe_neighbors)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, nc.NetcoreError,
            IdxFormatError, TrainingDivergedError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
