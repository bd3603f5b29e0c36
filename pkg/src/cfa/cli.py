"""Command-line entry point.

Every ExperimentConfig field is exposed as ``--field-name``.  Values are
resolved as defaults < ``--config`` file < explicit flags.

    cfa run --output-dir out/run0 --seed 3
    cfa ablate-alpha --alphas 1.0,0.5,0.0 --seeds 0,1,2 --output-dir out/alpha
    cfa evaluate --r-csv out/run0/R.csv
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from .amalgamation import amalgamate, stacked_classes, write_loss_history
from .data import TaskStream, load_stream, save_stream
from .errors import CFAError, ConfigError
from .memory import ReplayMemory, populate
from .metrics import RMatrix, summarize
from .serialization import load_network, save_network

log = logging.getLogger("cfa")

CONFIG_FIELDS = [f for f in dataclasses.fields(H.ExperimentConfig) if f.name != "seed"]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment config")
    for f in CONFIG_FIELDS:
        g.add_argument(
            "--" + f.name.replace("_", "-"),
            dest=f.name,
            default=argparse.SUPPRESS,
            metavar=f.type.upper(),
            help=f"(default: {f.default})",
        )
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="run seed (default: 0)")
    p.add_argument("--data", help="saved task stream to use instead of building one from the config")
    p.add_argument("-v", "--verbose", action="count", default=0)


def resolve_config(args: argparse.Namespace) -> H.ExperimentConfig:
    values = H.read_config_file(args.config) if getattr(args, "config", None) else {}
    for f in CONFIG_FIELDS:
        if f.name in vars(args):
            values[f.name] = H.coerce_field(f.name, getattr(args, f.name))
    if "seed" in vars(args):
        values["seed"] = args.seed
    try:
        cfg = H.ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def _stream(args, cfg) -> TaskStream:
    return load_stream(args.data) if args.data else H.build_stream(cfg)


def _out_dir(cfg, fallback: str) -> Path:
    out = Path(cfg.output_dir or fallback)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ------------------------------------------------------------ subcommands


def cmd_gen_data(args, cfg) -> int:
    stream = H.build_stream(cfg)
    path = save_stream(args.out, stream)
    print(f"wrote {len(stream)} tasks ({stream.source}) to {path}")
    return 0


def cmd_train_teachers(args, cfg) -> int:
    """Train one teacher per task and fill the replay memory along the way."""
    stream = _stream(args, cfg)
    out = _out_dir(cfg, "teachers")
    memory = ReplayMemory(cfg.memory_policy, cfg.memory_budget)
    seed = H.derive_seed(cfg.seed, "teacher")
    for task in stream:
        teacher = H.train_teacher(task, cfg, seed)
        save_network(out / "checkpoints" / f"teacher_{task.task_id}", teacher, {"task_id": task.task_id})
        populate(memory, teacher, task.task_id, task.x_train, task.y_train)
        print(f"teacher {task.task_id} classes {list(task.class_ids)}: "
              f"test acc {H.accuracy(teacher, task.x_test, task.y_test):.4f}")
    memory.save(out / "memory")
    print(f"memory: {len(memory)} exemplars (capacity {memory.capacity}) in {out / 'memory'}")
    return 0


def _teacher_paths(directory: Path) -> list[Path]:
    found = []
    for p in directory.glob("teacher_*.json"):
        m = re.fullmatch(r"teacher_(\d+)\.json", p.name)
        if m:
            found.append((int(m.group(1)), p.with_suffix("")))
    return [p for _, p in sorted(found)]


def cmd_amalgamate(args, cfg) -> int:
    paths = _teacher_paths(Path(args.teachers))
    if not paths:
        raise ConfigError(f"no teacher_<i> checkpoints in {args.teachers}")
    teachers = [load_network(p) for p in paths]
    memory = ReplayMemory.load(args.memory)
    first = teachers[0]
    student = H.new_network(
        cfg, first.input_dim, stacked_classes(teachers), H.derive_seed(cfg.seed, "student", len(teachers))
    )
    result = amalgamate(teachers, memory, student, cfg.amalgamation_config(H.derive_seed(cfg.seed, "amalgamate")))
    out = _out_dir(cfg, "student")
    save_network(out / "student", result.student, {"teachers": len(teachers)})
    write_loss_history(out / "loss_history.csv", result.history)
    last = result.history[-1]
    print(f"student over {len(teachers)} teachers, {len(memory)} exemplars: final total {last.total:.6f} "
          f"(kl {last.d_kl_soft:.6f}, l_m {last.l_m:.6f}, l_r {last.l_r:.6f})")
    return 0


def _report(result: H.ExperimentResult) -> int:
    keys = ("method", "acc", "bwt", "fwt", "per_task_accuracy", "memory_footprint")
    _print_json({k: result.metrics[k] for k in keys if k in result.metrics})
    return 0


def cmd_run(args, cfg) -> int:
    return _report(H.run_cfa_experiment(cfg, _stream(args, cfg)))


def cmd_baseline_naive(args, cfg) -> int:
    return _report(H.run_naive_baseline(cfg, _stream(args, cfg)))


def cmd_baseline_joint(args, cfg) -> int:
    return _report(H.run_joint_upper_bound(cfg, _stream(args, cfg)))


def cmd_evaluate(args, cfg) -> int:
    if args.r_csv:
        _print_json(summarize(RMatrix.load_csv(args.r_csv)))
        return 0
    if not args.checkpoint:
        raise ConfigError("evaluate needs --r-csv or --checkpoint")
    net = load_network(args.checkpoint)
    stream = _stream(args, cfg)
    rows = {}
    for task in stream:
        if not set(task.class_ids) <= set(net.classes):
            continue
        rows[task.task_id] = H.accuracy(net, *stream.test_set(task.task_id))
    _print_json({"per_task_accuracy": rows, "acc": float(np.mean(list(rows.values()))) if rows else None})
    return 0


def _write_sweep(out: Path, rows: list[dict], key: str) -> None:
    with (out / "runs.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    summary = H.average_by(rows, key)
    (out / "summary.json").write_text(json.dumps({str(k): v for k, v in summary.items()}, indent=2) + "\n")
    for k, stats in summary.items():
        print(f"{key}={k}: acc {stats['acc']:.4f} +- {stats['acc_std']:.4f}, bwt {stats['bwt']:.4f}")


def cmd_ablate_alpha(args, cfg) -> int:
    rows = H.ablate_alpha(cfg, _float_list(args.alphas), _int_list(args.seeds))
    _write_sweep(_out_dir(cfg, "ablate_alpha"), rows, "alpha")
    return 0


def cmd_sweep_memory(args, cfg) -> int:
    rows = H.sweep_memory(cfg, _int_list(args.budgets), _int_list(args.seeds))
    _write_sweep(_out_dir(cfg, "sweep_memory"), rows, "memory_budget")
    return 0


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfa", description="Class-incremental learning by teacher amalgamation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "build a task stream and save it").add_argument("--out", required=True)
    p = add("train-teachers", cmd_train_teachers, "train per-task teachers and fill the replay memory")
    p = add("amalgamate", cmd_amalgamate, "amalgamate saved teachers into one student")
    p.add_argument("--teachers", required=True, help="directory holding teacher_<i> checkpoints")
    p.add_argument("--memory", required=True, help="saved replay memory")
    add("baseline-naive", cmd_baseline_naive, "sequential fine-tuning without forgetting mitigation")
    add("baseline-joint", cmd_baseline_joint, "offline training on all tasks (upper bound)")
    p = add("evaluate", cmd_evaluate, "metrics from an R.csv, or per-task accuracy of a checkpoint")
    p.add_argument("--r-csv")
    p.add_argument("--checkpoint")
    add("run", cmd_run, "full CFA pipeline with R matrix and metrics")
    p = add("ablate-alpha", cmd_ablate_alpha, "sweep the loss blend alpha")
    p.add_argument("--alphas", default="1.0,0.5,0.0")
    p.add_argument("--seeds", default="0")
    p = add("sweep-memory", cmd_sweep_memory, "sweep the replay memory budget")
    p.add_argument("--budgets", default="50,100,200,400")
    p.add_argument("--seeds", default="0")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except CFAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
