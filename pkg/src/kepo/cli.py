"""Command-line entry point: ``kepo run|compare|eval|selftest``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import env
from .config import ConfigError, ExperimentConfig, load_config
from .policy import load_snapshot, save_snapshot
from .trainer import RunResult, TrainingDiverged, evaluate, train_run

log = logging.getLogger("kepo")

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_USAGE = 4

COMPARE_COLUMNS = ("label", "method", "seed", "step", "id_accuracy", "ood_mean",
                   "triggered_fraction", "reward_positive_group_fraction")


def _artifacts(cfg: ExperimentConfig, ts: env.TaskSet, result: RunResult) -> dict[str, bytes]:
    files = {
        "metrics.jsonl": result.metrics.steps_jsonl().encode(),
        "checkpoints.csv": result.metrics.checkpoint_csv().encode(),
        "config.resolved.yaml": cfg.to_yaml().encode(),
    }
    with tempfile.TemporaryDirectory() as tmp:
        save_snapshot(result.policy, Path(tmp) / "w")
        files["weights.bin"] = (Path(tmp) / "w").read_bytes()
        env.save_task_set(ts, Path(tmp) / "t")
        files["taskset.jsonl"] = (Path(tmp) / "t").read_bytes()
    if cfg.train.trace:
        files["trace.jsonl"] = "".join(json.dumps(r, sort_keys=True) + "\n"
                                       for r in result.trace).encode()
    return files


def _publish(files: dict[str, bytes], out_dir: Path) -> None:
    """Write everything into a sibling temp dir, then move it into place."""
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        for name, data in files.items():
            (tmp / name).write_bytes(data)
        if out_dir.exists():
            for name in files:
                os.replace(tmp / name, out_dir / name)
        else:
            os.replace(tmp, out_dir)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def execute(cfg: ExperimentConfig, out_dir: Optional[Path] = None) -> RunResult:
    """Train one config and publish its artifacts; raises on divergence."""
    if out_dir is not None:
        cfg = dataclasses.replace(cfg, output_dir=str(out_dir))
    ts = cfg.task.build()
    result = train_run(ts, cfg.train_config(), trace=cfg.train.trace)
    _publish(_artifacts(cfg, ts, result), Path(out_dir or cfg.output_dir))
    return result


def _summary(result: RunResult) -> str:
    last = result.metrics.checkpoints[-1]
    return (f"step {last['step']}: id_accuracy={last['id_accuracy']:.3f} "
            f"ood_mean={last['ood_accuracy_mean']:.3f}")


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.output_dir or cfg.output_dir)
    try:
        result = execute(cfg, out)
    except TrainingDiverged as exc:
        print(f"error: {exc}; last metrics: {json.dumps(exc.last_metrics)}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"{cfg.method} seed {cfg.train.seed} -> {out}: {_summary(result)}")
    return 0


def _parse_seeds(values: Sequence[str]) -> list[int]:
    seeds = []
    for v in values:
        for part in v.split(","):
            if part.strip():
                seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds given")
    if len(set(seeds)) != len(seeds):
        raise ValueError("duplicate seeds")
    return seeds


def _compare_rows(label: str, cfg: ExperimentConfig, result: RunResult) -> list[dict]:
    steps = result.metrics.steps
    rows = []
    for c in result.metrics.checkpoints:
        # rollout statistics of the same policy the checkpoint evaluated
        s = steps[min(c["step"], len(steps) - 1)]
        rows.append({
            "label": label, "method": cfg.method, "seed": cfg.train.seed, "step": c["step"],
            "id_accuracy": c["id_accuracy"], "ood_mean": c["ood_accuracy_mean"],
            "triggered_fraction": s["triggered_fraction"],
            "reward_positive_group_fraction": s["reward_positive_group_fraction"],
        })
    return rows


def _compare_job(job: tuple[str, ExperimentConfig, str]) -> tuple[str, int, list[dict] | str]:
    label, cfg, out = job
    try:
        result = execute(cfg, Path(out))
    except TrainingDiverged as exc:
        return label, cfg.train.seed, str(exc)
    return label, cfg.train.seed, _compare_rows(label, cfg, result)


def _labels(paths: Sequence[str], cfgs: Sequence[ExperimentConfig]) -> list[str]:
    methods = [c.method for c in cfgs]
    if len(set(methods)) == len(methods):
        return methods
    stems = [Path(p).stem for p in paths]
    if len(set(stems)) != len(stems):
        raise ValueError("configs share both method and file name; rename one")
    return stems


def mean_curves(rows: Sequence[dict]) -> list[dict]:
    keys = ("id_accuracy", "ood_mean", "triggered_fraction", "reward_positive_group_fraction")
    groups: dict[tuple[str, int], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["label"], r["step"]), []).append(r)
    out = []
    for (label, step), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        rec = {"label": label, "method": rs[0]["method"], "step": step, "n_seeds": len(rs)}
        rec.update({k: float(np.mean([r[k] for r in rs])) for k in keys})
        out.append(rec)
    return out


def _csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items() if k in columns})
    return buf.getvalue()


def cmd_compare(args: argparse.Namespace) -> int:
    if len(args.configs) < 2:
        print("error: compare needs at least two configs", file=sys.stderr)
        return EXIT_USAGE
    try:
        seeds = _parse_seeds(args.seeds)
    except ValueError as exc:
        print(f"error: --seeds: {exc}", file=sys.stderr)
        return EXIT_USAGE
    cfgs = []
    for p in args.configs:
        try:
            cfgs.append(load_config(p))
        except ConfigError as exc:
            print(f"error: invalid config {p}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    tasks = {c.task for c in cfgs}
    if len(tasks) > 1:
        seeds_seen = sorted({t.seed for t in tasks})
        what = f"task seeds {seeds_seen}" if len(seeds_seen) > 1 else "task settings"
        print(f"error: configs use different {what}; runs on different task data "
              "cannot be compared", file=sys.stderr)
        return EXIT_CONFIG
    try:
        labels = _labels(args.configs, cfgs)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    jobs = [(label, cfg.with_seed(s), str(out / label / f"seed{s}"))
            for label, cfg in zip(labels, cfgs) for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_compare_job, jobs))
    else:
        results = [_compare_job(j) for j in jobs]
    rows: list[dict] = []
    failed = []
    for label, seed, res in results:
        if isinstance(res, str):
            failed.append(f"{label} seed {seed}: {res}")
        else:
            rows += res
    curves = mean_curves(rows)
    _publish({
        "compare.csv": _csv(rows, COMPARE_COLUMNS).encode(),
        "curves.csv": _csv(curves, ("label", "method", "step", "n_seeds", *COMPARE_COLUMNS[4:])).encode(),
    }, out)
    finals: dict[str, dict] = {}
    for c in curves:
        finals[c["label"]] = c
    for label, c in finals.items():
        print(f"{label:>12}  step {c['step']:>4}  id {c['id_accuracy']:.3f}  ood {c['ood_mean']:.3f}  "
              f"(mean of {c['n_seeds']} seeds)")
    print(f"{len(jobs)} runs -> {out / 'compare.csv'}")
    if failed:
        for f in failed:
            print(f"error: {f}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        snap = load_snapshot(args.weights)
        ts = env.load_task_set(args.taskset)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    rng = np.random.default_rng(args.seed)
    acc = evaluate(snap, ts.eval_splits, args.episodes, rng)
    ood = [v for k, v in acc.items() if k != "ID"]
    report = {"accuracy": acc, "ood_accuracy_mean": float(np.mean(ood)) if ood else None}
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_selftest(args: argparse.Namespace) -> int:
    from .selftest import run_all

    return 0 if run_all() else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kepo", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one config and write its artifacts")
    r.add_argument("config")
    r.add_argument("--output-dir", help="override output_dir from the config")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run several configs over seeds and merge the curves")
    c.add_argument("configs", nargs="+")
    c.add_argument("--seeds", nargs="+", required=True, help="e.g. 0,1,2 or 0 1 2")
    c.add_argument("--out", default="runs/compare")
    c.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    c.set_defaults(func=cmd_compare)

    e = sub.add_parser("eval", help="greedy accuracy of saved weights on a saved task set")
    e.add_argument("weights")
    e.add_argument("taskset")
    e.add_argument("--episodes", type=int, default=1)
    e.add_argument("--seed", type=int, default=0, help="tie-break stream for greedy decoding")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftest", help="run the built-in invariant checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
