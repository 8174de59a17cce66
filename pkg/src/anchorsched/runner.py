"""Artifact layer for the protocol: per-cell checkpoints, logs, rows, report and manifest.

Output directory layout::

    manifest.json                    effective config, hash, seed, code version, status
    metrics.csv                      one row per (scheduler, repetition)
    report.json                      BS-normalized summary
    checkpoints/rep{r}/{id}.ckpt.npz final agent of each cell
    logs/rep{r}_{id}.jsonl           per-episode training summaries
    cells/rep{r}_{id}.json           evaluation row of each finished cell

A cell counts as finished once its row file exists; rerunning into the same
directory skips finished cells, so an interrupted run resumes where it stopped.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from pathlib import Path

from . import __version__
from .agent import Agent
from .config import RunConfig
from .experiment import (
    ProtocolError,
    aggregate,
    build_protocol,
    derive_seed,
    evaluate,
    topological_order,
    train,
)

log = logging.getLogger(__name__)

CSV_HEADER = [
    "scheduler", "repetition", "seed", "eval_reward_mean", "capacity_sum", "timeouts_normal",
    "timeouts_prio", "prio_events", "reward_norm_bs", "prio_timeout_norm_bs",
]


def tune_allocator() -> None:
    """Keep numpy's per-step temporaries on the heap instead of fresh mmaps (glibc only)."""
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 24)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 27)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


def _slug(scheduler: str) -> str:
    return scheduler.replace("+", "plus")


def checkpoint_path(out: Path, repetition: int, scheduler: str) -> Path:
    return Path(out) / "checkpoints" / f"rep{repetition}" / f"{_slug(scheduler)}.ckpt.npz"


def log_path(out: Path, repetition: int, scheduler: str) -> Path:
    return Path(out) / "logs" / f"rep{repetition}_{_slug(scheduler)}.jsonl"


def cell_path(out: Path, repetition: int, scheduler: str) -> Path:
    return Path(out) / "cells" / f"rep{repetition}_{_slug(scheduler)}.json"


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def train_cell(cfg: RunConfig, out: Path, repetition: int, scheduler: str) -> Agent:
    """Train one scheduler, loading its dependencies from ``out``; writes checkpoint and log."""
    exp = cfg.experiment_config()
    specs = {s.id: s for s in build_protocol(exp)}
    if scheduler not in specs:
        raise ProtocolError(f"unknown scheduler {scheduler!r}")
    spec = specs[scheduler]
    deps = {}
    for dep in spec.dependencies:
        path = checkpoint_path(out, repetition, dep)
        if not path.exists():
            raise ProtocolError(f"{scheduler} needs the {dep} checkpoint, missing: {path}")
        deps[dep] = Agent.load(path)

    lp = log_path(out, repetition, scheduler)
    lp.parent.mkdir(parents=True, exist_ok=True)
    with open(lp, "w") as fh:
        def on_episode(row):
            fh.write(json.dumps(row) + "\n")
            fh.flush()
        agent, _ = train(spec, exp, cfg.seed, repetition, deps, on_episode)
    ckpt = checkpoint_path(out, repetition, scheduler)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    agent.save(ckpt)
    return agent


def eval_agent(cfg: RunConfig, agent: Agent, seed: int, scheduler: str, repetition: int) -> dict:
    exp = cfg.experiment_config()
    row = evaluate(agent, exp.evaluation, exp.env, seed)
    return {"scheduler": scheduler, "repetition": repetition, **row}


def run_cell(cfg_data: dict, out: str, repetition: int, scheduler: str) -> dict:
    cfg = RunConfig(cfg_data)
    out = Path(out)
    agent = train_cell(cfg, out, repetition, scheduler)
    seed = derive_seed(cfg.seed, repetition, f"{scheduler}/eval")
    row = eval_agent(cfg, agent, seed, scheduler, repetition)
    _atomic_write(cell_path(out, repetition, scheduler), json.dumps(row))
    return row


def _worker_init() -> None:
    tune_allocator()
    logging.basicConfig(level=logging.WARNING)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, CSV_HEADER, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in CSV_HEADER})
    return buf.getvalue()


def write_manifest(cfg: RunConfig, out: Path, status: str) -> None:
    manifest = {
        "config": cfg.data,
        "config_hash": cfg.hash(),
        "master_seed": cfg.seed,
        "code_version": __version__,
        "status": status,
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, sort_keys=True, indent=2))


def _check_resumable(cfg: RunConfig, out: Path) -> None:
    path = out / "manifest.json"
    if not path.exists():
        return
    previous = json.loads(path.read_text())
    if previous.get("config_hash") != cfg.hash():
        raise ProtocolError(f"{out} holds a run with a different configuration; choose another --out")


def collect_rows(out: Path, cfg: RunConfig) -> list[dict]:
    order = [s.id for s in build_protocol(cfg.experiment_config())]
    rows = []
    for rep in range(cfg.experiment_config().repetitions):
        for sid in order:
            path = cell_path(out, rep, sid)
            if path.exists():
                rows.append(json.loads(path.read_text()))
    return rows


def write_report(cfg: RunConfig, out: Path) -> dict:
    rows = collect_rows(out, cfg)
    report = aggregate(rows)
    report["config_hash"] = cfg.hash()
    report["master_seed"] = cfg.seed
    _atomic_write(out / "metrics.csv", rows_to_csv(rows))
    _atomic_write(out / "report.json", json.dumps(report, sort_keys=True, indent=2))
    return report


def reproduce(cfg: RunConfig, out: Path | None = None, jobs: int = 1) -> dict:
    """Train and evaluate every (scheduler, repetition) cell, then aggregate."""
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _check_resumable(cfg, out)
    write_manifest(cfg, out, "running")

    exp = cfg.experiment_config()
    specs = topological_order(build_protocol(exp))
    deps = {s.id: s.dependencies for s in specs}
    todo = [(rep, s.id) for rep in range(exp.repetitions) for s in specs]
    done = {(rep, sid) for rep, sid in todo if cell_path(out, rep, sid).exists()}
    pending = [c for c in todo if c not in done]
    if done:
        log.info("resuming: %d of %d cells already finished", len(done), len(todo))

    def ready(cell):
        rep, sid = cell
        return all((rep, d) in done for d in deps[sid])

    if jobs <= 1:
        tune_allocator()
        for rep, sid in pending:
            log.info("cell rep %d %s", rep, sid)
            run_cell(cfg.data, str(out), rep, sid)
            done.add((rep, sid))
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init) as pool:
            running = {}
            while pending or running:
                for cell in [c for c in pending if ready(c)]:
                    if len(running) >= jobs:
                        break
                    pending.remove(cell)
                    running[pool.submit(run_cell, cfg.data, str(out), *cell)] = cell
                finished, _ = wait(running, return_when=FIRST_COMPLETED)
                for fut in finished:
                    cell = running.pop(fut)
                    fut.result()
                    done.add(cell)
                    log.info("finished cell rep %d %s", *cell)

    report = write_report(cfg, out)
    write_manifest(cfg, out, "complete")
    return report


def default_jobs() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)
