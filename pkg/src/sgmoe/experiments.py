"""Simulation studies: convergence-rate curves and selection-frequency tables.

Both study runners share the same execution model: the work is a flat list
of replications keyed by (size index, rep index), every replication derives
its own seed from the study seed, completed replications can be persisted
to a checkpoint CSV and are skipped on resume, and aggregation is a
deterministic reduce over sorted keys. Worker scheduling therefore cannot
change any reported number.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datagen import GenConfig, builtin_truths, derive_seed, sample
from .dendrogram import build_path
from .errors import InputError, NumericError
from .estimation import FitConfig, em_fit, init_kmeans, init_perturbed
from .metrics import vde, vdfra, vdo
from .selection import (METHODS, argmin_level, criterion_scores,
                        dsc_select)

LOSSES = {"vde": vde, "vdo": vdo, "vdfra": vdfra}
SETTINGS = ("exact", "overfit", "merged")
PRESET_NAMES = ("fig3a", "fig3b", "fig3c", "fig4", "fig5")


def resolve_workers(configured: int | None = None) -> int:
    """Worker count: SGMOE_THREADS env var wins, then config, then CPUs."""
    env = os.environ.get("SGMOE_THREADS")
    if env is not None:
        try:
            workers = int(env)
        except ValueError:
            raise InputError(f"SGMOE_THREADS must be an integer, got {env!r}")
        if workers < 1:
            raise InputError(f"SGMOE_THREADS must be >= 1, got {workers}")
        return workers
    if configured is not None:
        return configured
    return os.cpu_count() or 1


def log_size_grid(n_min: int, n_max: int, count: int) -> tuple[int, ...]:
    """`count` sample sizes spaced evenly in log10 between the endpoints."""
    if count < 1:
        raise InputError(f"size count must be >= 1, got {count}")
    if not 1 <= n_min <= n_max:
        raise InputError(f"need 1 <= n_min <= n_max, got [{n_min}, {n_max}]")
    grid = np.logspace(math.log10(n_min), math.log10(n_max), count)
    return tuple(int(round(x)) for x in grid)


def slope_fit(points: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Least-squares slope and intercept of log(value) against log(N)."""
    pts = list(points)
    if len(pts) < 3:
        raise InputError(f"slope fit needs at least 3 points, got {len(pts)}")
    ns = np.array([p[0] for p in pts], dtype=float)
    vs = np.array([p[1] for p in pts], dtype=float)
    if np.any(ns <= 0) or np.any(vs <= 0):
        raise InputError("slope fit needs positive sizes and values")
    coeffs = np.polyfit(np.log(ns), np.log(vs), 1)
    return float(coeffs[0]), float(coeffs[1])


# ---------------------------------------------------------------------------
# rate study

@dataclass(frozen=True)
class RateStudyConfig:
    """Convergence-rate study: loss to the truth as N grows.

    `setting` picks the estimator: "exact" fits the true number of experts,
    "overfit" fits `fit_k` experts, "merged" fits `fit_k` and then merges
    down the aggregation path to the true size. Every fit starts from a
    perturbed copy of the truth (scale em.init_scale); em.K, em.seed and
    em.init are ignored, replication seeds derive from `seed`.
    """
    truth: str = "g0_2"
    setting: str = "exact"
    fit_k: int = 4
    n_min: int = 100
    n_max: int = 10_000
    n_count: int = 12
    reps: int = 10
    loss: str = "vde"
    em: FitConfig = field(default_factory=FitConfig)
    seed: int = 0
    workers: int | None = None

    def __post_init__(self):
        registry = builtin_truths()
        if self.truth not in registry:
            raise InputError(f"unknown truth {self.truth!r}")
        if self.setting not in SETTINGS:
            raise InputError(f"unknown setting {self.setting!r}")
        if self.loss not in LOSSES:
            raise InputError(f"unknown loss {self.loss!r}")
        if self.reps < 1:
            raise InputError(f"reps must be >= 1, got {self.reps}")
        k0 = registry[self.truth].n_atoms
        if self.setting != "exact" and self.fit_k < k0:
            raise InputError(
                f"fit_k must be >= the true size {k0}, got {self.fit_k}")
        if self.n_min < 10 * self.fit_size():
            raise InputError(
                f"n_min must be >= 10*K = {10 * self.fit_size()}")
        if self.workers is not None and self.workers < 1:
            raise InputError("workers must be >= 1")
        log_size_grid(self.n_min, self.n_max, self.n_count)  # validates

    def fit_size(self) -> int:
        if self.setting == "exact":
            return builtin_truths()[self.truth].n_atoms
        return self.fit_k

    def sizes(self) -> tuple[int, ...]:
        return log_size_grid(self.n_min, self.n_max, self.n_count)


@dataclass(frozen=True)
class RateRow:
    n: int
    mean_loss: float
    std_loss: float
    reps_used: int


@dataclass(frozen=True)
class RateStudyResult:
    """Per-size loss summaries plus the fitted log-log slope.

    In the merged setting the over-sized fit is a free by-product, so its
    fast-rate-aware loss curve is reported alongside under raw_*.
    """
    rows: tuple[RateRow, ...]
    slope: float
    intercept: float
    skipped: int
    raw_rows: tuple[RateRow, ...] = ()
    raw_slope: float = math.nan
    raw_intercept: float = math.nan


def _rate_replication(cfg: RateStudyConfig, n_index: int, n: int,
                      rep: int) -> tuple[str, float | None, float | None]:
    """One dataset, one fit, one loss value. Returns (status, loss, raw)."""
    truth = builtin_truths()[cfg.truth]
    data = sample(truth, GenConfig(n=n, seed=derive_seed(cfg.seed, n_index,
                                                         rep, 0)))
    k = cfg.fit_size()
    init = init_perturbed(truth, k, cfg.em.init_scale,
                          derive_seed(cfg.seed, n_index, rep, 1),
                          gate_scale=cfg.em.init_gate_scale)
    try:
        fit = em_fit(data, replace(cfg.em, K=k), init)
        model = fit.model
        raw_loss = None
        if cfg.setting == "merged":
            raw_loss = vdfra(model, truth)
            model = build_path(model).level(truth.n_atoms)
        loss = LOSSES[cfg.loss](model, truth)
    except NumericError:
        return "skip", None, None
    return "ok", loss, raw_loss


def _aggregate_rate(sizes, reps, results):
    rows = []
    skipped = 0
    for i, n in enumerate(sizes):
        losses = [results[(i, r)][1] for r in range(reps)
                  if results[(i, r)][0] == "ok"]
        skipped += reps - len(losses)
        mean = float(np.mean(losses)) if losses else math.nan
        std = float(np.std(losses, ddof=1)) if len(losses) > 1 else 0.0
        rows.append(RateRow(n=n, mean_loss=mean, std_loss=std,
                            reps_used=len(losses)))
    return tuple(rows), skipped


def _curve_slope(rows: tuple[RateRow, ...]) -> tuple[float, float]:
    pts = [(row.n, row.mean_loss) for row in rows
           if row.reps_used > 0 and row.mean_loss > 0]
    if len(pts) < 3:
        return math.nan, math.nan
    return slope_fit(pts)


RATE_FIELDS = ("n_index", "n", "rep", "status", "loss", "raw_loss")


def _load_checkpoint(path, fields) -> tuple[dict, bool]:
    """Completed rows keyed by (n_index, rep), plus a truncated-tail flag.

    A run killed mid-write leaves a partial final line; that replication is
    simply recomputed, and the caller rewrites the file so the partial line
    cannot end up stranded in the middle of later appends.
    """
    done: dict[tuple[int, int], dict] = {}
    if path is None:
        return done, False
    path = Path(path)
    if not path.exists():
        return done, False
    with open(path, newline="") as fh:
        raw = list(csv.reader(fh))
    if not raw:
        return done, False
    if tuple(raw[0]) != tuple(fields):
        raise InputError(f"checkpoint {path} has a different column layout")
    truncated = False
    for i, row in enumerate(raw[1:]):
        if len(row) != len(fields):
            if i == len(raw) - 2:
                truncated = True
                break
            raise InputError(f"malformed checkpoint row {i + 2} in {path}")
        rec = dict(zip(fields, row))
        done[(int(rec["n_index"]), int(rec["rep"]))] = rec
    return done, truncated


class _CheckpointWriter:
    """Append-only CSV of finished replications, flushed per row."""

    def __init__(self, path, fields, rewrite=None):
        self.fields = fields
        path = Path(path)
        if rewrite is not None:
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(fields)
                for rec in rewrite:
                    w.writerow([rec[f] for f in fields])
        fresh = not path.exists() or path.stat().st_size == 0
        self.fh = open(path, "a", newline="")
        self.writer = csv.writer(self.fh)
        if fresh:
            self.writer.writerow(fields)
            self.fh.flush()

    def write(self, rec: dict):
        self.writer.writerow([rec[f] for f in self.fields])
        self.fh.flush()

    def close(self):
        self.fh.close()


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _parse(s: str) -> float | None:
    return None if s == "" else float(s)


def _run_jobs(jobs, worker: Callable, workers: int, on_done: Callable):
    """Execute (key, args) jobs inline or on a process pool."""
    if workers <= 1 or len(jobs) <= 1:
        for key, args in jobs:
            on_done(key, worker(*args))
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(worker, *args): key for key, args in jobs}
        for fut in as_completed(futures):
            on_done(futures[fut], fut.result())


def run_rate_study(cfg: RateStudyConfig,
                   checkpoint: str | Path | None = None) -> RateStudyResult:
    """Run (or resume) a rate study; fails if more than 10% of reps skip."""
    sizes = cfg.sizes()
    done, truncated = _load_checkpoint(checkpoint, RATE_FIELDS)
    results: dict[tuple[int, int], tuple] = {}
    for (i, r), rec in done.items():
        if i >= len(sizes) or r >= cfg.reps or int(rec["n"]) != sizes[i]:
            raise InputError(
                "checkpoint does not match this configuration's grid")
        results[(i, r)] = (rec["status"], _parse(rec["loss"]),
                           _parse(rec["raw_loss"]))
    jobs = [((i, r), (cfg, i, n, r))
            for i, n in enumerate(sizes) for r in range(cfg.reps)
            if (i, r) not in results]

    writer = None
    if checkpoint is not None:
        writer = _CheckpointWriter(
            checkpoint, RATE_FIELDS,
            rewrite=list(done.values()) if truncated else None)

    def on_done(key, out):
        status, loss, raw = out
        results[key] = out
        if writer is not None:
            writer.write({"n_index": key[0], "n": sizes[key[0]],
                          "rep": key[1], "status": status,
                          "loss": _fmt(loss), "raw_loss": _fmt(raw)})

    try:
        _run_jobs(jobs, _rate_replication, resolve_workers(cfg.workers),
                  on_done)
    finally:
        if writer is not None:
            writer.close()

    rows, skipped = _aggregate_rate(sizes, cfg.reps, results)
    total = len(sizes) * cfg.reps
    if skipped > 0.10 * total:
        raise NumericError(
            f"{skipped} of {total} replications failed; study aborted")
    slope, intercept = _curve_slope(rows)
    raw_rows: tuple[RateRow, ...] = ()
    raw_slope = raw_intercept = math.nan
    if cfg.setting == "merged":
        raw_results = {k: (v[0], v[2], None) for k, v in results.items()}
        raw_rows, _ = _aggregate_rate(sizes, cfg.reps, raw_results)
        raw_slope, raw_intercept = _curve_slope(raw_rows)
    return RateStudyResult(rows=rows, slope=slope, intercept=intercept,
                           skipped=skipped, raw_rows=raw_rows,
                           raw_slope=raw_slope, raw_intercept=raw_intercept)


# ---------------------------------------------------------------------------
# selection study

@dataclass(frozen=True)
class SelectionStudyConfig:
    """Selection-frequency study comparing the dendrogram criterion with
    penalized-likelihood sweeps on the same data.

    Per replication the sweep fits sizes 1..kmax (perturbed-truth start at
    or above the true size, k-means start below it, where the perturbation
    recipe is undefined); the dendrogram criterion reads the kmax fit only.
    em.K, em.seed and em.init are ignored, as in the rate study.
    """
    truth: str = "g0_2"
    n_min: int = 1_000
    n_max: int = 10_000
    n_count: int = 4
    reps: int = 10
    kmax: int = 4
    methods: tuple[str, ...] = METHODS
    contamination_eps: float = 0.0
    epsilon_n: float | None = None
    em: FitConfig = field(default_factory=FitConfig)
    seed: int = 0
    workers: int | None = None

    def __post_init__(self):
        registry = builtin_truths()
        if self.truth not in registry:
            raise InputError(f"unknown truth {self.truth!r}")
        k0 = registry[self.truth].n_atoms
        if self.kmax < max(2, k0):
            raise InputError(f"kmax must be >= max(2, {k0}), got {self.kmax}")
        if not self.methods:
            raise InputError("methods must not be empty")
        for m in self.methods:
            if m not in METHODS:
                raise InputError(f"unknown selection method {m!r}")
        if len(set(self.methods)) != len(self.methods):
            raise InputError("duplicate selection method")
        if self.reps < 1:
            raise InputError(f"reps must be >= 1, got {self.reps}")
        if not 0.0 <= self.contamination_eps < 1.0:
            raise InputError("contamination_eps must lie in [0, 1)")
        if self.epsilon_n is not None and self.epsilon_n <= 0.0:
            raise InputError("epsilon_n must be > 0")
        if self.n_min < 10 * self.kmax:
            raise InputError(f"n_min must be >= 10*kmax = {10 * self.kmax}")
        if self.workers is not None and self.workers < 1:
            raise InputError("workers must be >= 1")
        log_size_grid(self.n_min, self.n_max, self.n_count)

    def sizes(self) -> tuple[int, ...]:
        return log_size_grid(self.n_min, self.n_max, self.n_count)


@dataclass(frozen=True)
class SelectionRow:
    n: int
    method: str
    proportion_correct: float
    mean_chosen: float
    reps_used: int


@dataclass(frozen=True)
class SelectionStudyResult:
    rows: tuple[SelectionRow, ...]
    true_k: int
    skipped: int


def _selection_replication(cfg: SelectionStudyConfig, n_index: int, n: int,
                           rep: int) -> tuple[str, dict[str, int]]:
    """Chosen size per method for one dataset; any EM failure skips the rep."""
    truth = builtin_truths()[cfg.truth]
    k0 = truth.n_atoms
    data = sample(truth, GenConfig(
        n=n, seed=derive_seed(cfg.seed, n_index, rep, 0),
        contamination_eps=cfg.contamination_eps))
    want_sweep = any(m != "dsc" for m in cfg.methods)
    ks = list(range(1, cfg.kmax + 1)) if want_sweep else [cfg.kmax]
    try:
        fits = {}
        for k in ks:
            init_seed = derive_seed(cfg.seed, n_index, rep, 1, k)
            if k >= k0:
                init = init_perturbed(truth, k, cfg.em.init_scale, init_seed,
                                      gate_scale=cfg.em.init_gate_scale)
            else:
                init = init_kmeans(data, k, init_seed,
                                   sigma_floor=cfg.em.sigma_floor)
            fits[k] = em_fit(data, replace(cfg.em, K=k), init)
        chosen: dict[str, int] = {}
        if "dsc" in cfg.methods:
            dg = build_path(fits[cfg.kmax].model)
            chosen["dsc"] = dsc_select(dg, data, cfg.epsilon_n).chosen
        if want_sweep:
            sweep = [fits[k] for k in ks]
            for m in cfg.methods:
                if m == "dsc":
                    continue
                chosen[m] = argmin_level(
                    criterion_scores(sweep, data, m))
    except NumericError:
        return "skip", {}
    return "ok", chosen


def selection_fields(methods) -> tuple[str, ...]:
    return ("n_index", "n", "rep", "status") + tuple(methods)


def run_selection_study(cfg: SelectionStudyConfig,
                        checkpoint: str | Path | None = None,
                        ) -> SelectionStudyResult:
    """Run (or resume) a selection study over the configured size grid."""
    sizes = cfg.sizes()
    k0 = builtin_truths()[cfg.truth].n_atoms
    fields = selection_fields(cfg.methods)
    done, truncated = _load_checkpoint(checkpoint, fields)
    results: dict[tuple[int, int], tuple[str, dict[str, int]]] = {}
    for (i, r), rec in done.items():
        if i >= len(sizes) or r >= cfg.reps or int(rec["n"]) != sizes[i]:
            raise InputError(
                "checkpoint does not match this configuration's grid")
        picks = {m: int(rec[m]) for m in cfg.methods if rec[m] != ""}
        results[(i, r)] = (rec["status"], picks)
    jobs = [((i, r), (cfg, i, n, r))
            for i, n in enumerate(sizes) for r in range(cfg.reps)
            if (i, r) not in results]

    writer = None
    if checkpoint is not None:
        writer = _CheckpointWriter(
            checkpoint, fields,
            rewrite=list(done.values()) if truncated else None)

    def on_done(key, out):
        status, picks = out
        results[key] = out
        if writer is not None:
            rec = {"n_index": key[0], "n": sizes[key[0]], "rep": key[1],
                   "status": status}
            rec.update({m: str(picks[m]) if m in picks else ""
                        for m in cfg.methods})
            writer.write(rec)

    try:
        _run_jobs(jobs, _selection_replication, resolve_workers(cfg.workers),
                  on_done)
    finally:
        if writer is not None:
            writer.close()

    rows = []
    skipped = 0
    for i, n in enumerate(sizes):
        used = [results[(i, r)][1] for r in range(cfg.reps)
                if results[(i, r)][0] == "ok"]
        skipped += cfg.reps - len(used)
        for m in cfg.methods:
            picks = [p[m] for p in used]
            correct = (float(np.mean([p == k0 for p in picks]))
                       if picks else math.nan)
            mean_chosen = float(np.mean(picks)) if picks else math.nan
            rows.append(SelectionRow(n=n, method=m,
                                     proportion_correct=correct,
                                     mean_chosen=mean_chosen,
                                     reps_used=len(picks)))
    total = len(sizes) * cfg.reps
    if skipped > 0.10 * total:
        raise NumericError(
            f"{skipped} of {total} replications failed; study aborted")
    return SelectionStudyResult(rows=tuple(rows), true_k=k0, skipped=skipped)


# ---------------------------------------------------------------------------
# paper-scale presets

def preset(name: str):
    """Full-size study configurations; the defaults above are desk scale."""
    if name == "fig3a":
        return RateStudyConfig(truth="g0_2", setting="exact",
                               n_min=100, n_max=50_000, n_count=100,
                               reps=30, loss="vdfra", seed=0,
                               em=FitConfig(init_scale=0.0))
    if name == "fig3b":
        return RateStudyConfig(truth="g0_2", setting="overfit", fit_k=4,
                               n_min=338, n_max=100_000, n_count=165,
                               reps=40, loss="vdfra", seed=0,
                               em=FitConfig(init_scale=0.0))
    if name == "fig3c":
        return RateStudyConfig(truth="g0_2", setting="merged", fit_k=4,
                               n_min=100, n_max=100_000, n_count=200,
                               reps=40, loss="vdfra", seed=0,
                               em=FitConfig(init_scale=0.0))
    if name == "fig4":
        return SelectionStudyConfig(truth="g0_2", n_min=1_000, n_max=50_000,
                                    n_count=32, reps=25, kmax=4, seed=0)
    if name == "fig5":
        return SelectionStudyConfig(truth="g0_2", n_min=1_000, n_max=50_000,
                                    n_count=32, reps=25, kmax=4,
                                    contamination_eps=0.05, seed=0)
    raise InputError(f"unknown preset {name!r}")
