"""Ablation sweeps over PCGU's k and the task-vector scale, written as CSV."""

from __future__ import annotations

import csv
import dataclasses
import time
from typing import Callable, Sequence

from .datasets import BiasEvalPair, ContrastivePair, MCItem
from .errors import ConfigError, DataError
from .evaluation import EvalReport, evaluate
from .model import ParameterSet
from .pcgu import PCGUConfig, run_pcgu
from .taskvec import apply_task_vector

SWEEP_COLUMNS = ("method", "knob", "bias_score", "delta", "perplexity", "mc_accuracy", "runtime_seconds", "seed")
K_GRID = (0.2, 0.25, 0.3, 0.35, 0.4)


@dataclasses.dataclass(frozen=True)
class EvalSet:
    pairs: Sequence[BiasEvalPair]
    ppl_docs: Sequence[Sequence[int]]
    mc_items: Sequence[MCItem]

    def run(self, params: ParameterSet) -> EvalReport:
        return evaluate(params, self.pairs, self.ppl_docs, self.mc_items)


@dataclasses.dataclass(frozen=True)
class SweepRow:
    method: str
    knob: float
    bias_score: float
    delta: float
    perplexity: float
    mc_accuracy: float
    runtime_seconds: float | None
    seed: int

    def as_csv(self) -> list[str]:
        rt = "" if self.runtime_seconds is None else f"{self.runtime_seconds:.3f}"
        return [
            self.method, repr(float(self.knob)), repr(self.bias_score), repr(self.delta),
            repr(self.perplexity), repr(self.mc_accuracy), rt, str(self.seed),
        ]


def normalize_grid(values: Sequence[float], lo: float, hi: float, what: str) -> list[float]:
    """Sorted, duplicate-free grid inside ``[lo, hi]``; rows come out in increasing knob order."""
    grid = [float(v) for v in values]
    if not grid:
        raise ConfigError(f"empty {what} grid")
    if len(set(grid)) != len(grid):
        raise ConfigError(f"duplicate values in {what} grid")
    bad = [v for v in grid if not lo <= v <= hi]
    if bad:
        raise ConfigError(f"{what} values {bad} outside [{lo}, {hi}]")
    return sorted(grid)


def _sweep(method: str, grid, make: Callable[[float], ParameterSet], evals: EvalSet, seed: int, timing: bool):
    rows = []
    for knob in grid:
        start = time.perf_counter()
        report = evals.run(make(knob))
        elapsed = time.perf_counter() - start if timing else None
        rows.append(
            SweepRow(method, knob, report.bias_score, report.delta, report.perplexity, report.mc_accuracy, elapsed, seed)
        )
    return rows


def sweep_tv(pre: ParameterSet, tv: ParameterSet, lambdas, evals: EvalSet, seed: int = 0, timing: bool = False):
    grid = normalize_grid(lambdas, 0.0, float("inf"), "lambda")
    return _sweep("tv", grid, lambda lam: apply_task_vector(pre, tv, lam, negate=True), evals, seed, timing)


def sweep_pcgu(
    base: ParameterSet,
    pairs: Sequence[ContrastivePair],
    ks,
    config: PCGUConfig,
    evals: EvalSet,
    timing: bool = False,
    runner: Callable | None = None,
):
    """Every k restarts from ``base``; ``runner`` defaults to :func:`run_pcgu`."""
    if not pairs:
        raise DataError("PCGU sweep needs contrastive pairs")
    grid = normalize_grid(ks, 0.0, 1.0, "k")
    run = runner or run_pcgu

    def make(k):
        return run(base, pairs, dataclasses.replace(config, k_fraction=k))[0]

    return _sweep("pcgu", grid, make, evals, config.seed, timing)


def write_csv(path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow(r.as_csv())


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SWEEP_COLUMNS:
            raise DataError(f"{path}: expected columns {','.join(SWEEP_COLUMNS)}")
        rows = list(reader)
    for r in rows:
        for key in ("knob", "bias_score", "delta", "perplexity", "mc_accuracy"):
            try:
                r[key] = float(r[key])
            except ValueError as exc:
                raise DataError(f"{path}: non-numeric {key} {r[key]!r}") from exc
    return rows
