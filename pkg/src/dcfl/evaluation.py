"""Weighted F1, repeated-run aggregation, experiment grids and CSV reports."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from dcfl.errors import ConfigError

if TYPE_CHECKING:
    from dcfl.dataset import Dataset
    from dcfl.orchestrator import RunConfig, RunResult

logger = logging.getLogger(__name__)

AXES = ("alpha_local", "alpha_global", "m_dc")
RESULT_COLUMNS = ["dataset", "target", "strategy", "axis", "alpha",
                  "mean_f1", "std_f1", "repeats"]
DELTA_COLUMNS = ["dataset", "target", "strategy", "axis", "alpha",
                 "delta_mean", "delta_std"]

_MODE_SUFFIX = {"none": "", "greedy": "_dc", "exhaustive": "_dcx", "random": "_rand"}


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    """``cm[true, pred]`` counts."""
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    return np.bincount(y * num_classes + p, minlength=num_classes * num_classes
                       ).reshape(num_classes, num_classes)


def weighted_f1(predictions, labels, num_classes: int) -> float:
    """Per-class F1 averaged with weights proportional to class support."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"{len(p)} predictions for {len(y)} labels")
    if p.size == 0:
        raise ValueError("cannot score an empty prediction set")
    cm = confusion_matrix(p, y, num_classes).astype(np.float64)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    denom = support + predicted
    # 2PR/(P+R) == 2TP/(2TP+FP+FN); zero when nothing was predicted or present
    f1 = np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float((f1 * support).sum() / support.sum())


@dataclass(frozen=True)
class Variant:
    """One row family of a results table: strategy x target x selection mode."""

    strategy: str
    target: str = "none"
    mode: str = "none"

    @property
    def label(self) -> str:
        return self.strategy + _MODE_SUFFIX[self.mode]


@dataclass
class ResultCell:
    dataset: str
    target: str
    strategy: str
    axis: str
    value: float
    mean_f1: float
    std_f1: float
    repeats: int
    runs: list[float] = field(default_factory=list)
    best_runs: list[float] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.failures

    @property
    def key(self) -> tuple:
        return (self.dataset, self.target, self.strategy, self.axis, self.value)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (ddof=1) std; std is 0 for a single value."""
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def expand_variants(strategies: Sequence[str], targets: Sequence[str],
                    modes: Sequence[str] = ("greedy",)) -> list[Variant]:
    """Cartesian product, with the 'none' target collapsing to a plain baseline."""
    out: list[Variant] = []
    for s in strategies:
        for t in targets:
            for mode in (["none"] if t == "none" else modes):
                v = Variant(s, t, mode)
                if v not in out:
                    out.append(v)
    return out


def _axis_config(base: RunConfig, axis: str, value) -> RunConfig:
    if axis == "alpha_local":
        return dataclasses.replace(
            base, partition=dataclasses.replace(base.partition, alpha_local=float(value)))
    if axis == "alpha_global":
        return dataclasses.replace(
            base, partition=dataclasses.replace(base.partition, alpha_global=float(value)))
    if axis == "m_dc":
        return dataclasses.replace(
            base, selection=dataclasses.replace(base.selection, m_dc=int(value)))
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {AXES}")


def _variant_config(cfg: RunConfig, v: Variant) -> RunConfig:
    from dcfl.strategies import StrategyKind

    return dataclasses.replace(
        cfg,
        strategy=dataclasses.replace(cfg.strategy, kind=StrategyKind(v.strategy)),
        selection=dataclasses.replace(cfg.selection, target_kind=v.target, mode=v.mode),
    )


def run_grid(base: RunConfig, axis: str, values: Sequence, strategies: Sequence[str],
             targets: Sequence[str], train: Dataset, test: Dataset, dataset: str = "data",
             modes: Sequence[str] = ("greedy",), repartition_per_repeat: bool = False,
             jobs: int = 1, on_run: Callable[[Variant, object, int, RunResult], None] | None = None
             ) -> list[ResultCell]:
    """Run every (variant, axis value) cell ``base.repeats`` times.

    Repeat r of every cell uses master seed ``derive_seed(base.master_seed, r,
    "repeat")``, so variants are compared on identical base-client draws. The
    partition is fixed per axis value unless ``repartition_per_repeat``.
    Headline numbers are final-round F1.
    """
    from dcfl.orchestrator import derive_seed, run_federated
    from dcfl.partition import build_federation

    if not values:
        raise ConfigError("sweep values must be non-empty")
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    variants = expand_variants(strategies, targets, modes)
    if not variants:
        raise ConfigError("sweep needs at least one strategy and target")

    feds: dict = {}

    def federation_for(cfg: RunConfig, r: int):
        pcfg = cfg.partition
        if repartition_per_repeat:
            pcfg = dataclasses.replace(pcfg, seed=derive_seed(pcfg.seed, r, "partition"))
        if pcfg not in feds:
            feds[pcfg] = build_federation(train, pcfg)
        return feds[pcfg]

    tasks = []
    for value in values:
        axis_cfg = _axis_config(base, axis, value)
        for v in variants:
            cfg = _variant_config(axis_cfg, v)
            for r in range(base.repeats):
                run_cfg = dataclasses.replace(
                    cfg, master_seed=derive_seed(base.master_seed, r, "repeat"))
                tasks.append((v, value, r, run_cfg))

    # partitions are built up front so worker threads only read them
    for _, _, r, run_cfg in tasks:
        federation_for(run_cfg, r)

    def work(task):
        v, value, r, run_cfg = task
        try:
            result = run_federated(run_cfg, federation_for(run_cfg, r), train, test)
        except Exception as exc:  # recorded per cell, the grid keeps going
            logger.warning("run failed (%s, %s=%s, repeat %d): %s",
                           v.label, axis, value, r, exc)
            return task, None, f"repeat {r}: {type(exc).__name__}: {exc}"
        if on_run is not None:
            on_run(v, value, r, result)
        return task, result, None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            outcomes = list(ex.map(work, tasks))
    else:
        outcomes = [work(t) for t in tasks]

    by_key: dict[tuple, tuple[list, list, list]] = {}
    for (v, value, _, _), result, err in outcomes:
        finals, bests, fails = by_key.setdefault((v, value), ([], [], []))
        if err is not None:
            fails.append(err)
        else:
            finals.append(result.final_f1)
            bests.append(result.best_f1)

    cells = []
    for value in values:
        for v in variants:
            finals, bests, fails = by_key[(v, value)]
            mean, std = mean_std(finals)
            cells.append(ResultCell(dataset, v.target, v.label, axis, _axis_value(value),
                                    mean, std, base.repeats, finals, bests, fails))
    return cells


def _axis_value(value) -> float:
    v = float(value)
    return int(v) if v.is_integer() else v


@dataclass(frozen=True)
class DeltaRow:
    dataset: str
    target: str
    strategy: str
    axis: str
    value: float
    delta_mean: float
    delta_std: float


def _family(strategy_label: str) -> str:
    return strategy_label.split("_", 1)[0]


def improvement_report(baseline_cells: Sequence[ResultCell],
                       dc_cells: Sequence[ResultCell]) -> list[DeltaRow]:
    """``dc - baseline`` per matching (dataset, axis, value, strategy family).

    The propagated std is ``sqrt(s_base^2 + s_dc^2)``. Rows follow the order
    and labels of ``dc_cells``.
    """
    index: dict[tuple, ResultCell] = {}
    for c in baseline_cells:
        key = (c.dataset, c.axis, c.value, _family(c.strategy))
        if key in index:
            raise ValueError(f"ambiguous baseline for {key}")
        index[key] = c
    rows = []
    for c in dc_cells:
        key = (c.dataset, c.axis, c.value, _family(c.strategy))
        if key not in index:
            raise ValueError(f"no baseline cell matches {key}")
        b = index[key]
        rows.append(DeltaRow(c.dataset, c.target, c.strategy, c.axis, c.value,
                             c.mean_f1 - b.mean_f1, math.hypot(c.std_f1, b.std_f1)))
    return rows


def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        if math.isnan(x):
            return "nan"
        return repr(x)
    return str(x)


def write_results_csv(cells: Sequence[ResultCell], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for c in cells:
            w.writerow([c.dataset, c.target, c.strategy, c.axis, _fmt(c.value),
                        _fmt(c.mean_f1), _fmt(c.std_f1), c.repeats])


def write_delta_csv(rows: Sequence[DeltaRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(DELTA_COLUMNS)
        for r in rows:
            w.writerow([r.dataset, r.target, r.strategy, r.axis, _fmt(r.value),
                        _fmt(r.delta_mean), _fmt(r.delta_std)])


def read_results_csv(path: str | Path) -> list[ResultCell]:
    cells = []
    with open(path, encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            cells.append(ResultCell(row["dataset"], row["target"], row["strategy"],
                                    row["axis"], _axis_value(float(row["alpha"])),
                                    float(row["mean_f1"]), float(row["std_f1"]),
                                    int(row["repeats"])))
    return cells


def split_baseline(cells: Sequence[ResultCell]) -> tuple[list[ResultCell], list[ResultCell]]:
    """Partition cells into plain baselines and augmented variants."""
    base = [c for c in cells if c.target == "none"]
    other = [c for c in cells if c.target != "none"]
    return base, other
