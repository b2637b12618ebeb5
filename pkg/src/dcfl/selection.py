"""Client selection: random base set plus distribution-controlled augmentation.

The augmentation step adds clients whose label counts pull the combined
label distribution of the active set toward a target vector, scored by
cosine distance. Three variants are provided: greedy (one client at a time,
stopping when nothing strictly improves), exhaustive (best subset of size
0..m_dc) and random (the ablation baseline).
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from dcfl.errors import SelectionBudgetError
from dcfl.labeldist import cosine_distances, secure_aggregate
from dcfl.partition import Federation

EXHAUSTIVE_BUDGET = 10**7
_CHUNK = 200_000


class TargetKind(str, enum.Enum):
    NONE = "none"
    REAL = "real"
    BALANCED = "balanced"


class SelectionMode(str, enum.Enum):
    NONE = "none"
    GREEDY = "greedy"
    EXHAUSTIVE = "exhaustive"
    RANDOM = "random"


@dataclass(frozen=True)
class SelectionConfig:
    m: int = 10
    m_dc: int = 5
    target_kind: TargetKind = TargetKind.NONE
    mode: SelectionMode = SelectionMode.NONE

    def __post_init__(self) -> None:
        object.__setattr__(self, "target_kind", TargetKind(self.target_kind))
        object.__setattr__(self, "mode", SelectionMode(self.mode))
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.m_dc < 0:
            raise ValueError("m_dc must be >= 0")
        if self.mode in (SelectionMode.GREEDY, SelectionMode.EXHAUSTIVE) \
                and self.target_kind is TargetKind.NONE:
            raise ValueError(f"selection mode {self.mode.value!r} needs a target distribution")


@dataclass
class SelectionOutcome:
    active_set: list[int]
    added: list[int]
    achieved_distance: float
    per_step_trace: list[tuple[int, float]] = field(default_factory=list)
    stop_reason: str = ""
    initial_distance: float = math.nan


def random_select(all_clients: Sequence[int], m: int, rng: np.random.Generator) -> list[int]:
    """Uniform sample of ``m`` distinct ids, returned sorted."""
    pool = np.asarray(sorted(all_clients), dtype=np.int64)
    if m > len(pool):
        raise ValueError(f"cannot select {m} clients from {len(pool)}")
    if m < 0:
        raise ValueError("m must be nonnegative")
    return sorted(int(c) for c in rng.choice(pool, size=m, replace=False))


def _active_counts(active: Sequence[int], counts: np.ndarray,
                   secure_rng: np.random.Generator | None) -> np.ndarray:
    rows = counts[list(active)]
    if secure_rng is not None and len(rows) >= 2:
        return secure_aggregate(list(rows), rng=secure_rng)
    return rows.sum(axis=0)


def _inactive(active: Sequence[int], fed: Federation) -> list[int]:
    members = set(active)
    return [c for c in fed.client_ids if c not in members]


def _check_active(active: Sequence[int]) -> None:
    if not len(active):
        raise ValueError("active set must be non-empty")
    if len(set(active)) != len(active):
        raise ValueError("active set contains duplicates")


def greedy_dc_select(active: Sequence[int], federation: Federation, target: np.ndarray,
                     m_dc: int, secure_rng: np.random.Generator | None = None
                     ) -> SelectionOutcome:
    """Grow ``active`` one client at a time toward ``target``.

    Each step recomputes the active label counts (through masked summation
    when ``secure_rng`` is given), scores every inactive client c by the
    distance of ``V_c + V_active`` to the target, and adds the argmin, lowest
    id first on ties. It stops after ``m_dc`` additions or as soon as the best
    candidate fails to strictly lower the current distance.
    """
    _check_active(active)
    counts = federation.counts_matrix()
    chosen = list(active)
    trace: list[tuple[int, float]] = []
    current = float(cosine_distances(_active_counts(chosen, counts, secure_rng), target)[0])
    initial = current
    reason = "m_dc reached"
    for _ in range(m_dc):
        candidates = _inactive(chosen, federation)
        if not candidates:
            reason = "no inactive clients"
            break
        v_active = _active_counts(chosen, counts, secure_rng)
        scores = cosine_distances(counts[candidates] + v_active, target)
        best = int(np.argmin(scores))
        if not scores[best] < current:
            reason = "no improvement"
            break
        current = float(scores[best])
        chosen.append(candidates[best])
        trace.append((candidates[best], current))
    return SelectionOutcome(chosen, chosen[len(active):], current, trace, reason, initial)


def subset_count(n: int, max_size: int) -> int:
    return sum(math.comb(n, k) for k in range(0, min(max_size, n) + 1))


def exhaustive_dc_select(active: Sequence[int], federation: Federation, target: np.ndarray,
                         m_dc: int, budget: int = EXHAUSTIVE_BUDGET) -> SelectionOutcome:
    """Best subset of inactive clients with size 0..m_dc.

    Ties prefer smaller subsets, then lexicographically smaller id tuples.
    Each trace entry pairs an added client with the joint distance of the
    final set, since the subset is chosen as a whole.
    """
    _check_active(active)
    counts = federation.counts_matrix()
    candidates = _inactive(active, federation)
    total = subset_count(len(candidates), m_dc)
    if total > budget:
        raise SelectionBudgetError(total, budget)
    v_active = counts[list(active)].sum(axis=0)
    best_d = float(cosine_distances(v_active, target)[0])
    initial = best_d
    best_subset: tuple[int, ...] = ()
    cand_counts = counts[candidates]
    for size in range(1, min(m_dc, len(candidates)) + 1):
        combos = itertools.combinations(range(len(candidates)), size)
        for chunk in _chunks(combos, _CHUNK):
            idx = np.asarray(chunk, dtype=np.int64)
            sums = cand_counts[idx].sum(axis=1) + v_active
            scores = cosine_distances(sums, target)
            k = int(np.argmin(scores))
            if scores[k] < best_d:
                best_d = float(scores[k])
                best_subset = tuple(candidates[i] for i in idx[k])
    added = list(best_subset)
    trace = [(c, best_d) for c in added]
    reason = "exhaustive optimum" if candidates else "no inactive clients"
    return SelectionOutcome(list(active) + added, added, best_d, trace, reason, initial)


def _chunks(it: Iterable[tuple[int, ...]], size: int):
    while True:
        block = list(itertools.islice(it, size))
        if not block:
            return
        yield block


def random_augment(active: Sequence[int], all_clients: Sequence[int], m_dc: int,
                   rng: np.random.Generator, federation: Federation | None = None,
                   target: np.ndarray | None = None) -> SelectionOutcome:
    """Append exactly ``m_dc`` uniformly drawn inactive clients.

    The resulting distance to ``target`` is recorded when a federation and
    target are supplied; it is never optimised.
    """
    _check_active(active)
    members = set(active)
    pool = [c for c in sorted(all_clients) if c not in members]
    if m_dc == 0:
        added: list[int] = []
    else:
        if not pool:
            raise ValueError("no inactive clients left to augment with")
        added = random_select(pool, m_dc, rng)
    chosen = list(active) + added
    distance = math.nan
    initial = math.nan
    if federation is not None and target is not None:
        counts = federation.counts_matrix()
        initial = float(cosine_distances(counts[list(active)].sum(axis=0), target)[0])
        distance = float(cosine_distances(counts[chosen].sum(axis=0), target)[0])
    trace = [(c, distance) for c in added]
    return SelectionOutcome(chosen, added, distance, trace, "random augmentation", initial)
