"""Dirichlet label-skew partitioning across simulated clients.

Two knobs control the imbalance:

* ``alpha_local``: every client draws class proportions from Dir(alpha_local),
  and each class's samples are dealt to clients in proportion to that class's
  column of the proportion matrix.
* ``alpha_global``: before dealing, one Dir(alpha_global) draw decides what
  fraction of every class survives; the best-represented class keeps all its
  samples.

``math.inf`` stands for "no skew" and is handled analytically.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dcfl.dataset import Dataset
from dcfl.errors import DataError

logger = logging.getLogger(__name__)

INF = math.inf

_GLOBAL_STREAM = 0
_LOCAL_STREAM = 1


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int = 100
    alpha_local: float = 2.0
    alpha_global: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        for name in ("alpha_local", "alpha_global"):
            a = getattr(self, name)
            if not a > 0:
                raise ValueError(f"{name} must be > 0 (or inf), got {a}")


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    sample_indices: np.ndarray
    label_counts: np.ndarray

    def __len__(self) -> int:
        return len(self.sample_indices)


@dataclass(frozen=True)
class Federation:
    shards: list[ClientShard]
    num_classes: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        # selection indexes count rows by client id
        for pos, s in enumerate(self.shards):
            if s.client_id != pos:
                raise DataError(f"client ids must be 0..M-1 in order; position {pos} "
                                f"holds client {s.client_id}")
            if len(s.label_counts) != self.num_classes:
                raise DataError(f"client {s.client_id}: label_counts has wrong length")
            if int(s.label_counts.sum()) != len(s.sample_indices):
                raise DataError(f"client {s.client_id}: label_counts do not sum to shard size")

    @classmethod
    def from_counts(cls, counts) -> Federation:
        """Federation whose shards carry only label counts (selection-level use)."""
        counts = np.asarray(counts, dtype=np.int64)
        shards, start = [], 0
        for k, row in enumerate(counts):
            n = int(row.sum())
            shards.append(ClientShard(k, np.arange(start, start + n, dtype=np.int64), row))
            start += n
        return cls(shards, counts.shape[1])

    def __len__(self) -> int:
        return len(self.shards)

    @property
    def client_ids(self) -> list[int]:
        return [s.client_id for s in self.shards]

    def counts_matrix(self) -> np.ndarray:
        """Per-client label counts stacked as ``[M, Q]`` int64."""
        if not self.shards:
            return np.zeros((0, self.num_classes), dtype=np.int64)
        return np.stack([s.label_counts for s in self.shards]).astype(np.int64)

    def shard(self, client_id: int) -> ClientShard:
        return self.shards[client_id]

    def check(self, train: Dataset) -> None:
        """Raise DataError if shards overlap or disagree with ``train`` labels."""
        seen = np.zeros(len(train), dtype=bool)
        for s in self.shards:
            idx = s.sample_indices
            if len(idx) and (idx.min() < 0 or idx.max() >= len(train)):
                raise DataError(f"client {s.client_id}: sample index out of range")
            if seen[idx].any() or len(np.unique(idx)) != len(idx):
                raise DataError(f"client {s.client_id}: sample assigned twice")
            seen[idx] = True
            counts = np.bincount(train.labels[idx], minlength=self.num_classes)
            if not np.array_equal(counts, s.label_counts):
                raise DataError(f"client {s.client_id}: label_counts disagree with data")


def sample_dirichlet(alpha: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """One draw from a symmetric Dirichlet via normalised Gamma(alpha, 1) variates."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if math.isinf(alpha) and alpha > 0:
        return np.full(k, 1.0 / k)
    if not alpha > 0:
        raise ValueError(f"Dirichlet concentration must be > 0, got {alpha}")
    g = np.asarray(rng.standard_gamma(alpha, size=k), dtype=np.float64)
    total = g.sum()
    if total == 0.0:
        # every variate underflowed (tiny alpha); the limit is a random vertex
        g = np.zeros(k)
        g[rng.integers(k)] = 1.0
        return g
    return g / total


def largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``weights``.

    Floors the exact quotas, then hands the leftover units to the largest
    fractional parts; ties go to the lower index.
    """
    weights = np.asarray(weights, dtype=np.float64)
    wsum = weights.sum()
    if wsum <= 0:
        raise ValueError("weights must have positive sum")
    quotas = total * (weights / wsum)
    alloc = np.floor(quotas).astype(np.int64)
    short = total - int(alloc.sum())
    if short > 0:
        frac = quotas - alloc
        order = np.argsort(-frac, kind="stable")
        alloc[order[:short]] += 1
    return alloc


def global_keep_counts(class_counts: np.ndarray, proportions: np.ndarray) -> np.ndarray:
    """Samples kept per class: ``round(p_q / max(p) * n_q)``."""
    p = np.asarray(proportions, dtype=np.float64)
    keep_frac = p / p.max()
    return np.floor(keep_frac * np.asarray(class_counts) + 0.5).astype(np.int64)


def global_imbalance_indices(train: Dataset, cfg: PartitionConfig,
                             rng: np.random.Generator | None = None) -> np.ndarray:
    """Sorted indices of ``train`` that survive global imbalance."""
    if len(train) == 0:
        raise DataError("cannot apply global imbalance to an empty dataset")
    if math.isinf(cfg.alpha_global):
        return np.arange(len(train))
    if rng is None:
        rng = np.random.default_rng([cfg.seed, _GLOBAL_STREAM])
    q = train.num_classes
    p = sample_dirichlet(cfg.alpha_global, q, rng)
    keep = global_keep_counts(train.class_counts(), p)
    kept = []
    for c in range(q):
        members = np.flatnonzero(train.labels == c)
        if keep[c] == 0 and len(members):
            logger.warning("global imbalance removed every sample of class %d", c)
        kept.append(rng.choice(members, size=keep[c], replace=False) if keep[c] else members[:0])
    return np.sort(np.concatenate(kept))


def apply_global_imbalance(train: Dataset, cfg: PartitionConfig,
                           rng: np.random.Generator | None = None) -> Dataset:
    if math.isinf(cfg.alpha_global):
        if len(train) == 0:
            raise DataError("cannot apply global imbalance to an empty dataset")
        return train
    return train.subset(global_imbalance_indices(train, cfg, rng))


def dirichlet_local_partition(train: Dataset, cfg: PartitionConfig,
                              rng: np.random.Generator | None = None) -> Federation:
    """Deal every sample of ``train`` to exactly one of ``cfg.num_clients`` clients."""
    n, m, q = len(train), cfg.num_clients, train.num_classes
    if n == 0:
        raise DataError("cannot partition an empty dataset")
    if m > n:
        raise DataError(f"{m} clients but only {n} samples")
    if rng is None:
        rng = np.random.default_rng([cfg.seed, _LOCAL_STREAM])

    by_class = [rng.permutation(np.flatnonzero(train.labels == c)) for c in range(q)]
    props = np.stack([sample_dirichlet(cfg.alpha_local, q, rng) for _ in range(m)])

    parts: list[list[np.ndarray]] = [[] for _ in range(m)]
    for c in range(q):
        members = by_class[c]
        if not len(members):
            continue
        column = props[:, c]
        if column.sum() <= 0:
            column = np.ones(m)
        alloc = largest_remainder(len(members), column)
        bounds = np.concatenate([[0], np.cumsum(alloc)])
        for k in range(m):
            parts[k].append(members[bounds[k]:bounds[k + 1]])

    shards = []
    for k in range(m):
        idx = np.sort(np.concatenate(parts[k])) if parts[k] else np.zeros(0, dtype=np.int64)
        idx = idx.astype(np.int64)
        counts = np.bincount(train.labels[idx], minlength=q).astype(np.int64)
        shards.append(ClientShard(k, idx, counts))
    return Federation(shards, q)


def build_federation(train: Dataset, cfg: PartitionConfig) -> Federation:
    """Global imbalance followed by local partitioning.

    Shard indices refer to ``train`` itself; samples dropped by the global
    step simply belong to no shard.
    """
    kept = global_imbalance_indices(train, cfg)
    reduced = train.subset(kept)
    fed = dirichlet_local_partition(reduced, cfg)
    shards = [ClientShard(s.client_id, kept[s.sample_indices], s.label_counts)
              for s in fed.shards]
    meta = {"alpha_local": cfg.alpha_local, "alpha_global": cfg.alpha_global,
            "seed": cfg.seed, "num_clients": cfg.num_clients, "retained": int(len(kept))}
    return Federation(shards, train.num_classes, meta)


def label_entropy(counts: np.ndarray) -> float:
    """Shannon entropy (nats) of a count vector; 0 for an empty vector."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def alpha_to_json(alpha: float) -> float | str:
    return "inf" if math.isinf(alpha) else alpha


def alpha_from_json(value) -> float:
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "infinity", "+inf"):
            return INF
        return float(value)
    return float(value)


def write_federation(fed: Federation, path: str | Path) -> None:
    """One JSON object per client: ``client_id``, ``label_counts``, ``sample_indices``."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in fed.shards:
            rec = {"client_id": s.client_id,
                   "label_counts": s.label_counts.tolist(),
                   "sample_indices": s.sample_indices.tolist()}
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_federation(path: str | Path, num_classes: int) -> Federation:
    shards = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                shards.append(ClientShard(int(rec["client_id"]),
                                          np.asarray(rec["sample_indices"], dtype=np.int64),
                                          np.asarray(rec["label_counts"], dtype=np.int64)))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad federation record ({exc})") from exc
    shards.sort(key=lambda s: s.client_id)
    return Federation(shards, num_classes)

