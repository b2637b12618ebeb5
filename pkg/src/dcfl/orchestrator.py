"""Server loop: select, train locally, aggregate, evaluate; once per round.

Seeding scheme: every random decision draws from its own generator seeded by
``derive_seed(master_seed, round, purpose)``, a SHA-256 hash of the three
values. Purposes used here:

=================  =====================================================
``init``           initial weights (round 0)
``target``         masks for the secure sum behind the Real target (round 0)
``select``         the m uniformly drawn base clients
``augment``        random augmentation (ablation mode)
``mask``           masks used while greedily summing active label counts
``train/<id>``     shuffling and dropout for client ``id``
``repeat``         per-repeat master seed (used by the grid runner)
=================  =====================================================

Because all generators are created before client updates fan out, running
clients on a thread pool cannot change results.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from dcfl.dataset import Dataset
from dcfl.errors import ConfigError, DivergenceError
from dcfl.evaluation import weighted_f1
from dcfl.labeldist import target_balanced, target_real
from dcfl.model import MlpConfig, ModelParams, init_params, predict
from dcfl.partition import Federation, PartitionConfig
from dcfl.selection import (SelectionConfig, SelectionMode, TargetKind, exhaustive_dc_select,
                            greedy_dc_select, random_augment, random_select)
from dcfl.strategies import StrategyConfig, aggregate, client_update

logger = logging.getLogger(__name__)


def derive_seed(master_seed: int, round_index: int, purpose: str) -> int:
    """63-bit seed from SHA-256 of ``"master|round|purpose"``."""
    digest = hashlib.sha256(f"{master_seed}|{round_index}|{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _rng(master_seed: int, round_index: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, round_index, purpose))


@dataclass(frozen=True)
class RunConfig:
    rounds: int = 100
    local_epochs: int = 3
    batch_size: int = 32
    eta: float = 0.05
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    model: MlpConfig = field(default_factory=MlpConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    repeats: int = 3
    master_seed: int = 0
    secure_agg: bool = True
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.local_epochs < 0:
            raise ConfigError("local_epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.eta > 0:
            raise ConfigError("eta must be > 0")
        extra = 0 if self.selection.mode is SelectionMode.NONE else self.selection.m_dc
        if self.selection.m + extra > self.partition.num_clients:
            raise ConfigError(f"m + m_dc = {self.selection.m + extra} exceeds "
                              f"num_clients = {self.partition.num_clients}")

    @property
    def num_clients(self) -> int:
        return self.partition.num_clients


@dataclass
class RoundLog:
    round: int
    base_clients: list[int]
    added_clients: list[int]
    distance_before: float | None
    distance: float | None
    client_losses: dict[int, float]
    f1: float
    stop_reason: str = ""

    @property
    def selected(self) -> list[int]:
        return self.base_clients + self.added_clients

    def to_json(self) -> dict:
        return {
            "type": "round",
            "round": self.round,
            "base_clients": self.base_clients,
            "added_clients": self.added_clients,
            "distance_before": _num(self.distance_before),
            "distance": _num(self.distance),
            "stop_reason": self.stop_reason,
            "client_losses": {str(k): _num(v) for k, v in sorted(self.client_losses.items())},
            "f1": _num(self.f1),
        }


@dataclass
class RunResult:
    initial_f1: float
    rounds: list[RoundLog]
    final_params: ModelParams
    target: list[float] | None = None

    @property
    def final_f1(self) -> float:
        return self.rounds[-1].f1

    @property
    def best_f1(self) -> float:
        return max(r.f1 for r in self.rounds)

    @property
    def best_round(self) -> int:
        return max(self.rounds, key=lambda r: (r.f1, -r.round)).round

    def summary(self) -> dict:
        return {
            "type": "summary",
            "rounds": len(self.rounds),
            "initial_f1": _num(self.initial_f1),
            "final_f1": _num(self.final_f1),
            "best_f1": _num(self.best_f1),
            "best_round": self.best_round,
            "target": self.target,
            "mean_active_clients": float(np.mean([len(r.selected) for r in self.rounds])),
        }


def _num(x):
    if x is None:
        return None
    x = float(x)
    if math.isnan(x):
        return None
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def evaluate(params: ModelParams, test: Dataset) -> float:
    return weighted_f1(predict(params, test.features), test.labels, test.num_classes)


def select_target(cfg: RunConfig, federation: Federation) -> np.ndarray | None:
    kind = cfg.selection.target_kind
    if kind is TargetKind.BALANCED:
        return target_balanced(federation.num_classes)
    if kind is TargetKind.REAL:
        return target_real(federation, via_secure_agg=cfg.secure_agg,
                           rng=_rng(cfg.master_seed, 0, "target"))
    return None


def select_clients(cfg: RunConfig, federation: Federation, target: np.ndarray | None,
                   round_index: int):
    """Base clients, added clients, distance before/after and a stop reason."""
    sel = cfg.selection
    seed = cfg.master_seed
    base = random_select(federation.client_ids, sel.m, _rng(seed, round_index, "select"))
    mode = sel.mode
    if mode is SelectionMode.NONE:
        return base, [], None, None, ""
    if mode is SelectionMode.RANDOM:
        out = random_augment(base, federation.client_ids, sel.m_dc,
                             _rng(seed, round_index, "augment"), federation, target)
    elif mode is SelectionMode.GREEDY:
        mask_rng = _rng(seed, round_index, "mask") if cfg.secure_agg else None
        out = greedy_dc_select(base, federation, target, sel.m_dc, secure_rng=mask_rng)
    else:
        out = exhaustive_dc_select(base, federation, target, sel.m_dc)
    return base, out.added, out.initial_distance, out.achieved_distance, out.stop_reason


def run_federated(cfg: RunConfig, federation: Federation, train: Dataset, test: Dataset,
                  on_round: Callable[[RoundLog], None] | None = None) -> RunResult:
    """Train a global model for ``cfg.rounds`` rounds and log every round."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    if cfg.model.layer_sizes[0] != train.feature_dim:
        raise ConfigError(f"model input width {cfg.model.layer_sizes[0]} != "
                          f"feature_dim {train.feature_dim}")
    if cfg.model.layer_sizes[-1] != train.num_classes:
        raise ConfigError(f"model output width {cfg.model.layer_sizes[-1]} != "
                          f"num_classes {train.num_classes}")
    if len(federation) != cfg.num_clients:
        raise ConfigError(f"federation has {len(federation)} clients, config says "
                          f"{cfg.num_clients}")

    seed = cfg.master_seed
    params = init_params(cfg.model, derive_seed(seed, 0, "init"))
    target = select_target(cfg, federation)
    initial_f1 = evaluate(params, test)
    logs: list[RoundLog] = []
    pool = ThreadPoolExecutor(max_workers=cfg.jobs) if cfg.jobs > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            base, added, d_before, d_after, reason = select_clients(cfg, federation, target, t)
            active = sorted(base + added)
            trainable = [c for c in active if len(federation.shard(c)) > 0]
            rngs = {c: _rng(seed, t, f"train/{c}") for c in trainable}

            def work(c: int, params=params):
                return client_update(params, federation.shard(c), train, cfg.strategy,
                                     cfg.local_epochs, cfg.batch_size, cfg.eta, rngs[c],
                                     cfg.model.dropout_rate)

            try:
                if pool is None:
                    updates = [work(c) for c in trainable]
                else:
                    updates = list(pool.map(work, trainable))
            except DivergenceError as exc:
                raise exc.with_context(round_index=t) from None
            if updates:
                params = aggregate(cfg.strategy, params, updates)
            else:
                logger.warning("round %d: no active client holds data; model unchanged", t)
            log = RoundLog(t, base, added, d_before, d_after,
                           {u.client_id: u.mean_loss for u in updates},
                           evaluate(params, test), reason)
            logs.append(log)
            if on_round is not None:
                on_round(log)
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(initial_f1, logs, params,
                     None if target is None else [float(v) for v in target])


def write_run_log(result: RunResult, path: str | Path, extra: dict | None = None) -> None:
    """JSON-lines: one record per round, then a summary record."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in result.rounds:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
        summary = result.summary()
        if extra:
            summary.update(extra)
        f.write(json.dumps(summary, sort_keys=True) + "\n")
