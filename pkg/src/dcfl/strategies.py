"""Aggregation rules and the local training loop they share."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dcfl.dataset import Dataset
from dcfl.errors import DivergenceError
from dcfl.model import DEFAULT_DROPOUT, ModelParams, loss_and_grad, sgd_step
from dcfl.partition import ClientShard


class StrategyKind(str, enum.Enum):
    FEDAVG = "fedavg"
    FEDATT = "fedatt"
    FEDPROX = "fedprox"


@dataclass(frozen=True)
class StrategyConfig:
    kind: StrategyKind = StrategyKind.FEDAVG
    mu: float = 0.01
    epsilon: float = 1.2

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


@dataclass(frozen=True)
class ClientUpdateResult:
    client_id: int
    new_params: ModelParams
    num_samples: int
    mean_loss: float = float("nan")


def _sorted(updates: Sequence[ClientUpdateResult]) -> list[ClientUpdateResult]:
    if not updates:
        raise ValueError("no client updates to aggregate")
    return sorted(updates, key=lambda u: u.client_id)


def aggregate_fedavg(global_params: ModelParams,
                     updates: Sequence[ClientUpdateResult]) -> ModelParams:
    """Sample-weighted mean of client parameters."""
    ups = _sorted(updates)
    for u in ups:
        if u.new_params.shapes != global_params.shapes:
            raise ValueError(f"client {u.client_id}: parameter shapes differ from global")
    n = np.array([u.num_samples for u in ups], dtype=np.float64)
    total = n.sum()
    if total <= 0:
        raise ValueError("aggregation weights sum to zero samples")
    if len(ups) == 1:
        return ups[0].new_params.copy()
    stacked = np.stack([u.new_params.flat for u in ups])
    return global_params.replace((n @ stacked) / total)


def aggregate_fedprox(global_params: ModelParams,
                      updates: Sequence[ClientUpdateResult]) -> ModelParams:
    # the proximal term only changes the local objective
    return aggregate_fedavg(global_params, updates)


def attention_weights(global_params: ModelParams,
                      updates: Sequence[ClientUpdateResult]) -> np.ndarray:
    """Per-layer softmax over client distances, shape ``[layers, clients]``."""
    ups = _sorted(updates)
    stacked = np.stack([u.new_params.flat for u in ups])
    weights = []
    for sl in global_params.layer_slices():
        resid = global_params.flat[sl] - stacked[:, sl]
        s = np.sqrt(np.einsum("ij,ij->i", resid, resid))
        e = np.exp(s - s.max())
        weights.append(e / e.sum())
    return np.array(weights)


def aggregate_fedatt(global_params: ModelParams, updates: Sequence[ClientUpdateResult],
                     epsilon: float = 1.2) -> ModelParams:
    """Layer-wise attentive aggregation.

    For every layer, each client's attention is the softmax of the L2 distance
    between its layer and the global one; the server then moves the global
    layer by ``epsilon`` times the attention-weighted residual.
    """
    ups = _sorted(updates)
    for u in ups:
        if u.new_params.shapes != global_params.shapes:
            raise ValueError(f"client {u.client_id}: parameter shapes differ from global")
    stacked = np.stack([u.new_params.flat for u in ups])
    alpha = attention_weights(global_params, ups)
    out = global_params.flat.copy()
    for li, sl in enumerate(global_params.layer_slices()):
        resid = global_params.flat[sl] - stacked[:, sl]
        out[sl] = global_params.flat[sl] - epsilon * (alpha[li] @ resid)
    return global_params.replace(out)


def aggregate(strategy: StrategyConfig, global_params: ModelParams,
              updates: Sequence[ClientUpdateResult]) -> ModelParams:
    if strategy.kind is StrategyKind.FEDATT:
        return aggregate_fedatt(global_params, updates, strategy.epsilon)
    if strategy.kind is StrategyKind.FEDPROX:
        return aggregate_fedprox(global_params, updates)
    return aggregate_fedavg(global_params, updates)


def client_update(global_params: ModelParams, shard: ClientShard, data: Dataset,
                  strategy: StrategyConfig, epochs: int, batch_size: int, eta: float,
                  rng: np.random.Generator, dropout_rate: float = DEFAULT_DROPOUT
                  ) -> ClientUpdateResult:
    """Run ``epochs`` of shuffled minibatch SGD on one client's shard.

    Shards smaller than ``batch_size`` train on a single partial batch. Under
    FedProx the loss is anchored at the received global parameters.
    """
    n = len(shard)
    if n == 0:
        raise ValueError(f"client {shard.client_id} holds no samples")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    x = data.features[shard.sample_indices]
    y = data.labels[shard.sample_indices]
    prox = None
    if strategy.kind is StrategyKind.FEDPROX and strategy.mu > 0:
        prox = (strategy.mu, global_params)

    params = global_params.copy()
    losses: list[float] = []
    try:
        # overflow is reported once, as a DivergenceError from sgd_step
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(epochs):
                losses = []
                order = rng.permutation(n)
                for start in range(0, n, batch_size):
                    b = order[start:start + batch_size]
                    loss, grad = loss_and_grad(params, x[b], y[b], prox=prox,
                                               dropout_rate=dropout_rate, rng=rng)
                    losses.append(loss)
                    params = sgd_step(params, grad, eta)
    except DivergenceError as exc:
        raise exc.with_context(client_id=shard.client_id) from None
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return ClientUpdateResult(shard.client_id, params, n, mean_loss)
