import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcfl.errors import DivergenceError
from dcfl.model import MlpConfig, ModelParams, init_params, loss_and_grad
from dcfl.partition import ClientShard, PartitionConfig, build_federation
from dcfl.strategies import (ClientUpdateResult, StrategyConfig, StrategyKind, aggregate,
                             aggregate_fedatt, aggregate_fedavg, aggregate_fedprox,
                             attention_weights, client_update)

SCALAR = ((1, 1),)  # one 1x1 weight plus its bias


def _scalar(w, b=0.0):
    return ModelParams(np.array([float(w), float(b)]), SCALAR)


def _upd(cid, params, n=1):
    return ClientUpdateResult(cid, params, n)


@pytest.mark.parametrize("agg", [aggregate_fedavg, aggregate_fedprox])
def test_fedavg_examples(agg):
    g = _scalar(0)
    p, q = _scalar(2, 4), _scalar(6, -2)
    assert agg(g, [_upd(0, p, 5), _upd(1, q, 5)]).flat.tolist() == [4.0, 1.0]
    assert agg(g, [_upd(3, p, 7)]).flat.tolist() == p.flat.tolist()
    out = agg(g, [_upd(0, _scalar(10), 1), _upd(1, _scalar(40), 2), _upd(2, _scalar(100), 3)])
    assert out.flat[0] == 65.0


def test_fedavg_zero_samples():
    with pytest.raises(ValueError):
        aggregate_fedavg(_scalar(0), [_upd(0, _scalar(1), 0), _upd(1, _scalar(2), 0)])
    with pytest.raises(ValueError):
        aggregate_fedavg(_scalar(0), [])


def test_fedavg_order_independent():
    g = init_params(MlpConfig((3, 4, 2)), 0)
    rng = np.random.default_rng(1)
    ups = [_upd(i, g.replace(rng.normal(size=g.flat.size)), i + 1) for i in range(5)]
    a = aggregate_fedavg(g, ups)
    b = aggregate_fedavg(g, ups[::-1])
    assert np.array_equal(a.flat, b.flat)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_fedavg_convexity(k, seed):
    rng = np.random.default_rng(seed)
    g = init_params(MlpConfig((3, 4, 2)), 0)
    flats = rng.normal(size=(k, g.flat.size)) * 10
    ns = rng.integers(1, 1000, size=k)
    out = aggregate_fedavg(g, [_upd(i, g.replace(f), int(n)) for i, (f, n) in
                               enumerate(zip(flats, ns))])
    tol = 1e-9 * np.abs(flats).max()
    assert np.all(out.flat >= flats.min(axis=0) - tol)
    assert np.all(out.flat <= flats.max(axis=0) + tol)
    assert abs((ns / ns.sum()).sum() - 1) <= 1e-12


def test_fedatt_fixed_point():
    g = init_params(MlpConfig((3, 4, 2)), 0)
    out = aggregate_fedatt(g, [_upd(i, g.copy()) for i in range(3)], epsilon=1.2)
    assert np.array_equal(out.flat, g.flat)


def test_fedatt_single_client_full_step():
    g = init_params(MlpConfig((3, 4, 2)), 0)
    c = init_params(MlpConfig((3, 4, 2)), 1)
    out = aggregate_fedatt(g, [_upd(0, c)], epsilon=1.0)
    assert np.allclose(out.flat, c.flat, rtol=0, atol=1e-15)


def test_fedatt_two_scalar_clients():
    # biases held at zero so each layer distance is just |w_global - w_k|
    out = aggregate_fedatt(_scalar(0), [_upd(0, _scalar(1)), _upd(1, _scalar(3))], epsilon=1.0)
    a1 = math.exp(1) / (math.exp(1) + math.exp(3))
    expected = a1 * 1 + (1 - a1) * 3
    assert out.flat[0] == pytest.approx(expected, abs=1e-12)
    assert round(out.flat[0], 4) == 2.7616
    assert out.flat[1] == 0.0


def test_fedatt_layerwise_attention():
    g = init_params(MlpConfig((3, 4, 5, 2)), 0)
    rng = np.random.default_rng(0)
    ups = [_upd(i, g.replace(g.flat + rng.normal(size=g.flat.size))) for i in range(4)]
    alpha = attention_weights(g, ups)
    assert alpha.shape == (3, 4)
    assert np.all(np.abs(alpha.sum(axis=1) - 1) < 1e-9)
    # independent per-layer recomputation
    slices = g.layer_slices()
    for li, sl in enumerate(slices):
        s = np.array([np.linalg.norm(g.flat[sl] - u.new_params.flat[sl]) for u in ups])
        assert np.allclose(alpha[li], np.exp(s) / np.exp(s).sum(), rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1), st.floats(0.1, 3.0))
def test_fedatt_properties(k, seed, eps):
    rng = np.random.default_rng(seed)
    g = init_params(MlpConfig((2, 3, 2)), seed % 100)
    ups = [_upd(i, g.replace(g.flat + rng.normal(scale=5, size=g.flat.size))) for i in range(k)]
    assert np.all(np.abs(attention_weights(g, ups).sum(axis=1) - 1) < 1e-9)
    fixed = aggregate_fedatt(g, [_upd(i, g.copy()) for i in range(k)], eps)
    assert np.array_equal(fixed.flat, g.flat)


def test_dispatch():
    g = _scalar(0)
    ups = [_upd(0, _scalar(1)), _upd(1, _scalar(3))]
    assert aggregate(StrategyConfig(StrategyKind.FEDAVG), g, ups).flat[0] == 2.0
    assert aggregate(StrategyConfig(StrategyKind.FEDPROX), g, ups).flat[0] == 2.0
    att = aggregate(StrategyConfig(StrategyKind.FEDATT, epsilon=1.0), g, ups).flat[0]
    assert att == pytest.approx(2.7616, abs=1e-4)


def test_strategy_config_validation():
    with pytest.raises(ValueError):
        StrategyConfig(mu=-0.1)
    with pytest.raises(ValueError):
        StrategyConfig(epsilon=0.0)
    assert StrategyConfig("fedatt").kind is StrategyKind.FEDATT


def _shard_of(data, idx):
    idx = np.asarray(idx, dtype=np.int64)
    return ClientShard(0, idx, np.bincount(data.labels[idx], minlength=data.num_classes))


def test_client_update_zero_epochs(blobs):
    train, _ = blobs
    g = init_params(MlpConfig((8, 6, 2)), 0)
    res = client_update(g, _shard_of(train, range(20)), train, StrategyConfig(), 0, 32, 0.1,
                        np.random.default_rng(0))
    assert np.array_equal(res.new_params.flat, g.flat)
    assert res.num_samples == 20


def test_client_update_partial_batch(blobs, monkeypatch):
    train, _ = blobs
    calls = []
    import dcfl.strategies as mod

    real = mod.loss_and_grad

    def spy(params, batch, labels, **kw):
        calls.append(len(labels))
        return real(params, batch, labels, **kw)

    monkeypatch.setattr(mod, "loss_and_grad", spy)
    g = init_params(MlpConfig((8, 6, 2)), 0)
    client_update(g, _shard_of(train, range(10)), train, StrategyConfig(), 2, 32, 0.1,
                  np.random.default_rng(0))
    assert calls == [10, 10]


def test_client_update_lowers_local_loss(blobs):
    train, _ = blobs
    fed = build_federation(train, PartitionConfig(5, 1.0, float("inf"), seed=0))
    shard = fed.shard(0)
    x, y = train.features[shard.sample_indices], train.labels[shard.sample_indices]
    better = 0
    for seed in range(3):
        g = init_params(MlpConfig((8, 12, 2)), seed)
        res = client_update(g, shard, train, StrategyConfig(), 3, 32, 0.05,
                            np.random.default_rng(seed))
        before = loss_and_grad(g, x, y)[0]
        after = loss_and_grad(res.new_params, x, y)[0]
        better += after < before
    assert better >= 2


def test_client_update_empty_shard(blobs):
    train, _ = blobs
    g = init_params(MlpConfig((8, 6, 2)), 0)
    with pytest.raises(ValueError):
        client_update(g, _shard_of(train, []), train, StrategyConfig(), 1, 32, 0.1,
                      np.random.default_rng(0))


def test_client_update_divergence_names_client(blobs):
    train, _ = blobs
    g = init_params(MlpConfig((8, 6, 2)), 0)
    shard = ClientShard(7, np.arange(30), np.bincount(train.labels[:30], minlength=2))
    with pytest.raises(DivergenceError) as info:
        client_update(g, shard, train, StrategyConfig(), 3, 8, 1e300, np.random.default_rng(0))
    assert info.value.client_id == 7
    assert "client=7" in str(info.value)


def test_prox_mu_zero_matches_fedavg(blobs):
    train, _ = blobs
    g = init_params(MlpConfig((8, 6, 2)), 0)
    shard = _shard_of(train, range(64))
    a = client_update(g, shard, train, StrategyConfig(StrategyKind.FEDAVG), 2, 16, 0.1,
                      np.random.default_rng(5))
    b = client_update(g, shard, train, StrategyConfig(StrategyKind.FEDPROX, mu=0.0), 2, 16, 0.1,
                      np.random.default_rng(5))
    assert a.new_params.flat.tobytes() == b.new_params.flat.tobytes()


def test_prox_reduces_client_drift(blobs):
    train, _ = blobs
    fed = build_federation(train, PartitionConfig(8, 0.3, float("inf"), seed=2))
    g = init_params(MlpConfig((8, 12, 2)), 0)

    def mean_drift(mu):
        kind = StrategyKind.FEDPROX
        drifts = []
        for cid in fed.client_ids:
            shard = fed.shard(cid)
            if len(shard) == 0:
                continue
            res = client_update(g, shard, train, StrategyConfig(kind, mu=mu), 3, 16, 0.05,
                                np.random.default_rng(cid))
            drifts.append(np.linalg.norm(res.new_params.flat - g.flat))
        return np.mean(drifts)

    assert mean_drift(10.0) < mean_drift(0.0)
