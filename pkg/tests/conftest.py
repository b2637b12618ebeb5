from __future__ import annotations

import numpy as np
import pytest

from dcfl.dataset import Dataset, generate_synthetic, train_test_split
from dcfl.model import MlpConfig
from dcfl.orchestrator import RunConfig
from dcfl.partition import PartitionConfig
from dcfl.selection import SelectionConfig
from dcfl.strategies import StrategyConfig


def balanced_labels(q: int, per_class: int, seed: int = 0) -> Dataset:
    """Dataset whose features are irrelevant; labels are ``per_class`` of each class."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat(np.arange(q), per_class))
    return Dataset(np.zeros((len(labels), 1)), labels.astype(np.int64), q)


@pytest.fixture(scope="session")
def blobs():
    """Two-class 8-d blobs, split 80/20."""
    ds = generate_synthetic(2, 8, 400, 2.5, seed=11)
    return train_test_split(ds, 0.8, seed=5)


def small_run_config(**kw) -> RunConfig:
    base = dict(
        rounds=5,
        local_epochs=1,
        batch_size=16,
        eta=0.05,
        strategy=StrategyConfig(),
        selection=SelectionConfig(m=4, m_dc=2),
        model=MlpConfig((8, 12, 2), dropout_rate=0.2),
        partition=PartitionConfig(num_clients=10, alpha_local=0.5, alpha_global=float("inf"),
                                  seed=1),
        repeats=1,
        master_seed=3,
    )
    base.update(kw)
    return RunConfig(**base)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
