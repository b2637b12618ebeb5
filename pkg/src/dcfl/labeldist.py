"""Label-count vectors, target distributions and masked summation.

Counts are int64 numpy vectors of length Q. ``secure_aggregate`` simulates
pairwise additive masking: each pair of clients (i, j) with i < j shares a
mask vector; i adds it and j subtracts it, all modulo a public prime, so the
server learns only the total.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dcfl.errors import UndefinedDistanceError
from dcfl.partition import Federation

DEFAULT_PRIME = (1 << 61) - 1

_U64 = np.uint64
_MASK64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class MaskedShare:
    client_id: int
    masked_counts: np.ndarray  # uint64 residues in [0, prime)


def target_balanced(num_classes: int) -> np.ndarray:
    if num_classes < 2:
        raise ValueError("need at least two classes")
    return np.ones(num_classes, dtype=np.int64)


def target_real(federation: Federation, via_secure_agg: bool = False,
                rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Federation-wide label counts, optionally through masked summation."""
    counts = federation.counts_matrix()
    if len(counts) == 0:
        raise ValueError("federation has no clients")
    if via_secure_agg and len(counts) >= 2:
        return secure_aggregate(list(counts), rng=0 if rng is None else rng)
    return counts.sum(axis=0)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps modulo 2**64, which is what splitmix64 wants
    with np.errstate(over="ignore"):
        z = x + _U64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
        return z ^ (z >> _U64(31))


def pair_masks(session_seed: int, n: int, q: int, prime: int = DEFAULT_PRIME) -> np.ndarray:
    """Mask tensor ``[n, n, q]``; entry (i, j) for i < j is the mask shared by i and j.

    Each mask component is a keyed hash of (session, i, j, component), so
    either member of a pair can regenerate it independently.
    """
    iu, ju = np.triu_indices(n, k=1)
    key = _splitmix64(np.full(1, session_seed & _MASK64, dtype=np.uint64))[0]
    with np.errstate(over="ignore"):
        pair = (iu.astype(np.uint64) * _U64(n) + ju.astype(np.uint64)) * _U64(q)
        counter = pair[:, None] + np.arange(q, dtype=np.uint64)[None, :]
        word = _splitmix64(counter ^ key)
    masks = np.zeros((n, n, q), dtype=np.uint64)
    masks[iu, ju] = (word >> _U64(3)) % _U64(prime)
    return masks


def _modsum(rows: np.ndarray, prime: int) -> np.ndarray:
    """Sum ``rows`` along axis 0 modulo ``prime`` without uint64 overflow."""
    p = _U64(prime)
    # residues are < prime, so ``limit`` of them always sum below 2**64
    limit = ((1 << 64) - 1) // prime
    rows = np.asarray(rows, dtype=np.uint64) % p
    if len(rows) == 0:
        return np.zeros(rows.shape[1:], dtype=np.uint64)
    while len(rows) > 1:
        group = min(limit, len(rows))
        pad = (-len(rows)) % group
        if pad:
            rows = np.concatenate([rows, np.zeros((pad, *rows.shape[1:]), dtype=np.uint64)])
        rows = rows.reshape(-1, group, *rows.shape[1:]).sum(axis=1, dtype=np.uint64) % p
    return rows[0]


def mask_shares(shares: Sequence[np.ndarray], session_seed: int,
                prime: int = DEFAULT_PRIME, client_ids: Sequence[int] | None = None
                ) -> list[MaskedShare]:
    """What each client would send: its counts plus its net pairwise mask, mod prime."""
    vecs = np.asarray([np.asarray(s) for s in shares])
    n, q = vecs.shape
    if n < 2:
        raise ValueError("masked aggregation needs at least two participants")
    if not 2 <= prime < 1 << 63:
        raise ValueError("prime must lie in [2, 2**63)")
    if np.any(vecs < 0) or not np.array_equal(vecs, np.round(vecs)):
        raise ValueError("masked aggregation needs nonnegative integer vectors")
    if vecs.max(initial=0) * n >= prime:
        raise ValueError("counts too large for the field; the sum could wrap")
    p = _U64(prime)
    masks = pair_masks(session_seed, n, q, prime)
    added = _modsum(np.swapaxes(masks, 0, 1), prime)      # sum_j m[i, j]
    subtracted = _modsum(masks, prime)                     # sum_j m[j, i]
    plain = vecs.astype(np.uint64) % p
    masked = (plain + added + (p - subtracted) % p) % p
    ids = range(n) if client_ids is None else client_ids
    return [MaskedShare(int(cid), masked[k]) for k, cid in enumerate(ids)]


def unmask_sum(masked: Sequence[MaskedShare], prime: int = DEFAULT_PRIME) -> np.ndarray:
    rows = np.stack([s.masked_counts for s in masked])
    return _modsum(rows, prime).astype(np.int64)


def secure_aggregate(shares: Sequence[np.ndarray], prime: int = DEFAULT_PRIME,
                     rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Sum of integer count vectors computed from masked submissions only."""
    if len(shares) < 2:
        raise ValueError("secure aggregation refuses a single participant")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    session = int(rng.integers(0, 1 << 63))
    return unmask_sum(mask_shares(shares, session, prime), prime)


def cosine_distances(rows: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Row-wise ``1 - cos(row, target)``; rows with zero norm map to +inf.

    All distance computations in the package route through here so that
    greedy and exhaustive selection compare bit-identical scores.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    t = np.asarray(target, dtype=np.float64)
    dots = rows @ t
    nn = np.einsum("ij,ij->i", rows, rows)
    tt = float(t @ t)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = 1.0 - dots / np.sqrt(nn * tt)
    d = np.maximum(d, 0.0)
    d[nn == 0] = np.inf
    if tt == 0:
        d[:] = np.inf
    return d


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise UndefinedDistanceError("cosine distance is undefined for a zero vector")
    return float(cosine_distances(a[None, :], b)[0])
