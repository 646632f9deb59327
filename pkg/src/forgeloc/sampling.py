"""Label alignment to feature strides and anchor / positive / negative index sampling.

Everything here works on flat cell indices so callers can gather embeddings
from a ``(cells, D)`` matrix. Pools that span several grids index into the
concatenation of those grids in the order given.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_ANCHORS_PER_CLASS = 256
DEFAULT_POSITIVES = 256
DEFAULT_NEGATIVES = 512


class DegeneratePool(ValueError):
    """Positive or negative pool is empty; the anchor must be skipped."""


@dataclass(frozen=True)
class SamplerConfig:
    anchors_per_class: int = DEFAULT_ANCHORS_PER_CLASS
    positives: int = DEFAULT_POSITIVES
    negatives: int = DEFAULT_NEGATIVES
    shared_pools: bool = False

    def __post_init__(self):
        for name in ("anchors_per_class", "positives", "negatives"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Top-left nearest-neighbour subsampling: ``out[i, j] = mask[i*stride, j*stride]``."""
    h, w = mask.shape[-2:]
    if stride < 1 or h % stride or w % stride:
        raise ValueError(f"stride {stride} does not divide mask shape {(h, w)}")
    return np.ascontiguousarray(mask[..., ::stride, ::stride])


@dataclass(frozen=True)
class Anchors:
    indices: np.ndarray  # flat cell indices into the anchor grid
    labels: np.ndarray

    def __len__(self):
        return len(self.indices)


def sample_anchors(labels: np.ndarray, per_class: int, rng_seed: int) -> Anchors:
    """Up to ``per_class`` cells per present class, uniformly without replacement."""
    flat = np.asarray(labels).reshape(-1)
    rng = np.random.default_rng(rng_seed)
    idx, lab = [], []
    for cls in (0, 1):
        cells = np.flatnonzero(flat == cls)
        if len(cells) == 0:
            continue
        take = rng.choice(cells, size=min(per_class, len(cells)), replace=False)
        idx.append(np.sort(take))
        lab.append(np.full(len(take), cls, dtype=np.int64))
    if not idx:
        return Anchors(np.zeros(0, np.int64), np.zeros(0, np.int64))
    return Anchors(np.concatenate(idx).astype(np.int64), np.concatenate(lab))


def _draw(
    rng: np.random.Generator,
    candidates: np.ndarray,
    count: int,
    rows: int,
    exclude: np.ndarray | None,
    shared: bool,
) -> np.ndarray:
    """``rows`` independent uniform draws of ``count`` items from ``candidates``.

    ``exclude[r]`` (a candidate value) is never drawn for row ``r``. Returns a
    ``(rows, k)`` index array with ``k`` capped by availability.
    """
    n = len(candidates)
    if n == 0:
        return np.zeros((rows, 0), np.int64)
    if exclude is not None:
        pos = np.searchsorted(candidates, exclude)
        if np.any(pos >= n) or np.any(candidates[np.minimum(pos, n - 1)] != exclude):
            raise ValueError("excluded index is not among the candidates")
    avail = n - (1 if exclude is not None else 0)
    k = min(count, avail)
    if k <= 0:
        return np.zeros((rows, 0), np.int64)
    if shared:
        perm = candidates[rng.permutation(n)[: k + 1]] if exclude is not None else candidates[rng.permutation(n)[:k]]
        if exclude is None:
            return np.broadcast_to(perm, (rows, k)).copy()
        out = np.empty((rows, k), np.int64)
        for r in range(rows):
            out[r] = perm[perm != exclude[r]][:k]
        return out
    keys = rng.random((rows, n))
    if exclude is not None:
        keys[np.arange(rows), pos] = 2.0
    if k < n:
        pick = np.argpartition(keys, k - 1, axis=1)[:, :k]
    else:
        pick = np.broadcast_to(np.arange(n), (rows, n))
    return candidates[pick]


@dataclass(frozen=True)
class PoolGroup:
    """Anchors of one class sharing pool sizes."""

    anchor_rows: np.ndarray  # positions within the Anchors arrays
    positives: np.ndarray  # (a, P) indices into the pool cells
    negatives: np.ndarray  # (a, N)


def draw_pools(
    anchors: Anchors,
    pool_labels: np.ndarray,
    cfg: SamplerConfig,
    rng_seed: int,
    exclude_self: bool = False,
) -> list[PoolGroup]:
    """Per-anchor positive / negative pools from a flat pool label vector.

    With ``exclude_self`` the anchor's own cell index (the pool must then be the
    anchor grid) is removed from its positives. Anchors with an empty positive or
    negative pool are dropped; the returned groups hold only retained anchors.
    """
    pool_labels = np.asarray(pool_labels).reshape(-1)
    rng = np.random.default_rng(rng_seed)
    groups = []
    for cls in (0, 1):
        rows = np.flatnonzero(anchors.labels == cls)
        if len(rows) == 0:
            continue
        same = np.flatnonzero(pool_labels == cls)
        other = np.flatnonzero(pool_labels != cls)
        excl = anchors.indices[rows] if exclude_self else None
        pos = _draw(rng, same, cfg.positives, len(rows), excl, cfg.shared_pools)
        neg = _draw(rng, other, cfg.negatives, len(rows), None, cfg.shared_pools)
        if pos.shape[1] == 0 or neg.shape[1] == 0:
            continue
        groups.append(PoolGroup(rows, pos, neg))
    return groups


def build_pools(
    anchor_label: int,
    pool_labels: Sequence[np.ndarray],
    pos_count: int,
    neg_count: int,
    rng_seed: int,
    exclude_index: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Positive and negative index pools for a single anchor.

    ``pool_labels`` holds one label map per pool grid; indices address the
    concatenation of their flattened cells. Raises :class:`DegeneratePool` when
    either pool would be empty.
    """
    flat = np.concatenate([np.asarray(m).reshape(-1) for m in pool_labels])
    anchors = Anchors(
        np.array([-1 if exclude_index is None else exclude_index], np.int64),
        np.array([anchor_label], np.int64),
    )
    cfg = SamplerConfig(anchors_per_class=1, positives=pos_count, negatives=neg_count)
    groups = draw_pools(anchors, flat, cfg, rng_seed, exclude_self=exclude_index is not None)
    if not groups:
        raise DegeneratePool(f"empty positive or negative pool for anchor label {anchor_label}")
    return groups[0].positives[0], groups[0].negatives[0]
