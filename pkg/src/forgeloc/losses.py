"""Pixel contrastive losses (within-image, cross-scale, cross-modality) and focal CE."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import derive_seed
from .sampling import Anchors, PoolGroup, SamplerConfig, downsample_mask, draw_pools, sample_anchors

STRIDES = (4, 8, 16, 32)
ANCHOR_SEED, POOL_SEED = 0, 1


@dataclass(frozen=True)
class ContrastConfig:
    temperature: float = 0.1
    normalize: bool = True
    within_image: bool = True
    cross_scale: bool = True
    cross_modality: bool = True
    # adds positives to the denominator (standard SupCon form); off = loss as written
    supcon_denominator: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")

    @property
    def enabled(self) -> tuple[bool, bool, bool]:
        return (self.within_image, self.cross_scale, self.cross_modality)

    def validate_for_training(self) -> None:
        if not any(self.enabled):
            raise ValueError("at least one contrastive loss must be enabled")


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 0.5
    gamma: float = 2.0
    eps: float = 1e-7

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


def pair_contrast(
    anchor: torch.Tensor,
    positives: torch.Tensor,
    negatives: torch.Tensor,
    temperature: float,
    normalize: bool = False,
    supcon_denominator: bool = False,
) -> torch.Tensor:
    """Contrastive term ``-log(mean_p exp(a.p/t) / sum_n exp(a.n/t))``.

    Accepts a single anchor ``(D,)`` with pools ``(P, D)`` / ``(N, D)``, or a batch
    ``(A, D)`` with ``(A, P, D)`` / ``(A, N, D)``; returns a scalar or ``(A,)``.
    Log-sum-exp keeps large inner products finite. The value can be negative
    because positives are not part of the denominator unless
    ``supcon_denominator`` is set.
    """
    anchor = torch.as_tensor(anchor)
    positives = torch.as_tensor(positives, dtype=anchor.dtype)
    negatives = torch.as_tensor(negatives, dtype=anchor.dtype)
    single = anchor.dim() == 1
    if single:
        anchor, positives, negatives = anchor[None], positives[None], negatives[None]
    if positives.shape[-2] < 1 or negatives.shape[-2] < 1:
        raise ValueError("positive and negative pools must be non-empty")
    if normalize:
        for name, t in (("anchor", anchor), ("positives", positives), ("negatives", negatives)):
            if bool((t.norm(dim=-1) == 0).any()):
                raise ValueError(f"zero vector in {name} cannot be normalized")
        anchor = F.normalize(anchor, dim=-1, eps=0.0)
        positives = F.normalize(positives, dim=-1, eps=0.0)
        negatives = F.normalize(negatives, dim=-1, eps=0.0)
    pos_logits = torch.einsum("ad,apd->ap", anchor, positives) / temperature
    neg_logits = torch.einsum("ad,and->an", anchor, negatives) / temperature
    loss = _contrast_from_logits(pos_logits, neg_logits, supcon_denominator)
    return loss[0] if single else loss


def _contrast_from_logits(pos_logits, neg_logits, supcon_denominator=False):
    # sorted reductions make the result bitwise independent of pool order
    pos_logits = pos_logits.sort(dim=1).values
    neg_logits = neg_logits.sort(dim=1).values
    log_num = torch.logsumexp(pos_logits, dim=1) - math.log(pos_logits.shape[1])
    if supcon_denominator:
        log_den = torch.logsumexp(torch.cat([pos_logits, neg_logits], dim=1), dim=1)
    else:
        log_den = torch.logsumexp(neg_logits, dim=1)
    return log_den - log_num


@dataclass
class ContrastTerm:
    """One loss evaluated on one image, with the sampled sets kept for auditing."""

    value: torch.Tensor
    retained: int
    sampled: int
    anchors: Anchors | None = None
    groups: list[PoolGroup] = field(default_factory=list)


def scale_labels(mask: np.ndarray, strides: Sequence[int] = STRIDES) -> list[np.ndarray]:
    return [downsample_mask(mask, s) for s in strides]


def _flat(grid: torch.Tensor) -> torch.Tensor:
    """(D, h, w) -> (h*w, D)."""
    return grid.reshape(grid.shape[0], -1).t()


def _contrast_from_pools(
    anchor_feats: torch.Tensor,
    pool_feats: torch.Tensor,
    anchors: Anchors,
    pool_labels: np.ndarray,
    cfg: ContrastConfig,
    scfg: SamplerConfig,
    rng_seed: int,
    exclude_self: bool,
) -> ContrastTerm:
    if len(anchors) == 0:
        return ContrastTerm(anchor_feats.new_zeros(()), 0, 0, anchors, [])
    groups = draw_pools(anchors, pool_labels, scfg, derive_seed(rng_seed, POOL_SEED), exclude_self)
    if not groups:
        return ContrastTerm(anchor_feats.new_zeros(()), 0, len(anchors), anchors, [])
    if cfg.normalize:
        anchor_feats = F.normalize(anchor_feats, dim=1)
        pool_feats = F.normalize(pool_feats, dim=1)
    terms = []
    for g in groups:
        a = anchor_feats[torch.from_numpy(anchors.indices[g.anchor_rows])]
        # one (a, cells) similarity matrix, then gather each anchor's pools
        sim = a @ pool_feats.t() / cfg.temperature
        pos = torch.gather(sim, 1, torch.from_numpy(g.positives))
        neg = torch.gather(sim, 1, torch.from_numpy(g.negatives))
        terms.append(_contrast_from_logits(pos, neg, cfg.supcon_denominator))
    per_anchor = torch.cat(terms)
    return ContrastTerm(per_anchor.mean(), len(per_anchor), len(anchors), anchors, groups)


def _anchors(labels: Sequence[np.ndarray], scfg: SamplerConfig, rng_seed: int) -> Anchors:
    return sample_anchors(labels[0], scfg.anchors_per_class, derive_seed(rng_seed, ANCHOR_SEED))


def within_image_loss(
    pyramid: Sequence[torch.Tensor],
    labels: Sequence[np.ndarray],
    cfg: ContrastConfig,
    scfg: SamplerConfig,
    rng_seed: int,
    exclude_self: bool = True,
) -> ContrastTerm:
    """Anchors and pools both from the stride-4 grid of one image's projected pyramid."""
    x1 = _flat(pyramid[0])
    anchors = _anchors(labels, scfg, rng_seed)
    return _contrast_from_pools(
        x1, x1, anchors, labels[0].reshape(-1), cfg, scfg, rng_seed, exclude_self
    )


def cross_scale_loss(
    pyramid: Sequence[torch.Tensor],
    labels: Sequence[np.ndarray],
    cfg: ContrastConfig,
    scfg: SamplerConfig,
    rng_seed: int,
) -> ContrastTerm:
    """Anchors from the stride-4 grid, pools from the union of the three coarser grids."""
    x1 = _flat(pyramid[0])
    pool = torch.cat([_flat(g) for g in pyramid[1:4]], dim=0)
    pool_labels = np.concatenate([np.asarray(m).reshape(-1) for m in labels[1:4]])
    anchors = _anchors(labels, scfg, rng_seed)
    return _contrast_from_pools(x1, pool, anchors, pool_labels, cfg, scfg, rng_seed, False)


def cross_modality_loss(
    pyramid: Sequence[torch.Tensor],
    dual_pyramid: Sequence[torch.Tensor],
    labels: Sequence[np.ndarray],
    cfg: ContrastConfig,
    scfg: SamplerConfig,
    rng_seed: int,
) -> ContrastTerm:
    """Anchors from the first pass, pools from the second pass at stride 4."""
    x1 = _flat(pyramid[0])
    x1_dual = _flat(dual_pyramid[0])
    anchors = _anchors(labels, scfg, rng_seed)
    return _contrast_from_pools(
        x1, x1_dual, anchors, labels[0].reshape(-1), cfg, scfg, rng_seed, False
    )


def total_contrastive_loss(l1, l2, l3, cfg: ContrastConfig):
    """Unweighted sum of the enabled terms."""
    total = 0.0
    for value, on in zip((l1, l2, l3), cfg.enabled):
        if on:
            total = total + value
    return total


@dataclass
class MultiViewResult:
    total: torch.Tensor
    terms: dict[str, float]
    retained: int
    sampled: int


def multiview_loss(
    pyramids: Sequence[Sequence[torch.Tensor]],
    dual_pyramids: Sequence[Sequence[torch.Tensor]] | None,
    masks: Sequence[np.ndarray],
    cfg: ContrastConfig,
    scfg: SamplerConfig,
    seeds: Sequence[int],
) -> MultiViewResult:
    """Batch loss: each term averaged over images where it retained an anchor.

    ``pyramids[b]`` is the projected pyramid of image ``b`` as four ``(D, h, w)``
    tensors; ``masks[b]`` is its full-resolution mask.
    """
    names = ("within_image", "cross_scale", "cross_modality")
    sums = {n: [] for n in names}
    retained = sampled = 0
    for b, (pyr, mask, seed) in enumerate(zip(pyramids, masks, seeds)):
        labels = scale_labels(mask)
        terms = []
        if cfg.within_image:
            terms.append(("within_image", within_image_loss(pyr, labels, cfg, scfg, seed)))
        if cfg.cross_scale:
            terms.append(("cross_scale", cross_scale_loss(pyr, labels, cfg, scfg, seed)))
        if cfg.cross_modality:
            if dual_pyramids is None:
                raise ValueError("cross-modality loss needs a second pyramid per image")
            terms.append(
                ("cross_modality", cross_modality_loss(pyr, dual_pyramids[b], labels, cfg, scfg, seed))
            )
        for name, term in terms:
            retained += term.retained
            sampled += term.sampled
            if term.retained:
                sums[name].append(term.value)
    device_zero = pyramids[0][0].new_zeros(())
    means = {n: (torch.stack(v).mean() if v else device_zero) for n, v in sums.items()}
    total = total_contrastive_loss(
        means["within_image"], means["cross_scale"], means["cross_modality"], cfg
    )
    if not torch.is_tensor(total):
        total = device_zero
    return MultiViewResult(total, {n: float(means[n].detach()) for n in names}, retained, sampled)


def focal_ce(scores: torch.Tensor, mask, cfg: FocalConfig = FocalConfig()) -> torch.Tensor:
    """Mean per-pixel focal cross-entropy on sigmoid scores (clamped to [eps, 1-eps])."""
    scores = torch.as_tensor(scores)
    target = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask).to(scores.dtype)
    if scores.shape != target.shape:
        raise ValueError(f"score shape {tuple(scores.shape)} != mask shape {tuple(target.shape)}")
    y = scores.clamp(cfg.eps, 1.0 - cfg.eps)
    pos = -cfg.alpha * (1.0 - y) ** cfg.gamma * target * torch.log(y)
    neg = -(1.0 - cfg.alpha) * y**cfg.gamma * (1.0 - target) * torch.log1p(-y)
    return (pos + neg).mean()
