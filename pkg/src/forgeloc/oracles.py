"""Plain-Python reference implementations used to cross-check the vectorized code.

Nothing here imports torch; loops are written out on purpose.
"""

from __future__ import annotations

import math


def _dot(u, v):
    s = 0.0
    for a, b in zip(u, v):
        s += a * b
    return s


def _unit(v):
    n = math.sqrt(_dot(v, v))
    if n == 0.0:
        raise ValueError("zero vector")
    return [x / n for x in v]


def pair_contrast(anchor, positives, negatives, temperature, normalize=False, supcon_denominator=False):
    if not positives or not negatives:
        raise ValueError("empty pool")
    a = [float(x) for x in anchor]
    pos = [[float(x) for x in p] for p in positives]
    neg = [[float(x) for x in n] for n in negatives]
    if normalize:
        a = _unit(a)
        pos = [_unit(p) for p in pos]
        neg = [_unit(n) for n in neg]
    pl = [_dot(a, p) / temperature for p in pos]
    nl = [_dot(a, n) / temperature for n in neg]
    den_terms = nl + pl if supcon_denominator else nl
    m = max(pl + den_terms)
    num = 0.0
    for v in pl:
        num += math.exp(v - m)
    num /= len(pl)
    den = 0.0
    for v in den_terms:
        den += math.exp(v - m)
    return -(math.log(num) - math.log(den))


def focal_ce(scores, labels, alpha=0.5, gamma=2.0, eps=1e-7):
    """Mean focal CE over a nested list (rows of scores) with matching labels."""
    total, count = 0.0, 0
    for srow, lrow in zip(scores, labels):
        for y, t in zip(srow, lrow):
            y = min(max(float(y), eps), 1.0 - eps)
            total += -alpha * (1.0 - y) ** gamma * t * math.log(y)
            total += -(1.0 - alpha) * y**gamma * (1 - t) * math.log(1.0 - y)
            count += 1
    return total / count


def confusion(pred, gt):
    tp = fp = fn = tn = 0
    for prow, grow in zip(pred, gt):
        for p, g in zip(prow, grow):
            if p and g:
                tp += 1
            elif p and not g:
                fp += 1
            elif g and not p:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


def f1_iou(pred, gt):
    tp, fp, fn, _ = confusion(pred, gt)
    if tp + fp + fn == 0:
        return 1.0, 1.0
    return 2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn)


def image_contrast(anchor_feats, pool_feats, anchor_cells, pos_cells, neg_cells, temperature, normalize):
    """Mean contrast over anchors given explicit per-anchor pool cell lists.

    ``anchor_feats`` / ``pool_feats`` are lists of D-vectors indexed by cell.
    """
    total = 0.0
    for cell, pcells, ncells in zip(anchor_cells, pos_cells, neg_cells):
        total += pair_contrast(
            anchor_feats[cell],
            [pool_feats[c] for c in pcells],
            [pool_feats[c] for c in ncells],
            temperature,
            normalize,
        )
    return total / len(anchor_cells)
