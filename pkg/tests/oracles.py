"""Independent brute-force oracles the implementation is checked against.

Everything here is written the slow, obvious way on purpose: per-pixel loops,
explicit per-cut class means, pairwise rank comparisons. None of it shares a
code path with the library.
"""

from __future__ import annotations

import numpy as np


def brute_confusion(pred, gt, mask):
    """Per-pixel recount of tp/fp/tn/fn over the masked region."""
    tp = fp = tn = fn = 0
    for p, t, m in zip(np.asarray(pred).ravel(), np.asarray(gt).ravel(),
                       np.asarray(mask).ravel()):
        if not m:
            continue
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif not p and t:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def pairwise_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 * P(equal)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos = scores[labels]
    neg = scores[~labels]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def pairwise_auc_loops(scores, labels) -> float:
    """Pure-python double loop; sanity check for pairwise_auc itself."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def exhaustive_otsu(values) -> float:
    """Quantize to 256 bins, evaluate between-class variance at every cut with
    direct class means, return the smallest maximizing threshold."""
    q = np.floor(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5)
    q = q.astype(np.int64)
    best_cut, best_var = 0, -1.0
    for cut in range(256):
        lo = q[q <= cut]
        hi = q[q > cut]
        if lo.size == 0 or hi.size == 0:
            var = 0.0
        else:
            w0 = lo.size / q.size
            w1 = hi.size / q.size
            var = w0 * w1 * (lo.mean() - hi.mean()) ** 2
        if var > best_var:
            best_var = var
            best_cut = cut
    return (best_cut + 0.5) / 255.0
