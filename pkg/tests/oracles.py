"""Independent reference implementations used by the tests.

Written in plain Python, without reusing package internals, so that
agreement with the package is evidence rather than tautology.
"""
from __future__ import annotations

import itertools
from fractions import Fraction


def naive_weighted_mean(values, weights):
    # exact rational arithmetic, then one rounding at the end
    num = sum(Fraction(float(w)) * Fraction(float(v)) for v, w in zip(values, weights))
    den = sum(Fraction(float(w)) for w in weights)
    return float(num / den)


def naive_median(values):
    s = sorted(float(v) for v in values)
    n = len(s)
    if n % 2:
        return s[n // 2]
    return (s[n // 2 - 1] + s[n // 2]) / 2.0


def box_iou(a, b):
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    ix = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    iy = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = ix * iy
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def greedy_labels_bruteforce(dets, gts, threshold=0.5):
    """dets: list of (confidence, box). Returns TP flags in input order.

    Enumerates every permutation and keeps the one that is non-increasing in
    confidence with ties in input order, then runs the greedy rule on it.
    """
    n = len(dets)
    order = None
    for perm in itertools.permutations(range(n)):
        ok = all(
            dets[perm[k]][0] > dets[perm[k + 1]][0]
            or (dets[perm[k]][0] == dets[perm[k + 1]][0] and perm[k] < perm[k + 1])
            for k in range(n - 1)
        )
        if ok:
            order = perm
            break
    labels = [False] * n
    used = set()
    for i in order or ():
        scores = [(box_iou(dets[i][1], g), j) for j, g in enumerate(gts) if j not in used]
        if not scores:
            continue
        best = max(s for s, _ in scores)
        j = min(j for s, j in scores if s == best)
        if best >= threshold:
            labels[i] = True
            used.add(j)
    return labels


def ap_oracle(labels, n_gt):
    """AP as (1/n_gt) * sum over TP ranks k of max precision at ranks >= k."""
    if n_gt == 0:
        return 0.0 if labels else None
    precisions = []
    tp = 0
    for k, lab in enumerate(labels, 1):
        tp += lab
        precisions.append(tp / k)
    total = 0.0
    for k, lab in enumerate(labels):
        if lab:
            total += max(precisions[k:])
    return total / n_gt


def map50_oracle(dets, gts, threshold=0.5):
    """dets: list of (frame, cls, conf, box); gts: list of (frame, cls, box)."""
    classes = sorted({g[1] for g in gts} | {d[1] for d in dets})
    aps = []
    for c in classes:
        n_gt = sum(1 for g in gts if g[1] == c)
        flagged = []  # (conf, input index, label)
        frames = sorted({d[0] for d in dets if d[1] == c})
        for f in frames:
            idx = [i for i, d in enumerate(dets) if d[1] == c and d[0] == f]
            boxes = [g[2] for g in gts if g[1] == c and g[0] == f]
            labs = greedy_labels_bruteforce([(dets[i][2], dets[i][3]) for i in idx], boxes, threshold)
            flagged.extend((dets[i][2], i, lab) for i, lab in zip(idx, labs))
        flagged.sort(key=lambda t: (-t[0], t[1]))
        ap = ap_oracle([t[2] for t in flagged], n_gt)
        if ap is not None:
            aps.append(ap)
    return sum(aps) / len(aps) if aps else 0.0
