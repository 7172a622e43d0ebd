"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports the package's numerical code; only plain tuples and
loops, so a shared bug cannot hide in both sides of a comparison.
"""

from __future__ import annotations

import itertools
import math


def seg_tiou(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    return inter / ((a[1] - a[0]) + (b[1] - b[0]) - inter)


def hard_nms(items):
    """items: (start, end, class, score). Greedy suppression of any overlap within a class."""
    order = sorted(range(len(items)), key=lambda i: (-items[i][3], items[i][0]))
    kept = []
    for i in order:
        s, e, k, _ = items[i]
        if all(items[j][2] != k or seg_tiou((s, e), items[j][:2]) == 0.0 for j in kept):
            kept.append(i)
    return sorted(items[i] for i in kept)


def _max_matching(edges, n_gt):
    """Size of a maximum matching by exhaustive assignment (tiny inputs only)."""
    best = 0

    def go(i, used, size):
        nonlocal best
        if i == len(edges):
            best = max(best, size)
            return
        if size + (len(edges) - i) <= best:
            return
        go(i + 1, used, size)
        for g in edges[i]:
            if g not in used:
                go(i + 1, used | {g}, size + 1)

    go(0, frozenset(), 0)
    return best


def exhaustive_ap(preds, gts, thresh):
    """preds: (start, end, score); gts: (start, end). Single class, single video.

    True positives at rank r are the size of the best matching among the top
    r predictions; AP is the area under the upper envelope of precision.
    """
    if not gts:
        return 0.0
    ranked = sorted(preds, key=lambda p: (-p[2], p[0]))
    edges = [[g for g, gt in enumerate(gts) if seg_tiou(p[:2], gt) >= thresh] for p in ranked]
    points = []
    for r in range(1, len(ranked) + 1):
        tp = _max_matching(edges[:r], len(gts))
        points.append((tp / len(gts), tp / r))
    area, prev_recall = 0.0, 0.0
    for idx, (recall, _) in enumerate(points):
        if recall > prev_recall:
            envelope = max(p for _, p in points[idx:])
            area += (recall - prev_recall) * envelope
            prev_recall = recall
    return area


def wcss(points, labels):
    total = 0.0
    for c in set(labels):
        members = [p for p, l in zip(points, labels) if l == c]
        centre = [sum(col) / len(members) for col in zip(*members)]
        total += sum(sum((x - m) ** 2 for x, m in zip(p, centre)) for p in members)
    return total


def best_two_partition(points):
    """Exhaustive minimum-WCSS split into two non-empty groups, first point in group 0."""
    n = len(points)
    best, best_cost = None, math.inf
    for bits in itertools.product((0, 1), repeat=n - 1):
        labels = (0,) + bits
        if len(set(labels)) < 2:
            continue
        cost = wcss(points, labels)
        if cost < best_cost - 1e-12:
            best, best_cost = list(labels), cost
    return best, best_cost


def infonce(features, labels, temperature):
    """Loop form of the multi-positive contrastive loss on unit-normalized features."""
    unit = []
    for f in features:
        norm = math.sqrt(sum(x * x for x in f))
        unit.append([x / norm for x in f])

    def sim(i, j):
        return sum(a * b for a, b in zip(unit[i], unit[j])) / temperature

    total, count = 0.0, 0
    n = len(unit)
    for i in range(n):
        negatives = [math.exp(sim(i, m)) for m in range(n) if labels[m] != labels[i]]
        for j in range(n):
            if j == i or labels[j] != labels[i]:
                continue
            pos = math.exp(sim(i, j))
            total -= math.log(pos / (pos + sum(negatives)))
            count += 1
    return total / count


def pair_bce(w1, b1, w2, b2, x, y):
    """Mean pair BCE of a one-hidden-layer ReLU network, written with loops.

    Each term is -[y log p + (1-y) log(1-p)] with p = sigmoid(z), rewritten as
    softplus(z) - y z; forming 1 - p directly loses most digits once |z| is
    large, which swamps a central difference.
    """
    total = 0.0
    for row, label in zip(x, y):
        hidden = [max(0.0, sum(w * v for w, v in zip(w_row, row)) + b) for w_row, b in zip(w1, b1)]
        z = sum(a * h for a, h in zip(w2, hidden)) + b2
        total += math.log1p(math.exp(-abs(z))) + max(z, 0.0) - label * z
    return total / len(y)


def central_difference(fn, params, step=1e-5):
    """Numerical gradient of fn() with respect to every entry of each array in params (edited in place)."""
    grads = {}
    for name, arr in params.items():
        g = [0.0] * arr.size
        flat = arr.reshape(-1)
        for i in range(arr.size):
            keep = flat[i]
            flat[i] = keep + step
            up = fn()
            flat[i] = keep - step
            down = fn()
            flat[i] = keep
            g[i] = (up - down) / (2 * step)
        grads[name] = g
    return grads
