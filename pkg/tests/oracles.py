"""Independent per-sample reference implementations used as test oracles."""
import math

import numpy as np


def ce(row, k):
    m = max(row)
    return -(row[k] - m - math.log(sum(math.exp(v - m) for v in row)))


def argmax_low(row):
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best


def affinity(clean, aug, labels):
    n = len(labels)
    a = sum(argmax_low(aug[i]) == labels[i] for i in range(n)) / n
    c = sum(argmax_low(clean[i]) == labels[i] for i in range(n)) / n
    return 100.0 * (a - c)


def diversity(logits, labels):
    return sum(ce(list(logits[i]), int(labels[i])) for i in range(len(labels))) / len(labels)


def mix_diversity(logits, y1, y2, lam):
    tot = 0.0
    for i in range(len(y1)):
        row = list(logits[i])
        tot += lam[i] * ce(row, int(y1[i])) + (1 - lam[i]) * ce(row, int(y2[i]))
    return tot / len(y1)


def wrong_counts(logits, labels, k):
    w = [0] * k
    for i in range(len(labels)):
        p = argmax_low(list(logits[i]))
        if p != labels[i]:
            w[p] += 1
    return w


def di(clean, dist, labels, k):
    w0, w1 = wrong_counts(clean, labels, k), wrong_counts(dist, labels, k)
    inc = [b - a for a, b in zip(w0, w1)]
    return 100.0 * max(max(inc), 0) / len(labels), inc


def worst_di(incs, n):
    worst = [max(col) for col in zip(*incs)]
    return 100.0 * max(max(worst), 0) / n


def window_argmax(m, s):
    """Exhaustive placement: exact window sums, first maximum in row-major order."""
    h, w = m.shape
    best, arg = None, None
    for t in range(h - s + 1):
        for l in range(w - s + 1):
            v = math.fsum(float(m[a, b]) for a in range(t, t + s) for b in range(l, l + s))
            if best is None or v > best:
                best, arg = v, (t, l)
    return arg, best


def window_sum(m, t, l, s):
    return math.fsum(float(v) for v in np.asarray(m[t:t + s, l:l + s]).ravel())
