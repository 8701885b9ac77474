"""Slow, obviously-correct reference implementations used only by tests."""

import itertools
import math

import numpy as np


def collapse(path, blank):
    out, prev = [], None
    for a in path:
        if a != prev and a != blank:
            out.append(int(a))
        prev = a
    return tuple(out)


def enumerate_label_probs(lattice, blank):
    """P(label sequence) for every reachable sequence, by summing all V^U paths."""
    U, V = lattice.shape
    probs = np.exp(lattice)
    out = {}
    for path in itertools.product(range(V), repeat=U):
        p = 1.0
        for t, a in enumerate(path):
            p *= probs[t, a]
        key = collapse(path, blank)
        out[key] = out.get(key, 0.0) + p
    return out


def random_lattice(rng, U, V, sharp=1.0):
    x = rng.normal(size=(U, V)) * sharp
    x -= x.max(axis=1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


def levenshtein(a, b):
    """Textbook full-table edit distance."""
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1][-1]


def prefix_prob(lattice, prefix, blank):
    """P(output sequence starts with ``prefix``) by brute-force enumeration."""
    n = len(prefix)
    return sum(p for seq, p in enumerate_label_probs(lattice, blank).items() if seq[:n] == tuple(prefix))


def log(x):
    return math.log(x) if x > 0 else -math.inf
