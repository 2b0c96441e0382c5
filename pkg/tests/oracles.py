"""Straightforward reference implementations used as test oracles."""

import itertools

import numpy as np

from polariden.polar import polar_encode

CLIP = 30.0


def _g(a, b):
    s = (1.0 if a >= 0 else -1.0) * (1.0 if b >= 0 else -1.0)
    return s * min(abs(a), abs(b))


def _c(x):
    return max(-CLIP, min(CLIP, x))


def loop_minsum_bp(llr, mask, iterations):
    """Scalar-loop min-sum BP on the natural-order factor graph.

    Returns the decision LLRs ``R[0] + L[0]`` of all positions.
    """
    n_bits = len(llr)
    n = n_bits.bit_length() - 1
    L = [[0.0] * n_bits for _ in range(n + 1)]
    R = [[0.0] * n_bits for _ in range(n + 1)]
    for j in range(n_bits):
        R[0][j] = 0.0 if mask[j] else CLIP
        L[n][j] = _c(float(llr[j]))
    for _ in range(iterations):
        for s in range(n):
            span = n_bits >> (s + 1)
            for j in range(n_bits):
                if (j // span) % 2:
                    continue
                k = j + span
                R[s + 1][j] = _c(_g(R[s][j], L[s + 1][k] + R[s][k]))
                R[s + 1][k] = _c(_g(R[s][j], L[s + 1][j]) + R[s][k])
        for s in range(n - 1, -1, -1):
            span = n_bits >> (s + 1)
            for j in range(n_bits):
                if (j // span) % 2:
                    continue
                k = j + span
                L[s][j] = _c(_g(L[s + 1][j], L[s + 1][k] + R[s][k]))
                L[s][k] = _c(_g(R[s][j], L[s + 1][j]) + L[s + 1][k])
    return np.array([R[0][j] + L[0][j] for j in range(n_bits)])


def ml_decode(llr, mask):
    """Exhaustive maximum-likelihood message over all ``2^K`` info words."""
    mask = np.asarray(mask, dtype=bool)
    k = int(mask.sum())
    best, best_score = None, -np.inf
    for bits in itertools.product((0, 1), repeat=k):
        u = np.zeros(mask.size, dtype=np.uint8)
        u[mask] = bits
        c = polar_encode(u)
        score = float(np.sum((1 - 2.0 * c) * llr))
        if score > best_score:
            best, best_score = np.array(bits, dtype=np.uint8), score
    return best
