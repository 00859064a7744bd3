"""Independent straight-line reference implementations used only by the tests.

Nothing here imports the package's evaluation code; the routines are
written with explicit loops so that they share no vectorization tricks
with the code under test.
"""

from __future__ import annotations

import math

import numpy as np


def sig(t: float) -> float:
    return 1.0 / (1.0 + math.exp(-t))


def dsig(t: float) -> float:
    s = sig(t)
    return s * (1.0 - s)


def naive_unflatten(w, d_x, d_y, K, N):
    mats, pos = [], 0
    for j in range(1, N + 1):
        rows = d_y if j == N else K
        cols = d_x if j == 1 else K
        m = [[0.0] * cols for _ in range(rows)]
        for r in range(rows):
            for c in range(cols):
                m[r][c] = float(w[pos])
                pos += 1
        mats.append(m)
    assert pos == len(w)
    return mats


def naive_forward(mats, x):
    """Return p(0..N) as lists of floats."""
    ps = [[float(v) for v in x]]
    for m in mats:
        prev = ps[-1]
        nxt = []
        for row in m:
            acc = 0.0
            for a, b in zip(row, prev):
                acc += a * b
            nxt.append(sig(acc))
        ps.append(nxt)
    return ps


def naive_loss(w, X, Y, d_x, d_y, K, N):
    mats = naive_unflatten(w, d_x, d_y, K, N)
    total = 0.0
    for x, y in zip(X, Y):
        out = naive_forward(mats, x)[-1]
        total += sum((o - t) ** 2 for o, t in zip(out, y))
    return total / (2 * len(X))


def hand_gradient_2x1(a: float, b: float, xs, ys):
    """dL/d(a, b) for p1 = sig(a x), p2 = sig(b p1), L = (1/2n) sum (p2 - y)^2, unrolled by hand."""
    n = len(xs)
    ga = gb = 0.0
    for x, y in zip(xs, ys):
        p1 = sig(a * x)
        p2 = sig(b * p1)
        e = 2.0 * (p2 - y)
        gb += e * dsig(b * p1) * p1
        ga += e * dsig(b * p1) * b * dsig(a * x) * x
    return [ga / (2 * n), gb / (2 * n)]


def naive_attention(H, heads, act=lambda z: max(z, 0.0)):
    """Per-token ReLU attention with dense (Q, K, V) triples, looping over everything."""
    D, T = H.shape
    out = H.copy()
    for Q, Km, V in heads:
        for i in range(T):
            qi = Q @ H[:, i]
            for s in range(T):
                score = float(np.dot(qi, Km @ H[:, s]))
                out[:, i] += act(score) * (V @ H[:, s]) / T
    return out


def naive_ewml(H, heads):
    D, T = H.shape
    out = H.copy()
    for Q, Km, V in heads:
        for i in range(T):
            h = H[:, i]
            out[:, i] += float(np.dot(Q @ h, Km @ h)) * (V @ h)
    return out


def naive_mlp(H, W1, W2):
    out = H.copy()
    for i in range(H.shape[1]):
        hidden = np.array([max(v, 0.0) for v in W1 @ H[:, i]])
        out[:, i] += W2 @ hidden
    return out


def naive_pwl(f, R, S, z):
    """Evaluate the piecewise-linear interpolant of f on S uniform segments by locating the segment."""
    knots = [-R + 2 * R * t / S for t in range(S + 1)]
    if z <= knots[0]:
        return f(knots[0])
    for t in range(S):
        if knots[t] <= z <= knots[t + 1]:
            lam = (z - knots[t]) / (knots[t + 1] - knots[t])
            return (1 - lam) * f(knots[t]) + lam * f(knots[t + 1])
    # beyond the last knot: extend the final segment
    slope = (f(knots[-1]) - f(knots[-2])) / (knots[-1] - knots[-2])
    return f(knots[-1]) + slope * (z - knots[-1])
