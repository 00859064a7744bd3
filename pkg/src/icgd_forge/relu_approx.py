"""Sums of ReLUs: f(z) ~ sum_h c_h * relu(a_h . [z; 1]) with ||a_h||_1 <= 1.

The builders here are constructive. ``build_pwl_approx`` writes the
piecewise-linear interpolant of a scalar function as a constant term, a
starting ramp and one slope change per interior knot. ``build_affine``
represents an affine map exactly with two opposite ramps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

ScalarFn = Callable[[np.ndarray], np.ndarray]

_L1_SLACK = 1e-12


@dataclass(frozen=True)
class SumOfRelus:
    """Coefficients ``c`` (H,) and ridge directions ``A`` (H, k+1) on [-R, R]^k.

    The last column of ``A`` multiplies the constant input 1.
    """

    R: float
    k: int
    c: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).reshape(-1)
        A = np.asarray(self.A, dtype=float).reshape(c.size, self.k + 1)
        if np.any(np.sum(np.abs(A), axis=1) > 1 + _L1_SLACK):
            raise ValueError("every ridge direction must satisfy ||a_h||_1 <= 1")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(A))):
            raise ValueError("non-finite coefficient")
        c.flags.writeable = False
        A.flags.writeable = False
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "A", A)

    @property
    def H(self) -> int:
        return int(self.c.size)

    @property
    def C(self) -> float:
        return float(np.sum(np.abs(self.c)))

    def __call__(self, z) -> np.ndarray:
        return evaluate(self, z)

    def to_json(self) -> str:
        terms = [{"c": float(c), "a": [float(x) for x in a]} for c, a in zip(self.c, self.A)]
        return json.dumps({"R": self.R, "k": self.k, "terms": terms})

    @classmethod
    def from_json(cls, text: str) -> "SumOfRelus":
        doc = json.loads(text)
        terms = doc["terms"]
        k = int(doc["k"])
        c = np.array([t["c"] for t in terms], dtype=float)
        A = np.array([t["a"] for t in terms], dtype=float).reshape(len(terms), k + 1)
        return cls(float(doc["R"]), k, c, A)


@dataclass(frozen=True)
class ApproxReport:
    sup_error: float
    grid_points: int
    target_eps: float = math.nan


def evaluate(approx: SumOfRelus, z) -> np.ndarray:
    """sum_h c_h * max(0, a_h . [z; 1]).

    ``z`` may be a scalar (k = 1), a length-k vector, or an array whose last
    axis has length k. Scalars and 1-D arrays are treated as k = 1 batches
    when k = 1.
    """
    z = np.asarray(z, dtype=float)
    if approx.k == 1 and (z.ndim == 0 or z.shape[-1] != 1):
        z = z[..., None]
    if z.shape[-1] != approx.k:
        raise ValueError(f"input arity {z.shape[-1]} does not match k={approx.k}")
    if approx.H == 0:
        return np.zeros(z.shape[:-1])
    pre = z @ approx.A[:, :-1].T + approx.A[:, -1]
    return np.maximum(pre, 0.0) @ approx.c


def _normalized(c: list[float], rows: list[np.ndarray], k: int, R: float) -> SumOfRelus:
    A = np.array(rows, dtype=float).reshape(len(rows), k + 1)
    c = np.array(c, dtype=float)
    scale = np.maximum(1.0, np.sum(np.abs(A), axis=1))
    A = A / scale[:, None]
    c = c * scale
    keep = c != 0.0
    return SumOfRelus(R, k, c[keep], A[keep])


def build_pwl_approx(f: ScalarFn, R: float, segments: int) -> SumOfRelus:
    """Piecewise-linear interpolant of f at the knots -R + 2Rt/segments."""
    if segments < 1 or int(segments) != segments:
        raise ValueError(f"segments must be a positive integer, got {segments!r}")
    if not R > 0:
        raise ValueError("radius must be positive")
    knots = -R + 2.0 * R * np.arange(segments + 1) / segments
    knots[-1] = R
    vals = np.asarray(f(knots), dtype=float)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise ValueError(f"f is not finite at knot z={knots[bad[0]]!r}")
    slopes = np.diff(vals) / np.diff(knots)
    c = [vals[0], slopes[0]]
    rows = [np.array([0.0, 1.0]), np.array([1.0, R])]
    for t in range(1, segments):
        c.append(slopes[t] - slopes[t - 1])
        rows.append(np.array([1.0, -knots[t]]))
    return _normalized(c, rows, 1, R)


def build_affine(weights, bias: float, R: float) -> SumOfRelus:
    """Exact representation of z -> weights . z + bias as lam*relu(g/lam) - lam*relu(-g/lam)."""
    a = np.append(np.asarray(weights, dtype=float).ravel(), float(bias))
    lam = float(np.sum(np.abs(a)))
    k = a.size - 1
    if lam == 0.0:
        return SumOfRelus(R, k, np.zeros(0), np.zeros((0, k + 1)))
    return SumOfRelus(R, k, np.array([lam, -lam]), np.stack([a / lam, -a / lam]))


def estimate_max_second_derivative(f: ScalarFn, R: float, grid_points: int = 10_000) -> float:
    """max |f''| on [-R, R] by central second differences on a uniform grid."""
    z = np.linspace(-R, R, grid_points)
    h = 1e-4 * max(1.0, R)
    d2 = (f(z + h) - 2.0 * f(z) + f(z - h)) / (h * h)
    return float(np.max(np.abs(d2)))


def segments_for_eps(R: float, f2max: float, eps: float) -> int:
    """Smallest segment count whose interpolation bound (1/8) max|f''| delta^2 is <= eps."""
    if math.isinf(eps) or f2max == 0.0:
        return 1
    if not eps > 0:
        raise ValueError("target error must be positive")
    return max(1, math.ceil(2.0 * R * math.sqrt(f2max / (8.0 * eps))))


def pwl_error_bound(R: float, segments: int, f2max: float) -> float:
    delta = 2.0 * R / segments
    return f2max * delta * delta / 8.0


def measure_sup_error(approx: SumOfRelus, f: ScalarFn, grid_points: int = 100_000, target_eps: float = math.nan) -> ApproxReport:
    """max |f(z) - approx(z)| over a uniform grid on [-R, R] (k = 1)."""
    if grid_points < 2:
        raise ValueError("need at least two grid points")
    z = np.linspace(-approx.R, approx.R, grid_points)
    err = float(np.max(np.abs(f(z) - evaluate(approx, z))))
    return ApproxReport(err, grid_points, target_eps)


def certified_sup_error(approx: SumOfRelus, f: ScalarFn, f2max: float, grid_points: int = 100_000) -> float:
    """An upper bound on sup |f - approx| over [-R, R].

    The grid is merged with the approximation's own breakpoints, so on every
    grid cell the error is f minus an affine function. Its deviation from
    the chord through the cell endpoints is at most (cell^2 / 8) max|f''|,
    so grid maximum plus that term bounds the true supremum.
    """
    z = np.linspace(-approx.R, approx.R, grid_points)
    slope = approx.A[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        brk = np.where(slope != 0, -approx.A[:, 1] / slope, np.nan)
    brk = brk[np.isfinite(brk) & (np.abs(brk) <= approx.R)]
    z = np.unique(np.concatenate([z, brk]))
    err = float(np.max(np.abs(f(z) - evaluate(approx, z))))
    cell = float(np.max(np.diff(z)))
    return err + cell * cell * f2max / 8.0


def within_recipe_envelope(approx: SumOfRelus, sup_error: float, eps_max=0.625, H_max=80, C_max=25.0) -> bool:
    """The published (epsilon, H, C) envelope for the sigmoid recipe on [-10, 10]."""
    return sup_error <= eps_max and approx.H <= H_max and approx.C <= C_max
