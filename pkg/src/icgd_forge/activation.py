"""Scalar activation functions used by the target network and by exact-mode layers.

Every function here is registered under a string name so that layer weights
can refer to it in serialized form and so the compiled kernel can dispatch on
a small integer code instead of a Python callable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

ArrayFn = Callable[[np.ndarray], np.ndarray]


def relu(z):
    return np.maximum(z, 0.0)


def identity(z):
    return np.asarray(z, dtype=float)


def sigmoid(z):
    return expit(z)


def sigmoid_prime(z):
    s = expit(z)
    return s * (1.0 - s)


def sigmoid_second(z):
    s = expit(z)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


def sigmoid_third(z):
    s = expit(z)
    return s * (1.0 - s) * (1.0 - 6.0 * s + 6.0 * s * s)


# Integer codes shared with the compiled kernel (see _kernels.pyx).
ACT_CODES: dict[str, int] = {"relu": 0, "identity": 1, "sigmoid": 2, "sigmoid_prime": 3}

SCALAR_FUNCTIONS: dict[str, ArrayFn] = {
    "relu": relu,
    "identity": identity,
    "sigmoid": sigmoid,
    "sigmoid_prime": sigmoid_prime,
}


def lookup(name: str) -> ArrayFn:
    try:
        return SCALAR_FUNCTIONS[name]
    except KeyError:
        raise ValueError(f"unknown scalar function {name!r}; known: {sorted(SCALAR_FUNCTIONS)}") from None


@dataclass(frozen=True)
class ActivationSpec:
    """A smooth activation r with its derivative and Lipschitz constants.

    ``L_r`` bounds |r'| and ``L_rp`` bounds |r''| on the whole real line.
    ``r_name``/``rp_name`` are the registry keys used by exact-mode layers.
    ``rpp`` is the second derivative, needed when sizing piecewise-linear
    approximations of r' (its curvature bound is ``L_rpp``).
    """

    name: str
    r: ArrayFn
    rp: ArrayFn
    rpp: ArrayFn
    L_r: float
    L_rp: float
    L_rpp: float
    r_name: str
    rp_name: str

    def max_abs_r(self, radius: float) -> float:
        """max |r(t)| over |t| <= radius."""
        return _interval_max_abs(self.r, radius, self.name, "r")

    def max_abs_rp(self, radius: float) -> float:
        """max |r'(t)| over |t| <= radius."""
        return _interval_max_abs(self.rp, radius, self.name, "rp")


def _interval_max_abs(fn: ArrayFn, radius: float, name: str, which: str) -> float:
    radius = abs(float(radius))
    if name == "sigmoid":
        if which == "r":
            # increasing and positive: the right endpoint dominates
            return float(fn(radius))
        # r' is even and peaks at 0
        return float(fn(0.0))
    grid = np.linspace(-radius, radius, 10_001)
    return float(np.max(np.abs(fn(grid))))


SIGMOID = ActivationSpec(
    name="sigmoid",
    r=sigmoid,
    rp=sigmoid_prime,
    rpp=sigmoid_second,
    L_r=0.25,
    L_rp=1.0 / (6.0 * math.sqrt(3.0)),
    # max |sigma'''| is attained at 0 and equals 1/8
    L_rpp=0.125,
    r_name="sigmoid",
    rp_name="sigmoid_prime",
)

ACTIVATIONS: dict[str, ActivationSpec] = {"sigmoid": SIGMOID}


def get_activation(name: str) -> ActivationSpec:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; known: {sorted(ACTIVATIONS)}") from None
