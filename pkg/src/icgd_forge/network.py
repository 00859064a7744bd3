"""The target network that the transformer trains in context.

An N-layer fully connected network with a smooth activation r applied at
every layer (including the output layer), trained on squared loss

    L_n(w) = (1 / 2n) * sum_i ||p_i(N) - y_i||^2

by projected gradient descent over a coordinate box [-b, b]^{D_N}.

Parameters are stored as one flat vector ``w`` holding the rows v_{j_k} of
every weight matrix V_j in layer order. ``exact_gradient`` backpropagates
through the sensitivity vectors s_i(j); ``finite_diff_gradient`` and
``chain_product_gradient`` are independent oracles.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .activation import SIGMOID, ActivationSpec, get_activation


@dataclass(frozen=True)
class NetworkShape:
    d_x: int
    d_y: int
    K: int
    N: int
    n: int

    def __post_init__(self):
        for name, lo in (("d_x", 1), ("d_y", 1), ("K", 1), ("N", 2), ("n", 1)):
            v = getattr(self, name)
            if int(v) != v or v < lo:
                raise ValueError(f"{name} must be an integer >= {lo}, got {v!r}")

    def rows(self, j: int) -> int:
        """Number of rows of V_j (output width of layer j)."""
        self._check_layer(j)
        return self.d_y if j == self.N else self.K

    def cols(self, j: int) -> int:
        """Number of columns of V_j (input width of layer j)."""
        self._check_layer(j)
        return self.d_x if j == 1 else self.K

    def width(self, j: int) -> int:
        """Length of p(j); p(0) = x."""
        if j == 0:
            return self.d_x
        return self.rows(j)

    @property
    def n_params(self) -> int:
        return layer_offsets(self)[-1]

    def _check_layer(self, j: int):
        if not 1 <= j <= self.N:
            raise IndexError(f"layer index {j} outside [1, {self.N}]")

    def to_dict(self) -> dict:
        return {"d_x": self.d_x, "d_y": self.d_y, "K": self.K, "N": self.N, "n": self.n}


def layer_offsets(shape: NetworkShape) -> tuple[int, ...]:
    """Cumulative parameter counts D_0, ..., D_N."""
    d_x, d_y, K, N = shape.d_x, shape.d_y, shape.K, shape.N
    out = [0]
    for j in range(1, N + 1):
        if j == 1:
            out.append(d_x * K)
        elif j < N:
            out.append((j - 1) * K * K + d_x * K)
        else:
            out.append((N - 2) * K * K + (d_x + d_y) * K)
    return tuple(out)


def row_offset(shape: NetworkShape, j: int, k: int) -> int:
    """Offset of row v_{j_k} inside w (k is 0-based)."""
    return layer_offsets(shape)[j - 1] + k * shape.cols(j)


@dataclass(frozen=True)
class NetworkParams:
    shape: NetworkShape
    w: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.w, dtype=float)
        if w.shape != (self.shape.n_params,):
            raise ValueError(f"w has shape {w.shape}, expected ({self.shape.n_params},)")
        object.__setattr__(self, "w", w)

    def V(self, j: int) -> np.ndarray:
        """Weight matrix of layer j as a read-only view into w."""
        offs = layer_offsets(self.shape)
        view = self.w[offs[j - 1]:offs[j]].reshape(self.shape.rows(j), self.shape.cols(j))
        view.flags.writeable = False
        return view

    def matrices(self) -> list[np.ndarray]:
        return [self.V(j) for j in range(1, self.shape.N + 1)]

    @classmethod
    def from_matrices(cls, shape: NetworkShape, mats: Sequence[np.ndarray]) -> "NetworkParams":
        if len(mats) != shape.N:
            raise ValueError(f"expected {shape.N} matrices, got {len(mats)}")
        parts = []
        for j, m in enumerate(mats, start=1):
            m = np.asarray(m, dtype=float)
            if m.shape != (shape.rows(j), shape.cols(j)):
                raise ValueError(f"V_{j} has shape {m.shape}, expected {(shape.rows(j), shape.cols(j))}")
            parts.append(m.ravel())
        return cls(shape, np.concatenate(parts))

    @classmethod
    def zeros(cls, shape: NetworkShape) -> "NetworkParams":
        return cls(shape, np.zeros(shape.n_params))


@dataclass(frozen=True)
class Dataset:
    """Training pairs plus one test query. Rows of X and Y are examples."""

    X: np.ndarray
    Y: np.ndarray
    x_test: np.ndarray
    B_x: float = field(default=math.nan)
    B_y: float = field(default=math.nan)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        xt = np.asarray(self.x_test, dtype=float).ravel()
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"{X.shape[0]} inputs but {Y.shape[0]} labels")
        if xt.shape[0] != X.shape[1]:
            raise ValueError(f"test query has length {xt.shape[0]}, expected {X.shape[1]}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "x_test", xt)
        # record the observed radii when none were given
        if math.isnan(self.B_x):
            bx = max(float(np.max(np.linalg.norm(X, axis=1))), float(np.linalg.norm(xt)))
            object.__setattr__(self, "B_x", bx)
        if math.isnan(self.B_y):
            object.__setattr__(self, "B_y", float(np.max(np.linalg.norm(Y, axis=1))))
        if np.any(np.linalg.norm(X, axis=1) > self.B_x * (1 + 1e-12)) or np.linalg.norm(xt) > self.B_x * (1 + 1e-12):
            raise ValueError("an input exceeds the recorded bound B_x")
        if np.any(np.linalg.norm(Y, axis=1) > self.B_y * (1 + 1e-12)):
            raise ValueError("a label exceeds the recorded bound B_y")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def check_shape(self, shape: NetworkShape):
        if (self.n, self.X.shape[1], self.Y.shape[1]) != (shape.n, shape.d_x, shape.d_y):
            raise ValueError(
                f"dataset is (n={self.n}, d_x={self.X.shape[1]}, d_y={self.Y.shape[1]}), "
                f"shape expects (n={shape.n}, d_x={shape.d_x}, d_y={shape.d_y})"
            )


@dataclass(frozen=True)
class DomainBox:
    """The coordinate box [-b, b]^{D_N} that projected GD stays in."""

    b: float

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError(f"box bound must be positive, got {self.b}")

    def clip(self, w: np.ndarray) -> np.ndarray:
        return np.clip(w, -self.b, self.b)

    def row_norm_bound(self, shape: NetworkShape) -> float:
        """B_v: bounds the l2 norm of every row and every column of every V_j."""
        return math.sqrt(max(shape.K, shape.d_x, shape.d_y)) * self.b


# ---------------------------------------------------------------------------
# forward and backward passes


def forward_all(params: NetworkParams, x: np.ndarray, act: ActivationSpec = SIGMOID) -> list[np.ndarray]:
    """Return [p(0), ..., p(N)] for one input, or for a batch if x is 2-D (rows are examples)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.shape.d_x:
        raise ValueError(f"input has length {x.shape[-1]}, expected {params.shape.d_x}")
    ps = [x]
    for V in params.matrices():
        ps.append(act.r(ps[-1] @ V.T))
    return ps


def _preacts(params: NetworkParams, ps: list[np.ndarray]) -> list[np.ndarray]:
    return [ps[j - 1] @ params.V(j).T for j in range(1, params.shape.N + 1)]


def loss(params: NetworkParams, data: Dataset, act: ActivationSpec = SIGMOID) -> float:
    out = forward_all(params, data.X, act)[-1]
    return float(np.sum((out - data.Y) ** 2) / (2 * data.n))


def loss_grad_u(t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the squared loss ||t - y||^2 with respect to t."""
    return 2.0 * (t - y)


def sensitivities(params: NetworkParams, data: Dataset, act: ActivationSpec = SIGMOID):
    """Forward values, derivative values and backpropagated s-vectors for all examples.

    Returns (ps, rps, ss) where ps[j] = p(j), rps[j-1] = r'_(j-1) = r'(V_j p(j-1))
    and ss[j-1] = s(j) for j = 1..N, each stacked over examples (rows).
    """
    ps = forward_all(params, data.X, act)
    rps = [act.rp(z) for z in _preacts(params, ps)]
    N = params.shape.N
    ss: list[np.ndarray] = [None] * N  # type: ignore[list-item]
    ss[N - 1] = rps[N - 1] * loss_grad_u(ps[N], data.Y)
    for j in range(N - 1, 0, -1):
        ss[j - 1] = rps[j - 1] * (ss[j] @ params.V(j + 1))
    return ps, rps, ss


def gradient_from_terms(shape: NetworkShape, ps: Sequence[np.ndarray], ss: Sequence[np.ndarray], n: int) -> np.ndarray:
    """Assemble (1/2n) sum_i [A_i(1); ...; A_i(N)] with A_i(j) = [I (x) p_i(j-1)] s_i(j).

    Block k of A_i(j) is s_i(j)[k] * p_i(j-1), which is the outer product
    s_i(j) p_i(j-1)^T flattened row-major. ``ps`` and ``ss`` may carry extra
    rows (tokens); only the ones passed are summed.
    """
    blocks = [np.einsum("ik,im->km", ss[j - 1], ps[j - 1]).ravel() for j in range(1, shape.N + 1)]
    return np.concatenate(blocks) / (2 * n)


def exact_gradient(params: NetworkParams, data: Dataset, act: ActivationSpec = SIGMOID) -> np.ndarray:
    """Analytic gradient of L_n at w via the s-recursion."""
    data.check_shape(params.shape)
    ps, _, ss = sensitivities(params, data, act)
    return gradient_from_terms(params.shape, ps, ss, data.n)


def chain_product_gradient(params: NetworkParams, data: Dataset, act: ActivationSpec = SIGMOID) -> np.ndarray:
    """Gradient through explicit Jacobian products, an oracle for the s-recursion.

    For each example and layer j the derivative of p(N) with respect to the
    rows of V_j is formed as the product of diagonal derivative matrices and
    weight matrices R(N-1) V_N R(N-2) ... V_{j+1} R(j-1) [I (x) p(j-1)^T],
    then contracted with u.
    """
    shape = params.shape
    data.check_shape(shape)
    ps = forward_all(params, data.X, act)
    pre = _preacts(params, ps)
    total = np.zeros(shape.n_params)
    offs = layer_offsets(shape)
    for i in range(data.n):
        u = loss_grad_u(ps[-1][i], data.Y[i])
        for j in range(1, shape.N + 1):
            J = np.diag(act.rp(pre[j - 1][i])) @ np.kron(np.eye(shape.rows(j)), ps[j - 1][i][None, :])
            for l in range(j + 1, shape.N + 1):
                J = np.diag(act.rp(pre[l - 1][i])) @ params.V(l) @ J
            total[offs[j - 1]:offs[j]] += J.T @ u
    return total / (2 * data.n)


def finite_diff_gradient(params: NetworkParams, data: Dataset, h: float = 1e-5, act: ActivationSpec = SIGMOID) -> np.ndarray:
    """Central differences of L_n, one coordinate at a time."""
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    return central_difference(lambda w: loss(NetworkParams(params.shape, w), data, act), params.w, h)


def central_difference(f, w: np.ndarray, h: float) -> np.ndarray:
    w = np.array(w, dtype=float)
    g = np.empty_like(w)
    for k in range(w.size):
        old = w[k]
        w[k] = old + h
        fp = f(w)
        w[k] = old - h
        fm = f(w)
        w[k] = old
        g[k] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, ref: np.ndarray) -> float:
    return float(np.linalg.norm(a - ref) / max(np.linalg.norm(ref), 1e-12))


def gd_trajectory(
    shape: NetworkShape,
    data: Dataset,
    eta: float,
    steps: int,
    box: DomainBox,
    act: ActivationSpec = SIGMOID,
    w0: np.ndarray | None = None,
) -> np.ndarray:
    """Exact projected GD from w0 (default 0). Returns an array of shape (steps+1, D_N)."""
    if eta < 0:
        raise ValueError("step size must be nonnegative")
    w = np.zeros(shape.n_params) if w0 is None else np.array(w0, dtype=float)
    traj = [w.copy()]
    for _ in range(steps):
        g = exact_gradient(NetworkParams(shape, w), data, act)
        w = box.clip(w - eta * g)
        traj.append(w.copy())
    return np.array(traj)


# ---------------------------------------------------------------------------
# instances and serialization


def random_instance(
    shape: NetworkShape,
    rng: np.random.Generator,
    b: float = 1.0,
    act: ActivationSpec = SIGMOID,
) -> Dataset:
    """Inputs uniform in [-1, 1]^{d_x}; labels from a random teacher network with weights in [-b, b]."""
    X = rng.uniform(-1.0, 1.0, size=(shape.n, shape.d_x))
    x_test = rng.uniform(-1.0, 1.0, size=shape.d_x)
    teacher = NetworkParams(shape, rng.uniform(-b, b, size=shape.n_params))
    Y = forward_all(teacher, X, act)[-1]
    return Dataset(X, Y, x_test, B_x=math.sqrt(shape.d_x), B_y=math.sqrt(shape.d_y))


def instance_to_json(params: NetworkParams, data: Dataset, act_name: str, box: DomainBox, eta: float) -> str:
    doc = {
        "shape": params.shape.to_dict(),
        "activation_name": act_name,
        "w": params.w.tolist(),
        "data": [{"x": x.tolist(), "y": y.tolist()} for x, y in zip(data.X, data.Y)],
        "x_test": data.x_test.tolist(),
        "B_x": data.B_x,
        "B_y": data.B_y,
        "box_b": box.b,
        "eta": eta,
    }
    return json.dumps(doc, indent=1)


def instance_from_json(text: str):
    doc = json.loads(text)
    shape = NetworkShape(**doc["shape"])
    params = NetworkParams(shape, np.array(doc["w"], dtype=float))
    X = np.array([d["x"] for d in doc["data"]], dtype=float)
    Y = np.array([d["y"] for d in doc["data"]], dtype=float)
    data = Dataset(X, Y, np.array(doc["x_test"], dtype=float), B_x=doc["B_x"], B_y=doc["B_y"])
    get_activation(doc["activation_name"])
    return params, data, doc["activation_name"], DomainBox(doc["box_b"]), float(doc["eta"])
