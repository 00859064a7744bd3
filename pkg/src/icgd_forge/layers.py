"""Token layout, prompt encoding and the three layer primitives.

* ReLU attention:   H + (1/T) sum_m (V_m H) relu((Q_m H)^T (K_m H)),  T = token count
* MLP:              H + W_2 relu(W_1 H)
* EWML:             H + sum_m (V_m H) diag((Q_m H)^T (K_m H))

EWML ("element-wise multiplication layer") keeps only the diagonal scores,
so token i receives sum_m <Q_m h_i, K_m h_i> V_m h_i with no normalization.

Attention layers may carry a different scalar function in place of relu;
exact-mode stacks use this to put r or r' directly on the scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.special import softmax

from . import kernels
from .kernels import PackedHeads, Triplets, pack_heads
from .network import Dataset, NetworkShape, layer_offsets

SLOT_ORDER = ("x", "y", "w", "pbar", "rpbar", "g", "sbar", "one", "flag")


@dataclass(frozen=True)
class TokenLayout:
    """Named contiguous slots of a token's embedding."""

    shape: NetworkShape
    offsets: dict = field(init=False, repr=False)
    D: int = field(init=False)

    def __post_init__(self):
        s = self.shape
        chain = (s.N - 1) * s.K + s.d_y
        sizes = {
            "x": s.d_x,
            "y": s.d_y,
            "w": s.n_params,
            "pbar": chain,
            "rpbar": chain,
            "g": s.d_y,
            "sbar": chain,
            "one": 1,
            "flag": 1,
        }
        offs, pos = {}, 0
        for name in SLOT_ORDER:
            offs[name] = (pos, sizes[name])
            pos += sizes[name]
        object.__setattr__(self, "offsets", offs)
        object.__setattr__(self, "D", pos)

    def slot(self, name: str) -> slice:
        start, size = self.offsets[name]
        return slice(start, start + size)

    def index(self, name: str, i: int = 0) -> int:
        start, size = self.offsets[name]
        if not 0 <= i < size:
            raise IndexError(f"coordinate {i} outside slot {name} of size {size}")
        return start + i

    @property
    def one(self) -> int:
        return self.index("one")

    @property
    def flag(self) -> int:
        return self.index("flag")

    def _chain_block(self, name: str, j: int) -> np.ndarray:
        # blocks indexed by layer j = 1..N; block j has shape.rows(j) entries
        s = self.shape
        start = self.offsets[name][0] + (j - 1) * s.K
        return np.arange(start, start + s.rows(j))

    def pbar(self, j: int) -> np.ndarray:
        """Rows holding p̄(j); p̄(0) is the x slot."""
        if j == 0:
            return np.arange(*self.slot("x").indices(self.D))
        return self._chain_block("pbar", j)

    def rpbar(self, j: int) -> np.ndarray:
        """Rows holding r̄'(j-1), the derivative values of layer j (j = 1..N)."""
        return self._chain_block("rpbar", j)

    def sbar(self, j: int) -> np.ndarray:
        """Rows holding s̄(j) (j = 1..N)."""
        return self._chain_block("sbar", j)

    def w_row(self, j: int, k: int) -> np.ndarray:
        """Rows holding v_{j_k} inside the w slot."""
        s = self.shape
        start = self.offsets["w"][0] + layer_offsets(s)[j - 1] + k * s.cols(j)
        return np.arange(start, start + s.cols(j))

    def slot_of(self, row: int) -> tuple[str, int]:
        for name in SLOT_ORDER:
            start, size = self.offsets[name]
            if start <= row < start + size:
                return name, row - start
        raise IndexError(row)

    def scratch_rows(self) -> np.ndarray:
        return np.concatenate([np.arange(*self.slot(n).indices(self.D)) for n in ("pbar", "rpbar", "g", "sbar")])


@dataclass(frozen=True)
class PromptMatrix:
    H: np.ndarray
    layout: TokenLayout

    @property
    def n_tokens(self) -> int:
        return self.H.shape[1]

    def get(self, name: str) -> np.ndarray:
        return self.H[self.layout.slot(name)]

    def to_csv(self) -> str:
        head = ",".join(f"token{t}" for t in range(self.n_tokens))
        rows = [",".join(repr(float(v)) for v in r) for r in self.H]
        return "\n".join([head, *rows]) + "\n"


def encode_prompt(data: Dataset, w0: np.ndarray, layout: TokenLayout) -> PromptMatrix:
    """Column i = [x_i; y_i; w0; 0; 0; 0; 0; 1; t_i] with t = 1 for training tokens, 0 for the query."""
    data.check_shape(layout.shape)
    w0 = np.asarray(w0, dtype=float)
    if w0.shape != (layout.shape.n_params,):
        raise ValueError(f"w0 has shape {w0.shape}, expected ({layout.shape.n_params},)")
    T = data.n + 1
    H = np.zeros((layout.D, T))
    H[layout.slot("x"), :data.n] = data.X.T
    H[layout.slot("x"), data.n] = data.x_test
    H[layout.slot("y"), :data.n] = data.Y.T
    H[layout.slot("w")] = w0[:, None]
    H[layout.one] = 1.0
    H[layout.flag, :data.n] = 1.0
    return PromptMatrix(H, layout)


def decode_prompt(prompt: PromptMatrix) -> tuple[Dataset, np.ndarray]:
    """Recover the dataset and the carried w (taken from the first token)."""
    lay = prompt.layout
    H = prompt.H
    train = H[lay.flag] == 1.0
    X = H[lay.slot("x")][:, train].T
    Y = H[lay.slot("y")][:, train].T
    x_test = H[lay.slot("x")][:, ~train][:, 0]
    return Dataset(X, Y, x_test), H[lay.slot("w"), 0].copy()


# ---------------------------------------------------------------------------
# layer weights


@dataclass(frozen=True)
class HeadStack:
    """M heads (Q_m, K_m, V_m), each a sparse D x D matrix given by triplets."""

    D: int
    n_heads: int
    q: Triplets
    k: Triplets
    v: Triplets

    def dense(self, m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.q.dense(m, self.D), self.k.dense(m, self.D), self.v.dense(m, self.D)

    def written_rows(self) -> np.ndarray:
        return np.unique(self.v.row)

    def to_doc(self) -> list:
        heads = [{} for _ in range(self.n_heads)]
        for part in ("q", "k", "v"):
            t: Triplets = getattr(self, part)
            order = np.argsort(t.head, kind="stable")
            bounds = np.searchsorted(t.head[order], np.arange(self.n_heads + 1))
            for m in range(self.n_heads):
                idx = order[bounds[m]:bounds[m + 1]]
                heads[m][part] = [[int(r), int(c), float(x)] for r, c, x in zip(t.row[idx], t.col[idx], t.val[idx])]
        return heads

    @classmethod
    def from_doc(cls, D: int, heads: list) -> "HeadStack":
        parts = {}
        for part in ("q", "k", "v"):
            rows = [(m, r, c, x) for m, h in enumerate(heads) for r, c, x in h[part]]
            arr = np.array(rows, dtype=float).reshape(-1, 4)
            parts[part] = Triplets.build(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])
        return cls(D, len(heads), parts["q"], parts["k"], parts["v"])


class _HeadLayer:
    heads: HeadStack
    act: str

    @property
    def D(self) -> int:
        return self.heads.D

    @property
    def n_heads(self) -> int:
        return self.heads.n_heads

    @cached_property
    def packed(self) -> PackedHeads:
        h = self.heads
        keep_scoreless = self.act not in ("relu", "identity")
        return pack_heads(h.q, h.k, h.v, h.n_heads, h.D, keep_scoreless)

    def written_rows(self) -> np.ndarray:
        return self.heads.written_rows()


@dataclass(frozen=True, eq=False)
class AttnWeights(_HeadLayer):
    heads: HeadStack
    act: str = "relu"
    label: str = ""
    kind = "attn"


@dataclass(frozen=True, eq=False)
class EwmlWeights(_HeadLayer):
    heads: HeadStack
    label: str = ""
    kind = "ewml"
    act = "identity"


@dataclass(frozen=True, eq=False)
class MlpWeights:
    W1: sp.csr_matrix
    W2: sp.csr_matrix
    label: str = ""
    kind = "mlp"

    def __post_init__(self):
        object.__setattr__(self, "W1", sp.csr_matrix(self.W1))
        object.__setattr__(self, "W2", sp.csr_matrix(self.W2))
        if self.W1.shape[0] != self.W2.shape[1] or self.W1.shape[1] != self.W2.shape[0]:
            raise ValueError(f"MLP shapes {self.W1.shape} and {self.W2.shape} do not compose")

    @property
    def D(self) -> int:
        return self.W1.shape[1]

    def written_rows(self) -> np.ndarray:
        return np.unique(self.W2.tocoo().row)


Layer = AttnWeights | EwmlWeights | MlpWeights


def attn_forward(H: np.ndarray, weights: AttnWeights, backend: str | None = None) -> np.ndarray:
    T = H.shape[1]
    return H + kernels.apply_heads(weights.packed, H, weights.act, False, 1.0 / T, backend)


def ewml_forward(H: np.ndarray, weights: EwmlWeights, backend: str | None = None) -> np.ndarray:
    return H + kernels.apply_heads(weights.packed, H, "identity", True, 1.0, backend)


def mlp_forward(H: np.ndarray, weights: MlpWeights) -> np.ndarray:
    return H + weights.W2 @ np.maximum(weights.W1 @ H, 0.0)


def layer_forward(H: np.ndarray, layer: Layer, backend: str | None = None) -> np.ndarray:
    if layer.kind == "attn":
        return attn_forward(H, layer, backend)
    if layer.kind == "ewml":
        return ewml_forward(H, layer, backend)
    return mlp_forward(H, layer)


def softmax_attn_forward(H: np.ndarray, Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Single-head softmax attention H + V H softmax_col((K H)^T (Q H)); returns (output, weights).

    Column i of the weight matrix holds token i's distribution over keys.
    Only used as a definitional evaluator; nothing is built with it.
    """
    scores = (K @ H).T @ (Q @ H)
    Wt = softmax(scores, axis=0)
    return H + (V @ H) @ Wt, Wt


# ---------------------------------------------------------------------------
# norms


def _max_col_sum_per_head(t: Triplets, n_heads: int, D: int) -> np.ndarray:
    out = np.zeros(n_heads)
    if t.val.size == 0:
        return out
    key = t.head * D + t.col
    uk, inv = np.unique(key, return_inverse=True)
    sums = np.zeros(uk.size)
    np.add.at(sums, inv, np.abs(t.val))
    np.maximum.at(out, uk // D, sums)
    return out


def _spectral_per_head(h: HeadStack, part: str) -> np.ndarray:
    return np.array([np.linalg.norm(getattr(h, part).dense(m, h.D), 2) for m in range(h.n_heads)])


def param_norm(layer: Layer, ord: str = "l1") -> float:
    """Layer norm; ``ord='l1'`` uses the induced max-column-sum norm, ``'spectral'`` the 2-norm.

    Attention / MLP: max_m max(||Q_m||, ||K_m||) + sum_m ||V_m|| + ||W_1|| + ||W_2||.
    EWML: the largest of all ||Q_m||, ||K_m||, ||V_m||.
    """
    if ord not in ("l1", "spectral"):
        raise ValueError(f"unknown norm {ord!r}")
    if layer.kind == "mlp":
        if ord == "l1":
            f = lambda W: float(abs(W).sum(axis=0).max()) if W.nnz else 0.0  # noqa: E731
        else:
            f = lambda W: float(np.linalg.norm(W.toarray(), 2)) if W.nnz else 0.0  # noqa: E731
        return f(layer.W1) + f(layer.W2)
    h = layer.heads
    if h.n_heads == 0:
        return 0.0
    if ord == "l1":
        nq, nk, nv = (_max_col_sum_per_head(getattr(h, p), h.n_heads, h.D) for p in ("q", "k", "v"))
    else:
        nq, nk, nv = (_spectral_per_head(h, p) for p in ("q", "k", "v"))
    if layer.kind == "ewml":
        return float(max(nq.max(), nk.max(), nv.max()))
    return float(max(nq.max(), nk.max()) + nv.sum())


# ---------------------------------------------------------------------------
# serialization


def layer_to_json(layer: Layer) -> str:
    doc: dict = {"kind": layer.kind, "label": layer.label, "D": layer.D}
    if layer.kind == "mlp":
        for name in ("W1", "W2"):
            W = layer.__getattribute__(name).tocoo()
            doc[name] = {"shape": list(W.shape), "entries": [[int(r), int(c), float(x)] for r, c, x in zip(W.row, W.col, W.data)]}
    else:
        doc["act"] = layer.act
        doc["heads"] = layer.heads.to_doc()
    return json.dumps(doc)


def layer_from_json(text: str) -> Layer:
    doc = json.loads(text)
    D = int(doc["D"])
    if doc["kind"] == "mlp":
        mats = []
        for name in ("W1", "W2"):
            e = np.array(doc[name]["entries"], dtype=float).reshape(-1, 3)
            mats.append(sp.csr_matrix((e[:, 2], (e[:, 0].astype(int), e[:, 1].astype(int))), shape=tuple(doc[name]["shape"])))
        return MlpWeights(mats[0], mats[1], doc["label"])
    heads = HeadStack.from_doc(D, doc["heads"])
    if doc["kind"] == "attn":
        return AttnWeights(heads, doc["act"], doc["label"])
    if doc["kind"] == "ewml":
        return EwmlWeights(heads, doc["label"])
    raise ValueError(f"unknown layer kind {doc['kind']!r}")


def is_finite(layer: Layer) -> bool:
    if layer.kind == "mlp":
        return bool(np.all(np.isfinite(layer.W1.data)) and np.all(np.isfinite(layer.W2.data)))
    return all(bool(np.all(np.isfinite(getattr(layer.heads, p).val))) for p in ("q", "k", "v"))


__all__ = [
    "TokenLayout",
    "PromptMatrix",
    "encode_prompt",
    "decode_prompt",
    "HeadStack",
    "AttnWeights",
    "EwmlWeights",
    "MlpWeights",
    "attn_forward",
    "ewml_forward",
    "mlp_forward",
    "layer_forward",
    "softmax_attn_forward",
    "param_norm",
    "layer_to_json",
    "layer_from_json",
]
