"""Head packing and the two interchangeable evaluation backends.

A layer with M heads is stored as sparse triplets. For evaluation the heads
are packed once into three stacked sparse matrices:

* score rows: for each head, the embedding rows that are nonzero in both
  Q_m and K_m (other rows cannot contribute to <Q_m h_i, K_m h_s>);
* value rows: for each head, the nonzero rows of V_m, each tagged with the
  embedding row it writes to.

Multiplying the stacks by H gives every head's projections in one sparse
product; the remaining per-head score / activation / accumulation loop runs
either in the compiled extension or in vectorized numpy. The backend is
chosen at import time: the compiled one when it imports, else numpy. Setting
``ICGD_BACKEND=numpy`` forces the fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .activation import ACT_CODES, lookup

try:  # pragma: no cover - exercised implicitly when the extension is built
    from . import _kernels as _compiled
except ImportError:  # pragma: no cover
    _compiled = None

BACKENDS = ("compiled", "numpy") if _compiled is not None else ("numpy",)
DEFAULT_BACKEND = "numpy" if os.environ.get("ICGD_BACKEND") == "numpy" or _compiled is None else "compiled"

# cap on the (score rows x tokens x tokens) scratch tensor in the numpy path
_CHUNK_ELEMS = 2_000_000


@dataclass(frozen=True)
class Triplets:
    """Entries (head, row, col, val) of a stack of D x D matrices."""

    head: np.ndarray
    row: np.ndarray
    col: np.ndarray
    val: np.ndarray

    @classmethod
    def build(cls, head, row, col, val) -> "Triplets":
        head = np.asarray(head, dtype=np.int64).ravel()
        row = np.asarray(row, dtype=np.int64).ravel()
        col = np.asarray(col, dtype=np.int64).ravel()
        val = np.asarray(val, dtype=float).ravel()
        if not (head.size == row.size == col.size == val.size):
            raise ValueError("triplet arrays differ in length")
        keep = val != 0.0
        return cls(head[keep], row[keep], col[keep], val[keep])

    @classmethod
    def empty(cls) -> "Triplets":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, np.zeros(0))

    @classmethod
    def concat(cls, parts: list["Triplets"]) -> "Triplets":
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("head", "row", "col", "val")))

    def shifted(self, offset: int) -> "Triplets":
        return Triplets(self.head + offset, self.row, self.col, self.val)

    def dense(self, m: int, D: int) -> np.ndarray:
        out = np.zeros((D, D))
        sel = self.head == m
        np.add.at(out, (self.row[sel], self.col[sel]), self.val[sel])
        return out


@dataclass(frozen=True)
class PackedHeads:
    D: int
    qc: sp.csr_matrix
    kc: sp.csr_matrix
    hptr: np.ndarray
    vc: sp.csr_matrix
    vptr: np.ndarray
    vtarget: np.ndarray

    @property
    def n_heads(self) -> int:
        return self.hptr.size - 1


def _rows_matrix(trip: Triplets, keys: np.ndarray, D: int) -> sp.csr_matrix:
    """Sparse matrix whose row t holds the entries of trip with head*D+row == keys[t]."""
    ek = trip.head * D + trip.row
    pos = np.searchsorted(keys, ek)
    inside = pos < keys.size
    inside[inside] = keys[pos[inside]] == ek[inside]
    return sp.csr_matrix((trip.val[inside], (pos[inside], trip.col[inside])), shape=(keys.size, D))


def pack_heads(q: Triplets, k: Triplets, v: Triplets, n_heads: int, D: int, keep_scoreless: bool) -> PackedHeads:
    """Pack heads for evaluation.

    Heads without value rows never contribute and are dropped. Heads
    without score rows have score 0; they are dropped unless
    ``keep_scoreless`` (needed when the activation is nonzero at 0).
    """
    vkeys = np.unique(v.head * D + v.row)
    vheads = vkeys // D
    live = np.zeros(n_heads, dtype=bool)
    live[vheads] = True
    skeys = np.intersect1d(q.head * D + q.row, k.head * D + k.row)
    sheads = skeys // D
    if not keep_scoreless:
        has_score = np.zeros(n_heads, dtype=bool)
        has_score[sheads] = True
        live &= has_score
    skeys = skeys[live[sheads]]
    vkeys = vkeys[live[vheads]]
    remap = np.cumsum(live) - 1
    M = int(live.sum())
    hptr = np.zeros(M + 1, dtype=np.int64)
    np.add.at(hptr, remap[skeys // D] + 1, 1)
    vptr = np.zeros(M + 1, dtype=np.int64)
    np.add.at(vptr, remap[vkeys // D] + 1, 1)
    return PackedHeads(
        D=D,
        qc=_rows_matrix(q, skeys, D),
        kc=_rows_matrix(k, skeys, D),
        hptr=np.cumsum(hptr),
        vc=_rows_matrix(v, vkeys, D),
        vptr=np.cumsum(vptr),
        vtarget=(vkeys % D).astype(np.int64),
    )


def apply_heads(packed: PackedHeads, H: np.ndarray, act: str, diag: bool, scale: float, backend: str | None = None) -> np.ndarray:
    """Return the update sum_m V_m H act(...) (not including the residual), shape (D, T)."""
    backend = backend or DEFAULT_BACKEND
    H = np.asarray(H, dtype=float)
    qh = np.ascontiguousarray((packed.qc @ H).T)
    kh = np.ascontiguousarray((packed.kc @ H).T)
    vh = np.ascontiguousarray((packed.vc @ H).T)
    T = H.shape[1]
    if backend == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled backend is not available")
        if act not in ACT_CODES:
            raise ValueError(f"compiled backend has no activation {act!r}")
        out = np.zeros((T, packed.D))
        _compiled.apply_heads(qh, kh, packed.hptr, vh, packed.vptr, packed.vtarget, ACT_CODES[act], diag, scale, out)
        return out.T
    if backend == "numpy":
        return _apply_numpy(packed, qh.T, kh.T, vh.T, lookup(act), diag, scale, T)
    raise ValueError(f"unknown backend {backend!r}; available: {BACKENDS}")


def _apply_numpy(packed: PackedHeads, qh, kh, vh, fn, diag: bool, scale: float, T: int) -> np.ndarray:
    out = np.zeros((packed.D, T))
    M = packed.n_heads
    hptr, vptr = packed.hptr, packed.vptr
    per_row = T if diag else T * T
    m0 = 0
    while m0 < M:
        # grow the chunk of heads until the scratch tensor would get too big
        m1 = m0 + 1
        while m1 < M and (hptr[m1 + 1] - hptr[m0]) * per_row <= _CHUNK_ELEMS:
            m1 += 1
        r0, r1 = hptr[m0], hptr[m1]
        counts = np.diff(hptr[m0:m1 + 1])
        nonempty = counts > 0
        if diag:
            S = np.zeros((m1 - m0, T))
            prod = qh[r0:r1] * kh[r0:r1]
        else:
            S = np.zeros((m1 - m0, T, T))
            prod = qh[r0:r1, :, None] * kh[r0:r1, None, :]
        if prod.shape[0]:
            starts = (hptr[m0:m1] - r0)[nonempty]
            S[nonempty] = np.add.reduceat(prod, starts, axis=0)
        A = fn(S) * scale
        u0, u1 = vptr[m0], vptr[m1]
        vhead = np.repeat(np.arange(m1 - m0), np.diff(vptr[m0:m1 + 1]))
        if diag:
            contrib = A[vhead] * vh[u0:u1]
        else:
            contrib = np.einsum("uis,us->ui", A[vhead], vh[u0:u1])
        np.add.at(out, packed.vtarget[u0:u1], contrib)
        m0 = m1
    return out
