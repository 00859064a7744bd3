"""Explicit weights for a transformer that runs projected GD on the target network.

One block of 2N + 4 layers performs one step w <- clip(w - eta * grad):

    N attention layers     p̄(j)[k]  = r̂(v_{j_k} . p̄(j-1))            (forward pass)
    1 attention layer      r̄'(j-1)[k] = r̂'(v_{j_k} . p̄(j-1)), all j
    1 MLP                  g = 2 (p̄(N) - y) on training tokens, 0 on the query
    N EWML layers          s̄(N) = r̄'(N-1) ⊙ g, then s̄(j) = r̄'(j-1) ⊙ (V_{j+1}^T s̄(j+1))
    1 attention layer      w -= eta/(2n) sum_t [I ⊗ p̄_t(j-1)] s̄_t(j)
    1 MLP                  clip w to the box and zero all scratch slots

In "approx" mode r̂ and r̂' are sums of ReLUs, one attention head per term.
In "exact" mode each forward / derivative group is a single head whose
scores go through r or r' directly (a diagnostic that isolates construction
error from approximation error).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import analysis
from .activation import SIGMOID, ActivationSpec
from .kernels import Triplets
from .layers import (
    AttnWeights,
    EwmlWeights,
    HeadStack,
    Layer,
    MlpWeights,
    TokenLayout,
    encode_prompt,
    layer_forward,
    layer_from_json,
    layer_to_json,
)
from .network import Dataset, DomainBox, NetworkShape
from .relu_approx import SumOfRelus, build_affine, build_pwl_approx, certified_sup_error

BLOCK_KINDS_TEMPLATE = ("attn", "mlp", "ewml", "attn", "mlp")


class SlotOverflow(ValueError):
    pass


@dataclass(frozen=True)
class BlockPlan:
    shape: NetworkShape
    layout: TokenLayout
    act: ActivationSpec
    eta: float
    box: DomainBox
    mode: str
    r_hat: SumOfRelus | None
    rp_hat: SumOfRelus | None
    u_hat: SumOfRelus
    R1: float
    R2: float
    R3: float
    budget: analysis.Budget | None = None
    B_x: float = math.nan
    B_y: float = math.nan
    head_cap: int = 100_000
    measured_eps: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("exact", "approx"):
            raise ValueError(f"mode must be 'exact' or 'approx', got {self.mode!r}")
        if self.mode == "approx" and (self.r_hat is None or self.rp_hat is None):
            raise ValueError("approx mode needs both r̂ and r̂'")

    @property
    def n(self) -> int:
        return self.shape.n

    def to_doc(self) -> dict:
        doc = {
            "shape": self.shape.to_dict(),
            "activation": self.act.name,
            "eta": self.eta,
            "box_b": self.box.b,
            "mode": self.mode,
            "R1": self.R1,
            "R2": self.R2,
            "R3": self.R3,
            "B_x": self.B_x,
            "B_y": self.B_y,
            "D": self.layout.D,
            "slots": {k: list(v) for k, v in self.layout.offsets.items()},
            "measured_eps": self.measured_eps,
        }
        for name in ("r_hat", "rp_hat", "u_hat"):
            a = getattr(self, name)
            doc[name] = None if a is None else json.loads(a.to_json())
        if self.budget is not None:
            b = self.budget
            doc["budget"] = {
                "eps_target": b.eps_target, "split": b.split, "eps_r": b.eps_r, "eps_rp": b.eps_rp, "eps_l": b.eps_l,
                "segments_r": b.seg_r, "segments_rp": b.seg_rp,
                "two_thirds_split_eps_r": b.two_thirds_eps_r, "two_thirds_split_eps_rp": b.two_thirds_eps_rp, "two_thirds_split_eps_l": b.two_thirds_eps_l,
            }
        return doc


def make_plan(
    shape: NetworkShape,
    eta: float,
    box: DomainBox,
    B_x: float,
    B_y: float,
    eps_target: float = 1e-2,
    mode: str = "approx",
    act: ActivationSpec = SIGMOID,
    seg_cap: int = 1000,
    head_cap: int = 100_000,
    segments: int | None = None,
    split: str = "conservative",
) -> BlockPlan:
    """Size the approximators for a target gradient error and collect everything the builders need.

    ``segments`` overrides the automatic segment count for both r̂ and r̂'.
    """
    layout = TokenLayout(shape)
    B_v = box.row_norm_bound(shape)
    budget = None
    if mode == "approx" and segments is None:
        budget = analysis.epsilon_budget(eps_target, shape, act, B_x, B_y, B_v, seg_cap=seg_cap, split=split)
        radii = budget.radii
        seg_r, seg_rp = budget.seg_r, budget.seg_rp
    else:
        radii = analysis.compute_radii(shape, act, B_x, B_y, B_v)
        seg_r = seg_rp = segments or 1
        if segments is not None and segments > seg_cap:
            raise analysis.BudgetInfeasible(f"requested {segments} segments, above the cap of {seg_cap}", "segments")
    if mode == "approx" and segments is not None:
        # size the radius for the error this many segments will leave behind
        f2 = max(act.L_rp, act.L_rpp)
        eps_guess = f2 * (2 * radii.R1 / segments) ** 2 / 8
        radii = analysis.compute_radii(shape, act, B_x, B_y, B_v, eps_guess, eps_guess)
    r_hat = rp_hat = None
    measured = {}
    if mode == "approx":
        r_hat = build_pwl_approx(act.r, radii.R1, seg_r)
        rp_hat = build_pwl_approx(act.rp, radii.R2, seg_rp)
        measured = measure_approximators(act, r_hat, rp_hat)
    u_hat = build_affine([2.0, -2.0], 0.0, radii.R3)
    plan = BlockPlan(
        shape=shape, layout=layout, act=act, eta=eta, box=box, mode=mode, r_hat=r_hat, rp_hat=rp_hat, u_hat=u_hat,
        R1=radii.R1, R2=radii.R2, R3=radii.R3, budget=budget, B_x=B_x, B_y=B_y, head_cap=head_cap, measured_eps=measured,
    )
    heads = block_head_count(plan)
    if heads > head_cap:
        raise analysis.BudgetInfeasible(f"one block needs {heads} heads, above the cap of {head_cap}", "heads")
    return plan


def measure_approximators(act: ActivationSpec, r_hat: SumOfRelus, rp_hat: SumOfRelus) -> dict:
    """Certified sup errors of r̂ and r̂' (the u approximator is exact, so eps_l = 0)."""
    return {
        "eps_r": certified_sup_error(r_hat, act.r, act.L_rp),
        "eps_rp": certified_sup_error(rp_hat, act.rp, act.L_rpp),
        "eps_l": 0.0,
    }


def block_head_count(plan: BlockPlan) -> int:
    s = plan.shape
    groups = (s.N - 1) * s.K + s.d_y
    if plan.mode == "exact":
        per_r = per_rp = 1
    else:
        per_r, per_rp = plan.r_hat.H, plan.rp_hat.H
    return groups * per_r + groups * per_rp + groups + 2 * groups


# ---------------------------------------------------------------------------
# head assembly helpers


class _Heads:
    """Collects heads whose Q, K, V share a sparsity pattern within a group."""

    def __init__(self, D: int):
        self.D = D
        self.n = 0
        self.parts: dict[str, list[Triplets]] = {"q": [], "k": [], "v": []}

    def add_group(self, M: int, q, k, v):
        """Add M heads. Each of q, k, v is (rows, cols, vals) with vals of shape (M, len(rows)) or (len(rows),)."""
        for name, (rows, cols, vals) in (("q", q), ("k", k), ("v", v)):
            rows = np.asarray(rows, dtype=np.int64)
            cols = np.asarray(cols, dtype=np.int64)
            if rows.size and (rows.max() >= self.D or cols.max() >= self.D):
                raise SlotOverflow(f"{name} entry outside the {self.D}-dimensional embedding")
            vals = np.broadcast_to(np.asarray(vals, dtype=float), (M, rows.size))
            head = np.repeat(np.arange(self.n, self.n + M), rows.size)
            self.parts[name].append(Triplets.build(head, np.tile(rows, M), np.tile(cols, M), vals.ravel()))
        self.n += M

    def stack(self) -> HeadStack:
        return HeadStack(self.D, self.n, *(Triplets.concat(self.parts[p]) for p in ("q", "k", "v")))


def _scalar_fn_group(heads: _Heads, plan: BlockPlan, approx: SumOfRelus | None, src: np.ndarray, wrow: np.ndarray, target: int):
    """Heads writing f(v . p̄) into ``target``: one head per ReLU term, or one exact head."""
    lay = plan.layout
    n = src.size
    if approx is None:
        heads.add_group(
            1,
            (np.arange(n), src, np.ones(n)),
            (np.arange(n), wrow, np.ones(n)),
            ([target], [lay.one], [1.0]),
        )
        return
    M = approx.H
    a_in, a_one = approx.A[:, 0], approx.A[:, 1]
    qv = np.concatenate([np.repeat(a_in[:, None], n, axis=1), a_one[:, None]], axis=1)
    heads.add_group(
        M,
        (np.arange(n + 1), np.append(src, lay.one), qv),
        (np.arange(n + 1), np.append(wrow, lay.one), np.ones(n + 1)),
        ([target], [lay.one], approx.c[:, None]),
    )


def build_forward_layers(plan: BlockPlan) -> list[AttnWeights]:
    """N attention layers; layer j writes p̄(j)."""
    lay, s = plan.layout, plan.shape
    out = []
    for j in range(1, s.N + 1):
        heads = _Heads(lay.D)
        for k in range(s.rows(j)):
            _scalar_fn_group(heads, plan, plan.r_hat, lay.pbar(j - 1), lay.w_row(j, k), int(lay.pbar(j)[k]))
        act = plan.act.r_name if plan.mode == "exact" else "relu"
        out.append(AttnWeights(heads.stack(), act, f"forward[{j}]"))
    return out


def build_rprime_layer(plan: BlockPlan) -> AttnWeights:
    """One attention layer writing r̄'(j-1) for every j = 1..N."""
    lay, s = plan.layout, plan.shape
    heads = _Heads(lay.D)
    for j in range(1, s.N + 1):
        for k in range(s.rows(j)):
            _scalar_fn_group(heads, plan, plan.rp_hat, lay.pbar(j - 1), lay.w_row(j, k), int(lay.rpbar(j)[k]))
    act = plan.act.rp_name if plan.mode == "exact" else "relu"
    return AttnWeights(heads.stack(), act, "rprime")


def build_loss_grad_mlp(plan: BlockPlan) -> MlpWeights:
    """g[k] = u_k(p̄(N), y) on training tokens and 0 on the query.

    Each ReLU term of the exact affine u_k gets its argument shifted by
    -R3 (1 - t), written as -R3 on the constant coordinate and +R3 on the
    flag. On the query (t = 0) the shifted argument is <= 0 because
    ||a||_1 <= 1 and every input is at most R3 in magnitude.
    """
    lay, s = plan.layout, plan.shape
    u = plan.u_hat
    R3 = plan.R3
    rows1, cols1, vals1, rows2, cols2, vals2 = [], [], [], [], [], []
    h = 0
    pN = lay.pbar(s.N)
    for k in range(s.d_y):
        for c, a in zip(u.c, u.A):
            for col, val in ((pN[k], a[0]), (lay.index("y", k), a[1]), (lay.one, a[2] - R3), (lay.flag, R3)):
                rows1.append(h)
                cols1.append(col)
                vals1.append(val)
            rows2.append(lay.index("g", k))
            cols2.append(h)
            vals2.append(c)
            h += 1
    W1 = sp.csr_matrix((vals1, (rows1, cols1)), shape=(h, lay.D))
    W2 = sp.csr_matrix((vals2, (rows2, cols2)), shape=(lay.D, h))
    W1.eliminate_zeros()
    return MlpWeights(W1, W2, "loss_grad")


def build_s_layers(plan: BlockPlan) -> list[EwmlWeights]:
    """N EWML layers: s̄(N) first, then s̄(N-1), ..., s̄(1)."""
    lay, s = plan.layout, plan.shape
    out = []
    heads = _Heads(lay.D)
    for k in range(s.d_y):
        heads.add_group(
            1,
            ([0], [lay.rpbar(s.N)[k]], [1.0]),
            ([0], [lay.index("g", k)], [1.0]),
            ([lay.sbar(s.N)[k]], [lay.one], [1.0]),
        )
    out.append(EwmlWeights(heads.stack(), f"s[{s.N}]"))
    for j in range(s.N - 1, 0, -1):
        heads = _Heads(lay.D)
        m_rows = s.rows(j + 1)
        for k in range(s.rows(j)):
            column = np.array([lay.w_row(j + 1, m)[k] for m in range(m_rows)])
            heads.add_group(
                1,
                (np.arange(m_rows), column, np.ones(m_rows)),
                (np.arange(m_rows), lay.sbar(j + 1), np.ones(m_rows)),
                ([lay.sbar(j)[k]], [lay.rpbar(j)[k]], [1.0]),
            )
        out.append(EwmlWeights(heads.stack(), f"s[{j}]"))
    return out


def build_update_layer(plan: BlockPlan) -> AttnWeights:
    """Two heads per (j, k) realizing z = relu(z) - relu(-z) on the score s̄_t(j)[k].

    The value reads p̄_t(j-1) into the rows of v_{j_k}; the factor
    eta (n+1) / (2n) cancels the 1/(n+1) attention normalization.
    """
    lay, s = plan.layout, plan.shape
    T = s.n + 1
    c = plan.eta * T / (2 * s.n)
    heads = _Heads(lay.D)
    for j in range(1, s.N + 1):
        src = lay.pbar(j - 1)
        for k in range(s.rows(j)):
            for sign in (1.0, -1.0):
                heads.add_group(
                    1,
                    ([0], [lay.one], [sign]),
                    ([0], [lay.sbar(j)[k]], [1.0]),
                    (lay.w_row(j, k), src, np.full(src.size, -sign * c)),
                )
    return AttnWeights(heads.stack(), "relu", "update")


def build_projection_mlp(plan: BlockPlan) -> MlpWeights:
    """clip(x) = x - relu(x - b) + relu(-x - b) on w; v - relu(v) + relu(-v) = 0 on scratch."""
    lay = plan.layout
    b = plan.box.b
    rows1, cols1, vals1, rows2, cols2, vals2 = [], [], [], [], [], []
    h = 0
    for row in range(*lay.slot("w").indices(lay.D)):
        for sx, w2 in ((1.0, -1.0), (-1.0, 1.0)):
            rows1 += [h, h]
            cols1 += [row, lay.one]
            vals1 += [sx, -b]
            rows2.append(row)
            cols2.append(h)
            vals2.append(w2)
            h += 1
    for row in lay.scratch_rows():
        for sx, w2 in ((1.0, -1.0), (-1.0, 1.0)):
            rows1.append(h)
            cols1.append(row)
            vals1.append(sx)
            rows2.append(row)
            cols2.append(h)
            vals2.append(w2)
            h += 1
    W1 = sp.csr_matrix((vals1, (rows1, cols1)), shape=(h, lay.D))
    W2 = sp.csr_matrix((vals2, (rows2, cols2)), shape=(lay.D, h))
    return MlpWeights(W1, W2, "projection")


def build_block(plan: BlockPlan) -> list[Layer]:
    return [
        *build_forward_layers(plan),
        build_rprime_layer(plan),
        build_loss_grad_mlp(plan),
        *build_s_layers(plan),
        build_update_layer(plan),
        build_projection_mlp(plan),
    ]


def block_kinds(N: int) -> list[str]:
    return ["attn"] * (N + 1) + ["mlp"] + ["ewml"] * N + ["attn", "mlp"]


@dataclass(frozen=True)
class StackWeights:
    block: tuple
    L: int
    plan: BlockPlan

    @property
    def layers(self) -> list[Layer]:
        return list(self.block) * self.L

    @property
    def n_layers(self) -> int:
        return len(self.block) * self.L

    def kinds(self) -> list[str]:
        return [layer.kind for layer in self.layers]

    def save(self, directory: str | os.PathLike):
        """One JSON file per layer of the first block plus a manifest (all blocks share weights)."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for i, layer in enumerate(self.block):
            name = f"layer_{i:03d}_{layer.kind}.json"
            (d / name).write_text(layer_to_json(layer))
            files.append(name)
        manifest = {"L": self.L, "block_size": len(self.block), "files": files, "plan": self.plan.to_doc()}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @staticmethod
    def load_block(directory: str | os.PathLike) -> tuple[list[Layer], dict]:
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        return [layer_from_json((d / f).read_text()) for f in manifest["files"]], manifest


def build_stack(plan: BlockPlan, L: int) -> StackWeights:
    if L < 0:
        raise ValueError("block count must be nonnegative")
    return StackWeights(tuple(build_block(plan)), L, plan)


# ---------------------------------------------------------------------------
# running


class SlotDisciplineError(AssertionError):
    pass


@dataclass
class TraceRecord:
    """What a run produced: the carried w per block, per-block snapshots, and optionally every layer."""

    w_bar: np.ndarray  # (L+1, D_N), taken from token 0
    w_spread: list  # max over tokens of |w_t - w_0| after each block
    mid: list  # prompt after the s-layers of each block
    after_update: list  # prompt after the update layer of each block
    layers: list = field(default_factory=list)  # (block, layer_index, kind, label, H) when recorded
    final: np.ndarray | None = None

    def iter_rows(self, layout: TokenLayout):
        """Rows (block, layer_index, layer_kind, token, slot, coord, value) of every recorded layer output."""
        slot_names = [layout.slot_of(r) for r in range(layout.D)]
        for block, idx, kind, _label, H in self.layers:
            for t in range(H.shape[1]):
                for r, (slot, coord) in enumerate(slot_names):
                    yield block, idx, kind, t, slot, coord, H[r, t]


def run_stack(
    stack: StackWeights,
    data: Dataset,
    w0: np.ndarray | None = None,
    record_layers: bool = False,
    check_slots: bool = True,
    backend: str | None = None,
) -> TraceRecord:
    plan = stack.plan
    lay = plan.layout
    w0 = np.zeros(plan.shape.n_params) if w0 is None else np.asarray(w0, dtype=float)
    H = encode_prompt(data, w0, lay).H
    wslot = lay.slot("w")
    written = [np.setdiff1d(np.arange(lay.D), layer.written_rows()) for layer in stack.block]
    N = plan.shape.N
    w_bar, spread, mid, after_update, recorded = [H[wslot, 0].copy()], [], [], [], []
    for blk in range(stack.L):
        for idx, layer in enumerate(stack.block):
            H_new = layer_forward(H, layer, backend)
            if check_slots:
                untouched = written[idx]
                if not np.array_equal(H_new[untouched], H[untouched]):
                    bad = untouched[np.any(H_new[untouched] != H[untouched], axis=1)]
                    raise SlotDisciplineError(f"layer {layer.label} changed rows outside its output slots: {bad[:5]}")
            H = H_new
            if idx == 2 * N + 1:
                mid.append(H.copy())
            elif idx == 2 * N + 2:
                after_update.append(H.copy())
            if record_layers:
                recorded.append((blk, idx, layer.kind, layer.label, H.copy()))
        W = H[wslot]
        spread.append(float(np.max(np.abs(W - W[:, :1]))))
        w_bar.append(W[:, 0].copy())
    return TraceRecord(np.array(w_bar), spread, mid, after_update, recorded, H)
