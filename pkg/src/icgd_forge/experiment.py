"""End-to-end pipeline shared by the CLI and the acceptance suite."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import analysis
from .activation import get_activation
from .builder import BlockPlan, StackWeights, TraceRecord, block_kinds, build_stack, make_plan, run_stack
from .config import ExperimentConfig
from .layers import param_norm
from .network import Dataset, NetworkParams, gd_trajectory, loss, random_instance

NORM_TOL = 1e-12


def make_dataset(cfg: ExperimentConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    return random_instance(cfg.shape, rng, cfg.b, get_activation(cfg.activation))


def make_cfg_plan(cfg: ExperimentConfig, data: Dataset) -> BlockPlan:
    return make_plan(
        cfg.shape, cfg.eta, cfg.box, cfg.bx, cfg.by, cfg.eps_target, cfg.mode, get_activation(cfg.activation),
        seg_cap=cfg.seg_cap, head_cap=cfg.head_cap, segments=cfg.segments, split=cfg.split,
    )


def norm_rows(plan: BlockPlan, stack: StackWeights) -> list[analysis.BoundRow]:
    """Each built layer's norm against the bound its construction is stated to meet.

    Bounds: 1 + K C1 for forward layers, 1 + K (N-1) C2 for the derivative
    layer, max(R3 + 1, C3) for the loss-gradient MLP, 1 for EWML layers and
    1 + 2 eta N K for the update layer. Exact-mode layers are skipped for
    the two sum-of-ReLU bounds (C1, C2 are undefined there).
    """
    s = plan.shape
    rows = []
    C3 = plan.u_hat.C
    for layer in stack.block:
        label = layer.label
        if label.startswith("forward") and plan.mode == "approx":
            bound = 1 + s.K * plan.r_hat.C
        elif label == "rprime" and plan.mode == "approx":
            bound = 1 + s.K * (s.N - 1) * plan.rp_hat.C
        elif label == "loss_grad":
            bound = max(plan.R3 + 1, C3)
        elif layer.kind == "ewml":
            bound = 1.0
        elif label == "update":
            bound = 1 + 2 * plan.eta * s.N * s.K
        else:
            continue
        rows.append(analysis.BoundRow(f"norm:{label}", bound * (1 + NORM_TOL), param_norm(layer)))
    return rows


@dataclass
class RunResult:
    cfg: ExperimentConfig
    data: Dataset
    plan: BlockPlan
    stack: StackWeights
    trace: TraceRecord
    gd: np.ndarray
    radii: analysis.RadiiReport  # with measured tolerances plugged in
    bound_rows: list
    norm_rows: list
    L_f: float
    envelope: list
    checks: dict = field(default_factory=dict)

    @property
    def deviations(self) -> np.ndarray:
        return np.linalg.norm(self.trace.w_bar - self.gd, axis=1)

    def trajectory_rows(self):
        act = get_activation(self.cfg.activation)
        for l, (wb, wg) in enumerate(zip(self.trace.w_bar, self.gd)):
            yield {
                "step": l,
                "deviation": float(np.linalg.norm(wb - wg)),
                "loss_oracle": loss(NetworkParams(self.cfg.shape, wg), self.data, act),
                "loss_stack": loss(NetworkParams(self.cfg.shape, wb), self.data, act),
                "envelope": self.envelope[l],
            }


def run_experiment(cfg: ExperimentConfig, estimate_lf: bool = True, backend: str | None = None, record_layers: bool = False) -> RunResult:
    act = get_activation(cfg.activation)
    data = make_dataset(cfg)
    plan = make_cfg_plan(cfg, data)
    stack = build_stack(plan, cfg.L)
    trace = run_stack(stack, data, record_layers=record_layers, backend=backend)
    gd = gd_trajectory(cfg.shape, data, cfg.eta, cfg.L, cfg.box, act)
    B_v = cfg.box.row_norm_bound(cfg.shape)
    me = plan.measured_eps or {"eps_r": 0.0, "eps_rp": 0.0, "eps_l": 0.0}
    radii = analysis.compute_radii(cfg.shape, act, cfg.bx, cfg.by, B_v, me["eps_r"], me["eps_rp"], me["eps_l"])
    lay = plan.layout
    rows: list[analysis.BoundRow] = []
    for l in range(cfg.L):
        w_after = trace.after_update[l][lay.slot("w"), 0]
        for r in analysis.deviation_rows(lay, trace.mid[l], trace.w_bar[l], w_after, cfg.eta, data, act, radii, f"block{l}:"):
            if plan.mode == "exact" and not r.quantity.endswith(("g_test_token", "preact_radius", "abs_s")):
                # exact mode has no approximation error; allow roundoff only
                r = analysis.BoundRow(r.quantity, max(r.bound, 1e-9), r.measured)
            rows.append(r)
    L_f = math.nan
    envelope = [math.nan] * (cfg.L + 1)
    if estimate_lf:
        rng = np.random.default_rng([cfg.seed, 1])
        L_f = analysis.estimate_gradient_lipschitz(cfg.shape, data, act, gd, rng)
        envelope = [analysis.accumulation_envelope(cfg.eps_target, L_f, cfg.n, l) for l in range(cfg.L + 1)]
    res = RunResult(cfg, data, plan, stack, trace, gd, radii, rows, norm_rows(plan, stack), L_f, envelope)
    res.checks = evaluate_checks(res)
    return res


def evaluate_checks(res: RunResult) -> dict:
    """Pass/fail of every gating check of a run (layer norms are reported but do not gate)."""
    cfg = res.cfg
    dev = res.deviations
    checks = {
        "layer_count": res.stack.n_layers == (2 * cfg.N + 4) * cfg.L and res.stack.kinds() == block_kinds(cfg.N) * cfg.L,
        "w_uniform": max(res.trace.w_spread, default=0.0) <= 1e-12,
        "bounds": all(r.ok for r in res.bound_rows),
    }
    if cfg.L >= 1:
        checks["first_step"] = bool(dev[1] <= cfg.eta * cfg.eps_target)
    if cfg.mode == "exact":
        checks["exact_trajectory"] = bool(np.max(dev) <= 1e-9)
    if not math.isnan(res.L_f):
        checks["envelope"] = bool(np.all(dev <= np.array(res.envelope)))
    return checks
