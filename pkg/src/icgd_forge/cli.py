"""Command-line driver: verify, sweep, build, oracle.

Every report starts with a "# icgd-forge v<version>" line (CSV) or carries
a "version" field (JSON), and every row carries the config hash.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis
from .activation import get_activation
from .builder import build_stack
from .config import SWEEP_AXES, VERSION, ConfigError, ExperimentConfig, load_config
from .experiment import make_cfg_plan, make_dataset, run_experiment
from .network import NetworkParams, gd_trajectory, instance_to_json, loss

log = logging.getLogger("icgd_forge")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ICGD_THREADS", "1")))
    except ValueError:
        return 1


class ReportWriter:
    """Writes tables as versioned CSV or as JSON, stamping the config hash on every row."""

    def __init__(self, out: Path, as_json: bool, digest: str):
        self.out = out
        self.as_json = as_json
        self.digest = digest
        out.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, rows: list[dict], columns: list[str]) -> Path:
        rows = [{"config_hash": self.digest, **{c: r[c] for c in columns}} for r in rows]
        if self.as_json:
            path = self.out / f"{name}.json"
            path.write_text(json.dumps({"version": VERSION, "rows": rows}, indent=1) + "\n")
            return path
        path = self.out / f"{name}.csv"
        buf = io.StringIO()
        buf.write(f"# icgd-forge v{VERSION}\n")
        w = csv.DictWriter(buf, fieldnames=["config_hash", *columns], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        path.write_text(buf.getvalue())
        return path


def _layer_of(quantity: str, N: int) -> int:
    name = quantity.split(":", 1)[1]
    if name.startswith("pbar["):
        return int(name[5:-1]) - 1
    if name.startswith("preact"):
        return N - 1
    if name.startswith("rpbar"):
        return N
    if name.startswith("g"):
        return N + 1 if not name.startswith("grad") else 2 * N + 2
    if name.startswith("sbar["):
        return N + 2 + (N - int(name[5:-1]))
    if name.startswith("abs_s"):
        return 2 * N + 1
    return -1


def cmd_verify(cfg: ExperimentConfig, as_json: bool) -> int:
    res = run_experiment(cfg, record_layers=True)
    out = ReportWriter(Path(cfg.out), as_json, cfg.digest())
    out.write("trajectory", list(res.trajectory_rows()), ["step", "deviation", "loss_oracle", "loss_stack", "envelope"])
    bound_rows = [r.to_dict() | {"ok": r.ok} for r in res.bound_rows + res.norm_rows]
    out.write("bounds", bound_rows, ["quantity", "bound", "measured", "ratio", "ok"])
    kinds = res.stack.kinds()
    dev_rows = []
    for r in res.bound_rows:
        block = int(r.quantity.split(":")[0][5:])
        idx = _layer_of(r.quantity, cfg.N)
        dev_rows.append({"block": block, "layer_index": idx, "layer_kind": kinds[idx] if idx >= 0 else "",
                         "quantity": r.quantity.split(":", 1)[1], "measured": r.measured, "bound": r.bound})
    out.write("deviations", dev_rows, ["block", "layer_index", "layer_kind", "quantity", "measured", "bound"])
    trace_rows = [dict(zip(("block", "layer_index", "layer_kind", "token", "slot", "coord", "value"), t))
                  for t in res.trace.iter_rows(res.plan.layout)]
    out.write("trace", trace_rows, ["block", "layer_index", "layer_kind", "token", "slot", "coord", "value"])
    (Path(cfg.out) / "plan.json").write_text(json.dumps(res.plan.to_doc() | {"config_hash": cfg.digest()}, indent=1))
    checks = res.checks
    summary = [{"check": k, "passed": v} for k, v in checks.items()]
    summary += [{"check": r.quantity, "passed": r.ok} for r in res.norm_rows if not r.ok]
    out.write("checks", summary, ["check", "passed"])
    for k, v in checks.items():
        print(f"{'PASS' if v else 'FAIL'} {k}")
    for r in res.norm_rows:
        print(f"{'ok  ' if r.ok else 'over'} {r.quantity}: {r.measured:.6g} vs stated {r.bound:.6g} (reported, not gating)")
    return 0 if all(checks.values()) else 1


def _sweep_cell(cfg: ExperimentConfig, params: dict) -> tuple[dict, float]:
    cell = cfg.replace(**params, sweep={})
    t0 = time.perf_counter()
    row = dict(params)
    try:
        res = run_experiment(cell)
        grad_rows = [r for r in res.bound_rows if r.quantity.endswith(":grad")]
        row.update(
            status="ok",
            grad_error=max(r.measured for r in grad_rows),
            grad_bound=min(r.bound for r in grad_rows),
            max_deviation=float(np.max(res.deviations)),
            envelope=float(res.envelope[-1]),
            bounds_ok=all(r.ok for r in res.bound_rows),
            checks_ok=all(res.checks.values()),
        )
    except (analysis.BudgetInfeasible, ValueError, OverflowError) as exc:
        row.update(status=f"error: {exc}", grad_error=float("nan"), grad_bound=float("nan"),
                   max_deviation=float("nan"), envelope=float("nan"), bounds_ok=False, checks_ok=False)
    return row, time.perf_counter() - t0


def cmd_sweep(cfg: ExperimentConfig, as_json: bool) -> int:
    if not cfg.sweep:
        print("sweep needs at least one axis in the config's [sweep] table", file=sys.stderr)
        return 2
    axes = [a for a in SWEEP_AXES if a in cfg.sweep]
    cells = [dict(zip(axes, combo)) for combo in itertools.product(*(cfg.sweep[a] for a in axes))]
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(lambda p: _sweep_cell(cfg, p), cells))
    out = ReportWriter(Path(cfg.out), as_json, cfg.digest())
    cols = axes + ["status", "grad_error", "grad_bound", "max_deviation", "envelope", "bounds_ok", "checks_ok"]
    out.write("sweep", [r for r, _ in results], cols)
    # wall-clock times vary run to run, so they live apart from the deterministic report
    out.write("sweep_timing", [dict(cell, runtime_s=t) for cell, (_, t) in zip(cells, results)], axes + ["runtime_s"])
    failed = [r for r, _ in results if not r["checks_ok"]]
    print(f"{len(cells)} cells, {len(failed)} failing")
    return 0 if not failed else 1


def cmd_build(cfg: ExperimentConfig, as_json: bool) -> int:
    data = make_dataset(cfg)
    plan = make_cfg_plan(cfg, data)
    stack = build_stack(plan, cfg.L)
    stack.save(Path(cfg.out) / "weights")
    print(f"wrote {len(stack.block)} layer files ({stack.n_layers} layers in the stack) to {Path(cfg.out) / 'weights'}")
    return 0


def cmd_oracle(cfg: ExperimentConfig, as_json: bool) -> int:
    act = get_activation(cfg.activation)
    data = make_dataset(cfg)
    traj = gd_trajectory(cfg.shape, data, cfg.eta, cfg.L, cfg.box, act)
    out = ReportWriter(Path(cfg.out), as_json, cfg.digest())
    rows = [{"step": l, "loss_oracle": loss(NetworkParams(cfg.shape, w), data, act), "w": " ".join(repr(float(x)) for x in w)}
            for l, w in enumerate(traj)]
    out.write("oracle", rows, ["step", "loss_oracle", "w"])
    (Path(cfg.out) / "instance.json").write_text(
        instance_to_json(NetworkParams(cfg.shape, traj[0]), data, cfg.activation, cfg.box, cfg.eta))
    return 0


COMMANDS = {"verify": cmd_verify, "sweep": cmd_sweep, "build": cmd_build, "oracle": cmd_oracle}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icgd-forge", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="TOML or JSON config file (defaults are used when omitted)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--mode", choices=["exact", "approx"])
    p.add_argument("--seed", type=int, help="unsigned 64-bit seed")
    p.add_argument("--json", action="store_true", help="write reports as JSON instead of CSV")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        overrides = {k: v for k, v in (("out", args.out), ("mode", args.mode), ("seed", args.seed)) if v is not None}
        cfg = cfg.replace(**overrides)
    except (ConfigError, OSError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg, args.json)
    except analysis.BudgetInfeasible as exc:
        print(f"infeasible: {exc} (binding: {exc.binding})", file=sys.stderr)
        return 3
    except OverflowError as exc:
        print(f"overflow: {exc}; try a smaller N", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
