"""Experiment configuration: a flat key/value document (TOML or JSON) with every field defaulted."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .network import DomainBox, NetworkShape

VERSION = "0.1.0"
SWEEP_AXES = ("N", "K", "L", "segments")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    N: int = 3
    K: int = 4
    d_x: int = 2
    d_y: int = 2
    n: int = 8
    L: int = 3
    eta: float = 0.05
    eps_target: float = 1e-2
    b: float = 1.0
    B_x: float | None = None  # default sqrt(d_x)
    B_y: float | None = None  # default sqrt(d_y)
    activation: str = "sigmoid"
    seed: int = 0
    mode: str = "approx"
    segments: int | None = None  # None: chosen from eps_target
    seg_cap: int = 1000
    head_cap: int = 100_000
    split: str = "conservative"
    sweep: dict = field(default_factory=dict)
    out: str = "icgd_out"

    def __post_init__(self):
        if self.mode not in ("exact", "approx"):
            raise ConfigError(f"mode must be 'exact' or 'approx', got {self.mode!r}")
        if self.split not in ("conservative", "two_thirds"):
            raise ConfigError(f"split must be 'conservative' or 'two_thirds', got {self.split!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        for ax, vals in self.sweep.items():
            if ax not in SWEEP_AXES:
                raise ConfigError(f"unknown sweep axis {ax!r}; allowed: {SWEEP_AXES}")
            if not isinstance(vals, list) or not vals:
                raise ConfigError(f"sweep axis {ax!r} needs a non-empty list")
        try:
            self.shape
            self.box
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not self.eta >= 0:
            raise ConfigError("eta must be nonnegative")
        if not self.eps_target > 0:
            raise ConfigError("eps_target must be positive")

    @property
    def shape(self) -> NetworkShape:
        return NetworkShape(self.d_x, self.d_y, self.K, self.N, self.n)

    @property
    def box(self) -> DomainBox:
        return DomainBox(self.b)

    @property
    def bx(self) -> float:
        return math.sqrt(self.d_x) if self.B_x is None else float(self.B_x)

    @property
    def by(self) -> float:
        return math.sqrt(self.d_y) if self.B_y is None else float(self.B_y)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**doc)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        """Short hash identifying the experiment, stamped on every report row.

        The output directory is left out: it says where results go, not what they are.
        """
        doc = self.to_dict()
        doc.pop("out")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        doc = json.loads(text)
    else:
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return ExperimentConfig.from_dict(doc)
