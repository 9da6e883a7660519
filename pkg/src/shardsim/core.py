"""Domain types shared by the planner, cost model, scheduler and simulators.

Quantities of model state are kept in parameter-count units as exact
``Fraction`` values; conversion to bytes happens only when reporting.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction


class ConfigError(ValueError):
    """Raised for invalid strategy codes, cluster shapes or model specs."""


class ShardLevel(enum.IntEnum):
    """Residency of one model-state component, ordered by rank."""

    NoShard = 0
    IntraGroup = 1
    Global = 2

    @property
    def letter(self) -> str:
        return "NIG"[self.value]

    @classmethod
    def from_letter(cls, ch: str) -> ShardLevel:
        return cls("NIG".index(ch))


@dataclass(frozen=True, order=True)
class Strategy:
    """Shard levels for parameters, gradients and optimizer state."""

    p: ShardLevel
    g: ShardLevel
    os: ShardLevel

    @property
    def code(self) -> str:
        return self.p.letter + self.g.letter + self.os.letter

    @property
    def grouped(self) -> bool:
        """True when any component is sharded within a group.

        Grouped strategies decompose world-reaching collectives into
        intra-group and inter-group steps; the pure N/G family uses flat
        world rings like ZeRO does.
        """
        return ShardLevel.IntraGroup in (self.p, self.g, self.os)

    def __str__(self) -> str:
        return self.code


def parse_strategy(code: str) -> Strategy:
    if not isinstance(code, str) or len(code) != 3:
        raise ConfigError(f"strategy code must have 3 characters, got {code!r}")
    for pos, ch in enumerate(code, start=1):
        if ch not in "NIG":
            raise ConfigError(f"invalid shard level {ch!r} at position {pos}")
    return Strategy(*(ShardLevel.from_letter(ch) for ch in code))


@dataclass(frozen=True)
class ClusterSpec:
    n_gpus: int
    group_size: int
    accum_steps: int = 1

    def __post_init__(self):
        for name in ("n_gpus", "group_size", "accum_steps"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.n_gpus % self.group_size:
            raise ConfigError("group_size must divide n_gpus")

    @property
    def n_groups(self) -> int:
        return self.n_gpus // self.group_size

    # short aliases matching the usual notation
    @property
    def N(self) -> int:
        return self.n_gpus

    @property
    def M(self) -> int:
        return self.group_size

    @property
    def g(self) -> int:
        return self.n_groups

    @property
    def s(self) -> int:
        return self.accum_steps

    def group_of(self, rank: int) -> int:
        return rank // self.group_size

    def position_of(self, rank: int) -> int:
        return rank % self.group_size


def validate_cluster(n_gpus: int, group_size: int, accum_steps: int = 1) -> ClusterSpec:
    return ClusterSpec(n_gpus, group_size, accum_steps)


class Regime(enum.Enum):
    """Trainable-parameter regimes, one per recommendation column."""

    Full = "full"
    PartialLarge = "partial-large"
    PartialSmall = "partial-small"
    PEFT = "peft"


@dataclass(frozen=True)
class ModelSpec:
    total_params: int
    trainable_params: int | None = None
    param_bytes: int = 2
    grad_bytes: int = 2
    optim_factor: int | Fraction = 12
    layers: int = 1
    peft: bool = False

    def __post_init__(self):
        if self.trainable_params is None:
            object.__setattr__(self, "trainable_params", self.total_params)
        if self.total_params < 0 or self.trainable_params < 0:
            raise ConfigError("parameter counts must be non-negative")
        if self.trainable_params > self.total_params:
            raise ConfigError("trainable_params must not exceed total_params")
        if self.param_bytes <= 0 or self.grad_bytes <= 0 or self.optim_factor <= 0:
            raise ConfigError("byte widths and optim_factor must be positive")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")

    @property
    def regime(self) -> Regime:
        if self.peft:
            return Regime.PEFT
        if self.trainable_params == self.total_params:
            return Regime.Full
        # Psi' >= Psi/6, kept in integers
        if 6 * self.trainable_params >= self.total_params:
            return Regime.PartialLarge
        return Regime.PartialSmall


@dataclass(frozen=True)
class NetworkSpec:
    """Two-tier link model: bandwidth in bytes/s per link, latency in s per round.

    Defaults follow an 8-GPU NVLink node (600 GB/s) joined by 100 GB/s
    InfiniBand; the latencies are effective per-round synchronization costs.
    """

    intra_bw: float = 600e9
    inter_bw: float = 100e9
    intra_latency: float = 10e-6
    inter_latency: float = 150e-6

    def __post_init__(self):
        if not (self.intra_bw > 0 and self.inter_bw > 0):
            raise ConfigError("bandwidths must be strictly positive")
        if self.intra_latency < 0 or self.inter_latency < 0:
            raise ConfigError("latencies must be non-negative")

    def bw(self, link: str) -> float:
        return self.intra_bw if link == "intra" else self.inter_bw

    def latency(self, link: str) -> float:
        return self.intra_latency if link == "intra" else self.inter_latency


# Named methods: the rows of the memory and volume tables.  ZeRO++ has no
# plain strategy code because it keeps a secondary intra-group copy of P.
METHODS: dict[str, str | None] = {
    "ddp": "NNN",
    "zero-1": "NNG",
    "zero-2": "NGG",
    "zero-3": "GGG",
    "mics": "III",
    "zero++": None,
    "paro-igg": "IGG",
    "paro-iig": "IIG",
    "paro-nig": "NIG",
}

TABLE_METHODS = ("zero-1", "zero-2", "zero-3", "mics", "zero++", "paro-igg", "paro-iig", "paro-nig")

DISPLAY_NAMES = {
    "ddp": "DDP",
    "zero-1": "ZeRO-1",
    "zero-2": "ZeRO-2",
    "zero-3": "ZeRO-3",
    "mics": "MiCS",
    "zero++": "ZeRO++",
    "paro-igg": "PaRO-IGG",
    "paro-iig": "PaRO-IIG",
    "paro-nig": "PaRO-NIG",
}


def normalize_method(name: str) -> str:
    key = name.strip().lower().replace("_", "-")
    if key not in METHODS:
        raise ConfigError(f"unknown method {name!r}; valid names: {', '.join(METHODS)}")
    return key


STAGES = ("Forward", "Backward", "Update")
# (stage, column) cells; a column is a collective kind on a target state
COLUMNS = ("AG(P)", "RS(G)", "AR(G)", "AG(G)")


@dataclass(frozen=True)
class Volume:
    intra: Fraction = Fraction(0)
    inter: Fraction = Fraction(0)

    @property
    def total(self) -> Fraction:
        return self.intra + self.inter

    def __add__(self, other: Volume) -> Volume:
        return Volume(self.intra + other.intra, self.inter + other.inter)


@dataclass
class VolumeReport:
    """Cluster-wide communication volume in parameter units per (stage, column)."""

    n_gpus: int
    cells: dict[tuple[str, str], Volume] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def add(self, stage: str, column: str, intra=0, inter=0) -> None:
        cur = self.cells.get((stage, column), Volume())
        self.cells[(stage, column)] = cur + Volume(Fraction(intra), Fraction(inter))

    def cell(self, stage: str, column: str) -> Volume:
        return self.cells.get((stage, column), Volume())

    def stage(self, stage: str) -> Volume:
        out = Volume()
        for (st, _), vol in self.cells.items():
            if st == stage:
                out = out + vol
        return out

    @property
    def intra(self) -> Fraction:
        return sum((v.intra for v in self.cells.values()), Fraction(0))

    @property
    def inter(self) -> Fraction:
        return sum((v.inter for v in self.cells.values()), Fraction(0))

    @property
    def total(self) -> Fraction:
        return self.intra + self.inter

    def per_gpu(self, stage: str) -> Volume:
        vol = self.stage(stage)
        return Volume(vol.intra / self.n_gpus, vol.inter / self.n_gpus)

    def nonzero_cells(self) -> dict[tuple[str, str], Volume]:
        return {k: v for k, v in self.cells.items() if v.total != 0}

    def same_volumes(self, other: VolumeReport) -> bool:
        return self.nonzero_cells() == other.nonzero_cells()

    def to_dict(self) -> dict:
        out = {}
        for stage in STAGES:
            vol = self.stage(stage)
            out[stage] = {
                "intra_params": as_number(vol.intra),
                "inter_params": as_number(vol.inter),
                "cells": {
                    col: {"intra_params": as_number(v.intra), "inter_params": as_number(v.inter)}
                    for (st, col), v in sorted(self.cells.items())
                    if st == stage and v.total != 0
                },
            }
        out["total_intra_params"] = as_number(self.intra)
        out["total_inter_params"] = as_number(self.inter)
        if self.notes:
            out["notes"] = list(self.notes)
        return out


def as_number(x):
    """Render an exact quantity as int when integral, else float."""
    x = Fraction(x)
    return int(x) if x.denominator == 1 else float(x)
