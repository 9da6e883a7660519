"""Per-iteration collective schedules for any sharding strategy.

Buffer layouts used throughout (for a flat per-layer vector of size F):

* FULL  -- the whole vector;
* SEG   -- segment ``p`` of ``M`` equal segments, held by group position ``p``;
* CHUNK -- sub-chunk ``j`` of segment ``p`` (global chunk index ``p*g + j``),
  held by the rank at group ``j``, position ``p``.

Intra-group collectives move between FULL and SEG, inter-group collectives
between SEG and CHUNK, flat world collectives between FULL and CHUNK.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from itertools import count

from .core import (
    METHODS,
    ClusterSpec,
    ModelSpec,
    ShardLevel,
    Strategy,
    VolumeReport,
    normalize_method,
    parse_strategy,
)

N_, I_, G_ = ShardLevel.NoShard, ShardLevel.IntraGroup, ShardLevel.Global

# Strategy codes whose schedules are checked against the published volume rows.
VALIDATED_CODES = frozenset({"NNG", "NGG", "GGG", "III", "IGG", "IIG", "NIG"})


@dataclass(frozen=True)
class CommOp:
    kind: str  # AllGather | ReduceScatter | AllReduce
    scope: str  # IntraGroup | InterGroup | World
    payload_params: Fraction  # buffer size per communicator (gathered / pre-scatter)
    stage: str  # Forward | Backward | Update
    target: str  # P | G
    layer: int | None = None
    micro_batch: int | None = None
    fuse: int | None = None  # ops sharing an id form one hierarchical world collective

    @property
    def column(self) -> str:
        short = {"AllGather": "AG", "ReduceScatter": "RS", "AllReduce": "AR"}[self.kind]
        return f"{short}({self.target})"

    def to_dict(self) -> dict:
        d = asdict(self)
        p = Fraction(self.payload_params)
        d["payload_params"] = int(p) if p.denominator == 1 else str(p)
        return d


@dataclass(frozen=True)
class SchedulePlan:
    ops: tuple[CommOp, ...]
    strategy: Strategy | None
    cluster: ClusterSpec
    method: str | None = None
    extrapolated: bool = False

    @property
    def label(self) -> str:
        return self.method or self.strategy.code

    def stage_ops(self, stage: str, micro_batch: int | None = None, layer: int | None = None):
        return [
            op
            for op in self.ops
            if op.stage == stage
            and (micro_batch is None or op.micro_batch == micro_batch)
            and (layer is None or op.layer == layer)
        ]

    def to_json(self) -> str:
        body = {
            "label": self.label,
            "strategy": self.strategy.code if self.strategy else None,
            "cluster": asdict(self.cluster),
            "extrapolated": self.extrapolated,
            "ops": [op.to_dict() for op in self.ops],
        }
        return json.dumps(body, indent=1, sort_keys=True)


class _Emitter:
    """Appends ops, collapsing scopes that degenerate when g == 1 or M == 1."""

    def __init__(self, cluster: ClusterSpec):
        self.cluster = cluster
        self.ops: list[CommOp] = []
        self._fuse_ids = count()

    def payload(self, kind: str, scope: str, full: Fraction) -> Fraction:
        # inter-group collectives act on one segment of the full buffer
        return full / self.cluster.M if scope == "InterGroup" else full

    def emit(self, kind, scope, full, stage, target, layer=None, mb=None, fuse=None):
        c = self.cluster
        payload = self.payload(kind, scope, Fraction(full))
        if scope == "IntraGroup":
            if c.M == 1:
                return
            if c.g == 1:
                scope = "World"
        elif scope == "InterGroup":
            if c.g == 1:
                return
            if c.M == 1:
                scope = "World"
        if scope == "World" and c.N == 1:
            return
        if payload == 0:
            return
        self.ops.append(CommOp(kind, scope, payload, stage, target, layer, mb, fuse))

    def hierarchical(self, kind, steps, full, stage, target, layer=None, mb=None):
        """Two-step decomposition of a world-reaching collective."""
        fid = next(self._fuse_ids) if self.cluster.g > 1 and self.cluster.M > 1 else None
        for scope in steps:
            self.emit(kind, scope, full, stage, target, layer, mb, fid)


def _reduce_grads(em: _Emitter, s: Strategy, full, stage, layer=None, mb=None):
    """Per-micro-batch gradient reduction to the level of s.g."""
    if s.g == G_:
        if s.grouped:
            em.hierarchical("ReduceScatter", ("IntraGroup", "InterGroup"), full, stage, "G", layer, mb)
        else:
            em.emit("ReduceScatter", "World", full, stage, "G", layer, mb)
    elif s.g == I_:
        em.emit("ReduceScatter", "IntraGroup", full, stage, "G", layer, mb)


def _gather(em: _Emitter, s: Strategy, have: ShardLevel, want: ShardLevel, full, stage, target):
    """All-gathers that coarsen a buffer from level ``have`` to level ``want``."""
    if want >= have:
        return
    if have == G_ and want == I_:
        em.emit("AllGather", "InterGroup", full, stage, target)
    elif have == I_ and want == N_:
        em.emit("AllGather", "IntraGroup", full, stage, target)
    elif s.grouped:  # G -> N
        em.hierarchical("AllGather", ("InterGroup", "IntraGroup"), full, stage, target)
    else:
        em.emit("AllGather", "World", full, stage, target)


def _reconcile(em: _Emitter, s: Strategy, full) -> None:
    """Once per mini-batch: make globally reduced gradients available at the OS level."""
    stage = "Update"
    if s.g == G_:
        have = G_
    elif s.g == I_:
        if s.os == G_:
            em.emit("ReduceScatter", "InterGroup", full, stage, "G")
            have = G_
        else:
            em.emit("AllReduce", "InterGroup", full, stage, "G")
            have = I_
    else:  # local accumulation only
        if not s.grouped:
            em.emit("AllReduce", "World", full, stage, "G")
            have = N_
        elif s.os == N_:
            em.emit("ReduceScatter", "IntraGroup", full, stage, "G")
            em.emit("AllReduce", "InterGroup", full, stage, "G")
            em.emit("AllGather", "IntraGroup", full, stage, "G")
            have = N_
        elif s.os == I_:
            em.emit("ReduceScatter", "IntraGroup", full, stage, "G")
            em.emit("AllReduce", "InterGroup", full, stage, "G")
            have = I_
        else:
            em.hierarchical("ReduceScatter", ("IntraGroup", "InterGroup"), full, stage, "G")
            have = G_
    _gather(em, s, have, s.os, full, stage, "G")


def generate(strategy: Strategy | str, cluster: ClusterSpec, model: ModelSpec) -> SchedulePlan:
    s = parse_strategy(strategy) if isinstance(strategy, str) else strategy
    em = _Emitter(cluster)
    L = model.layers
    p_layer = Fraction(model.total_params, L)
    g_layer = Fraction(model.trainable_params, L)
    gather_scope = {I_: "IntraGroup", G_: "World"}.get(s.p)

    for mb in range(cluster.s):
        if gather_scope:
            for layer in range(L):
                em.emit("AllGather", gather_scope, p_layer, "Forward", "P", layer, mb)
        for layer in reversed(range(L)):
            if gather_scope:
                em.emit("AllGather", gather_scope, p_layer, "Backward", "P", layer, mb)
            _reduce_grads(em, s, g_layer, "Backward", layer, mb)

    _reconcile(em, s, model.trainable_params)
    # only updated (trainable) parameters need restoring to their residency
    _gather(em, s, s.os, s.p, model.trainable_params, "Update", "P")
    return SchedulePlan(tuple(em.ops), s, cluster, extrapolated=s.code not in VALIDATED_CODES)


def _generate_zeropp(cluster: ClusterSpec, model: ModelSpec) -> SchedulePlan:
    """Global shards plus a secondary intra-group copy of gathered parameters."""
    em = _Emitter(cluster)
    L = model.layers
    p_layer = Fraction(model.total_params, L)
    g_layer = Fraction(model.trainable_params, L)
    for mb in range(cluster.s):
        for layer in range(L):
            em.emit("AllGather", "World", p_layer, "Forward", "P", layer, mb)
        for layer in reversed(range(L)):
            em.emit("AllGather", "IntraGroup", p_layer, "Backward", "P", layer, mb)
            em.emit("ReduceScatter", "World", g_layer, "Backward", "G", layer, mb)
    return SchedulePlan(tuple(em.ops), None, cluster, method="zero++")


def generate_method(name: str, cluster: ClusterSpec, model: ModelSpec) -> SchedulePlan:
    key = normalize_method(name)
    if METHODS[key] is None:
        return _generate_zeropp(cluster, model)
    plan = generate(METHODS[key], cluster, model)
    return SchedulePlan(plan.ops, plan.strategy, cluster, method=key)


def plan_for(method_or_strategy, cluster: ClusterSpec, model: ModelSpec) -> SchedulePlan:
    """Accepts a Strategy, a 3-letter code or a named method."""
    if isinstance(method_or_strategy, Strategy):
        return generate(method_or_strategy, cluster, model)
    text = str(method_or_strategy)
    if len(text) == 3 and set(text) <= set("NIG"):
        return generate(text, cluster, model)
    return generate_method(text, cluster, model)


def participants(scope: str, cluster: ClusterSpec) -> int:
    return {"IntraGroup": cluster.M, "InterGroup": cluster.g, "World": cluster.N}[scope]


def world_inter_edges(cluster: ClusterSpec) -> int:
    """Group-boundary edges in the rank-ordered world ring."""
    return cluster.g if cluster.g > 1 else 0


def op_volume(op: CommOp, cluster: ClusterSpec) -> tuple[Fraction, Fraction]:
    """(intra, inter) cluster-wide volume of one op under ring accounting.

    Each participant of a P-rank ring collective over payload D sends
    D*(P-1)/P; an all-reduce sends twice that.
    """
    P = participants(op.scope, cluster)
    total = cluster.N * Fraction(op.payload_params) * (P - 1) / P
    if op.kind == "AllReduce":
        total *= 2
    if op.scope == "IntraGroup":
        return total, Fraction(0)
    if op.scope == "InterGroup":
        return Fraction(0), total
    inter = total * world_inter_edges(cluster) / cluster.N
    return total - inter, inter


def count_volumes(plan: SchedulePlan) -> VolumeReport:
    report = VolumeReport(plan.cluster.N)
    for op in plan.ops:
        intra, inter = op_volume(op, plan.cluster)
        report.add(op.stage, op.column, intra, inter)
    if plan.extrapolated:
        report.notes.append(f"{plan.label}: schedule extrapolated beyond the validated method rows")
    return report
