"""Round-synchronous simulation of ring collectives on a grouped cluster.

Every collective is compiled to a list of rounds; each round is a list of
transfers (src, dst, buffer keys, copy-or-add).  Transfers read the sender's
state as of the start of the round, so a round is one bulk-synchronous step.
Payloads are real numpy arrays, which lets tests compare the result with a
brute-force oracle, while message sizes are counted in chunk elements times
``elem_bytes``.  Large payloads are simulated with short arrays and a large
``elem_bytes``: the arithmetic is identical, only the accounting scales.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .core import ClusterSpec, ConfigError, NetworkSpec, VolumeReport
from .costmodel import estimate_time, round_time

TOPOLOGIES = ("ring", "h-ring", "ho-ring")


@dataclass(frozen=True)
class Message:
    src: int
    dst: int
    nbytes: float
    link: str  # intra | inter


@dataclass
class Round:
    index: int
    phase: str
    messages: list[Message]

    def link_max(self) -> dict[str, float]:
        """Largest per-link byte count for each link class in this round."""
        per_link: dict[tuple[int, int], float] = defaultdict(float)
        kind = {}
        for m in self.messages:
            per_link[(m.src, m.dst)] += m.nbytes
            kind[(m.src, m.dst)] = m.link
        out: dict[str, float] = {}
        for pair, nbytes in per_link.items():
            out[kind[pair]] = max(out.get(kind[pair], 0), nbytes)
        return out


@dataclass
class SimTrace:
    topology: str
    collective: str
    rounds: list[Round] = field(default_factory=list)
    outputs: list[np.ndarray] | None = None
    network: NetworkSpec = field(default_factory=NetworkSpec)

    @property
    def totals(self) -> dict[str, float]:
        out = {"intra": 0, "inter": 0}
        for r in self.rounds:
            for m in r.messages:
                out[m.link] += m.nbytes
        return out

    @property
    def step_count(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.rounds:
            out[r.phase] = out.get(r.phase, 0) + 1
        return out

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)

    @property
    def simulated_time(self) -> float:
        return estimate_time(self.rounds, self.network)

    def sent_by_rank(self, link: str | None = None) -> dict[int, float]:
        out: dict[int, float] = defaultdict(float)
        for r in self.rounds:
            for m in r.messages:
                if link is None or m.link == link:
                    out[m.src] += m.nbytes
        return dict(out)

    def received_by_rank(self) -> dict[int, float]:
        out: dict[int, float] = defaultdict(float)
        for r in self.rounds:
            for m in r.messages:
                out[m.dst] += m.nbytes
        return dict(out)

    def extend(self, other: SimTrace) -> None:
        base = len(self.rounds)
        for r in other.rounds:
            self.rounds.append(Round(base + r.index, r.phase, r.messages))

    def to_jsonl(self) -> str:
        lines = []
        for r in self.rounds:
            row = {
                "round": r.index,
                "phase": r.phase,
                "messages": [[m.src, m.dst, _num(m.nbytes), m.link] for m in r.messages],
            }
            lines.append(json.dumps(row))
        return "\n".join(lines) + ("\n" if lines else "")

    def summary(self, n: int, m: int) -> dict:
        t = self.totals
        return {
            "topology": self.topology,
            "collective": self.collective,
            "N": n,
            "M": m,
            "bytes_intra": _num(t["intra"]),
            "bytes_inter": _num(t["inter"]),
            "rounds": self.n_rounds,
            "time_s": self.simulated_time,
        }


def _num(x):
    if isinstance(x, Fraction):
        return int(x) if x.denominator == 1 else float(x)
    if isinstance(x, float) and x.is_integer():
        return int(x)
    return x


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    fields = ["topology", "collective", "N", "M", "bytes_intra", "bytes_inter", "rounds", "time_s"]
    writer = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Cluster and execution engine

@dataclass
class SimCluster:
    topology: ClusterSpec
    network: NetworkSpec = field(default_factory=NetworkSpec)
    elem_bytes: float = 1

    @classmethod
    def build(cls, n: int, m: int, network: NetworkSpec | None = None, elem_bytes: float = 1):
        return cls(ClusterSpec(n, m), network or NetworkSpec(), elem_bytes)

    @property
    def N(self) -> int:
        return self.topology.N

    @property
    def M(self) -> int:
        return self.topology.M

    @property
    def g(self) -> int:
        return self.topology.g

    def group(self, r: int) -> int:
        return r // self.M

    def position(self, r: int) -> int:
        return r % self.M

    def rank(self, group: int, position: int) -> int:
        return group * self.M + position

    def link(self, a: int, b: int) -> str:
        return "inter" if self.group(a) != self.group(b) else "intra"

    def group_members(self, j: int) -> list[int]:
        return [self.rank(j, p) for p in range(self.M)]

    def position_members(self, p: int) -> list[int]:
        return [self.rank(j, p) for j in range(self.g)]


@dataclass(frozen=True)
class _Transfer:
    src: int
    dst: int
    keys: tuple
    add: bool


class _Engine:
    """Holds per-rank key->array stores and applies rounds of transfers."""

    def __init__(self, cluster: SimCluster, trace: SimTrace, elem_bytes=None):
        self.cluster = cluster
        self.trace = trace
        self.elem_bytes = cluster.elem_bytes if elem_bytes is None else elem_bytes
        self.store: list[dict] = [dict() for _ in range(cluster.N)]

    def run(self, phase: str, rounds: list[list[_Transfer]]) -> None:
        for transfers in rounds:
            if not transfers:
                continue
            payloads = [[self.store[t.src][k].copy() for k in t.keys] for t in transfers]
            messages = []
            for t, data in zip(transfers, payloads):
                dst = self.store[t.dst]
                for k, arr in zip(t.keys, data):
                    if t.add:
                        dst[k] = dst[k] + arr
                    else:
                        dst[k] = arr
                nbytes = sum(a.size for a in data) * self.elem_bytes
                messages.append(Message(t.src, t.dst, nbytes, self.cluster.link(t.src, t.dst)))
            self.trace.rounds.append(Round(len(self.trace.rounds), phase, messages))


def _ring_gather_rounds(members: list[int], owned: list[tuple]) -> list[list[_Transfer]]:
    """Ring all-gather: member i forwards the key group of member (i - t)."""
    P = len(members)
    return [
        [
            _Transfer(members[i], members[(i + 1) % P], owned[(i - t) % P], False)
            for i in range(P)
        ]
        for t in range(P - 1)
    ]


def _ring_reduce_rounds(members: list[int], segments: list[tuple]) -> list[list[_Transfer]]:
    """Ring reduce-scatter: member i ends holding the sum of segment i."""
    P = len(members)
    return [
        [
            _Transfer(members[i], members[(i + 1) % P], segments[(i - t - 1) % P], True)
            for i in range(P)
        ]
        for t in range(P - 1)
    ]


def _merge(*schedules: list[list[_Transfer]]) -> list[list[_Transfer]]:
    """Run several round lists concurrently, round t of each in the same step."""
    depth = max((len(s) for s in schedules), default=0)
    return [[t for s in schedules if i < len(s) for t in s[i]] for i in range(depth)]


def _check_shards(cluster: SimCluster, shards) -> list[np.ndarray]:
    if len(shards) != cluster.N:
        raise ConfigError(f"expected {cluster.N} shards, got {len(shards)}")
    arrays = [np.asarray(s) for s in shards]
    size = arrays[0].size
    if any(a.size != size for a in arrays):
        raise ConfigError("all shards must have the same size")
    return arrays


def _check_inputs(cluster: SimCluster, inputs) -> list[np.ndarray]:
    arrays = _check_shards(cluster, inputs)
    if arrays[0].size % cluster.N:
        raise ConfigError(f"input size {arrays[0].size} is not divisible by N={cluster.N}")
    return arrays


def _split(a: np.ndarray, parts: int) -> list[np.ndarray]:
    return np.split(np.asarray(a).ravel(), parts)


# ---------------------------------------------------------------------------
# All-gather variants.  Rank r contributes shard r; outputs are rank-ordered.

def ring_all_gather(cluster: SimCluster, shards, elem_bytes=None) -> SimTrace:
    arrays = _check_shards(cluster, shards)
    if cluster.N < 2:
        raise ConfigError("ring all-gather needs at least 2 ranks")
    trace = SimTrace("ring", "all-gather", network=cluster.network)
    eng = _Engine(cluster, trace, elem_bytes)
    for r, a in enumerate(arrays):
        eng.store[r][r] = a.ravel()
    ranks = list(range(cluster.N))
    eng.run("ring", _ring_gather_rounds(ranks, [(r,) for r in ranks]))
    trace.outputs = [np.concatenate([eng.store[r][k] for k in ranks]) for r in ranks]
    return trace


def h_ring_all_gather(cluster: SimCluster, shards, elem_bytes=None) -> SimTrace:
    """Intra-group gather, leader-only inter-group ring, intra-group broadcast."""
    if cluster.g < 2 or cluster.M < 2:
        trace = ring_all_gather(cluster, shards, elem_bytes)
        trace.topology = "h-ring"
        return trace
    arrays = _check_shards(cluster, shards)
    trace = SimTrace("h-ring", "all-gather", network=cluster.network)
    eng = _Engine(cluster, trace, elem_bytes)
    for r, a in enumerate(arrays):
        eng.store[r][r] = a.ravel()
    M, g = cluster.M, cluster.g
    block = [tuple(cluster.group_members(j)) for j in range(g)]

    eng.run("intra-gather", _merge(*(
        _ring_gather_rounds(cluster.group_members(j), [(r,) for r in block[j]]) for j in range(g)
    )))
    leaders = [cluster.rank(j, 0) for j in range(g)]
    eng.run("inter-leaders", _ring_gather_rounds(leaders, block))
    foreign = [tuple(k for jj in range(g) if jj != j for k in block[jj]) for j in range(g)]
    eng.run("intra-broadcast", [
        [_Transfer(cluster.rank(j, p), cluster.rank(j, p + 1), foreign[j], False) for j in range(g)]
        for p in range(M - 1)
    ])
    trace.outputs = [np.concatenate([eng.store[r][k] for k in range(cluster.N)]) for r in range(cluster.N)]
    return trace


def ho_ring_all_gather(cluster: SimCluster, shards, elem_bytes=None) -> SimTrace:
    """Concurrent intra- and inter-group rings, then one intra-group completion ring."""
    if cluster.g < 2 or cluster.M < 2:
        trace = ring_all_gather(cluster, shards, elem_bytes)
        trace.topology = "ho-ring"
        return trace
    arrays = _check_shards(cluster, shards)
    trace = SimTrace("ho-ring", "all-gather", network=cluster.network)
    eng = _Engine(cluster, trace, elem_bytes)
    for r, a in enumerate(arrays):
        eng.store[r][r] = a.ravel()
    M, g = cluster.M, cluster.g

    intra = [
        _ring_gather_rounds(cluster.group_members(j), [(r,) for r in cluster.group_members(j)])
        for j in range(g)
    ]
    inter = [
        _ring_gather_rounds(cluster.position_members(p), [(r,) for r in cluster.position_members(p)])
        for p in range(M)
    ]
    eng.run("overlap", _merge(*intra, *inter))
    # each rank now forwards the shards it got from the other groups
    completion = []
    for j in range(g):
        members = cluster.group_members(j)
        owned = [
            tuple(cluster.rank(k, p) for k in range(g) if k != j) for p in range(M)
        ]
        completion.append(_ring_gather_rounds(members, owned))
    eng.run("intra-complete", _merge(*completion))
    trace.outputs = [np.concatenate([eng.store[r][k] for k in range(cluster.N)]) for r in range(cluster.N)]
    return trace


# ---------------------------------------------------------------------------
# Reduce-scatter variants.  Every rank inputs N segments; rank r ends with
# segment r summed over all ranks.

def _load_segments(eng: _Engine, arrays, space="x"):
    N = eng.cluster.N
    for r, a in enumerate(arrays):
        for k, seg in enumerate(_split(a, N)):
            eng.store[r][(space, k)] = seg.copy()


def ring_reduce_scatter(cluster: SimCluster, inputs, elem_bytes=None) -> SimTrace:
    arrays = _check_inputs(cluster, inputs)
    if cluster.N < 2:
        raise ConfigError("ring reduce-scatter needs at least 2 ranks")
    trace = SimTrace("ring", "reduce-scatter", network=cluster.network)
    eng = _Engine(cluster, trace, elem_bytes)
    _load_segments(eng, arrays)
    ranks = list(range(cluster.N))
    eng.run("ring", _ring_reduce_rounds(ranks, [(("x", r),) for r in ranks]))
    trace.outputs = [eng.store[r][("x", r)] for r in ranks]
    return trace


def h_ring_reduce_scatter(cluster: SimCluster, inputs, elem_bytes=None) -> SimTrace:
    """Dual of h_ring_all_gather: chain-reduce foreign blocks to the leader,
    leader-only inter-group ring, then intra-group ring reduce-scatter."""
    if cluster.g < 2 or cluster.M < 2:
        trace = ring_reduce_scatter(cluster, inputs, elem_bytes)
        trace.topology = "h-ring"
        return trace
    arrays = _check_inputs(cluster, inputs)
    trace = SimTrace("h-ring", "reduce-scatter", network=cluster.network)
    eng = _Engine(cluster, trace, elem_bytes)
    _load_segments(eng, arrays)
    M, g = cluster.M, cluster.g
    block = [tuple(("x", r) for r in cluster.group_members(j)) for j in range(g)]
    foreign = [tuple(k for jj in range(g) if jj != j for k in block[jj]) for j in range(g)]
    eng.run("intra-reduce", [
        [_Transfer(cluster.rank(j, p), cluster.rank(j, p - 1), foreign[j], True) for j in range(g)]
        for p in range(M - 1, 0, -1)
    ])
    leaders = [cluster.rank(j, 0) for j in range(g)]
    eng.run("inter-leaders", _ring_reduce_rounds(leaders, block))
    eng.run("intra-scatter", _merge(*(
        _ring_reduce_rounds(cluster.group_members(j), [(k,) for k in block[j]]) for j in range(g)
    )))
    trace.outputs = [eng.store[r][("x", r)] for r in range(cluster.N)]
    return trace


def ho_ring_reduce_scatter(cluster: SimCluster, inputs, elem_bytes=None) -> SimTrace:
    """Dual of ho_ring_all_gather.

    An intra-group ring first reduces, for every position p, the chunks that
    belong to position p of the other groups.  Then, concurrently, an
    inter-group ring per position sums those group partials into a separate
    accumulator while an intra-group ring reduce-scatters the group's own
    chunks; the final segment is the sum of the two accumulators.
    """
    if cluster.g < 2 or cluster.M < 2:
        trace = ring_reduce_scatter(cluster, inputs, elem_bytes)
        trace.topology = "ho-ring"
        return trace
    arrays = _check_inputs(cluster, inputs)
    trace = SimTrace("ho-ring", "reduce-scatter", network=cluster.network)
    eng = _Engine(cluster, trace, elem_bytes)
    _load_segments(eng, arrays)
    M, g = cluster.M, cluster.g

    first = []
    for j in range(g):
        members = cluster.group_members(j)
        segs = [tuple(("x", cluster.rank(k, p)) for k in range(g) if k != j) for p in range(M)]
        first.append(_ring_reduce_rounds(members, segs))
    eng.run("intra-prereduce", _merge(*first))

    # inter-group accumulator: group partials for foreign chunks, zero for own
    for r in range(cluster.N):
        j, p = cluster.group(r), cluster.position(r)
        for k in range(g):
            key = ("x", cluster.rank(k, p))
            eng.store[r][("y",) + key[1:]] = (
                np.zeros_like(eng.store[r][key]) if k == j else eng.store[r][key]
            )
    inter = [
        _ring_reduce_rounds(cluster.position_members(p), [(("y", r),) for r in cluster.position_members(p)])
        for p in range(M)
    ]
    intra = [
        _ring_reduce_rounds(cluster.group_members(j), [(("x", r),) for r in cluster.group_members(j)])
        for j in range(g)
    ]
    eng.run("overlap", _merge(*inter, *intra))
    trace.outputs = [eng.store[r][("x", r)] + eng.store[r][("y", r)] for r in range(cluster.N)]
    return trace


ALL_GATHER = {"ring": ring_all_gather, "h-ring": h_ring_all_gather, "ho-ring": ho_ring_all_gather}
REDUCE_SCATTER = {"ring": ring_reduce_scatter, "h-ring": h_ring_reduce_scatter, "ho-ring": ho_ring_reduce_scatter}


def run_collective(cluster: SimCluster, topology: str, collective: str, data, elem_bytes=None) -> SimTrace:
    table = {"all-gather": ALL_GATHER, "reduce-scatter": REDUCE_SCATTER}.get(collective)
    if table is None or topology not in table:
        raise ConfigError(f"unsupported combination {topology!r}/{collective!r}")
    return table[topology](cluster, data, elem_bytes)


# ---------------------------------------------------------------------------
# Scoped collectives on per-rank buffers (used to run schedule ops)
#
# Layouts follow schedule.py: FULL, SEG (segment p of M), CHUNK (global chunk
# p*g + j at group j, position p).

def chunk_index(cluster: SimCluster, r: int) -> int:
    return cluster.position(r) * cluster.g + cluster.group(r)


def _communicators(cluster: SimCluster, scope: str) -> list[list[int]]:
    if scope == "IntraGroup":
        return [cluster.group_members(j) for j in range(cluster.g)]
    if scope == "InterGroup":
        return [cluster.position_members(p) for p in range(cluster.M)]
    if scope == "World":
        return [list(range(cluster.N))]
    raise ConfigError(f"unknown scope {scope!r}")


def scoped_collective(cluster: SimCluster, kind: str, scope: str, buffers, elem_bytes=None,
                      world_topology: str = "ring") -> tuple[list[np.ndarray], SimTrace]:
    """Run one schedule op over every communicator of ``scope`` concurrently.

    AllGather: each rank contributes its buffer; result is the communicator's
    concatenation (World gathers are reordered into chunk order).
    ReduceScatter: each buffer is split into P parts; member i gets part i
    summed (World inputs are taken in chunk order).  AllReduce: ring
    reduce-scatter followed by ring all-gather.
    """
    bufs = [np.asarray(b).ravel() for b in buffers]
    trace = SimTrace(world_topology if scope == "World" else "ring", kind, network=cluster.network)
    if scope == "World":
        return _world_collective(cluster, kind, bufs, elem_bytes, world_topology, trace)

    comms = _communicators(cluster, scope)
    eng = _Engine(cluster, trace, elem_bytes)
    out: list[np.ndarray | None] = [None] * cluster.N
    if kind == "AllGather":
        for comm in comms:
            for r in comm:
                eng.store[r][r] = bufs[r]
        eng.run(f"{scope}-gather", _merge(*(
            _ring_gather_rounds(comm, [(r,) for r in comm]) for comm in comms
        )))
        for comm in comms:
            for r in comm:
                out[r] = np.concatenate([eng.store[r][q] for q in comm])
        return out, trace
    if kind in ("ReduceScatter", "AllReduce"):
        for comm in comms:
            P = len(comm)
            for r in comm:
                for i, part in enumerate(_split(bufs[r], P)):
                    eng.store[r][(comm[i], "s")] = part.copy()
        eng.run(f"{scope}-reduce", _merge(*(
            _ring_reduce_rounds(comm, [((q, "s"),) for q in comm]) for comm in comms
        )))
        if kind == "AllReduce":
            eng.run(f"{scope}-gather", _merge(*(
                _ring_gather_rounds(comm, [((q, "s"),) for q in comm]) for comm in comms
            )))
            for comm in comms:
                for r in comm:
                    out[r] = np.concatenate([eng.store[r][(q, "s")] for q in comm])
        else:
            for r in range(cluster.N):
                out[r] = eng.store[r][(r, "s")]
        return out, trace
    raise ConfigError(f"unknown collective kind {kind!r}")


def _world_collective(cluster, kind, bufs, elem_bytes, topology, trace):
    N = cluster.N
    # rank r holds (or receives) global chunk sigma(r)
    sigma = [chunk_index(cluster, r) for r in range(N)]
    if kind == "AllGather":
        sub = ALL_GATHER[topology](cluster, bufs, elem_bytes)
        out = []
        for r in range(N):
            pieces = _split(sub.outputs[r], N)
            ordered = [None] * N
            for src, piece in enumerate(pieces):
                ordered[sigma[src]] = piece
            out.append(np.concatenate(ordered))
    elif kind == "ReduceScatter":
        permuted = []
        for b in bufs:
            chunks = _split(b, N)
            permuted.append(np.concatenate([chunks[sigma[r]] for r in range(N)]))
        sub = REDUCE_SCATTER[topology](cluster, permuted, elem_bytes)
        out = list(sub.outputs)
    elif kind == "AllReduce":
        ranks = list(range(N))
        sub = SimTrace(topology, kind, network=cluster.network)
        eng = _Engine(cluster, sub, elem_bytes)
        for r in ranks:
            for i, part in enumerate(_split(bufs[r], N)):
                eng.store[r][i] = part.copy()
        eng.run("World-reduce", _ring_reduce_rounds(ranks, [(i,) for i in ranks]))
        eng.run("World-gather", _ring_gather_rounds(ranks, [(i,) for i in ranks]))
        out = [np.concatenate([eng.store[r][i] for i in ranks]) for r in ranks]
    else:
        raise ConfigError(f"unknown collective kind {kind!r}")
    trace.extend(sub)
    return out, trace


# ---------------------------------------------------------------------------
# Plan execution

def _op_buffer_size(op, cluster: SimCluster) -> Fraction:
    """Per-rank input buffer size of an op, in parameters."""
    from .schedule import participants

    D = Fraction(op.payload_params)
    P = participants(op.scope, cluster.topology)
    return D / P if op.kind == "AllGather" else D


def _max_divisor(n: Fraction, cap: int) -> int:
    if n.denominator != 1:
        raise ConfigError(f"buffer size {n} is not a whole number of parameters")
    n = int(n)
    return max(d for d in range(1, min(cap, n) + 1) if n % d == 0)


def execute_plan(cluster: SimCluster, plan, topology: dict | None = None, seed: int = 0,
                 max_elems: int = 64) -> tuple[SimTrace, VolumeReport]:
    """Run every op of a plan on random integer payloads.

    Each op's buffer is represented by at most ``max_elems`` elements, each
    standing for an equal share of its parameters, so the trace counts
    parameters exactly.  ``topology`` may map "World" or "hierarchical" to a
    topology name; "hierarchical": "ho-ring" runs each fused intra+inter pair
    as one HO-Ring collective.  Every collective's output is checked against
    a brute-force oracle.
    """
    topology = topology or {}
    world_topo = topology.get("World", "ring")
    fuse_topo = topology.get("hierarchical")
    if world_topo not in TOPOLOGIES or (fuse_topo and fuse_topo not in TOPOLOGIES):
        raise ConfigError(f"unknown topology in {topology!r}")
    if plan.cluster.N != cluster.N or plan.cluster.M != cluster.M:
        raise ConfigError("plan scopes do not match the simulated cluster grouping")
    rng = np.random.default_rng(seed)
    trace = SimTrace("plan", plan.label, network=cluster.network)
    report = VolumeReport(cluster.N)
    if plan.extrapolated:
        report.notes.append(f"{plan.label}: schedule extrapolated beyond the validated method rows")
    ops = list(plan.ops)
    i = 0
    while i < len(ops):
        op = ops[i]
        group = [op]
        if fuse_topo and op.fuse is not None:
            while i + len(group) < len(ops) and ops[i + len(group)].fuse == op.fuse:
                group.append(ops[i + len(group)])
        i += len(group)
        if len(group) == 2:
            sub = _run_fused(cluster, group, fuse_topo, rng, max_elems)
        else:
            sub = _run_single(cluster, op, world_topo, rng, max_elems)
        for r in sub.rounds:
            for m in r.messages:
                report.add(op.stage, op.column, **{m.link: m.nbytes})
        trace.extend(sub)
    return trace, report


def _run_single(cluster, op, world_topo, rng, max_elems) -> SimTrace:
    size = _op_buffer_size(op, cluster)
    P = {"IntraGroup": cluster.M, "InterGroup": cluster.g, "World": cluster.N}[op.scope]
    per_part = size if op.kind == "AllGather" else size / P
    k = _max_divisor(per_part, max_elems)
    n = k if op.kind == "AllGather" else k * P
    weight = Fraction(per_part) / k
    bufs = [rng.integers(-1000, 1000, size=n) for _ in range(cluster.N)]
    out, sub = scoped_collective(cluster, op.kind, op.scope, bufs, weight, world_topo)
    _check_scoped(cluster, op.kind, op.scope, bufs, out)
    return sub


def _run_fused(cluster, group, topo, rng, max_elems) -> SimTrace:
    """A fused intra+inter pair: one world-reaching collective over C-sized chunks."""
    first = group[0]
    full = Fraction(first.payload_params) * (1 if first.scope == "IntraGroup" else cluster.M)
    C = full / cluster.N
    k = _max_divisor(C, max_elems)
    weight = C / k
    if first.kind == "ReduceScatter":
        bufs = [rng.integers(-1000, 1000, size=k * cluster.N) for _ in range(cluster.N)]
        sub = REDUCE_SCATTER[topo](cluster, bufs, weight)
        expect = np.sum(bufs, axis=0)
        for r in range(cluster.N):
            _assert_equal(sub.outputs[r], _split(expect, cluster.N)[r], f"{topo} reduce-scatter rank {r}")
    else:
        bufs = [rng.integers(-1000, 1000, size=k) for _ in range(cluster.N)]
        sub = ALL_GATHER[topo](cluster, bufs, weight)
        expect = np.concatenate(bufs)
        for r in range(cluster.N):
            _assert_equal(sub.outputs[r], expect, f"{topo} all-gather rank {r}")
    return sub


class OracleMismatch(AssertionError):
    pass


def _assert_equal(got, want, where):
    got, want = np.asarray(got), np.asarray(want)
    if got.shape != want.shape or not np.array_equal(got, want):
        bad = np.flatnonzero(got != want) if got.shape == want.shape else []
        loc = f" first differing element {int(bad[0])}" if len(bad) else ""
        raise OracleMismatch(f"oracle mismatch in {where}{loc}")


def oracle_scoped(cluster: SimCluster, kind: str, scope: str, bufs) -> list[np.ndarray]:
    """Brute-force result of a scoped collective, independent of the ring code."""
    N = cluster.N
    out = []
    for r in range(N):
        if scope == "World":
            comm = list(range(N))
        elif scope == "IntraGroup":
            comm = cluster.group_members(cluster.group(r))
        else:
            comm = cluster.position_members(cluster.position(r))
        P = len(comm)
        if kind == "AllGather":
            if scope == "World":
                by_chunk = sorted(comm, key=lambda q: chunk_index(cluster, q))
                out.append(np.concatenate([bufs[q] for q in by_chunk]))
            else:
                out.append(np.concatenate([bufs[q] for q in comm]))
            continue
        total = np.sum([bufs[q] for q in comm], axis=0)
        if kind == "AllReduce":
            out.append(total)
            continue
        idx = chunk_index(cluster, r) if scope == "World" else comm.index(r)
        out.append(_split(total, P)[idx])
    return out


def _check_scoped(cluster, kind, scope, bufs, out):
    want = oracle_scoped(cluster, kind, scope, bufs)
    for r in range(cluster.N):
        _assert_equal(out[r], want[r], f"{kind}/{scope} rank {r}")
