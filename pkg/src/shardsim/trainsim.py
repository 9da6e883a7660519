"""Numeric equivalence of sharded schedules against single-process training.

A small tanh MLP is trained with Adam on synthetic regression data, once in a
single process and once on N simulated ranks that follow a strategy's
schedule op by op, moving real float64 buffers through the ring simulator.
Both paths use identical element-wise Adam arithmetic and the same gradient
normalization (sum over samples divided by the global batch size), so the
only difference left is the order of floating-point summation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .core import ClusterSpec, ConfigError, ModelSpec, ShardLevel, Strategy, parse_strategy
from .netsim import SimCluster, chunk_index, scoped_collective
from .schedule import SchedulePlan, generate

LAYOUT_OF_LEVEL = {ShardLevel.NoShard: "FULL", ShardLevel.IntraGroup: "SEG", ShardLevel.Global: "CHUNK"}
_FINENESS = {"FULL": 0, "SEG": 1, "CHUNK": 2}
_TRANSITION = {
    ("AllGather", "IntraGroup"): "FULL",
    ("AllGather", "InterGroup"): "SEG",
    ("AllGather", "World"): "FULL",
    ("ReduceScatter", "IntraGroup"): "SEG",
    ("ReduceScatter", "InterGroup"): "CHUNK",
    ("ReduceScatter", "World"): "CHUNK",
}


@dataclass
class TinyModel:
    dims: tuple[int, ...]
    layers: list[np.ndarray]  # flat [W.ravel(), b] per layer

    @classmethod
    def init(cls, dims=(6, 16, 16, 3), seed: int = 0) -> TinyModel:
        rng = np.random.default_rng(seed)
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            b = rng.normal(0.0, 0.1, size=fan_out)
            layers.append(np.concatenate([w.ravel(), b]))
        return cls(tuple(dims), layers)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.layers)

    def copy_params(self) -> list[np.ndarray]:
        return [a.copy() for a in self.layers]

    def spec(self) -> ModelSpec:
        return ModelSpec(self.n_params, layers=len(self.layers))

    def unpack(self, i: int, flat: np.ndarray):
        fan_in, fan_out = self.dims[i], self.dims[i + 1]
        return flat[: fan_in * fan_out].reshape(fan_in, fan_out), flat[fan_in * fan_out : fan_in * fan_out + fan_out]


def forward_layer(model: TinyModel, i: int, flat, a):
    w, b = model.unpack(i, flat)
    z = a @ w + b
    return z if i == len(model.layers) - 1 else np.tanh(z)


def backward_layer(model: TinyModel, i: int, flat, a_in, a_out, d_out):
    """Gradient of the layer's flat parameters and of its input."""
    w, _ = model.unpack(i, flat)
    dz = d_out if i == len(model.layers) - 1 else d_out * (1.0 - a_out * a_out)
    grad = np.concatenate([(a_in.T @ dz).ravel(), dz.sum(axis=0)])
    return grad, dz @ w.T


def output_grad(y, t, scale):
    # loss = 0.5 * scale * sum((y - t)^2)
    return (y - t) * scale


@dataclass
class SyntheticData:
    n_in: int
    n_out: int
    global_batch: int
    seed: int = 0

    def batch(self, step: int):
        rng = np.random.default_rng([self.seed, step])
        x = rng.normal(size=(self.global_batch, self.n_in))
        proj = np.random.default_rng(self.seed).normal(size=(self.n_in, self.n_out))
        y = np.sin(x @ proj) + 0.1 * rng.normal(size=(self.global_batch, self.n_out))
        return x, y


@dataclass
class OptimizerState:
    """Adam state for a slice of parameters: fp master copy plus two moments.

    Three values per parameter, i.e. 12 bytes in fp32, matching the default
    optimizer factor of the memory model.
    """

    master: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray, **hyper) -> OptimizerState:
        return cls(params.copy(), np.zeros_like(params), np.zeros_like(params), **hyper)

    def apply(self, grad: np.ndarray) -> np.ndarray:
        self.step += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.step)
        v_hat = self.v / (1.0 - self.beta2**self.step)
        self.master = self.master - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return self.master

    @property
    def components(self) -> int:
        return 3


def _micro_rows(global_batch: int, n_ranks: int, accum: int, mb: int, rank: int | None):
    per = global_batch // (n_ranks * accum)
    if rank is None:
        return slice(mb * n_ranks * per, (mb + 1) * n_ranks * per)
    start = (mb * n_ranks + rank) * per
    return slice(start, start + per)


def run_baseline(model: TinyModel, data: SyntheticData, steps: int, accum_steps: int = 1,
                 n_ranks: int = 1, **adam) -> list[np.ndarray]:
    """Single-process training; micro-batch k is the union of every rank's k-th micro-batch."""
    if data.global_batch % (n_ranks * accum_steps):
        raise ConfigError("global batch must divide evenly into ranks x micro-batches")
    opt = [OptimizerState.zeros_like(p, **adam) for p in model.layers]
    params = model.copy_params()
    L = len(params)
    scale = 1.0 / data.global_batch
    for step in range(steps):
        x, y = data.batch(step)
        acc = [np.zeros_like(p) for p in params]
        for mb in range(accum_steps):
            rows = _micro_rows(data.global_batch, n_ranks, accum_steps, mb, None)
            acts = [x[rows]]
            for i in range(L):
                acts.append(forward_layer(model, i, params[i], acts[-1]))
            d = output_grad(acts[-1], y[rows], scale)
            for i in reversed(range(L)):
                grad, d = backward_layer(model, i, params[i], acts[i], acts[i + 1], d)
                acc[i] += grad
        params = [o.apply(gr).copy() for o, gr in zip(opt, acc)]
    return params


def snapshot_hash(params: list[np.ndarray]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class StrategyRun:
    params: list[np.ndarray]
    residency_ok: bool
    residency: dict[int, list[int]]
    bytes_intra: float = 0.0
    bytes_inter: float = 0.0
    notes: list[str] = field(default_factory=list)


class _ShardedRun:
    def __init__(self, strategy: Strategy, cluster: ClusterSpec, model: TinyModel, plan: SchedulePlan):
        self.s = strategy
        self.cluster = cluster
        self.sim = SimCluster(cluster)
        self.model = model
        self.plan = plan
        self.N = cluster.N
        self.sizes = [a.size for a in model.layers]
        self.padded = [-(-n // self.N) * self.N for n in self.sizes]
        self.bytes = {"intra": 0.0, "inter": 0.0}

    # -- layout helpers ---------------------------------------------------
    def take(self, full: np.ndarray, layout: str, r: int) -> np.ndarray:
        if layout == "FULL":
            return full.copy()
        if layout == "SEG":
            return np.split(full, self.cluster.M)[self.cluster.position_of(r)].copy()
        return np.split(full, self.N)[chunk_index(self.sim, r)].copy()

    def narrow(self, bufs, have: str, want: str):
        """Slice buffers down to a finer layout without communication."""
        if _FINENESS[want] < _FINENESS[have]:
            raise ConfigError(f"cannot narrow {have} to coarser {want}")
        if have == want:
            return bufs
        if have == "FULL":
            return [self.take(b, want, r) for r, b in enumerate(bufs)]
        # SEG -> CHUNK: sub-chunk j of segment p
        return [np.split(b, self.cluster.g)[self.cluster.group_of(r)].copy() for r, b in enumerate(bufs)]

    def apply(self, op, bufs, layout: str):
        out, trace = scoped_collective(self.sim, op.kind, op.scope, bufs, elem_bytes=8)
        for link, nbytes in trace.totals.items():
            self.bytes[link] += nbytes
        if op.kind == "AllReduce":
            return out, layout
        return out, _TRANSITION[(op.kind, op.scope)]

    def pad(self, flat: np.ndarray, i: int) -> np.ndarray:
        return np.concatenate([flat, np.zeros(self.padded[i] - flat.size)])

    # -- training ---------------------------------------------------------
    def run(self, data: SyntheticData, steps: int, adam: dict) -> StrategyRun:
        N, cl, L = self.N, self.cluster, len(self.sizes)
        p_layout = LAYOUT_OF_LEVEL[self.s.p]
        os_layout = LAYOUT_OF_LEVEL[self.s.os]
        init = [self.pad(a, i) for i, a in enumerate(self.model.layers)]
        # P residency per layer per rank; optimizer state on its own shard
        P = [[self.take(init[i], p_layout, r) for r in range(N)] for i in range(L)]
        OS = [[OptimizerState.zeros_like(self.take(init[i], os_layout, r), **adam) for r in range(N)] for i in range(L)]
        scale = 1.0 / data.global_batch
        if data.global_batch % (N * cl.s):
            raise ConfigError("global batch must divide evenly into ranks x micro-batches")

        update_g = [op for op in self.plan.ops if op.stage == "Update" and op.target == "G"]
        update_p = [op for op in self.plan.ops if op.stage == "Update" and op.target == "P"]
        residency: dict[int, list[int]] = {}
        ok = True
        for step in range(steps):
            x, y = data.batch(step)
            acc = [None] * L
            acc_layout = [None] * L
            for mb in range(cl.s):
                xs = [x[_micro_rows(data.global_batch, N, cl.s, mb, r)] for r in range(N)]
                ys = [y[_micro_rows(data.global_batch, N, cl.s, mb, r)] for r in range(N)]
                acts = [[xs[r]] for r in range(N)]
                for i in range(L):
                    w = self.full_weights(i, P[i], p_layout, "Forward", mb)
                    for r in range(N):
                        acts[r].append(forward_layer(self.model, i, w[r][: self.sizes[i]], acts[r][-1]))
                d = [output_grad(acts[r][-1], ys[r], scale) for r in range(N)]
                for i in reversed(range(L)):
                    w = self.full_weights(i, P[i], p_layout, "Backward", mb)
                    grads = []
                    for r in range(N):
                        gr, d[r] = backward_layer(self.model, i, w[r][: self.sizes[i]], acts[r][i], acts[r][i + 1], d[r])
                        grads.append(self.pad(gr, i))
                    layout = "FULL"
                    for op in self.plan.stage_ops("Backward", mb, i):
                        if op.target == "G":
                            grads, layout = self.apply(op, grads, layout)
                    if acc[i] is None:
                        acc[i], acc_layout[i] = grads, layout
                    else:
                        if layout != acc_layout[i]:
                            raise ConfigError("gradient layout changed between micro-batches")
                        acc[i] = [a + b for a, b in zip(acc[i], grads)]

            for i in range(L):
                grads, layout = acc[i], acc_layout[i]
                for op in update_g:
                    grads, layout = self.apply(op, grads, layout)
                grads = self.narrow(grads, layout, os_layout)
                master = [OS[i][r].apply(grads[r]).copy() for r in range(N)]
                layout = os_layout
                for op in update_p:
                    master, layout = self.apply(op, master, layout)
                P[i] = self.narrow(master, layout, p_layout)

            want = {"FULL": 1, "SEG": cl.M, "CHUNK": N}[p_layout]
            for r in range(N):
                residency[r] = [P[i][r].size for i in range(L)]
                if residency[r] != [self.padded[i] // want for i in range(L)]:
                    ok = False

        # rank 0's view of the full parameters, gathered through the plan's scopes
        full = []
        for i in range(L):
            bufs, layout = P[i], p_layout
            if layout == "CHUNK":
                bufs, layout = self.gather_to_full(bufs, layout)
            elif layout == "SEG":
                bufs, layout = self.gather_to_full(bufs, layout)
            full.append(bufs[0][: self.sizes[i]].copy())
        return StrategyRun(full, ok, residency, self.bytes["intra"], self.bytes["inter"])

    def full_weights(self, i, shards, p_layout, stage, mb):
        if p_layout == "FULL":
            return shards
        bufs, layout = shards, p_layout
        for op in self.plan.stage_ops(stage, mb, i):
            if op.target == "P":
                bufs, layout = self.apply(op, bufs, layout)
        # degenerate groupings make SEG or CHUNK coincide with FULL
        if bufs[0].size != self.padded[i]:
            raise ConfigError(f"{stage} gathers left parameters in layout {layout}")
        return bufs

    def gather_to_full(self, bufs, layout):
        from .schedule import CommOp

        c = self.cluster
        if layout == "CHUNK":
            if c.g > 1 and c.M > 1:
                bufs, layout = self.apply(CommOp("AllGather", "InterGroup", 0, "Update", "P"), bufs, layout)
            elif c.N > 1:
                return self.apply(CommOp("AllGather", "World", 0, "Update", "P"), bufs, layout)
            else:
                return bufs, "FULL"
        if layout == "SEG" and c.M > 1:
            scope = "IntraGroup" if c.g > 1 else "World"
            return self.apply(CommOp("AllGather", scope, 0, "Update", "P"), bufs, layout)
        return bufs, "FULL"


def run_strategy_detailed(strategy: Strategy | str, cluster: ClusterSpec, model: TinyModel,
                          data: SyntheticData, steps: int, **adam) -> StrategyRun:
    s = parse_strategy(strategy) if isinstance(strategy, str) else strategy
    plan = generate(s, cluster, model.spec())
    return _ShardedRun(s, cluster, model, plan).run(data, steps, adam)


def run_strategy(strategy, cluster: ClusterSpec, model: TinyModel, data: SyntheticData,
                 steps: int, **adam) -> list[np.ndarray]:
    return run_strategy_detailed(strategy, cluster, model, data, steps, **adam).params


def max_abs_diff(a: list[np.ndarray], b: list[np.ndarray]) -> float:
    return max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))


def audit_gradient_sync(strategy, cluster: ClusterSpec, layer_size: int = 0) -> np.ndarray:
    """Run one mini-batch of a plan's gradient ops on integer tags.

    Rank r contributes ``base**r`` to every element of every micro-batch
    gradient.  Returns, for each element of the OS shard on each rank, the
    decoded per-rank contribution counts (shape: ranks x elements x N).  A
    correct plan yields ``accum_steps`` for every rank everywhere.
    """
    s = parse_strategy(strategy) if isinstance(strategy, str) else strategy
    N = cluster.N
    size = layer_size or 2 * N
    if size % N:
        raise ConfigError("layer_size must be a multiple of N")
    plan = generate(s, cluster, ModelSpec(size, layers=1))
    runner = _ShardedRun(s, cluster, TinyModel((1, 1), [np.zeros(size)]), plan)
    base = 2 * cluster.s * N + 1
    acc, acc_layout = None, None
    for mb in range(cluster.s):
        grads = [np.full(size, base**r, dtype=np.int64) for r in range(N)]
        layout = "FULL"
        for op in plan.stage_ops("Backward", mb, 0):
            if op.target == "G":
                grads, layout = runner.apply(op, grads, layout)
        acc = grads if acc is None else [a + b for a, b in zip(acc, grads)]
        acc_layout = layout
    for op in plan.ops:
        if op.stage == "Update" and op.target == "G":
            acc, acc_layout = runner.apply(op, acc, acc_layout)
    acc = runner.narrow(acc, acc_layout, LAYOUT_OF_LEVEL[s.os])
    counts = []
    for buf in acc:
        digits = []
        rest = buf.copy()
        for _ in range(N):
            digits.append(rest % base)
            rest //= base
        if np.any(rest):
            raise AssertionError("contribution counts overflowed the tag base")
        counts.append(np.stack(digits, axis=-1))
    return np.stack(counts)
