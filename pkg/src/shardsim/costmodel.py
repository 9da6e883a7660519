"""Closed-form memory, communication volume and time estimates.

Volumes are cluster-wide totals in parameter units, split into traffic on
intra-group links and on inter-group links.  ``comm_volume`` returns the
ring-accounted model used everywhere else in the package; ``published_volume_rows``
keeps the published cells verbatim so that the few cells where the two
disagree can be reported instead of silently absorbed.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .core import (
    METHODS,
    ClusterSpec,
    ModelSpec,
    NetworkSpec,
    ShardLevel,
    Strategy,
    Volume,
    VolumeReport,
    as_number,
    normalize_method,
    parse_strategy,
)

F = Fraction


@dataclass(frozen=True)
class MemoryReport:
    p_bytes: Fraction
    g_bytes: Fraction
    os_bytes: Fraction

    @property
    def total_bytes(self) -> Fraction:
        return self.p_bytes + self.g_bytes + self.os_bytes

    def to_dict(self) -> dict:
        return {
            "p_bytes": as_number(self.p_bytes),
            "g_bytes": as_number(self.g_bytes),
            "os_bytes": as_number(self.os_bytes),
            "total_bytes": as_number(self.total_bytes),
        }


def _divisor(level: ShardLevel, cluster: ClusterSpec) -> int:
    return (1, cluster.M, cluster.N)[level]


def _as_strategy(x) -> Strategy | None:
    """Strategy for a code/Strategy/method name; None for ZeRO++."""
    if isinstance(x, Strategy):
        return x
    text = str(x)
    if len(text) == 3 and set(text) <= set("NIG"):
        return parse_strategy(text)
    code = METHODS[normalize_method(text)]
    return parse_strategy(code) if code else None


def memory(strategy_or_method, cluster: ClusterSpec, model: ModelSpec) -> MemoryReport:
    """Per-GPU bytes of parameters, gradients and optimizer state."""
    psi, psi_t = F(model.total_params), F(model.trainable_params)
    s = _as_strategy(strategy_or_method)
    if s is None:  # ZeRO++: global shard plus secondary intra-group copy of P
        p = model.param_bytes * psi / cluster.N + model.param_bytes * psi / cluster.M
        return MemoryReport(
            p, model.grad_bytes * psi_t / cluster.N, F(model.optim_factor) * psi_t / cluster.N
        )
    return MemoryReport(
        model.param_bytes * psi / _divisor(s.p, cluster),
        model.grad_bytes * psi_t / _divisor(s.g, cluster),
        F(model.optim_factor) * psi_t / _divisor(s.os, cluster),
    )


# ---------------------------------------------------------------------------
# Communication volume, closed form

def _flat(cluster: ClusterSpec, total_per_rank_term: Fraction, times: int = 1) -> Volume:
    """World ring: boundary share g/N of traffic is inter-group (none when g == 1)."""
    N, g = cluster.N, cluster.g
    inter_edges = g if g > 1 else 0
    inter = inter_edges * times * total_per_rank_term
    intra = (N - inter_edges) * times * total_per_rank_term
    return Volume(F(intra), F(inter))


def _method_volumes(key: str, c: ClusterSpec, psi: Fraction) -> dict:
    N, M, g, s = c.N, c.M, c.g, c.s
    world = psi / N * (N - 1)  # per-rank ring term of a world collective
    intra_ag = N * psi / M * (M - 1)  # cluster total of one intra-group pass
    inter_pass = N * psi / N * (g - 1)  # cluster total of one inter-group pass
    cells: dict[tuple[str, str], Volume] = {}
    if key == "zero-1":
        cells[("Update", "AR(G)")] = _flat(c, 2 * world)
        cells[("Update", "AG(P)")] = _flat(c, world)
    elif key == "zero-2":
        cells[("Backward", "RS(G)")] = _flat(c, world, s)
        cells[("Update", "AG(P)")] = _flat(c, world)
    elif key == "zero-3":
        for cell in (("Forward", "AG(P)"), ("Backward", "AG(P)"), ("Backward", "RS(G)")):
            cells[cell] = _flat(c, world, s)
    elif key == "mics":
        for cell in (("Forward", "AG(P)"), ("Backward", "AG(P)"), ("Backward", "RS(G)")):
            cells[cell] = Volume(s * intra_ag, F(0))
        # ring all-reduce of each Psi/M segment across the g groups
        cells[("Update", "AR(G)")] = Volume(F(0), 2 * N * (psi / M) * (g - 1) / g)
    elif key == "zero++":
        cells[("Forward", "AG(P)")] = _flat(c, world, s)
        cells[("Backward", "AG(P)")] = Volume(s * intra_ag, F(0))
        cells[("Backward", "RS(G)")] = _flat(c, world, s)
    elif key == "paro-igg":
        cells[("Forward", "AG(P)")] = Volume(s * intra_ag, F(0))
        cells[("Backward", "AG(P)")] = Volume(s * intra_ag, F(0))
        cells[("Backward", "RS(G)")] = Volume(s * intra_ag, s * inter_pass)
        # one restoration gather per mini-batch, not per micro-batch
        cells[("Update", "AG(P)")] = Volume(F(0), inter_pass)
    elif key == "paro-iig":
        cells[("Forward", "AG(P)")] = Volume(s * intra_ag, F(0))
        cells[("Backward", "AG(P)")] = Volume(s * intra_ag, F(0))
        cells[("Backward", "RS(G)")] = Volume(s * intra_ag, F(0))
        cells[("Update", "RS(G)")] = Volume(F(0), inter_pass)
        cells[("Update", "AG(P)")] = Volume(F(0), inter_pass)
    elif key == "paro-nig":
        # intra-group reduce-scatter runs every micro-batch
        cells[("Backward", "RS(G)")] = Volume(s * intra_ag, F(0))
        cells[("Update", "RS(G)")] = Volume(F(0), inter_pass)
        cells[("Update", "AG(P)")] = Volume(intra_ag, inter_pass)
    else:
        raise KeyError(key)
    return cells


def published_volume_rows(method: str, cluster: ClusterSpec, model: ModelSpec) -> VolumeReport:
    """The published per-stage cells, transcribed without correction."""
    key = normalize_method(method)
    N, M, g, s = cluster.N, cluster.M, cluster.g, cluster.s
    psi = F(model.total_params)
    pn, pm = psi / N, psi / M
    rep = VolumeReport(N)

    def zero_like(times):
        return Volume((N - g) * times * pn * (N - 1), g * times * pn * (N - 1))

    intra_s = Volume(N * s * pm * (M - 1), F(0))
    if key == "zero-1":
        rep.cells[("Update", "AR(G)")] = Volume(2 * (N - g) * pn * (N - 1), 2 * g * pn * (N - 1))
        rep.cells[("Update", "AG(P)")] = zero_like(1)
    elif key == "zero-2":
        rep.cells[("Backward", "RS(G)")] = zero_like(s)
        rep.cells[("Update", "AG(P)")] = zero_like(1)
    elif key == "zero-3":
        for cell in (("Forward", "AG(P)"), ("Backward", "AG(P)"), ("Backward", "RS(G)")):
            rep.cells[cell] = zero_like(s)
    elif key == "mics":
        for cell in (("Forward", "AG(P)"), ("Backward", "AG(P)"), ("Backward", "RS(G)")):
            rep.cells[cell] = intra_s
        rep.cells[("Update", "AR(G)")] = Volume(2 * (N - g) * pm * (g - 1), 2 * g * pm * (g - 1))
    elif key == "zero++":
        rep.cells[("Forward", "AG(P)")] = zero_like(s)
        rep.cells[("Backward", "AG(P)")] = intra_s
        rep.cells[("Backward", "RS(G)")] = zero_like(s)
    elif key == "paro-igg":
        rep.cells[("Forward", "AG(P)")] = intra_s
        rep.cells[("Backward", "AG(P)")] = intra_s
        rep.cells[("Backward", "RS(G)")] = Volume(N * s * pm * (M - 1), N * s * pn * (g - 1))
        rep.cells[("Update", "AG(P)")] = Volume(F(0), N * s * pn * (g - 1))
    elif key == "paro-iig":
        rep.cells[("Forward", "AG(P)")] = intra_s
        rep.cells[("Backward", "AG(P)")] = intra_s
        rep.cells[("Backward", "RS(G)")] = intra_s
        rep.cells[("Update", "RS(G)")] = Volume(F(0), N * pn * (g - 1))
        rep.cells[("Update", "AG(P)")] = Volume(F(0), N * pn * (g - 1))
    elif key == "paro-nig":
        rep.cells[("Backward", "RS(G)")] = Volume(N * pm * (M - 1), F(0))
        rep.cells[("Update", "RS(G)")] = Volume(F(0), N * pn * (g - 1))
        rep.cells[("Update", "AG(P)")] = Volume(N * pm * (M - 1), N * pn * (g - 1))
    else:
        raise ValueError(f"{method!r} has no published volume row")
    return rep


# Cells where the literal row and the ring-accounted schedule disagree.
DOCUMENTED_DEVIATIONS = {
    ("paro-igg", "Update", "AG(P)"): "literal cell carries an s factor; the restoration "
    "gather runs once per mini-batch",
    ("paro-nig", "Backward", "RS(G)"): "literal cell lacks the s factor; the intra-group "
    "reduce-scatter runs every micro-batch",
    ("mics", "Update", "AR(G)"): "literal cell counts 2*(Psi/M)*(g-1) per GPU split g/N inter; "
    "a ring all-reduce over the g groups sends 2*(Psi/M)*(g-1)/g per GPU, all inter-group",
}


def published_row_deviations(method: str, cluster: ClusterSpec, model: ModelSpec) -> dict:
    """{(stage, column): (model Volume, literal Volume)} for cells that differ."""
    key = normalize_method(method)
    model_rep = comm_volume(key, cluster, model)
    literal = published_volume_rows(key, cluster, model)
    out = {}
    for cell in set(model_rep.nonzero_cells()) | set(literal.nonzero_cells()):
        a, b = model_rep.cell(*cell), literal.cell(*cell)
        if a != b:
            out[cell] = (a, b)
    return out


def comm_volume(method_or_strategy, cluster: ClusterSpec, model: ModelSpec) -> VolumeReport:
    """Per-stage volumes.  Named methods use closed forms; other strategies
    are counted from their generated schedule."""
    text = method_or_strategy.code if isinstance(method_or_strategy, Strategy) else str(method_or_strategy)
    key = None
    try:
        key = normalize_method(text)
    except ValueError:
        if not (len(text) == 3 and set(text) <= set("NIG")):
            raise
    if key is None:
        for name, code in METHODS.items():
            if code == text and name not in ("ddp",):
                key = name
                break
    if key is None or key == "ddp":
        from .schedule import count_volumes, generate

        return count_volumes(generate(text if key is None else METHODS[key], cluster, model))

    rep = VolumeReport(cluster.N)
    rep.cells.update(_method_volumes(key, cluster, F(model.trainable_params)))
    # parameter gathers during compute move every parameter, frozen or not
    if model.trainable_params != model.total_params:
        fixed = _method_volumes(key, cluster, F(model.total_params))
        for cell in list(rep.cells):
            if cell[1] == "AG(P)" and cell[0] != "Update":
                rep.cells[cell] = fixed[cell]
    for (m, stage, col), why in DOCUMENTED_DEVIATIONS.items():
        if m == key and cluster.g > 1:
            rep.notes.append(f"{stage} {col}: {why}")
    return rep


def accumulation_savings(cluster: ClusterSpec, model: ModelSpec) -> Fraction:
    """Per-GPU volume saved by reducing within groups every micro-batch and
    across groups once per mini-batch, instead of a world reduce-scatter each time."""
    return F(model.total_params) * (cluster.s - 1) * (cluster.g - 1) / cluster.N


def two_step_savings_expanded(cluster: ClusterSpec, model: ModelSpec) -> Fraction:
    """The same saving as a difference of the two per-GPU volumes."""
    psi, N, M, g, s = F(model.total_params), cluster.N, cluster.M, cluster.g, cluster.s
    return s * psi / N * (N - 1) - (s * psi / M * (M - 1) + psi / N * (g - 1))


# ---------------------------------------------------------------------------
# Time

def round_time(link_bytes: dict[str, float], network: NetworkSpec) -> float:
    """One bulk-synchronous round: the slowest link class, classes overlapped.

    ``link_bytes`` maps link class to the largest byte count on any single
    link of that class during the round.
    """
    times = [network.latency(k) + b / network.bw(k) for k, b in link_bytes.items()]
    return max(times, default=0.0)


def estimate_time(volumes, network: NetworkSpec, model: ModelSpec | None = None) -> float:
    """Seconds for a VolumeReport, a SimTrace, or a list of per-round link maps.

    For a VolumeReport the traffic is spread evenly over the N GPUs' links and
    latency is not charged (no round structure is known); bytes per parameter
    come from ``model`` (param_bytes for P, grad_bytes for G).
    """
    if isinstance(volumes, VolumeReport):
        width = {"P": 2, "G": 2} if model is None else {"P": model.param_bytes, "G": model.grad_bytes}
        total = 0.0
        for (_, column), vol in volumes.cells.items():
            w = width[column[-2]]
            total += float(vol.intra) * w / volumes.n_gpus / network.intra_bw
            total += float(vol.inter) * w / volumes.n_gpus / network.inter_bw
        return total
    rounds = getattr(volumes, "rounds", volumes)
    return sum(round_time(_round_link_max(r), network) for r in rounds)


def _round_link_max(r) -> dict[str, float]:
    if isinstance(r, dict):
        return r
    return r.link_max()


def topology_time(topology: str, n: int, m: int, total_bytes: float, network: NetworkSpec) -> float:
    """Closed-form all-gather time for ring, h-ring and ho-ring."""
    g = n // m
    C = total_bytes / n

    def step(link, nbytes):
        return network.latency(link) + nbytes / network.bw(link)

    def flat_step(nbytes):
        return max(step("intra", nbytes), step("inter", nbytes)) if g > 1 else step("intra", nbytes)

    if topology == "ring" or g == 1 or m == 1:
        if topology != "ring" and m == 1:
            return (n - 1) * step("inter", C)
        return (n - 1) * flat_step(C)
    if topology == "h-ring":
        return (
            (m - 1) * step("intra", C)
            + (g - 1) * step("inter", m * C)
            + (m - 1) * step("intra", (g - 1) * m * C)
        )
    if topology == "ho-ring":
        phase_a = sum(
            max(
                [step("intra", C)] * (t < m - 1) + [step("inter", C)] * (t < g - 1)
            )
            for t in range(max(m - 1, g - 1))
        )
        return phase_a + (m - 1) * step("intra", (g - 1) * C)
    raise ValueError(f"unknown topology {topology!r}")
