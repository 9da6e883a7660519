import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardsim.core import ClusterSpec, ConfigError, ModelSpec, NetworkSpec
from shardsim.costmodel import topology_time
from shardsim.netsim import (
    ALL_GATHER,
    REDUCE_SCATTER,
    SimCluster,
    SimTrace,
    execute_plan,
    ho_ring_all_gather,
    ho_ring_reduce_scatter,
    h_ring_all_gather,
    ring_all_gather,
    ring_reduce_scatter,
    scoped_collective,
)
from shardsim.schedule import generate_method

SIZES = [2, 4, 6, 8, 9, 12, 16, 32]
GRIDS = [(n, m) for n in SIZES for m in range(1, n + 1) if n % m == 0]


def shards(n, size=3, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.integers(-1000, 1000, size) for _ in range(n)]


def gather_oracle(parts):
    return np.concatenate(parts)


def scatter_oracle(inputs):
    n = len(inputs)
    return np.split(np.sum(inputs, axis=0), n)


@pytest.mark.parametrize("topo", sorted(ALL_GATHER))
@pytest.mark.parametrize("n, m", GRIDS)
def test_all_gather_matches_oracle(topo, n, m):
    parts = shards(n, seed=n * 100 + m)
    trace = ALL_GATHER[topo](SimCluster.build(n, m), parts)
    want = gather_oracle(parts)
    for out in trace.outputs:
        np.testing.assert_array_equal(out, want)


@pytest.mark.parametrize("topo", sorted(REDUCE_SCATTER))
@pytest.mark.parametrize("n, m", GRIDS)
def test_reduce_scatter_matches_oracle(topo, n, m):
    inputs = shards(n, size=2 * n, seed=n * 100 + m)
    trace = REDUCE_SCATTER[topo](SimCluster.build(n, m), inputs)
    for got, want in zip(trace.outputs, scatter_oracle(inputs)):
        np.testing.assert_array_equal(got, want)


@pytest.mark.parametrize("topo", ["ring", "ho-ring"])
@pytest.mark.parametrize("n, m", GRIDS)
def test_all_gather_send_totals(topo, n, m):
    C = 5
    trace = ALL_GATHER[topo](SimCluster.build(n, m), shards(n, size=C))
    assert set(trace.sent_by_rank().values()) == {(n - 1) * C}
    if topo == "ho-ring" and m > 1 and n // m > 1:
        g = n // m
        assert set(trace.sent_by_rank("inter").values()) == {(g - 1) * C}


@pytest.mark.parametrize("n, m", [(9, 3), (8, 2), (12, 4)])
def test_conservation_per_round(n, m):
    c = SimCluster.build(n, m)
    for trace in (h_ring_all_gather(c, shards(n)), ho_ring_reduce_scatter(c, shards(n, size=n))):
        for r in trace.rounds:
            sent = sum(msg.nbytes for msg in r.messages)
            recv = sum(msg.nbytes for msg in r.messages if msg.dst is not None)
            assert sent == recv
        assert sum(trace.sent_by_rank().values()) == sum(trace.received_by_rank().values())


@settings(max_examples=25, deadline=None)
@given(
    grid=st.sampled_from([(4, 2), (6, 3), (8, 4), (9, 3), (12, 2)]),
    data=st.data(),
)
def test_random_payloads(grid, data):
    n, m = grid
    width = data.draw(st.integers(1, 4))
    values = data.draw(st.lists(st.integers(-2**40, 2**40), min_size=n * n * width, max_size=n * n * width))
    arr = np.array(values, dtype=np.int64).reshape(n, n * width)
    c = SimCluster.build(n, m)
    for topo, fn in REDUCE_SCATTER.items():
        for got, want in zip(fn(c, list(arr)).outputs, scatter_oracle(list(arr))):
            np.testing.assert_array_equal(got, want)
    parts = list(arr[:, :width])
    for fn in ALL_GATHER.values():
        for out in fn(c, parts).outputs:
            np.testing.assert_array_equal(out, gather_oracle(parts))


def test_ring_four_ranks():
    parts = [np.array([v]) for v in "abcd"]
    trace = ring_all_gather(SimCluster.build(4, 4), parts)
    assert trace.n_rounds == 3
    assert all(list(o) == list("abcd") for o in trace.outputs)


def test_ring_two_ranks():
    trace = ring_all_gather(SimCluster.build(2, 2), [np.zeros(4), np.ones(4)], elem_bytes=128)
    assert trace.n_rounds == 1
    assert trace.sent_by_rank() == {0: 512, 1: 512}


def test_reduce_scatter_small():
    x, y = np.array([1, 2]), np.array([10, 20])
    out = ring_reduce_scatter(SimCluster.build(2, 2), [x, y]).outputs
    assert [o.tolist() for o in out] == [[11], [22]]
    ins = [np.arange(6) * (k + 1) for k in range(3)]
    out = ring_reduce_scatter(SimCluster.build(3, 3), ins).outputs
    for i, o in enumerate(out):
        np.testing.assert_array_equal(o, (ins[0] + ins[1] + ins[2])[2 * i:2 * i + 2])


def test_reduce_scatter_zero_and_symmetric():
    c = SimCluster.build(9, 3)
    assert all(not o.any() for o in ho_ring_reduce_scatter(c, [np.zeros(18)] * 9).outputs)
    v = np.arange(18)
    for i, o in enumerate(ho_ring_reduce_scatter(c, [v] * 9).outputs):
        np.testing.assert_array_equal(o, 9 * v[2 * i:2 * i + 2])


def test_h_ring_phase_rounds():
    trace = h_ring_all_gather(SimCluster.build(9, 3), shards(9))
    assert list(trace.step_count.values()) == [2, 2, 2]


def test_ho_ring_phase_rounds():
    trace = ho_ring_all_gather(SimCluster.build(9, 3), shards(9))
    assert trace.n_rounds == 4
    assert list(trace.step_count.values()) == [2, 2]


@pytest.mark.parametrize("fn, flat", [(h_ring_all_gather, ring_all_gather), (ho_ring_all_gather, ring_all_gather),
                                      (ho_ring_reduce_scatter, ring_reduce_scatter)])
def test_single_group_matches_ring(fn, flat):
    c = SimCluster.build(6, 6)
    data = shards(6, size=6)
    a, b = fn(c, data), flat(c, data)
    assert a.to_jsonl() == b.to_jsonl()
    for x, y in zip(a.outputs, b.outputs):
        np.testing.assert_array_equal(x, y)


def test_mismatched_shards_rejected():
    with pytest.raises(ConfigError):
        ring_all_gather(SimCluster.build(2, 2), [np.zeros(2), np.zeros(3)])
    with pytest.raises(ConfigError):
        ring_reduce_scatter(SimCluster.build(4, 2), [np.zeros(6)] * 4)


@pytest.mark.parametrize("topo", sorted(ALL_GATHER))
def test_deterministic_trace(topo):
    c = SimCluster.build(8, 4)
    a = ALL_GATHER[topo](c, shards(8, seed=3)).to_jsonl()
    b = ALL_GATHER[topo](c, shards(8, seed=3)).to_jsonl()
    assert a == b


@pytest.mark.parametrize("topo", sorted(ALL_GATHER))
@pytest.mark.parametrize("n, m", [(8, 2), (16, 4), (12, 3)])
def test_time_monotone_in_inter_bw(topo, n, m):
    times = []
    for bw in (200e9, 100e9, 25e9):
        c = SimCluster.build(n, m, NetworkSpec(inter_bw=bw), elem_bytes=1e6)
        times.append(ALL_GATHER[topo](c, shards(n, size=1)).simulated_time)
    assert times[0] <= times[1] <= times[2]


@pytest.mark.parametrize("topo", sorted(ALL_GATHER))
@pytest.mark.parametrize("n, m", [(128, 8), (9, 3), (16, 16)])
def test_time_matches_closed_form(topo, n, m):
    net = NetworkSpec()
    total = 1e9
    c = SimCluster.build(n, m, net, elem_bytes=total / n)
    sim = ALL_GATHER[topo](c, shards(n, size=1)).simulated_time
    assert sim == pytest.approx(topology_time(topo, n, m, total, net), rel=1e-12)


def test_scoped_world_gather_chunk_order():
    c = SimCluster.build(4, 2)
    # rank r holds global chunk position*g + group
    bufs = [np.array([r]) for r in range(4)]
    out, _ = scoped_collective(c, "AllGather", "World", bufs)
    np.testing.assert_array_equal(out[0], [0, 2, 1, 3])


def test_empty_trace():
    t = SimTrace("ring", "all-gather")
    assert t.n_rounds == 0 and t.simulated_time == 0 and t.totals == {"intra": 0, "inter": 0}


def test_execute_plan_iig_update():
    c = ClusterSpec(64, 8, 8)
    plan = generate_method("paro-iig", c, ModelSpec(7_000_000_000))
    _, rep = execute_plan(SimCluster(c), plan)
    assert rep.cell("Update", "RS(G)").inter == 49_000_000_000
    assert rep.cell("Update", "AG(P)").inter == 49_000_000_000


def test_execute_plan_zero3_forward_inter():
    c = ClusterSpec(64, 8, 8)
    psi = 7_000_000_000
    _, rep = execute_plan(SimCluster(c), generate_method("zero-3", c, ModelSpec(psi)))
    assert rep.stage("Forward").inter == 8 * 8 * psi // 64 * 63


def test_execute_plan_rejects_bad_topology():
    c = ClusterSpec(4, 2)
    plan = generate_method("zero-3", c, ModelSpec(400))
    with pytest.raises(ConfigError):
        execute_plan(SimCluster(c), plan, {"World": "tree"})
    with pytest.raises(ConfigError):
        execute_plan(SimCluster(ClusterSpec(4, 4)), plan)
