import json
from fractions import Fraction

import pytest

from shardsim.core import ClusterSpec, ModelSpec, VolumeReport
from shardsim.schedule import CommOp, SchedulePlan, count_volumes, generate, generate_method, op_volume, plan_for
from shardsim.strategy import enumerate_all

PSI = 7_000_000_000
REFERENCE_CONFIG = ClusterSpec(64, 8, 8)


def kinds(ops):
    return [(op.kind, op.scope, op.target) for op in ops]


def test_nig_forward_empty():
    plan = generate_method("paro-nig", REFERENCE_CONFIG, ModelSpec(PSI))
    assert plan.stage_ops("Forward") == []


def test_zero3_ops():
    c = ClusterSpec(8, 2, 2)
    plan = generate("GGG", c, ModelSpec(800, layers=2))
    for mb in range(2):
        for layer in range(2):
            assert kinds(plan.stage_ops("Forward", mb, layer)) == [("AllGather", "World", "P")]
            assert kinds(plan.stage_ops("Backward", mb, layer)) == [
                ("AllGather", "World", "P"),
                ("ReduceScatter", "World", "G"),
            ]
    assert plan.stage_ops("Update") == []


def test_iig_ops():
    c = ClusterSpec(8, 2, 3)
    plan = generate("IIG", c, ModelSpec(800))
    for mb in range(3):
        assert ("ReduceScatter", "IntraGroup", "G") in kinds(plan.stage_ops("Backward", mb))
    assert kinds(plan.stage_ops("Update")) == [
        ("ReduceScatter", "InterGroup", "G"),
        ("AllGather", "InterGroup", "P"),
    ]


def test_backward_layers_reversed():
    plan = generate("GGG", ClusterSpec(4, 2), ModelSpec(400, layers=3))
    assert [op.layer for op in plan.stage_ops("Backward") if op.target == "P"] == [2, 1, 0]


def test_payload_split_by_layer():
    plan = generate("IGG", ClusterSpec(4, 2), ModelSpec(900, layers=3))
    assert {op.payload_params for op in plan.stage_ops("Forward")} == {300}


def test_empty_plan_counts_zero():
    rep = count_volumes(SchedulePlan((), None, ClusterSpec(4, 2), method="empty"))
    assert rep.total == 0
    assert rep.cells == VolumeReport(4).cells


def test_zero3_forward_matches_formula():
    rep = count_volumes(generate_method("zero-3", REFERENCE_CONFIG, ModelSpec(PSI)))
    assert rep.stage("Forward").intra == 56 * 8 * Fraction(PSI, 64) * 63
    assert rep.stage("Forward").inter == 8 * 8 * Fraction(PSI, 64) * 63


def test_iig_update_independent_of_accumulation():
    model = ModelSpec(PSI)
    one = count_volumes(generate("IIG", ClusterSpec(64, 8, 1), model)).stage("Update")
    eight = count_volumes(generate("IIG", ClusterSpec(64, 8, 8), model)).stage("Update")
    assert one == eight


@pytest.mark.parametrize("code", [s.code for s in enumerate_all() if s.g.letter != "N"])
def test_single_group_collapses_to_global(code):
    # with one group, intra-group sharding is global sharding
    c, model = ClusterSpec(8, 8, 2), ModelSpec(8000)
    flat = code.replace("I", "G")
    assert count_volumes(generate(code, c, model)).nonzero_cells() == count_volumes(generate(flat, c, model)).nonzero_cells()


def test_extrapolated_flag():
    model = ModelSpec(800)
    assert not generate("IIG", ClusterSpec(8, 2), model).extrapolated
    plan = generate("GIG", ClusterSpec(8, 2), model)
    assert plan.extrapolated
    assert count_volumes(plan).notes


def test_plan_for_dispatch():
    c, model = ClusterSpec(8, 2), ModelSpec(800)
    assert plan_for("mics", c, model).ops == generate("III", c, model).ops
    assert plan_for("NNN", c, model).label == "NNN"
    assert plan_for("zero++", c, model).strategy is None


def test_zeropp_ops():
    plan = generate_method("zero++", ClusterSpec(8, 2, 1), ModelSpec(800))
    assert kinds(plan.ops) == [
        ("AllGather", "World", "P"),
        ("AllGather", "IntraGroup", "P"),
        ("ReduceScatter", "World", "G"),
    ]


@pytest.mark.parametrize(
    "kind, scope, expect",
    [
        ("AllGather", "IntraGroup", (8 * 100 * Fraction(1, 2), 0)),
        ("AllGather", "InterGroup", (0, 8 * 100 * Fraction(3, 4))),
        ("AllReduce", "InterGroup", (0, 2 * 8 * 100 * Fraction(3, 4))),
        ("AllGather", "World", (8 * 100 * Fraction(7, 8) * Fraction(4, 8), 8 * 100 * Fraction(7, 8) * Fraction(4, 8))),
    ],
)
def test_op_volume(kind, scope, expect):
    op = CommOp(kind, scope, Fraction(100), "Update", "G")
    assert op_volume(op, ClusterSpec(8, 2)) == expect


def test_plan_json():
    body = json.loads(generate("IGG", ClusterSpec(4, 2), ModelSpec(400)).to_json())
    assert body["strategy"] == "IGG"
    assert all(isinstance(op["payload_params"], int) for op in body["ops"])
