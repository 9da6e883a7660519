import json
import subprocess
import sys

import pytest

from shardsim import cli


def run(argv, capsys):
    code = cli.main(argv)
    return code, capsys.readouterr().out


def run_json(argv, capsys):
    code, out = run(argv + ["--format", "json"], capsys)
    assert code == 0
    return json.loads(out)


def test_plan_peft(capsys):
    body = run_json(["plan", "--regime", "peft", "--params", "7e9", "--trainable", "4e6", "--gpus", "64", "--group", "8"], capsys)
    assert {r["code"] for r in body["rows"] if r["recommended"]} == {"NNN", "NNI", "INI", "GNG"}
    assert len(body["rows"]) == 14
    times = [r["est_time_s"] for r in body["rows"]]
    assert times == sorted(times)
    assert body["config"]["command"] == "plan"


def test_plan_full(capsys):
    body = run_json(["plan", "--regime", "full", "--params", "7e9", "--gpus", "64", "--group", "8"], capsys)
    ok = {r["code"] for r in body["rows"] if r["recommended"]}
    assert {"IIG", "IGG"} <= ok


def test_plan_missing_gpus(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["plan", "--regime", "full", "--params", "7e9"])
    assert exc.value.code == 2
    assert "--gpus" in capsys.readouterr().err


def test_plan_bad_regime(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["plan", "--regime", "most", "--params", "7e9", "--gpus", "8"])
    assert exc.value.code == 2


def test_cost_iig_fig5(capsys):
    body = run_json(["cost", "--method", "paro-iig", "--fig5-config"], capsys)
    assert body["volume"]["Update"]["inter_params"] == 98_000_000_000
    assert body["volume"]["Update"]["cells"]["RS(G)"]["inter_params"] == 49_000_000_000


def test_cost_savings(capsys):
    body = run_json(["cost", "--savings", "--params", "7e9", "--gpus", "64", "--accum", "8", "--groups", "8"], capsys)
    assert body["savings_params_per_gpu"] == 5_359_375_000


def test_cost_ddp(capsys):
    body = run_json(["cost", "--strategy", "NNN", "--params", "1e6", "--gpus", "8", "--group", "2"], capsys)
    vol = body["volume"]
    assert vol["Forward"]["intra_params"] == vol["Forward"]["inter_params"] == 0
    assert vol["Backward"]["intra_params"] == vol["Backward"]["inter_params"] == 0
    assert set(vol["Update"]["cells"]) == {"AR(G)"}


def test_cost_fig5(capsys):
    body = run_json(["cost", "--fig5"], capsys)
    assert len(body["rows"]) == 8
    flagged = {r["method"]: r["flagged_cells"] for r in body["rows"]}
    assert flagged["MiCS"] == ["Update AR(G)"]
    assert flagged["ZeRO-3"] == []


def test_cost_unknown_method(capsys):
    assert cli.main(["cost", "--method", "zero-9", "--fig5-config"]) == 2
    assert "valid names" in capsys.readouterr().err


def test_simulate_two_ranks(capsys):
    body = run_json(["simulate", "--topo", "ring", "--ranks", "2", "--bytes", "1024"], capsys)
    row = body["rows"][0]
    assert row["rounds"] == 1
    assert row["max_sent_per_rank"] == row["min_sent_per_rank"] == 512


def test_simulate_ho_ring_rounds(capsys):
    body = run_json(["simulate", "--topo", "ho-ring", "--ranks", "9", "--group", "3", "--bytes", "9000"], capsys)
    assert body["rows"][0]["rounds"] == 4


def test_simulate_ho_ring_faster(capsys):
    base = ["simulate", "--collective", "all-gather", "--ranks", "128", "--group", "8", "--bytes", "1e9"]
    ho = run_json(base + ["--topo", "ho-ring"], capsys)["rows"][0]["time_s"]
    h = run_json(base + ["--topo", "h-ring"], capsys)["rows"][0]["time_s"]
    assert ho < h


def test_simulate_csv_and_trace(capsys, tmp_path):
    trace = tmp_path / "t.jsonl"
    code, out = run(["simulate", "--topo", "h-ring", "--ranks", "8", "--group", "4", "--bytes", "800",
                     "--format", "csv", "--trace-out", str(trace)], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("# config:")
    assert lines[1].startswith("topology,")
    assert len(trace.read_text().splitlines()) == 3 + 1 + 3


def test_verify_all(capsys):
    body = run_json(["verify", "--all-p1", "--gpus", "4", "--group", "2", "--steps", "20"], capsys)
    assert len(body["rows"]) == 14
    assert all(r["pass"] for r in body["rows"])


def test_verify_zero3(capsys):
    body = run_json(["verify", "--strategy", "GGG", "--gpus", "4", "--steps", "5"], capsys)
    assert body["rows"][0]["pass"] is True


def test_verify_tolerance_breach(capsys):
    code, out = run(["verify", "--strategy", "IGG", "--gpus", "4", "--group", "2", "--steps", "3", "--tol", "-1"], capsys)
    assert code == 1


def test_verify_bad_code(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["verify", "--strategy", "XYZ"])
    assert exc.value.code == 2


def test_out_path(capsys, tmp_path):
    dest = tmp_path / "plan.json"
    assert cli.main(["plan", "--regime", "peft", "--params", "7e9", "--gpus", "8", "--out", str(dest)]) == 0
    assert json.loads(dest.read_text())["config"]["params"]["regime"] == "peft"


@pytest.mark.parametrize("argv", [
    ["plan", "--regime", "full", "--params", "7e9", "--gpus", "64", "--group", "8"],
    ["cost", "--fig5", "--format", "csv"],
    ["simulate", "--topo", "all", "--ranks", "12", "--group", "4", "--bytes", "1e6"],
    ["verify", "--strategy", "IIG", "--gpus", "4", "--group", "2", "--steps", "3", "--seed", "7"],
])
def test_deterministic(argv, capsys):
    _, a = run(argv, capsys)
    _, b = run(argv, capsys)
    assert a == b


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "shardsim", "cost", "--savings", "--params", "7e9", "--gpus", "64",
                          "--accum", "8", "--groups", "8", "--format", "json"], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["savings_params_per_gpu"] == 5_359_375_000
