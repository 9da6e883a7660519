"""Command-line entry point: ``shardsim plan|cost|simulate|verify``.

Exit codes: 0 success, 1 validation failure (oracle or tolerance), 2 usage.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import costmodel, netsim, schedule, strategy, trainsim
from .core import (
    DISPLAY_NAMES,
    TABLE_METHODS,
    ClusterSpec,
    ConfigError,
    ModelSpec,
    NetworkSpec,
    Regime,
    as_number,
    normalize_method,
    parse_strategy,
)

REFERENCE_CONFIG = {"params": 7_000_000_000, "gpus": 64, "groups": 8, "accum": 8}

# All-gather of 1 GB on 16 DGX nodes as reported for real hardware, in ms.
MEASURED_ALLGATHER_MS = {"ring": 288.0, "h-ring": 183.0, "ho-ring": 162.0}


class UsageError(Exception):
    pass


def number(text: str):
    """Parse '7e9', '1024' or '0.5'; integral values come back as int."""
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    return int(value) if value.is_integer() else value


def positive_int(text: str) -> int:
    value = number(text)
    if not isinstance(value, int) or value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


@dataclass
class RunConfig:
    command: str
    params: dict = field(default_factory=dict)
    format: str = "json"
    seed: int = 0


# ---------------------------------------------------------------------------
# argument plumbing

def _add_cluster(p, gpus_required=True, accum_default=1):
    p.add_argument("--gpus", "--ranks", dest="gpus", type=positive_int, required=gpus_required,
                   help="number of GPUs N")
    p.add_argument("--group", type=positive_int, help="GPUs per group M")
    p.add_argument("--groups", type=positive_int, help="number of groups g (alternative to --group)")
    p.add_argument("--accum", type=positive_int, default=accum_default, help="gradient accumulation steps s")


def _add_model(p):
    p.add_argument("--params", type=number, help="total parameters (e.g. 7e9)")
    p.add_argument("--trainable", type=number, help="trainable parameters (default: all)")
    p.add_argument("--layers", type=positive_int, default=1)
    p.add_argument("--param-bytes", type=positive_int, default=2)
    p.add_argument("--grad-bytes", type=positive_int, default=2)
    p.add_argument("--optim-factor", type=number, default=12)


def _add_network(p):
    d = NetworkSpec()
    p.add_argument("--intra-bw", type=number, default=d.intra_bw, help="bytes/s per intra-group link")
    p.add_argument("--inter-bw", type=number, default=d.inter_bw, help="bytes/s per inter-group link")
    p.add_argument("--intra-latency", type=number, default=d.intra_latency, help="seconds per round")
    p.add_argument("--inter-latency", type=number, default=d.inter_latency, help="seconds per round")


def _add_output(p):
    p.add_argument("--format", choices=("json", "csv", "table"), default="json")
    p.add_argument("--out", help="write output to this path instead of stdout")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shardsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="recommendation matrix with cost columns")
    p.add_argument("--regime", required=True, help="full | partial-large | partial-small | peft")
    _add_cluster(p)
    _add_model(p)
    _add_network(p)
    _add_output(p)

    p = sub.add_parser("cost", help="memory, volumes, savings and time for one method")
    what = p.add_mutually_exclusive_group()
    what.add_argument("--method", help="named method, e.g. zero-3, mics, paro-iig")
    what.add_argument("--strategy", help="P/G/OS code, e.g. IIG")
    p.add_argument("--fig5", action="store_true", help="all eight table methods at 7e9 / 64 GPUs / s=8 / g=8")
    p.add_argument("--fig5-config", action="store_true", help="use 7e9 / 64 GPUs / s=8 / g=8")
    p.add_argument("--savings", action="store_true", help="only the accumulation saving per GPU")
    _add_cluster(p, gpus_required=False)
    _add_model(p)
    _add_network(p)
    _add_output(p)

    p = sub.add_parser("simulate", help="run one simulated collective and check it")
    p.add_argument("--topo", choices=("ring", "h-ring", "ho-ring", "all"), default="ring")
    p.add_argument("--collective", choices=("all-gather", "reduce-scatter"), default="all-gather")
    p.add_argument("--ranks", "--gpus", dest="ranks", type=positive_int, required=True)
    p.add_argument("--group", type=positive_int, help="ranks per group (default: all ranks)")
    p.add_argument("--bytes", dest="nbytes", type=number, required=True,
                   help="total collective size in bytes (gathered output / per-rank input)")
    p.add_argument("--trace-out", help="write per-round JSON lines here")
    _add_network(p)
    _add_output(p)

    p = sub.add_parser("verify", help="numeric equivalence of strategies against a single process")
    what = p.add_mutually_exclusive_group(required=True)
    what.add_argument("--strategy", action="append", help="P/G/OS code (repeatable)")
    what.add_argument("--all-p1", action="store_true", help="all 14 principle-1 strategies")
    _add_cluster(p, gpus_required=False, accum_default=2)
    p.add_argument("--steps", type=positive_int, default=20)
    p.add_argument("--tol", type=float, default=1e-9)
    _add_output(p)
    return parser


def _cluster(args) -> ClusterSpec:
    n = args.gpus
    if args.group and args.groups and args.group * args.groups != n:
        raise UsageError("--group and --groups disagree with --gpus")
    if args.groups:
        if n % args.groups:
            raise UsageError("--groups must divide --gpus")
        m = n // args.groups
    else:
        m = args.group or n
    return ClusterSpec(n, m, args.accum)


def _model(args, peft=False) -> ModelSpec:
    if args.params is None:
        raise UsageError("the following argument is required: --params")
    return ModelSpec(
        int(args.params),
        int(args.trainable) if args.trainable is not None else None,
        args.param_bytes,
        args.grad_bytes,
        args.optim_factor,
        args.layers,
        peft,
    )


def _network(args) -> NetworkSpec:
    return NetworkSpec(args.intra_bw, args.inter_bw, args.intra_latency, args.inter_latency)


def _config(args) -> dict:
    skip = {"out", "trace_out", "format", "seed", "command"}
    params = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    return asdict(RunConfig(args.command, params, args.format, args.seed))


# ---------------------------------------------------------------------------
# rendering

def render(payload: dict, fmt: str, rows_key: str = "rows") -> str:
    if fmt == "json":
        return json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n"
    rows = payload.get(rows_key) or [{k: v for k, v in payload.items() if k != "config"}]
    flat = [_flatten(r) for r in rows]
    fields = list(dict.fromkeys(k for r in flat for k in r))
    if fmt == "csv":
        buf = io.StringIO()
        buf.write("# config: " + json.dumps(payload.get("config", {}), sort_keys=True, default=_json_default) + "\n")
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(flat)
        return buf.getvalue()
    widths = {f: max(len(f), *(len(_cell(r.get(f))) for r in flat)) for f in fields}
    lines = ["  ".join(f.ljust(widths[f]) for f in fields)]
    lines += ["  ".join(_cell(r.get(f)).ljust(widths[f]) for f in fields) for r in flat]
    return "\n".join(lines) + "\n"


def _flatten(d: dict, prefix="") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        elif isinstance(v, list):
            out[prefix + k] = "; ".join(map(str, v))
        else:
            out[prefix + k] = v
    return out


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    return as_number(o)


def _write(text: str, out: str | None) -> None:
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# commands

def cmd_plan(args) -> int:
    try:
        regime = strategy.parse_regime(args.regime)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cluster = _cluster(args)
    model = _model(args, peft=regime is Regime.PEFT)
    network = _network(args)
    rows = []
    for rec in strategy.recommend(regime):
        code = rec.strategy.code
        mem = costmodel.memory(rec.strategy, cluster, model)
        vol = costmodel.comm_volume(rec.strategy, cluster, model)
        rows.append({
            "code": code,
            "alias": strategy.ALIASES.get(code, ""),
            "recommended": rec.recommended,
            "passes_p1": rec.passes_p1,
            "passes_p2": rec.passes_p2,
            "passes_p3": rec.passes_p3,
            "explanation": rec.explanation(),
            "memory_bytes": as_number(mem.total_bytes),
            "intra_params": as_number(vol.intra),
            "inter_params": as_number(vol.inter),
            "est_time_s": costmodel.estimate_time(vol, network, model),
        })
    rows.sort(key=lambda r: (r["est_time_s"], r["code"]))
    _write(render({"config": _config(args), "regime": regime.value, "rows": rows}, args.format), args.out)
    return 0


def _cost_report(target, cluster, model, network) -> dict:
    mem = costmodel.memory(target, cluster, model)
    vol = costmodel.comm_volume(target, cluster, model)
    row = {
        "method": target if isinstance(target, str) else target.code,
        "memory": mem.to_dict(),
        "volume": vol.to_dict(),
        "savings_params_per_gpu": as_number(costmodel.accumulation_savings(cluster, model)),
        "est_time_s": costmodel.estimate_time(vol, network, model),
    }
    try:
        key = normalize_method(row["method"])
    except ValueError:
        key = None
    if key in TABLE_METHODS:
        row["method"] = DISPLAY_NAMES[key]
        row["deviations_from_published"] = [
            {
                "cell": f"{st} {col}",
                "model": {"intra": as_number(a.intra), "inter": as_number(a.inter)},
                "published": {"intra": as_number(b.intra), "inter": as_number(b.inter)},
                "reason": costmodel.DOCUMENTED_DEVIATIONS.get((key, st, col), "undocumented"),
            }
            for (st, col), (a, b) in sorted(costmodel.published_row_deviations(key, cluster, model).items())
        ]
    return row


def cmd_cost(args) -> int:
    if args.fig5 or args.fig5_config:
        for k, v in REFERENCE_CONFIG.items():
            setattr(args, k, v)
        args.group = None
    if args.gpus is None:
        raise UsageError("the following argument is required: --gpus")
    cluster = _cluster(args)
    model = _model(args)
    network = _network(args)
    config = _config(args)

    if args.savings:
        value = as_number(costmodel.accumulation_savings(cluster, model))
        payload = {"config": config, "savings_params_per_gpu": value}
        _write(render(payload, args.format), args.out)
        return 0

    if args.fig5:
        rows = []
        for key in TABLE_METHODS:
            mem = costmodel.memory(key, cluster, model)
            vol = costmodel.comm_volume(key, cluster, model)
            rows.append({
                "method": DISPLAY_NAMES[key],
                "intra_params": as_number(vol.intra),
                "inter_params": as_number(vol.inter),
                "memory_bytes_per_gpu": as_number(mem.total_bytes),
                "flagged_cells": [f"{st} {col}" for st, col in sorted(costmodel.published_row_deviations(key, cluster, model))],
            })
        _write(render({"config": config, "rows": rows}, args.format), args.out)
        return 0

    if args.strategy:
        try:
            target = parse_strategy(args.strategy)
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
    elif args.method:
        try:
            target = normalize_method(args.method)
        except ConfigError as exc:
            print(f"shardsim cost: {exc}", file=sys.stderr)
            return 2
    else:
        raise UsageError("one of --method, --strategy, --fig5 or --savings is required")
    payload = {"config": config, **_cost_report(target, cluster, model, network)}
    _write(render(payload, args.format), args.out)
    return 0


def _simulate_one(topo, collective, n, m, nbytes, network, seed):
    """Returns (summary row, trace); raises OracleMismatch on a wrong result."""
    C = -(-nbytes // n) if collective == "all-gather" else -(-nbytes // (n * n))
    C = int(C)
    k = max(d for d in range(1, min(C, 64) + 1) if C % d == 0)
    elem_bytes = C // k
    cluster = netsim.SimCluster.build(n, m, network)
    rng = np.random.default_rng(seed)
    if collective == "all-gather":
        data = [rng.integers(-1000, 1000, size=k) for _ in range(n)]
        want = np.concatenate(data)
        trace = netsim.run_collective(cluster, topo, collective, data, elem_bytes)
        for r, out in enumerate(trace.outputs):
            netsim._assert_equal(out, want, f"{topo} all-gather rank {r}")
    else:
        data = [rng.integers(-1000, 1000, size=k * n) for _ in range(n)]
        total = np.sum(data, axis=0)
        trace = netsim.run_collective(cluster, topo, collective, data, elem_bytes)
        for r, out in enumerate(trace.outputs):
            netsim._assert_equal(out, total[r * k:(r + 1) * k], f"{topo} reduce-scatter rank {r}")
    row = trace.summary(n, m)
    sent = trace.sent_by_rank()
    row["step_count"] = trace.step_count
    row["chunk_bytes"] = C
    row["max_sent_per_rank"] = as_number(max(sent.values(), default=0))
    row["min_sent_per_rank"] = as_number(min(sent.values(), default=0))
    row["max_inter_sent_per_rank"] = as_number(max(trace.sent_by_rank("inter").values(), default=0))
    if collective == "all-gather":
        row["analytic_time_s"] = costmodel.topology_time(topo, n, m, C * n, network)
    return row, trace


def cmd_simulate(args) -> int:
    n, m = args.ranks, args.group or args.ranks
    if n % m:
        raise UsageError("--group must divide --ranks")
    if args.nbytes <= 0:
        raise UsageError("--bytes must be positive")
    if n < 2:
        raise UsageError("--ranks must be at least 2")
    network = _network(args)
    topos = ("ring", "h-ring", "ho-ring") if args.topo == "all" else ("ring", args.topo)
    rows, traces = {}, {}
    try:
        for topo in dict.fromkeys(topos):
            rows[topo], traces[topo] = _simulate_one(topo, args.collective, n, m, args.nbytes, network, args.seed)
    except netsim.OracleMismatch as exc:
        print(f"shardsim simulate: {exc}", file=sys.stderr)
        return 1
    ring_t = rows["ring"]["time_s"]
    for row in rows.values():
        row["delta_vs_ring_pct"] = 100.0 * (ring_t - row["time_s"]) / ring_t if ring_t else 0.0
    shown = list(rows.values()) if args.topo == "all" else [rows[args.topo]]
    if args.trace_out:
        with open(args.trace_out, "w") as fh:
            for topo in ([args.topo] if args.topo != "all" else list(traces)):
                fh.write(traces[topo].to_jsonl())
    payload = {"config": _config(args), "rows": shown}
    if args.topo == "all" and args.collective == "all-gather":
        payload["measured_reference_ms"] = MEASURED_ALLGATHER_MS
    _write(render(payload, args.format), args.out)
    return 0


def cmd_verify(args) -> int:
    if args.all_p1:
        codes = [s.code for s in strategy.filter_principle1(strategy.enumerate_all())]
    else:
        codes = []
        for code in args.strategy:
            try:
                codes.append(parse_strategy(code).code)
            except ConfigError as exc:
                raise UsageError(str(exc)) from None
    args.gpus = args.gpus or 4
    if args.group is None and args.groups is None:
        args.group = 2 if args.gpus % 2 == 0 and args.gpus > 2 else args.gpus
    cluster = _cluster(args)
    model = trainsim.TinyModel.init(seed=args.seed)
    data = trainsim.SyntheticData(model.dims[0], model.dims[-1], 8 * cluster.N * cluster.s, seed=args.seed + 1)
    baseline = trainsim.run_baseline(model, data, args.steps, cluster.s, cluster.N)
    rows, failed = [], []
    for code in codes:
        run = trainsim.run_strategy_detailed(code, cluster, model, data, args.steps)
        diff = trainsim.max_abs_diff(baseline, run.params)
        audit = trainsim.audit_gradient_sync(code, cluster)
        ok = diff < args.tol and run.residency_ok and bool(np.all(audit == cluster.s))
        rows.append({"strategy": code, "steps": args.steps, "max_abs_diff": diff,
                     "residency_ok": run.residency_ok, "sync_complete": bool(np.all(audit == cluster.s)),
                     "pass": ok})
        if not ok:
            failed.append(f"{code} (max diff {diff:.3e})")
    payload = {"config": _config(args), "baseline_sha256": trainsim.snapshot_hash(baseline),
               "passed": len(rows) - len(failed), "total": len(rows), "rows": rows}
    _write(render(payload, args.format), args.out)
    if failed:
        print("shardsim verify: tolerance breach: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


COMMANDS = {"plan": cmd_plan, "cost": cmd_cost, "simulate": cmd_simulate, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        parser.error(str(exc))  # exits with status 2


if __name__ == "__main__":
    sys.exit(main())
