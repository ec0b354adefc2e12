"""Command-line scenario runner.

Exit codes: 0 success, 2 usage error, 3 invalid input or config,
4 internal invariant failure. Errors go to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .biroma import AreaModel, calibrate_area_model, estimate_area, BITS_PER_TRIT
from .cost import CostParams, energy_report
from .engine import project, reference_gemm
from .errors import CorruptionError, InvariantError, ValidationError
from .kvcache import Convention, KvConfig, reduction_curve, refresh_check
from .lora import DEFAULT_PLACEMENT, PROJECTIONS, load_adapter, op_fraction, param_fraction
from .pipeline import (
    SequenceConfig,
    ToyConfig,
    analytic_stats,
    build_partition_plan,
    make_toy_model,
    run_sequence,
    simulate_pipeline,
)
from .ternary import (
    FALCON3,
    Encoding,
    TernaryTensor,
    load_model_config,
    load_tensor,
    quantize_activations,
    quantize_weights_ternary,
    read_kv_text,
    save_tensor,
    sparsity,
)
from .trimla import DEFAULT_DEPTH, OverflowPolicy, merge_ledgers, overflow_survey

COMMANDS = ("quantize", "simulate-linear", "kv-sweep", "area-estimate", "lora-overhead",
            "pipeline-sim", "decode-demo", "overflow-survey")
THREADS_ENV = "BITROM_SIM_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_range(text):
    """``a``, ``a..b`` (inclusive), ``a..b:s`` or a comma list of those."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ".." in part:
                span, _, step = part.partition(":")
                a, b = span.split("..")
                a, b, s = int(a), int(b), int(step) if step else 1
                if s <= 0 or b < a:
                    raise ValueError
                out.extend(range(a, b + 1, s))
            else:
                out.append(int(part))
        except ValueError:
            raise ValidationError(f"bad range {part!r}; use a, a..b or a..b:s") from None
    if not out:
        raise ValidationError(f"empty range {text!r}")
    return sorted(set(out))


def thread_count(flag):
    if flag:
        return max(1, flag)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"{THREADS_ENV} must be an integer") from None
    return os.cpu_count() or 1


def config_hash(params: dict) -> str:
    blob = json.dumps(params, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def render_csv(header, rows, params) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[h]) for h in header])
    buf.write(f"# bitrom-sim {__version__} config={config_hash(params)}\n")
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def render_json(doc, params) -> str:
    doc = dict(doc)
    doc["meta"] = {"tool": "bitrom-sim", "version": __version__, "config": config_hash(params)}
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _table(args, header, rows, params, key="rows"):
    if args.format == "json":
        return render_json({key: rows}, params)
    return render_csv(header, rows, params)


# --- commands --------------------------------------------------------------

def cmd_quantize(args):
    if args.input:
        src = Path(args.input)
        if not src.exists():
            raise ValidationError(f"no such input {src}")
        w = np.load(src) if src.suffix == ".npy" else np.loadtxt(src, delimiter=",", ndmin=2)
    else:
        w = np.random.default_rng(args.seed).standard_normal((args.rows, args.cols))
    t = quantize_weights_ternary(w)
    enc = Encoding[args.encoding.upper()]
    if not args.out:
        raise ValidationError("quantize needs --out for the tensor file")
    save_tensor(args.out, t, enc)
    summary = {"rows": t.rows, "cols": t.cols, "scale": t.scale, "sparsity": sparsity(t),
               "encoding": enc.name, "bytes": Path(args.out).stat().st_size}
    params = {"cmd": "quantize", "input": args.input, "rows": args.rows, "cols": args.cols,
              "seed": args.seed, "encoding": enc.name}
    sys.stdout.write(render_json(summary, params))


def cmd_simulate_linear(args):
    rng = np.random.default_rng(args.seed)
    policy = OverflowPolicy(args.policy)
    fixed = load_tensor(args.tensor) if args.tensor else None
    rows_out, ledgers = [], []
    for i in range(args.instances):
        t = fixed if fixed is not None else TernaryTensor.from_trits(rng.integers(-1, 2, (args.rows, args.cols)))
        a = quantize_activations(rng.standard_normal(t.rows), args.act_bits)
        r = project(a, t, depth=args.depth, policy=policy)
        ref = reference_gemm(a, t)
        match = bool(np.array_equal(r.outputs, ref))
        if not match and not r.overflowed:
            raise InvariantError(f"instance {i}: datapath diverged from the oracle without an overflow flag")
        ledgers.append(r.ledger)
        rows_out.append({"instance": i, "rows": t.rows, "cols": t.cols, "match": int(match),
                         "overflow_events": r.ledger.overflow_events, "skips": r.ledger.skips,
                         "adds": r.ledger.adds, "subs": r.ledger.subs,
                         "adder_tree_passes": r.ledger.adder_tree_passes})
    params = {"cmd": "simulate-linear", "tensor": args.tensor, "rows": args.rows, "cols": args.cols,
              "act_bits": args.act_bits, "depth": args.depth, "policy": policy.value,
              "instances": args.instances, "seed": args.seed}
    if args.format == "csv":
        return render_csv(list(rows_out[0]), rows_out, params)
    total = merge_ledgers(ledgers)
    doc = {"instances": args.instances, "matches": sum(r["match"] for r in rows_out),
           "overflowed_instances": sum(1 for r in rows_out if r["overflow_events"]),
           "ledger": total.to_dict(), "backend": kernels.BACKEND}
    return render_json(doc, params)


def cmd_kv_sweep(args):
    ns, ks = parse_range(args.n), parse_range(args.k)
    conv = Convention(args.convention)
    threads = thread_count(args.threads)
    chunks = [ns[i::threads] for i in range(threads) if ns[i::threads]]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda chunk: reduction_curve(chunk, ks, args.p, conv), chunks))
    rows = sorted((r for part in parts for r in part), key=lambda r: (r["n"], r["k"]))
    if not rows:
        raise ValidationError("no (n, k) cell with k <= n and p <= n")
    params = {"cmd": "kv-sweep", "n": ns, "k": ks, "p": args.p, "convention": conv.value}
    return _table(args, ["n", "k", "external_reads", "baseline_reads", "reduction"], rows, params)


def _models(names, config):
    if config:
        return [load_model_config(config)]
    out = []
    for name in names.split(","):
        if name not in FALCON3:
            raise ValidationError(f"unknown model {name!r}; known: {', '.join(FALCON3)}")
        out.append(FALCON3[name])
    return out


def cmd_area_estimate(args):
    models = _models(args.models, args.config)
    nodes = [float(x) for x in args.nodes.split(",")]
    base = AreaModel(node_nm=65.0)
    if args.calibrate:
        try:
            name, node, mm2 = args.calibrate.split(":")
            ref = FALCON3[name]
            base = calibrate_area_model(ref.param_count, args.bits_per_param, float(node), float(mm2))
        except (ValueError, KeyError):
            raise ValidationError("--calibrate takes MODEL:NODE_NM:AREA_MM2 with a known model") from None
    rows = [{"model": m.name, "node_nm": node,
             "area_mm2": estimate_area(m.param_count, args.bits_per_param, base.at_node(node))}
            for m in models for node in nodes]
    params = {"cmd": "area-estimate", "models": [m.name for m in models], "nodes": nodes,
              "bits_per_param": args.bits_per_param, "ref_bit_density": base.ref_bit_density}
    return _table(args, ["model", "node_nm", "area_mm2"], rows, params)


def cmd_lora_overhead(args):
    models = _models(args.models, args.config)
    place = args.place.split(",")
    rows = []
    for m in models:
        ops = op_fraction(place, args.rank, m)
        rows.append({"model": m.name, "placement": "".join(p[0] for p in PROJECTIONS if p in ops["per_projection"]),
                     "rank": args.rank, "param_pct": param_fraction(place, args.rank, m),
                     "op_pct_weighted": ops["aggregate_weighted"], "op_pct_mean": ops["aggregate_mean"]})
    params = {"cmd": "lora-overhead", "models": [m.name for m in models], "place": sorted(place), "rank": args.rank}
    return _table(args, ["model", "placement", "rank", "param_pct", "op_pct_weighted", "op_pct_mean"], rows, params)


def cmd_pipeline_sim(args):
    plan = build_partition_plan(args.layers, args.partitions)
    sched = simulate_pipeline(plan, args.batches, args.steps)
    doc = {"partitions": plan.partitions, "layers_per_partition": plan.layers_per_partition,
           "assignment": list(plan.assignment), "batches": args.batches, "steps": args.steps,
           "utilization": sched.utilization, "steady_state_utilization": sched.steady_state_utilization}
    params = {"cmd": "pipeline-sim", "layers": args.layers, "partitions": args.partitions,
              "batches": args.batches, "steps": args.steps}
    if args.format == "csv":
        rows = [{"step": t, **{f"p{p}": ("" if b is None else b) for p, b in enumerate(row)}}
                for t, row in enumerate(sched.grid)]
        return render_csv(["step"] + [f"p{p}" for p in range(plan.partitions)], rows, params)
    return render_json(doc, params)


_TOY_INT = ("layers", "hidden", "heads", "kv_heads", "ffn", "vocab", "act_bits", "depth")


def scenario_from_file(path, seed_flag=None):
    d = read_kv_text(path) if path else {}
    try:
        toy = ToyConfig(**{k: int(d[k]) for k in _TOY_INT if k in d},
                        policy=OverflowPolicy(d.get("policy", "saturate")))
        seed = int(d.get("seed", 0)) if seed_flag is None else seed_flag
        sc = SequenceConfig(int(d.get("n", 8)), int(d.get("p", 1)), int(d.get("k", 2)), seed,
                            Convention(d.get("convention", "decode")))
        extra = {
            "adapter_rank": int(d.get("adapter_rank", 0)),
            "adapters": [s.strip() for s in d.get("adapters", "").split(",") if s.strip()],
            "tbt_ms": float(d.get("tbt_ms", 20.0)),
            "partitions": int(d.get("partitions", toy.layers)),
            "batches": int(d.get("batches", 1)),
        }
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"bad scenario: {exc}") from None
    return toy, sc, extra, d


def cmd_decode_demo(args):
    toy, sc, extra, raw = scenario_from_file(args.config, args.seed)
    model = make_toy_model(toy, sc.seed, adapter_rank=extra["adapter_rank"])
    if extra["adapters"]:
        base = Path(args.config).parent if args.config else Path(".")
        places = ("Value", "Output", "Down")
        files = [load_adapter(base / f) for f in extra["adapters"]]
        if len(files) != len(places) * toy.layers:
            raise ValidationError(f"expected {len(places) * toy.layers} adapter files (V, O, D per layer)")
        model.adapters = {(i, p): files[i * len(places) + j] for i in range(toy.layers) for j, p in enumerate(places)}
    res = run_sequence(model, sc)
    ref = analytic_stats(sc)
    if res.stats != ref:
        raise InvariantError("live KV access counts differ from the analytic trace")
    kvc = KvConfig(sc.seq_len, sc.prompt_len, sc.onchip_tokens, tbt_ms=extra["tbt_ms"])
    refresh = refresh_check(res.trace, kvc)
    plan = build_partition_plan(toy.layers, extra["partitions"])
    sched = simulate_pipeline(plan, extra["batches"], 4 * plan.partitions)
    doc = {
        "tokens": res.tokens,
        "stats": res.stats.to_dict(),
        "analytic_stats": ref.to_dict(),
        "ledger": res.ledger.to_dict(),
        "energy": energy_report(res.ledger, res.stats, CostParams(), fan_in=toy.geometry.trimlas),
        "refresh_valid": refresh.valid,
        "utilization": sched.steady_state_utilization,
    }
    params = {"cmd": "decode-demo", "scenario": raw, "seed": sc.seed}
    return render_json(doc, params)


def cmd_overflow_survey(args):
    depths = parse_range(args.depth)
    threads = thread_count(args.threads)
    run = lambda d: overflow_survey(d, args.act_bits, args.nonzero_prob, args.trials, args.seed)  # noqa: E731
    with ThreadPoolExecutor(max_workers=threads) as pool:
        rates = list(pool.map(run, depths))
    rows = [{"depth": d, "act_bits": args.act_bits, "nonzero_prob": args.nonzero_prob,
             "trials": args.trials, "seed": args.seed, "overflow_rate": r} for d, r in zip(depths, rates)]
    params = {"cmd": "overflow-survey", "depth": depths, "act_bits": args.act_bits,
              "nonzero_prob": args.nonzero_prob, "trials": args.trials, "seed": args.seed}
    return _table(args, ["depth", "act_bits", "nonzero_prob", "trials", "seed", "overflow_rate"], rows, params)


# --- parser ----------------------------------------------------------------

def build_parser():
    p = _Parser(prog="bitrom-sim", description="Ternary compute-in-ROM accelerator simulator.")
    p.add_argument("--version", action="version", version=f"bitrom-sim {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--out", help="output path (default stdout)")
        sp.add_argument("--seed", type=int, default=None if name == "decode-demo" else 0)
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("--threads", type=int, default=0, help=f"worker threads (env {THREADS_ENV})")
        return sp

    sp = add("quantize", cmd_quantize, "ternarize a weight matrix into a packed tensor file")
    sp.add_argument("--input", help=".npy or comma-separated text matrix")
    sp.add_argument("--rows", type=int, default=64)
    sp.add_argument("--cols", type=int, default=64)
    sp.add_argument("--encoding", choices=("two_bit", "base243"), default="two_bit")

    sp = add("simulate-linear", cmd_simulate_linear, "run projection layers through the datapath")
    sp.add_argument("--tensor", help="packed tensor file (random layers otherwise)")
    sp.add_argument("--rows", type=int, default=64)
    sp.add_argument("--cols", type=int, default=32)
    sp.add_argument("--act-bits", type=int, choices=(4, 8), default=4)
    sp.add_argument("--depth", type=int, default=DEFAULT_DEPTH)
    sp.add_argument("--policy", choices=("saturate", "wrap"), default="saturate")
    sp.add_argument("--instances", type=int, default=1)

    sp = add("kv-sweep", cmd_kv_sweep, "external DRAM read reduction over (n, k)")
    sp.add_argument("--n", default="32,64,128,256")
    sp.add_argument("--k", default="4,8,16,32,64")
    sp.add_argument("--p", type=int, default=1, help="prompt tokens")
    sp.add_argument("--convention", choices=[c.value for c in Convention], default="decode")

    sp = add("area-estimate", cmd_area_estimate, "silicon area of full-model ROM mapping")
    sp.add_argument("--models", default=",".join(FALCON3))
    sp.add_argument("--nodes", default="65,28,14")
    sp.add_argument("--bits-per-param", type=float, default=BITS_PER_TRIT)
    sp.add_argument("--calibrate", help="MODEL:NODE_NM:AREA_MM2 to fit the reference density")

    sp = add("lora-overhead", cmd_lora_overhead, "adapter parameter and operation overhead")
    sp.add_argument("--models", default=",".join(FALCON3))
    sp.add_argument("--rank", type=int, default=16)
    sp.add_argument("--place", default=",".join(sorted(DEFAULT_PLACEMENT)))

    sp = add("pipeline-sim", cmd_pipeline_sim, "partition pipeline occupancy")
    sp.add_argument("--layers", type=int, default=18)
    sp.add_argument("--partitions", type=int, default=6)
    sp.add_argument("--batches", type=int, default=6)
    sp.add_argument("--steps", type=int, default=60)

    add("decode-demo", cmd_decode_demo, "toy end-to-end decode with full accounting")

    sp = add("overflow-survey", cmd_overflow_survey, "Monte-Carlo local accumulator overflow rate")
    sp.add_argument("--depth", default="16")
    sp.add_argument("--act-bits", type=int, choices=(4, 8), default=4)
    sp.add_argument("--nonzero-prob", type=float, default=0.5)
    sp.add_argument("--trials", type=int, default=100_000)
    return p


def _fail(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a command is required")
    except UsageError as exc:
        sys.stderr.write(parser.format_usage())
        return _fail("usage", str(exc), 2)
    try:
        text = args.fn(args)
        if text is not None:
            emit(text, args.out)
    except (ValidationError, CorruptionError, OSError) as exc:
        return _fail("validation", str(exc), 3)
    except InvariantError as exc:
        return _fail("invariant", str(exc), 4)
    return 0


def main():
    sys.exit(run())
