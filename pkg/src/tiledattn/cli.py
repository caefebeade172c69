"""Command-line entry point: ``tiledattn <subcommand> [--config] [--seed] [--out] [--profile]``.

Every subcommand writes CSV/JSON into ``--out``, prints a short summary and
exits 0 only if its built-in checks pass. Outputs depend on the config and
seed alone. Files are staged in a temporary directory and moved into place
only after the run finishes, so a failed run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import yaml

from . import allreduce, layout, masking, offload, pipeline
from .config import ExperimentConfig, load_config
from .flash import TileConfig, flash_attention, skip_stats
from .hardware import HardwareModel, builtin_profile, load_profile
from .reference import KvCache, std_attention
from .timeline import validate

GIB = 2**30

PIPELINE_COLUMNS = ["S", "unified_makespan", "two_level_makespan", "reduction_pct", "unified_syncs", "two_level_syncs"]
ALLREDUCE_COLUMNS = ["S", "baseline_ms", "tiled_ms", "speedup", "first_block_rows"]
ATTN_COLUMNS = ["case", "B", "S", "N", "D", "b_q", "b_kv1", "b_kv2", "causal", "max_abs_err", "pass"]
MASK_BLOCK_COLUMNS = ["i", "j", "kind", "offset"]
MASK_MEMORY_COLUMNS = ["S", "full_mask_bytes", "generator_bytes"]
LAYOUT_COLUMNS = ["instr", "partition_ok", "compatible", "exchanges_needed", "c_tiles", "a_tiles"]


class Outputs:
    """Collects output files in memory; written atomically at the end."""

    def __init__(self):
        self.files: dict[str, str] = {}
        self.failures: list[str] = []

    def csv(self, name: str, header, rows) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        self.files[name] = buf.getvalue()

    def json(self, name: str, obj) -> None:
        self.files[name] = json.dumps(obj, indent=2, sort_keys=True) + "\n"

    def text(self, name: str, text: str) -> None:
        self.files[name] = text

    def check(self, ok: bool, what: str) -> None:
        if not ok:
            self.failures.append(what)

    def commit(self, out_dir: Path) -> None:
        out_dir = out_dir.resolve()
        out_dir.parent.mkdir(parents=True, exist_ok=True)
        stage = Path(tempfile.mkdtemp(prefix=".tiledattn-", dir=out_dir.parent))
        try:
            for name, content in self.files.items():
                (stage / name).write_text(content)
            out_dir.mkdir(exist_ok=True)
            for name in self.files:
                (stage / name).replace(out_dir / name)
        finally:
            shutil.rmtree(stage, ignore_errors=True)


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _hw(args, cfg: ExperimentConfig, default: str) -> HardwareModel:
    if args.profile:
        return load_profile(args.profile)
    if cfg.profile:
        return load_profile(cfg.profile)
    return builtin_profile(default)


# ---------------------------------------------------------------- subcommands


def attn_check(args, cfg: ExperimentConfig, out: Outputs) -> None:
    c = cfg.attn_check
    rng = np.random.default_rng(args.seed)
    workers = offload.default_workers()
    rows = []
    worst = 0.0
    for case in range(c.n_configs):
        b = int(rng.integers(1, c.max_batch + 1))
        s = int(rng.integers(1, c.max_seq_len + 1))
        n = int(rng.integers(1, c.max_heads + 1))
        d = int(rng.choice(c.head_dims))
        b_q = int(rng.choice(c.block_sizes))
        b_kv2 = int(rng.choice(c.block_sizes))
        b_kv1 = b_kv2 * int(rng.integers(1, 5))
        causal = bool(rng.integers(0, 2))
        q, k, v = (rng.standard_normal((b, s, n, d)) for _ in range(3))
        tc = TileConfig(b_q, b_kv1, b_kv2, causal, max(b_q, b_kv2))
        err = float(np.max(np.abs(flash_attention(q, k, v, tc, workers) - std_attention(q, k, v, causal))))
        worst = max(worst, err)
        ok = err <= c.tolerance
        out.check(ok, f"case {case}: error {err:.3e}")
        rows.append([case, b, s, n, d, b_q, b_kv1, b_kv2, int(causal), f"{err:.6e}", int(ok)])
    out.csv("attn_check.csv", ATTN_COLUMNS, rows)
    out.json("attn_check.json", {"cases": c.n_configs, "seed": args.seed, "tolerance": c.tolerance,
                                 "max_abs_err": float(f"{worst:.6e}"), "failures": len(out.failures)})
    print(f"attn-check: {c.n_configs} cases, max abs error {worst:.3e} (tolerance {c.tolerance:g})")


def mask_demo(args, cfg: ExperimentConfig, out: Outputs) -> None:
    c = cfg.mask_demo
    m = masking.build_mmask(c.max_block)
    mask = masking.assemble_mask(c.seq_len, c.b_r, c.b_c, m)
    out.check(bool(np.array_equal(mask, np.tril(np.ones((c.seq_len, c.seq_len), dtype=bool)))),
              "assembled mask differs from the causal mask")
    kind, offset = masking.classify_grid(c.seq_len, c.b_r, c.b_c)
    names = {0: "empty", 1: "full", 2: "partial"}
    rows = [[i, j, names[int(kind[i, j])], int(offset[i, j]) if kind[i, j] == 2 else ""]
            for i in range(kind.shape[0]) for j in range(kind.shape[1])]
    out.csv("mask_blocks.csv", MASK_BLOCK_COLUMNS, rows)
    mem = [[s, *masking.mask_memory_bytes(s, c.max_block, c.bytes_per_element)] for s in c.memory_seq_lens]
    out.csv("mask_memory.csv", MASK_MEMORY_COLUMNS, mem)
    out.text("mask.txt", "\n".join("".join("1" if x else "." for x in row) for row in mask) + "\n")
    stats = skip_stats(c.seq_len, TileConfig(c.b_r, c.b_c, c.b_c, True, c.max_block))
    out.json("mask_demo.json", {"seq_len": c.seq_len, "b_r": c.b_r, "b_c": c.b_c, "max_block": c.max_block,
                                "blocks": stats})
    print(f"mask-demo: S={c.seq_len} blocks {stats}")


def pipeline_sim(args, cfg: ExperimentConfig, out: Outputs) -> None:
    c = cfg.pipeline_sim
    hw = _hw(args, cfg, "npu_default")
    table = pipeline.compare_tilings(c.seq_lens, hw, c.batch, c.heads, c.head_dim, c.b_q, c.b_kv, c.b_kv1,
                                     causal=c.causal)
    ratio = c.b_kv1 // c.b_kv
    for r in table:
        if not c.causal:
            out.check(r["unified_syncs"] == ratio * r["two_level_syncs"], f"S={r['S']}: sync ratio")
        out.check(r["two_level_makespan"] <= r["unified_makespan"], f"S={r['S']}: two-level slower")
    out.csv("pipeline.csv", PIPELINE_COLUMNS, [[_fmt(r[k]) for k in PIPELINE_COLUMNS] for r in table])
    shape = pipeline.AttnShape(c.batch, c.timeline_seq_len, c.heads, c.head_dim)
    for name, tl in (
        ("timeline_unified.json", pipeline.simulate_unified(shape, c.b_kv, hw, c.b_q, causal=c.causal)),
        ("timeline_two_level.json", pipeline.simulate_two_level(shape, c.b_kv1, c.b_kv, hw, c.b_q, causal=c.causal)),
    ):
        validate(tl, tol=1e-15)
        out.json(name, tl.to_dict())
    for r in table:
        print(f"pipeline-sim: S={r['S']:>6} reduction {r['reduction_pct']:.1f}%  syncs {r['unified_syncs']} -> "
              f"{r['two_level_syncs']}")


def allreduce_sim(args, cfg: ExperimentConfig, out: Outputs) -> None:
    c = cfg.allreduce_sim
    hw = _hw(args, cfg, "npu_default")
    table = allreduce.compare_allreduce(c.seq_lens, hw, c.heads, c.head_dim, c.n_devices, c.batch, c.n_blocks,
                                        causal=c.causal)
    for r in table:
        out.check(r["speedup"] >= 1.0, f"S={r['S']}: speedup below 1")
    out.csv("allreduce.csv", ALLREDUCE_COLUMNS, [[_fmt(r[k]) for k in ALLREDUCE_COLUMNS] for r in table])

    nc = c.numeric
    rng = np.random.default_rng(args.seed)
    q, k, v = (rng.standard_normal((nc.batch, nc.seq_len, nc.heads, nc.head_dim)) for _ in range(3))
    w_o = rng.standard_normal((nc.heads * nc.head_dim, nc.heads * nc.head_dim)) * 0.1
    partials = allreduce.device_partials(*allreduce.shard_heads(q, k, v, w_o, nc.n_devices))
    rows = allreduce.even_block_rows(nc.batch * nc.seq_len, nc.n_blocks)
    wl = allreduce.TpWorkload(nc.seq_len, nc.heads, nc.head_dim, nc.n_devices, nc.batch)
    cluster = allreduce.ClusterConfig(nc.n_devices, wl.heads_per_device, rows)
    tl, tiled = allreduce.tiled_allreduce_schedule(cluster, wl, hw, partials)
    _, mono = allreduce.monolithic_allreduce_schedule(cluster, wl, hw, partials)
    validate(tl, tol=1e-15)
    err = float(np.max(np.abs(mono - allreduce.attention_linear(q, k, v, w_o))))
    bitwise = bool(np.array_equal(tiled, mono))
    out.check(bitwise, "tiled and monolithic reductions differ")
    out.check(err <= 1e-12, f"sharded result off by {err:.3e}")
    out.json("allreduce_check.json", {"seed": args.seed, "bitwise_equal": bitwise, "oracle_max_abs_err": err,
                                      "block_rows": list(rows)})
    out.json("timeline_allreduce.json", tl.to_dict())
    print("allreduce-sim: speedups " + ", ".join(f"{r['S']}:{r['speedup']:.3f}" for r in table)
          + f"; bitwise equal {bitwise}")


def _model(name: str) -> offload.ModelConfig:
    if name.endswith((".yaml", ".yml")):
        return offload.load_model(name)
    return offload.builtin_model(name)


def offload_plan(args, cfg: ExperimentConfig, out: Outputs) -> None:
    c = cfg.offload_plan
    hw = _hw(args, cfg, "v100_like")
    model = _model(c.model).with_(S=c.seq_len)
    mp = offload.plan(model, c.gpu_memory_gib * GIB, c.cpu_memory_gib * GIB, c.n_devices)
    out.check(mp.L_GPU + mp.L_CPU == model.L, "L_GPU + L_CPU != L")
    out.json("memory_plan.json", {"model": model.model_dump(), "n_devices": c.n_devices,
                                  "gpu_memory_bytes": c.gpu_memory_gib * GIB, "cpu_memory_bytes": c.cpu_memory_gib * GIB,
                                  "plan": mp.to_dict()})

    rows = offload.latency_table(model, c.table_seq_lens, c.table_gpu_memory_gib * GIB, c.cpu_memory_gib * GIB,
                                 c.n_devices, hw)
    offloaded = [r for r in rows if r["offloaded"]]
    out.check(len({r["cooperative"]["off_upload"] for r in offloaded}) <= 1, "Off_Upload varies with S")
    for r in offloaded:
        out.check(r["cooperative"]["total"] < r["classical"]["total"], f"S={r['S']}: cooperative not faster")
    out.csv("offload_latency.csv", offload.TABLE_COLUMNS, offload.table_rows(rows))

    table_plan = offload.plan(model, c.table_gpu_memory_gib * GIB, c.cpu_memory_gib * GIB, c.n_devices)
    tl = offload.prefill_offload_overlap(model, table_plan, hw, c.n_devices)
    validate(tl, tol=1e-12)
    out.json("prefill_overlap.json", {"L_CPU": tl.meta["L_CPU"], "added_latency": tl.meta["added_latency"],
                                      "compute_only": tl.meta["compute_only"], "makespan": tl.makespan})

    # Host attention executor against the oracle on a small seeded cache.
    rng = np.random.default_rng(args.seed)
    b, n, d, length = 1, 4, 16, c.decode_check_cache_len
    cache = KvCache(rng.standard_normal((b, length, n * d)), rng.standard_normal((b, length, n * d)))
    q = rng.standard_normal((b, 1, n, d))
    got = offload.cpu_decode_attention(q, cache, workers=offload.default_workers())
    ref = std_attention(q, cache.k.reshape(b, length, n, d), cache.v.reshape(b, length, n, d))
    err = float(np.max(np.abs(got - ref)))
    out.check(err <= 1e-12, f"host decode attention off by {err:.3e}")
    print(f"offload-plan: {model.name} S={model.S} n={c.n_devices} L_GPU={mp.L_GPU} L_CPU={mp.L_CPU} "
          f"feasible={mp.feasible}")
    for r in offloaded:
        ratio = r["classical"]["total"] / r["cooperative"]["total"]
        print(f"offload-plan: S={r['S']:>6} L_CPU={r['L_CPU']:>2} cooperative speedup {ratio:.2f}x")


def layout_check(args, cfg: ExperimentConfig, out: Outputs) -> None:
    lanes = cfg.layout_check.lanes
    rows, report, text = [], {}, []
    expected = {"m16n8k16": True, "m8n8k4_f32acc": False, "m8n8k4_f16acc": True}
    for instr in layout.INSTRUCTIONS:
        fm = layout.load_fragment_map(instr)
        errs = [e for r in "ABC" for e in layout.partition_errors(fm.roles[r])] + layout.quadpair_errors(fm)
        verdict = layout.check_b2b_compat(instr)
        out.check(not errs, f"{instr}: {errs[:3]}")
        out.check(verdict["compatible"] == expected[instr], f"{instr}: unexpected verdict")
        rows.append([instr, int(not errs), int(verdict["compatible"]), verdict["exchanges_needed"],
                     verdict["c_tiles"], verdict["a_tiles"]])
        conv = layout.convert_layout_acc_aregs(fm)
        report[instr] = {**verdict, "partition_errors": errs, "moves": len(conv.moves)}
        text.append(f"== {instr}: compatible={verdict['compatible']} exchanges={verdict['exchanges_needed']}")
        for role in "ABC":
            text.append(f"-- {role} {list(fm.roles[role].shape)}")
            text.extend(layout.ownership_table(fm, role, lanes))
        print(f"layout-check: {instr:14s} compatible={verdict['compatible']!s:5s} "
              f"exchanges_needed={verdict['exchanges_needed']}")
    out.csv("layout.csv", LAYOUT_COLUMNS, rows)
    out.json("layout.json", report)
    out.text("layout.txt", "\n".join(text) + "\n")


def bench(args, cfg: ExperimentConfig, out: Outputs) -> None:
    """Run every experiment; one CSV per experiment plus its side files."""
    for fn in (attn_check, mask_demo, pipeline_sim, allreduce_sim, offload_plan, layout_check):
        fn(args, cfg, out)


COMMANDS = {
    "attn-check": attn_check,
    "mask-demo": mask_demo,
    "pipeline-sim": pipeline_sim,
    "allreduce-sim": allreduce_sim,
    "offload-plan": offload_plan,
    "layout-check": layout_check,
    "bench": bench,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tiledattn", description="Tiled attention checks and cost-model experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).strip().splitlines()[0] if fn.__doc__ else None)
        p.add_argument("--config", type=Path, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=0, help="RNG seed (unsigned 64-bit)")
        p.add_argument("--out", type=Path, default=Path("out") / name, help="output directory")
        p.add_argument("--profile", type=Path, help="hardware profile YAML (overrides the config)")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
        if args.profile is not None and not args.profile.is_file():
            raise FileNotFoundError(f"profile {args.profile} does not exist")
        out = Outputs()
        COMMANDS[args.command](args, cfg, out)
    except (ValueError, FileNotFoundError, KeyError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out.commit(args.out)
    if out.failures:
        for f in out.failures:
            print(f"FAIL: {f}", file=sys.stderr)
        return 1
    print(f"wrote {len(out.files)} files to {args.out}")
    return 0


def main() -> None:
    sys.exit(run())

