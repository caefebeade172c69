"""Cost-model simulator of a decoupled Cube/Vector attention core.

Per KV block the core runs QK on the Cube, hands the scores to the Vector
unit (Exp plus row max / row sum bookkeeping), hands the probabilities back
for PV on the Cube, and finally folds the PV result into the accumulator on
the Vector unit (Update). Consecutive blocks are software pipelined: Cube
group ``g`` is ``[QK_g, PV_{g-1}]`` and Vector stage ``g`` is
``[Exp_g, Update_{g-1}]``; Exp goes first so PV of a block never waits on the
previous block's Update. Each block costs one Cube->Vector and one
Vector->Cube synchronization. The end-of-stream drain handoff is reported
separately as a barrier.

Unified tiling is the special case ``b_kv1 == b_kv2``. With two-level tiling
the synchronizations happen per level-1 block while the level-2 sub-blocks
stream through L0 with double-buffered transfers. Online-softmax numerics stay
per level-2 block, so Vector work is identical in both schemes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .hardware import HardwareModel, transfer_time
from .masking import BlockKind, classify_block
from .timeline import ListScheduler, Timeline

SCORE_BYTES = 4


class CapacityError(ValueError):
    """A block does not fit the on-chip buffer named in the message."""


@dataclass(frozen=True)
class AttnShape:
    batch: int
    seq_len: int
    heads: int
    head_dim: int


@dataclass
class _Block:
    tile: int
    rows: int
    subs: list[tuple[int, BlockKind]] = field(default_factory=list)
    first_in_tile: bool = False
    last_in_tile: bool = False


def working_set_bytes(shape: AttnShape, b_q: int, b_kv1: int, b_kv2: int, bytes_per_scalar: int = 2) -> dict:
    """L1 holds the Q tile and double-buffered K/V level-1 blocks; L0 a double-buffered level-2 operand."""
    d = shape.head_dim
    return {
        "l1": bytes_per_scalar * d * (b_q + 2 * 2 * b_kv1),
        "l0": bytes_per_scalar * d * 2 * b_kv2,
    }


def check_capacity(shape: AttnShape, b_q: int, b_kv1: int, b_kv2: int, hw: HardwareModel, bytes_per_scalar: int = 2):
    ws = working_set_bytes(shape, b_q, b_kv1, b_kv2, bytes_per_scalar)
    if ws["l1"] > hw.l1_capacity:
        raise CapacityError(f"L1 buffer: level-1 working set {ws['l1']} B exceeds l1_capacity {hw.l1_capacity:.0f} B")
    if ws["l0"] > hw.l0_capacity:
        raise CapacityError(f"L0 buffer: level-2 working set {ws['l0']} B exceeds l0_capacity {hw.l0_capacity:.0f} B")


def _tile_blocks(i: int, rows: int, shape: AttnShape, b_q: int, b_kv1: int, b_kv2: int, causal: bool):
    s = shape.seq_len
    per_group = b_kv1 // b_kv2
    n2 = -(-s // b_kv2)
    groups: list[list[tuple[int, BlockKind]]] = []
    for j in range(n2):
        kind = classify_block(i, j, b_q, b_kv2, s).kind if causal else BlockKind.FULL
        if j % per_group == 0:
            groups.append([])
        if kind is not BlockKind.EMPTY:
            groups[-1].append((min(b_kv2, s - j * b_kv2), kind))
    return [g for g in groups if g]


def sync_count_formula(shape: AttnShape, b_q: int, b_kv: int) -> int:
    """``2 * ceil(S/b_kv) * ceil(S/b_q) * B * N`` handoffs for a non-causal pass."""
    s = shape.seq_len
    return 2 * (-(-s // b_kv)) * (-(-s // b_q)) * shape.batch * shape.heads


def simulate_two_level(
    shape: AttnShape,
    b_kv1: int,
    b_kv2: int,
    hw: HardwareModel,
    b_q: int = 128,
    bytes_per_scalar: int = 2,
    causal: bool = False,
) -> Timeline:
    """Timeline of the busiest core; ``meta['sync_count']`` covers all cores."""
    if b_kv1 % b_kv2:
        raise ValueError(f"b_kv2={b_kv2} must divide b_kv1={b_kv1}")
    check_capacity(shape, b_q, b_kv1, b_kv2, hw, bytes_per_scalar)
    s, d, bpe = shape.seq_len, shape.head_dim, bytes_per_scalar
    n_q = -(-s // b_q)
    total_tiles = shape.batch * shape.heads * n_q

    per_i = {}
    total_groups = 0
    for i in range(n_q):
        per_i[i] = _tile_blocks(i, min(b_q, s - i * b_q), shape, b_q, b_kv1, b_kv2, causal)
        total_groups += len(per_i[i]) * shape.batch * shape.heads

    # Tiles go round-robin over cores; core 0 gets the most.
    blocks: list[_Block] = []
    for t_local, tile in enumerate(range(0, total_tiles, hw.ai_cores)):
        i = tile % n_q
        rows = min(b_q, s - i * b_q)
        groups = per_i[i]
        for gi, subs in enumerate(groups):
            blocks.append(_Block(t_local, rows, subs, gi == 0, gi == len(groups) - 1))

    sched = ListScheduler()
    gm = lambda nbytes: transfer_time(nbytes, hw.gm_bw, hw.dma_latency)  # noqa: E731
    l1 = lambda nbytes: transfer_time(nbytes, hw.l1_bw)  # noqa: E731
    sync = hw.sync_latency

    q_load: dict[int, int] = {}
    tile_last_pv: dict[int, int] = {}
    k_load: dict[int, int] = {}
    v_load: dict[int, int] = {}
    qk_last: dict[int, int] = {}
    pv_last: dict[int, int] = {}
    exp_last: dict[int, int] = {}
    l0_consumers: list[int] = []
    core_syncs = 0
    barrier = 0

    def l0_slot():
        return l0_consumers[-2] if len(l0_consumers) >= 2 else None

    n = len(blocks)
    for g in range(n + 1):
        blk = blocks[g] if g < n else None
        prev = blocks[g - 1] if g > 0 else None
        group_end = None
        if blk is not None:
            cols = sum(c for c, _ in blk.subs)
            if blk.first_in_tile:
                q_load[blk.tile] = sched.add(
                    "Dma", f"load_q t{blk.tile}", gm(blk.rows * d * bpe),
                    deps=[tile_last_pv.get(blk.tile - 2)], amount=blk.rows * d * bpe,
                )
            k_load[g] = sched.add("Dma", f"load_k b{g}", gm(cols * d * bpe), deps=[qk_last.get(g - 2)], amount=cols * d * bpe)
            v_load[g] = sched.add("Dma", f"load_v b{g}", gm(cols * d * bpe), deps=[pv_last.get(g - 2)], amount=cols * d * bpe)
            for c, _kind in blk.subs:
                ld = sched.add("DmaL0", f"l0_k b{g}", l1(c * d * bpe), deps=[k_load[g], l0_slot()], amount=c * d * bpe)
                flops = 2 * blk.rows * c * d
                group_end = sched.add("Cube", f"qk b{g}", flops / hw.cube_rate, deps=[ld, q_load[blk.tile]], amount=flops)
                l0_consumers.append(group_end)
            qk_last[g] = group_end
        if prev is not None:
            for c, _kind in prev.subs:
                ld = sched.add("DmaL0", f"l0_v b{g - 1}", l1(c * d * bpe), deps=[v_load[g - 1], l0_slot()], amount=c * d * bpe)
                flops = 2 * prev.rows * c * d
                group_end = sched.add(
                    "Cube", f"pv b{g - 1}", flops / hw.cube_rate, deps=[ld], synced=[exp_last[g - 1]], sync=sync, amount=flops
                )
                l0_consumers.append(group_end)
            pv_last[g - 1] = group_end
            if prev.last_in_tile:
                tile_last_pv[prev.tile] = group_end

        if blk is not None:
            elems = sum(blk.rows * c * (2 if kind is BlockKind.PARTIAL else 1) for c, kind in blk.subs)
            exp_last[g] = sched.add("Vector", f"exp b{g}", elems / hw.vector_rate, synced=[group_end], sync=sync, amount=elems)
            core_syncs += 2
        else:
            barrier += 1
        if prev is not None:
            elems = len(prev.subs) * prev.rows * d + (prev.rows * d if prev.last_in_tile else 0)
            sched.add("Vector", f"update b{g - 1}", elems / hw.vector_rate, synced=[group_end], sync=sync, amount=elems)

    tl = sched.timeline
    tl.meta = {
        "scheme": "unified" if b_kv1 == b_kv2 else "two_level",
        "shape": [shape.batch, shape.seq_len, shape.heads, shape.head_dim],
        "b_q": b_q,
        "b_kv1": b_kv1,
        "b_kv2": b_kv2,
        "causal": causal,
        "ai_cores": hw.ai_cores,
        "tiles_total": total_tiles,
        "tiles_on_core": len({b.tile for b in blocks}),
        "sync_count": 2 * total_groups,
        "core_sync_count": core_syncs,
        "barriers": barrier,
    }
    return tl


def simulate_unified(
    shape: AttnShape,
    b_kv: int,
    hw: HardwareModel,
    b_q: int = 128,
    bytes_per_scalar: int = 2,
    causal: bool = False,
) -> Timeline:
    """Single-level tiling: every KV block synchronizes Cube and Vector."""
    return simulate_two_level(shape, b_kv, b_kv, hw, b_q, bytes_per_scalar, causal)


def compare_tilings(
    seq_lens,
    hw: HardwareModel,
    batch: int = 1,
    heads: int = 5,
    head_dim: int = 128,
    b_q: int = 128,
    b_kv: int = 128,
    b_kv1: int = 512,
    bytes_per_scalar: int = 2,
    causal: bool = False,
) -> list[dict]:
    """Rows of ``S, unified/two-level makespans, reduction %, sync counts``.

    The unified baseline uses ``b_kv``; the two-level scheme uses ``b_kv1``
    level-1 blocks split into ``b_kv``-wide level-2 blocks.
    """
    rows = []
    for s in seq_lens:
        shape = AttnShape(batch, s, heads, head_dim)
        uni = simulate_unified(shape, b_kv, hw, b_q, bytes_per_scalar, causal)
        two = simulate_two_level(shape, b_kv1, b_kv, hw, b_q, bytes_per_scalar, causal)
        rows.append(
            {
                "S": s,
                "unified_makespan": uni.makespan,
                "two_level_makespan": two.makespan,
                "reduction_pct": 100.0 * (1.0 - two.makespan / uni.makespan),
                "unified_syncs": uni.meta["sync_count"],
                "two_level_syncs": two.meta["sync_count"],
            }
        )
    return rows
