"""Tensor-parallel attention + output projection with block-wise AllReduce.

Devices are logical shards in one process. Each device owns a slice of the
heads and the matching rows of ``W_O``; its partial output is summed over
devices. The tiled schedule cuts the ``B*S`` rows into blocks and starts each
block's AllReduce as soon as that block is computed, so communication of
block ``k`` overlaps computation of block ``k + 1``. Reductions always add
devices in order ``0..n-1``, which makes tiled and monolithic results
bitwise identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .hardware import HardwareModel, transfer_time
from .reference import std_attention
from .tensors import DimensionError, matmul
from .timeline import ListScheduler, Timeline


@dataclass(frozen=True)
class TpWorkload:
    """Attention + linear problem split over ``n_devices`` by heads."""

    seq_len: int
    heads: int
    head_dim: int
    n_devices: int
    batch: int = 1
    bytes_per_scalar: int = 2
    causal: bool = True

    def __post_init__(self):
        if self.n_devices < 1 or self.heads % self.n_devices:
            raise ValueError(f"{self.n_devices} devices do not divide {self.heads} heads")

    @property
    def hidden(self) -> int:
        return self.heads * self.head_dim

    @property
    def rows(self) -> int:
        return self.batch * self.seq_len

    @property
    def heads_per_device(self) -> int:
        return self.heads // self.n_devices

    def flops_per_row(self) -> float:
        """Per-device FLOPs of one query row; causal rows see (S+1)/2 keys on average."""
        keys = (self.seq_len + 1) / 2 if self.causal else self.seq_len
        local = self.heads_per_device * self.head_dim
        return 4.0 * keys * local + 2.0 * local * self.hidden

    def bytes_per_row(self) -> int:
        return self.hidden * self.bytes_per_scalar


@dataclass(frozen=True)
class ClusterConfig:
    n_devices: int
    heads_per_device: int
    block_rows: tuple[int, ...]

    def __post_init__(self):
        if not self.block_rows:
            raise ValueError("block_rows is empty")
        if min(self.block_rows) < 1:
            raise ValueError("every block needs at least one row")
        if self.block_rows[0] > min(self.block_rows):
            raise ValueError("the first block must be the smallest")

    def check(self, workload: TpWorkload) -> None:
        if sum(self.block_rows) != workload.rows:
            raise ValueError(f"block rows sum to {sum(self.block_rows)}, expected B*S={workload.rows}")
        if self.n_devices != workload.n_devices or self.heads_per_device != workload.heads_per_device:
            raise ValueError("cluster does not match the workload's device/head split")


def ring_allreduce_time(nbytes: float, n_devices: int, hw: HardwareModel) -> float:
    """``2(n-1)/n * bytes / bw + 2(n-1) * latency``."""
    if n_devices == 1:
        return 0.0
    steps = 2 * (n_devices - 1)
    return transfer_time(steps / n_devices * nbytes, hw.interconnect_bw, steps * hw.interconnect_latency)


# ---------------------------------------------------------------- numerics


def shard_heads(q, k, v, w_o, n_devices: int):
    """Split ``[B,S,N,D]`` tensors by heads and ``W_O`` by its input rows."""
    heads, d = q.shape[2], q.shape[3]
    if heads % n_devices:
        raise DimensionError(f"{n_devices} devices do not divide {heads} heads")
    h = heads // n_devices
    qs = [q[:, :, i * h : (i + 1) * h, :] for i in range(n_devices)]
    ks = [k[:, :, i * h : (i + 1) * h, :] for i in range(n_devices)]
    vs = [v[:, :, i * h : (i + 1) * h, :] for i in range(n_devices)]
    ws = [w_o[i * h * d : (i + 1) * h * d, :] for i in range(n_devices)]
    return qs, ks, vs, ws


def attention_linear(q, k, v, w_o, causal: bool = False) -> np.ndarray:
    """Unsharded oracle: attention over all heads, merged, times ``W_O``."""
    b, s, n, d = q.shape
    return matmul(std_attention(q, k, v, causal).reshape(b, s, n * d), w_o)


def device_partials(q_shards, k_shards, v_shards, wo_shards, causal: bool = False) -> list[np.ndarray]:
    if not (len(q_shards) == len(k_shards) == len(v_shards) == len(wo_shards)):
        raise DimensionError("shard lists differ in length")
    return [attention_linear(q, k, v, w, causal) for q, k, v, w in zip(q_shards, k_shards, v_shards, wo_shards)]


def reduce_fixed_order(partials) -> np.ndarray:
    """Sum over devices in order 0..n-1."""
    out = np.array(partials[0], copy=True)
    for p in partials[1:]:
        out = out + p
    return out


def tp_attention_linear(q_shards, k_shards, v_shards, wo_shards, causal: bool = False) -> list[np.ndarray]:
    """Every device's view of the AllReduced attention + linear output."""
    total = reduce_fixed_order(device_partials(q_shards, k_shards, v_shards, wo_shards, causal))
    return [total.copy() for _ in q_shards]


def tiled_reduce(partials, block_rows) -> np.ndarray:
    """Block-by-block reduction over the flattened ``B*S`` row axis."""
    flat = [p.reshape(-1, p.shape[-1]) for p in partials]
    if sum(block_rows) != flat[0].shape[0]:
        raise DimensionError("block rows do not cover the row axis")
    out = np.empty_like(flat[0])
    r0 = 0
    for rows in block_rows:
        out[r0 : r0 + rows] = reduce_fixed_order([f[r0 : r0 + rows] for f in flat])
        r0 += rows
    return out.reshape(partials[0].shape)


# ---------------------------------------------------------------- schedules


def _block_compute(rows: int, workload: TpWorkload, hw: HardwareModel) -> float:
    return rows * workload.flops_per_row() / hw.device_flops


def _schedule(cluster: ClusterConfig, workload: TpWorkload, hw: HardwareModel, tiled: bool) -> Timeline:
    cluster.check(workload)
    sched = ListScheduler()
    links = [f"Link{c}" for c in range(hw.sdma_channels)]
    last = None
    for k, rows in enumerate(cluster.block_rows):
        last = sched.add("Compute", f"attn+linear blk{k}", _block_compute(rows, workload, hw),
                         amount=rows * workload.flops_per_row())
        if tiled:
            nbytes = rows * workload.bytes_per_row()
            sched.add(links[k % len(links)], f"B-allreduce blk{k}",
                      ring_allreduce_time(nbytes, workload.n_devices, hw), deps=[last], amount=nbytes)
    if not tiled:
        nbytes = workload.rows * workload.bytes_per_row()
        sched.add(links[0], "allreduce", ring_allreduce_time(nbytes, workload.n_devices, hw), deps=[last], amount=nbytes)
    tl = sched.timeline
    tl.meta = {"scheme": "tiled" if tiled else "monolithic", "block_rows": list(cluster.block_rows),
               "n_devices": workload.n_devices}
    return tl


def monolithic_allreduce_schedule(cluster, workload, hw, partials=None):
    """Baseline: compute every block, then one AllReduce of all rows."""
    tl = _schedule(cluster, workload, hw, tiled=False)
    result = reduce_fixed_order(partials) if partials is not None else None
    return tl, result


def tiled_allreduce_schedule(cluster, workload, hw, partials=None):
    """Per-block AllReduce overlapped with the next block's compute."""
    tl = _schedule(cluster, workload, hw, tiled=True)
    result = tiled_reduce(partials, cluster.block_rows) if partials is not None else None
    return tl, result


def even_block_rows(total_rows: int, n_blocks: int) -> tuple[int, ...]:
    base, rem = divmod(total_rows, n_blocks)
    return tuple(base + (1 if i >= n_blocks - rem else 0) for i in range(n_blocks))


def _pipeline_makespan(blocks, a: float, comm, channels: int) -> float:
    """Two-stage flow shop: compute blocks in order, each AllReduce on the next free link."""
    t_compute = 0.0
    link_free = [0.0] * channels
    end = 0.0
    for k, rows in enumerate(blocks):
        t_compute += rows * a
        ch = k % channels
        link_free[ch] = max(link_free[ch], t_compute) + comm(rows)
        end = max(end, link_free[ch])
    return end


def choose_block_rows(total_rows: int, n_blocks: int, hw: HardwareModel, workload: TpWorkload) -> tuple[int, ...]:
    """Small first block, the rest split evenly.

    Every first-block size up to an even share is scored with the same
    pipeline recurrence the scheduler uses; the shortest makespan wins and
    ties go to the larger first block (fewer, bigger transfers).
    """
    if n_blocks < 1:
        raise ValueError("n_blocks must be >= 1")
    if total_rows < n_blocks:
        raise ValueError(f"{total_rows} rows cannot fill {n_blocks} blocks")
    if n_blocks == 1:
        return (total_rows,)
    a = workload.flops_per_row() / hw.device_flops
    bpr = workload.bytes_per_row()

    def comm(rows: int) -> float:
        return ring_allreduce_time(rows * bpr, workload.n_devices, hw)

    best, best_t = None, math.inf
    for first in range(total_rows // n_blocks, 0, -1):
        blocks = (first,) + even_block_rows(total_rows - first, n_blocks - 1)
        t = _pipeline_makespan(blocks, a, comm, hw.sdma_channels)
        if t < best_t * (1 - 1e-12):
            best, best_t = blocks, t
    return best


def compare_allreduce(
    seq_lens,
    hw: HardwareModel,
    heads: int = 40,
    head_dim: int = 128,
    n_devices: int = 8,
    batch: int = 1,
    n_blocks: int = 4,
    bytes_per_scalar: int = 2,
    causal: bool = True,
) -> list[dict]:
    rows = []
    for s in seq_lens:
        wl = TpWorkload(s, heads, head_dim, n_devices, batch, bytes_per_scalar, causal)
        blocks = choose_block_rows(wl.rows, n_blocks, hw, wl)
        cluster = ClusterConfig(n_devices, wl.heads_per_device, blocks)
        base, _ = monolithic_allreduce_schedule(cluster, wl, hw)
        tiled, _ = tiled_allreduce_schedule(cluster, wl, hw)
        rows.append(
            {
                "S": s,
                "baseline_ms": base.makespan * 1e3,
                "tiled_ms": tiled.makespan * 1e3,
                "speedup": base.makespan / tiled.makespan,
                "first_block_rows": blocks[0],
            }
        )
    return rows
