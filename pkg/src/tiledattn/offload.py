"""CPU-GPU cooperative KV-cache placement and decode-time cost comparison.

When the KV cache of every layer does not fit the accelerators, the first
``L_CPU`` layers keep their cache in host memory. During prefill that cache is
offloaded right after the K/V projections, overlapping the rest of the layer.
During decode the classical approach uploads the whole layer cache every
step; the cooperative approach ships the single-token Q/K/V to the host,
runs attention there, and uploads only the result.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .hardware import HardwareModel, transfer_time
from .reference import KvCache
from .tensors import DimensionError, matmul, softmax_rows
from .timeline import ListScheduler, Timeline

WORKERS_ENV = "TILEDATTN_WORKERS"
MODEL_SCHEMA_VERSION = 1


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "model"
    L: int = Field(gt=0, description="transformer layers")
    H1: int = Field(gt=0, description="attention hidden size")
    H2: int = Field(gt=0, description="MLP hidden size")
    N: int = Field(gt=0, description="attention heads")
    D: int = Field(gt=0, description="head dim")
    V: int = Field(gt=0, description="vocabulary size")
    B: int = Field(default=1, gt=0)
    S: int = Field(default=1024, gt=0, description="prompt length")
    O: int = Field(default=128, gt=0, description="output length")
    bytes_per_scalar: int = Field(default=2, gt=0)

    @model_validator(mode="after")
    def _heads(self):
        if self.H1 != self.N * self.D:
            raise ValueError(f"H1={self.H1} must equal N*D={self.N * self.D}")
        return self

    def with_(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**self.model_dump(), **changes})


def load_model(path: str | Path) -> ModelConfig:
    """Model file: ``schema_version``, optional ``note`` and a ``model`` mapping."""
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    unknown = set(doc) - {"schema_version", "note", "model"}
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    if doc.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ValueError(f"{path}: schema_version must be {MODEL_SCHEMA_VERSION}")
    return ModelConfig(**doc["model"])


def builtin_model(name: str) -> ModelConfig:
    from importlib import resources

    path = resources.files("tiledattn") / "data" / "models" / f"{name}.yaml"
    if not path.is_file():
        raise FileNotFoundError(f"no built-in model named {name!r}")
    return load_model(str(path))


@dataclass(frozen=True)
class MemoryPlan:
    L_GPU: int
    L_CPU: int
    L_GPU_formula: int
    m_w: int
    m_kv_per_layer: float
    m_mid: float
    m_vocab: int
    m_vocab_literal: int
    cpu_kv_bytes: int
    feasible: bool

    def to_dict(self) -> dict:
        return asdict(self)


def plan(model: ModelConfig, m_gpu: float, m_cpu: float, n: int) -> MemoryPlan:
    """Split layers between accelerator-resident and host-resident KV cache.

    Every byte term is an element count times ``bytes_per_scalar``, the
    vocabulary matrix included. ``m_vocab_literal`` keeps the width-free ``V*H1`` count.
    """
    if n < 1:
        raise ValueError("device count must be >= 1")
    L, H1, H2, B, S, O, V = model.L, model.H1, model.H2, model.B, model.S, model.O, model.V
    s = model.bytes_per_scalar
    m_w = L * (4 * H1 * H1 + 2 * H1 * H2) * s
    kv_all = 2 * B * H1 * (S + O) * s
    mid_all = 3 * B * S * H1 * s
    m_vocab = V * H1 * s
    if kv_all <= 0:
        raise ValueError("KV bytes per layer must be positive")
    numerator = n * m_gpu - m_w - mid_all - n * m_vocab
    formula = math.floor(numerator / kv_all)
    l_gpu = min(max(formula, 0), L)
    l_cpu = L - l_gpu
    cpu_kv = l_cpu * kv_all
    feasible = numerator >= 0 and cpu_kv <= m_cpu
    return MemoryPlan(
        L_GPU=l_gpu,
        L_CPU=l_cpu,
        L_GPU_formula=formula,
        m_w=m_w,
        m_kv_per_layer=kv_all / n,
        m_mid=mid_all / n,
        m_vocab=m_vocab,
        m_vocab_literal=V * H1,
        cpu_kv_bytes=cpu_kv,
        feasible=feasible,
    )


# ---------------------------------------------------------------- host attention


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return int(env)
    return min(8, os.cpu_count() or 1)


def cpu_decode_attention(q: np.ndarray, cache: KvCache, workers: int | None = None) -> np.ndarray:
    """One-token attention over a host cache, ``q`` is ``[B, 1, N, D]``.

    Each (batch, head) pair is computed independently with the same operation
    order, so the result does not depend on the worker count.
    """
    if workers is None:
        workers = default_workers()
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if cache.length == 0:
        raise DimensionError("cache is empty")
    b, one, n, d = q.shape
    if one != 1:
        raise DimensionError(f"expected a single query token, got {one}")
    if cache.k.shape[0] != b or cache.k.shape[2] != n * d:
        raise DimensionError(f"cache {cache.k.shape} does not match query {q.shape}")
    k = cache.k.reshape(b, cache.length, n, d)
    v = cache.v.reshape(b, cache.length, n, d)
    scale = 1.0 / math.sqrt(d)
    out = np.empty_like(q)

    def run(job: int) -> None:
        bi, h = divmod(job, n)
        scores = matmul(q[bi, :, h, :], k[bi, :, h, :].T) * scale
        out[bi, :, h, :] = matmul(softmax_rows(scores), v[bi, :, h, :])

    jobs = range(b * n)
    if workers == 1:
        for j in jobs:
            run(j)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, jobs))
    return out


# ---------------------------------------------------------------- cost model


def _decode_costs(model: ModelConfig, seq_len: int, hw: HardwareModel, n: int) -> dict:
    s = model.bytes_per_scalar
    kv_bytes = 2 * model.B * model.H1 * seq_len * s / n
    flops = 4.0 * model.B * seq_len * model.H1 / n
    gpu_calc = max(flops / hw.device_flops, kv_bytes / hw.device_mem_bw)
    upload = transfer_time(kv_bytes, hw.pcie_bw, hw.pcie_latency)
    # Q, K, V down and the result up, each B x 1 x H1.
    small = 4 * model.B * model.H1 * s
    off_upload = transfer_time(small, hw.pcie_bw, 2 * hw.pcie_latency)
    cpu_calc = flops / hw.cpu_rate
    return {"upload": upload, "gpu_calc": gpu_calc, "cpu_calc": cpu_calc, "off_upload": off_upload}


TABLE_COLUMNS = ["Seq_length", "Upload", "GPU_Calc", "Total", "CPU_Calc", "Off_Upload", "Total", "GPU_Calc"]


def decode_latency_compare(model: ModelConfig, mplan: MemoryPlan, hw: HardwareModel, n: int) -> dict:
    """Per-layer decode attention latency (seconds) for one prompt length.

    ``offloaded`` is false when the plan keeps every layer on the accelerator;
    then both strategies reduce to ``gpu_calc``.
    """
    c = _decode_costs(model, model.S, hw, n)
    offloaded = mplan.L_CPU > 0
    classical = {"upload": c["upload"], "gpu_calc": c["gpu_calc"], "total": c["upload"] + c["gpu_calc"]}
    cooperative = {
        "cpu_calc": c["cpu_calc"],
        "off_upload": c["off_upload"],
        "total": c["cpu_calc"] + c["off_upload"],
    }
    if not offloaded:
        classical = {"upload": None, "gpu_calc": c["gpu_calc"], "total": c["gpu_calc"]}
        cooperative = {"cpu_calc": None, "off_upload": None, "total": None}
    return {
        "S": model.S,
        "offloaded": offloaded,
        "L_CPU": mplan.L_CPU,
        "classical": classical,
        "cooperative": cooperative,
        "gpu_layers": {"gpu_calc": c["gpu_calc"]},
    }


def latency_table(model: ModelConfig, seq_lens, m_gpu: float, m_cpu: float, n: int, hw: HardwareModel) -> list[dict]:
    rows = []
    for s in seq_lens:
        m = model.with_(S=s)
        rows.append(decode_latency_compare(m, plan(m, m_gpu, m_cpu, n), hw, n))
    return rows


def table_rows(rows: list[dict]) -> list[list[str]]:
    """Millisecond strings in ``TABLE_COLUMNS`` order; ``-`` where no offload happens."""

    def ms(x):
        return "-" if x is None else f"{x * 1e3:.6f}"

    out = []
    for r in rows:
        c, k = r["classical"], r["cooperative"]
        out.append([str(r["S"]), ms(c["upload"]), ms(c["gpu_calc"]), ms(c["total"]), ms(k["cpu_calc"]),
                    ms(k["off_upload"]), ms(k["total"]), ms(r["gpu_layers"]["gpu_calc"])])
    return out


def prefill_offload_overlap(model: ModelConfig, mplan: MemoryPlan, hw: HardwareModel, n: int) -> Timeline:
    """Prefill of all layers with host offload of the first ``L_CPU`` caches.

    Each layer runs its K/V projections, then the rest of its compute. The
    offload of that layer's cache starts after the projections; the next layer
    waits for it so the device buffer can be reused. ``meta['added_latency']``
    is the offload time left exposed past each layer's compute.
    """
    B, S, H1, H2 = model.B, model.S, model.H1, model.H2
    f = hw.device_flops
    kv_proj = 4.0 * B * S * H1 * H1 / n / f
    rest = (4.0 * B * S * H1 * H1 + 2.0 * B * S * S * H1 + 4.0 * B * S * H1 * H2) / n / f
    kv_bytes = 2 * B * S * H1 * model.bytes_per_scalar / n
    sched = ListScheduler()
    gate = None
    added = 0.0
    for layer in range(model.L):
        kp = sched.add("Compute", f"kv_proj L{layer}", kv_proj, deps=[gate])
        rs = sched.add("Compute", f"attn+mlp L{layer}", rest, deps=[kp])
        gate = None
        if layer < mplan.L_CPU:
            off = sched.add("Pcie", f"offload_kv L{layer}", transfer_time(kv_bytes, hw.pcie_bw, hw.pcie_latency),
                            deps=[kp], amount=kv_bytes)
            added += max(0.0, sched.end_of(off) - sched.end_of(rs))
            gate = off
    tl = sched.timeline
    tl.meta = {"L_CPU": mplan.L_CPU, "added_latency": added, "compute_only": model.L * (kv_proj + rest)}
    return tl
