"""Experiment configuration files for the command-line tool.

A config file is YAML with ``schema_version: 1``, an optional ``profile``
path and one section per subcommand. Every section has defaults, so a
subcommand runs without any file. Unknown keys are rejected.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class AttnCheckConfig(_Strict):
    n_configs: int = Field(default=50, ge=1)
    max_seq_len: int = Field(default=128, ge=1)
    max_batch: int = Field(default=2, ge=1)
    max_heads: int = Field(default=3, ge=1)
    head_dims: list[int] = [8, 16, 32]
    block_sizes: list[int] = [4, 8, 16, 32]
    tolerance: float = Field(default=1e-12, gt=0)


class MaskDemoConfig(_Strict):
    seq_len: int = Field(default=16, ge=1)
    b_r: int = Field(default=4, ge=1)
    b_c: int = Field(default=4, ge=1)
    max_block: int = Field(default=8, ge=1)
    bytes_per_element: int = Field(default=2, ge=1)
    memory_seq_lens: list[int] = [4096, 16384, 65536]

    @model_validator(mode="after")
    def _fits(self):
        if max(self.b_r, self.b_c) > self.max_block:
            raise ValueError("b_r and b_c must not exceed max_block")
        return self


class PipelineConfig(_Strict):
    seq_lens: list[int] = [1024, 2048, 4096, 8192, 16384]
    batch: int = Field(default=1, ge=1)
    heads: int = Field(default=5, ge=1)
    head_dim: int = Field(default=128, ge=1)
    b_q: int = Field(default=128, ge=1)
    b_kv: int = Field(default=128, ge=1)
    b_kv1: int = Field(default=512, ge=1)
    causal: bool = False
    timeline_seq_len: int = Field(default=1024, ge=1)

    @model_validator(mode="after")
    def _divides(self):
        if self.b_kv1 % self.b_kv:
            raise ValueError("b_kv must divide b_kv1")
        return self


class NumericCheck(_Strict):
    batch: int = Field(default=1, ge=1)
    seq_len: int = Field(default=48, ge=1)
    heads: int = Field(default=4, ge=1)
    head_dim: int = Field(default=8, ge=1)
    n_devices: int = Field(default=2, ge=1)
    n_blocks: int = Field(default=3, ge=1)


class AllreduceConfig(_Strict):
    seq_lens: list[int] = [2048, 4096, 8192, 16384, 32768]
    heads: int = Field(default=40, ge=1)
    head_dim: int = Field(default=128, ge=1)
    n_devices: int = Field(default=8, ge=1)
    batch: int = Field(default=1, ge=1)
    n_blocks: int = Field(default=4, ge=1)
    causal: bool = True
    numeric: NumericCheck = NumericCheck()


class OffloadConfig(_Strict):
    model: str = Field(default="pangu_38b", description="built-in model name or a model file path")
    seq_len: int = Field(default=262144, ge=1)
    n_devices: int = Field(default=8, ge=1)
    gpu_memory_gib: float = Field(default=32.0, gt=0)
    cpu_memory_gib: float = Field(default=512.0, gt=0)
    table_seq_lens: list[int] = [1024, 2048, 4096, 8192, 16384, 32768, 65536, 131072, 262144]
    # Accelerator memory left for this model after runtime workspace; calibration constant.
    table_gpu_memory_gib: float = Field(default=4.75, gt=0)
    decode_check_cache_len: int = Field(default=256, ge=1)


class LayoutConfig(_Strict):
    lanes: list[int] = [0, 1, 4, 16]


class BenchConfig(_Strict):
    pass


SECTIONS = {
    "attn-check": ("attn_check", AttnCheckConfig),
    "mask-demo": ("mask_demo", MaskDemoConfig),
    "pipeline-sim": ("pipeline_sim", PipelineConfig),
    "allreduce-sim": ("allreduce_sim", AllreduceConfig),
    "offload-plan": ("offload_plan", OffloadConfig),
    "layout-check": ("layout_check", LayoutConfig),
    "bench": ("bench", BenchConfig),
}


class ExperimentConfig(_Strict):
    schema_version: int = SCHEMA_VERSION
    profile: Optional[str] = None
    attn_check: AttnCheckConfig = AttnCheckConfig()
    mask_demo: MaskDemoConfig = MaskDemoConfig()
    pipeline_sim: PipelineConfig = PipelineConfig()
    allreduce_sim: AllreduceConfig = AllreduceConfig()
    offload_plan: OffloadConfig = OffloadConfig()
    layout_check: LayoutConfig = LayoutConfig()
    bench: BenchConfig = BenchConfig()

    @model_validator(mode="after")
    def _version(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"schema_version must be {SCHEMA_VERSION}")
        return self


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Parse and validate a config file; relative paths resolve against its folder."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} does not exist")
    doc = yaml.safe_load(path.read_text()) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    cfg = ExperimentConfig(**doc)
    base = path.parent
    updates = {}
    if cfg.profile is not None:
        p = (base / cfg.profile).resolve()
        if not p.is_file():
            raise FileNotFoundError(f"profile {cfg.profile} referenced by {path} does not exist")
        updates["profile"] = str(p)
    model = cfg.offload_plan.model
    if model.endswith((".yaml", ".yml")):
        p = (base / model).resolve()
        if not p.is_file():
            raise FileNotFoundError(f"model file {model} referenced by {path} does not exist")
        updates["offload_plan"] = cfg.offload_plan.model_copy(update={"model": str(p)})
    return cfg.model_copy(update=updates) if updates else cfg
