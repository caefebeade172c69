"""Hardware profiles that drive every simulator.

Rates are per AI core (or per SM); device-level figures multiply by
``ai_cores``. Shipped profiles are fictional calibration constants, not
measurements.
"""

from __future__ import annotations

import math
from importlib import resources
from pathlib import Path

import yaml
from pydantic import BaseModel, ConfigDict, Field

PROFILE_SCHEMA_VERSION = 1


class HardwareModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    cube_rate: float = Field(gt=0, description="matrix FLOP/s per core")
    vector_rate: float = Field(gt=0, description="element-wise elements/s per core")
    sync_latency: float = Field(ge=0, description="seconds per Cube<->Vector handoff")
    gm_bw: float = Field(gt=0, description="global memory -> L1 bytes/s per core")
    l2_bw: float = Field(gt=0)
    l1_bw: float = Field(gt=0, description="L1 -> L0 bytes/s")
    l1_capacity: float = Field(gt=0, description="bytes")
    l0_capacity: float = Field(gt=0, description="bytes")
    dma_latency: float = Field(default=0.0, ge=0, description="fixed seconds per global memory transfer")
    interconnect_bw: float = Field(gt=0, description="bytes/s per device link")
    interconnect_latency: float = Field(ge=0, description="seconds per ring step")
    pcie_bw: float = Field(gt=0)
    pcie_latency: float = Field(default=0.0, ge=0, description="seconds per host transfer")
    cpu_rate: float = Field(gt=0, description="host attention FLOP/s available per device")
    sdma_channels: int = Field(default=1, ge=1)
    ai_cores: int = Field(default=1, ge=1)

    @property
    def device_flops(self) -> float:
        return self.cube_rate * self.ai_cores

    @property
    def device_mem_bw(self) -> float:
        return self.gm_bw * self.ai_cores

    def with_(self, **changes) -> "HardwareModel":
        """Copy with some fields replaced (validated)."""
        return HardwareModel(**{**self.model_dump(), **changes})


def transfer_time(nbytes: float, bandwidth: float, latency: float = 0.0) -> float:
    """``bytes / bandwidth + latency``; infinite bandwidth leaves only the latency."""
    if math.isinf(bandwidth):
        return latency
    return nbytes / bandwidth + latency


def _read_yaml(path) -> dict:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    return doc


def load_profile(path: str | Path) -> HardwareModel:
    """Load a profile file: ``schema_version``, ``name``, ``note`` and ``hardware``."""
    doc = _read_yaml(path)
    unknown = set(doc) - {"schema_version", "name", "note", "hardware"}
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    if doc.get("schema_version") != PROFILE_SCHEMA_VERSION:
        raise ValueError(f"{path}: schema_version must be {PROFILE_SCHEMA_VERSION}")
    return HardwareModel(**doc["hardware"])


def builtin_profile_path(name: str) -> Path:
    path = resources.files("tiledattn") / "data" / "profiles" / f"{name}.yaml"
    if not path.is_file():
        raise FileNotFoundError(f"no built-in profile named {name!r}")
    return Path(str(path))


def builtin_profile(name: str) -> HardwareModel:
    """``npu_default`` (Cube/Vector accelerator) or ``v100_like`` (GPU + host)."""
    return load_profile(builtin_profile_path(name))
