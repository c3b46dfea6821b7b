"""Accelerator configurations and named presets."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

# pJ per element moved or per MAC; order-of-magnitude placeholders, only
# ratios between configurations are meaningful
DEFAULT_ENERGY = {
    "mac": 1.0,
    "reg": 0.1,
    "sram_read": 5.0,
    "sram_write": 5.0,
    "dram_read": 100.0,
    "dram_write": 100.0,
    "noc_hop": 0.5,
}

FLAG_NAMES = (
    "transposable_ce",
    "flexible_distribution",
    "flexible_reduction",
    "flexible_parallelism",
)
ALL_MODES = frozenset({"WS", "IS", "OS"})


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HardwareConfig:
    name: str = "custom"
    num_ces: int = 16
    ce_rows: int = 4
    ce_cols: int = 4
    frequency_hz: float = 1e9
    unified_mem_bytes: int = 512 * 1024
    mem_banks: int = 16
    bank_row_elems: int = 4
    accum_mem_bytes: int = 128 * 1024
    dram_bw_bytes_per_s: float = 25.6e9
    elem_bytes: int = 2
    # accumulation-unit word size (fp32 partial sums)
    psum_bytes: int = 4
    energy_table: dict = field(default_factory=lambda: dict(DEFAULT_ENERGY), hash=False, compare=False)
    transposable_ce: bool = True
    flexible_distribution: bool = True
    flexible_reduction: bool = True
    flexible_parallelism: bool = True
    dataflow_modes: frozenset = ALL_MODES

    def __post_init__(self):
        object.__setattr__(self, "dataflow_modes", frozenset(m.upper() for m in self.dataflow_modes))
        if not self.dataflow_modes or not self.dataflow_modes <= ALL_MODES:
            raise ConfigError(f"dataflow_modes must be a non-empty subset of {sorted(ALL_MODES)}")
        for name in (
            "num_ces",
            "ce_rows",
            "ce_cols",
            "mem_banks",
            "bank_row_elems",
            "elem_bytes",
            "psum_bytes",
            "unified_mem_bytes",
            "accum_mem_bytes",
            "frequency_hz",
            "dram_bw_bytes_per_s",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.num_ces & (self.num_ces - 1):
            raise ConfigError("num_ces must be a power of two (butterfly fabric ports)")
        if self.bank_row_elems != self.ce_rows:
            raise ConfigError("bank_row_elems must match ce_rows")
        missing = set(DEFAULT_ENERGY) - set(self.energy_table)
        if missing:
            raise ConfigError(f"energy_table lacks {sorted(missing)}")

    @property
    def total_macs(self) -> int:
        return self.num_ces * self.ce_rows * self.ce_cols

    @property
    def fetch_elems_per_cycle(self) -> int:
        return self.mem_banks * self.bank_row_elems

    @property
    def dram_bytes_per_cycle(self) -> float:
        return self.dram_bw_bytes_per_s / self.frequency_hz

    @property
    def absorbs_layouts(self) -> bool:
        return self.transposable_ce and self.flexible_distribution and self.flexible_reduction

    def key(self) -> tuple:
        """Hashable identity including the energy table."""
        vals = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, dict):
                v = tuple(sorted(v.items()))
            elif isinstance(v, frozenset):
                v = tuple(sorted(v))
            vals.append(v)
        return tuple(vals)

    def with_flags(self, **flags) -> HardwareConfig:
        return dataclasses.replace(self, **flags)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["dataflow_modes"] = sorted(self.dataflow_modes)
        d["energy_table"] = dict(sorted(self.energy_table.items()))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> HardwareConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known - {"comment"}
        if unknown:
            raise ConfigError(f"unknown hardware fields {sorted(unknown)}")
        kwargs = {k: v for k, v in d.items() if k in known}
        if "energy_table" in kwargs:
            kwargs["energy_table"] = {**DEFAULT_ENERGY, **kwargs["energy_table"]}
        if "dataflow_modes" in kwargs:
            kwargs["dataflow_modes"] = frozenset(kwargs["dataflow_modes"])
        return cls(**kwargs)


def _preset(name: str, **kw) -> HardwareConfig:
    return HardwareConfig(name=name, **kw)


PRESETS = {
    "fetta": _preset("fetta"),
    "tpu-like": _preset(
        "tpu-like",
        num_ces=1,
        ce_rows=16,
        ce_cols=16,
        mem_banks=4,
        bank_row_elems=16,
        transposable_ce=False,
        flexible_distribution=False,
        flexible_reduction=False,
        flexible_parallelism=False,
        dataflow_modes=frozenset({"WS"}),
    ),
    "treta-like": _preset(
        "treta-like",
        transposable_ce=False,
        flexible_distribution=False,
        flexible_reduction=False,
        flexible_parallelism=True,
        dataflow_modes=frozenset({"WS", "OS"}),
    ),
    "sigma-like": _preset(
        "sigma-like",
        transposable_ce=False,
        flexible_distribution=True,
        flexible_reduction=True,
        flexible_parallelism=True,
        dataflow_modes=frozenset({"WS", "IS"}),
    ),
}


def preset_dir() -> Path:
    env = os.environ.get("TNN_ACCEL_PRESET_DIR")
    if env:
        return Path(env)
    return Path(__file__).parent / "presets"


def load_hardware(name_or_path: str) -> HardwareConfig:
    """Load a preset by name, a JSON file path, or a preset file in the preset dir."""
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        return HardwareConfig.from_dict(json.loads(path.read_text()))
    candidate = preset_dir() / "hardware" / f"{name_or_path}.json"
    if candidate.exists():
        return HardwareConfig.from_dict(json.loads(candidate.read_text()))
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]
    raise ConfigError(f"unknown hardware {name_or_path!r}")
