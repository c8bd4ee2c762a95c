"""Victim-side traffic emulator.

``emulate(model, cfg)`` plays the part of a GPU inference run: it derives the
command sequence a runtime would issue for ``model``, lays the commands out
in host memory and renders the PCIe read traffic the GPU generates while
fetching them.  Alongside the trace it returns a kernel launch log (the
profiler-trace stand-in used only by offline profiling) and a ground-truth
manifest of every emitted command.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..commands import CommandType
from ..model import DnnModel, canonicalize, model_to_bytes
from .packets import ConfigError, PacketStats, packetize
from .platform import PROFILES, get_profile
from .program import LaunchRecord, Op, ProgramBuilder, model_program, sha256

__all__ = ["EmulationConfig", "EmulationResult", "ConfigError", "emulate", "emulate_program",
           "save_launch_log", "load_launch_log"]


@dataclass
class EmulationConfig:
    platform_profile: str = "A"
    noise_ratio: float = 0.985
    ooo_degree: int = 16
    header_split_prob: float = 0.1
    address_fragmentation_prob: float = 0.2
    async_threshold_bytes: int = 1 << 20
    reuse_addresses: bool = True
    internal_noise: bool = True
    rng_seed: int = 0
    # finer knobs
    param_copy_prob: float = 0.85
    act_copy_prob: float = 0.3
    housekeeping_prob: float = 0.15
    intra_noise_prob: float = 0.05
    near_noise_prob: float = 0.3
    completion_split_prob: float = 0.5
    filtered_traffic_ratio: float = 0.02
    chatter_commands: int = 48

    def __post_init__(self):
        if self.platform_profile not in PROFILES:
            raise ConfigError(f"unknown platform profile {self.platform_profile!r}")
        for f in fields(self):
            if f.name.endswith("_prob") and not 0 <= getattr(self, f.name) <= 1:
                raise ConfigError(f"{f.name} must lie in [0, 1]")

    @classmethod
    def quiet(cls, **kw) -> "EmulationConfig":
        """All hazards off: no noise, no reordering, no splits or gaps."""
        base = dict(noise_ratio=0.0, ooo_degree=0, header_split_prob=0.0, address_fragmentation_prob=0.0,
                    internal_noise=False, intra_noise_prob=0.0, near_noise_prob=0.0,
                    completion_split_prob=0.0, filtered_traffic_ratio=0.0, chatter_commands=0)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "EmulationConfig":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EmulationResult:
    trace: object
    launch_log: list
    manifest: dict
    ops: list
    stats: PacketStats
    canonical_model: DnnModel | None = None

    def scan_view(self) -> list:
        """Manifest commands as the scanner sees them: (type, gpu_addr, size, sha256)."""
        return [(c["type"], c["gpu_addr"], c["size"], c["sha256"]) for c in self.manifest["commands"]]


def _manifest(ops: list, launches: list, cfg: EmulationConfig, stats: PacketStats,
              model: DnnModel | None) -> dict:
    cmds = []
    for i, op in enumerate(ops):
        rec = {"index": i, "type": op.ctype.value, "semantic": op.semantic_type,
               "gpu_addr": op.gpu_addr,
               "size": None if op.ctype == CommandType.DASYNC else len(op.data),
               "sha256": sha256(b"" if op.ctype == CommandType.DASYNC else op.data),
               "purpose": op.purpose, "layer": op.layer}
        if op.ctype == CommandType.DASYNC:
            rec["async_bytes"] = len(op.data)
            rec["async_sha256"] = sha256(op.data)
        if op.kernel:
            rec["kernel"] = op.kernel
        cmds.append(rec)
    kernel_hash = {}
    for op in ops:
        if op.purpose == "kernel":
            kernel_hash[op.gpu_addr] = sha256(op.data)
    out = {
        "format": "busleak-manifest 1",
        "config": cfg.to_json(),
        "commands": cmds,
        "counts": {t: sum(1 for op in ops if op.semantic_type == t) for t in ("D", "K", "KD2D", "DAsync")},
        "launches": [dict(r.to_json(), kernel_sha256=sha256(_blob_of(r.kernel, cfg))) for r in launches],
        "packets": {"useful": stats.useful_packets, "data": stats.data_packets, "tlps": stats.tlps,
                    "useful_fraction": stats.useful_fraction},
    }
    if model is not None:
        out["params"] = {l.name: {k: sha256(v.astype("<f4").tobytes()) for k, v in l.blobs.items()}
                         for l in model.layers}
        out["model_sha256"] = sha256(model_to_bytes(model))
        out["param_count"] = model.param_count()
    return out


def _blob_of(kernel: str, cfg: EmulationConfig) -> bytes:
    from .platform import kernel_blob
    return kernel_blob(kernel, cfg.platform_profile)


def emulate_program(builder: ProgramBuilder, cfg: EmulationConfig, rng: np.random.Generator,
                    model: DnnModel | None = None) -> EmulationResult:
    profile = get_profile(cfg.platform_profile)
    trace, stats = packetize(builder.ops, profile, cfg, rng)
    trace.label = f"emulated platform {cfg.platform_profile} seed {cfg.rng_seed}"
    manifest = _manifest(builder.ops, builder.launches, cfg, stats, model)
    return EmulationResult(trace, builder.launches, manifest, builder.ops, stats, model)


def emulate(model: DnnModel, cfg: EmulationConfig | None = None) -> EmulationResult:
    """Emulate one inference of ``model``; deterministic for a given config."""
    cfg = cfg or EmulationConfig()
    rng = np.random.default_rng(cfg.rng_seed)
    profile = get_profile(cfg.platform_profile)
    builder = model_program(model, profile, rng, reuse_addresses=cfg.reuse_addresses,
                            async_threshold_bytes=cfg.async_threshold_bytes,
                            param_copy_prob=cfg.param_copy_prob, act_copy_prob=cfg.act_copy_prob,
                            housekeeping_prob=cfg.housekeeping_prob)
    return emulate_program(builder, cfg, rng, canonicalize(model))


def save_launch_log(records: list, path: str | Path) -> None:
    Path(path).write_text("".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records))


def load_launch_log(path: str | Path) -> list:
    return [LaunchRecord.from_json(json.loads(line))
            for line in Path(path).read_text().splitlines() if line.strip()]


def save_manifest(manifest: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
