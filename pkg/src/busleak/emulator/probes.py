"""Probe workloads for the offline phase.

Header probes issue crafted D / K / DAsync counts with progression payloads.
The two probe models together use every supported layer type with varied,
non-square hyper-parameters so argument offsets can be pinned down, and
have biased as well as unbiased Conv2D and Dense layers.
"""

from __future__ import annotations

import numpy as np

from ..model import DnnModel
from . import EmulationConfig, emulate, emulate_program
from .models import _Builder
from .platform import get_profile
from .program import probe_program

HEADER_PLANS = ((2, 1, 1), (7, 2, 1), (3, 6, 2), (5, 3, 6), (9, 5, 3), (4, 8, 7))


def header_probe_runs(platform: str = "A", seed: int = 0, cfg: EmulationConfig | None = None) -> list:
    """One emulated capture per plan; returns [(EmulationResult, issued counts)]."""
    base = cfg or EmulationConfig(platform_profile=platform)
    out = []
    for i, (n_d, n_k, n_async) in enumerate(HEADER_PLANS):
        run_cfg = EmulationConfig(**dict(base.to_json(), platform_profile=platform, rng_seed=seed * 101 + i))
        rng = np.random.default_rng(run_cfg.rng_seed)
        builder = probe_program(get_profile(platform), rng, n_d, n_k, n_async)
        res = emulate_program(builder, run_cfg, rng)
        out.append((res, {"D": n_d, "K": n_k, "DAsync": n_async}))
    return out


def probe_model_a(seed: int = 0) -> DnnModel:
    b = _Builder((13, 11, 3), np.random.default_rng(seed), "probe_a")
    x = b.add("Conv2D", "input", filters=6, kernel_size=(3, 2), strides=(1, 2), padding="valid",
              use_bias=True, activation="relu")
    x = b.add("ZeroPad", x, padding_hw=(1, 2))
    x = b.add("BatchNorm", x)
    x = b.add("MaxPool", x, pool_size=(2, 3), strides=(2, 1), padding="valid")
    y = b.add("Conv2D", x, filters=5, kernel_size=(2, 3), strides=(1, 1), padding="same", use_bias=False)
    z = b.add("Conv2D", x, filters=5, kernel_size=(1, 3), strides=(1, 1), padding="same", use_bias=True)
    x = b.add("Add", [y, z])
    x = b.add("Relu", x)
    x = b.add("AvgPool", x, pool_size=(3, 2), strides=(1, 2), padding="valid")
    x = b.add("Flatten", x)
    x = b.add("Dense", x, units=7, use_bias=True, activation="relu")
    x = b.add("BatchNorm", x)
    b.add("Dense", x, units=9, use_bias=False, activation="softmax")
    return b.model()


def probe_model_b(seed: int = 1) -> DnnModel:
    b = _Builder((17, 10, 2), np.random.default_rng(seed), "probe_b")
    x = b.add("Conv2D", "input", filters=11, kernel_size=(2, 1), strides=(2, 3), padding="same",
              use_bias=False)
    x = b.add("BatchNorm", x)
    x = b.add("Relu", x)
    x = b.add("ZeroPad", x, padding_hw=(3, 1))
    x = b.add("MaxPool", x, pool_size=(3, 1), strides=(1, 3), padding="same")
    y = b.add("Conv2D", x, filters=13, kernel_size=(3, 1), strides=(1, 1), padding="same", use_bias=True)
    z = b.add("Conv2D", x, filters=13, kernel_size=(1, 2), strides=(1, 1), padding="same", use_bias=True)
    x = b.add("Add", [y, z])
    x = b.add("AvgPool", x, pool_size=(4, 3), strides=(3, 1), padding="same")
    x = b.add("Flatten", x)
    x = b.add("Dense", x, units=12, use_bias=False)
    x = b.add("Relu", x)
    x = b.add("Dense", x, units=6, use_bias=True)
    b.add("Softmax", x)
    return b.model()


def probe_models() -> list:
    return [probe_model_a(), probe_model_b()]


def model_probe_runs(platform: str = "A", seed: int = 0, cfg: EmulationConfig | None = None) -> list:
    """Emulated captures of the probe models; returns [(EmulationResult, canonical model)]."""
    base = cfg or EmulationConfig(platform_profile=platform)
    out = []
    for i, m in enumerate(probe_models()):
        run_cfg = EmulationConfig(**dict(base.to_json(), platform_profile=platform, rng_seed=seed * 101 + 50 + i))
        res = emulate(m, run_cfg)
        out.append((res, res.canonical_model))
    return out
