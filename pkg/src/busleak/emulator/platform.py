"""Emulated GPU platforms: command encodings, kernel argument layouts and kernels.

Two profiles ship.  They differ in header constants, internal-noise rule,
K-command data-field size and the DW offsets of every kernel argument, so
nothing learned on one platform can be reused on the other.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..commands import CommandHeaderSignature, CommandType, InternalNoisePattern

# name, layer type the kernel belongs to ("Copy" for the device copy kernel,
# "Other" for helpers that belong to no layer)
KERNELS = {
    1: ("ShuffleInTensor3Simple", "Conv2D"),
    2: ("cudnn::detail::implicit_convolve_sgemm", "Conv2D"),
    3: ("SwapDimension0And2InTensor3Simple", "Conv2D"),
    4: ("cudnn::winograd::generateWinogradTilesKernel", "Conv2D"),
    5: ("cudnn::winograd::winograd3x3Kernel", "Conv2D"),
    6: ("cudnn::detail::bn_fw_inf_1C11_kernel_new", "BatchNorm"),
    7: ("gemv2N_kernel_val", "Dense"),
    8: ("gemvNSP_kernel_val", "Dense"),
    9: ("BlockReduceKernel", "Flatten"),
    10: ("cudnn::detail::pooling_fw_4d_kernel", "MaxPool"),
    11: ("Eigen::internal::AvgPoolMeanReducer", "AvgPool"),
    12: ("PadInputCustomKernelNHWC", "ZeroPad"),
    13: ("Eigen::internal::scalar_sum_op", "Add"),
    14: ("Eigen::internal::scalar_max_op", "Relu"),
    15: ("softmax_op_gpu_cu_compute_70", "Softmax"),
    16: ("SwapDimension1And2InTensor3UsingTiles", "Other"),
    17: ("BiasNCHWKernel", "Other"),
    18: ("BiasNHWCKernel", "Other"),
}
COPY_KERNEL = "CopyDeviceToDevice"
PROBE_KERNEL = "ProbeTouchKernel"
KERNEL_NAMES = [n for n, _ in KERNELS.values()] + [COPY_KERNEL, PROBE_KERNEL]


def kernel_name(no: int) -> str:
    return KERNELS[no][0]


@dataclass(frozen=True)
class PlatformProfile:
    label: str
    d_header: tuple
    k_header: tuple
    dasync_header: tuple
    chatter_headers: tuple
    noise: InternalNoisePattern
    k_data_dw: int
    kernel_ptr: int
    # generic argument layout shared by all kernels
    abi: dict
    # kernel number -> {param name: offsets}
    hyper: dict

    def signatures(self) -> list:
        def sig(words, t):
            w = list(words)
            w[2] = None
            w[4] = None
            return CommandHeaderSignature(tuple(w), t, self.label)
        return [sig(self.d_header, CommandType.D), sig(self.k_header, CommandType.K),
                sig(self.dasync_header, CommandType.DASYNC)]

    def arg_offsets(self, kernel: str) -> dict:
        """Every argument slot of a kernel: generic slots plus its hyper-parameters."""
        out = dict(self.abi)
        for no, (name, _) in KERNELS.items():
            if name == kernel:
                out.update(self.hyper.get(no, {}))
        return out


_PROFILE_A = PlatformProfile(
    label="A",
    d_header=(0x20048001, 0x00000000, 0, 0x0000A0B5, 0, 0x2001C0B5, 0x00010000, 0x0E0A1000, 0x6D204840),
    k_header=(0x20048001, 0x00000000, 0, 0x0000A0C0, 0, 0x2001C0C0, 0x00010000, 0x0E0A2000, 0x6D204860),
    dasync_header=(0x20048001, 0x00000000, 0, 0x0000A0D7, 0, 0x2001C0D7, 0x00020000, 0x0E0A3000, 0x6D204870),
    chatter_headers=(
        (0x20048001, 0x00000000, 0, 0x0000A0E1, 0, 0x2001C0E1, 0x00000000, 0x0E0A4000, 0x6D2048F0),
        (0x20048001, 0x00000000, 0, 0x0000A0E2, 0, 0x2001C0E2, 0x00000000, 0x0E0A5000, 0x6D2048F8),
    ),
    noise=InternalNoisePattern(5, 0xFFFF0000, 0x5EED0000),
    k_data_dw=192,
    kernel_ptr=4,
    abi={"in0": (40,), "in1": (42,), "out0": (44,), "in_shape": (52, 53, 54), "out_hw": (56, 57),
         "copy_dst": (60,), "copy_src": (62,), "copy_bytes": (64,)},
    hyper={
        1: {"weights_addr": (83,)},
        2: {"filters": (101,), "kernel_size": (102, 103), "strides": (126, 127)},
        6: {"bn_weights1": (159,), "bn_weights2": (161,), "bn_weights3": (163,), "bn_weights4": (165,)},
        7: {"units": (101,), "weights_addr": (81,)},
        10: {"pool_size": (152, 153), "strides": (136, 137)},
        11: {"pool_size": (110, 111), "strides": (114, 115)},
        12: {"padding_hw": (117, 118)},
        17: {"bias_addr": (85,)},
        18: {"bias_addr": (85,)},
    },
)

_PROFILE_B = PlatformProfile(
    label="B",
    d_header=(0x2004A001, 0x00000000, 0, 0x0000C3B5, 0, 0x2001E4B5, 0x00010000, 0x0F0B1000, 0x7E315940),
    k_header=(0x2004A001, 0x00000000, 0, 0x0000C3C0, 0, 0x2001E4C0, 0x00010000, 0x0F0B2000, 0x7E315960),
    dasync_header=(0x2004A001, 0x00000000, 0, 0x0000C3D7, 0, 0x2001E4D7, 0x00020000, 0x0F0B3000, 0x7E315970),
    chatter_headers=(
        (0x2004A001, 0x00000000, 0, 0x0000C3E1, 0, 0x2001E4E1, 0x00000000, 0x0F0B4000, 0x7E3159F0),
        (0x2004A001, 0x00000000, 0, 0x0000C3E2, 0, 0x2001E4E2, 0x00000000, 0x0F0B5000, 0x7E3159F8),
    ),
    noise=InternalNoisePattern(7, 0xFFF00000, 0xA5B00000),
    k_data_dw=180,
    kernel_ptr=6,
    abi={"in0": (36,), "in1": (38,), "out0": (40,), "in_shape": (44, 45, 46), "out_hw": (48, 49),
         "copy_dst": (55,), "copy_src": (57,), "copy_bytes": (59,)},
    hyper={
        1: {"weights_addr": (80,)},
        2: {"filters": (95,), "kernel_size": (96, 97), "strides": (120, 121)},
        6: {"bn_weights1": (156,), "bn_weights2": (158,), "bn_weights3": (160,), "bn_weights4": (162,)},
        7: {"units": (98,), "weights_addr": (78,)},
        10: {"pool_size": (146, 147), "strides": (130, 131)},
        11: {"pool_size": (107, 108), "strides": (111, 112)},
        12: {"padding_hw": (114, 115)},
        17: {"bias_addr": (82,)},
        18: {"bias_addr": (82,)},
    },
)

PROFILES = {"A": _PROFILE_A, "B": _PROFILE_B}
POINTER_PARAMS = ("in0", "in1", "out0", "weights_addr", "bias_addr", "bn_weights1", "bn_weights2",
                  "bn_weights3", "bn_weights4", "copy_dst", "copy_src")


def get_profile(label: str) -> PlatformProfile:
    try:
        return PROFILES[label]
    except KeyError:
        raise ValueError(f"unknown platform profile {label!r} (choose from {sorted(PROFILES)})") from None


def _seed_of(*parts) -> int:
    return int.from_bytes(hashlib.sha256("/".join(map(str, parts)).encode()).digest()[:8], "little")


@lru_cache(maxsize=None)
def kernel_blob(name: str, platform: str) -> bytes:
    """Opaque, deterministic stand-in for a kernel binary (1-16 KiB)."""
    rng = np.random.default_rng(_seed_of("kernel", name, platform))
    n_words = int(rng.integers(256, 4097))
    return rng.integers(0, 2 ** 32, n_words, dtype=np.uint32).astype("<u4").tobytes()


@lru_cache(maxsize=None)
def launch_constants(name: str, platform: str) -> tuple:
    """Fixed (offset, value) pairs every launch of a kernel carries (grid/block sizes).

    They are small numbers, so they can collide with planted hyper-parameter
    values; profiling must tell them apart.  Only offsets divisible by five are
    used so any nine consecutive words still contain per-launch random words.
    """
    prof = get_profile(platform)
    taken = set()
    for offs in prof.arg_offsets(name).values():
        for o in offs:
            taken.update((o, o + 1))
    taken.add(prof.kernel_ptr)
    taken.add(prof.kernel_ptr + 1)
    rng = np.random.default_rng(_seed_of("consts", name, platform))
    slots = [o for o in range(10, prof.k_data_dw, 5) if o not in taken]
    chosen = rng.choice(slots, size=min(8, len(slots)), replace=False)
    values = rng.choice([1, 2, 3, 4, 8, 16, 32, 64, 128, 256], size=len(chosen))
    return tuple(sorted((int(o), int(v)) for o, v in zip(chosen, values)))
