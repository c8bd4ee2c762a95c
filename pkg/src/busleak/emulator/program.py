"""Turn a model (or a probe script) into the GPU command sequence a runtime would issue."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ..commands import CommandType
from ..model import DnnModel, Layer, canonicalize, infer_shapes
from .platform import (COPY_KERNEL, POINTER_PARAMS, PlatformProfile, kernel_blob, kernel_name,
                       launch_constants)

K_SLOT_BASE = 0x00100000
KERNEL_BASE = 0x01000000
HOUSE_BASE = 0x03000000
STAGING_BASE = 0x02000000
PARAM_BASE = 0x08000000
ACT_BASE = 0x40000000


class ProgramError(ValueError):
    pass


@dataclass
class Op:
    """One GPU command: a load (D / DAsync) or a kernel launch (K)."""

    ctype: CommandType
    gpu_addr: int
    data: bytes
    purpose: str
    kernel: str | None = None
    layer: str = ""
    layer_type: str = ""
    args: dict = field(default_factory=dict)

    @property
    def semantic_type(self) -> str:
        return "KD2D" if self.kernel == COPY_KERNEL else self.ctype.value


@dataclass
class LaunchRecord:
    """One entry of the kernel launch log (the profiler trace stand-in)."""

    seq: int
    kernel: str
    layer: str
    layer_type: str
    args: dict

    def to_json(self) -> dict:
        return {"seq": self.seq, "kernel": self.kernel, "layer": self.layer,
                "layer_type": self.layer_type,
                "args": {k: list(v) if isinstance(v, tuple) else v for k, v in self.args.items()}}

    @classmethod
    def from_json(cls, obj: dict) -> "LaunchRecord":
        args = {k: tuple(v) if isinstance(v, list) else v for k, v in obj["args"].items()}
        return cls(obj["seq"], obj["kernel"], obj["layer"], obj["layer_type"], args)


class Allocator:
    """Bump allocator with an optional free list (first fit on exact-or-larger size)."""

    def __init__(self, base: int, reuse: bool, align: int = 0x100):
        self.next = base
        self.reuse = reuse
        self.align = align
        self.free_list = []   # (capacity, address)
        self.capacity = {}

    def alloc(self, nbytes: int) -> int:
        nbytes = max(int(nbytes), 4)
        if self.reuse:
            fits = [(c, a) for c, a in self.free_list if c >= nbytes]
            if fits:
                best = min(fits)
                self.free_list.remove(best)
                return best[1]
        addr = self.next
        self.next += -(-nbytes // self.align) * self.align + self.align
        if self.next >= 2 ** 32:
            raise ProgramError("emulated GPU memory exhausted")
        self.capacity[addr] = nbytes
        return addr

    def free(self, addr: int) -> None:
        if self.reuse:
            self.free_list.append((self.capacity[addr], addr))


class ProgramBuilder:
    def __init__(self, profile: PlatformProfile, rng: np.random.Generator, reuse_addresses: bool = True):
        self.profile = profile
        self.rng = rng
        self.ops: list[Op] = []
        self.launches: list[LaunchRecord] = []
        self.kernel_addr: dict[str, int] = {}
        self.kernels = Allocator(KERNEL_BASE + 0x1000 * int(rng.integers(0, 64)), reuse=False, align=0x1000)
        self.house = Allocator(HOUSE_BASE, reuse=False)
        self.params = Allocator(PARAM_BASE + 0x100 * int(rng.integers(0, 4096)), reuse=False)
        self.acts = Allocator(ACT_BASE + 0x100 * int(rng.integers(0, 4096)), reuse=reuse_addresses)
        self.staging = STAGING_BASE + 0x100 * int(rng.integers(0, 256))
        self.n_launch = 0

    def load(self, addr: int, data: bytes, purpose: str, layer: str = "", asynchronous: bool = False) -> None:
        ctype = CommandType.DASYNC if asynchronous else CommandType.D
        self.ops.append(Op(ctype, addr, bytes(data), purpose, layer=layer))

    def housekeeping(self) -> None:
        n = int(self.rng.integers(4, 65)) * 4
        data = self.rng.integers(0, 2 ** 32, n // 4, dtype=np.uint32).astype("<u4").tobytes()
        self.load(self.house.alloc(n), data, "house")

    def ensure_kernel(self, name: str) -> int:
        if name not in self.kernel_addr:
            blob = kernel_blob(name, self.profile.label)
            addr = self.kernels.alloc(len(blob))
            self.load(addr, blob, "kernel")
            self.kernel_addr[name] = addr
        return self.kernel_addr[name]

    def encode_args(self, kernel: str, args: dict) -> bytes:
        prof = self.profile
        words = self.rng.integers(0, 2 ** 32, prof.k_data_dw, dtype=np.uint32)
        for o, v in launch_constants(kernel, prof.label):
            words[o] = v
        words[prof.kernel_ptr] = self.kernel_addr[kernel]
        words[prof.kernel_ptr + 1] = 0
        offsets = prof.arg_offsets(kernel)
        for name, value in args.items():
            if name not in offsets:
                raise ProgramError(f"kernel {kernel} has no argument slot {name!r}")
            slots = offsets[name]
            if name in POINTER_PARAMS:
                words[slots[0]] = value
                words[slots[0] + 1] = 0
            else:
                vals = tuple(value) if isinstance(value, (tuple, list)) else (value,)
                if len(vals) != len(slots):
                    raise ProgramError(f"{kernel}.{name}: {len(vals)} values for {len(slots)} slots")
                for o, v in zip(slots, vals):
                    words[o] = v
        return words.astype("<u4").tobytes()

    def launch(self, kernel: str, layer: str, layer_type: str, args: dict) -> None:
        self.ensure_kernel(kernel)
        data = self.encode_args(kernel, args)
        slot = K_SLOT_BASE + 0x400 * (self.n_launch % 1024)
        self.ops.append(Op(CommandType.K, slot, data, "launch", kernel, layer, layer_type, dict(args)))
        self.launches.append(LaunchRecord(self.n_launch, kernel, layer, layer_type,
                                          {k: v for k, v in args.items()}))
        self.n_launch += 1

    def copy(self, src: int, dst: int, nbytes: int) -> None:
        self.launch(COPY_KERNEL, "", "Copy", {"copy_dst": dst, "copy_src": src, "copy_bytes": nbytes})


def _blob_bytes(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _shape3(shape) -> tuple:
    return tuple(shape) if len(shape) == 3 else (1, 1, int(shape[0]))


def _nbytes(shape) -> int:
    return 4 * int(np.prod(shape))


def model_program(model: DnnModel, profile: PlatformProfile, rng: np.random.Generator, *,
                  reuse_addresses: bool = True, async_threshold_bytes: int = 1 << 20,
                  param_copy_prob: float = 0.85, act_copy_prob: float = 0.3,
                  housekeeping_prob: float = 0.15) -> ProgramBuilder:
    """Commands for loading ``model`` and running one inference on it."""
    cm = canonicalize(model)
    cm.validate()
    shapes = infer_shapes(cm)
    b = ProgramBuilder(profile, rng, reuse_addresses)
    for _ in range(2):
        b.housekeeping()

    # load phase: every blob goes host -> device, usually through a staging
    # buffer followed by a device-side copy to its final home
    where = {}
    for layer in cm.layers:
        for name, arr in layer.blobs.items():
            data = _blob_bytes(arr)
            copied = rng.random() < param_copy_prob
            if copied:
                src = b.staging if reuse_addresses else b.params.alloc(len(data))
                dst = b.params.alloc(len(data))
            else:
                src = dst = b.params.alloc(len(data))
            b.load(src, data, "param", layer.name, asynchronous=len(data) > async_threshold_bytes)
            if copied:
                b.copy(src, dst, len(data))
            where[(layer.name, name)] = dst

    consumers = {}
    for layer in cm.layers:
        for src in layer.inbound:
            consumers[src] = consumers.get(src, 0) + 1
    x = b.acts.alloc(_nbytes(cm.input_shape))
    image = rng.standard_normal(int(np.prod(cm.input_shape))).astype("<f4").tobytes()
    b.load(x, image, "input")
    out = {"input": x}

    for layer in cm.layers:
        if rng.random() < housekeeping_prob:
            b.housekeeping()
        ins = [out[s] for s in layer.inbound]
        in_shape = shapes[layer.inbound[0]]
        y_shape = shapes[layer.name]
        out[layer.name] = _emit_layer(b, layer, ins, in_shape, y_shape, where, rng, act_copy_prob)
        for s in layer.inbound:
            consumers[s] -= 1
            if consumers[s] == 0 and s != "input":
                b.acts.free(out[s])
    return b


def _emit_layer(b: ProgramBuilder, layer: Layer, ins, in_shape, y_shape, where, rng, act_copy_prob):
    t, p, name = layer.layer_type, layer.params, layer.name
    geo = {"in_shape": _shape3(in_shape), "out_hw": _shape3(y_shape)[:2]}
    y = b.acts.alloc(_nbytes(y_shape))
    if t == "Conv2D":
        tmp = b.acts.alloc(4 * len(layer.blobs["kernel"]))
        b.launch(kernel_name(1), name, t, {"weights_addr": where[(name, "kernel")], "out0": tmp})
        b.launch(kernel_name(2), name, t, {"in0": ins[0], "in1": tmp, "out0": y, "filters": p["filters"],
                                           "kernel_size": p["kernel_size"], "strides": p["strides"], **geo})
        b.acts.free(tmp)
        if p.get("use_bias", True):
            y2 = b.acts.alloc(_nbytes(y_shape))
            b.launch(kernel_name(17), name, t, {"in0": y, "bias_addr": where[(name, "bias")], "out0": y2})
            b.acts.free(y)
            y = y2
    elif t == "Dense":
        b.launch(kernel_name(7), name, t, {"in0": ins[0], "weights_addr": where[(name, "kernel")], "out0": y,
                                           "units": p["units"], **geo})
        if p.get("use_bias", True):
            y2 = b.acts.alloc(_nbytes(y_shape))
            b.launch(kernel_name(18), name, t, {"in0": y, "bias_addr": where[(name, "bias")], "out0": y2})
            b.acts.free(y)
            y = y2
    elif t == "BatchNorm":
        args = {"in0": ins[0], "out0": y, **geo}
        for i, blob in enumerate(("gamma", "beta", "moving_mean", "moving_variance"), 1):
            args[f"bn_weights{i}"] = where[(name, blob)]
        b.launch(kernel_name(6), name, t, args)
    elif t in ("MaxPool", "AvgPool"):
        no = 10 if t == "MaxPool" else 11
        b.launch(kernel_name(no), name, t, {"in0": ins[0], "out0": y, "pool_size": p["pool_size"],
                                            "strides": p["strides"], **geo})
    elif t == "ZeroPad":
        b.launch(kernel_name(12), name, t, {"in0": ins[0], "out0": y, "padding_hw": p["padding_hw"], **geo})
    elif t == "Flatten":
        b.launch(kernel_name(9), name, t, {"in0": ins[0], "out0": y, **geo})
    elif t == "Add":
        a, c = ins[0], ins[1]
        if rng.random() < act_copy_prob:
            # the shortcut operand is first duplicated on the device
            c2 = b.acts.alloc(_nbytes(in_shape))
            b.copy(c, c2, _nbytes(in_shape))
            c = c2
        b.launch(kernel_name(13), name, t, {"in0": a, "in1": c, "out0": y})
        if c not in ins:
            b.acts.free(c)
    elif t == "Relu":
        b.launch(kernel_name(14), name, t, {"in0": ins[0], "out0": y})
    elif t == "Softmax":
        b.launch(kernel_name(15), name, t, {"in0": ins[0], "out0": y})
    else:
        raise ProgramError(f"layer type {t} cannot be emulated")
    return y


def progression_payload(n_words: int, rng: np.random.Generator) -> bytes:
    """Crafted probe data: words 0xC0DE0000 + i from a random starting point."""
    start = int(rng.integers(0, 0x10000))
    w = (np.uint32(0xC0DE0000) | ((start + np.arange(n_words)) & 0xFFFF).astype(np.uint32))
    return w.astype("<u4").tobytes()


def probe_program(profile: PlatformProfile, rng: np.random.Generator, n_d: int, n_k: int, n_async: int,
                  words_per_load: int = 2048) -> ProgramBuilder:
    """Crafted header probe: ``n_d`` plain loads, ``n_k`` launches, ``n_async`` async loads.

    Background work (kernel-binary load, housekeeping) is identical in every
    probe run so only the crafted commands change between runs.
    """
    from .platform import PROBE_KERNEL
    b = ProgramBuilder(profile, rng, reuse_addresses=False)
    for _ in range(3):
        b.housekeeping()
    b.ensure_kernel(PROBE_KERNEL)
    buf = b.params.alloc(4 * words_per_load)
    plan = ["D"] * n_d + ["K"] * n_k + ["A"] * n_async
    rng.shuffle(plan)
    for kind in plan:
        if kind == "D":
            b.load(buf, progression_payload(words_per_load, rng), "probe")
        elif kind == "A":
            b.load(buf, progression_payload(words_per_load, rng), "probe", asynchronous=True)
        else:
            b.launch(PROBE_KERNEL, "", "Probe", {"in0": buf, "out0": buf})
    return b


def op_words(op: Op, profile: PlatformProfile) -> np.ndarray:
    """Logical DWs of a command (header followed by data field).

    DAsync commands return just their header; the data travels separately.
    """
    if op.ctype == CommandType.D:
        header = list(profile.d_header)
    elif op.ctype == CommandType.K:
        header = list(profile.k_header)
    else:
        header = list(profile.dasync_header)
    header[2] = op.gpu_addr
    header[4] = 0 if op.ctype == CommandType.DASYNC else len(op.data)
    h = np.asarray(header, dtype=np.uint32)
    if op.ctype == CommandType.DASYNC:
        return h
    if len(op.data) % 4:
        raise ProgramError("command data must be a whole number of DWs")
    return np.concatenate([h, np.frombuffer(op.data, dtype="<u4")])


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()

