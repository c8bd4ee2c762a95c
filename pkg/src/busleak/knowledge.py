"""Offline-phase knowledge: what the attacker learns on a GPU it controls.

The knowledge database holds the command header signatures, the internal
noise rule, the DW offset of the kernel pointer inside K commands, a map from
kernel binary hash to layer type, and the DW offsets of every kernel argument
that matters (hyper-parameters, parameter pointers, input/output pointers).

DB file (JSON, sorted keys)::

    {"format": "busleak-kdb 1", "platform_label": "...",
     "signatures": [{"command_type", "platform_label", "words": [hex | null] * 9}],
     "internal_noise": {"position", "mask", "value"} | null,
     "kernel_ptr_offset": int,
     "kernels": [{"kernel_hash", "layer_type", "is_primary", "role", "name_hint"}],
     "offsets": [{"kernel_hash", "param_name", "dw_offsets": [int, ...]}]}
"""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .commands import CommandHeaderSignature, CommandType, GpuCommand, InternalNoisePattern
from .model import DnnModel, infer_shapes

DB_FORMAT = "busleak-kdb 1"
LAYER_TYPES = ("Conv2D", "BatchNorm", "Dense", "Flatten", "MaxPool", "AvgPool", "ZeroPad", "Add",
               "Relu", "Softmax", "Other")
ROLES = ("layer", "attr", "copy")
PARAM_NAMES = ("kernel_size", "strides", "filters", "pool_size", "padding", "padding_hw", "units",
               "weights_addr", "bias_addr", "bn_weights1", "bn_weights2", "bn_weights3", "bn_weights4",
               "in0", "in1", "out0", "in_shape", "out_hw", "copy_src", "copy_dst", "copy_bytes")
PAIRED = {"kernel_size": 2, "strides": 2, "pool_size": 2, "padding_hw": 2, "out_hw": 2, "in_shape": 3}
# hyper-parameters each layer type must expose somewhere in its kernels
REQUIRED = {
    "Conv2D": ("kernel_size", "strides", "filters", "weights_addr", "in_shape", "out_hw", "in0", "out0"),
    "Dense": ("units", "weights_addr", "in_shape", "in0", "out0"),
    "BatchNorm": ("bn_weights1", "bn_weights2", "bn_weights3", "bn_weights4", "in_shape", "in0", "out0"),
    "MaxPool": ("pool_size", "strides", "in_shape", "out_hw", "in0", "out0"),
    "AvgPool": ("pool_size", "strides", "in_shape", "out_hw", "in0", "out0"),
    "ZeroPad": ("padding_hw", "in0", "out0"),
    "Flatten": ("in0", "out0"),
    "Add": ("in0", "in1", "out0"),
    "Relu": ("in0", "out0"),
    "Softmax": ("in0", "out0"),
}
COPY_PARAMS = ("copy_src", "copy_dst", "copy_bytes")


class KnowledgeError(ValueError):
    pass


class AlignmentError(KnowledgeError):
    pass


class UnresolvedKernelError(KnowledgeError):
    pass


@dataclass(frozen=True)
class KernelRecord:
    kernel_hash: str
    layer_type: str
    is_primary: bool = False
    role: str = "layer"
    name_hint: str = ""

    def __post_init__(self):
        if self.layer_type not in LAYER_TYPES:
            raise KnowledgeError(f"unknown layer type {self.layer_type!r}")
        if self.role not in ROLES:
            raise KnowledgeError(f"unknown kernel role {self.role!r}")


@dataclass(frozen=True)
class HyperParamOffset:
    kernel_hash: str
    param_name: str
    dw_offsets: tuple

    def __post_init__(self):
        object.__setattr__(self, "dw_offsets", tuple(int(o) for o in self.dw_offsets))
        if self.param_name not in PARAM_NAMES:
            raise KnowledgeError(f"unknown parameter name {self.param_name!r}")
        want = PAIRED.get(self.param_name, 1)
        if len(self.dw_offsets) != want:
            raise KnowledgeError(f"{self.param_name} needs {want} offset(s), got {self.dw_offsets}")
        if any(o < 0 for o in self.dw_offsets):
            raise KnowledgeError("negative DW offset")


@dataclass
class KnowledgeDb:
    platform_label: str = ""
    signatures: list = field(default_factory=list)
    kernels: list = field(default_factory=list)
    offsets: list = field(default_factory=list)
    internal_noise: InternalNoisePattern | None = None
    kernel_ptr_offset: int | None = None

    def __post_init__(self):
        self.check()
        self._kernels = {k.kernel_hash: k for k in self.kernels}
        self._offsets = defaultdict(list)
        for o in self.offsets:
            self._offsets[o.kernel_hash].append(o)

    def check(self) -> None:
        hashes = [k.kernel_hash for k in self.kernels]
        if len(set(hashes)) != len(hashes):
            raise KnowledgeError("kernel hash listed twice")
        known = set(hashes)
        for o in self.offsets:
            if o.kernel_hash not in known:
                raise KnowledgeError(f"offset entry {o.param_name} references unknown kernel {o.kernel_hash[:16]}")
        for s in self.signatures:
            if self.platform_label and s.platform_label and s.platform_label != self.platform_label:
                raise KnowledgeError("signature platform label differs from the database label")

    def kernel(self, kernel_hash: str) -> KernelRecord | None:
        return self._kernels.get(kernel_hash)

    def offsets_for(self, kernel_hash: str) -> dict:
        """param name -> list of offset tuples (DB order) for one kernel."""
        out = defaultdict(list)
        for o in self._offsets.get(kernel_hash, []):
            out[o.param_name].append(o.dw_offsets)
        return out

    def copy_kernels(self) -> set:
        return {k.kernel_hash for k in self.kernels if k.role == "copy"}

    def to_json(self) -> dict:
        return {
            "format": DB_FORMAT,
            "platform_label": self.platform_label,
            "signatures": [s.to_json() for s in self.signatures],
            "internal_noise": self.internal_noise.to_json() if self.internal_noise else None,
            "kernel_ptr_offset": self.kernel_ptr_offset,
            "kernels": [{"kernel_hash": k.kernel_hash, "layer_type": k.layer_type, "is_primary": k.is_primary,
                         "role": k.role, "name_hint": k.name_hint} for k in self.kernels],
            "offsets": [{"kernel_hash": o.kernel_hash, "param_name": o.param_name,
                         "dw_offsets": list(o.dw_offsets)} for o in self.offsets],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "KnowledgeDb":
        if obj.get("format") != DB_FORMAT:
            raise KnowledgeError(f"not a knowledge database (format {obj.get('format')!r})")
        try:
            return cls(
                platform_label=obj.get("platform_label", ""),
                signatures=[CommandHeaderSignature.from_json(s) for s in obj.get("signatures", [])],
                kernels=[KernelRecord(**k) for k in obj.get("kernels", [])],
                offsets=[HyperParamOffset(o["kernel_hash"], o["param_name"], tuple(o["dw_offsets"]))
                         for o in obj.get("offsets", [])],
                internal_noise=(InternalNoisePattern.from_json(obj["internal_noise"])
                                if obj.get("internal_noise") else None),
                kernel_ptr_offset=obj.get("kernel_ptr_offset"),
            )
        except (KeyError, TypeError) as exc:
            raise KnowledgeError(f"malformed knowledge database: {exc}") from None


def save_db(db: KnowledgeDb, path: str | Path) -> None:
    db.check()
    Path(path).write_text(json.dumps(db.to_json(), sort_keys=True, indent=1) + "\n")


def load_db(path: str | Path) -> KnowledgeDb:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise KnowledgeError(f"knowledge database is not valid JSON: {exc}") from None
    return KnowledgeDb.from_json(obj)


# -- kernel binaries ------------------------------------------------------

def blob_hash(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def profile_kernel_pointer(commands: Sequence[GpuCommand]) -> int:
    """The one DW offset at which every K command points at an earlier D load."""
    written = set()
    candidates = None
    for cmd in commands:
        if cmd.command_type in (CommandType.D, CommandType.DASYNC):
            written.add(cmd.gpu_address)
        elif cmd.command_type in (CommandType.K, CommandType.KD2D):
            w = cmd.words
            hits = {i for i, v in enumerate(w.tolist()) if v in written}
            candidates = hits if candidates is None else candidates & hits
    if not candidates or len(candidates) != 1:
        raise KnowledgeError(f"kernel pointer offset not unique: candidates {sorted(candidates or [])}")
    return candidates.pop()


def extract_kernel_binaries(commands: Sequence[GpuCommand], kernel_ptr_offset: int) -> list:
    """Resolve each K command's kernel pointer to the D command that loaded it.

    Sets ``kernel_hash`` on every K command and returns the distinct
    ``(hash, blob)`` pairs in first-launch order.
    """
    last_load = {}
    blobs = {}
    for cmd in commands:
        if cmd.command_type == CommandType.D:
            last_load[cmd.gpu_address] = cmd
        elif cmd.command_type in (CommandType.K, CommandType.KD2D):
            w = cmd.words
            if kernel_ptr_offset >= len(w):
                raise UnresolvedKernelError(f"K command at {cmd.gpu_address:#x} has no word {kernel_ptr_offset}")
            addr = int(w[kernel_ptr_offset])
            src = last_load.get(addr)
            if src is None:
                raise UnresolvedKernelError(f"kernel pointer {addr:#010x} matches no earlier D command")
            h = blob_hash(src.data)
            cmd.kernel_hash = h
            blobs.setdefault(h, src.data)
    return list(blobs.items())


# -- kernel -> layer map ----------------------------------------------------

def _instances(kernel_sequence, kernel_trace):
    """Group aligned launches into per-layer instances keyed by (run, layer)."""
    if len(kernel_sequence) != len(kernel_trace):
        raise AlignmentError(f"{len(kernel_sequence)} K commands but {len(kernel_trace)} launch records")
    run = -1
    groups = {}
    order = []
    for h, rec in zip(kernel_sequence, kernel_trace):
        if rec.seq == 0:
            run += 1
        if rec.layer_type in ("Copy", "Probe") or not rec.layer:
            continue
        key = (run, rec.layer)
        if key not in groups:
            groups[key] = (rec.layer_type, [])
            order.append(key)
        groups[key][1].append((h, rec))
    return [(k, groups[k][0], groups[k][1]) for k in order]


def profile_kernel_layer_map(kernel_sequence: Sequence[str], kernel_trace: Sequence) -> list:
    """Positional alignment of launched kernel hashes with the launch log.

    A kernel launched by every instance of one layer type belongs to it
    (the first kernel of an instance is the primary one); a kernel seen in
    only some instances is an attribute kernel (for example the bias add).
    """
    kinds = defaultdict(set)
    names = {}
    copies = set()
    if len(kernel_sequence) != len(kernel_trace):
        raise AlignmentError(f"{len(kernel_sequence)} K commands but {len(kernel_trace)} launch records")
    for h, rec in zip(kernel_sequence, kernel_trace):
        names.setdefault(h, rec.kernel)
        if rec.layer_type == "Copy":
            copies.add(h)
        elif rec.layer_type != "Probe":
            kinds[h].add(rec.layer_type)
    for h, ts in kinds.items():
        if len(ts) > 1 or h in copies:
            raise KnowledgeError(f"kernel {names[h]} ({h[:12]}) serves several layer types: {sorted(ts)}")

    inst = _instances(kernel_sequence, kernel_trace)
    per_type = defaultdict(list)
    for _, t, launches in inst:
        per_type[t].append([h for h, _ in launches])
    records = []
    for h in names:
        if h in copies:
            records.append(KernelRecord(h, "Other", False, "copy", names[h]))
            continue
        if h not in kinds:
            continue
        t = next(iter(kinds[h]))
        seqs = per_type[t]
        present = [h in s for s in seqs]
        first = [s[0] == h for s in seqs if h in s]
        if all(present):
            if any(first) and not all(first):
                raise KnowledgeError(f"kernel {names[h]} is first in only some {t} layers")
            records.append(KernelRecord(h, t, all(first), "layer", names[h]))
        else:
            if any(first):
                raise KnowledgeError(f"optional kernel {names[h]} starts a {t} layer")
            records.append(KernelRecord(h, "Other", False, "attr", names[h]))
    for t, seqs in per_type.items():
        if not any(r.is_primary and r.layer_type == t for r in records):
            raise KnowledgeError(f"no primary kernel identified for {t}")
    return records


# -- argument offsets -------------------------------------------------------

def expected_layer_values(model: DnnModel) -> dict:
    """Per layer name: hyper-parameter and geometry values a kernel may carry."""
    shapes = infer_shapes(model)
    out = {}
    for l in model.layers:
        src = shapes[l.inbound[0]] if l.inbound else model.input_shape
        s3 = tuple(src) if len(src) == 3 else (1, 1, src[0])
        o = shapes[l.name]
        o3 = tuple(o) if len(o) == 3 else (1, 1, o[0])
        vals = {"in_shape": s3, "out_hw": o3[:2]}
        for k in ("kernel_size", "strides", "filters", "pool_size", "padding_hw", "units"):
            if k in l.params and l.params[k] is not None:
                vals[k] = l.params[k]
        out[l.name] = vals
    return out


def _candidates(words_list, values_list) -> list:
    """Per component: offsets holding the expected value in every instance."""
    n_comp = len(values_list[0])
    cands = [None] * n_comp
    for words, values in zip(words_list, values_list):
        for c, v in enumerate(values):
            hits = set(np.flatnonzero(words == np.uint32(int(v) & 0xFFFFFFFF)).tolist())
            cands[c] = hits if cands[c] is None else cands[c] & hits
    return cands


@dataclass
class OffsetEvidence:
    """Candidate offsets accumulated over one or more probe runs."""

    cands: dict = field(default_factory=dict)   # (hash, param) -> list of sets

    def add(self, kernel_hash: str, param: str, comp_sets: list) -> None:
        key = (kernel_hash, param)
        if key in self.cands:
            self.cands[key] = [a & b for a, b in zip(self.cands[key], comp_sets)]
        else:
            self.cands[key] = [set(s) for s in comp_sets]

    def merge(self, other: "OffsetEvidence") -> "OffsetEvidence":
        out = OffsetEvidence(dict(self.cands))
        for (h, p), sets in other.cands.items():
            out.add(h, p, sets)
        return out

    def resolve(self) -> tuple:
        """(offset records, ambiguous keys).

        A parameter whose components stay ambiguous in one kernel (say the
        height and width of a 1x1xN tensor) adopts the offsets another
        kernel resolved for the same parameter, if they fit its candidates.
        """
        found, pending, ambiguous = [], [], []
        for (h, p), sets in sorted(self.cands.items()):
            if any(len(s) == 0 for s in sets):
                continue
            offs = tuple(next(iter(s)) for s in sets) if all(len(s) == 1 for s in sets) else None
            if offs is None or len(set(offs)) != len(offs):
                pending.append((h, p, sets))
                continue
            found.append(HyperParamOffset(h, p, offs))
        resolved = defaultdict(list)
        for o in found:
            resolved[o.param_name].append(o.dw_offsets)
        for h, p, sets in pending:
            fits = sorted({offs for offs in resolved[p] if all(o in s for o, s in zip(offs, sets))})
            if len(fits) == 1:
                found.append(HyperParamOffset(h, p, fits[0]))
            else:
                ambiguous.append((h, p, [sorted(s) for s in sets]))
        return found, ambiguous


def profile_hyperparam_offsets(k_commands: Sequence[GpuCommand], kernel_trace: Sequence,
                               known_model: DnnModel) -> OffsetEvidence:
    """Collect, for every kernel, the offsets where known values sit in all its launches.

    Values come from two white-box sources: the known model (hyper-parameters
    and tensor shapes) and the launch log (runtime pointer arguments).  The
    result still has to be intersected with other probes and resolved.
    """
    if len(k_commands) != len(kernel_trace):
        raise AlignmentError(f"{len(k_commands)} K commands but {len(kernel_trace)} launch records")
    layer_vals = expected_layer_values(known_model)
    groups = defaultdict(lambda: defaultdict(lambda: ([], [])))
    for cmd, rec in zip(k_commands, kernel_trace):
        vals = dict(rec.args)
        if rec.layer in layer_vals:
            for k, v in layer_vals[rec.layer].items():
                vals.setdefault(k, v)
        w = cmd.words
        for name, v in vals.items():
            if name not in PARAM_NAMES:
                continue
            tup = tuple(v) if isinstance(v, (tuple, list)) else (v,)
            g = groups[cmd.kernel_hash][name]
            g[0].append(w)
            g[1].append(tup)
    ev = OffsetEvidence()
    for h, params in groups.items():
        for name, (ws, vs) in params.items():
            ev.add(h, name, _candidates(ws, vs))
    return ev


def finalize_offsets(evidence: OffsetEvidence, kernels: Sequence[KernelRecord]) -> list:
    """Resolve evidence to one offset tuple per (kernel, parameter).

    Every layer type must expose each of its required parameters in at least
    one of its kernels, the copy kernel its source, destination and size,
    and attribute kernels their bias pointer.
    """
    found, ambiguous = evidence.resolve()
    by_kernel = defaultdict(set)
    for o in found:
        by_kernel[o.kernel_hash].add(o.param_name)
    amb = {(h, p): c for h, p, c in ambiguous}
    problems = []
    types = defaultdict(list)
    for k in kernels:
        types[(k.role, k.layer_type)].append(k.kernel_hash)
    for (role, t), hashes in types.items():
        if role == "layer":
            for p in REQUIRED.get(t, ()):
                if not any(p in by_kernel[h] for h in hashes):
                    why = [amb[(h, p)] for h in hashes if (h, p) in amb]
                    problems.append(f"{t}.{p}" + (f" ambiguous {why}" if why else " not found"))
        elif role == "copy":
            for h in hashes:
                for p in COPY_PARAMS:
                    if p not in by_kernel[h]:
                        problems.append(f"copy kernel {p} not found")
        elif role == "attr":
            for h in hashes:
                if "bias_addr" not in by_kernel[h]:
                    problems.append(f"attribute kernel {h[:12]} exposes no bias pointer")
    if problems:
        raise KnowledgeError("hyper-parameter profiling failed: " + "; ".join(problems))
    keep = {k.kernel_hash for k in kernels}
    return [o for o in found if o.kernel_hash in keep]


# -- whole offline phase ----------------------------------------------------

def build_knowledge_db(header_runs: Sequence, model_runs: Sequence, platform_label: str = "",
                       max_scan_distance: int = 32) -> KnowledgeDb:
    """Profile a platform from probe captures.

    ``header_runs``: ``(SortedStream, issued counts)`` pairs from header probes.
    ``model_runs``: ``(SortedStream, launch log, known canonical model)``
    triples from probe models.
    """
    from .commands import ProbeRun, identify_headers, identify_internal_noise, scan_commands

    streams = [s for s, _ in header_runs]
    noise = identify_internal_noise(streams)
    sigs = identify_headers([ProbeRun(s, issued) for s, issued in header_runs], noise, platform_label,
                            max_scan_distance)
    hashes, logs, evidence, kptr = [], [], OffsetEvidence(), None
    for stream, launch_log, known in model_runs:
        cmds = scan_commands(stream, sigs, max_scan_distance, noise).commands
        ptr = profile_kernel_pointer(cmds)
        if kptr is not None and ptr != kptr:
            raise KnowledgeError(f"probe runs disagree on the kernel pointer offset ({kptr} vs {ptr})")
        kptr = ptr
        extract_kernel_binaries(cmds, kptr)
        ks = [c for c in cmds if c.command_type == CommandType.K]
        if len(ks) != len(launch_log):
            raise AlignmentError(f"{len(ks)} K commands but {len(launch_log)} launch records")
        hashes += [c.kernel_hash for c in ks]
        logs += list(launch_log)
        evidence = evidence.merge(profile_hyperparam_offsets(ks, launch_log, known))
    kernels = profile_kernel_layer_map(hashes, logs)
    offsets = finalize_offsets(evidence, kernels)
    return KnowledgeDb(platform_label, sigs, kernels, offsets, noise, kptr)
