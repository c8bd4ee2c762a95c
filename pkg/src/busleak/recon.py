"""Online phase: from extracted GPU commands to a white-box model.

Kernel launches are identified through the knowledge database, device-side
copies are told apart from compute kernels, and every buffer address is
tracked over time: a write (D, DAsync, KD2D destination or kernel output)
opens a life range that the next write to the same address closes.
Resolving a pointer read by a kernel at time ``t`` gives the latest writer
before ``t``, following device copies back to the load that supplied the
bytes.  The same rule links each layer to the layers producing its inputs.
"""

from __future__ import annotations

import bisect
import graphlib
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .commands import CleanStream, CommandType, GpuCommand, ScanResult
from .knowledge import KnowledgeDb, KnowledgeError, PAIRED, blob_hash
from .model import BLOB_NAMES, INPUT, DnnModel, Layer, conv_out, layer_output_shape

log = logging.getLogger(__name__)

WEIGHT_PARAMS = {
    "Conv2D": (("kernel", "weights_addr"), ("bias", "bias_addr")),
    "Dense": (("kernel", "weights_addr"), ("bias", "bias_addr")),
    "BatchNorm": (("gamma", "bn_weights1"), ("beta", "bn_weights2"), ("moving_mean", "bn_weights3"),
                  ("moving_variance", "bn_weights4")),
}
MAX_COPY_DEPTH = 64


class ReconstructionError(ValueError):
    pass


class NoCommandsError(ReconstructionError):
    pass


class ParameterCountError(ReconstructionError):
    pass


class DanglingParameterError(ReconstructionError):
    pass


class DataflowError(ReconstructionError):
    pass


# -- writes and life ranges ------------------------------------------------

@dataclass(frozen=True)
class Write:
    """One write to device memory at command index ``time``."""

    time: int
    address: int
    kind: str                 # "D", "DAsync", "KD2D" or "K"
    nbytes: int | None = None
    src: int | None = None    # copy source for KD2D


@dataclass(frozen=True)
class LifeRange:
    """Interval (start, end] during which the bytes ``writer`` put at ``address`` are live.

    The range closes at the last device copy that reads the buffer before it
    is overwritten, at the overwrite itself when nothing copies it, or stays
    open (``end is None``) up to the end of the trace.
    """

    address: int
    start: int
    end: int | None
    writer: Write

    def contains(self, t: int) -> bool:
        return self.start < t and (self.end is None or t <= self.end)


class WriteIndex:
    """Per-address write history answering "who wrote ``addr`` last before ``t``"."""

    def __init__(self, writes: Sequence[Write]):
        self.by_addr = defaultdict(list)
        self.copies_from = defaultdict(list)
        for w in sorted(writes, key=lambda w: w.time):
            self.by_addr[w.address].append(w)
            if w.kind == "KD2D":
                self.copies_from[w.src].append(w.time)
        self.times = {a: [w.time for w in ws] for a, ws in self.by_addr.items()}

    def writer(self, address: int, t: int) -> Write | None:
        times = self.times.get(address)
        if not times:
            return None
        i = bisect.bisect_left(times, t) - 1
        return self.by_addr[address][i] if i >= 0 else None

    def life_ranges(self) -> list:
        out = []
        for a, ws in self.by_addr.items():
            reads = self.copies_from.get(a, [])
            for i, w in enumerate(ws):
                nxt = ws[i + 1].time if i + 1 < len(ws) else None
                lo = bisect.bisect_right(reads, w.time)
                hi = bisect.bisect_right(reads, nxt) if nxt is not None else len(reads)
                end = reads[hi - 1] if hi > lo else nxt
                out.append(LifeRange(a, w.time, end, w))
        out.sort(key=lambda r: (r.start, r.address))
        return out


def compute_life_ranges(writes: Sequence[Write]) -> list:
    """One :class:`LifeRange` per write; ranges of one address never overlap."""
    return WriteIndex(writes).life_ranges()


def resolve(index: WriteIndex, address: int, t: int) -> Write | None:
    """Writer supplying the bytes at ``address`` as seen at time ``t``.

    Device copies are followed to their source at the copy's own time; the
    result is a load (D / DAsync), a kernel output, or ``None``.
    """
    for _ in range(MAX_COPY_DEPTH):
        w = index.writer(address, t)
        if w is None or w.kind != "KD2D":
            return w
        address, t = w.src, w.time
    raise ReconstructionError(f"device copy chain at {address:#x} longer than {MAX_COPY_DEPTH}")


# -- kernel calls ------------------------------------------------------------

@dataclass
class KernelCall:
    time: int
    command: GpuCommand
    record: object            # KernelRecord or None for unknown kernels
    args: dict = field(default_factory=dict)

    @property
    def kernel_hash(self) -> str:
        return self.command.kernel_hash


def extract_hyperparams(cmd: GpuCommand, db: KnowledgeDb) -> dict:
    """Read every argument the DB knows for this kernel out of its data field."""
    words = cmd.words
    out = {}
    for name, offs_list in db.offsets_for(cmd.kernel_hash).items():
        offs = offs_list[0]
        if max(offs) >= len(words):
            raise ReconstructionError(f"kernel data field too short for {name} at {offs}")
        vals = tuple(int(words[o]) for o in offs)
        out[name] = vals if name in PAIRED else vals[0]
    return out


def kernel_calls(commands: Sequence[GpuCommand], db: KnowledgeDb) -> list:
    """Annotate K commands with kernel hashes and split copies off as KD2D."""
    if db.kernel_ptr_offset is None:
        raise KnowledgeError("knowledge database lacks the kernel pointer offset")
    kp = db.kernel_ptr_offset
    last_load = {}
    calls = []
    copies = db.copy_kernels()
    if not copies:
        log.warning("knowledge database has no copy kernel: device copies are not classified")
    for t, cmd in enumerate(commands):
        if cmd.command_type == CommandType.D:
            last_load[cmd.gpu_address] = cmd
        elif cmd.command_type in (CommandType.K, CommandType.KD2D):
            words = cmd.words
            src = last_load.get(int(words[kp])) if kp < len(words) else None
            if src is None:
                raise ReconstructionError(f"K command {t}: kernel pointer resolves to no loaded binary")
            if cmd.kernel_hash is None:
                cmd.kernel_hash = blob_hash(src.data)
            args = extract_hyperparams(cmd, db)
            if cmd.kernel_hash in copies:
                cmd.command_type = CommandType.KD2D
                cmd.copy_src, cmd.copy_dst = args.get("copy_src"), args.get("copy_dst")
            calls.append(KernelCall(t, cmd, db.kernel(cmd.kernel_hash), args))
    return calls


def classify_kd2d(commands: Sequence[GpuCommand], db: KnowledgeDb) -> list:
    """Re-label device-to-device copy launches as KD2D; returns the kernel calls."""
    return kernel_calls(commands, db)


def collect_writes(commands: Sequence[GpuCommand], calls: Sequence[KernelCall]) -> list:
    writes = []
    for t, cmd in enumerate(commands):
        if cmd.command_type == CommandType.D:
            writes.append(Write(t, cmd.gpu_address, "D", len(cmd.data)))
        elif cmd.command_type == CommandType.DASYNC:
            writes.append(Write(t, cmd.gpu_address, "DAsync"))
    for c in calls:
        if c.command.command_type == CommandType.KD2D:
            a = c.args
            if "copy_dst" not in a or "copy_src" not in a:
                raise ReconstructionError(f"copy launch {c.time} lacks source or destination offsets")
            writes.append(Write(c.time, a["copy_dst"], "KD2D", a.get("copy_bytes"), a["copy_src"]))
        elif "out0" in c.args:
            writes.append(Write(c.time, c.args["out0"], "K"))
    return writes


# -- layers --------------------------------------------------------------------

INPUT_VERTEX = -1


@dataclass
class DataflowGraph:
    """Kernel-level dataflow.

    ``vertices`` are the non-copy kernel calls in launch order; an edge
    ``(u, v, slot)`` says vertex ``v`` reads through ``slot`` the output of
    vertex ``u``, or the model input when ``u`` is ``INPUT_VERTEX``.
    """

    vertices: list
    edges: list
    input_address: int | None = None

    def inbound(self, v: int) -> list:
        return [(u, slot) for u, w, slot in self.edges if w == v]


def build_dataflow_graph(calls: Sequence[KernelCall], index: WriteIndex) -> DataflowGraph:
    """Link every data input of every kernel to the call that produced it.

    Pointers are resolved through device copies.  Exactly one loaded buffer
    may act as a data input (the model input); a read of a never-written
    buffer or a cycle is a :class:`DataflowError`.
    """
    vertices = [c for c in calls if c.command.command_type != CommandType.KD2D]
    vid = {c.time: i for i, c in enumerate(vertices)}
    edges = []
    inputs = set()
    for v, c in enumerate(vertices):
        for slot in ("in0", "in1"):
            if slot not in c.args:
                continue
            w = resolve(index, c.args[slot], c.time)
            if w is None:
                raise DataflowError(f"kernel call {c.time}: {slot} {c.args[slot]:#x} read before any write")
            if w.kind == "K":
                if w.time not in vid:
                    raise DataflowError(f"kernel call {c.time}: {slot} produced by an unknown launch")
                edges.append((vid[w.time], v, slot))
            else:
                inputs.add(w.address)
                edges.append((INPUT_VERTEX, v, slot))
    if len(inputs) > 1:
        raise DataflowError(f"{len(inputs)} different loaded buffers feed kernels as data inputs")
    ts = graphlib.TopologicalSorter()
    for v in range(len(vertices)):
        ts.add(v)
    for u, v, _ in edges:
        if u >= 0:
            ts.add(v, u)
    try:
        tuple(ts.static_order())
    except graphlib.CycleError as exc:
        raise DataflowError(f"dataflow graph has a cycle: {exc.args[1]}") from None
    return DataflowGraph(vertices, edges, next(iter(inputs), None))


@dataclass
class LayerNode:
    index: int
    layer_type: str
    calls: list = field(default_factory=list)
    use_bias: bool = False
    inbound: list = field(default_factory=list)   # layer indices, -1 for the model input

    @property
    def name(self) -> str:
        return f"L{self.index:03d}"

    def args(self) -> dict:
        """Arguments of the member kernels merged (first occurrence wins)."""
        out = {}
        for c in self.calls:
            for k, v in c.args.items():
                out.setdefault(k, v)
        return out


def _group_calls(vertices: Sequence[KernelCall]) -> tuple:
    """Layer per vertex: a primary kernel opens a layer, the rest join it."""
    layers = []
    owner = []
    cur = None
    for c in vertices:
        rec = c.record
        if rec is None:
            log.warning("kernel %s is not in the knowledge database", c.kernel_hash[:16])
            layers.append(LayerNode(len(layers), "Other", [c]))
            owner.append(len(layers) - 1)
            cur = None
            continue
        if rec.role == "layer" and rec.is_primary:
            cur = LayerNode(len(layers), rec.layer_type, [c])
            layers.append(cur)
        elif rec.role == "layer":
            if cur is None or cur.layer_type != rec.layer_type:
                raise ReconstructionError(f"{rec.layer_type} kernel {rec.name_hint or rec.kernel_hash[:12]} "
                                          f"at command {c.time} outside a {rec.layer_type} layer")
            cur.calls.append(c)
        elif rec.role == "attr":
            if cur is None:
                raise ReconstructionError(f"attribute kernel at command {c.time} precedes every layer")
            cur.calls.append(c)
            cur.use_bias = True
        else:
            raise ReconstructionError(f"copy kernel at command {c.time} was not classified as KD2D")
        owner.append(cur.index)
    return layers, owner


def map_layers(graph: DataflowGraph) -> list:
    """Contract the kernel graph into layers.

    A primary kernel opens a new layer; the other kernels of the same layer
    type join it; attribute kernels (bias adds) mark the open layer as
    biased.  Unknown kernels become single-kernel ``Other`` layers.  Edges
    between kernels of one layer disappear; the rest become layer inputs in
    slot order.  Layers unreachable from the model input are reported.
    """
    layers, owner = _group_calls(graph.vertices)
    for u, v, _ in sorted(graph.edges, key=lambda e: (e[1], e[2])):
        src = owner[u] if u >= 0 else -1
        dst = layers[owner[v]]
        if src != dst.index:
            dst.inbound.append(src)
    reached = set()
    for node in layers:
        if any(i >= node.index for i in node.inbound):
            raise DataflowError(f"{node.name} consumes a later layer")
        if not node.inbound:
            raise DataflowError(f"{node.name} has no input")
        if any(i == -1 or i in reached for i in node.inbound):
            reached.add(node.index)
        else:
            log.warning("%s is unreachable from the model input", node.name)
    return layers


def _padding(in_hw, out_hw, k, s, name) -> str:
    valid = tuple(conv_out(in_hw[d], k[d], s[d], "valid") for d in (0, 1))
    same = tuple(conv_out(in_hw[d], k[d], s[d], "same") for d in (0, 1))
    if tuple(out_hw) == valid:
        return "valid"
    if tuple(out_hw) == same:
        return "same"
    raise ReconstructionError(f"{name}: output {tuple(out_hw)} fits neither valid {valid} nor same {same}")


def layer_params(node: LayerNode) -> dict:
    """Canonical hyper-parameters of a reconstructed layer."""
    a = node.args()
    t = node.layer_type

    def need(*keys):
        missing = [k for k in keys if k not in a]
        if missing:
            raise ReconstructionError(f"{node.name} ({t}) missing {missing}")

    if t == "Conv2D":
        need("filters", "kernel_size", "strides", "in_shape", "out_hw")
        return {"filters": a["filters"], "kernel_size": a["kernel_size"], "strides": a["strides"],
                "padding": _padding(a["in_shape"][:2], a["out_hw"], a["kernel_size"], a["strides"], node.name),
                "use_bias": node.use_bias}
    if t == "Dense":
        need("units")
        return {"units": a["units"], "use_bias": node.use_bias}
    if t in ("MaxPool", "AvgPool"):
        need("pool_size", "strides", "in_shape", "out_hw")
        return {"pool_size": a["pool_size"], "strides": a["strides"],
                "padding": _padding(a["in_shape"][:2], a["out_hw"], a["pool_size"], a["strides"], node.name)}
    if t == "ZeroPad":
        need("padding_hw")
        return {"padding_hw": a["padding_hw"]}
    if t == "Other":
        return {"kernel_hash": node.calls[0].kernel_hash}
    return {}


def count_weights(layer_type: str, params: dict, in_shape: Sequence[int]) -> tuple:
    """``(n_weights, n_bias)`` a layer of this shape holds.

    Conv2D: kh*kw*c_in*filters weights and one bias per filter.  Dense:
    prod(in_shape)*units weights and one bias per unit.  BatchNorm: four
    per-channel vectors, no bias.  Bias counts ignore ``use_bias``.
    """
    need = {"Conv2D": ("kernel_size", "filters"), "Dense": ("units",)}.get(layer_type, ())
    missing = [k for k in need if params.get(k) is None]
    if missing or not len(in_shape):
        raise ParameterCountError(f"{layer_type}: cannot count weights without {missing or ['input shape']}")
    c_in = int(in_shape[-1])
    if layer_type == "Conv2D":
        kh, kw = params["kernel_size"]
        return kh * kw * c_in * params["filters"], params["filters"]
    if layer_type == "Dense":
        return int(math.prod(in_shape)) * params["units"], params["units"]
    if layer_type == "BatchNorm":
        return 4 * c_in, 0
    return 0, 0


def blob_counts(layer_type: str, params: dict, in_shape: Sequence[int]) -> dict:
    """Float count of every parameter blob a layer needs, from hyper-parameters alone."""
    n_w, n_b = count_weights(layer_type, params, in_shape)
    if layer_type == "BatchNorm":
        return {k: n_w // 4 for k in BLOB_NAMES["BatchNorm"]}
    if layer_type in ("Conv2D", "Dense"):
        return {"kernel": n_w, "bias": n_b} if params.get("use_bias") else {"kernel": n_w}
    return {}


# -- DAsync data ----------------------------------------------------------------

def reassemble_dasync(scan: ScanResult, commands: Sequence[GpuCommand], expected: dict) -> dict:
    """Recover DAsync payloads from packets the scanner left over.

    Left-over packets are chained by address continuity.  Headers are taken
    in stream order and each claims the first unclaimed chain that starts
    after it and holds exactly the expected number of bytes.  ``expected``
    maps command index to byte count; returns command index to bytes.
    """
    if not expected:
        return {}
    cs: CleanStream = scan.clean
    succ = scan.succ
    free = ~scan.consumed
    lens = cs.lengths()
    n = len(cs)
    has_next = np.zeros(n, dtype=bool)
    rows = np.flatnonzero(free & (succ >= 0))
    rows = rows[free[succ[rows]]]
    has_next[rows] = True
    has_prev = np.zeros(n, dtype=bool)
    has_prev[succ[rows]] = True
    starts = np.flatnonzero(has_next & ~has_prev)
    chains = []   # (start row, rows, nbytes)
    for s in starts.tolist():
        rs = [s]
        while has_next[rs[-1]]:
            rs.append(int(succ[rs[-1]]))
        chains.append((s, rs, 4 * int(lens[rs].sum())))
    singles = np.flatnonzero(free & ~has_next & ~has_prev)
    claimed = set()
    out = {}
    for t in sorted(expected):
        cmd = commands[t]
        want = expected[t]
        h = cmd.header_index
        pick = None
        for s, rs, nb in chains:
            if s > h and s not in claimed and nb == want:
                pick = (s, rs)
                break
        if pick is None and want % 4 == 0:
            cand = singles[(singles > h) & (4 * lens[singles] == want)]
            for s in cand.tolist():
                if s not in claimed:
                    pick = (s, [s])
                    break
        if pick is None:
            raise ParameterCountError(f"no left-over packet run of {want} bytes after DAsync header "
                                      f"at {cmd.gpu_address:#x}")
        claimed.add(pick[0])
        data = np.concatenate([cs.payload_words(r) for r in pick[1]])
        out[t] = data.astype("<u4").tobytes()
        cmd.data = out[t]
        cmd.data_size_bytes = want
    return out


# -- parameters and model ----------------------------------------------------------

@dataclass
class ParamSource:
    layer: int
    blob: str
    count: int
    writer: Write
    nbytes: int | None   # bytes moved by the last copy, if any


def locate_parameters(layers: Sequence[LayerNode], index: WriteIndex, in_shapes: dict) -> list:
    """Resolve every parameter pointer to the load that supplied it."""
    out = []
    for node in layers:
        slots = WEIGHT_PARAMS.get(node.layer_type)
        if not slots:
            continue
        counts = blob_counts(node.layer_type, layer_params(node), in_shapes[node.index])
        for blob, arg in slots:
            if blob not in counts:
                continue
            call = next((c for c in node.calls if arg in c.args), None)
            if call is None:
                raise DanglingParameterError(f"{node.name}: no kernel carries {arg}")
            addr = call.args[arg]
            first = index.writer(addr, call.time)
            w = resolve(index, addr, call.time)
            if w is None or w.kind not in ("D", "DAsync"):
                raise DanglingParameterError(f"{node.name}/{blob}: pointer {addr:#x} resolves to "
                                             f"{'nothing' if w is None else 'a kernel output'}")
            moved = first.nbytes if first is not None and first.kind == "KD2D" else None
            out.append(ParamSource(node.index, blob, counts[blob], w, moved))
    return out


def extract_parameters(sources: Sequence[ParamSource], commands: Sequence[GpuCommand]) -> dict:
    """(layer index, blob) -> float32 array, after checking every byte count."""
    blobs = {}
    for p in sources:
        want = 4 * p.count
        data = commands[p.writer.time].data
        if p.nbytes is not None and p.nbytes != want:
            raise ParameterCountError(f"L{p.layer:03d}/{p.blob}: copy moved {p.nbytes} bytes, "
                                      f"expected {want}")
        if len(data) != want:
            raise ParameterCountError(f"L{p.layer:03d}/{p.blob}: loaded buffer holds {len(data)} bytes, "
                                      f"expected {want} ({p.count} floats)")
        blobs[(p.layer, p.blob)] = np.frombuffer(data, dtype="<f4").copy()
    return blobs


def layer_input_shapes(layers: Sequence[LayerNode], model_input: tuple) -> dict:
    """Input shape of every layer, propagated from the model input."""
    shapes = {-1: tuple(model_input)}
    tmp = []
    for node in layers:
        params = layer_params(node)
        in_shape = shapes[node.inbound[0]]
        layer = Layer(node.name, node.layer_type, params, [])
        tmp.append((node.index, in_shape))
        shapes[node.index] = layer_output_shape(layer, [shapes[i] for i in node.inbound])
    return {i: s for i, s in tmp}


def model_input_shape(layers: Sequence[LayerNode]) -> tuple:
    for node in layers:
        if -1 in node.inbound:
            a = node.args()
            if "in_shape" in a:
                return tuple(int(x) for x in a["in_shape"])
    raise ReconstructionError("no layer reading the model input reports its shape")


def emit_model(layers: Sequence[LayerNode], blobs: dict, input_shape: tuple, name: str = "") -> DnnModel:
    if not layers:
        raise ReconstructionError("no layers recognised: nothing to emit")
    out = []
    for node in layers:
        names = [b for b, _ in WEIGHT_PARAMS.get(node.layer_type, ()) if (node.index, b) in blobs]
        out.append(Layer(node.name, node.layer_type, layer_params(node),
                         [INPUT if i < 0 else f"L{i:03d}" for i in node.inbound],
                         {b: blobs[(node.index, b)] for b in names}))
    model = DnnModel(tuple(input_shape), out, name)
    model.validate()
    return model


@dataclass
class Reconstruction:
    model: DnnModel
    layers: list
    calls: list
    writes: list
    graph: DataflowGraph | None = None
    warnings: list = field(default_factory=list)


def reconstruct(scan: ScanResult, db: KnowledgeDb, name: str = "") -> Reconstruction:
    """Commands from one scan -> reconstructed model."""
    commands = scan.commands
    if not commands:
        msg = ("no GPU commands found: the header signatures do not match this trace "
               "(wrong platform profile or knowledge database?)")
        log.warning(msg)
        raise NoCommandsError(msg)
    calls = kernel_calls(commands, db)
    if not calls:
        raise NoCommandsError("no kernel launches among the extracted commands")
    writes = collect_writes(commands, calls)
    index = WriteIndex(writes)
    graph = build_dataflow_graph(calls, index)
    layers = map_layers(graph)
    if not layers:
        raise ReconstructionError("no layers recognised")
    in_shape = model_input_shape(layers)
    in_shapes = layer_input_shapes(layers, in_shape)
    sources = locate_parameters(layers, index, in_shapes)
    expected = {p.writer.time: 4 * p.count for p in sources if p.writer.kind == "DAsync"}
    reassemble_dasync(scan, commands, expected)
    blobs = extract_parameters(sources, commands)
    model = emit_model(layers, blobs, in_shape, name)
    return Reconstruction(model, layers, calls, writes, graph)
