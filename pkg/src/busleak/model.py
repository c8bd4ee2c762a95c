"""Declarative DNN model description, canonical form, file format and diff.

A model is an input shape (H, W, C) plus an ordered list of layers.  Each
layer names its inbound layers; the reserved name ``"input"`` refers to the
model input.  Parameters live in per-layer float32 blobs.

Model file layout::

    #dnnmodel 1\\n
    <one line of JSON: input_shape, layers[name, type, params, inbound, blobs]>\\n
    <binary section: little-endian float32, blobs back to back>

Each blob entry in the header gives its ``offset`` (bytes into the binary
section) and ``count`` (floats).  The JSON is written with sorted keys and
no whitespace so equal models give byte-equal files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"#dnnmodel 1\n"
INPUT = "input"

LAYER_TYPES = ("Input", "Conv2D", "BatchNorm", "Dense", "Flatten", "MaxPool", "AvgPool",
               "ZeroPad", "Add", "Relu", "Softmax", "Dropout", "Other")
ACTIVATIONS = {"relu": "Relu", "softmax": "Softmax"}
PAIR_PARAMS = ("kernel_size", "strides", "pool_size", "padding_hw")
BLOB_NAMES = {
    "Conv2D": ("kernel", "bias"),
    "Dense": ("kernel", "bias"),
    "BatchNorm": ("gamma", "beta", "moving_mean", "moving_variance"),
}


class ModelError(ValueError):
    pass


@dataclass
class Layer:
    name: str
    layer_type: str
    params: dict = field(default_factory=dict)
    inbound: list = field(default_factory=list)
    blobs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.layer_type not in LAYER_TYPES:
            raise ModelError(f"unknown layer type {self.layer_type!r}")
        for k in PAIR_PARAMS:
            if k in self.params and self.params[k] is not None:
                v = self.params[k]
                self.params[k] = (int(v), int(v)) if np.isscalar(v) else tuple(int(x) for x in v)
        self.blobs = {k: np.ascontiguousarray(v, dtype="<f4").ravel() for k, v in self.blobs.items()}

    def param_count(self) -> int:
        return sum(len(b) for b in self.blobs.values())


@dataclass
class DnnModel:
    input_shape: tuple
    layers: list
    name: str = ""

    def __post_init__(self):
        self.input_shape = tuple(int(x) for x in self.input_shape)

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def param_count(self) -> int:
        return sum(l.param_count() for l in self.layers)

    def validate(self) -> None:
        seen = {INPUT}
        for l in self.layers:
            if l.name in seen:
                raise ModelError(f"duplicate or reserved layer name {l.name!r}")
            for src in l.inbound:
                if src not in seen:
                    raise ModelError(f"layer {l.name} reads {src!r} before it is defined")
            if l.layer_type == "Add" and len(l.inbound) < 2:
                raise ModelError(f"Add layer {l.name} needs two inputs")
            if l.layer_type not in ("Add", "Input") and len(l.inbound) != 1:
                raise ModelError(f"layer {l.name} must have exactly one input")
            seen.add(l.name)
        shapes = infer_shapes(self)
        for l in self.layers:
            want = expected_blob_sizes(l, shapes[l.inbound[0]] if l.inbound else self.input_shape)
            got = {k: len(v) for k, v in l.blobs.items()}
            if got != want:
                raise ModelError(f"layer {l.name} ({l.layer_type}) blobs {got}, expected {want}")


# -- shapes --------------------------------------------------------------

def conv_out(size: int, k: int, s: int, padding: str) -> int:
    if padding == "same":
        return math.ceil(size / s)
    return (size - k) // s + 1


def layer_output_shape(layer: Layer, in_shapes: list) -> tuple:
    t, p = layer.layer_type, layer.params
    x = in_shapes[0] if in_shapes else None
    if t in ("Conv2D", "MaxPool", "AvgPool"):
        h, w, c = x
        k = p["kernel_size"] if t == "Conv2D" else p["pool_size"]
        s = p.get("strides") or k
        pad = p.get("padding", "valid")
        oh, ow = conv_out(h, k[0], s[0], pad), conv_out(w, k[1], s[1], pad)
        if oh < 1 or ow < 1:
            raise ModelError(f"layer {layer.name} produces an empty feature map")
        return (oh, ow, p["filters"] if t == "Conv2D" else c)
    if t == "Dense":
        return (p["units"],)
    if t == "Flatten":
        return (int(np.prod(x)),)
    if t == "ZeroPad":
        ph, pw = p["padding_hw"]
        return (x[0] + 2 * ph, x[1] + 2 * pw, x[2])
    if t == "Add":
        if any(tuple(s) != tuple(x) for s in in_shapes):
            raise ModelError(f"Add layer {layer.name} joins shapes {in_shapes}")
        return tuple(x)
    if t == "Other":
        return tuple(p.get("output_shape", x))
    return tuple(x)


def infer_shapes(model: DnnModel) -> dict:
    """Output shape of every layer (plus ``"input"``), in list order."""
    shapes = {INPUT: tuple(model.input_shape)}
    for l in model.layers:
        ins = [shapes[s] for s in l.inbound] if l.inbound else [shapes[INPUT]]
        shapes[l.name] = layer_output_shape(l, ins)
    return shapes


def expected_blob_sizes(layer: Layer, in_shape: tuple) -> dict:
    t, p = layer.layer_type, layer.params
    if t == "Conv2D":
        kh, kw = p["kernel_size"]
        out = {"kernel": kh * kw * in_shape[-1] * p["filters"]}
        if p.get("use_bias", True):
            out["bias"] = p["filters"]
        return out
    if t == "Dense":
        if len(in_shape) != 1:
            raise ModelError(f"Dense layer {layer.name} needs a flat input, got {in_shape}")
        out = {"kernel": in_shape[0] * p["units"]}
        if p.get("use_bias", True):
            out["bias"] = p["units"]
        return out
    if t == "BatchNorm":
        return {k: in_shape[-1] for k in BLOB_NAMES["BatchNorm"]}
    if t == "Other":
        return {k: len(v) for k, v in layer.blobs.items()}
    return {}


# -- canonical form --------------------------------------------------------

def canonicalize(model: DnnModel) -> DnnModel:
    """Normal form used for equality.

    Dropout and Input layers disappear (their consumers read the producer
    directly), activation attributes become standalone Relu/Softmax layers,
    ``same`` padding that pads nothing becomes ``valid``, pooling strides are
    made explicit and layers are renamed ``L000``, ``L001``, ... in list order.
    """
    alias = {INPUT: INPUT}
    out = []
    for l in model.layers:
        ins = [alias[s] for s in l.inbound] if l.inbound else [INPUT]
        if l.layer_type in ("Dropout", "Input"):
            alias[l.name] = ins[0] if l.layer_type == "Dropout" else INPUT
            continue
        params = dict(l.params)
        act = params.pop("activation", None)
        if l.layer_type in ("Conv2D", "Dense"):
            params["use_bias"] = bool(params.get("use_bias", True))
        if l.layer_type in ("MaxPool", "AvgPool") and not params.get("strides"):
            params["strides"] = params["pool_size"]
        out.append(Layer(l.name, l.layer_type, params, ins, dict(l.blobs)))
        alias[l.name] = l.name
        if act not in (None, "linear"):
            if act not in ACTIVATIONS:
                raise ModelError(f"unsupported activation {act!r}")
            act_name = l.name + "/act"
            out.append(Layer(act_name, ACTIVATIONS[act], {}, [l.name]))
            alias[l.name] = act_name
    tmp = DnnModel(model.input_shape, out, model.name)
    shapes = infer_shapes(tmp)
    rename = {INPUT: INPUT}
    final = []
    for i, l in enumerate(out):
        rename[l.name] = f"L{i:03d}"
        params = l.params
        if params.get("padding") == "same":
            src = shapes[l.inbound[0]]
            k = params.get("kernel_size") or params.get("pool_size")
            s = params.get("strides") or k
            if all(conv_out(src[d], k[d], s[d], "same") == conv_out(src[d], k[d], s[d], "valid")
                   for d in (0, 1)):
                params = dict(params, padding="valid")
        if l.layer_type in ("Conv2D", "MaxPool", "AvgPool"):
            params.setdefault("padding", "valid")
        final.append(Layer(rename[l.name], l.layer_type, params,
                           [rename[s] for s in l.inbound], l.blobs))
    return DnnModel(model.input_shape, final, model.name)


# -- serialization ---------------------------------------------------------

def _json_params(params: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}


def model_to_bytes(model: DnnModel) -> bytes:
    layers, chunks, offset = [], [], 0
    for l in model.layers:
        blobs = []
        for name, arr in l.blobs.items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            blobs.append({"name": name, "offset": offset, "count": len(arr)})
            chunks.append(data)
            offset += len(data)
        layers.append({"name": l.name, "type": l.layer_type, "params": _json_params(l.params),
                       "inbound": list(l.inbound), "blobs": blobs})
    header = {"input_shape": list(model.input_shape), "layers": layers}
    if model.name:
        header["name"] = model.name
    text = json.dumps(header, sort_keys=True, separators=(",", ":"))
    return MAGIC + text.encode("utf-8") + b"\n" + b"".join(chunks)


def model_from_bytes(data: bytes) -> DnnModel:
    if not data.startswith(MAGIC):
        raise ModelError("not a model file (missing '#dnnmodel 1' line)")
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise ModelError("model header is not newline terminated")
    try:
        header = json.loads(data[len(MAGIC):end])
    except json.JSONDecodeError as exc:
        raise ModelError(f"model header is not valid JSON: {exc}") from None
    body = memoryview(data)[end + 1:]
    layers = []
    for rec in header["layers"]:
        blobs = {}
        for b in rec["blobs"]:
            lo, n = int(b["offset"]), int(b["count"])
            if lo < 0 or lo + 4 * n > len(body):
                raise ModelError(f"blob {rec['name']}/{b['name']} runs past the binary section")
            blobs[b["name"]] = np.frombuffer(body[lo:lo + 4 * n], dtype="<f4").copy()
        layers.append(Layer(rec["name"], rec["type"], dict(rec.get("params", {})),
                            list(rec.get("inbound", [])), blobs))
    return DnnModel(tuple(header["input_shape"]), layers, header.get("name", ""))


def save_model(model: DnnModel, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: str | Path) -> DnnModel:
    return model_from_bytes(Path(path).read_bytes())


# -- comparison --------------------------------------------------------------

def compare_models(a: DnnModel, b: DnnModel) -> list:
    """Differences between the canonical forms of two models (empty when equal)."""
    ca, cb = canonicalize(a), canonicalize(b)
    diffs = []
    if ca.input_shape != cb.input_shape:
        diffs.append(f"input shape {ca.input_shape} != {cb.input_shape}")
    if len(ca.layers) != len(cb.layers):
        diffs.append(f"layer count {len(ca.layers)} != {len(cb.layers)}")
    for la, lb in zip(ca.layers, cb.layers):
        where = f"layer {la.name}"
        if la.layer_type != lb.layer_type:
            diffs.append(f"{where}: type {la.layer_type} != {lb.layer_type}")
            continue
        where += f" ({la.layer_type})"
        if la.inbound != lb.inbound:
            diffs.append(f"{where}: inbound {la.inbound} != {lb.inbound}")
        if la.params != lb.params:
            keys = sorted(set(la.params) | set(lb.params))
            for k in keys:
                if la.params.get(k) != lb.params.get(k):
                    diffs.append(f"{where}: {k} {la.params.get(k)!r} != {lb.params.get(k)!r}")
        if set(la.blobs) != set(lb.blobs):
            diffs.append(f"{where}: blobs {sorted(la.blobs)} != {sorted(lb.blobs)}")
        for name in la.blobs.keys() & lb.blobs.keys():
            x, y = la.blobs[name].view("<u4"), lb.blobs[name].view("<u4")
            if len(x) != len(y):
                diffs.append(f"{where}: blob {name} has {len(x)} values != {len(y)}")
                continue
            bad = np.flatnonzero(x != y)
            if len(bad):
                i = int(bad[0])
                diffs.append(f"{where}: blob {name} differs at offset {i} "
                             f"({int(x[i]):08x} != {int(y[i]):08x}; {len(bad)} value(s) differ)")
    return diffs
