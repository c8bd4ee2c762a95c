import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from busleak.commands import CommandType, scan_commands
from busleak.emulator import EmulationConfig, emulate
from busleak.emulator.models import _Builder, mnist_model, random_model
from busleak.emulator.platform import kernel_name
from busleak.knowledge import KnowledgeDb
from busleak.model import DnnModel, compare_models
from busleak.pipeline import reconstruct_trace
from busleak.recon import (DataflowError, DanglingParameterError, LayerNode, ParamSource,
                           ParameterCountError, ReconstructionError, Write, WriteIndex,
                           blob_counts, build_dataflow_graph, classify_kd2d, collect_writes,
                           compute_life_ranges, count_weights, emit_model, extract_hyperparams,
                           extract_parameters, kernel_calls, locate_parameters, map_layers,
                           reassemble_dasync, reconstruct, resolve)
from busleak.traffic import process_traffic

from conftest import emulated
from oracles import (ReusePlatform, brute_life_ranges, oracle_weights, random_schedule,
                     simulate_memory)

TOY = ReusePlatform()


def scan(res, db):
    return scan_commands(process_traffic(res.trace), db.signatures, noise=db.internal_noise)


def toy_run(cmds):
    calls = kernel_calls(cmds, TOY.db)
    return calls, WriteIndex(collect_writes(cmds, calls))


def payload(tag, n=4):
    return np.full(n, tag, "<f4").tobytes()


# -- device copies ---------------------------------------------------------------------

def test_copy_launch_becomes_kd2d_with_src_and_dst():
    cmds = TOY.prologue() + [TOY.copy(0x00512D01, 0x00130C01, 16)]
    classify_kd2d(cmds, TOY.db)
    c = cmds[-1]
    assert c.command_type == CommandType.KD2D
    assert (c.copy_src, c.copy_dst) == (0x00512D01, 0x00130C01)


def test_no_copies_no_kd2d():
    cmds = TOY.prologue() + [TOY.use(0x10)]
    classify_kd2d(cmds, TOY.db)
    assert [c.command_type for c in cmds].count(CommandType.KD2D) == 0


def test_missing_copy_kernel_skips_classification(caplog):
    db = KnowledgeDb("toy", kernels=[k for k in TOY.db.kernels if k.role != "copy"],
                     offsets=[o for o in TOY.db.offsets if o.kernel_hash != TOY.copy_hash],
                     kernel_ptr_offset=0)
    cmds = TOY.prologue() + [TOY.copy(1, 2, 4)]
    with caplog.at_level(logging.WARNING, logger="busleak"):
        classify_kd2d(cmds, db)
    assert cmds[-1].command_type == CommandType.K
    assert "no copy kernel" in caplog.text


def test_resnet_kd2d_count_matches_manifest(db_a):
    res = emulated("resnet20", 0)
    cmds = scan(res, db_a).commands
    classify_kd2d(cmds, db_a)
    n = sum(c.command_type == CommandType.KD2D for c in cmds)
    assert n == res.manifest["counts"]["KD2D"] > 0


# -- parameter location --------------------------------------------------------------------

def test_copy_chain_resolves_to_original_load():
    w = payload(7.5)
    cmds = TOY.prologue() + [TOY.load(0x00512D01, w), TOY.copy(0x00512D01, 0x00130C01, len(w)),
                             TOY.use(0x00130C01)]
    calls, index = toy_run(cmds)
    use = calls[-1]
    first = index.writer(0x00130C01, use.time)
    assert first.kind == "KD2D" and first.src == 0x00512D01
    src = resolve(index, use.args["weights_addr"], use.time)
    assert src.kind == "D" and cmds[src.time].data == w


def reuse_sequence():
    """D1(src) KD2D(src,dst1) D2(src) KD2D(src,dst2) K1(dst1) K2(dst2)."""
    src, dst1, dst2 = 0x5000, 0x6000, 0x6100
    p1, p2 = payload(1.0), payload(2.0)
    ops = [TOY.load(src, p1), TOY.copy(src, dst1, 16), TOY.load(src, p2), TOY.copy(src, dst2, 16),
           TOY.use(dst1), TOY.use(dst2)]
    return TOY.prologue() + ops, (src, dst1, dst2), (p1, p2)


def test_reuse_sequence_life_ranges():
    cmds, (src, dst1, dst2), _ = reuse_sequence()
    calls, index = toy_run(cmds)
    ranges = [(r.address, r.start, r.end) for r in compute_life_ranges(collect_writes(cmds, calls))]
    base = len(TOY.prologue())
    assert (src, base + 0, base + 1) in ranges
    assert (src, base + 2, base + 3) in ranges
    assert (dst1, base + 1, None) in ranges and (dst2, base + 3, None) in ranges


def test_reuse_sequence_parameters_never_swap():
    cmds, _, (p1, p2) = reuse_sequence()
    calls, index = toy_run(cmds)
    k1, k2 = [c for c in calls if c.record.role == "layer"]
    layers = [LayerNode(0, "Dense", [k1]), LayerNode(1, "Dense", [k2])]
    sources = locate_parameters(layers, index, {0: (4,), 1: (4,)})
    blobs = extract_parameters(sources, cmds)
    assert blobs[(0, "kernel")].tobytes() == p1
    assert blobs[(1, "kernel")].tobytes() == p2


def test_open_range_when_never_copied():
    w = [Write(3, 0x10, "D", 4)]
    (r,) = compute_life_ranges(w)
    assert (r.start, r.end) == (3, None) and r.contains(10**9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_reuse_schedules_against_interval_oracle(seed):
    rng = np.random.default_rng(seed)
    ops = random_schedule(rng)
    cmds = TOY.prologue()
    for i, op in enumerate(ops):
        if op[0] == "load":
            cmds.append(TOY.load(op[1], payload(i)))
        elif op[0] == "copy":
            cmds.append(TOY.copy(op[1], op[2], 16))
        else:
            cmds.append(TOY.use(op[1]))
    calls, index = toy_run(cmds)
    writes = collect_writes(cmds, calls)
    ranges = compute_life_ranges(writes)
    assert [(r.address, r.start, r.end) for r in ranges] == brute_life_ranges(writes)
    by_addr = {}
    for r in ranges:
        assert r.end is None or r.start < r.end
        by_addr.setdefault(r.address, []).append(r)
    for rs in by_addr.values():
        for a, b in zip(rs, rs[1:]):
            assert a.end is not None and a.end <= b.start
    truth = simulate_memory(ops)
    base = len(TOY.prologue())
    for c in calls:
        if c.record.role != "layer":
            continue
        w = resolve(index, c.args["weights_addr"], c.time)
        got = None if w is None or w.kind != "D" else w.time - base
        assert got == truth[c.time - base]


def test_unresolvable_parameter_is_dangling():
    cmds = TOY.prologue() + [TOY.use(0xDEAD0)]
    calls, index = toy_run(cmds)
    with pytest.raises(DanglingParameterError):
        locate_parameters([LayerNode(0, "Dense", [calls[0]])], index, {0: (4,)})


def test_wrong_blob_length_names_layer():
    cmds = TOY.prologue() + [TOY.load(0x10, payload(1.0, 3)), TOY.use(0x10)]
    calls, index = toy_run(cmds)
    sources = locate_parameters([LayerNode(5, "Dense", [calls[0]])], index, {5: (4,)})
    with pytest.raises(ParameterCountError, match="L005/kernel"):
        extract_parameters(sources, cmds)


# -- hyper-parameters and weight counts ----------------------------------------------------

def conv_model(**conv):
    b = _Builder((12, 12, 3), np.random.default_rng(0), "c")
    x = b.add("Conv2D", "input", **conv)
    x = b.add("Flatten", x)
    b.add("Dense", x, units=10, use_bias=False)
    return b.model()


def test_planted_conv_values_read_back(db_a):
    res = emulate(conv_model(filters=16, kernel_size=(5, 5), strides=(2, 2), padding="valid", use_bias=True),
                  EmulationConfig(rng_seed=0))
    cmds = scan(res, db_a).commands
    calls = kernel_calls(cmds, db_a)
    conv = [c for c in calls if c.record and c.record.name_hint == kernel_name(2)][0]
    hp = extract_hyperparams(conv.command, db_a)
    assert (hp["kernel_size"], hp["strides"], hp["filters"]) == ((5, 5), (2, 2), 16)
    dense = [c for c in calls if c.record and c.record.name_hint == kernel_name(7)][0]
    assert extract_hyperparams(dense.command, db_a)["units"] == 10


def test_offset_beyond_data_field_is_an_error(db_a):
    res = emulated("mnist", 0)
    cmds = scan(res, db_a).commands
    calls = kernel_calls(cmds, db_a)
    short = calls[0].command
    short.data = short.data[:40]
    with pytest.raises(ReconstructionError, match="too short"):
        extract_hyperparams(short, db_a)


def test_count_weights_examples():
    assert count_weights("Conv2D", {"kernel_size": (3, 3), "filters": 64}, (32, 32, 3)) == (1728, 64)
    assert count_weights("Dense", {"units": 10}, (512,)) == (5120, 10)
    assert count_weights("BatchNorm", {}, (8, 8, 16)) == (64, 0)
    assert count_weights("MaxPool", {}, (8, 8, 16)) == (0, 0)
    assert blob_counts("Conv2D", {"kernel_size": (3, 3), "filters": 64, "use_bias": False}, (5, 5, 3)) == \
        {"kernel": 1728}


def test_count_weights_needs_channel_counts():
    with pytest.raises(ParameterCountError):
        count_weights("Conv2D", {"kernel_size": (3, 3)}, (5, 5, 3))
    with pytest.raises(ParameterCountError):
        count_weights("Dense", {"units": 3}, ())


def test_mnist_total_from_counts():
    m = mnist_model()
    from busleak.model import infer_shapes
    shapes = infer_shapes(m)
    total = 0
    for l in m.layers:
        src = shapes[l.inbound[0]] if l.inbound else m.input_shape
        n_w, n_b = count_weights(l.layer_type, l.params, src)
        total += n_w + (n_b if l.params.get("use_bias", True) else 0)
    assert total == 544_522


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(["Conv2D", "Dense", "BatchNorm"]), st.integers(1, 7), st.integers(1, 7),
       st.integers(1, 64), st.integers(1, 128), st.integers(1, 40), st.integers(1, 40))
def test_count_weights_matches_tensor_shapes(t, kh, kw, c_in, c_out, h, w):
    params = {"kernel_size": (kh, kw), "filters": c_out, "units": c_out}
    in_shape = (h * w * c_in,) if t == "Dense" else (h, w, c_in)
    assert count_weights(t, params, in_shape) == oracle_weights(t, params, in_shape)


# -- graph and layers ------------------------------------------------------------------------

def graph_of(res, db):
    s = scan(res, db)
    calls = kernel_calls(s.commands, db)
    index = WriteIndex(collect_writes(s.commands, calls))
    return build_dataflow_graph(calls, index)


def test_two_layer_model_is_a_path(db_a):
    b = _Builder((10,), np.random.default_rng(0), "two")
    x = b.add("Dense", "input", units=4, use_bias=False)
    b.add("Dense", x, units=3, use_bias=False)
    g = graph_of(emulate(b.model(), EmulationConfig(rng_seed=1)), db_a)
    assert len(g.vertices) >= 2
    assert sorted((u, v) for u, v, _ in g.edges) == [(-1, 0)] + [(i, i + 1) for i in range(len(g.vertices) - 1)]
    layers = map_layers(g)
    assert [l.layer_type for l in layers] == ["Dense", "Dense"]
    assert [l.inbound for l in layers] == [[-1], [0]]


def test_resnet_add_has_two_inputs_and_graph_is_acyclic(db_a):
    g = graph_of(emulated("resnet20", 0), db_a)
    assert all(u < v for u, v, _ in g.edges)
    adds = [v for v, c in enumerate(g.vertices) if c.record.layer_type == "Add"]
    assert adds and all(len(g.inbound(v)) == 2 for v in adds)
    layers = map_layers(g)
    assert all(len(l.inbound) == 2 for l in layers if l.layer_type == "Add")


def test_conv_kernels_contract_and_bias_kernel_sets_use_bias(db_a):
    res = emulate(conv_model(filters=4, kernel_size=(3, 3), strides=(1, 1), padding="valid", use_bias=True),
                  EmulationConfig(rng_seed=3))
    layers = map_layers(graph_of(res, db_a))
    conv = layers[0]
    names = [c.record.name_hint for c in conv.calls]
    assert conv.layer_type == "Conv2D" and names[:2] == [kernel_name(1), kernel_name(2)]
    assert kernel_name(17) in names and conv.use_bias
    assert "BatchNorm" not in [l.layer_type for l in layers]
    assert not any(kernel_name(6) == c.record.name_hint for l in layers for c in l.calls)


def test_unknown_kernel_becomes_other_layer(db_a, caplog):
    dense = [k for k in db_a.kernels if k.name_hint == kernel_name(7)][0]
    db = KnowledgeDb(db_a.platform_label, db_a.signatures, [k for k in db_a.kernels if k is not dense],
                     [o for o in db_a.offsets if o.kernel_hash != dense.kernel_hash],
                     db_a.internal_noise, db_a.kernel_ptr_offset)
    b = _Builder((6, 6, 2), np.random.default_rng(0), "u")
    x = b.add("Conv2D", "input", filters=2, kernel_size=(1, 1), strides=(1, 1), padding="valid", use_bias=False)
    x = b.add("Relu", x)
    x = b.add("Flatten", x)
    b.add("Dense", x, units=3, use_bias=False)
    res = emulate(b.model(), EmulationConfig(rng_seed=0))
    s = scan(res, db)
    calls = kernel_calls(s.commands, db)
    index = WriteIndex(collect_writes(s.commands, calls))
    with caplog.at_level(logging.WARNING, logger="busleak"):
        with pytest.raises(DataflowError):
            map_layers(build_dataflow_graph(calls, index))
    assert "not in the knowledge database" in caplog.text


# -- async data ---------------------------------------------------------------------------

def test_no_async_transfers_gives_empty_result(db_a):
    s = scan(emulated("mnist", 0), db_a)
    assert reassemble_dasync(s, s.commands, {}) == {}


@pytest.mark.parametrize("seed", range(3))
def test_async_blocks_reassembled_bit_exact(db_a, seed):
    m = random_model(seed + 100)
    res = emulate(m, EmulationConfig(rng_seed=seed, async_threshold_bytes=256))
    assert res.manifest["counts"]["DAsync"] > 0
    model, report = reconstruct_trace(res.trace, db_a)
    assert compare_models(model, res.canonical_model) == []
    assert report.commands["DAsync"] == res.manifest["counts"]["DAsync"]


# -- emission ----------------------------------------------------------------------------------

def test_empty_graph_cannot_be_emitted():
    with pytest.raises(ReconstructionError):
        emit_model([], {}, (4,))


def test_reconstructed_mnist_has_activation_layers_and_no_dropout(db_a):
    model, _ = reconstruct_trace(emulated("mnist", 0).trace, db_a)
    types = [l.layer_type for l in model.layers]
    assert "Dropout" not in types
    assert types == ["Conv2D", "Relu", "Conv2D", "Relu", "MaxPool", "Flatten", "Dense", "Relu", "Dense",
                     "Softmax"]
    assert compare_models(model, mnist_model()) == []


@pytest.mark.parametrize("seed", range(3))
def test_double_round_trip_is_fixed_point(db_a, seed):
    m = random_model(seed + 40)
    once, _ = reconstruct_trace(emulate(m, EmulationConfig(rng_seed=seed)).trace, db_a)
    twice, _ = reconstruct_trace(emulate(once, EmulationConfig(rng_seed=seed + 1)).trace, db_a)
    assert compare_models(once, twice) == []
    assert compare_models(twice, m) == []


@pytest.mark.parametrize("seed", range(10))
def test_blob_lengths_equal_counts(db_a, seed):
    res = emulate(random_model(seed + 200), EmulationConfig(rng_seed=seed))
    rec = reconstruct(scan(res, db_a), db_a)
    from busleak.model import infer_shapes
    shapes = infer_shapes(rec.model)
    for l in rec.model.layers:
        src = shapes[l.inbound[0]] if l.inbound else rec.model.input_shape
        want = blob_counts(l.layer_type, l.params, src)
        assert {k: len(v) for k, v in l.blobs.items()} == want
    assert compare_models(rec.model, res.canonical_model) == []
