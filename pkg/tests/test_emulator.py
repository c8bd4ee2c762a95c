import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from busleak.emulator import ConfigError, EmulationConfig, emulate
from busleak.emulator.models import _Builder, make_reference_models, random_model
from busleak.emulator.platform import kernel_blob, kernel_name
from busleak.model import expected_blob_sizes, infer_shapes
from busleak.tlp import CPL, MRD, encode_trace
from busleak.traffic import process_traffic

from conftest import emulated


def test_reference_models_match_victim_table():
    mnist, vgg, resnet = make_reference_models()
    assert [len(m.layers) for m in (mnist, vgg, resnet)] == [8, 60, 72]
    assert [m.param_count() for m in (mnist, vgg, resnet)] == [544_522, 15_001_418, 274_442]
    adds = [l for l in resnet.layers if l.layer_type == "Add"]
    assert adds and all(len(l.inbound) == 2 for l in adds)


def test_emulation_is_deterministic():
    m = random_model(4)
    a = emulate(m, EmulationConfig(rng_seed=13))
    b = emulate(m, EmulationConfig(rng_seed=13))
    assert encode_trace(a.trace) == encode_trace(b.trace)
    assert a.manifest == b.manifest
    c = emulate(m, EmulationConfig(rng_seed=14))
    assert encode_trace(c.trace) != encode_trace(a.trace)


def test_default_mnist_useful_fraction():
    res = emulated("mnist", 0)
    assert 0.01 <= res.stats.useful_fraction <= 0.02


def test_quiet_config_one_dense_layer():
    b = _Builder((6,), np.random.default_rng(0), "d")
    b.add("Dense", "input", units=3, use_bias=True)
    res = emulate(b.model(), EmulationConfig.quiet(rng_seed=1))
    s = process_traffic(res.trace)
    assert not s.warnings
    assert res.stats.useful_fraction == 1.0


@pytest.mark.parametrize("bad", [dict(header_split_prob=1.5), dict(noise_ratio=1.0),
                                 dict(ooo_degree=10_000), dict(platform_profile="C")])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        emulate(random_model(0), EmulationConfig(**bad))


def test_kernel_blobs_are_unique_per_platform():
    a, b = kernel_blob(kernel_name(2), "A"), kernel_blob(kernel_name(2), "B")
    assert a != b
    assert 1024 <= len(a) <= 16384
    assert kernel_blob(kernel_name(2), "A") == a


def test_manifest_is_complete():
    res = emulated("mnist", 1)
    counts = res.manifest["counts"]
    assert counts["K"] > 0 and counts["KD2D"] > 0 and counts["D"] > 0
    assert len(res.manifest["commands"]) == sum(counts.values())
    assert res.manifest["param_count"] == 544_522
    assert len(res.launch_log) == counts["K"] + counts["KD2D"]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 64))
def test_completions_of_one_request_stay_in_order(seed, ooo):
    res = emulate(random_model(seed, max_blocks=2), EmulationConfig(rng_seed=seed, ooo_degree=ooo))
    t = res.trace
    # for each tag, requests and completion runs alternate (no tag reuse while outstanding)
    open_tags = set()
    prev = None
    for i in np.flatnonzero((t.kind == MRD) | (t.kind == CPL)).tolist():
        tag = int(t.tag[i])
        if t.kind[i] == MRD and t.direction[i] == 0:
            assert tag not in open_tags
            open_tags.add(tag)
        elif t.kind[i] == CPL and t.direction[i] == 1:
            if tag in open_tags:
                open_tags.discard(tag)
            else:
                assert prev == ("cpl", tag) or tag not in open_tags
        prev = ("cpl", tag) if t.kind[i] == CPL else ("req", tag)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_generated_layers_satisfy_weight_equations(seed):
    m = random_model(seed)
    shapes = infer_shapes(m)
    for l in m.layers:
        src = shapes[l.inbound[0]] if l.inbound else m.input_shape
        assert {k: len(v) for k, v in l.blobs.items()} == expected_blob_sizes(l, src)


def test_planted_hyperparameters_at_profile_offsets():
    from busleak.commands import scan_commands
    from busleak.emulator.platform import get_profile
    b = _Builder((12, 12, 3), np.random.default_rng(0), "c")
    b.add("Conv2D", "input", filters=16, kernel_size=(5, 5), strides=(2, 2), padding="valid", use_bias=False)
    res = emulate(b.model(), EmulationConfig(rng_seed=0))
    prof = get_profile("A")
    ks = [c for c in scan_commands(process_traffic(res.trace), prof.signatures(), noise=prof.noise).commands
          if c.command_type.value == "K"]
    conv = [c.words for c in ks if c.words[101] == 16]
    assert conv
    w = conv[0]
    assert (int(w[102]), int(w[103])) == (5, 5)
    assert (int(w[126]), int(w[127])) == (2, 2)
    assert hashlib.sha256(kernel_blob(kernel_name(2), "A")).hexdigest() in \
        {l["kernel_sha256"] for l in res.manifest["launches"]}
