import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from busleak.commands import (CommandHeaderSignature, CommandType, InternalNoisePattern, ProbeRun,
                              TruncatedCommandError, dump_commands, filter_internal_noise,
                              identify_headers, identify_internal_noise, load_commands,
                              scan_commands, successor_links)
from busleak.emulator import EmulationConfig, emulate, emulate_program
from busleak.emulator.models import _Builder, random_model
from busleak.emulator.platform import get_profile
from busleak.emulator.probes import header_probe_runs
from busleak.emulator.program import probe_program
from busleak.traffic import SortedStream, process_traffic

D_SIG = CommandHeaderSignature((0x11111111, 0x22222222, None, 0x33333333, None, 0x44444444,
                                0x55555555, 0x66666666, 0xD0D0D0D0), CommandType.D)
BASE = 0x9000_0000


def header(addr, size):
    return [0x11111111, 0x22222222, addr, 0x33333333, size, 0x44444444, 0x55555555, 0x66666666,
            0xD0D0D0D0]


def stream(packets):
    """SortedStream from (address, words) pairs; sort keys 10, 20, 30, ..."""
    lens = [len(w) for _, w in packets]
    offsets = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
    words = np.concatenate([np.asarray(w, np.uint32) for _, w in packets]) if packets else []
    keys = 10 * (np.arange(len(packets)) + 1)
    return SortedStream(keys, [a for a, _ in packets], [True] * len(packets), words, offsets)


def data_words(n, start=0):
    return list(range(0x1000 + start, 0x1000 + start + n))


def as_bytes(words):
    return np.asarray(words, "<u4").tobytes()


def test_contiguous_command_is_concatenation():
    body = data_words(10)
    pk = [(BASE, header(0x405ECF01, 40) + body[:3]), (BASE + 48, body[3:])]
    res = scan_commands(stream(pk), [D_SIG])
    assert len(res.commands) == 1
    c = res.commands[0]
    assert (c.command_type, c.gpu_address, c.data_size_bytes) == (CommandType.D, 0x405ECF01, 40)
    assert c.data == as_bytes(body)
    assert c.source_span == [10, 20]


def test_interleaved_noise_packet_skipped():
    body = data_words(12)
    pk = [(BASE, header(0x100, 48) + body[:4]),
          (0x7777_0000, [0xDEAD] * 4),
          (0x7777_1000, [0xBEEF] * 2),
          (BASE + 52, body[4:8]),
          (BASE + 68, body[8:])]
    res = scan_commands(stream(pk), [D_SIG], max_scan_distance=5)
    assert len(res.commands) == 1
    assert res.commands[0].data == as_bytes(body)
    assert res.consumed.tolist() == [True, False, False, True, True]


def test_gap_packet_included_when_no_successor():
    body = data_words(12)
    pk = [(BASE, header(0x100, 48) + body[:4]),
          (0x5555_0000, body[4:8]),          # second physical chunk, address gap
          (0x5555_0010, body[8:])]
    res = scan_commands(stream(pk), [D_SIG])
    assert res.commands[0].data == as_bytes(body)


def test_split_header_with_noise_between():
    body = data_words(6)
    full = header(0x2000, 24) + body
    pk = [(BASE, full[:4]), (0x6666_0000, [1, 2, 3]), (BASE + 16, full[4:])]
    res = scan_commands(stream(pk), [D_SIG])
    assert len(res.commands) == 1
    assert res.commands[0].gpu_address == 0x2000
    assert res.commands[0].data == as_bytes(body)
    assert res.consumed.tolist() == [True, False, True]


def test_truncated_command_names_header_sort_key():
    pk = [(BASE, [0] * 4), (BASE + 0x100, header(0x100, 400) + data_words(4))]
    with pytest.raises(TruncatedCommandError) as exc:
        scan_commands(stream(pk), [D_SIG])
    assert exc.value.sort_key == 20 and exc.value.declared == 400
    res = scan_commands(stream(pk), [D_SIG], strict=False)
    assert len(res.truncated) == 1 and res.commands == []


def test_header_inside_earlier_command_is_not_rescanned():
    inner = header(0xBAD, 8) + [7, 7]
    body = data_words(3) + inner + data_words(2, 100)
    pk = [(BASE, header(0x100, 4 * len(body)) + body[:3]), (BASE + 48, body[3:])]
    res = scan_commands(stream(pk), [D_SIG])
    assert [c.gpu_address for c in res.commands] == [0x100]
    assert res.commands[0].data == as_bytes(body)


def test_overlapping_match_rescanned_after_first_command():
    # two packets both start with headers; the first command is short so
    # the second header is untouched and extracted on its own
    pk = [(BASE, header(0x100, 8) + [1, 2]), (BASE + 44, header(0x200, 4) + [3])]
    res = scan_commands(stream(pk), [D_SIG])
    assert [(c.gpu_address, c.data) for c in res.commands] == [(0x100, as_bytes([1, 2])),
                                                               (0x200, as_bytes([3]))]


def test_dasync_header_consumes_only_header():
    sig = CommandHeaderSignature(tuple(header(0, 0)[:2]) + (None, 0x33333333, None) +
                                 (0x44444444, 0x55555555, 0x66666666, 0xA0A0A0A0), CommandType.DASYNC)
    h = header(0x3000, 0)
    h[8] = 0xA0A0A0A0
    pk = [(BASE, h), (BASE + 36, data_words(8))]
    res = scan_commands(stream(pk), [sig])
    assert res.commands[0].command_type == CommandType.DASYNC
    assert res.commands[0].data_size_bytes is None
    assert res.consumed.tolist() == [True, False]


def test_successor_links_against_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n = int(rng.integers(1, 60))
        addr = rng.choice(np.arange(0, 400, 4), n).astype(np.uint64)
        ln = rng.integers(0, 5, n)
        has = rng.random(n) < 0.9
        dist = int(rng.integers(1, 10))
        succ = successor_links(addr, has, ln, dist)
        for i in range(n):
            want = -1
            if has[i]:
                for j in range(i + 1, min(n, i + dist + 1)):
                    if has[j] and addr[j] == addr[i] + 4 * ln[i]:
                        want = j
                        break
            assert succ[i] == want


def test_filter_internal_noise_examples():
    pat = InternalNoisePattern(2, 0xFFFF0000, 0x5EED0000)
    clean = as_bytes([1, 2, 3, 4])
    assert filter_internal_noise(clean, pat) == clean
    assert filter_internal_noise(b"", pat) == b""
    assert filter_internal_noise(as_bytes([1, 2, 0x5EED1234, 4]), pat) == as_bytes([1, 2, 4])
    arr = np.array([1, 2, 0x5EED0001], np.uint32)
    assert filter_internal_noise(arr, pat).tolist() == [1, 2]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 2**32 - 1), max_size=12), st.integers(0, 11))
def test_filter_internal_noise_removes_only_matching_word(words, pos):
    pat = InternalNoisePattern(pos, 0xFFF00000, 0xA5B00000)
    out = filter_internal_noise(np.array(words, np.uint32), pat).tolist()
    if len(words) > pos and pat.matches(words[pos]):
        assert out == words[:pos] + words[pos + 1:]
    else:
        assert out == words


def test_emulator_noise_packets_each_lose_one_word():
    res = emulate(random_model(3), EmulationConfig(rng_seed=3))
    prof = get_profile("A")
    s = process_traffic(res.trace)
    lens = s.lengths()
    rows = np.flatnonzero(lens > prof.noise.position)
    hits = [r for r in rows if prof.noise.matches(s.payload_words(r)[prof.noise.position])]
    total = sum(len(filter_internal_noise(s.payload_words(r), prof.noise)) for r in hits)
    assert total == int(lens[hits].sum()) - len(hits)


@pytest.fixture(scope="module")
def probe_streams():
    return {p: [ProbeRun(process_traffic(r.trace), issued) for r, issued in header_probe_runs(p)]
            for p in ("A", "B")}


def test_identify_headers_recovers_profile_a_signatures(probe_streams):
    noise = identify_internal_noise(p.stream for p in probe_streams["A"])
    assert noise == get_profile("A").noise
    sigs = identify_headers(probe_streams["A"], noise, "A")
    by_type = {s.command_type: s for s in sigs}
    assert by_type[CommandType.K].type_word == 0x6D204860
    assert set(by_type) == {CommandType.D, CommandType.K, CommandType.DASYNC}
    assert sorted(sigs, key=lambda s: s.command_type.value) == \
        sorted(get_profile("A").signatures(), key=lambda s: s.command_type.value)
    for s in sigs:
        assert s.words[2] is None and s.words[4] is None


def test_profiles_have_disjoint_signatures(probe_streams):
    sig_a = identify_headers(probe_streams["A"], get_profile("A").noise, "A")
    sig_b = identify_headers(probe_streams["B"], get_profile("B").noise, "B")
    assert {s.words for s in sig_a}.isdisjoint({s.words for s in sig_b})
    for run in probe_streams["A"]:
        assert scan_commands(run.stream, sig_b, noise=get_profile("B").noise).commands == []
    for run in probe_streams["B"]:
        assert scan_commands(run.stream, sig_a, noise=get_profile("A").noise).commands == []


def test_single_command_type_probe_yields_one_d_signature():
    prof = get_profile("A")
    runs = []
    for i, n_d in enumerate((10, 3, 7)):
        rng = np.random.default_rng(40 + i)
        cfg = EmulationConfig(rng_seed=40 + i)
        b = probe_program(prof, rng, n_d, 1, 1, words_per_load=int(rng.integers(64, 2048)))
        runs.append(ProbeRun(process_traffic(emulate_program(b, cfg, rng).trace), {"D": n_d}))
    sigs = identify_headers(runs, prof.noise)
    assert len(sigs) == 1 and sigs[0].command_type == CommandType.D
    assert sigs[0].words[4] is None
    sizes = {c.data_size_bytes for r in runs for c in scan_commands(r.stream, sigs, noise=prof.noise).commands}
    assert len(sizes) > 1


def test_identify_headers_needs_varying_counts(probe_streams):
    runs = [ProbeRun(r.stream, {"D": 4}) for r in probe_streams["A"][:3]]
    with pytest.raises(Exception, match="do not vary"):
        identify_headers(runs)


def one_layer_model():
    b = _Builder((4, 4, 2), np.random.default_rng(0), "one")
    b.add("Conv2D", "input", filters=3, kernel_size=(3, 3), strides=(1, 1), padding="valid", use_bias=True)
    return b.model()


def scanned(res, platform="A", dist=32):
    prof = get_profile(platform)
    s = process_traffic(res.trace)
    out = scan_commands(s, prof.signatures(), dist, prof.noise)
    return [(c.command_type.value, c.gpu_address, c.data_size_bytes, c.payload_sha256()) for c in out.commands]


def test_one_layer_model_commands_match_manifest():
    res = emulate(one_layer_model(), EmulationConfig(rng_seed=2, noise_ratio=0.98))
    assert scanned(res) == res.scan_view()
    assert res.stats.useful_fraction < 0.05


@pytest.mark.parametrize("seed", range(5))
def test_scan_recall_and_precision(seed):
    res = emulate(random_model(seed), EmulationConfig(rng_seed=seed))
    got = scanned(res)
    assert got == res.scan_view()
    for t, _, size, _ in got:
        if t != "DAsync":
            assert size is not None


@pytest.mark.parametrize("seed", range(3))
def test_larger_scan_distance_keeps_correct_commands(seed):
    res = emulate(random_model(seed + 20), EmulationConfig(rng_seed=seed))
    truth = set(res.scan_view())
    base = [c for c in scanned(res, dist=32) if c in truth]
    for dist in (48, 64, 128, 512):
        assert set(base) <= set(scanned(res, dist=dist))


def test_payload_length_equals_declared_size():
    res = emulate(random_model(1), EmulationConfig(rng_seed=9))
    prof = get_profile("A")
    out = scan_commands(process_traffic(res.trace), prof.signatures(), noise=prof.noise)
    for c in out.commands:
        if c.command_type != CommandType.DASYNC:
            assert len(c.data) == c.data_size_bytes


def test_command_dump_round_trip(tmp_path):
    res = emulate(one_layer_model(), EmulationConfig(rng_seed=1))
    prof = get_profile("A")
    cmds = scan_commands(process_traffic(res.trace), prof.signatures(), noise=prof.noise).commands
    path = tmp_path / "cmds.jsonl"
    dump_commands(cmds, path, with_payload=True)
    back = load_commands(path)
    assert [(c.command_type, c.gpu_address, c.data) for c in back] == \
        [(c.command_type, c.gpu_address, c.data) for c in cmds]
    first = path.read_text().splitlines()[0]
    assert first.startswith('{"gpu_addr": "0x')
