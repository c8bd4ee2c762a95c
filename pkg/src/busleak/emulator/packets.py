"""Commands -> host memory -> PCIe read traffic, with the configured hazards.

The GPU fetches every command from host memory with upstream memory reads;
the host answers with downstream completions.  Each command therefore
becomes a run of read requests at consecutive host addresses, interleaved
with unrelated traffic.  Hazards applied here:

* internal noise: one DW at a fixed raw index of every command packet
* header split: the first packet of a command carries only 1-8 DWs
* address fragmentation: the rest of a command continues in a new host buffer
* external noise: semaphore polls, background command chatter and reads
  just past the end of a command buffer (never exactly contiguous)
* out-of-order completions within a window of ``ooo_degree`` requests and
  completions split into up to four chunks
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..commands import CommandType
from ..tlp import CPL, DOWN, MRD, MWR, UP, TlpTrace, segment_index
from .platform import PlatformProfile
from .program import Op, op_words

HOST_BASE = 0x0000000100000000
SEMAPHORE_BASE = 0x0000000F00000000
CHATTER_BASE = 0x0000000E00000000
BAR_BASE = 0x00000000F0000000
MAX_TAGS = 256


class ConfigError(ValueError):
    pass


@dataclass
class PacketStats:
    useful_packets: int
    noise_packets: int
    data_packets: int
    tlps: int

    @property
    def useful_fraction(self) -> float:
        return self.useful_packets / self.data_packets if self.data_packets else 0.0


class _Host:
    """Unique host buffers separated by at least 64 KiB of unused space."""

    def __init__(self, rng):
        self.rng = rng
        self.next = HOST_BASE

    def alloc(self, nbytes: int) -> int:
        addr = self.next + 4 * int(self.rng.integers(0, 1024))
        self.next = addr + nbytes + (1 << 16) + 4 * int(self.rng.integers(0, 1 << 16))
        return addr


class _Layout:
    """Accumulates the ordered data-packet sequence as blocks.

    Block kinds: 0 = run of consecutive useful chunks, 1 = one near-address
    noise packet at ``ref`` (an address), 2 = slot for background noise.
    """

    def __init__(self):
        self.kind, self.length, self.ref = [], [], []

    def useful(self, chunk_index: int):
        if self.kind and self.kind[-1] == 0 and self.ref[-1] + self.length[-1] == chunk_index:
            self.length[-1] += 1
        else:
            self.kind.append(0)
            self.length.append(1)
            self.ref.append(chunk_index)

    def near(self, address: int):
        self.kind.append(1)
        self.length.append(1)
        self.ref.append(address)

    def slot(self):
        self.kind.append(2)
        self.length.append(0)
        self.ref.append(len(self.kind))


def _chunk_sizes(n: int, cap: int, first: int | None) -> list:
    sizes = []
    if first is not None and first < n:
        sizes.append(first)
        n -= first
    while n > 0:
        sizes.append(min(cap, n))
        n -= sizes[-1]
    return sizes


def packetize(ops: list, profile: PlatformProfile, cfg, rng: np.random.Generator):
    """Render ``ops`` as a TLP trace; returns (trace, PacketStats)."""
    if not 0 <= cfg.ooo_degree < MAX_TAGS // 2 + 1:
        raise ConfigError(f"ooo_degree {cfg.ooo_degree} must lie in [0, {MAX_TAGS // 2}] "
                          "so no tag is reused while outstanding")
    for name in ("noise_ratio", "header_split_prob", "address_fragmentation_prob"):
        v = getattr(cfg, name)
        if not 0 <= v <= 1:
            raise ConfigError(f"{name}={v} outside [0, 1]")
    if cfg.noise_ratio >= 1:
        raise ConfigError("noise_ratio must be below 1")

    noise_on = cfg.internal_noise
    p = profile.noise.position
    cap = 127 if noise_on else 128
    host = _Host(rng)

    # logical words of everything that travels as command packets
    pieces, chunk_start, chunk_len, chunk_addr = [], [], [], []
    base = 0
    layout = _Layout()
    layout.slot()

    def raw(n):
        return n + 1 if noise_on and n > p else n

    def emit(words: np.ndarray, split: bool, fragment: bool):
        nonlocal base
        first = int(rng.integers(1, 9)) if split else None
        sizes = _chunk_sizes(len(words), cap, first)
        raws = [raw(s) for s in sizes]
        lo = 2 if split else 1
        cut = None
        if fragment and len(sizes) > lo:
            cut = int(rng.integers(lo, len(sizes)))
        segs = [(0, len(sizes))] if cut is None else [(0, cut), (cut, len(sizes))]
        pos = 0
        for s_i, (a, b) in enumerate(segs):
            addr = host.alloc(4 * sum(raws[a:b]))
            end_of_buffer = addr + 4 * sum(raws[a:b])
            for j in range(a, b):
                if j > 0 and j != cut and rng.random() < cfg.intra_noise_prob:
                    # a packet from elsewhere lands between two packets of this command
                    burst = 1 if (split and j == 1) else int(rng.integers(1, 4))
                    for _ in range(burst):
                        if rng.random() < 0.5:
                            layout.near(end_of_buffer + 4 * int(rng.integers(1, 1025)))
                        else:
                            layout.kind.append(2)
                            layout.length.append(1)
                            layout.ref.append(-1)
                idx = len(chunk_start)
                chunk_start.append(base + pos)
                chunk_len.append(sizes[j])
                chunk_addr.append(addr)
                addr += 4 * raws[j]
                pos += sizes[j]
                layout.useful(idx)
        pieces.append(words)
        base += len(words)
        if rng.random() < cfg.near_noise_prob:
            layout.near(end_of_buffer + 4 * int(rng.integers(1, 1025)))

    pending = []   # (place_after_command_index, words)
    n_ops = len(ops)
    for ci, op in enumerate(ops):
        words = op_words(op, profile)
        emit(words, rng.random() < cfg.header_split_prob,
             op.ctype != CommandType.DASYNC and rng.random() < cfg.address_fragmentation_prob)
        if op.ctype == CommandType.DASYNC:
            after = ci + int(rng.integers(1, 4))
            if pending:
                after = max(after, pending[-1][0])
            pending.append((min(after, n_ops - 1), np.frombuffer(op.data, dtype="<u4")))
        while pending and pending[0][0] == ci:
            layout.slot()
            emit(pending.pop(0)[1], False, False)
        layout.slot()

    n_useful = len(chunk_start)
    all_words = np.concatenate(pieces) if pieces else np.zeros(0, np.uint32)
    chunk_start = np.asarray(chunk_start, dtype=np.int64)
    chunk_len = np.asarray(chunk_len, dtype=np.int64)
    chunk_addr = np.asarray(chunk_addr, dtype=np.uint64)

    kind = np.asarray(layout.kind, dtype=np.int8)
    length = np.asarray(layout.length, dtype=np.int64)
    ref = np.asarray(layout.ref, dtype=np.int64)
    # background noise fills the slots so that useful packets make up the
    # requested share of all data packets
    already = int(((kind == 1) | ((kind == 2) & (length == 1))).sum())
    total_noise = int(round(n_useful * cfg.noise_ratio / (1 - cfg.noise_ratio)))
    bulk = max(total_noise - already, 0)
    slots = np.flatnonzero((kind == 2) & (length == 0))
    if len(slots):
        length[slots] = rng.multinomial(bulk, np.full(len(slots), 1 / len(slots)))
    n_pkt = int(length.sum())

    blk = np.repeat(np.arange(len(kind)), length)
    within = np.arange(n_pkt) - np.repeat(np.cumsum(length) - length, length)
    pkind = kind[blk]
    is_useful = pkind == 0
    uidx = np.where(is_useful, ref[blk] + within, -1)

    # -- per data packet: address and raw payload length
    address = np.zeros(n_pkt, dtype=np.uint64)
    rawlen = np.zeros(n_pkt, dtype=np.int64)
    u_rows = np.flatnonzero(is_useful)
    u = uidx[u_rows]
    address[u_rows] = chunk_addr[u]
    u_noise = noise_on & (chunk_len[u] > p)
    rawlen[u_rows] = chunk_len[u] + u_noise

    near_rows = np.flatnonzero(pkind == 1)
    address[near_rows] = ref[blk[near_rows]].astype(np.uint64)
    rawlen[near_rows] = rng.integers(1, 33, len(near_rows))

    bg_rows = np.flatnonzero(pkind == 2)
    n_chatter_cmd = min(len(bg_rows), cfg.chatter_commands)
    chat_pick = np.sort(rng.choice(len(bg_rows), size=n_chatter_cmd, replace=False)) if n_chatter_cmd else []
    chat_rows = bg_rows[chat_pick]
    sem_rows = np.setdiff1d(bg_rows, chat_rows)
    address[sem_rows] = SEMAPHORE_BASE + 64 * rng.integers(0, 1 << 16, len(sem_rows)).astype(np.uint64)
    rawlen[sem_rows] = rng.integers(1, 5, len(sem_rows))
    address[chat_rows] = CHATTER_BASE + 256 * np.arange(len(chat_rows), dtype=np.uint64)
    rawlen[chat_rows] = 9 + rng.integers(2, 7, len(chat_rows))

    # -- payload words
    offsets = np.zeros(n_pkt + 1, dtype=np.int64)
    np.cumsum(rawlen, out=offsets[1:])
    total = int(offsets[-1])
    words = rng.integers(0, 2 ** 32, total, dtype=np.uint32)
    if len(u_rows):
        lens = rawlen[u_rows]
        r = np.arange(int(lens.sum())) - np.repeat(np.cumsum(lens) - lens, lens)
        hn = np.repeat(u_noise, lens)
        src = np.repeat(chunk_start[u], lens) + r - (hn & (r > p))
        dst = np.repeat(offsets[u_rows], lens) + r
        is_n = hn & (r == p)
        vals = all_words[src[~is_n]]
        words[dst[~is_n]] = vals
        nz = dst[is_n]
        words[nz] = (words[nz] & np.uint32(~profile.noise.mask & 0xFFFFFFFF)) | np.uint32(profile.noise.value)
    if len(chat_rows):
        pick = rng.integers(0, len(profile.chatter_headers), len(chat_rows))
        hdrs = np.asarray(profile.chatter_headers, dtype=np.uint32)[pick]
        hdrs[:, 2] = rng.integers(0, 2 ** 32, len(chat_rows), dtype=np.uint32)
        hdrs[:, 4] = 4 * (rawlen[chat_rows] - 9)
        idx = offsets[chat_rows][:, None] + np.arange(9)
        words[idx] = hdrs

    del blk, within, pkind, is_useful, uidx, all_words
    trace = _to_tlps(address, rawlen, words, offsets, cfg, rng)
    stats = PacketStats(n_useful, n_pkt - n_useful, n_pkt, len(trace))
    return trace, stats


def _to_tlps(address, rawlen, words, offsets, cfg, rng) -> TlpTrace:
    """Issue one read per data packet and deliver (possibly split) completions late."""
    n = len(address)
    i = np.arange(n, dtype=np.int64)
    delay = rng.integers(0, cfg.ooo_degree + 1, n) if cfg.ooo_degree else np.zeros(n, np.int64)
    # completion split into 1-4 chunks on 16-DW boundaries
    n16 = (rawlen + 15) // 16
    nc = np.minimum(rng.integers(1, 5, n), np.maximum(n16, 1))
    nc = np.where(rng.random(n) < cfg.completion_split_prob, nc, 1)
    c_pkt = np.repeat(i.astype(np.int32), nc)
    c_k = (np.arange(int(nc.sum()), dtype=np.int32)
           - np.repeat((np.cumsum(nc) - nc).astype(np.int32), nc))
    c_nc = nc[c_pkt].astype(np.int32)
    c_n16 = n16[c_pkt].astype(np.int32)
    lo = np.where(c_k == 0, 0, (c_k * c_n16) // c_nc * 16).astype(np.int32)
    hi = np.where(c_k == c_nc - 1, rawlen[c_pkt], ((c_k + 1) * c_n16) // c_nc * 16).astype(np.int32)
    del c_nc, c_n16, n16

    # filtered-out background: host reads of GPU registers (and their
    # completions) plus posted writes in both directions
    n_extra = int(n * cfg.filtered_traffic_ratio)
    e_t = rng.integers(0, max(n, 1), n_extra)
    e_type = rng.integers(0, 4, n_extra)      # 0 D-MRd, 1 U-Cpl, 2 D-MWr, 3 U-MWr
    e_len = np.where(e_type == 3, rng.integers(1, 17, n_extra), rng.integers(1, 3, n_extra))
    e_len = np.where(e_type == 0, 1, e_len)

    # ordering keys: requests at 2*i, completions at 2*(i+delay)+1
    SH = np.int64(1) << np.int64(34)
    key_r = (2 * i) * SH + i * 4
    key_c = (2 * (c_pkt + delay[c_pkt]) + 1) * SH + c_pkt.astype(np.int64) * 4 + c_k
    key_e = (2 * e_t) * SH + (n + np.arange(n_extra)) * 4
    keys = np.concatenate([key_r, key_c, key_e])
    del key_r, key_c, key_e
    order = np.argsort(keys, kind="stable")
    del keys
    nr, ncpl = n, len(c_pkt)
    T = len(order)

    # rows of the output trace by origin: requests, completions, extras
    r_rows = np.flatnonzero(order < nr)
    c_rows = np.flatnonzero((order >= nr) & (order < nr + ncpl))
    e_rows = np.flatnonzero(order >= nr + ncpl)
    r_src = order[r_rows]
    c_src = order[c_rows] - nr
    e_src = order[e_rows] - nr - ncpl
    del order

    direction = np.full(T, DOWN, dtype=np.uint8)
    direction[r_rows] = UP
    kind = np.full(T, CPL, dtype=np.uint8)
    kind[r_rows] = MRD
    tag = np.empty(T, dtype=np.uint8)
    tag[r_rows] = r_src % MAX_TAGS
    c_of = c_pkt[c_src]
    tag[c_rows] = c_of % MAX_TAGS
    addr = np.zeros(T, dtype=np.uint64)
    addr[r_rows] = address[r_src]
    has = np.zeros(T, dtype=bool)
    has[r_rows] = True
    length = np.zeros(T, dtype=np.int64)
    length[r_rows] = rawlen[r_src]
    del r_src
    seg_len = np.zeros(T, dtype=np.int64)
    c_len = (hi - lo)[c_src]
    seg_len[c_rows] = c_len
    length[c_rows] = c_len
    del c_len

    et = e_type[e_src]
    el = e_len[e_src]
    direction[e_rows] = np.where((et == 0) | (et == 2), DOWN, UP)
    kind[e_rows] = np.choose(et, [MRD, CPL, MWR, MWR])
    tag[e_rows] = rng.integers(0, MAX_TAGS, len(e_rows))
    has[e_rows] = et != 1
    addr[e_rows] = np.where(et == 3, HOST_BASE // 2 + 4 * rng.integers(0, 1 << 20, len(e_rows)),
                            BAR_BASE + 4 * rng.integers(0, 1 << 16, len(e_rows))).astype(np.uint64)
    length[e_rows] = el
    seg_len[e_rows] = np.where(et == 0, 0, el)

    # payload words in output order: completions slice the packet words,
    # extras draw fresh random words appended behind them
    seg_start = np.zeros(T, dtype=np.int64)
    seg_start[c_rows] = offsets[c_of] + lo[c_src]
    del c_of, c_src
    e_seg = seg_len[e_rows]
    extra_words = rng.integers(0, 2 ** 32, int(e_seg.sum()), dtype=np.uint32)
    seg_start[e_rows] = len(words) + np.cumsum(e_seg) - e_seg
    pool = np.concatenate([words, extra_words])
    del extra_words
    gather, pool_offsets = segment_index(seg_start, seg_len)
    del seg_start, seg_len
    out_words = pool[gather]
    return TlpTrace(np.arange(1, T + 1, dtype=np.int64), direction, kind, tag, addr, has,
                    length, out_words, pool_offsets)
