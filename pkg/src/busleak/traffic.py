"""Traffic processing: merge split completions, then restore request order.

Completions for one read request arrive in order but may be split across
several Cpl packets, and completions for different requests may overtake
each other.  :func:`merge_completions` glues adjacent same-tag completions
into one data packet; :func:`sort_data_packets` pairs every read request with
the first later unclaimed data packet carrying its tag and re-emits the data
in request order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tlp import (CPL, DAT, DOWN, MAX_PAYLOAD_DW, MRD, TlpTrace, gather_segments,
                  keep_mask)

log = logging.getLogger(__name__)


def _sources(trace: TlpTrace):
    """Per-row provenance as a ragged (ids, offsets) pair."""
    if trace.source_ids is not None:
        return trace.source_ids, trace.source_offsets
    return trace.packet_id.copy(), np.arange(len(trace) + 1, dtype=np.int64)


def _merge_groups(trace: TlpTrace) -> np.ndarray:
    """Start row of every output record (adjacent same-tag Cpl rows share one)."""
    n = len(trace)
    is_cpl = trace.kind == CPL
    cont = np.zeros(n, dtype=bool)
    if n > 1:
        cont[1:] = is_cpl[1:] & is_cpl[:-1] & (trace.tag[1:] == trace.tag[:-1])
    starts = np.flatnonzero(~cont)
    plen = trace.payload_lengths()
    totals = np.add.reduceat(plen, starts) if n else plen
    if n == 0 or totals.max(initial=0) <= MAX_PAYLOAD_DW:
        return starts
    # a single request never returns more than the maximum payload, so an
    # oversized run must hold completions of two requests: split greedily
    out = []
    bounds = list(starts) + [n]
    for s, e in zip(bounds[:-1], bounds[1:]):
        acc = 0
        for i in range(s, e):
            if i == s or acc + plen[i] > MAX_PAYLOAD_DW:
                out.append(i)
                acc = 0
            acc += plen[i]
    return np.asarray(out, dtype=np.int64)


def merge_completions(trace: TlpTrace) -> TlpTrace:
    """Collapse runs of adjacent same-tag completions into single data packets.

    Expects a trace already reduced with :func:`busleak.tlp.keep_mask`.  Rows
    that are not completions pass through untouched; a lone completion also
    becomes a data packet.
    """
    n = len(trace)
    if n == 0:
        return trace.take(np.zeros(0, dtype=np.int64))
    starts = _merge_groups(trace)
    offsets = np.append(trace.word_offsets[starts], trace.word_offsets[-1])
    kind = trace.kind[starts].copy()
    kind[kind == CPL] = DAT
    sid, soff = _sources(trace)
    src_offsets = np.append(soff[starts], soff[-1])
    length = np.where(kind == MRD, trace.length_dw[starts], np.diff(offsets))
    return TlpTrace(
        trace.packet_id[starts], trace.direction[starts], kind, trace.tag[starts],
        trace.address[starts], trace.has_address[starts], length,
        trace.words, offsets, label=trace.label, notes=trace.notes,
        source_ids=sid, source_offsets=src_offsets,
    )


@dataclass
class SortedDataPacket:
    sort_key: int
    address: int | None
    payload: bytes
    source_ids: list = field(default_factory=list)
    orphan: bool = False


class SortedStream:
    """Data packets in request order, stored column-wise.

    Orphan data packets (never claimed by a request) sit at the end in capture
    order with ``orphan`` set and no address.
    """

    def __init__(self, sort_key, address, has_address, words, offsets,
                 source_ids=None, source_offsets=None, orphan=None, tag=None,
                 warnings=()):
        self.sort_key = np.asarray(sort_key, dtype=np.int64)
        self.address = np.asarray(address, dtype=np.uint64)
        self.has_address = np.asarray(has_address, dtype=bool)
        self.words = np.asarray(words, dtype=np.uint32)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        n = len(self.sort_key)
        if source_ids is None:
            source_ids, source_offsets = self.sort_key.copy(), np.arange(n + 1)
        self.source_ids = np.asarray(source_ids, dtype=np.int64)
        self.source_offsets = np.asarray(source_offsets, dtype=np.int64)
        self.orphan = np.zeros(n, bool) if orphan is None else np.asarray(orphan, bool)
        self.tag = np.zeros(n, np.uint8) if tag is None else np.asarray(tag, np.uint8)
        self.warnings = list(warnings)

    def __len__(self) -> int:
        return len(self.sort_key)

    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def payload_words(self, i: int) -> np.ndarray:
        return self.words[self.offsets[i]:self.offsets[i + 1]]

    def __getitem__(self, i: int) -> SortedDataPacket:
        return SortedDataPacket(
            sort_key=int(self.sort_key[i]),
            address=int(self.address[i]) if self.has_address[i] else None,
            payload=self.payload_words(i).astype("<u4").tobytes(),
            source_ids=self.source_ids[self.source_offsets[i]:self.source_offsets[i + 1]].tolist(),
            orphan=bool(self.orphan[i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def to_trace(self, label: str = "", notes=()) -> TlpTrace:
        """Render as ``Dat`` records whose id is the sort key.

        Orphans receive fresh ids above the largest sort key so the id column
        stays strictly increasing.
        """
        ids = self.sort_key.copy()
        orphan = self.orphan
        if orphan.any():
            top = int(ids[~orphan].max(initial=0))
            ids[orphan] = top + 1 + np.arange(int(orphan.sum()))
        n = len(self)
        return TlpTrace(ids, np.full(n, DOWN), np.full(n, DAT), self.tag, self.address,
                        self.has_address, self.lengths(), self.words, self.offsets,
                        label=label, notes=notes)

    @classmethod
    def from_trace(cls, trace: TlpTrace) -> "SortedStream":
        """Read back a stream written by :meth:`to_trace` (data rows only)."""
        sel = trace.take(trace.kind == DAT)
        return cls(sel.packet_id, sel.address, sel.has_address, sel.words,
                   sel.word_offsets, orphan=~sel.has_address, tag=sel.tag)


def _claim(req_tag, req_pos, dat_tag, dat_pos):
    """Greedy per-tag matching: each request (in order) claims the first later
    unclaimed data packet with its tag.  Returns, per request, the index into
    the data arrays or -1."""
    nr, nd = len(req_pos), len(dat_pos)
    claim = np.full(nr, -1, dtype=np.int64)
    if nr == 0 or nd == 0:
        return claim
    # data ordered by (tag, position); per request, first data of its tag after it
    d_order = np.lexsort((dat_pos, dat_tag))
    d_tag, d_pos = dat_tag[d_order].astype(np.int64), dat_pos[d_order]
    key_d = d_tag * (2 ** 40) + d_pos
    r_order = np.lexsort((req_pos, req_tag))
    r_tag, r_pos = req_tag[r_order].astype(np.int64), req_pos[r_order]
    first = np.searchsorted(key_d, r_tag * (2 ** 40) + r_pos, side="right")
    tag_end = np.searchsorted(key_d, (r_tag + 1) * (2 ** 40), side="left")
    # within one tag the claimed index obeys j_k = max(j_{k-1} + 1, first_k),
    # i.e. j_k = k + running_max(first_k - k) with k the rank inside the tag
    grp_start = np.flatnonzero(np.r_[True, r_tag[1:] != r_tag[:-1]])
    grp_id = np.cumsum(np.r_[True, r_tag[1:] != r_tag[:-1]]) - 1
    rank = np.arange(nr) - grp_start[grp_id]
    big = 4 * (nr + nd + 2)
    shifted = first - rank + grp_id * big
    j = np.maximum.accumulate(shifted) - grp_id * big + rank
    ok = j < tag_end
    claim[r_order] = np.where(ok, d_order[np.minimum(j, nd - 1)], -1)
    return claim


def sort_data_packets(trace: TlpTrace) -> SortedStream:
    """Assign each data packet the packet id of its request and sort by it."""
    is_req = trace.kind == MRD
    is_dat = trace.kind == DAT
    req_rows = np.flatnonzero(is_req)
    dat_rows = np.flatnonzero(is_dat)
    claim = _claim(trace.tag[req_rows], req_rows, trace.tag[dat_rows], dat_rows)
    warnings = []
    orphan_req = req_rows[claim < 0]
    if len(orphan_req):
        ids = trace.packet_id[orphan_req]
        warnings.append(f"{len(ids)} orphan read request(s) dropped, first id {int(ids[0])}")
    claimed = np.zeros(len(dat_rows), dtype=bool)
    good = claim >= 0
    claimed[claim[good]] = True
    orphan_dat = np.flatnonzero(~claimed)
    if len(orphan_dat):
        ids = trace.packet_id[dat_rows[orphan_dat]]
        warnings.append(f"{len(ids)} orphan data packet(s) appended, first id {int(ids[0])}")
    for w in warnings:
        log.warning(w)

    # requests are already in id order, so their claims come out sorted
    matched_req = req_rows[good]
    rows = np.concatenate([dat_rows[claim[good]], dat_rows[orphan_dat]])
    n_matched = len(matched_req)
    sort_key = np.concatenate([trace.packet_id[matched_req], trace.packet_id[dat_rows[orphan_dat]]])
    address = np.concatenate([trace.address[matched_req], np.zeros(len(orphan_dat), np.uint64)])
    has_addr = np.concatenate([trace.has_address[matched_req], np.zeros(len(orphan_dat), bool)])
    words, offsets = gather_segments(trace.words, trace.word_offsets, rows)
    sid, soff = _sources(trace)
    src_ids, src_offsets = gather_segments(sid, soff, rows)
    orphan = np.arange(len(rows)) >= n_matched
    return SortedStream(sort_key, address, has_addr, words, offsets, src_ids, src_offsets,
                        orphan=orphan, tag=trace.tag[rows], warnings=warnings)


def process_traffic(trace: TlpTrace) -> SortedStream:
    """Filter, merge and sort a raw capture."""
    return sort_data_packets(merge_completions(trace.take(keep_mask(trace))))
