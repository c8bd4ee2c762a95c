"""GPU command extraction from a sorted data-packet stream.

Every command starts with a nine-DW header at the beginning of a packet.
Word 3 carries the GPU address, word 5 the data-field size in bytes and
word 9 a per-platform command-type constant; the remaining words are fixed
per command type.  The data field follows the header in the same logical
byte stream, spread over as many packets as needed.

Two kinds of noise get in the way.  Internal noise is one DW that the
platform inserts at a fixed position inside every packet; it is removed
before anything else looks at a payload.  External noise is whole packets
from unrelated traffic; the scanner skips them by following address
continuity between consecutive packets of a command.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tlp import gather_segments
from .traffic import SortedStream

log = logging.getLogger(__name__)

HEADER_DW = 9
ADDR_POS = 2      # word 3, zero based
SIZE_POS = 4      # word 5
TYPE_POS = 8      # word 9
DEFAULT_MAX_SCAN_DISTANCE = 32


class CommandType(str, Enum):
    D = "D"
    K = "K"
    KD2D = "KD2D"
    DASYNC = "DAsync"


class CommandError(Exception):
    pass


class TruncatedCommandError(CommandError):
    def __init__(self, sort_key: int, declared: int, collected: int):
        self.sort_key = sort_key
        self.declared = declared
        self.collected = collected
        super().__init__(f"command with header at sort key {sort_key} truncated: "
                         f"{collected} of {declared} bytes before end of trace")


class ProfilingError(CommandError):
    pass


@dataclass(frozen=True)
class InternalNoisePattern:
    """One noise DW at raw index ``position`` whose masked bits equal ``value``."""

    position: int
    mask: int
    value: int

    def matches(self, word: int) -> bool:
        return (int(word) & self.mask) == self.value

    def to_json(self) -> dict:
        return {"position": self.position, "mask": f"{self.mask:08x}", "value": f"{self.value:08x}"}

    @classmethod
    def from_json(cls, obj: dict) -> "InternalNoisePattern":
        return cls(int(obj["position"]), int(obj["mask"], 16), int(obj["value"], 16))


def filter_internal_noise(payload, pattern: InternalNoisePattern | None):
    """Drop the noise DW from one packet payload (bytes or uint32 array)."""
    as_bytes = isinstance(payload, (bytes, bytearray))
    words = np.frombuffer(bytes(payload), dtype="<u4") if as_bytes else np.asarray(payload, np.uint32)
    if pattern is not None and len(words) > pattern.position and pattern.matches(words[pattern.position]):
        words = np.delete(words, pattern.position)
    return words.astype("<u4").tobytes() if as_bytes else words


@dataclass(frozen=True)
class CommandHeaderSignature:
    """Nine-word header pattern; ``None`` entries are wildcards."""

    words: tuple
    command_type: CommandType
    platform_label: str = ""

    def __post_init__(self):
        if len(self.words) != HEADER_DW:
            raise ValueError("a header signature has exactly nine words")
        object.__setattr__(self, "command_type", CommandType(self.command_type))
        object.__setattr__(self, "words", tuple(None if w is None else int(w) for w in self.words))

    @property
    def type_word(self) -> int | None:
        return self.words[TYPE_POS]

    def matches(self, header: Sequence[int]) -> bool:
        return all(w is None or int(h) == w for w, h in zip(self.words, header))

    def to_json(self) -> dict:
        return {"command_type": self.command_type.value, "platform_label": self.platform_label,
                "words": [None if w is None else f"{w:08x}" for w in self.words]}

    @classmethod
    def from_json(cls, obj: dict) -> "CommandHeaderSignature":
        return cls(tuple(None if w is None else int(w, 16) for w in obj["words"]),
                   CommandType(obj["command_type"]), obj.get("platform_label", ""))


@dataclass
class GpuCommand:
    command_type: CommandType
    gpu_address: int
    data_size_bytes: int | None
    data: bytes = b""
    source_span: list = field(default_factory=list)
    header_index: int = -1
    kernel_hash: str | None = None
    copy_src: int | None = None
    copy_dst: int | None = None

    @property
    def words(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype="<u4")

    @property
    def sort_key(self) -> int:
        return self.source_span[0] if self.source_span else -1

    def payload_sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()


class CleanStream:
    """A sorted stream with internal noise removed.

    ``words``/``offsets`` hold the logical payloads; ``raw_len`` keeps the
    on-the-wire DW count, which is what address continuity is measured in.
    """

    def __init__(self, stream: SortedStream, pattern: InternalNoisePattern | None):
        self.stream = stream
        self.sort_key = stream.sort_key
        self.address = stream.address
        self.has_address = stream.has_address
        self.raw_len = stream.lengths()
        self.pattern = pattern
        if pattern is None or len(stream) == 0:
            self.words, self.offsets = stream.words, stream.offsets
            return
        p = pattern.position
        cand = np.flatnonzero(self.raw_len > p)
        at = stream.offsets[cand] + p
        hit = (stream.words[at] & np.uint32(pattern.mask)) == np.uint32(pattern.value)
        drop = at[hit]
        keep = np.ones(len(stream.words), dtype=bool)
        keep[drop] = False
        self.words = stream.words[keep]
        removed = np.zeros(len(stream) + 1, dtype=np.int64)
        removed[cand[hit] + 1] = 1
        self.offsets = stream.offsets - np.cumsum(removed)

    def __len__(self) -> int:
        return len(self.sort_key)

    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def payload_words(self, i: int) -> np.ndarray:
        return self.words[self.offsets[i]:self.offsets[i + 1]]


def successor_links(address, has_address, raw_len, max_distance: int,
                    candidates: np.ndarray | None = None) -> np.ndarray:
    """succ[i] = first j in (i, i + max_distance] whose address continues packet i.

    Only rows listed in ``candidates`` (default: all) may act as successors.
    """
    n = len(address)
    succ = np.full(n, -1, dtype=np.int64)
    rows = np.flatnonzero(has_address)
    cand = rows if candidates is None else np.intersect1d(rows, candidates)
    if len(rows) == 0 or len(cand) == 0:
        return succ
    ca = address[cand].astype(np.uint64)
    o = np.argsort(ca, kind="stable")
    sa = ca[o]
    srow = cand[o]
    del ca, o
    end = address[rows].astype(np.uint64) + raw_len[rows].astype(np.uint64) * np.uint64(4)
    # sorted probes keep the binary searches cache friendly
    q = np.argsort(end)
    pos = np.empty(len(rows), dtype=np.int64)
    pos[q] = np.searchsorted(sa, end[q], side="left")
    del q
    p = np.minimum(pos, len(sa) - 1)
    same = (pos < len(sa)) & (sa[p] == end)
    j = srow[p]
    ok = same & (j > rows) & (j <= rows + max_distance)
    succ[rows[ok]] = j[ok]
    # the first packet at that address precedes i: search the rest of the run
    for k in np.flatnonzero(same & (j <= rows)).tolist():
        i, lo = int(rows[k]), int(p[k])
        hi = int(np.searchsorted(sa, end[k], side="right"))
        m = lo + int(np.searchsorted(srow[lo:hi], i, side="right"))
        if m < hi and srow[m] <= i + max_distance:
            succ[i] = srow[m]
    return succ


@dataclass
class ScanResult:
    commands: list
    consumed: np.ndarray
    truncated: list = field(default_factory=list)
    header_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    clean: CleanStream | None = None
    succ: np.ndarray | None = None


def _header_candidates(cs: CleanStream, succ: np.ndarray, signatures) -> list:
    """(row, type, continuation_row or -1, words-from-first-row) for every header match."""
    type_words = {s.type_word for s in signatures if s.type_word is not None}
    lens = cs.lengths()
    found = []
    # whole headers: last header word sits inside the first packet
    rows = np.flatnonzero(lens >= HEADER_DW)
    w9 = cs.words[cs.offsets[rows] + TYPE_POS]
    rows = rows[np.isin(w9, list(type_words))] if type_words else rows
    for r in rows.tolist():
        header = cs.payload_words(r)[:HEADER_DW]
        for sig in signatures:
            if sig.matches(header):
                found.append((r, sig.command_type, -1, HEADER_DW))
                break
    # split headers: first part short, rest at the start of the address successor
    rows = np.flatnonzero((lens > 0) & (lens < HEADER_DW) & (succ >= 0))
    if len(rows):
        nxt = succ[rows]
        need = HEADER_DW - lens[rows]
        ok = lens[nxt] >= need
        rows, nxt, need = rows[ok], nxt[ok], need[ok]
        w9 = cs.words[cs.offsets[nxt] + need - 1]
        sel = np.isin(w9, list(type_words)) if type_words else np.ones(len(rows), bool)
        for r, j, k in zip(rows[sel].tolist(), nxt[sel].tolist(), need[sel].tolist()):
            header = np.concatenate([cs.payload_words(r), cs.payload_words(j)[:k]])
            for sig in signatures:
                if sig.matches(header):
                    found.append((r, sig.command_type, j, HEADER_DW - k))
                    break
    found.sort()
    return found


def scan_commands(stream: SortedStream, signatures: Iterable[CommandHeaderSignature],
                  max_scan_distance: int = DEFAULT_MAX_SCAN_DISTANCE,
                  noise: InternalNoisePattern | None = None,
                  strict: bool = True) -> ScanResult:
    """Extract D, K and DAsync commands from a sorted stream.

    After a header, payload is gathered packet by packet.  The next packet is
    the closest unconsumed one (within ``max_scan_distance``) whose address
    continues the current one; failing that, the next unconsumed packet in
    stream order is taken as the far side of an address gap.  Collection
    stops at the size declared in word 5.  DAsync headers carry no size and
    consume only their header.

    With ``strict`` a truncated command raises :class:`TruncatedCommandError`;
    otherwise truncations are collected in the result and scanning goes on.
    """
    signatures = list(signatures)
    cs = stream if isinstance(stream, CleanStream) else CleanStream(stream, noise)
    n = len(cs)
    succ = successor_links(cs.address, cs.has_address, cs.raw_len, max_scan_distance)
    consumed = np.zeros(n, dtype=bool)
    lens = cs.lengths()
    commands, truncated, header_rows = [], [], []
    for row, ctype, cont, first_take in _header_candidates(cs, succ, signatures):
        if consumed[row] or (cont >= 0 and consumed[cont]):
            continue
        if cont >= 0:
            header = np.concatenate([cs.payload_words(row), cs.payload_words(cont)[:HEADER_DW - first_take]])
        else:
            header = cs.payload_words(row)[:HEADER_DW]
        gpu_addr = int(header[ADDR_POS])
        if ctype == CommandType.DASYNC:
            consumed[row] = True
            span = [row]
            if cont >= 0:
                consumed[cont] = True
                span.append(cont)
            commands.append(GpuCommand(ctype, gpu_addr, None, b"",
                                       cs.sort_key[span].tolist(), header_index=row))
            header_rows.append(row)
            continue
        size = int(header[SIZE_POS])
        need = HEADER_DW + (size + 3) // 4
        span = [row]
        consumed[row] = True
        have = int(lens[row])
        cur = row
        if cont >= 0:
            span.append(cont)
            consumed[cont] = True
            have += int(lens[cont])
            cur = cont
        while have < need:
            nxt = succ[cur]
            if nxt < 0 or consumed[nxt]:
                nxt = cur + 1
                while nxt < n and consumed[nxt]:
                    nxt += 1
                if nxt >= n:
                    break
            consumed[nxt] = True
            span.append(int(nxt))
            have += int(lens[nxt])
            cur = nxt
        if have < need:
            err = TruncatedCommandError(int(cs.sort_key[row]), size, max(0, (have - HEADER_DW) * 4))
            if strict:
                raise err
            log.warning(str(err))
            truncated.append(err)
            continue
        words, _ = gather_segments(cs.words, cs.offsets, np.asarray(span, dtype=np.int64))
        data = words[HEADER_DW:HEADER_DW + (size + 3) // 4].astype("<u4").tobytes()[:size]
        commands.append(GpuCommand(ctype, gpu_addr, size, data, cs.sort_key[span].tolist(),
                                   header_index=row))
        header_rows.append(row)
    return ScanResult(commands, consumed, truncated, np.asarray(header_rows, dtype=np.int64), cs, succ)


# -- offline profiling -----------------------------------------------------

PROGRESSION_BASE = 0xC0DE0000
PROGRESSION_MASK = 0xFFFF0000


def identify_internal_noise(streams: Iterable[SortedStream], min_samples: int = 64
                            ) -> InternalNoisePattern | None:
    """Locate the per-packet noise DW using crafted progression payloads.

    Probe D commands carry words ``0xC0DE0000 + i``.  In a packet made only of
    such words, the single foreign DW is the noise; its index must agree
    across all samples and the bits it never varies in form the pattern.
    Returns ``None`` when probe packets show no foreign DW at all.
    """
    positions, samples, clean = Counter(), [], 0
    for stream in streams:
        lens = stream.lengths()
        rows = np.flatnonzero(lens >= 16)
        for r in rows.tolist():
            w = stream.payload_words(r)
            prog = (w & np.uint32(PROGRESSION_MASK)) == np.uint32(PROGRESSION_BASE)
            bad = np.flatnonzero(~prog)
            if len(bad) == 0 and len(w) >= 16:
                clean += 1
            elif len(bad) == 1 and prog.sum() >= len(w) - 1:
                positions[int(bad[0])] += 1
                samples.append(int(w[bad[0]]))
    if not samples:
        return None
    if len(positions) != 1:
        raise ProfilingError(f"internal noise appears at several positions: {dict(positions)}")
    if len(samples) < min_samples:
        raise ProfilingError(f"only {len(samples)} internal-noise samples; need {min_samples}")
    position = next(iter(positions))
    arr = np.asarray(samples, dtype=np.uint32)
    varying = np.bitwise_or.reduce(arr ^ arr[0])
    mask = int(~varying & 0xFFFFFFFF)
    return InternalNoisePattern(position, mask, int(arr[0]) & mask)


@dataclass
class ProbeRun:
    """One probe capture plus how many commands of each type it issued.

    Counts only need to be right up to a per-type constant shared by every
    run (runtime housekeeping is the same in all of them).
    """

    stream: SortedStream
    issued: dict


def _header_keys(cs: CleanStream, succ: np.ndarray) -> Counter:
    """Count nine-word packet-start patterns with the address and size words blanked."""
    lens = cs.lengths()
    keys = Counter()
    rows = np.flatnonzero(lens >= HEADER_DW)
    if len(rows):
        idx = cs.offsets[rows][:, None] + np.arange(HEADER_DW)
        mat = cs.words[idx].copy()
        mat[:, ADDR_POS] = 0
        mat[:, SIZE_POS] = 0
        uniq, counts = np.unique(mat, axis=0, return_counts=True)
        for u, c in zip(uniq, counts):
            keys[tuple(int(x) for x in u)] += int(c)
    for r in np.flatnonzero((lens > 0) & (lens < HEADER_DW) & (succ >= 0)).tolist():
        j = succ[r]
        header = np.concatenate([cs.payload_words(r), cs.payload_words(j)])[:HEADER_DW]
        if len(header) == HEADER_DW:
            header[ADDR_POS] = 0
            header[SIZE_POS] = 0
            keys[tuple(int(x) for x in header)] += 1
    return keys


def identify_headers(probes: Sequence[ProbeRun], noise: InternalNoisePattern | None = None,
                     platform_label: str = "",
                     max_scan_distance: int = DEFAULT_MAX_SCAN_DISTANCE) -> list:
    """Differential header discovery.

    Candidate headers are nine-word patterns found at packet starts.  For
    each command type, the pattern whose occurrence counts move across probe
    runs exactly like the issued counts of that type is its signature.
    Background traffic whose count does not change between runs is ignored.
    """
    if len(probes) < 2:
        raise ProfilingError("header identification needs at least two probe runs")
    per_run = []
    for p in probes:
        cs = CleanStream(p.stream, noise)
        succ = successor_links(cs.address, cs.has_address, cs.raw_len, max_scan_distance)
        per_run.append(_header_keys(cs, succ))
    all_keys = set().union(*per_run)
    types = sorted({t for p in probes for t in p.issued}, key=str)
    sigs = []
    for t in types:
        issued = np.array([p.issued.get(t, 0) for p in probes])
        delta = issued - issued[0]
        if not delta.any():
            raise ProfilingError(f"probe runs do not vary the number of {t} commands")
        hits = [k for k in all_keys
                if np.array_equal(np.array([r.get(k, 0) for r in per_run]) - per_run[0].get(k, 0), delta)]
        if len(hits) != 1:
            dump = {f"{k[TYPE_POS]:08x}": [r.get(k, 0) for r in per_run] for k in all_keys
                    if any(r.get(k, 0) > 1 for r in per_run)}
            raise ProfilingError(f"{len(hits)} header patterns track the {t} count; "
                                 f"issued {issued.tolist()}, candidates {dump}")
        words = list(hits[0])
        words[ADDR_POS] = None
        words[SIZE_POS] = None
        sigs.append(CommandHeaderSignature(tuple(words), CommandType(t), platform_label))
    return sigs


# -- command dump ------------------------------------------------------------

def command_record(cmd: GpuCommand, with_payload: bool = False) -> dict:
    rec = {"type": cmd.command_type.value, "gpu_addr": f"0x{cmd.gpu_address:08x}",
           "size": cmd.data_size_bytes, "payload_sha256": cmd.payload_sha256()}
    if with_payload:
        rec["payload"] = cmd.data.hex()
    return rec


def dump_commands(commands: Iterable[GpuCommand], path: str | Path | None = None,
                  with_payload: bool = False) -> str:
    text = "".join(json.dumps(command_record(c, with_payload), sort_keys=True) + "\n"
                   for c in commands)
    if path is not None:
        Path(path).write_text(text)
    return text


def load_commands(path: str | Path) -> list:
    """Read a dump written with payloads back into :class:`GpuCommand` objects."""
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "payload" not in rec:
            raise CommandError("command dump lacks payloads; re-run extract with --payload")
        data = bytes.fromhex(rec["payload"])
        if hashlib.sha256(data).hexdigest() != rec["payload_sha256"]:
            raise CommandError(f"payload hash mismatch for command at {rec['gpu_addr']}")
        out.append(GpuCommand(CommandType(rec["type"]), int(rec["gpu_addr"], 16), rec["size"], data))
    return out


def command_counts(commands: Iterable[GpuCommand]) -> dict:
    c = Counter(cmd.command_type.value for cmd in commands)
    return {t.value: c.get(t.value, 0) for t in CommandType}
