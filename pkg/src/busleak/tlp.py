"""Transaction layer packet model and the canonical text trace format.

A trace file is line oriented::

    #tlptrace 1
    #label <free text>
    #note <free text>            (zero or more)
    id=1 dir=U kind=MRd tag=05 addr=00000000405ecf01 len=4 payload=
    id=2 dir=D kind=Cpl tag=05 addr=- len=2 payload=6d2048600000beef

Every record line carries the seven fields in that order, separated by one
space.  ``tag`` is two lowercase hex digits, ``addr`` sixteen lowercase hex
digits or ``-``, ``len`` the DW count, and ``payload`` eight lowercase hex
digits per DW (the DW value, most significant nibble first).  In memory the
payload is the little-endian byte image of those DWs.  Files ending in
``.gz``, ``.bz2`` or ``.xz`` are transparently (de)compressed.

Traces are stored column-wise (numpy arrays) so that captures with millions
of packets stay tractable; :class:`Tlp` objects are materialised on demand.
"""

from __future__ import annotations

import bz2
import gzip
import io
import lzma
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

MAX_PAYLOAD_DW = 128
FORMAT_MAGIC = "#tlptrace 1"


class Direction(str, Enum):
    UPSTREAM = "U"
    DOWNSTREAM = "D"


class Kind(str, Enum):
    MEM_READ = "MRd"
    MEM_WRITE = "MWr"
    COMPLETION = "Cpl"
    DATA = "Dat"


DIRECTIONS = (Direction.UPSTREAM, Direction.DOWNSTREAM)
KINDS = (Kind.MEM_READ, Kind.MEM_WRITE, Kind.COMPLETION, Kind.DATA)
DIR_CODE = {d: i for i, d in enumerate(DIRECTIONS)}
KIND_CODE = {k: i for i, k in enumerate(KINDS)}
MRD, MWR, CPL, DAT = range(4)
UP, DOWN = range(2)


class TraceFormatError(ValueError):
    """Malformed trace file; ``offset`` is the byte offset of the bad line."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class TraceEncodeError(ValueError):
    pass


@dataclass(frozen=True)
class Tlp:
    packet_id: int
    direction: Direction
    kind: Kind
    tag: int = 0
    address: int | None = None
    length_dw: int = 0
    payload: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        object.__setattr__(self, "kind", Kind(self.kind))

    @property
    def words(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype="<u4")


def _check_record(pid, kind, tag, address, length_dw, n_words):
    """Return an error message for an invalid record, or None."""
    if pid < 0:
        return "negative packet id"
    if not 0 <= tag <= 0xFF:
        return f"tag {tag} out of 8-bit range"
    if not 0 <= length_dw <= MAX_PAYLOAD_DW:
        return f"length {length_dw} DW exceeds {MAX_PAYLOAD_DW}"
    if kind == MRD:
        if n_words:
            return "memory read request carries a payload"
        if address is None:
            return "memory read request without address"
    else:
        if n_words != length_dw:
            return f"len={length_dw} but payload holds {n_words} DW"
        if kind == MWR and address is None:
            return "memory write request without address"
        if kind == CPL and address is not None:
            return "completion carries an address"
    return None


class TlpTrace:
    """An ordered packet capture held as parallel numpy columns.

    ``words``/``word_offsets`` hold the concatenated payload DWs; packet ``i``
    owns ``words[word_offsets[i]:word_offsets[i + 1]]``.
    """

    def __init__(self, packet_id, direction, kind, tag, address, has_address,
                 length_dw, words, word_offsets, label: str = "",
                 notes: Iterable[str] = (), source_ids=None, source_offsets=None):
        self.packet_id = np.asarray(packet_id, dtype=np.int64)
        self.direction = np.asarray(direction, dtype=np.uint8)
        self.kind = np.asarray(kind, dtype=np.uint8)
        self.tag = np.asarray(tag, dtype=np.uint8)
        self.address = np.asarray(address, dtype=np.uint64)
        self.has_address = np.asarray(has_address, dtype=bool)
        self.length_dw = np.asarray(length_dw, dtype=np.int32)
        self.words = np.asarray(words, dtype=np.uint32)
        self.word_offsets = np.asarray(word_offsets, dtype=np.int64)
        self.label = label
        self.notes = list(notes)
        # contributing completion ids for merged data packets (not serialised)
        self.source_ids = source_ids
        self.source_offsets = source_offsets

    @classmethod
    def empty(cls, label: str = "", notes: Iterable[str] = ()) -> "TlpTrace":
        z = np.zeros(0)
        return cls(z, z, z, z, z, z, z, z, np.zeros(1), label=label, notes=notes)

    @classmethod
    def from_packets(cls, packets: Iterable[Tlp], label: str = "",
                     notes: Iterable[str] = ()) -> "TlpTrace":
        packets = list(packets)
        chunks = [np.frombuffer(p.payload, dtype="<u4") for p in packets]
        for p in packets:
            if len(p.payload) % 4:
                raise TraceEncodeError(f"packet {p.packet_id}: payload not a whole number of DWs")
        lens = np.array([len(c) for c in chunks], dtype=np.int64)
        offsets = np.zeros(len(packets) + 1, dtype=np.int64)
        np.cumsum(lens, out=offsets[1:])
        words = np.concatenate(chunks).astype(np.uint32) if chunks else np.zeros(0, np.uint32)
        return cls(
            [p.packet_id for p in packets],
            [DIR_CODE[p.direction] for p in packets],
            [KIND_CODE[p.kind] for p in packets],
            [p.tag for p in packets],
            [p.address or 0 for p in packets],
            [p.address is not None for p in packets],
            [p.length_dw for p in packets],
            words, offsets, label=label, notes=notes,
        )

    def __len__(self) -> int:
        return len(self.packet_id)

    def payload_lengths(self) -> np.ndarray:
        return np.diff(self.word_offsets)

    def payload_words(self, i: int) -> np.ndarray:
        return self.words[self.word_offsets[i]:self.word_offsets[i + 1]]

    def __getitem__(self, i: int) -> Tlp:
        if i < 0:
            i += len(self)
        return Tlp(
            packet_id=int(self.packet_id[i]),
            direction=DIRECTIONS[self.direction[i]],
            kind=KINDS[self.kind[i]],
            tag=int(self.tag[i]),
            address=int(self.address[i]) if self.has_address[i] else None,
            length_dw=int(self.length_dw[i]),
            payload=self.payload_words(i).astype("<u4").tobytes(),
        )

    def __iter__(self) -> Iterator[Tlp]:
        for i in range(len(self)):
            yield self[i]

    def take(self, index) -> "TlpTrace":
        """Sub-trace of the selected rows (boolean mask or index array), order kept."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        words, offsets = gather_segments(self.words, self.word_offsets, index)
        return TlpTrace(
            self.packet_id[index], self.direction[index], self.kind[index],
            self.tag[index], self.address[index], self.has_address[index],
            self.length_dw[index], words, offsets, label=self.label, notes=self.notes,
        )

    def validate(self) -> None:
        """Raise :class:`TraceEncodeError` if any packet breaks the trace invariants."""
        if len(self) > 1 and np.any(np.diff(self.packet_id) <= 0):
            bad = int(np.flatnonzero(np.diff(self.packet_id) <= 0)[0]) + 1
            raise TraceEncodeError(f"packet ids not strictly increasing at row {bad}")
        n_words = self.payload_lengths()
        problems = (
            (self.packet_id < 0)
            | (self.length_dw < 0) | (self.length_dw > MAX_PAYLOAD_DW)
            | (self.kind > DAT) | (self.direction > DOWN)
            | ((self.kind == MRD) & ((n_words != 0) | ~self.has_address))
            | ((self.kind != MRD) & (n_words != self.length_dw))
            | ((self.kind == MWR) & ~self.has_address)
            | ((self.kind == CPL) & self.has_address)
        )
        if problems.any():
            i = int(np.flatnonzero(problems)[0])
            msg = _check_record(int(self.packet_id[i]), int(self.kind[i]), int(self.tag[i]),
                                int(self.address[i]) if self.has_address[i] else None,
                                int(self.length_dw[i]), int(n_words[i]))
            raise TraceEncodeError(f"packet {int(self.packet_id[i])}: {msg or 'bad direction/kind code'}")
        for text in [self.label, *self.notes]:
            if "\n" in text or "\r" in text:
                raise TraceEncodeError("trace meta text must be a single line")

    def equals(self, other: "TlpTrace") -> bool:
        cols = ("packet_id", "direction", "kind", "tag", "has_address", "length_dw",
                "words", "word_offsets")
        if len(self) != len(other) or self.label != other.label or self.notes != other.notes:
            return False
        if not all(np.array_equal(getattr(self, c), getattr(other, c)) for c in cols):
            return False
        return np.array_equal(self.address[self.has_address], other.address[other.has_address])


def segment_index(starts: np.ndarray, lens: np.ndarray) -> tuple:
    """Flat source index of the segments ``[starts[i], starts[i] + lens[i])`` back to back.

    Returns ``(index, offsets)``; built with one cumulative sum so only a
    single array of the output size is allocated.
    """
    starts = np.asarray(starts, dtype=np.int64)
    lens = np.asarray(lens, dtype=np.int64)
    offsets = np.zeros(len(lens) + 1, dtype=np.int64)
    np.cumsum(lens, out=offsets[1:])
    total = int(offsets[-1])
    if total == 0:
        return np.zeros(0, dtype=np.int64), offsets
    nz = lens > 0
    s, l, o = starts[nz], lens[nz], offsets[:-1][nz]
    step = np.ones(total, dtype=np.int64)
    step[0] = s[0]
    step[o[1:]] = s[1:] - (s[:-1] + l[:-1]) + 1
    np.cumsum(step, out=step)
    return step, offsets


def gather_segments(words: np.ndarray, offsets: np.ndarray, index: np.ndarray):
    """Concatenate the variable-length segments ``index`` of a ragged array."""
    index = np.asarray(index, dtype=np.int64)
    starts = offsets[index]
    src, new_offsets = segment_index(starts, offsets[index + 1] - starts)
    return words[src], new_offsets


def classify_keep(tlp: Tlp) -> bool:
    """GPU reads going up, their completions coming down, and merged data packets."""
    if tlp.kind == Kind.DATA:
        return True
    if tlp.direction == Direction.UPSTREAM:
        return tlp.kind == Kind.MEM_READ
    return tlp.kind == Kind.COMPLETION


def keep_mask(trace: TlpTrace) -> np.ndarray:
    """Vectorised :func:`classify_keep` over a whole trace."""
    return ((trace.kind == DAT)
            | ((trace.direction == UP) & (trace.kind == MRD))
            | ((trace.direction == DOWN) & (trace.kind == CPL)))


def filter_trace(trace: TlpTrace) -> TlpTrace:
    return trace.take(keep_mask(trace))


# -- canonical text format -------------------------------------------------

_RECORD = re.compile(
    r"id=(0|[1-9][0-9]*) dir=([UD]) kind=(MRd|MWr|Cpl|Dat) tag=([0-9a-f]{2}) "
    r"addr=([0-9a-f]{16}|-) len=(0|[1-9][0-9]*) payload=([0-9a-f]*)"
)
_DIR_FROM_TEXT = {"U": UP, "D": DOWN}
_KIND_FROM_TEXT = {"MRd": MRD, "MWr": MWR, "Cpl": CPL, "Dat": DAT}


def encode_trace(trace: TlpTrace) -> bytes:
    trace.validate()
    out = [FORMAT_MAGIC, "#label " + trace.label]
    out.extend("#note " + n for n in trace.notes)
    hexwords = trace.words.astype(">u4").tobytes().hex()
    offs = (trace.word_offsets * 8).tolist()
    dirs = [d.value for d in DIRECTIONS]
    kinds = [k.value for k in KINDS]
    for i, (pid, d, k, tag, a, has, ln) in enumerate(zip(
            trace.packet_id.tolist(), trace.direction.tolist(), trace.kind.tolist(),
            trace.tag.tolist(), trace.address.tolist(), trace.has_address.tolist(),
            trace.length_dw.tolist())):
        addr = f"{a:016x}" if has else "-"
        out.append(f"id={pid} dir={dirs[d]} kind={kinds[k]} tag={tag:02x} addr={addr} "
                   f"len={ln} payload={hexwords[offs[i]:offs[i + 1]]}")
    return ("\n".join(out) + "\n").encode("ascii")


def parse_trace(data: bytes | str) -> TlpTrace:
    if isinstance(data, bytes):
        try:
            text = data.decode("ascii")
        except UnicodeDecodeError as exc:
            raise TraceFormatError("trace is not ASCII text", exc.start) from None
    else:
        text = data
    if text == "":
        return TlpTrace.empty()
    if not text.endswith("\n"):
        raise TraceFormatError("trace does not end with a newline", len(text))
    lines = text[:-1].split("\n")
    if lines[0] != FORMAT_MAGIC:
        raise TraceFormatError(f"missing '{FORMAT_MAGIC}' header", 0)
    offset = len(lines[0]) + 1
    if len(lines) < 2 or not lines[1].startswith("#label "):
        raise TraceFormatError("missing '#label' line", offset)
    label = lines[1][len("#label "):]
    offset += len(lines[1]) + 1
    notes = []
    row = 2
    while row < len(lines) and lines[row].startswith("#"):
        if not lines[row].startswith("#note "):
            raise TraceFormatError("unknown header line", offset)
        notes.append(lines[row][len("#note "):])
        offset += len(lines[row]) + 1
        row += 1

    n = len(lines) - row
    pid = np.empty(n, np.int64)
    dirs = np.empty(n, np.uint8)
    kinds = np.empty(n, np.uint8)
    tags = np.empty(n, np.uint8)
    addrs = np.zeros(n, np.uint64)
    has = np.zeros(n, bool)
    lens = np.empty(n, np.int32)
    nwords = np.empty(n, np.int64)
    payload_hex = []
    prev_id = -1
    fullmatch = _RECORD.fullmatch
    for j, line in enumerate(lines[row:]):
        m = fullmatch(line)
        if m is None:
            raise TraceFormatError("malformed record", offset)
        s_id, s_dir, s_kind, s_tag, s_addr, s_len, s_pay = m.groups()
        if len(s_pay) % 8:
            raise TraceFormatError("payload is not a whole number of DWs", offset)
        p = int(s_id)
        if p <= prev_id:
            raise TraceFormatError(f"packet id {p} is not greater than {prev_id}", offset)
        prev_id = p
        k = _KIND_FROM_TEXT[s_kind]
        address = None if s_addr == "-" else int(s_addr, 16)
        ln = int(s_len)
        msg = _check_record(p, k, int(s_tag, 16), address, ln, len(s_pay) // 8)
        if msg:
            raise TraceFormatError(msg, offset)
        pid[j] = p
        dirs[j] = _DIR_FROM_TEXT[s_dir]
        kinds[j] = k
        tags[j] = int(s_tag, 16)
        if address is not None:
            addrs[j] = address
            has[j] = True
        lens[j] = ln
        nwords[j] = len(s_pay) // 8
        payload_hex.append(s_pay)
        offset += len(line) + 1
    words = np.frombuffer(bytes.fromhex("".join(payload_hex)), dtype=">u4").astype(np.uint32)
    offsets = np.zeros(n + 1, np.int64)
    np.cumsum(nwords, out=offsets[1:])
    return TlpTrace(pid, dirs, kinds, tags, addrs, has, lens, words, offsets,
                    label=label, notes=notes)


_OPENERS = {".gz": gzip.open, ".bz2": bz2.open, ".xz": lzma.open}


def _opener(path: Path):
    return _OPENERS.get(path.suffix, open)


def read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    with _opener(path)(path, "rb") as fh:
        return fh.read()


def write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        # fixed mtime and no embedded name keep compressed output reproducible
        with open(path, "wb") as raw, gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(data)
        return
    with _opener(path)(path, "wb") as fh:
        fh.write(data)


def read_trace(path: str | Path) -> TlpTrace:
    return parse_trace(read_bytes(path))


def write_trace(trace: TlpTrace, path: str | Path) -> None:
    write_bytes(path, encode_trace(trace))
