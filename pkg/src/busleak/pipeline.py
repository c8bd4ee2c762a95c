"""End-to-end online phase: trace -> sorted stream -> commands -> model."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

from .commands import DEFAULT_MAX_SCAN_DISTANCE, command_counts, scan_commands
from .knowledge import KnowledgeDb
from .model import DnnModel
from .recon import NoCommandsError, reconstruct
from .tlp import TlpTrace
from .traffic import process_traffic

log = logging.getLogger(__name__)


@dataclass
class RunReport:
    tlps: int = 0
    data_packets: int = 0
    commands: dict = field(default_factory=dict)
    kd2d: int = 0
    layers: int = 0
    params: int = 0
    warnings: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    verdict: str | None = None

    def to_json(self) -> dict:
        return asdict(self)


class _Capture(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages = []

    def emit(self, record):
        self.messages.append(record.getMessage())


def reconstruct_trace(trace: TlpTrace, db: KnowledgeDb,
                      max_scan_distance: int = DEFAULT_MAX_SCAN_DISTANCE) -> tuple:
    """Run the whole online phase; returns ``(model, RunReport)``.

    Warnings logged by any stage are copied into the report.  Errors
    propagate; a trace whose headers match nothing raises
    :class:`~busleak.recon.NoCommandsError`.
    """
    report = RunReport(tlps=len(trace))
    cap = _Capture()
    root = logging.getLogger("busleak")
    root.addHandler(cap)
    try:
        t0 = time.perf_counter()
        stream = process_traffic(trace)
        report.data_packets = len(stream)
        t1 = time.perf_counter()
        scan = scan_commands(stream, db.signatures, max_scan_distance, db.internal_noise)
        t2 = time.perf_counter()
        report.commands = command_counts(scan.commands)
        try:
            rec = reconstruct(scan, db, trace.label)
        finally:
            report.commands = command_counts(scan.commands)
            report.kd2d = report.commands.get("KD2D", 0)
        t3 = time.perf_counter()
        report.layers = len(rec.model.layers)
        report.params = rec.model.param_count()
        report.timings = {"traffic": t1 - t0, "scan": t2 - t1, "reconstruct": t3 - t2}
        return rec.model, report
    finally:
        root.removeHandler(cap)
        report.warnings = cap.messages


__all__ = ["RunReport", "reconstruct_trace", "NoCommandsError", "DnnModel"]
