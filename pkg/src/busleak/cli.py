"""Command-line front end.

Each stage reads and writes files so it can be run and checked on its own::

    busleak gen --model mnist --seed 7 --out run/
    busleak gen --probes --platform A --out probes/
    busleak profile probes/ --out db.json
    busleak sort run/trace.tlp.gz --out run/sorted.tlp.gz
    busleak extract run/trace.tlp.gz --db db.json --out run/commands.jsonl
    busleak reconstruct run/trace.tlp.gz --db db.json --out run/model.dnn
    busleak compare run/model.dnn run/reference.dnn
    busleak stats run/trace.tlp.gz --db db.json

Exit codes: 0 success, 1 pipeline error (or models differ for ``compare``),
2 usage error (bad arguments, missing or unreadable input files).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .commands import (DEFAULT_MAX_SCAN_DISTANCE, CommandError, command_counts, dump_commands,
                       scan_commands)
from .emulator.packets import ConfigError
from .knowledge import build_knowledge_db, load_db, save_db
from .model import compare_models, load_model, save_model
from .pipeline import RunReport, reconstruct_trace
from .tlp import DAT, TraceFormatError, read_trace, write_trace
from .traffic import SortedStream, process_traffic

log = logging.getLogger("busleak.cli")

EXIT_OK, EXIT_PIPELINE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {path}")
    return p


def _load_trace(path: str):
    try:
        return read_trace(_existing(path))
    except (OSError, EOFError) as exc:
        raise UsageError(f"cannot read trace {path}: {exc}") from None


def _load_db(path: str | None):
    if not path:
        raise UsageError("--db is required")
    return load_db(_existing(path))


def _stream(trace):
    """A sorted stream from either a raw capture or the output of ``sort``."""
    if len(trace) and (trace.kind == DAT).all():
        return SortedStream.from_trace(trace)
    return process_traffic(trace)


def _label_copies(commands, db) -> None:
    """Mark copy launches as KD2D; leaves the list alone if kernels cannot be resolved."""
    from .recon import classify_kd2d
    try:
        classify_kd2d(commands, db)
    except ValueError as exc:
        log.warning("kernel launches not classified: %s", exc)


def _write_report(report: dict, path: str | None) -> None:
    text = json.dumps(report, sort_keys=True, indent=1) + "\n"
    if path:
        Path(path).write_text(text)
    print(text, end="")


def _resolve_model(ref: str):
    """A reference name (``mnist``, ``vgg16.ref``, ``random:12``) or a model file."""
    from .emulator.models import REFERENCE_MODELS, random_model
    name = ref[:-4] if ref.endswith(".ref") else ref
    if name in REFERENCE_MODELS:
        return REFERENCE_MODELS[name]()
    if name.startswith("random:"):
        try:
            return random_model(int(name.split(":", 1)[1]))
        except ValueError:
            raise UsageError(f"bad random model seed in {ref!r}") from None
    p = Path(ref)
    if not p.exists():
        raise UsageError(f"no such model file or reference model: {ref}")
    return load_model(p)


# -- subcommands ---------------------------------------------------------------

def cmd_gen(args) -> int:
    from .emulator import EmulationConfig, save_launch_log, save_manifest
    from .emulator import emulate
    overrides = {"rng_seed": args.seed, "platform_profile": args.platform}
    if args.config:
        cfg = EmulationConfig.from_file(_existing(args.config), **overrides)
    else:
        cfg = EmulationConfig(**{k: v for k, v in overrides.items() if v is not None})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.probes:
        return _gen_probes(cfg, out, args)
    if not args.model:
        raise UsageError("gen needs --model or --probes")
    model = _resolve_model(args.model)
    res = emulate(model, cfg)
    write_trace(res.trace, out / "trace.tlp.gz")
    save_manifest(res.manifest, out / "manifest.json")
    save_launch_log(res.launch_log, out / "launches.jsonl")
    save_model(res.canonical_model, out / "reference.dnn")
    _write_report({"tlps": len(res.trace), "data_packets": res.stats.data_packets,
                   "useful_packets": res.stats.useful_packets,
                   "useful_fraction": round(res.stats.useful_fraction, 6),
                   "commands": res.manifest["counts"], "params": res.manifest["param_count"],
                   "out": str(out)}, args.report)
    return EXIT_OK


def _gen_probes(cfg, out: Path, args) -> int:
    from .emulator import save_launch_log
    from .emulator.probes import header_probe_runs, model_probe_runs
    seed = cfg.rng_seed
    files = []
    for i, (res, issued) in enumerate(header_probe_runs(cfg.platform_profile, seed, cfg)):
        write_trace(res.trace, out / f"header_{i}.tlp.gz")
        (out / f"header_{i}.probe.json").write_text(json.dumps(
            {"kind": "header", "platform": cfg.platform_profile, "issued": issued}, sort_keys=True) + "\n")
        files.append(f"header_{i}")
    for i, (res, known) in enumerate(model_probe_runs(cfg.platform_profile, seed, cfg)):
        write_trace(res.trace, out / f"model_{i}.tlp.gz")
        save_launch_log(res.launch_log, out / f"model_{i}.launches.jsonl")
        save_model(known, out / f"model_{i}.dnn")
        (out / f"model_{i}.probe.json").write_text(json.dumps(
            {"kind": "model", "platform": cfg.platform_profile}, sort_keys=True) + "\n")
        files.append(f"model_{i}")
    _write_report({"probe_runs": files, "platform": cfg.platform_profile, "out": str(out)}, args.report)
    return EXIT_OK


def cmd_profile(args) -> int:
    from .emulator import load_launch_log
    d = _existing(args.probe_dir)
    metas = sorted(d.glob("*.probe.json"))
    if not metas:
        raise UsageError(f"{d} holds no *.probe.json probe descriptions")
    metas = [(m.name[:-len(".probe.json")], json.loads(m.read_text())) for m in metas]
    platforms = {meta.get("platform", "") for _, meta in metas}
    if len(platforms) > 1 and not args.platform:
        raise UsageError(f"probe directory mixes platforms {sorted(platforms)}; "
                         "profile one platform at a time (--platform)")
    header_runs, model_runs = [], []
    for stem, meta in metas:
        if args.platform and meta.get("platform") != args.platform:
            continue
        trace = _load_trace(str(d / f"{stem}.tlp.gz"))
        if meta["kind"] == "header":
            header_runs.append((process_traffic(trace), meta["issued"]))
        else:
            launches = load_launch_log(_existing(str(d / f"{stem}.launches.jsonl")))
            known = load_model(_existing(str(d / f"{stem}.dnn")))
            model_runs.append((process_traffic(trace), launches, known))
    label = args.platform or platforms.pop()
    db = build_knowledge_db(header_runs, model_runs, label, args.max_scan_distance)
    save_db(db, args.out)
    load_db(args.out)
    _write_report({"platform": label, "signatures": len(db.signatures), "kernels": len(db.kernels),
                   "offsets": len(db.offsets), "kernel_ptr_offset": db.kernel_ptr_offset,
                   "out": args.out}, args.report)
    return EXIT_OK


def cmd_sort(args) -> int:
    trace = _load_trace(args.trace)
    stream = process_traffic(trace)
    write_trace(stream.to_trace(trace.label, ("sorted data packets",)), args.out)
    _write_report({"tlps": len(trace), "data_packets": len(stream),
                   "orphans": int(stream.orphan.sum()), "out": args.out}, args.report)
    return EXIT_OK


def cmd_extract(args) -> int:
    db = _load_db(args.db)
    stream = _stream(_load_trace(args.trace))
    scan = scan_commands(stream, db.signatures, args.max_scan_distance, db.internal_noise)
    _label_copies(scan.commands, db)
    text = dump_commands(scan.commands, args.out, with_payload=args.payload)
    if not args.out:
        sys.stdout.write(text)
    if not scan.commands:
        log.warning("no commands extracted: header signatures of platform %s do not match this trace",
                    db.platform_label)
    _write_report({"data_packets": len(stream), "commands": command_counts(scan.commands),
                   "out": args.out}, args.report)
    return EXIT_OK


def _reconstruct_one(trace_path: str, db_path: str, out: str, max_scan: int, expect: str | None) -> dict:
    db = load_db(db_path)
    trace = read_trace(trace_path)
    model, report = reconstruct_trace(trace, db, max_scan)
    save_model(model, out)
    if expect:
        diffs = compare_models(model, load_model(expect))
        report.verdict = "EQUAL" if not diffs else "DIFFERENT: " + "; ".join(diffs[:20])
    return dict(report.to_json(), trace=trace_path, out=out)


def cmd_reconstruct(args) -> int:
    for t in args.trace:
        _existing(t)
    _load_db(args.db)
    if args.expect:
        _existing(args.expect)
    if len(args.trace) == 1:
        outs = [args.out]
    else:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        outs = [str(Path(args.out) / (Path(t).name.split(".")[0] + ".dnn")) for t in args.trace]
    jobs = [(t, args.db, o, args.max_scan_distance, args.expect) for t, o in zip(args.trace, outs)]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(_reconstruct_one, *zip(*jobs)))
    else:
        reports = [_reconstruct_one(*j) for j in jobs]
    _write_report(reports[0] if len(reports) == 1 else {"runs": reports}, args.report)
    if any(r.get("verdict") not in (None, "EQUAL") for r in reports):
        return EXIT_PIPELINE
    return EXIT_OK


def cmd_compare(args) -> int:
    a = load_model(_existing(args.model_a))
    b = load_model(_existing(args.model_b))
    diffs = compare_models(a, b)
    _write_report({"verdict": "EQUAL" if not diffs else "DIFFERENT", "diffs": diffs}, args.report)
    return EXIT_OK if not diffs else EXIT_PIPELINE


def cmd_stats(args) -> int:
    trace = _load_trace(args.trace)
    kinds = {}
    for name, code in (("MRd", 0), ("MWr", 1), ("Cpl", 2), ("Dat", 3)):
        kinds[name] = int((trace.kind == code).sum())
    stream = _stream(trace)
    report = RunReport(tlps=len(trace), data_packets=len(stream)).to_json()
    report["kinds"] = kinds
    report["orphans"] = int(stream.orphan.sum())
    if args.db:
        db = _load_db(args.db)
        scan = scan_commands(stream, db.signatures, args.max_scan_distance, db.internal_noise)
        _label_copies(scan.commands, db)
        report["commands"] = command_counts(scan.commands)
        report["kd2d"] = report["commands"]["KD2D"]
        report["command_packets"] = int(scan.consumed.sum())
    report.pop("timings")
    _write_report(report, args.report)
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="busleak", description="Reconstruct DNN models from PCIe TLP traces.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, db=False):
        sp.add_argument("--report", help="also write the JSON report to this path")
        sp.add_argument("--max-scan-distance", type=int, default=DEFAULT_MAX_SCAN_DISTANCE,
                        help="packets searched for an address continuation (default %(default)s)")
        if db:
            sp.add_argument("--db", help="knowledge database from 'profile'")

    g = sub.add_parser("gen", help="emulate a victim inference (or the probe workloads)")
    g.add_argument("--model", help="reference name (mnist, vgg16, resnet20, random:N) or model file")
    g.add_argument("--probes", action="store_true", help="write the offline probe captures instead")
    g.add_argument("--config", help="emulation config JSON")
    g.add_argument("--seed", type=int, help="RNG seed (overrides the config)")
    g.add_argument("--platform", choices=("A", "B"), help="platform profile (overrides the config)")
    g.add_argument("--out", default=".", help="output directory")
    common(g)
    g.set_defaults(func=cmd_gen)

    pr = sub.add_parser("profile", help="build a knowledge database from probe captures")
    pr.add_argument("probe_dir")
    pr.add_argument("--out", required=True, help="database file to write")
    pr.add_argument("--platform", help="only use probes of this platform")
    common(pr)
    pr.set_defaults(func=cmd_profile)

    s = sub.add_parser("sort", help="filter, merge and sort a capture into data packets")
    s.add_argument("trace")
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_sort)

    e = sub.add_parser("extract", help="dump the GPU commands found in a capture")
    e.add_argument("trace")
    e.add_argument("--out", help="JSON-lines command dump (default stdout)")
    e.add_argument("--payload", action="store_true", help="include payload hex")
    common(e, db=True)
    e.set_defaults(func=cmd_extract)

    r = sub.add_parser("reconstruct", help="reconstruct the model behind one or more captures")
    r.add_argument("trace", nargs="+")
    r.add_argument("--out", required=True, help="model file (or directory for several traces)")
    r.add_argument("--expect", help="model to compare the result with")
    r.add_argument("--jobs", type=int, default=1, help="parallel processes for several traces")
    common(r, db=True)
    r.set_defaults(func=cmd_reconstruct)

    c = sub.add_parser("compare", help="compare two model files")
    c.add_argument("model_a")
    c.add_argument("model_b")
    c.add_argument("--report")
    c.set_defaults(func=cmd_compare)

    st = sub.add_parser("stats", help="packet and command counts of a capture")
    st.add_argument("trace")
    common(st, db=True)
    st.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"busleak {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TraceFormatError, json.JSONDecodeError, ConfigError) as exc:
        print(f"busleak {args.command}: bad input file: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, CommandError) as exc:
        stage = type(exc).__module__.rsplit(".", 1)[-1]
        print(f"busleak {args.command}: {stage} stage failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE

if __name__ == "__main__":
    sys.exit(main())
