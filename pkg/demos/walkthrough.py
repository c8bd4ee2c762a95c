"""Offline profiling followed by one online attack, stage by stage.

Run with ``python3 demos/walkthrough.py [model]`` where model is mnist,
resnet20, vgg16 or random:N (default mnist).
"""

import sys
import time

from busleak.commands import command_counts, scan_commands
from busleak.emulator import EmulationConfig, emulate
from busleak.emulator.models import REFERENCE_MODELS, random_model
from busleak.emulator.probes import header_probe_runs, model_probe_runs
from busleak.knowledge import build_knowledge_db
from busleak.model import compare_models
from busleak.recon import reconstruct
from busleak.traffic import process_traffic


def main(name="mnist"):
    t0 = time.perf_counter()
    # offline: the attacker owns a GPU of the same kind and runs probe workloads
    headers = [(process_traffic(r.trace), issued) for r, issued in header_probe_runs("A")]
    models = [(process_traffic(r.trace), r.launch_log, m) for r, m in model_probe_runs("A")]
    db = build_knowledge_db(headers, models, "A")
    print(f"knowledge DB: {len(db.signatures)} header signatures, {len(db.kernels)} kernels, "
          f"{len(db.offsets)} hyper-parameter offsets ({time.perf_counter() - t0:.1f} s)")

    # online: only the victim's bus capture is available
    victim = random_model(int(name.split(":")[1])) if name.startswith("random:") else REFERENCE_MODELS[name]()
    res = emulate(victim, EmulationConfig(rng_seed=1))
    print(f"capture: {len(res.trace)} TLPs, useful fraction {res.stats.useful_fraction:.2%}")
    stream = process_traffic(res.trace)
    print(f"sorted data packets: {len(stream)}")
    scan = scan_commands(stream, db.signatures, noise=db.internal_noise)
    rec = reconstruct(scan, db, res.trace.label)
    print(f"commands: {command_counts(scan.commands)}")
    print(f"reconstructed {len(rec.model.layers)} layers, {rec.model.param_count():,} parameters")
    for layer in rec.model.layers[:12]:
        print(f"  {layer.name} {layer.layer_type:9s} {layer.params} <- {layer.inbound}")
    diffs = compare_models(rec.model, res.canonical_model)
    print("verdict:", "EQUAL" if not diffs else diffs[:5])


if __name__ == "__main__":
    main(*sys.argv[1:2])
