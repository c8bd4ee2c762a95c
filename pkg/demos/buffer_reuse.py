"""Why parameter lookup must respect buffer life ranges.

A staging buffer is loaded twice and copied to two destinations before
either consumer runs.  Looking up "the data last loaded at this address"
would give both consumers the second payload; following the device copy
back to the write that was live at copy time gives each its own.
"""

import sys
from pathlib import Path

import numpy as np

from busleak.recon import WriteIndex, collect_writes, compute_life_ranges, kernel_calls, resolve

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from oracles import ReusePlatform  # noqa: E402  (toy platform shared with the tests)

toy = ReusePlatform()
src, dst1, dst2 = 0x00512D01, 0x00130C01, 0x00130D01
ops = [("load", src), ("copy", src, dst1), ("load", src), ("copy", src, dst2), ("use", dst1), ("use", dst2)]
cmds = toy.commands(ops)
calls = kernel_calls(cmds, toy.db)
writes = collect_writes(cmds, calls)
index = WriteIndex(writes)
base = len(toy.prologue())

print("life ranges (address, start, end):")
for r in compute_life_ranges(writes):
    print(f"  0x{r.address:08x}  {r.start - base}..{'open' if r.end is None else r.end - base}")
for c in calls:
    if c.record.role != "layer":
        continue
    w = resolve(index, c.args["weights_addr"], c.time)
    value = np.frombuffer(cmds[w.time].data, "<f4")[0]
    print(f"consumer at step {c.time - base} reads 0x{c.args['weights_addr']:08x} "
          f"-> load at step {w.time - base} (payload {value:g})")
