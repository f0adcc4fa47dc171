"""Learn templates from a synthetic corpus, compress it, and show one CBE event.

    python3 demos/templates_and_cbe.py [lines] [seed]
"""

import sys
import time

from loghive.cbe import attach_metadata_l1, normalize_to_cbe
from loghive.device import DEFAULT_TEMPLATES, generate_corpus
from loghive.pipeline import compress, compression_ratio, decompress, learn_templates, serialize_batch

n = int(sys.argv[1]) if len(sys.argv) > 1 else 10_000
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 42

lines = generate_corpus(DEFAULT_TEMPLATES, n, seed)
print(f"{n} lines, e.g.\n  {lines[0]}\n  {lines[1]}\n")

d = learn_templates(lines)
print("learned templates:")
for tid in sorted(d.templates):
    print(f"  {tid}: {d.template_text(tid)}")
print("generators:")
for t in DEFAULT_TEMPLATES:
    print(f"     {t.pattern}")

batch = compress(lines, d)
assert decompress(batch) == lines
print(f"\nserialized {len(serialize_batch(batch))} bytes, ratio {compression_ratio(lines, batch):.3f}, lossless")

device = bytes(range(20))
meta = attach_metadata_l1(device, {device.hex(): {"type": "edge router", "geo": "lab rack 3"}},
                          time.time(), 4.2, "complete")
print("\nfirst record as a CBE event:")
print(normalize_to_cbe(batch.records[0], d, meta, device))
