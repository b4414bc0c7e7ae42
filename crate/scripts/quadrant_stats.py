#!/usr/bin/env python3
"""Mask/decoded attention quadrant means from an attention dump.

Reads the binary matrices and their JSON sidecar written by
`elastic-dllm dump-attn` and prints one JSON object per (layer, head).
Standard library only.

    python3 scripts/quadrant_stats.py attn.bin
"""

import json
import struct
import sys


def quadrant_means(values, n, is_mask):
    sums = {}
    counts = {}
    for q in range(n):
        for k in range(n):
            key = (is_mask[q], is_mask[k])
            sums[key] = sums.get(key, 0.0) + values[q * n + k]
            counts[key] = counts.get(key, 0) + 1

    def mean(qm, km):
        c = counts.get((qm, km), 0)
        return sums[(qm, km)] / c if c else 0.0

    return {
        "mask_to_mask": mean(True, True),
        "mask_to_decoded": mean(True, False),
        "decoded_to_mask": mean(False, True),
        "decoded_to_decoded": mean(False, False),
    }


def main(path):
    with open(path + ".json") as f:
        sidecar = json.load(f)
    with open(path, "rb") as f:
        raw = f.read()
    n = sidecar["size"]
    is_mask = [e["is_mask"] for e in sidecar["entries"]]
    for m in sidecar["matrices"]:
        start = m["offset_bytes"]
        values = struct.unpack_from("<%df" % (n * n), raw, start)
        out = {"layer": m["layer"], "head": m["head"]}
        out.update(quadrant_means(values, n, is_mask))
        print(json.dumps(out))


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit("usage: quadrant_stats.py DUMP")
    main(sys.argv[1])
