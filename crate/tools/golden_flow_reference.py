#!/usr/bin/env python3
"""Reference generator for the committed flow-encoding golden files.

Produces the expected PPM bytes for the seeded 4x4x2x2 flow tensor with a
straight-line implementation kept independent of the engine: build the
tensor from an integer hash (exact in both languages), take one (min, max)
jointly over u, v and magnitude across all frames, map affinely onto
0..255 with round-half-up, and emit P6 frames.

Run from the repository root:

    python3 tools/golden_flow_reference.py

writes crates/core/tests/golden/flow_4x4x2x2/frame0000.ppm, frame0001.ppm.
"""

import math
import os

H, W, T, C = 4, 4, 2, 2


def value(i, j, k, d):
    mixed = (i * 73856093) ^ (j * 19349663) ^ (k * 83492791) ^ (d * 2654435761)
    return (mixed % 1000) / 250.0 - 2.0


def main():
    u = [[[value(i, j, k, 0) for j in range(W)] for i in range(H)] for k in range(T)]
    v = [[[value(i, j, k, 1) for j in range(W)] for i in range(H)] for k in range(T)]
    mag = [
        [[math.sqrt(u[k][i][j] ** 2 + v[k][i][j] ** 2) for j in range(W)] for i in range(H)]
        for k in range(T)
    ]

    lo = math.inf
    hi = -math.inf
    for k in range(T):
        for i in range(H):
            for j in range(W):
                for val in (u[k][i][j], v[k][i][j], mag[k][i][j]):
                    lo = min(lo, val)
                    hi = max(hi, val)

    def byte(val):
        if hi <= lo:
            return 128
        scaled = (val - lo) / (hi - lo) * 255.0
        return int(min(255.0, max(0.0, math.floor(scaled + 0.5))))

    out_dir = os.path.join("crates", "core", "tests", "golden", "flow_4x4x2x2")
    os.makedirs(out_dir, exist_ok=True)
    for k in range(T):
        payload = bytearray()
        for i in range(H):
            for j in range(W):
                payload.append(byte(u[k][i][j]))
                payload.append(byte(v[k][i][j]))
                payload.append(byte(mag[k][i][j]))
        header = f"P6\n{W} {H}\n255\n".encode("ascii")
        path = os.path.join(out_dir, f"frame{k:04d}.ppm")
        with open(path, "wb") as fh:
            fh.write(header + bytes(payload))
        print(f"wrote {path} ({len(header) + len(payload)} bytes)")


if __name__ == "__main__":
    main()
