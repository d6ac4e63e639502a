#!/usr/bin/env python3
"""Compare the compiled frame codec against the pure-Python fallback.

The package selects the compiled `metaros._codec` at import when it is
built; this script measures both implementations side by side on the
same frames and checks they agree byte for byte.

    python3 benchmarks/codec_backends.py [--frames 200000] [--payload 256]
"""

import argparse
import random
import sys
import time

from metaros import envelope
from metaros.envelope import (
    Frame,
    FrameKind,
    PayloadType,
    decode_frame_py,
    encode_frame_py,
)


def bench(fn, args_list, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter_ns()
        for args in args_list:
            fn(args)
        elapsed = time.perf_counter_ns() - start
        best = min(best, elapsed / len(args_list))
    return best


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--frames", type=int, default=200_000)
    parser.add_argument("--payload", type=int, default=256)
    args = parser.parse_args()

    if envelope.CODEC_BACKEND != "cython":
        print("compiled codec not built; only the pure-Python path is available", file=sys.stderr)
        return 1

    from metaros import _codec

    rng = random.Random(1)
    frame = Frame(
        FrameKind.DATA, PayloadType.BYTES, 1, 123456789, time.time_ns(),
        "bench/data", bytes(rng.randrange(256) for _ in range(16)), bytes(args.payload),
    )
    encoded = envelope.encode_frame(frame)
    assert encode_frame_py(frame) == _codec.encode_frame(frame)
    assert decode_frame_py(encoded) == _codec.decode_frame(encoded)

    n = args.frames
    frames = [frame] * n
    blobs = [encoded] * n

    rows = [
        ("encode", "cython", bench(_codec.encode_frame, frames)),
        ("encode", "python", bench(encode_frame_py, frames)),
        ("decode", "cython", bench(_codec.decode_frame, blobs)),
        ("decode", "python", bench(decode_frame_py, blobs)),
    ]
    print(f"# frames={n} payload={args.payload}B topic=bench/data "
          f"frame_size={len(encoded)}B active_backend={envelope.CODEC_BACKEND}")
    print(f"{'op':<8}{'backend':<8}{'ns/frame':>10}{'frames/s':>14}")
    results = {}
    for op, backend, ns in rows:
        results[(op, backend)] = ns
        print(f"{op:<8}{backend:<8}{ns:>10.0f}{1e9 / ns:>14.0f}")
    for op in ("encode", "decode"):
        speedup = results[(op, "python")] / results[(op, "cython")]
        print(f"{op}: compiled is {speedup:.2f}x the pure-Python rate")
    return 0


if __name__ == "__main__":
    sys.exit(main())
