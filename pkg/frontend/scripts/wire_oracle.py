#!/usr/bin/env python3
"""Wire-parity oracle: decode each hex line with the reference codec and
print the canonical re-encoding (or ERR <class>) for comparison."""

import sys

from metaros.envelope import CodecError, decode_frame, encode_frame


def main() -> int:
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            frame = decode_frame(bytes.fromhex(line))
            print(encode_frame(frame).hex(), flush=True)
        except CodecError as exc:
            print(f"ERR {type(exc).__name__}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
