#!/usr/bin/env python3
"""Bilingual test peer: republish every bilingual/ping/* frame on the
matching bilingual/pong/* topic, payload bytes verbatim."""

import sys

from metaros import Node, PayloadType, QosProfile, TopicSpec


def main() -> int:
    address = sys.argv[1]
    node = Node("py_echo", address)
    publishers = {}

    def on_frame(frame):
        key = (frame.topic, int(frame.payload_type))
        publisher = publishers.get(key)
        if publisher is None:
            out_topic = frame.topic.replace("bilingual/ping", "bilingual/pong", 1)
            spec = TopicSpec(out_topic, PayloadType(frame.payload_type),
                             QosProfile(history_depth=4096))
            publisher = publishers[key] = node.advertise(spec)
        publisher.publish_raw(frame.payload_type, frame.payload)

    node.subscribe_raw("bilingual/ping/*", on_frame, queue_depth=8192)
    print("READY", flush=True)
    try:
        node.spin()
    except KeyboardInterrupt:
        pass
    node.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
