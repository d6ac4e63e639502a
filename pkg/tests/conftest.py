from __future__ import annotations

import itertools
import random

import pytest

from metaros.broker import BrokerConfig, broker_serve
from metaros.envelope import (
    CORRELATED_KINDS,
    Frame,
    FrameKind,
    PayloadType,
    ZERO_CORRELATION,
)

_counter = itertools.count(1)


def unique_inproc() -> str:
    return f"inproc://test-{next(_counter)}"


@pytest.fixture
def inproc_broker():
    handle = broker_serve(unique_inproc(), BrokerConfig(heartbeat_interval=0.2))
    yield handle
    handle.close()


@pytest.fixture
def broker_address(inproc_broker):
    return str(inproc_broker.address)


def random_topic(rng: random.Random, max_len: int = 40) -> str:
    # any UTF-8 without NUL is a legal frame topic
    n = rng.randint(0, max_len)
    chars = []
    for _ in range(n):
        if rng.random() < 0.8:
            chars.append(chr(rng.randint(0x20, 0x7E)))
        else:
            chars.append(chr(rng.choice((0xE9, 0x3B1, 0x4E2D, 0x1F600))))
    return "".join(chars)


def random_frame(rng: random.Random, max_payload: int = 300) -> Frame:
    kind = rng.choice(list(FrameKind))
    payload_type = rng.choice(list(PayloadType))
    flags = rng.choice((0, 1, 2, 3))
    if kind in CORRELATED_KINDS:
        correlation = bytes(rng.randrange(256) for _ in range(16))
        if correlation == ZERO_CORRELATION:
            correlation = b"\x01" + correlation[1:]
    else:
        correlation = ZERO_CORRELATION if rng.random() < 0.5 else bytes(
            rng.randrange(256) for _ in range(16)
        )
    return Frame(
        kind,
        payload_type,
        flags,
        rng.randrange(2**64),
        rng.randrange(2**64),
        random_topic(rng),
        correlation,
        bytes(rng.randrange(256) for _ in range(rng.randint(0, max_payload))),
    )
