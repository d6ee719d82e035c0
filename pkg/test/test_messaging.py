#!/usr/bin/env python3
"""
Tests for addresses, the frame codec, bounded queues and the TCP transport
"""

import random
import threading

import pytest

from messaging import (
    MAX_BODY_BYTES,
    DropPolicy,
    Envelope,
    LiveTransport,
    MessageQueue,
    NetworkAddress,
    SendReceipt,
    SendStatus,
    decode_frame,
    encode_frame,
    split_frame,
)
from peerbed_errors import AddressError, BackpressureError, FrameError


def test_address_parse_and_format():
    address = NetworkAddress.parse("127.0.0.1:7001")
    assert address.host == "127.0.0.1"
    assert address.port == 7001
    assert str(address) == "127.0.0.1:7001"
    assert not address.is_simulated


def test_simulated_address_allows_large_peer_ids():
    address = NetworkAddress.for_peer(4000123)
    assert address.is_simulated
    assert str(address) == "sim:4000123"


@pytest.mark.parametrize("text", ["no-port", ":80", "host:", "host:abc"])
def test_address_parse_rejects_malformed(text):
    with pytest.raises(AddressError):
        NetworkAddress.parse(text)


def test_address_rejects_out_of_range_port():
    with pytest.raises(AddressError):
        NetworkAddress("127.0.0.1", 70000)


def test_frame_decodes_to_same_envelope():
    env = Envelope(202, "sim:1001", "sim:1000", 7, b"\x00payload\xff")
    assert decode_frame(encode_frame(env)) == env


def test_decode_frame_requires_exactly_one_frame():
    frame = encode_frame(Envelope(1, "a:1", "b:2", 0, b"x"))
    with pytest.raises(FrameError):
        decode_frame(frame[:-1])
    with pytest.raises(FrameError):
        decode_frame(frame + b"\x00")


def test_split_frame_waits_for_complete_frames():
    first = Envelope(5, "a:1", "b:2", 1, b"one")
    second = Envelope(6, "a:1", "b:2", 2, b"two")
    stream = encode_frame(first) + encode_frame(second)
    buffer = bytearray(stream[:5])
    assert split_frame(buffer) is None
    buffer.extend(stream[5:])
    assert split_frame(buffer) == first
    assert split_frame(buffer) == second
    assert split_frame(buffer) is None
    assert len(buffer) == 0


def test_oversize_body_rejected():
    with pytest.raises(FrameError):
        encode_frame(Envelope(1, "a:1", "b:2", 0, bytes(MAX_BODY_BYTES + 1)))


def test_msg_type_out_of_range_rejected():
    with pytest.raises(FrameError):
        encode_frame(Envelope(70000, "a:1", "b:2", 0))


def test_truncated_header_rejected():
    with pytest.raises(FrameError):
        decode_frame(b"\x00\x00\x00\x02\x00\x01")


def test_drop_newest_counts_drops():
    queue = MessageQueue(capacity=2, drop_policy=DropPolicy.DROP_NEWEST)
    envs = [Envelope(1, "a:1", "b:2", i) for i in range(3)]
    assert queue.put(envs[0])
    assert queue.put(envs[1])
    assert not queue.put(envs[2])
    assert queue.dropped == 1
    assert len(queue) == 2
    assert queue.get_nowait() == envs[0]


def test_block_sender_without_wait_raises():
    queue = MessageQueue(capacity=1)
    queue.put(Envelope(1, "a:1", "b:2", 0))
    with pytest.raises(BackpressureError):
        queue.put(Envelope(1, "a:1", "b:2", 1), timeout=0)


def test_queue_capacity_must_be_positive():
    with pytest.raises(ValueError):
        MessageQueue(capacity=0)


def test_queue_clear_reports_count():
    queue = MessageQueue(capacity=5)
    for i in range(3):
        queue.put(Envelope(1, "a:1", "b:2", i))
    assert queue.clear() == 3
    assert queue.get_nowait() is None


def test_receipt_settles():
    receipt = SendReceipt(Envelope(1, "a:1", "b:2", 0))
    assert receipt.status is SendStatus.QUEUED
    receipt.settle(SendStatus.DROPPED)
    assert receipt.wait(0) is SendStatus.DROPPED
    assert receipt.dropped
    assert not receipt.failed


@pytest.mark.live
def test_tcp_transport_delivers_in_order():
    transport = LiveTransport(connect_attempts=2, backoff_ms=10)
    received = []
    done = threading.Event()

    def on_envelope(env):
        received.append(env)
        if len(received) == 3:
            done.set()

    address, listener = transport.listen("127.0.0.1", 0, on_envelope, "test")
    outbound = MessageQueue(capacity=10)
    results = []
    sender = transport.start_sender(outbound, lambda env, ok: results.append(ok), "test")
    try:
        envs = [Envelope(200 + i, "127.0.0.1:1", str(address), i, f"m{i}".encode()) for i in range(3)]
        for env in envs:
            outbound.put(env)
        assert done.wait(5.0)
        assert received == envs
    finally:
        sender.close()
        listener.close()
    assert results == [True, True, True]


@pytest.mark.live
def test_tcp_transport_gives_up_on_closed_port():
    transport = LiveTransport(connect_attempts=2, backoff_ms=10, connect_timeout_s=0.5)
    address, listener = transport.listen("127.0.0.1", 0, lambda env: None, "closed")
    listener.close()
    outbound = MessageQueue(capacity=2)
    results = []
    settled = threading.Event()

    def on_result(env, ok):
        results.append(ok)
        settled.set()

    sender = transport.start_sender(outbound, on_result, "test")
    try:
        outbound.put(Envelope(1, "127.0.0.1:1", str(address), 0))
        assert settled.wait(5.0)
    finally:
        sender.close()
    assert results == [False]


def test_empty_envelope_frame_is_bit_exact():
    frame = encode_frame(Envelope(0, "", "", 0))
    assert frame == bytes.fromhex("0000000e") + bytes(14)
    assert decode_frame(frame) == Envelope(0, "", "", 0)


def _random_address(rng):
    alphabet = "abcxyz0123456789:.-_é☃"
    return "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 24)))


def test_randomized_envelopes_survive_the_codec():
    rng = random.Random(20240611)
    for _ in range(10_000):
        env = Envelope(
            rng.randrange(0, 0x10000),
            _random_address(rng),
            _random_address(rng),
            rng.randrange(0, 2 ** 64),
            bytes(rng.getrandbits(8) for _ in range(rng.randrange(0, 48))),
        )
        assert decode_frame(encode_frame(env)) == env
