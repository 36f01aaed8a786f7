import socket
import struct
import threading

import numpy as np
import pytest

from edgelora.continual import predict_batch
from edgelora.coordinator.client import EdgeClient, SocketTransport
from edgelora.coordinator.protocol import Message, MsgType, encode, read_message, write_message
from edgelora.coordinator.service import (
    AggregationError,
    Coordinator,
    LoopbackTransport,
    SubmissionRecord,
    ValidationGate,
    aggregate,
    average_adapters,
    serve,
    submit_body,
    validate,
)
from edgelora.errors import CompatibilityError
from edgelora.lora import AdapterBundle, LoraConfig, init_adapter, serialize
from edgelora.model import Backbone, attach_head, forward

from conftest import random_tokens, trained_like_adapter


@pytest.fixture
def frozen(tiny_backbone):
    return tiny_backbone.freeze()


def hello(node, fp):
    return Message(MsgType.HELLO, node, 0, struct.pack(">I", fp))


def record(node, adapter):
    return SubmissionRecord(node, adapter.round_id, serialize(adapter), {}, adapter)


# --- registration -----------------------------------------------------------
def test_hello_acks_and_sends_catch_up_bundle(frozen):
    coord = Coordinator(frozen, None, expected_nodes=1)
    replies = coord.handle(hello(4, frozen.fingerprint()))
    assert [r.type for r in replies] == [MsgType.ACK, MsgType.BUNDLE]
    assert len(AdapterBundle.from_bytes(replies[1].body)) == 0


def test_wrong_fingerprint_is_incompatible(frozen):
    coord = Coordinator(frozen, None, expected_nodes=1)
    (reply,) = coord.handle(hello(4, frozen.fingerprint() ^ 1))
    assert reply.type == MsgType.REJECT and reply.body == b"incompatible-backbone"
    (reply,) = coord.handle(Message(MsgType.SUBMIT, 4, 0, b""))
    assert reply.body == b"not-registered"


def test_client_raises_on_foreign_backbone(frozen, tiny_backbone):
    other = Backbone.init(tiny_backbone.config.__class__(**{**tiny_backbone.config.__dict__, "seed": 9}))
    client = EdgeClient(1, other, LoopbackTransport(Coordinator(frozen, None, 1)))
    with pytest.raises(CompatibilityError):
        client.register()


# --- submission checks ------------------------------------------------------
def test_submission_rejections(frozen):
    coord = Coordinator(frozen, None, expected_nodes=2)
    coord.handle(hello(1, frozen.fingerprint()))
    good = trained_like_adapter(frozen, 0, (0, 1), 1)
    body = bytearray(submit_body(good))
    body[40] ^= 0x10
    assert coord.handle(Message(MsgType.SUBMIT, 1, 0, bytes(body)))[0].body == b"bad-checksum"
    assert coord.handle(Message(MsgType.SUBMIT, 1, 0, b"LADPxx"))[0].body == b"malformed-adapter"
    assert coord.handle(Message(MsgType.SUBMIT, 1, 1, submit_body(good)))[0].body == b"round-mismatch"
    foreign = good.copy()
    foreign.fingerprint ^= 3
    assert coord.handle(Message(MsgType.SUBMIT, 1, 0, submit_body(foreign)))[0].body == b"incompatible-backbone"
    assert coord.handle(Message(MsgType.SUBMIT, 1, 0, submit_body(good)))[0].type == MsgType.ACK
    assert coord.handle(Message(MsgType.SUBMIT, 1, 0, submit_body(good)))[0].body == b"duplicate-submission"
    late = trained_like_adapter(frozen, 1, (0, 1), 1)
    assert coord.handle(Message(MsgType.SUBMIT, 1, 1, submit_body(late)))[0].body == b"round-not-open"


# --- aggregation ------------------------------------------------------------
def test_disjoint_nodes_are_unioned(frozen):
    a = trained_like_adapter(frozen, 0, (0, 1), 1)
    b = trained_like_adapter(frozen, 0, (2, 3), 2)
    out = aggregate([record(5, b), record(2, a)])
    assert [x.class_ids for x in out] == [(0, 1), (2, 3)]
    assert [serialize(x) for x in out] == [serialize(a), serialize(b)]


def test_identical_adapters_average_to_themselves(frozen):
    a = trained_like_adapter(frozen, 0, (0, 1), 1)
    (avg,) = aggregate([record(1, a), record(2, a.copy())])
    assert serialize(avg) == serialize(a)


def test_mean_of_factors_is_not_mean_of_products():
    # one reason averaging needs identical class sets and ranks, not a blind merge
    b1, a1 = np.array([[1.0]]), np.array([[1.0]])
    b2, a2 = np.array([[0.0]]), np.array([[2.0]])
    assert ((b1 + b2) / 2 @ ((a1 + a2) / 2)).item() == 0.75
    assert ((b1 @ a1 + b2 @ a2) / 2).item() == 0.5


def test_average_is_elementwise(frozen):
    a = trained_like_adapter(frozen, 0, (0, 1), 1)
    b = trained_like_adapter(frozen, 0, (0, 1), 2)
    avg = average_adapters([a, b], 0)
    key = next(iter(a.entries))
    np.testing.assert_allclose(avg.entries[key][1].value, (a.entries[key][1].value + b.entries[key][1].value) / 2,
                               rtol=1e-6)


def test_partial_overlap_is_ambiguous(frozen):
    a = trained_like_adapter(frozen, 0, (0, 1), 1)
    b = trained_like_adapter(frozen, 0, (1, 2), 2)
    with pytest.raises(AggregationError) as info:
        aggregate([record(1, a), record(2, b)])
    assert info.value.reason == "ambiguous-overlap" and set(info.value.nodes) == {1, 2}


def test_rank_mismatch_on_same_classes_is_ambiguous(frozen):
    a = trained_like_adapter(frozen, 0, (0, 1), 1, rank=4)
    b = trained_like_adapter(frozen, 0, (0, 1), 2, rank=2)
    with pytest.raises(AggregationError):
        aggregate([record(1, a), record(2, b)])


def test_overlapping_round_keeps_other_groups(frozen):
    coord = Coordinator(frozen, None, expected_nodes=3)
    for n in (1, 2, 3):
        coord.handle(hello(n, frozen.fingerprint()))
    for n, classes in ((1, (0, 1)), (2, (1, 2)), (3, (4, 5))):
        coord.handle(Message(MsgType.SUBMIT, n, 0, submit_body(trained_like_adapter(frozen, 0, classes, n))))
    assert [a.class_ids for a in coord.bundle] == [(4, 5)]
    statuses = {s["node"]: s["status"] for s in coord.summary()["rounds"][0]["submissions"]}
    assert statuses == {1: "ambiguous-overlap", 2: "ambiguous-overlap", 3: "accepted"}


# --- validation gate --------------------------------------------------------
def _gate_setup(frozen):
    base = trained_like_adapter(frozen, 0, (0, 1), 1)
    tokens = random_tokens(np.random.default_rng(5), 60, frozen.config)
    # centre the decision boundary so both classes occur in the labels
    logits = forward(frozen, base, base.head, tokens)
    base.head.bias.value[0] -= np.median(logits[:, 0] - logits[:, 1])
    labels = predict_batch(frozen, [base], tokens)[0]
    inverted = base.copy()
    inverted.round_id = 1
    inverted.head.weight.value *= -1
    inverted.head.bias.value *= -1
    return base, tokens, labels, inverted


def test_zero_adapter_passes_gate(frozen):
    base, tokens, labels, _ = _gate_setup(frozen)
    fresh = init_adapter(LoraConfig(rank=4), frozen, 1, (2,), 0, head=attach_head((2,), 16, 0)).freeze()
    verdict = validate(fresh, ValidationGate(tokens, labels), frozen, [base])
    assert verdict.accepted and verdict.before == 1.0


def test_label_inverting_adapter_is_rejected(frozen):
    base, tokens, labels, inverted = _gate_setup(frozen)
    verdict = validate(inverted, ValidationGate(tokens, labels, 0.02), frozen, [base])
    assert not verdict.accepted and verdict.reason == "validation-drop"
    assert verdict.after < verdict.before - 0.02


def test_epsilon_one_accepts_everything(frozen):
    base, tokens, labels, inverted = _gate_setup(frozen)
    assert validate(inverted, ValidationGate(tokens, labels, 1.0), frozen, [base]).accepted


def test_first_round_needs_no_holdout(frozen):
    base, tokens, labels, _ = _gate_setup(frozen)
    assert validate(base, ValidationGate(tokens, labels), frozen, []).reason == "first-round"


# --- clients ----------------------------------------------------------------
def test_two_nodes_receive_byte_equal_bundles_and_late_joiner_catches_up(frozen):
    coord = Coordinator(frozen, None, expected_nodes=2)
    clients = [EdgeClient(n, frozen, LoopbackTransport(coord)) for n in (1, 2)]
    for c in clients:
        c.register()
    a = trained_like_adapter(frozen, 0, (0, 1), 1)
    b = trained_like_adapter(frozen, 0, (2,), 2)
    assert clients[0].submit(0, a).type == MsgType.ACK
    assert clients[1].submit(0, b).type == MsgType.ACK
    got = [c.fetch_bundle(0).to_bytes() for c in clients]
    assert got[0] == got[1] == AdapterBundle([a, b]).to_bytes()

    late = EdgeClient(9, frozen, LoopbackTransport(coord))
    assert late.register().to_bytes() == got[0]
    assert set(late.bundle.known_classes()) == {0, 1, 2}


def test_idle_submit_closes_round_without_adapter(frozen):
    coord = Coordinator(frozen, None, expected_nodes=2)
    c1, c2 = (EdgeClient(n, frozen, LoopbackTransport(coord)) for n in (1, 2))
    c1.register(), c2.register()
    c1.submit(0, trained_like_adapter(frozen, 0, (3,), 1))
    c2.submit(0, None)
    assert [a.class_ids for a in c2.fetch_bundle(0)] == [(3,)]
    assert coord.summary()["rounds"][0]["submissions"][1]["status"] == "skipped"
    assert c1.submit(0, None).body == b"round-closed"


def test_apply_empty_bundle_is_noop_and_foreign_is_atomic(frozen):
    client = EdgeClient(1, frozen, LoopbackTransport(Coordinator(frozen, None, 1)))
    good = AdapterBundle([trained_like_adapter(frozen, 0, (0, 1), 1)])
    client.apply(good)
    client.apply(AdapterBundle())
    assert client.bundle is good
    foreign = trained_like_adapter(frozen, 1, (2,), 2)
    foreign.fingerprint ^= 1
    with pytest.raises(CompatibilityError):
        client.apply(AdapterBundle([trained_like_adapter(frozen, 1, (0,), 3), foreign]))
    assert client.bundle is good


# --- TCP transport ----------------------------------------------------------
@pytest.fixture
def server(frozen):
    srv = serve("127.0.0.1:0", Coordinator(frozen, None, expected_nodes=1))
    yield srv
    srv.shutdown()
    srv.server_close()


def test_socket_round_matches_loopback(frozen, server):
    adapter = trained_like_adapter(frozen, 0, (0, 1), 1)
    remote = EdgeClient(1, frozen, SocketTransport(server.address))
    remote.register()
    remote.submit(0, adapter)
    over_tcp = remote.fetch_bundle(0).to_bytes()
    remote.transport.close()

    local = EdgeClient(1, frozen, LoopbackTransport(Coordinator(frozen, None, 1)))
    local.register()
    local.submit(0, adapter)
    assert over_tcp == local.fetch_bundle(0).to_bytes()


def test_corrupt_frame_gets_reject_and_connection_survives(frozen, server):
    host, port = server.address.split(":")
    with socket.create_connection((host, int(port)), timeout=5) as sock:
        frame = bytearray(encode(hello(1, frozen.fingerprint())))
        frame[-1] ^= 0x01
        sock.sendall(bytes(frame))
        reply = read_message(sock)
        assert reply.type == MsgType.REJECT and reply.body == b"bad-checksum"
        write_message(sock, hello(1, frozen.fingerprint()))
        assert read_message(sock).type == MsgType.ACK


def test_malformed_frame_gets_error_and_close(server):
    host, port = server.address.split(":")
    with socket.create_connection((host, int(port)), timeout=5) as sock:
        sock.sendall(struct.pack(">I", 8) + b"JUNKJUNK")
        assert read_message(sock).type == MsgType.ERROR
        assert sock.recv(1) == b""


def test_fetch_blocks_until_round_closes(frozen):
    coord = Coordinator(frozen, None, expected_nodes=2)
    c1, c2 = (EdgeClient(n, frozen, LoopbackTransport(coord)) for n in (1, 2))
    c1.register(), c2.register()
    c1.submit(0, None)
    out = {}
    t = threading.Thread(target=lambda: out.setdefault("b", c1.fetch_bundle(0)))
    t.start()
    t.join(0.2)
    assert t.is_alive()
    c2.submit(0, trained_like_adapter(frozen, 0, (1,), 2))
    t.join(5)
    assert [a.class_ids for a in out["b"]] == [(1,)]


def test_fetch_times_out(frozen):
    coord = Coordinator(frozen, None, expected_nodes=2, fetch_timeout=0.05)
    client = EdgeClient(1, frozen, LoopbackTransport(coord))
    client.register()
    (reply,) = coord.handle(Message(MsgType.BUNDLE, 1, 0))
    assert reply.type == MsgType.ERROR and reply.body == b"round-timeout"
