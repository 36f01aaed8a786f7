"""Cloud coordination layer: registry, aggregation, validation gate,
redistribution, and the two transports (in-process loopback, TCP).
"""
from __future__ import annotations

import json
import logging
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..continual import BundleScorer
from ..errors import CompatibilityError, FormatError, ProtocolError
from ..lora import AdapterBundle, LoraAdapter, read_adapter, serialize
from ..metrics import score
from ..model import Backbone, ClassificationHead
from ..nn import Parameter
from .protocol import ChecksumError, Message, MsgType, encode, parse_addr, read_message, write_message

log = logging.getLogger(__name__)

COORDINATOR_ID = 0


class AggregationError(ValueError):
    def __init__(self, reason: str, nodes=()):
        super().__init__(reason)
        self.reason = reason
        self.nodes = tuple(nodes)


@dataclass
class NodeInfo:
    fingerprint: int
    last_round: int = -1
    last_contact: int = 0


class NodeRegistry:
    """node id -> NodeInfo; contact times are a logical clock, not wall time."""

    def __init__(self, fingerprint: int):
        self.fingerprint = fingerprint
        self.nodes: dict[int, NodeInfo] = {}
        self._clock = 0

    def touch(self, node: int):
        self._clock += 1
        self.nodes[node].last_contact = self._clock

    def register(self, node: int, fingerprint: int) -> NodeInfo:
        if fingerprint != self.fingerprint:
            raise CompatibilityError("incompatible-backbone")
        info = self.nodes.setdefault(node, NodeInfo(fingerprint))
        self.touch(node)
        return info

    def __contains__(self, node):
        return node in self.nodes


@dataclass
class ValidationGate:
    tokens: np.ndarray
    labels: np.ndarray
    epsilon: float = 0.02


@dataclass
class Verdict:
    accepted: bool
    reason: str = ""
    before: float | None = None
    after: float | None = None


@dataclass
class SubmissionRecord:
    node: int
    round: int
    adapter_bytes: bytes
    metrics: dict = field(default_factory=dict)
    adapter: LoraAdapter | None = None
    status: str = "pending"


def split_submit_body(body: bytes) -> tuple[LoraAdapter, bytes, dict]:
    """SUBMIT body = adapter file bytes followed by a metrics JSON object."""
    adapter, end = read_adapter(body, 0)
    raw = body[end:]
    try:
        metrics = json.loads(raw.decode("utf-8")) if raw else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metrics trailer is not JSON: {exc}") from exc
    return adapter, bytes(body[:end]), metrics


def submit_body(adapter: LoraAdapter, metrics: dict | None = None) -> bytes:
    return serialize(adapter) + json.dumps(metrics or {}, sort_keys=True).encode("utf-8")


def average_adapters(adapters: Sequence[LoraAdapter], round_id: int) -> LoraAdapter:
    """Element-wise mean of A, B and head weights of adapters over one class set."""
    first = adapters[0]
    if len(adapters) == 1:
        return first
    entries = {}
    for key in first.entries:
        a = np.mean([ad.entries[key][0].value for ad in adapters], axis=0).astype(np.float32)
        b = np.mean([ad.entries[key][1].value for ad in adapters], axis=0).astype(np.float32)
        entries[key] = (Parameter(a, trainable=False), Parameter(b, trainable=False))
    w = np.mean([ad.head.weight.value for ad in adapters], axis=0).astype(np.float32)
    bias = np.mean([ad.head.bias.value for ad in adapters], axis=0).astype(np.float32)
    head = ClassificationHead(first.class_ids, Parameter(w, trainable=False), Parameter(bias, trainable=False))
    return LoraAdapter(round_id, first.class_ids, first.config, entries, head, first.fingerprint,
                       min(ad.source for ad in adapters))


def aggregate(submissions: Sequence[SubmissionRecord]) -> list[LoraAdapter]:
    """Union disjoint class sets, average identical ones, refuse partial overlaps.

    Output is ordered by the smallest submitting node id of each group.
    """
    if not submissions:
        raise AggregationError("no-submissions")
    groups: dict[tuple[int, ...], list[SubmissionRecord]] = {}
    for sub in sorted(submissions, key=lambda s: s.node):
        groups.setdefault(tuple(sub.adapter.class_ids), []).append(sub)
    keys = list(groups)
    for i, ka in enumerate(keys):
        for kb in keys[i + 1:]:
            if set(ka) & set(kb):
                nodes = [s.node for s in groups[ka] + groups[kb]]
                raise AggregationError("ambiguous-overlap", nodes)
        shapes = {tuple(sorted((k, a.shape, b.shape) for k, (a, b) in s.adapter.entries.items()))
                  for s in groups[ka]}
        ranks = {s.adapter.config for s in groups[ka]}
        if len(shapes) > 1 or len(ranks) > 1:
            raise AggregationError("ambiguous-overlap", [s.node for s in groups[ka]])
    out = []
    for key in keys:
        subs = groups[key]
        out.append(average_adapters([s.adapter for s in subs], subs[0].round))
    return out


def validate(candidate: LoraAdapter, gate: ValidationGate, backbone: Backbone,
             bundle: Sequence[LoraAdapter], scorer: BundleScorer | None = None) -> Verdict:
    """Accept iff holdout macro-F1 on already-known classes drops by at most epsilon."""
    known = sorted({c for a in bundle for c in a.class_ids})
    if not known:
        return Verdict(True, "first-round")
    rows = np.nonzero(np.isin(gate.labels, known))[0]
    if rows.size == 0:
        return Verdict(True, "no-holdout")
    scorer = scorer or BundleScorer(backbone, gate.tokens)
    y = gate.labels[rows]
    before = score(y, scorer.predict(list(bundle), rows), known).f1
    after = score(y, scorer.predict(list(bundle) + [candidate], rows), known).f1
    if before - after > gate.epsilon:
        return Verdict(False, "validation-drop", before, after)
    return Verdict(True, "ok", before, after)


def redistribute(bundle: AdapterBundle, registry: NodeRegistry, round_id: int) -> dict[int, Message]:
    """One BUNDLE message per registered node."""
    body = bundle.to_bytes()
    return {node: Message(MsgType.BUNDLE, COORDINATOR_ID, round_id, body) for node in sorted(registry.nodes)}


@dataclass
class RoundLog:
    round: int
    submissions: list[dict]
    accepted: list[int]


class Coordinator:
    """Protocol state machine, safe to drive from many threads.

    A round closes once ``expected_nodes`` distinct nodes have submitted for
    it (an empty SUBMIT body means "nothing new this round").
    """

    def __init__(self, backbone: Backbone, gate: ValidationGate | None, expected_nodes: int,
                 fetch_timeout: float = 600.0):
        self.backbone = backbone
        self.fingerprint = backbone.fingerprint()
        self.registry = NodeRegistry(self.fingerprint)
        self.gate = gate
        self.expected = expected_nodes
        self.fetch_timeout = fetch_timeout
        self.bundle = AdapterBundle(fingerprint=self.fingerprint)
        self.closed_round = -1
        self.pending: dict[int, dict[int, SubmissionRecord | None]] = {}
        self.history: list[RoundLog] = []
        self.deliveries: dict[int, int] = {}
        self._cond = threading.Condition()
        self._scorer = BundleScorer(backbone, gate.tokens) if gate is not None else None

    # -- message dispatch ------------------------------------------------------
    def handle(self, msg: Message) -> list[Message]:
        try:
            if msg.type == MsgType.HELLO:
                return self._hello(msg)
            if msg.node not in self.registry:
                return [self._reject(msg, "not-registered")]
            if msg.type == MsgType.SUBMIT:
                return [self._submit(msg)]
            if msg.type == MsgType.BUNDLE:
                return [self._fetch(msg)]
        except ProtocolError as exc:
            return [Message(MsgType.ERROR, COORDINATOR_ID, msg.round, str(exc).encode())]
        return [Message(MsgType.ERROR, COORDINATOR_ID, msg.round, b"unexpected-message")]

    def _reject(self, msg, reason: str) -> Message:
        return Message(MsgType.REJECT, COORDINATOR_ID, msg.round, reason.encode())

    def _hello(self, msg: Message) -> list[Message]:
        if len(msg.body) != 4:
            raise ProtocolError("HELLO body must be a 4-byte fingerprint")
        (fp,) = struct.unpack(">I", msg.body)
        with self._cond:
            try:
                self.registry.register(msg.node, fp)
            except CompatibilityError:
                return [self._reject(msg, "incompatible-backbone")]
            state = json.dumps({"closed_round": self.closed_round}, sort_keys=True).encode()
            bundle = Message(MsgType.BUNDLE, COORDINATOR_ID, max(self.closed_round, 0), self.bundle.to_bytes())
            self.deliveries[msg.node] = self.closed_round
        return [Message(MsgType.ACK, COORDINATOR_ID, msg.round, state), bundle]

    def _submit(self, msg: Message) -> Message:
        record = None
        if msg.body:
            try:
                adapter, raw, metrics = split_submit_body(msg.body)
            except FormatError as exc:
                reason = "bad-checksum" if "CRC" in str(exc) else "malformed-adapter"
                return self._reject(msg, reason)
            if adapter.fingerprint != self.fingerprint:
                return self._reject(msg, "incompatible-backbone")
            if adapter.round_id != msg.round:
                return self._reject(msg, "round-mismatch")
            adapter.source = msg.node
            record = SubmissionRecord(msg.node, msg.round, raw, metrics, adapter)
        with self._cond:
            if msg.round != self.closed_round + 1:
                return self._reject(msg, "round-closed" if msg.round <= self.closed_round else "round-not-open")
            slot = self.pending.setdefault(msg.round, {})
            if msg.node in slot:
                return self._reject(msg, "duplicate-submission")
            slot[msg.node] = record
            self.registry.touch(msg.node)
            self.registry.nodes[msg.node].last_round = msg.round
            if len(slot) >= self.expected:
                self._close_round(msg.round)
        return Message(MsgType.ACK, COORDINATOR_ID, msg.round, b"queued")

    def _close_round(self, round_id: int):
        """Aggregate, validate and extend the bundle. Caller holds the lock."""
        slot = self.pending.pop(round_id)
        subs = [s for _, s in sorted(slot.items()) if s is not None]
        accepted: list[int] = []
        live = list(subs)
        groups: list[LoraAdapter] = []
        while live:
            try:
                groups = aggregate(live)
                break
            except AggregationError as exc:
                for s in live:
                    if s.node in exc.nodes:
                        s.status = exc.reason
                live = [s for s in live if s.node not in exc.nodes]
        if groups:
            prior = list(self.bundle)
            verdicts = []
            for cand in groups:
                verdict = (validate(cand, self.gate, self.backbone, prior, self._scorer)
                           if self.gate is not None else Verdict(True, "no-gate"))
                verdicts.append((cand, verdict))
            for cand, verdict in verdicts:
                members = [s for s in subs if tuple(s.adapter.class_ids) == tuple(cand.class_ids)]
                for s in members:
                    s.status = "accepted" if verdict.accepted else verdict.reason
                if verdict.accepted:
                    self.bundle.append(cand)
                    accepted.extend(s.node for s in members)
                log.info("round %d classes %s: %s", round_id, cand.class_ids, verdict.reason)
        self.history.append(RoundLog(round_id, [
            {"node": n, "status": "skipped" if s is None else s.status} for n, s in sorted(slot.items())
        ], sorted(accepted)))
        self.closed_round = round_id
        self._cond.notify_all()

    def _fetch(self, msg: Message) -> Message:
        with self._cond:
            ok = self._cond.wait_for(lambda: self.closed_round >= msg.round, timeout=self.fetch_timeout)
            if not ok:
                return Message(MsgType.ERROR, COORDINATOR_ID, msg.round, b"round-timeout")
            self.deliveries[msg.node] = msg.round
            self.registry.touch(msg.node)
            body = self.bundle.to_bytes()
        return Message(MsgType.BUNDLE, COORDINATOR_ID, msg.round, body)

    def summary(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "closed_round": self.closed_round,
            "bundle": [{"round": a.round_id, "source": a.source, "classes": list(a.class_ids)}
                       for a in self.bundle],
            "rounds": [{"round": r.round, "submissions": r.submissions, "accepted": r.accepted}
                       for r in self.history],
        }


# --------------------------------------------------------------------------- #
# Transports
# --------------------------------------------------------------------------- #
class LoopbackTransport:
    """In-process transport; messages still travel as encoded frames."""

    def __init__(self, coordinator: Coordinator):
        self.coordinator = coordinator

    def request(self, msg: Message) -> list[Message]:
        from .protocol import decode
        wire = decode(encode(msg))
        return [decode(encode(r)) for r in self.coordinator.handle(wire)]

    def close(self):
        pass


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        coord: Coordinator = self.server.coordinator
        sock = self.request
        while True:
            try:
                msg = read_message(sock)
            except EOFError:
                return
            except ChecksumError:
                write_message(sock, Message(MsgType.REJECT, COORDINATOR_ID, 0, b"bad-checksum"))
                continue
            except (ProtocolError, OSError, struct.error) as exc:
                try:
                    write_message(sock, Message(MsgType.ERROR, COORDINATOR_ID, 0, str(exc).encode()))
                except OSError:
                    pass
                return
            for reply in coord.handle(msg):
                write_message(sock, reply)


class CoordinatorServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr: str, coordinator: Coordinator):
        self.coordinator = coordinator
        super().__init__(parse_addr(addr), _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def serve(addr: str, coordinator: Coordinator) -> CoordinatorServer:
    """Bind and start serving on a background thread; call ``shutdown()`` to stop."""
    server = CoordinatorServer(addr, coordinator)
    threading.Thread(target=server.serve_forever, name="coordinator", daemon=True).start()
    return server
