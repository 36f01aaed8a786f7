"""Edge-node side of the protocol."""
from __future__ import annotations

import socket
import struct
import threading

import numpy as np

from ..continual import predict_batch
from ..errors import CompatibilityError, ConnectionFailed, ProtocolError
from ..lora import AdapterBundle, LoraAdapter
from ..model import Backbone
from .protocol import Message, MsgType, parse_addr, read_message, write_message
from .service import submit_body


class SocketTransport:
    """One persistent TCP connection to the coordinator."""

    def __init__(self, addr: str, timeout: float | None = 900.0, retries: int = 0, retry_delay: float = 0.2):
        host, port = parse_addr(addr)
        last = None
        for attempt in range(retries + 1):
            try:
                self.sock = socket.create_connection((host, port), timeout=timeout)
                break
            except OSError as exc:
                last = exc
                if attempt < retries:
                    threading.Event().wait(retry_delay)
        else:
            raise ConnectionFailed(f"cannot reach coordinator at {addr}: {last}")
        self._lock = threading.Lock()

    def request(self, msg: Message) -> list[Message]:
        with self._lock:
            try:
                write_message(self.sock, msg)
                first = read_message(self.sock)
                replies = [first]
                if msg.type == MsgType.HELLO and first.type == MsgType.ACK:
                    replies.append(read_message(self.sock))
            except (OSError, EOFError) as exc:
                raise ConnectionFailed(f"coordinator connection lost: {exc}") from exc
        return replies

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


class EdgeClient:
    """register / submit / fetch_bundle / apply, with an atomically swapped bundle."""

    def __init__(self, node_id: int, backbone: Backbone, transport):
        self.node_id = node_id
        self.backbone = backbone
        self.fingerprint = backbone.fingerprint()
        self.transport = transport
        self._bundle = AdapterBundle(fingerprint=self.fingerprint)
        self._lock = threading.Lock()

    @property
    def bundle(self) -> AdapterBundle:
        return self._bundle

    def _expect(self, replies: list[Message], kind: MsgType) -> Message:
        reply = replies[0]
        if reply.type == MsgType.REJECT and reply.text() == "incompatible-backbone":
            raise CompatibilityError("coordinator rejected this node's backbone fingerprint")
        if reply.type == MsgType.ERROR:
            raise ProtocolError(f"coordinator error: {reply.text()}")
        if reply.type != kind:
            raise ProtocolError(f"expected {kind.name}, got {reply.type.name} {reply.text()!r}")
        return reply

    def register(self) -> AdapterBundle:
        """HELLO; installs and returns the catch-up bundle."""
        hello = Message(MsgType.HELLO, self.node_id, 0, struct.pack(">I", self.fingerprint))
        replies = self.transport.request(hello)
        self._expect(replies, MsgType.ACK)
        if len(replies) < 2 or replies[1].type != MsgType.BUNDLE:
            raise ProtocolError("HELLO was not followed by a catch-up bundle")
        bundle = AdapterBundle.from_bytes(replies[1].body)
        self.apply(bundle)
        return bundle

    def submit(self, round_id: int, adapter: LoraAdapter | None, metrics: dict | None = None) -> Message:
        """Returns the ACK or REJECT reply; ``adapter=None`` declares an idle round."""
        body = b"" if adapter is None else submit_body(adapter, metrics)
        reply = self.transport.request(Message(MsgType.SUBMIT, self.node_id, round_id, body))[0]
        if reply.type not in (MsgType.ACK, MsgType.REJECT):
            self._expect([reply], MsgType.ACK)
        return reply

    def fetch_bundle(self, round_id: int) -> AdapterBundle:
        """Block until ``round_id`` closes and return the coordinator's bundle."""
        reply = self._expect(self.transport.request(Message(MsgType.BUNDLE, self.node_id, round_id)),
                             MsgType.BUNDLE)
        return AdapterBundle.from_bytes(reply.body)

    def apply(self, bundle: AdapterBundle):
        """Swap in ``bundle``; readers see either the old or the new one. Empty is a no-op."""
        if not len(bundle):
            return
        for a in bundle:
            if a.fingerprint != self.fingerprint:
                raise CompatibilityError(f"bundle adapter round {a.round_id} targets another backbone")
        with self._lock:
            self._bundle = bundle

    def predict(self, tokens: np.ndarray) -> np.ndarray:
        snapshot = self._bundle
        return predict_batch(self.backbone, snapshot, tokens)[0]
