"""Cloud coordination layer and edge client."""
from .client import EdgeClient, SocketTransport
from .protocol import Message, MsgType, decode, encode
from .service import (
    AggregationError,
    Coordinator,
    CoordinatorServer,
    LoopbackTransport,
    NodeRegistry,
    SubmissionRecord,
    ValidationGate,
    Verdict,
    aggregate,
    average_adapters,
    redistribute,
    serve,
    validate,
)

__all__ = [
    "AggregationError", "Coordinator", "CoordinatorServer", "EdgeClient", "LoopbackTransport",
    "Message", "MsgType", "NodeRegistry", "SocketTransport", "SubmissionRecord", "ValidationGate",
    "Verdict", "aggregate", "average_adapters", "decode", "encode", "redistribute", "serve", "validate",
]
