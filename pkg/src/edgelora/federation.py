"""Cross-device experiment: edge nodes with disjoint class domains learn
locally, exchange adapters through the coordinator, and are scored on the
other domains' classes before and after each exchange.
"""
from __future__ import annotations

import csv
import io
import json
import threading
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .continual import LocalLearner, TrainSpec, predict_batch
from .coordinator.client import EdgeClient
from .coordinator.service import Coordinator, LoopbackTransport, ValidationGate
from .dataset import PreparedDataset
from .errors import ConfigError
from .lora import AdapterBundle, LoraConfig
from .metrics import score


def device_schedules(rounds: Sequence[Sequence[str]], devices: int) -> list[list[tuple[str, ...]]]:
    """Deal scheduled rounds out round-robin: device k gets rounds k, k+N, ...

    Lists are padded with empty tuples to a common length (idle rounds).
    """
    if devices < 1:
        raise ConfigError("need at least one device")
    if devices > len(rounds):
        raise ConfigError(f"{devices} devices but only {len(rounds)} scheduled rounds")
    per = [[tuple(r) for r in rounds[k::devices]] for k in range(devices)]
    width = max(len(p) for p in per)
    return [p + [()] * (width - len(p)) for p in per]


@dataclass
class NodeRound:
    round: int
    node: int
    trained: list[int]
    submit: str
    own_f1: float | None
    cross_classes: list[int]
    cross_before: float | None
    cross_after: float | None
    bundle_size: int
    known_after: int

    def to_dict(self):
        return asdict(self)


@dataclass
class GlobalReport:
    devices: int
    rows: list[NodeRound]
    coordinator: dict = field(default_factory=dict)

    def node_rows(self, node: int) -> list[NodeRound]:
        return [r for r in self.rows if r.node == node]

    def to_dict(self):
        rows = sorted(self.rows, key=lambda r: (r.round, r.node))
        return {"devices": self.devices, "rows": [r.to_dict() for r in rows], "coordinator": self.coordinator}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "node", "own_f1", "cross_before", "cross_after", "bundle_size"])
        for r in sorted(self.rows, key=lambda r: (r.round, r.node)):
            w.writerow([r.round, r.node] + ["" if v is None else f"{v:.6f}"
                                            for v in (r.own_f1, r.cross_before, r.cross_after)]
                       + [r.bundle_size])
        return buf.getvalue()


def _accuracy(backbone, bundle, tokens, labels) -> float | None:
    if len(labels) == 0:
        return None
    if not len(bundle):
        return 0.0
    preds = predict_batch(backbone, bundle, tokens)[0]
    return float(np.mean(preds == labels))


def run_node(node_id: int, devices: int, data: PreparedDataset, spec: TrainSpec, backbone,
             lora: LoraConfig | None, transport, progress: Callable | None = None) -> list[NodeRound]:
    """Drive one edge node through every global round against ``transport``."""
    plans = device_schedules(data.schedule.rounds, devices)
    codec = data.codec
    encoded = [[tuple(codec.encode(n) for n in rnd) for rnd in plan] for plan in plans]
    backbone = backbone.copy().freeze()
    client = EdgeClient(node_id, backbone, transport)
    client.register()
    test_x, test_y = data.tokens(data.test), data.labels(data.test)
    learner = LocalLearner(backbone, (data.tokens(data.train), data.labels(data.train)),
                           (test_x, test_y), replace(spec, seed=spec.seed + node_id), lora)
    rows = []
    for g, classes in enumerate(encoded[node_id]):
        adapter, own_f1 = None, None
        if classes:
            rep = learner.step(g, classes)
            adapter = learner.bundle.adapters[-1]
            own_f1 = rep.final.f1
        metrics = {} if adapter is None else {"f1": own_f1, "classes": list(adapter.class_ids)}
        reply = client.submit(g, adapter, metrics)
        others = sorted({c for k, plan in enumerate(encoded) if k != node_id
                         for rnd in plan[:g + 1] for c in rnd})
        rows_x = np.nonzero(np.isin(test_y, others))[0]
        view = AdapterBundle(list(client.bundle) + ([adapter] if adapter is not None else []))
        before = _accuracy(backbone, view, test_x[rows_x], test_y[rows_x])
        bundle = client.fetch_bundle(g)
        client.apply(bundle)
        after = _accuracy(backbone, client.bundle, test_x[rows_x], test_y[rows_x])
        row = NodeRound(g, node_id, list(classes), reply.text() if reply.body else reply.type.name,
                        own_f1, others, before, after, len(client.bundle),
                        len(client.bundle.known_classes()))
        rows.append(row)
        if progress:
            progress(row)
    return rows


def holdout_gate(data: PreparedDataset, epsilon: float) -> ValidationGate:
    return ValidationGate(data.tokens(data.holdout), data.labels(data.holdout), epsilon)


def run_global(data: PreparedDataset, spec: TrainSpec, backbone, lora: LoraConfig | None = None,
               devices: int = 2, epsilon: float = 0.02, progress: Callable | None = None):
    """All nodes in-process on their own threads over the loopback transport.

    Returns (GlobalReport, Coordinator).
    """
    if spec.mode != "lora":
        raise ConfigError("the cross-device experiment exchanges adapters; mode must be lora")
    coordinator = Coordinator(backbone, holdout_gate(data, epsilon), devices)
    results: dict[int, list[NodeRound]] = {}
    errors: list[BaseException] = []

    def work(k):
        try:
            results[k] = run_node(k, devices, data, spec, backbone, lora, LoopbackTransport(coordinator),
                                  progress)
        except BaseException as exc:  # re-raised on the calling thread
            errors.append(exc)
            with coordinator._cond:
                coordinator.fetch_timeout = 0.0
                coordinator._cond.notify_all()

    threads = [threading.Thread(target=work, args=(k,), name=f"edge-{k}") for k in range(devices)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    rows = [r for k in sorted(results) for r in results[k]]
    return GlobalReport(devices, rows, coordinator.summary()), coordinator


def cross_device_summary(report: GlobalReport, n_classes: int) -> list[dict]:
    """First-exchange before/after accuracy on other domains, per node."""
    out = []
    for node in range(report.devices):
        first = next((r for r in report.node_rows(node) if r.cross_classes), None)
        if first is None:
            continue
        out.append({"node": node, "round": first.round, "before": first.cross_before,
                    "after": first.cross_after, "chance": 1.0 / max(first.known_after, 1)})
    return out


__all__ = ["GlobalReport", "NodeRound", "device_schedules", "run_global", "run_node",
           "cross_device_summary", "holdout_gate"]
