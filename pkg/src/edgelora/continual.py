"""Round engine: per-round training (full fine-tune or LoRA-only), multi-round
inference by z-scored logit aggregation, forgetting checks and the
multi-round experiment driver.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import PAD_ID, PreparedDataset
from .errors import ConfigError, ConsistencyError, DataError, StateError
from .lora import AdapterBundle, LoraAdapter, LoraConfig, init_adapter
from .metrics import MetricsReport, score
from .model import Backbone, BackboneConfig, ClassificationHead, Classifier, extend_head
from .nn import AdamW, cross_entropy

log = logging.getLogger(__name__)

MODES = ("lora", "full")
CHECKPOINT_EPOCHS = (1, 2, 5, 10, 15)


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 15
    lr: float = 2e-5
    batch_size: int = 16
    mode: str = "lora"
    seed: int = 0
    weight_decay: float = 0.01
    eval_epochs: tuple[int, ...] = CHECKPOINT_EPOCHS
    freeze_inherited: bool = False
    rehearsal: float = 0.0
    # Start each LoRA round from the previous round's factors instead of B = 0.
    warm_start: bool = True

    def __post_init__(self):
        if self.epochs < 4:
            raise ConfigError(f"epochs must be >= 4, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.rehearsal <= 1.0:
            raise ConfigError("rehearsal fraction must lie in [0, 1]")


@dataclass
class RoundState:
    round_id: int = -1
    known: tuple[int, ...] = ()
    bundle: AdapterBundle = field(default_factory=AdapterBundle)
    head: ClassificationHead | None = None

    def advance(self, round_id: int, new_classes: Sequence[int]) -> tuple[int, ...]:
        if round_id <= self.round_id:
            raise StateError(f"round {round_id} does not follow round {self.round_id}")
        known = tuple(sorted(set(self.known) | {int(c) for c in new_classes}))
        if len(known) <= len(self.known):
            raise StateError(f"round {round_id} adds no new classes")
        return known


@dataclass
class RoundData:
    round_id: int
    classes: tuple[int, ...]
    tokens: np.ndarray
    labels: np.ndarray


@dataclass
class EpochMetrics:
    round_id: int
    epoch: int
    loss: float
    metrics: MetricsReport

    def row(self):
        m = self.metrics
        return [self.round_id, self.epoch, self.loss, m.accuracy, m.precision, m.recall, m.f1]


@dataclass
class RoundResult:
    adapter: LoraAdapter | None
    backbone: Backbone
    head: ClassificationHead
    known: tuple[int, ...]
    epochs: list[EpochMetrics]


@dataclass
class ForgettingReport:
    round_id: int
    entries: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def max_drop(self) -> float:
        return max((before - after for _, before, after in self.entries), default=0.0)

    def to_dict(self):
        return {"round": self.round_id,
                "entries": [{"round": r, "before": b, "after": a} for r, b, a in self.entries]}


# --------------------------------------------------------------------------- #
# Inference
# --------------------------------------------------------------------------- #
def trim(tokens: np.ndarray) -> np.ndarray:
    """Drop trailing all-pad columns (keeps at least the CLS position)."""
    used = np.nonzero((tokens != PAD_ID).any(axis=0))[0]
    width = int(used[-1]) + 1 if used.size else 1
    return tokens[:, :width]


def logits_of(model: Classifier, tokens: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = [model.forward(trim(tokens[i:i + chunk])) for i in range(0, len(tokens), chunk)]
    if not out:
        return np.zeros((0, model.head.n_classes))
    return np.concatenate(out).astype(np.float64)


def z_normalize(logits: np.ndarray) -> np.ndarray:
    """Per-row z-score with population std; zero-variance rows become all zeros."""
    logits = np.asarray(logits, dtype=np.float64)
    mean = logits.mean(axis=-1, keepdims=True)
    std = logits.std(axis=-1, keepdims=True)
    # Constant rows are detected exactly; their computed std can be a rounding residue.
    varied = (logits.max(axis=-1, keepdims=True) > logits.min(axis=-1, keepdims=True)) & (std > 0)
    safe = np.where(varied, std, 1.0)
    return np.where(varied, (logits - mean) / safe, 0.0)


def unify(scored: Sequence[tuple[Sequence[int], np.ndarray]], n_classes: int | None = None) -> np.ndarray:
    """Write each adapter's normalized scores into one (N, n_classes) array in order.

    Later entries overwrite earlier ones for shared classes; classes nobody
    covers stay at -inf.
    """
    if not scored:
        raise StateError("cannot aggregate an empty bundle")
    top = max(max(ids) for ids, _ in scored) + 1
    n_classes = top if n_classes is None else max(n_classes, top)
    n = scored[0][1].shape[0]
    unified = np.full((n, n_classes), -np.inf)
    for ids, z in scored:
        unified[:, list(ids)] = z
    return unified


def argmax_lowest(unified: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class id on ties.
    return np.argmax(unified, axis=-1)


class BundleScorer:
    """Caches each adapter's normalized scores on one fixed token matrix."""

    def __init__(self, backbone: Backbone, tokens: np.ndarray):
        self.backbone = backbone
        self.tokens = tokens
        self._cache: dict[int, tuple[LoraAdapter, np.ndarray]] = {}

    def scores(self, adapter: LoraAdapter) -> np.ndarray:
        hit = self._cache.get(id(adapter))
        if hit is None or hit[0] is not adapter:
            model = Classifier(self.backbone, adapter.head, adapter)
            hit = (adapter, z_normalize(logits_of(model, self.tokens)))
            self._cache[id(adapter)] = hit
        return hit[1]

    def unified(self, adapters: Sequence[LoraAdapter], rows=None) -> np.ndarray:
        scored = []
        for a in adapters:
            z = self.scores(a)
            scored.append((a.class_ids, z if rows is None else z[rows]))
        return unify(scored)

    def predict(self, adapters: Sequence[LoraAdapter], rows=None) -> np.ndarray:
        return argmax_lowest(self.unified(adapters, rows))


def _check_bundle(bundle, backbone: Backbone):
    adapters = list(bundle)
    if not adapters:
        raise StateError("multi-round prediction needs at least one adapter")
    fp = backbone.fingerprint()
    for a in adapters:
        if a.fingerprint != fp:
            from .errors import CompatibilityError
            raise CompatibilityError(f"adapter round {a.round_id} targets backbone "
                                     f"{a.fingerprint:08x}, not {fp:08x}")
    return sorted(adapters, key=lambda a: a.round_id)


def predict_batch(backbone: Backbone, bundle, tokens: np.ndarray):
    """Predicted class ids and unified score arrays for a token matrix."""
    adapters = _check_bundle(bundle, backbone)
    scorer = BundleScorer(backbone, np.atleast_2d(tokens))
    unified = scorer.unified(adapters)
    return argmax_lowest(unified), unified


def multi_round_predict(sample: np.ndarray, bundle, backbone: Backbone) -> tuple[int, list[float]]:
    preds, unified = predict_batch(backbone, bundle, np.asarray(sample)[None, :])
    return int(preds[0]), unified[0].tolist()


def evaluate(predict_fn: Callable[[np.ndarray], np.ndarray], tokens, labels, classes=None) -> MetricsReport:
    """Score ``predict_fn`` on a non-empty test set; macro-average over ``classes``."""
    if len(labels) == 0:
        raise DataError("empty test set")
    return score(labels, predict_fn(tokens), classes)


def forgetting_eval(backbone: Backbone, bundle, subsets: dict[int, tuple[np.ndarray, np.ndarray, Sequence[int]]],
                    reference: dict[int, float]) -> ForgettingReport:
    """F1 on every earlier round's test subset under the full bundle vs ``reference``.

    ``subsets`` maps round id to (tokens, labels, round classes); ``reference``
    holds each round's F1 measured right after it was trained.
    """
    adapters = _check_bundle(bundle, backbone)
    current = adapters[-1].round_id
    report = ForgettingReport(current)
    if len({a.round_id for a in adapters}) < 2:
        return report
    for r in sorted(subsets):
        if r >= current:
            continue
        tokens, labels, classes = subsets[r]
        preds, _ = predict_batch(backbone, adapters, tokens)
        f1 = score(labels, preds, classes).f1
        report.entries.append((r, reference[r], f1))
    return report


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #
def _fit(model: Classifier, params, data: RoundData, row_of: dict[int, int], spec: TrainSpec,
         epochs: int, lr: float, validate, round_id: int, rng) -> list[EpochMetrics]:
    opt = AdamW(params, lr=lr, weight_decay=spec.weight_decay)
    targets = np.asarray([row_of[int(c)] for c in data.labels], dtype=np.int64)
    n = len(targets)
    rows = []
    checkpoints = set(spec.eval_epochs) | {epochs}
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            logits = model.forward(trim(data.tokens[idx]))
            loss, grad = cross_entropy(logits, targets[idx])
            opt.zero_grad()
            model.backward(grad)
            opt.step()
            total += loss * len(idx)
        mean_loss = total / n
        log.debug("round %d epoch %d loss %.4f", round_id, epoch, mean_loss)
        if validate is not None and epoch in checkpoints:
            rows.append(EpochMetrics(round_id, epoch, float(mean_loss), validate(model)))
    return rows


def train_round(backbone: Backbone, data: RoundData, spec: TrainSpec, state: RoundState,
                lora: LoraConfig | None = None, validate=None) -> RoundResult:
    """Train one round and return the new artifact plus per-epoch validation rows.

    LoRA mode trains only the adapter factors and the cumulative head; full
    mode trains every backbone and head parameter in place.
    ``validate(model)`` maps the candidate classifier to a MetricsReport.
    """
    if len(data.labels) == 0:
        raise DataError(f"round {data.round_id} has no training data")
    known = state.advance(data.round_id, data.classes)
    unseen = set(np.unique(data.labels).tolist()) - set(known)
    if unseen:
        raise DataError(f"round {data.round_id} data has labels {sorted(unseen)} outside the known set")
    d = backbone.config.d_model
    rng = np.random.default_rng([spec.seed, data.round_id])
    head_seed = int(rng.integers(2**31))
    lora = lora or LoraConfig()
    freeze_rows = spec.mode == "lora" and spec.freeze_inherited
    head = extend_head(state.head, known, d, head_seed, freeze_inherited=freeze_rows)
    row_of = {c: i for i, c in enumerate(head.class_ids)}

    if spec.mode == "full":
        backbone.unfreeze()
        model = Classifier(backbone, head)
        params = list(backbone.params.values()) + head.parameters()
        rows = _fit(model, params, data, row_of, spec, spec.epochs, spec.lr, validate, data.round_id, rng)
        return RoundResult(None, backbone, head, known, rows)

    if not backbone.frozen:
        raise StateError("LoRA rounds need a frozen backbone")
    before = backbone.fingerprint()
    adapter = init_adapter(lora, backbone, data.round_id, known, head_seed, head=head)
    previous = list(state.bundle)
    if spec.warm_start and previous and previous[-1].config == lora:
        for key, (a, b) in previous[-1].entries.items():
            adapter.entries[key][0].value[...] = a.value
            adapter.entries[key][1].value[...] = b.value
    model = Classifier(backbone, head, adapter)
    rows = _fit(model, adapter.parameters(), data, row_of, spec, spec.epochs, spec.lr, validate,
                data.round_id, rng)
    if backbone.fingerprint() != before:
        raise ConsistencyError("backbone weights changed during a LoRA round")
    adapter.freeze()
    head.weight.mask = head.bias.mask = None
    return RoundResult(adapter, backbone, head, known, rows)


# --------------------------------------------------------------------------- #
# Experiment driver
# --------------------------------------------------------------------------- #
@dataclass
class RoundReport:
    round_id: int
    classes: tuple[int, ...]
    known: tuple[int, ...]
    epochs: list[EpochMetrics]
    subset_f1: dict[int, float]

    @property
    def final(self) -> MetricsReport:
        return self.epochs[-1].metrics


@dataclass
class ExperimentReport:
    model: str
    mode: str
    rounds: list[RoundReport]
    forgetting: list[ForgettingReport]
    class_names: tuple[str, ...]

    @property
    def trend(self) -> list[tuple[int, float]]:
        return [(r.round_id, r.final.f1) for r in self.rounds]

    def metrics_csv(self, round_id: int) -> str:
        rnd = next(r for r in self.rounds if r.round_id == round_id)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "epoch", "loss", "accuracy", "precision", "recall", "f1"])
        for e in rnd.epochs:
            w.writerow([e.round_id, e.epoch] + [f"{v:.6f}" for v in e.row()[2:]])
        return buf.getvalue()

    def trend_rows(self):
        return [(r, self.model, self.mode, f1) for r, f1 in self.trend]

    def to_dict(self):
        return {
            "model": self.model,
            "mode": self.mode,
            "classes": list(self.class_names),
            "trend": [{"round": r, "f1": f} for r, f in self.trend],
            "rounds": [
                {
                    "round": r.round_id,
                    "classes": list(r.classes),
                    "known": list(r.known),
                    "subset_f1": {str(k): v for k, v in sorted(r.subset_f1.items())},
                    "epochs": [{"epoch": e.epoch, "loss": e.loss, **e.metrics.to_dict()} for e in r.epochs],
                }
                for r in self.rounds
            ],
            "forgetting": [f.to_dict() for f in self.forgetting],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


@dataclass
class ExperimentResult:
    report: ExperimentReport
    backbone: Backbone
    bundle: AdapterBundle | None
    head: ClassificationHead | None


def rehearsal_indices(labels: np.ndarray, earlier: Sequence[int], fraction: float, rng) -> np.ndarray:
    picks = []
    for c in earlier:
        pool = np.nonzero(labels == c)[0]
        k = int(round(fraction * len(pool)))
        if k:
            picks.append(np.sort(rng.choice(pool, size=k, replace=False)))
    return np.concatenate(picks) if picks else np.zeros(0, dtype=np.int64)


class LocalLearner:
    """One node's sequence of rounds over its own train/test arrays.

    Used directly by :func:`run_experiment` and by each simulated edge node.
    """

    def __init__(self, backbone: Backbone, train: tuple[np.ndarray, np.ndarray],
                 test: tuple[np.ndarray, np.ndarray], spec: TrainSpec, lora: LoraConfig | None = None):
        self.backbone = backbone
        self.train_x, self.train_y = train
        self.test_x, self.test_y = test
        self.spec = spec
        self.lora = lora or LoraConfig()
        if spec.mode == "lora":
            backbone.freeze()
        self.scorer = BundleScorer(backbone, self.test_x)
        self.state = RoundState()
        self.round_classes: dict[int, tuple[int, ...]] = {}
        self.reference: dict[int, float] = {}
        self.rounds: list[RoundReport] = []
        self.forgetting: list[ForgettingReport] = []
        self.model: Classifier | None = None

    @property
    def bundle(self) -> AdapterBundle:
        return self.state.bundle

    def _round_data(self, round_id: int, classes) -> RoundData:
        idx = np.nonzero(np.isin(self.train_y, classes))[0]
        if self.spec.rehearsal and self.state.known:
            rng = np.random.default_rng([self.spec.seed, round_id, 1])
            idx = np.concatenate([idx, rehearsal_indices(self.train_y, self.state.known,
                                                         self.spec.rehearsal, rng)])
        return RoundData(round_id, tuple(sorted(classes)), self.train_x[idx], self.train_y[idx])

    def predict_all(self) -> np.ndarray:
        """Class ids for every test row under the current artifact(s)."""
        if self.spec.mode == "lora":
            return self.scorer.predict(list(self.state.bundle))
        head = self.state.head
        return np.asarray(head.class_ids)[argmax_lowest(logits_of(self.model, self.test_x))]

    def step(self, round_id: int, classes: Sequence[int]) -> RoundReport:
        spec = self.spec
        classes = tuple(int(c) for c in classes)
        rd = self._round_data(round_id, classes)
        known_now = tuple(sorted(set(self.state.known) | set(classes)))
        rows = np.nonzero(np.isin(self.test_y, known_now))[0]
        if rows.size == 0:
            raise DataError(f"round {round_id} has no test data")
        prior = list(self.state.bundle) if spec.mode == "lora" else []
        test_x, test_y, scorer = self.test_x, self.test_y, self.scorer

        def validate(candidate: Classifier):
            scored = [(a.class_ids, scorer.scores(a)[rows]) for a in prior]
            scored.append((candidate.head.class_ids, z_normalize(logits_of(candidate, test_x[rows]))))
            return score(test_y[rows], argmax_lowest(unify(scored)), known_now)

        result = train_round(self.backbone, rd, spec, self.state, self.lora, validate)
        self.state.round_id, self.state.known, self.state.head = round_id, result.known, result.head
        self.round_classes[round_id] = rd.classes
        if spec.mode == "lora":
            self.state.bundle.append(result.adapter)
        else:
            self.model = Classifier(self.backbone, result.head)
        preds = self.predict_all()
        subset_f1 = {}
        for q, cls in self.round_classes.items():
            sub = np.nonzero(np.isin(test_y, cls))[0]
            subset_f1[q] = score(test_y[sub], preds[sub], cls).f1
        self.reference[round_id] = subset_f1[round_id]
        earlier = [q for q in self.round_classes if q < round_id]
        if earlier:
            self.forgetting.append(ForgettingReport(
                round_id, [(q, self.reference[q], subset_f1[q]) for q in earlier]))
        report = RoundReport(round_id, rd.classes, result.known, result.epochs, subset_f1)
        self.rounds.append(report)
        return report


def fresh_backbone(data: PreparedDataset, config: BackboneConfig) -> Backbone:
    if config.vocab_size < len(data.vocab):
        from dataclasses import replace
        config = replace(config, vocab_size=len(data.vocab))
    return Backbone.init(config)


def run_experiment(data: PreparedDataset, spec: TrainSpec, backbone: Backbone,
                   lora: LoraConfig | None = None, model_name: str = "desk",
                   progress=None) -> ExperimentResult:
    """Run every scheduled round in order and collect per-round, per-epoch metrics.

    ``backbone`` is copied, never mutated.
    """
    if backbone.config.vocab_size < len(data.vocab):
        raise ConfigError(f"backbone vocabulary {backbone.config.vocab_size} is smaller than "
                          f"the dataset's {len(data.vocab)} tokens")
    learner = LocalLearner(backbone.copy(), (data.tokens(data.train), data.labels(data.train)),
                           (data.tokens(data.test), data.labels(data.test)), spec, lora)
    for r, names in enumerate(data.schedule.rounds):
        rep = learner.step(r, [data.codec.encode(n) for n in names])
        if progress:
            progress(r, rep.epochs[-1])
    report = ExperimentReport(model_name, spec.mode, learner.rounds, learner.forgetting,
                              tuple(data.codec.names))
    bundle = learner.bundle if spec.mode == "lora" else None
    return ExperimentResult(report, learner.backbone, bundle, learner.state.head)
