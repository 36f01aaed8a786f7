"""Flow-dataset ingestion: CSV loading, null-column removal, label encoding,
textualisation, a whitespace vocabulary, few-shot sampling, stratified
splits, round partitions and k-folds.

Every sampling function is a pure function of its inputs and ``seed``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CodecError, ConfigError, CountError, ScheduleError, SchemaError

log = logging.getLogger(__name__)

PAD_ID, UNK_ID, CLS_ID = 0, 1, 2
PAD_TOKEN, UNK_TOKEN, CLS_TOKEN = "<pad>", "<unk>", "CLS"
TARGET_COLUMNS = ("Attack_type", "Attack_label")
NULL_VALUES = frozenset({"", "nan", "null", "none", "na"})
DEFAULT_MAX_LEN = 64

# Per-class (train, test) counts of the combined few-shot sample.
FEW_SHOT_COUNTS = {
    "Normal": (145, 105),
    "DDoS_UDP": (155, 95),
    "Password": (146, 104),
    "XSS": (142, 108),
    "Backdoor": (152, 98),
    "SQL_injection": (136, 114),
    "Fingerprinting": (150, 100),
    "MITM": (158, 92),
    "Port_Scanning": (156, 94),
    "Uploading": (155, 95),
    "DDoS_TCP": (142, 108),
    "DDoS_ICMP": (155, 95),
    "DDoS_HTTP": (153, 97),
    "Ransomware": (156, 94),
    "Vulnerability_scanner": (149, 101),
}

DEFAULT_SCHEDULE = (
    ("Normal", "DDoS_UDP", "Password"),
    ("XSS", "Backdoor"),
    ("SQL_injection", "Fingerprinting"),
    ("MITM", "Port_Scanning"),
    ("Uploading", "DDoS_TCP"),
    ("DDoS_ICMP", "DDoS_HTTP"),
    ("Ransomware", "Vulnerability_scanner"),
)


def normalize_class_name(name: str) -> str:
    return "_".join(name.strip().split())


def is_null(value) -> bool:
    return value is None or value.strip().lower() in NULL_VALUES


@dataclass(frozen=True)
class FlowRecord:
    features: tuple[tuple[str, str], ...]
    attack_type: str
    attack_label: int = 0


# --------------------------------------------------------------------------- #
# Loading and cleaning
# --------------------------------------------------------------------------- #
@dataclass
class CleaningReport:
    source: str
    rows: int
    columns_in: int
    dropped: list[str] = field(default_factory=list)
    kept: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_dict(self):
        return {
            "source": self.source,
            "rows": self.rows,
            "feature_columns_in": self.columns_in,
            "dropped_columns": list(self.dropped),
            "features_kept": self.kept,
            "warnings": list(self.warnings),
        }


def null_columns(records: Sequence[FlowRecord]) -> list[str]:
    """Feature names holding at least one null cell, in column order."""
    seen: dict[str, None] = {}
    for rec in records:
        for name, value in rec.features:
            if is_null(value):
                seen.setdefault(name)
    return list(seen)


def drop_null_features(records: Sequence[FlowRecord], report: CleaningReport | None = None):
    """Remove every feature column that holds a null anywhere in ``records``."""
    bad = set(null_columns(records))
    out = [
        FlowRecord(tuple(fv for fv in r.features if fv[0] not in bad), r.attack_type, r.attack_label)
        for r in records
    ]
    if report is not None:
        report.dropped = null_columns(records)
        report.kept = report.columns_in - len(bad)
    if records and all(not r.features for r in out):
        msg = "every feature column contained nulls; records have no features left"
        log.warning(msg)
        if report is not None:
            report.warnings.append(msg)
    return out


def _read_rows(path, target_columns):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: no header row")
        missing = [c for c in target_columns if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing target column(s) {missing}")
        rows = list(reader)
    return header, rows


def load_csv_with_report(path, target_columns=TARGET_COLUMNS):
    header, rows = _read_rows(path, target_columns)
    type_col, label_col = target_columns
    t_idx, l_idx = header.index(type_col), header.index(label_col)
    feat_idx = [i for i, name in enumerate(header) if name not in target_columns]
    records = []
    for row in rows:
        if not row:
            continue
        row = row + [""] * (len(header) - len(row))
        label = row[l_idx].strip()
        try:
            flag = int(float(label)) if label else 0
        except ValueError:
            flag = 0 if label.lower() in ("normal", "benign", "false") else 1
        records.append(FlowRecord(
            tuple((header[i], row[i]) for i in feat_idx),
            normalize_class_name(row[t_idx]),
            flag,
        ))
    report = CleaningReport(str(path), len(records), len(feat_idx))
    records = drop_null_features(records, report)
    return records, report


def load_csv(path, target_columns=TARGET_COLUMNS) -> list[FlowRecord]:
    return load_csv_with_report(path, target_columns)[0]


# --------------------------------------------------------------------------- #
# Labels
# --------------------------------------------------------------------------- #
class LabelCodec:
    """Class name <-> dense id, ids assigned in lexicographic name order."""

    def __init__(self, names: Sequence[str]):
        self.names = tuple(names)
        self._ids = {n: i for i, n in enumerate(self.names)}

    def __len__(self):
        return len(self.names)

    def __eq__(self, other):
        return isinstance(other, LabelCodec) and self.names == other.names

    def encode(self, name: str) -> int:
        try:
            return self._ids[normalize_class_name(name)]
        except KeyError:
            raise CodecError(f"unknown class {name!r}")

    def decode(self, idx: int) -> str:
        if not 0 <= idx < len(self.names):
            raise CodecError(f"class id {idx} out of range")
        return self.names[idx]


def build_label_codec(class_names: Iterable[str]) -> LabelCodec:
    names = [normalize_class_name(n) for n in class_names]
    if not names:
        raise CodecError("no class names given")
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise CodecError(f"duplicate class names after normalisation: {dupes}")
    return LabelCodec(sorted(names))


# --------------------------------------------------------------------------- #
# Text and tokens
# --------------------------------------------------------------------------- #
def bucket_value(value: str) -> str:
    """Non-integral numbers are rounded to 3 significant digits; others pass through."""
    v = value.strip()
    try:
        x = float(v)
    except ValueError:
        return v
    if not math.isfinite(x):
        return v
    if x == int(x) and abs(x) < 1e15:
        return str(int(x)) if ("." in v or "e" in v.lower()) else v
    return f"{x:.3g}"


def textualize(record: FlowRecord) -> str:
    parts = [CLS_TOKEN]
    for name, value in record.features:
        parts.append(f"{'_'.join(name.split())}:{'_'.join(bucket_value(value).split())}")
    return " ".join(parts)


class TokenVocab:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = tuple(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, TokenVocab) and self.tokens == other.tokens

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids if int(i) != PAD_ID]


def build_vocab(train_texts: Iterable[str]) -> TokenVocab:
    seen = set()
    for text in train_texts:
        seen.update(text.split())
    seen.discard(CLS_TOKEN)
    return TokenVocab([PAD_TOKEN, UNK_TOKEN, CLS_TOKEN] + sorted(seen))


def tokenize(text: str, vocab: TokenVocab, max_len: int = DEFAULT_MAX_LEN) -> np.ndarray:
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    ids = [vocab.id_of(t) for t in text.split()[:max_len]]
    ids += [PAD_ID] * (max_len - len(ids))
    return np.asarray(ids, dtype=np.int64)


# --------------------------------------------------------------------------- #
# Schedules, sampling and splits
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class RoundSchedule:
    rounds: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        rounds = tuple(tuple(normalize_class_name(c) for c in r) for r in self.rounds)
        object.__setattr__(self, "rounds", rounds)
        if not rounds:
            raise ScheduleError("schedule has no rounds")
        seen = set()
        for i, r in enumerate(rounds):
            if not r:
                raise ScheduleError(f"round {i} introduces no classes")
            if seen.intersection(r) or len(set(r)) != len(r):
                raise ScheduleError(f"round {i} repeats a class: {sorted(seen.intersection(r))}")
            seen.update(r)

    def __len__(self):
        return len(self.rounds)

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(c for r in self.rounds for c in r)

    def known_up_to(self, r: int) -> tuple[str, ...]:
        return tuple(c for rr in self.rounds[: r + 1] for c in rr)

    def round_of(self, name: str) -> int:
        name = normalize_class_name(name)
        for i, r in enumerate(self.rounds):
            if name in r:
                return i
        raise ScheduleError(f"class {name!r} is not scheduled")

    @classmethod
    def parse(cls, text: str) -> "RoundSchedule":
        """``default`` or ``A,B;C,D;...`` (rounds separated by ';')."""
        if text.strip().lower() == "default":
            return cls(DEFAULT_SCHEDULE)
        return cls(tuple(tuple(c for c in r.split(",") if c.strip()) for r in text.split(";")))

    def to_list(self):
        return [list(r) for r in self.rounds]


def _group(labels: Sequence[str]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    return groups


def few_shot_indices(labels: Sequence[str], counts: dict[str, int], seed: int) -> list[int]:
    groups = _group(labels)
    rng = np.random.default_rng(seed)
    chosen = []
    for name in sorted(counts):
        want = counts[name]
        pool = groups.get(name, [])
        if want > len(pool):
            raise CountError(f"class {name!r}: requested {want} samples, only {len(pool)} available")
        if want:
            pick = rng.choice(len(pool), size=want, replace=False)
            chosen.extend(pool[i] for i in pick)
    return sorted(chosen)


def few_shot_sample(records: Sequence[FlowRecord], counts: dict[str, int], seed: int):
    idx = few_shot_indices([r.attack_type for r in records], counts, seed)
    return [records[i] for i in idx]


@dataclass
class DatasetSplit:
    train: list
    test: list
    seed: int


def split_indices(labels: Sequence[str], train_fraction: float = 0.6, seed: int = 0,
                  train_counts: dict[str, int] | None = None) -> tuple[list[int], list[int]]:
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for name, pool in sorted(_group(labels).items()):
        order = [pool[i] for i in rng.permutation(len(pool))]
        if train_counts is not None and name in train_counts:
            n_train = train_counts[name]
            if n_train > len(pool):
                raise CountError(f"class {name!r}: {n_train} train samples requested of {len(pool)}")
        else:
            n_train = int(round(train_fraction * len(pool)))
        train.extend(order[:n_train])
        test.extend(order[n_train:])
    return sorted(train), sorted(test)


def split(records: Sequence[FlowRecord], train_fraction: float = 0.6, seed: int = 0,
          train_counts: dict[str, int] | None = None) -> DatasetSplit:
    tr, te = split_indices([r.attack_type for r in records], train_fraction, seed, train_counts)
    return DatasetSplit([records[i] for i in tr], [records[i] for i in te], seed)


def partition_rounds(records: Sequence[FlowRecord], schedule: RoundSchedule) -> list[list[FlowRecord]]:
    """Round r receives exactly the records whose class is introduced at round r."""
    where = {c: i for i, r in enumerate(schedule.rounds) for c in r}
    parts: list[list[FlowRecord]] = [[] for _ in schedule.rounds]
    for rec in records:
        if rec.attack_type not in where:
            raise ScheduleError(f"class {rec.attack_type!r} is not scheduled")
        parts[where[rec.attack_type]].append(rec)
    return parts


def kfold_indices(labels: Sequence[str], k: int = 5, seed: int = 0) -> list[tuple[list[int], list[int]]]:
    """Stratified folds: each class is shuffled and dealt round-robin, the dealer
    position carrying across classes so fold sizes differ by at most one."""
    n = len(labels)
    if k < 2 or k > n:
        raise ConfigError(f"k must satisfy 2 <= k <= {n}, got {k}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=np.int64)
    pos = 0
    for _, pool in sorted(_group(labels).items()):
        for i in rng.permutation(len(pool)):
            fold_of[pool[i]] = pos % k
            pos += 1
    folds = []
    for f in range(k):
        val = [i for i in range(n) if fold_of[i] == f]
        tr = [i for i in range(n) if fold_of[i] != f]
        folds.append((tr, val))
    return folds


def kfold(records: Sequence[FlowRecord], k: int = 5, seed: int = 0):
    folds = kfold_indices([r.attack_type for r in records], k, seed)
    return [([records[i] for i in tr], [records[i] for i in va]) for tr, va in folds]


# --------------------------------------------------------------------------- #
# Prepared dataset bundle
# --------------------------------------------------------------------------- #
FEW_SHOT_PRESETS = {"fewshot": FEW_SHOT_COUNTS}


@dataclass
class PreparedDataset:
    records: list[FlowRecord]
    codec: LabelCodec
    vocab: TokenVocab
    train: list[int]
    test: list[int]
    holdout: list[int]
    schedule: RoundSchedule
    reports: list[CleaningReport]
    seed: int
    preset: str
    max_len: int = DEFAULT_MAX_LEN

    def labels(self, idx: Sequence[int]) -> np.ndarray:
        return np.asarray([self.codec.encode(self.records[i].attack_type) for i in idx], dtype=np.int64)

    def tokens(self, idx: Sequence[int]) -> np.ndarray:
        if not idx:
            return np.zeros((0, self.max_len), dtype=np.int64)
        return np.stack([tokenize(textualize(self.records[i]), self.vocab, self.max_len) for i in idx])

    def to_dict(self):
        return {
            "format": "edgelora-dataset/1",
            "seed": self.seed,
            "preset": self.preset,
            "max_len": self.max_len,
            "sources": [r.source for r in self.reports],
            "codec": list(self.codec.names),
            "vocab": list(self.vocab.tokens),
            "schedule": self.schedule.to_list(),
            "splits": {"train": self.train, "test": self.test, "holdout": self.holdout},
            "cleaning": [r.to_dict() for r in self.reports],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def prepare_dataset(csv_paths: Sequence, preset: str = "fewshot", seed: int = 0,
                    schedule: RoundSchedule | None = None, holdout_per_class: int = 20,
                    max_len: int = DEFAULT_MAX_LEN, train_fraction: float = 0.6) -> PreparedDataset:
    """Load, clean and merge CSVs, then draw the few-shot split, holdout and vocabulary.

    ``preset`` names a built-in (train, test) count table, or ``all`` to keep
    every record and split it by ``train_fraction``.
    """
    schedule = schedule or RoundSchedule(DEFAULT_SCHEDULE)
    records: list[FlowRecord] = []
    reports = []
    for path in csv_paths:
        recs, rep = load_csv_with_report(path)
        records.extend(recs)
        reports.append(rep)
    if not records:
        raise SchemaError("no records in the given CSV file(s)")
    in_play = set(schedule.classes)
    labels = [r.attack_type if r.attack_type in in_play else None for r in records]
    unscheduled = sorted({r.attack_type for r in records} - in_play)
    if unscheduled:
        log.info("ignoring unscheduled classes %s", unscheduled)
    if preset == "all":
        pool = [i for i, lab in enumerate(labels) if lab is not None]
        tr, te = split_indices([labels[i] for i in pool], train_fraction, seed)
        train, test = [pool[i] for i in tr], [pool[i] for i in te]
    else:
        try:
            table = FEW_SHOT_PRESETS[preset]
        except KeyError:
            raise ConfigError(f"unknown few-shot preset {preset!r}")
        counts = {c: sum(table[c]) for c in schedule.classes if c in table}
        missing = sorted(in_play - set(counts))
        if missing:
            raise ConfigError(f"preset {preset!r} has no counts for {missing}")
        masked = [lab if lab is not None else "\0unscheduled" for lab in labels]
        chosen = few_shot_indices(masked, counts, seed)
        tr, te = split_indices([masked[i] for i in chosen], train_fraction, seed,
                               {c: table[c][0] for c in counts})
        train, test = [chosen[i] for i in tr], [chosen[i] for i in te]
    used = set(train) | set(test)
    rest = [i for i, lab in enumerate(labels) if lab is not None and i not in used]
    holdout = []
    if holdout_per_class:
        rest_labels = [labels[i] for i in rest]
        avail = _group(rest_labels)
        counts = {c: min(holdout_per_class, len(avail.get(c, []))) for c in schedule.classes}
        holdout = sorted(rest[i] for i in few_shot_indices(rest_labels, counts, seed + 1))
    codec = build_label_codec(schedule.classes)
    vocab = build_vocab(textualize(records[i]) for i in train)
    return PreparedDataset(records, codec, vocab, train, test, holdout, schedule, reports,
                           seed, preset, max_len)
