"""Confusion-matrix scores, latency statistics and report serialization."""
from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import EmptySampleSet, ZeroDenominator


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion-matrix counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @classmethod
    def from_pairs(cls, pairs) -> "ConfusionMatrix":
        m = cls()
        for predicted, actual in pairs:
            m = update(m, predicted, actual)
        return m

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def update(matrix: ConfusionMatrix, predicted_violation: bool,
           actual_violation: bool) -> ConfusionMatrix:
    if predicted_violation and actual_violation:
        return replace(matrix, tp=matrix.tp + 1)
    if predicted_violation:
        return replace(matrix, fp=matrix.fp + 1)
    if actual_violation:
        return replace(matrix, fn=matrix.fn + 1)
    return replace(matrix, tn=matrix.tn + 1)


@dataclass(frozen=True)
class Scores:
    precision: float
    recall: float
    accuracy: float


def scores(matrix: ConfusionMatrix) -> Scores:
    """Precision TP/(TP+FP), recall TP/(TP+FN), accuracy (TP+TN)/total.

    Raises :class:`ZeroDenominator` naming the first undefined score.
    """
    m = matrix
    if m.total == 0:
        raise ZeroDenominator("accuracy")
    if m.tp + m.fp == 0:
        raise ZeroDenominator("precision")
    if m.tp + m.fn == 0:
        raise ZeroDenominator("recall")
    return Scores(
        precision=m.tp / (m.tp + m.fp),
        recall=m.tp / (m.tp + m.fn),
        accuracy=(m.tp + m.tn) / m.total,
    )


class LatencyKind(str, enum.Enum):
    INFERENCE = "inference"
    END_TO_END = "end_to_end"
    UPLOAD = "upload"


@dataclass(frozen=True)
class LatencySample:
    kind: LatencyKind
    value_ms: float
    lighting: str = "day"

    def __post_init__(self):
        object.__setattr__(self, "kind", LatencyKind(self.kind))
        if not self.value_ms > 0:
            raise ValueError("latency samples must be positive")


@dataclass(frozen=True)
class LatencyStats:
    mean_ms: float
    p50: float
    p95: float
    count: int


def nearest_rank(sorted_values, pct: float) -> float:
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


def latency_stats(samples, kind=None, lighting=None) -> LatencyStats:
    """Mean and nearest-rank percentiles over samples matching the filter.

    ``samples`` may be :class:`LatencySample` objects or bare numbers (bare
    numbers ignore the filter).
    """
    values = []
    for s in samples:
        if isinstance(s, LatencySample):
            if kind is not None and s.kind != LatencyKind(kind):
                continue
            if lighting is not None and s.lighting != str(getattr(lighting, "value", lighting)):
                continue
            values.append(s.value_ms)
        else:
            values.append(float(s))
    if not values:
        raise EmptySampleSet("no latency samples match the filter")
    values.sort()
    return LatencyStats(
        mean_ms=math.fsum(values) / len(values),
        p50=nearest_rank(values, 50),
        p95=nearest_rank(values, 95),
        count=len(values),
    )


def flat_record(record: dict, prefix: str = "") -> dict:
    """Flatten nested dicts to ``a.b`` keys; lists are JSON-encoded."""
    out = {}
    for key, value in record.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flat_record(value, f"{name}."))
        elif isinstance(value, (list, tuple)):
            out[name] = json.dumps(value)
        else:
            out[name] = value
    return out


def to_csv(records) -> str:
    rows = [flat_record(r) for r in records]
    fields = []
    for row in rows:
        fields.extend(k for k in row if k not in fields)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def write_report(record: dict, out_dir, stem: str) -> tuple[Path, Path]:
    """Write ``<stem>.json`` and a one-row ``<stem>.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = out / f"{stem}.json", out / f"{stem}.csv"
    json_path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    csv_path.write_text(to_csv([record]))
    return json_path, csv_path


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "t", "yes", "y", "violation"):
        return True
    if t in ("0", "false", "f", "no", "n", "normal", ""):
        return False
    raise ValueError(f"cannot read {text!r} as a boolean label")


def read_labels(path) -> list[tuple[bool, bool]]:
    """Load ``(predicted, actual)`` pairs from CSV or JSON.

    CSV needs ``predicted`` and ``actual`` columns; JSON is a list of
    two-element lists or of objects with those keys.
    """
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        pairs = []
        for item in json.loads(text):
            if isinstance(item, dict):
                item = (item["predicted"], item["actual"])
            p, a = item
            pairs.append((_parse_bool(str(p)), _parse_bool(str(a))))
        return pairs
    reader = csv.DictReader(io.StringIO(text))
    if not reader.fieldnames or not {"predicted", "actual"} <= set(reader.fieldnames):
        raise ValueError("label CSV needs 'predicted' and 'actual' columns")
    return [(_parse_bool(r["predicted"]), _parse_bool(r["actual"])) for r in reader]
