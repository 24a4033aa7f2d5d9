"""Binary classification metrics with macro averaging, rank-based ROC-AUC, and report emission."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError, ValidationError

SCHEMA_VERSION = 1
GRID_COLUMNS = ["approach", "contrastive", "initialization", "accuracy", "f1", "precision", "recall", "auc"]


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self) -> "ConfusionMatrix":
        """The same predictions seen with class 0 as the positive class."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)


def _check_labels(labels: np.ndarray) -> None:
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("labels must be 0 or 1")


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionMatrix:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size == 0 or scores.shape != labels.shape:
        raise ValidationError(f"need matching non-empty scores/labels, got {scores.shape} and {labels.shape}")
    _check_labels(labels)
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
    )


def _div(a: float, b: float) -> float:
    return a / b if b else 0.0


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = _div(tp, tp + fp)
    r = _div(tp, tp + fn)
    return p, r, _div(2 * p * r, p + r)


def macro_metrics(cm: ConfusionMatrix) -> tuple[float, float, float, float]:
    """(accuracy, macro precision, macro recall, macro F1); any 0/0 counts as 0."""
    if cm.total <= 0:
        raise ValidationError("confusion matrix is empty")
    p1, r1, f1 = _prf(cm.tp, cm.fp, cm.fn)
    p0, r0, f0 = _prf(cm.tn, cm.fn, cm.fp)
    accuracy = (cm.tp + cm.tn) / cm.total
    return accuracy, (p0 + p1) / 2, (r0 + r1) / 2, (f0 + f1) / 2


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC via average ranks; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    _check_labels(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs both positive and negative labels")
    ranks = rankdata(scores, method="average")
    # doubled ranks are integers, so the U statistic is exact
    u2 = int(round(2 * ranks[pos].sum())) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    macro_precision: float
    macro_recall: float
    roc_auc: float
    threshold: float = 0.5
    n: int = 0
    split_digest: str = ""
    confusion: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported metrics schema {d.get('schema_version')!r}")
        return cls(**d)

    def percent_row(self) -> list[str]:
        return [pct(v) for v in (self.accuracy, self.macro_f1, self.macro_precision, self.macro_recall, self.roc_auc)]


def evaluate(scores, labels, threshold: float = 0.5, split_digest: str = "") -> MetricsReport:
    cm = confusion(scores, labels, threshold)
    acc, prec, rec, f1 = macro_metrics(cm)
    try:
        auc = roc_auc(scores, labels)
    except UndefinedMetricError:
        auc = float("nan")
    return MetricsReport(acc, f1, prec, rec, auc, threshold, cm.total, split_digest, asdict(cm))


def pct(value: float) -> str:
    """Render a [0, 1] metric as a percentage with two decimals, e.g. 0.384615 -> '38.46'."""
    if value != value:
        return "nan"
    return f"{100 * value:.2f}"


# -- tables ----------------------------------------------------------------------------
@dataclass
class ResultRow:
    approach: str
    contrastive: str
    initialization: str
    report: MetricsReport | None = None
    status: str = "ok"
    dataset_digest: str = ""

    def cells(self) -> list[str]:
        metrics = self.report.percent_row() if self.report else ["failed"] * 5
        return [self.approach, self.contrastive, self.initialization, *metrics]


@dataclass
class ResultsTable:
    rows: list[ResultRow]

    @property
    def dataset_digest(self) -> str:
        digests = {r.dataset_digest for r in self.rows}
        if len(digests) != 1:
            raise ValidationError(f"rows disagree on dataset digest: {sorted(digests)}")
        return digests.pop()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for r in self.rows:
            w.writerow(r.cells())
        return buf.getvalue()

    def render(self) -> str:
        header = ["Approach", "Contrastive", "Init", "Accuracy", "F1", "Precision", "Recall", "AUC"]
        lines = [header] + [r.cells() for r in self.rows]
        widths = [max(len(line[k]) for line in lines) for k in range(len(header))]
        out = []
        for k, line in enumerate(lines):
            out.append("  ".join(cell.ljust(wd) for cell, wd in zip(line, widths)).rstrip())
            if k == 0:
                out.append("  ".join("-" * wd for wd in widths))
        return "\n".join(out)


def emit_report(obj, path, fmt: str = "json") -> Path:
    """Write a MetricsReport (json) or ResultsTable (csv or json)."""
    path = Path(path)
    try:
        if isinstance(obj, MetricsReport):
            if fmt != "json":
                raise ValidationError("metrics reports are written as json")
            text = json.dumps(obj.to_dict(), indent=2, sort_keys=True) + "\n"
        elif isinstance(obj, ResultsTable):
            if fmt == "csv":
                text = obj.to_csv()
            else:
                text = json.dumps({
                    "schema_version": SCHEMA_VERSION,
                    "rows": [{**{k: v for k, v in asdict(r).items() if k != "report"},
                              "report": r.report.to_dict() if r.report else None} for r in obj.rows],
                }, indent=2, sort_keys=True) + "\n"
        else:
            raise TypeError(f"cannot emit {type(obj).__name__}")
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    return path


def load_report(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def read_grid_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
