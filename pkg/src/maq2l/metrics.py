"""Evaluation machinery: F-beta, CIW-weighted F2, per-class AP, min-max scaling.

The canonical sewer defect table ships here with its published
class-importance weights; synthetic datasets bring their own tables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ClassEntry:
    code: str
    description: str
    ciw: float
    bottleneck: bool = False


class ClassTable:
    """Ordered defect classes with importance weights and bottleneck flags."""

    def __init__(self, entries):
        entries = tuple(entries)
        codes = [e.code for e in entries]
        if len(set(codes)) != len(codes):
            raise ConfigError("duplicate class codes in table")
        self.entries = entries
        self._index = {e.code: i for i, e in enumerate(entries)}

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def codes(self):
        return [e.code for e in self.entries]

    def index(self, code: str) -> int:
        if code not in self._index:
            raise ConfigError(f"unknown class code {code!r}")
        return self._index[code]

    def ciw_vector(self) -> np.ndarray:
        return np.array([e.ciw for e in self.entries])

    def bottleneck_indices(self):
        return [i for i, e in enumerate(self.entries) if e.bottleneck]

    def to_lines(self):
        return ["\t".join([e.code, e.description, repr(e.ciw), "1" if e.bottleneck else "0"])
                for e in self.entries]

    @classmethod
    def from_lines(cls, lines):
        entries = []
        for line in lines:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ConfigError(f"class table line needs 4 tab-separated fields: {line!r}")
            entries.append(ClassEntry(parts[0], parts[1], float(parts[2]), parts[3] == "1"))
        return cls(entries)


# Published class-importance weights, descending, with the four bottleneck
# categories flagged.
SEWER_BOTTLENECK = ("RB", "IS", "FO", "OS")

SEWER_CLASSES = ClassTable([
    ClassEntry("RB", "Cracks, breaks, and collapses", 1.0000, True),
    ClassEntry("OS", "Lateral reinstatement cuts", 0.9009, True),
    ClassEntry("FS", "Displaced joint", 0.6419),
    ClassEntry("OB", "Surface damage", 0.5518),
    ClassEntry("OK", "Connection with construction changes", 0.4396),
    ClassEntry("PH", "Chiseled connection", 0.4167),
    ClassEntry("PB", "Drilled connection", 0.4167),
    ClassEntry("OP", "Connection with transition profile", 0.3829),
    ClassEntry("RO", "Roots", 0.3559),
    ClassEntry("IN", "Infiltration", 0.3131),
    ClassEntry("PF", "Production error", 0.2896),
    ClassEntry("FO", "Obstacle", 0.2477, True),
    ClassEntry("BE", "Attached deposits", 0.2275),
    ClassEntry("IS", "Intruding sealing material", 0.1847, True),
    ClassEntry("DE", "Deformation", 0.1622),
    ClassEntry("GR", "Branch pipe", 0.0901),
    ClassEntry("AF", "Settled deposits", 0.0811),
])


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


class ConfusionCounts:
    """Per-class confusion tallies plus the image-level Normal pseudo-class.

    Mergeable across shards by addition.
    """

    def __init__(self, codes):
        self.codes = list(codes)
        self.per_class = {c: ClassCounts() for c in self.codes}
        self.normal = ClassCounts()

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if self.codes != other.codes:
            raise ShapeError("cannot merge counts over different class tables")
        for c in self.codes:
            a, b = self.per_class[c], other.per_class[c]
            a.tp += b.tp
            a.fp += b.fp
            a.fn += b.fn
            a.tn += b.tn
        for f in ("tp", "fp", "fn", "tn"):
            setattr(self.normal, f, getattr(self.normal, f) + getattr(other.normal, f))
        return self


def precision_recall(c: ClassCounts):
    p = c.tp / (c.tp + c.fp) if c.tp + c.fp > 0 else 0.0
    r = c.tp / (c.tp + c.fn) if c.tp + c.fn > 0 else 0.0
    return p, r


def f_beta(precision: float, recall: float, beta: float) -> float:
    """(1+b^2)PR / (b^2 P + R), 0 when the denominator vanishes."""
    denom = beta * beta * precision + recall
    if denom == 0:
        return 0.0
    return (1 + beta * beta) * precision * recall / denom


def confusion_from_predictions(probs, targets, threshold: float = 0.5) -> ConfusionCounts:
    """Binarize per-class probabilities and tally confusion counts.

    An image is predicted Normal iff every defect probability falls below
    the threshold; it is labeled Normal iff its target row is all zeros.
    """
    probs = np.asarray(probs, dtype=float)
    targets = np.asarray(targets)
    if probs.shape != targets.shape or probs.ndim != 2:
        raise ShapeError(f"probs {probs.shape} and targets {targets.shape} must be equal (B,N)")
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0,1), got {threshold}")
    n = probs.shape[1]
    counts = ConfusionCounts([str(i) for i in range(n)])
    pred = probs >= threshold
    pos = targets > 0
    for j, code in enumerate(counts.codes):
        c = counts.per_class[code]
        c.tp = int(np.sum(pred[:, j] & pos[:, j]))
        c.fp = int(np.sum(pred[:, j] & ~pos[:, j]))
        c.fn = int(np.sum(~pred[:, j] & pos[:, j]))
        c.tn = int(np.sum(~pred[:, j] & ~pos[:, j]))
    pred_normal = ~pred.any(axis=1)
    is_normal = ~pos.any(axis=1)
    counts.normal.tp = int(np.sum(pred_normal & is_normal))
    counts.normal.fp = int(np.sum(pred_normal & ~is_normal))
    counts.normal.fn = int(np.sum(~pred_normal & is_normal))
    counts.normal.tn = int(np.sum(~pred_normal & ~is_normal))
    return counts


def confusion_for_table(probs, targets, table: ClassTable, threshold: float = 0.5) -> ConfusionCounts:
    counts = confusion_from_predictions(probs, targets, threshold)
    if len(counts.codes) != len(table):
        raise ShapeError(f"{probs.shape[1]} prediction columns for a {len(table)}-class table")
    counts.per_class = {table.codes[i]: counts.per_class[c] for i, c in enumerate(counts.codes)}
    counts.codes = table.codes
    return counts


def f2_ciw(counts: ConfusionCounts, table: ClassTable) -> float:
    """CIW-weighted mean of per-class F2 scores."""
    num = 0.0
    den = 0.0
    for entry in table:
        if entry.code not in counts.per_class:
            raise ShapeError(f"counts missing class {entry.code}")
        p, r = precision_recall(counts.per_class[entry.code])
        num += f_beta(p, r, 2.0) * entry.ciw
        den += entry.ciw
    return num / den


def f1_normal(counts: ConfusionCounts) -> float:
    p, r = precision_recall(counts.normal)
    return f_beta(p, r, 1.0)


def average_precision(scores) -> float | None:
    """AP over (prob, y) pairs: mean precision-at-rank across positives.

    Ranking is by descending probability, ties broken by stable input
    order. None when there is no positive (undefined; excluded from mAP).
    """
    scores = list(scores)
    n_pos = sum(1 for _, y in scores if y)
    if n_pos == 0:
        return None
    order = sorted(range(len(scores)), key=lambda i: -scores[i][0])
    hits = 0
    total = 0.0
    for rank, i in enumerate(order, start=1):
        if scores[i][1]:
            hits += 1
            total += hits / rank
    return total / n_pos


def per_class_ap(probs, targets):
    """Column-wise AP; None entries mark classes with no positives."""
    probs = np.asarray(probs, dtype=float)
    targets = np.asarray(targets)
    if probs.shape != targets.shape or probs.ndim != 2:
        raise ShapeError(f"probs {probs.shape} and targets {targets.shape} must be equal (B,N)")
    out = []
    for j in range(probs.shape[1]):
        out.append(average_precision(zip(probs[:, j], targets[:, j])))
    return out


def mean_average_precision(aps) -> float:
    present = [a for a in aps if a is not None]
    return float(np.mean(present)) if present else 0.0


def minmax_normalize(values):
    """(v - min) / (max - min) per entry."""
    values = list(values)
    if len(values) < 2:
        raise ConfigError("min-max normalization needs at least 2 values")
    lo, hi = min(values), max(values)
    if hi == lo:
        raise ConfigError("min-max normalization undefined when max == min")
    return [(v - lo) / (hi - lo) for v in values]


# ---------------------------------------------------------------------------
# report


@dataclass
class ClassReport:
    precision: float
    recall: float
    f2: float
    ap: float | None


@dataclass
class EvalReport:
    f1_normal: float
    f2_ciw: float
    map: float
    per_class: dict  # code -> ClassReport

    def to_text(self) -> str:
        """key=value lines, percent scale with 2 decimals."""
        lines = [
            f"f1_normal={100 * self.f1_normal:.2f}",
            f"f2_ciw={100 * self.f2_ciw:.2f}",
            f"map={100 * self.map:.2f}",
        ]
        for code, rep in self.per_class.items():
            lines.append(f"{code}.precision={100 * rep.precision:.2f}")
            lines.append(f"{code}.recall={100 * rep.recall:.2f}")
            lines.append(f"{code}.f2={100 * rep.f2:.2f}")
            ap = "absent" if rep.ap is None else f"{100 * rep.ap:.2f}"
            lines.append(f"{code}.ap={ap}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {
            "f1_normal": self.f1_normal,
            "f2_ciw": self.f2_ciw,
            "map": self.map,
            "per_class": {
                code: {"precision": r.precision, "recall": r.recall, "f2": r.f2, "ap": r.ap}
                for code, r in self.per_class.items()
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def evaluate(probs, targets, table: ClassTable, threshold: float = 0.5) -> EvalReport:
    counts = confusion_for_table(probs, targets, table, threshold)
    aps = per_class_ap(probs, targets)
    per = {}
    for j, entry in enumerate(table):
        p, r = precision_recall(counts.per_class[entry.code])
        per[entry.code] = ClassReport(p, r, f_beta(p, r, 2.0), aps[j])
    return EvalReport(
        f1_normal=f1_normal(counts),
        f2_ciw=f2_ciw(counts, table),
        map=mean_average_precision(aps),
        per_class=per,
    )
