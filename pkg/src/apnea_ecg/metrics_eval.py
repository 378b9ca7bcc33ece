"""Confusion counts, classification metrics and the R vs R+S ablation table."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

METRIC_KEYS = ("accuracy", "sensitivity", "specificity", "f1_sa", "f1_non_sa")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    sensitivity: float
    specificity: float
    f1_sa: float
    f1_non_sa: float
    counts: ConfusionCounts
    degenerate: tuple[str, ...] = field(default=())

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in METRIC_KEYS}
        d["counts"] = asdict(self.counts)
        d["degenerate"] = list(self.degenerate)
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: float(d[k]) for k in METRIC_KEYS},
                   counts=ConfusionCounts(**d["counts"]),
                   degenerate=tuple(d.get("degenerate", ())))

    def render(self) -> str:
        c = self.counts
        rows = [
            ("Accuracy", self.accuracy),
            ("Sensitivity", self.sensitivity),
            ("Specificity", self.specificity),
            ("F1 (SA)", self.f1_sa),
            ("F1 (non-SA)", self.f1_non_sa),
        ]
        out = [f"{name:<12} {100 * v:7.2f}%" for name, v in rows]
        out.append(f"{'TP/TN/FP/FN':<12} {c.tp}/{c.tn}/{c.fp}/{c.fn}")
        if self.degenerate:
            out.append(f"degenerate: {', '.join(self.degenerate)}")
        return "\n".join(out)


def confusion(predicted, truth) -> ConfusionCounts:
    p = np.asarray(predicted).astype(np.int64).ravel()
    t = np.asarray(truth).astype(np.int64).ravel()
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} labels")
    if not (np.isin(p, (0, 1)).all() and np.isin(t, (0, 1)).all()):
        raise ValueError("labels must be binary")
    return ConfusionCounts(
        tp=int(np.sum((p == 1) & (t == 1))),
        tn=int(np.sum((p == 0) & (t == 0))),
        fp=int(np.sum((p == 1) & (t == 0))),
        fn=int(np.sum((p == 0) & (t == 1))),
    )


def _ratio(num: int, den: int, name: str, flags: list) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def compute_metrics(c: ConfusionCounts) -> MetricsReport:
    """Sensitivity, specificity, accuracy and F1 (both classes) from counts.

    A zero denominator gives 0 and is listed in ``degenerate``.
    """
    if c.total == 0:
        raise ValueError("no samples to evaluate")
    flags: list[str] = []
    return MetricsReport(
        accuracy=_ratio(c.tp + c.tn, c.total, "accuracy", flags),
        sensitivity=_ratio(c.tp, c.tp + c.fn, "sensitivity", flags),
        specificity=_ratio(c.tn, c.tn + c.fp, "specificity", flags),
        f1_sa=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "f1_sa", flags),
        f1_non_sa=_ratio(2 * c.tn, 2 * c.tn + c.fn + c.fp, "f1_non_sa", flags),
        counts=c,
        degenerate=tuple(flags),
    )


@dataclass(frozen=True)
class AblationTable:
    report_r: MetricsReport
    report_rs: MetricsReport

    @property
    def deltas(self) -> dict[str, float]:
        return {k: getattr(self.report_rs, k) - getattr(self.report_r, k) for k in METRIC_KEYS}

    def as_dict(self) -> dict:
        return {"r": self.report_r.as_dict(), "rs": self.report_rs.as_dict(), "delta": self.deltas}

    def render(self) -> str:
        head = f"{'Features':<34}{'Acc (%)':>9}{'Spe (%)':>9}{'Sen (%)':>9}{'F1 SA':>9}{'F1 non-SA':>11}"
        order = ("accuracy", "specificity", "sensitivity", "f1_sa", "f1_non_sa")

        def row(label: str, vals: dict, signed: bool = False) -> str:
            fmt = "{:+.2f}" if signed else "{:.2f}"
            cells = [fmt.format(100 * vals[k]) for k in order]
            return f"{label:<34}" + "".join(f"{c:>9}" for c in cells[:-1]) + f"{cells[-1]:>11}"

        return "\n".join([
            head,
            "-" * len(head),
            row("RR intervals, R amplitude", self.report_r.as_dict()),
            row("RR, R amp, SS intervals, S amp", self.report_rs.as_dict()),
            row("delta (R+S - R)", self.deltas, signed=True),
        ])


def compare_feature_sets(report_r: MetricsReport, report_rs: MetricsReport) -> AblationTable:
    a, b = report_r.counts, report_rs.counts
    if a.total != b.total or a.positives != b.positives:
        raise ValueError(
            f"reports cover different segments: {a.total} ({a.positives} SA) vs {b.total} ({b.positives} SA)"
        )
    return AblationTable(report_r, report_rs)
