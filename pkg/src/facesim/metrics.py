"""Evaluation metrics: MAE, Pearson correlation with a t-test, median-split accuracy."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import betainc
from scipy.stats import t as student_t

from .scores import ALL_CRITERIA, N_CRITERIA


class MetricError(ValueError):
    pass


class ConstantInputError(MetricError):
    pass


def _pair(preds, targets):
    preds = np.asarray(preds, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if preds.shape != targets.shape:
        raise MetricError(f"length mismatch: {preds.size} predictions vs {targets.size} targets")
    if preds.size == 0:
        raise MetricError("empty input")
    return preds, targets


def mae(preds, targets) -> float:
    preds, targets = _pair(preds, targets)
    return float(np.mean(np.abs(targets - preds)))


def pcc(preds, targets) -> float:
    preds, targets = _pair(preds, targets)
    if preds.size < 3:
        raise MetricError("correlation needs at least 3 pairs")
    if np.ptp(preds) == 0 or np.ptp(targets) == 0:
        raise ConstantInputError("correlation is undefined for constant input")
    dp = preds - preds.mean()
    dt = targets - targets.mean()
    sp = math.sqrt(float(dp @ dp))
    st = math.sqrt(float(dt @ dt))
    return float(np.clip((dt @ dp) / (st * sp), -1.0, 1.0))


def pcc_significance(r: float, n: int) -> tuple[float, float]:
    """Student t statistic r*sqrt(n-2)/sqrt(1-r^2) and its two-sided p value (n-2 dof)."""
    if n < 3:
        raise MetricError("significance needs at least 3 pairs")
    if not -1 <= r <= 1:
        raise MetricError(f"correlation {r} outside [-1, 1]")
    if abs(r) == 1:
        return math.copysign(math.inf, r), 0.0
    dof = n - 2
    t = r * math.sqrt(dof) / math.sqrt(1 - r * r)
    # two-sided tail of Student's t as a regularized incomplete beta function
    p = float(betainc(dof / 2, 0.5, dof / (dof + t * t)))
    return t, min(max(p, 0.0), 1.0)


def significance_threshold(n: int, alpha: float = 0.05) -> float:
    """Smallest |r| that is significant at level alpha (two-sided) for n pairs."""
    t_crit = float(student_t.isf(alpha / 2, n - 2))
    return t_crit / math.sqrt(n - 2 + t_crit**2)


def binary_accuracy(preds, targets) -> float:
    """Agreement after splitting both vectors at the target median (ties count as above)."""
    preds, targets = _pair(preds, targets)
    threshold = np.median(targets)
    return float(np.mean((preds >= threshold) == (targets >= threshold)))


@dataclass
class CriterionMetrics:
    mae: float
    pcc: float
    t: float
    p: float
    accuracy: float


@dataclass
class MetricReport:
    rows: dict[str, CriterionMetrics]
    n_pairs: int
    label: str = ""
    m_c: float | None = None
    config_hash: str = ""
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and not math.isfinite(x) else x

        return {
            "label": self.label,
            "m_c": self.m_c,
            "n_pairs": self.n_pairs,
            "config_hash": self.config_hash,
            "notes": list(self.notes),
            "criteria": {
                name: {k: clean(v) for k, v in asdict(row).items()}
                for name, row in self.rows.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        def num(x):
            return math.nan if x is None else float(x)

        rows = {
            name: CriterionMetrics(**{k: num(v) for k, v in row.items()})
            for name, row in d["criteria"].items()
        }
        return cls(rows, d["n_pairs"], d.get("label", ""), d.get("m_c"), d.get("config_hash", ""),
                   list(d.get("notes", [])))

    def csv_rows(self) -> list[dict]:
        out = []
        for name, row in self.rows.items():
            rec = {"label": self.label, "m_c": self.m_c, "criterion": name, "n_pairs": self.n_pairs}
            rec.update(asdict(row))
            rec["config_hash"] = self.config_hash
            out.append(rec)
        return out

    def pcc_of(self, name: str = "MS") -> float:
        return self.rows[name].pcc


CSV_FIELDS = ["label", "m_c", "criterion", "n_pairs", "mae", "pcc", "t", "p", "accuracy", "config_hash"]


def reports_to_csv(reports: list[MetricReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        for rec in rep.csv_rows():
            writer.writerow({k: _fmt(v) for k, v in rec.items()})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    return v


def metric_report(preds, targets, label: str = "", m_c=None, config_hash: str = "") -> MetricReport:
    """Report over (N, 5) head predictions and (N, 5) adjusted targets; MS is their row mean."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 2 or preds.shape[1] != N_CRITERIA:
        raise MetricError(f"expected matching (N, {N_CRITERIA}) arrays, got {preds.shape} and {targets.shape}")
    n = len(preds)
    if n == 0:
        raise MetricError("no pairs to evaluate")
    preds = np.column_stack([preds, preds.mean(axis=1)])
    targets = np.column_stack([targets, targets.mean(axis=1)])
    rows = {}
    notes = []
    for k, name in enumerate(ALL_CRITERIA):
        try:
            r = pcc(preds[:, k], targets[:, k])
            t, p = pcc_significance(r, n)
        except MetricError as exc:
            notes.append(f"{name}: {exc}")
            r = t = p = math.nan
        rows[name] = CriterionMetrics(
            mae=mae(preds[:, k], targets[:, k]),
            pcc=r,
            t=t,
            p=p,
            accuracy=binary_accuracy(preds[:, k], targets[:, k]),
        )
    return MetricReport(rows, n, label, m_c, config_hash, notes)
