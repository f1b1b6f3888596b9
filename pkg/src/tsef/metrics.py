"""Saliency-vs-mask and attack-outcome metrics, aggregated per sample."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

N_THRESHOLDS = 100
TABLE_COLUMNS = ("F1", "ASR", "AUPRC", "AUP", "AUR")


class MetricError(ValueError):
    pass


def thresholds(n: int = N_THRESHOLDS) -> np.ndarray:
    """Uniform grid of midpoints strictly inside (0, 1)."""
    return (np.arange(n) + 0.5) / n


@dataclass
class ThresholdCurve:
    thresholds: np.ndarray
    precision: np.ndarray  # nan where the selection is empty
    recall: np.ndarray
    valid: np.ndarray


def _flat_pair(M, Q) -> tuple[np.ndarray, np.ndarray]:
    M = np.asarray(getattr(M, "data", M), dtype=np.float64).ravel()
    Q = np.asarray(getattr(Q, "data", Q), dtype=np.float64).ravel() > 0.5
    if M.shape != Q.shape:
        raise MetricError(f"saliency has {M.size} entries, mask has {Q.size}")
    if not Q.any():
        raise MetricError("undefined recall: reference mask has no positive entry")
    return M, Q


def threshold_curve(M, Q, n: int = N_THRESHOLDS) -> ThresholdCurve:
    s, q = _flat_pair(M, Q)
    tau = thresholds(n)
    sel = s[None, :] >= tau[:, None]
    size = sel.sum(axis=1)
    hits = (sel & q[None, :]).sum(axis=1)
    valid = size > 0
    prec = np.full(n, np.nan)
    prec[valid] = hits[valid] / size[valid]
    return ThresholdCurve(tau, prec, hits / q.sum(), valid)


def aup_aur(M, Q, n: int = N_THRESHOLDS) -> tuple[float, float]:
    """Mean precision over thresholds with a nonempty selection; mean recall over all."""
    c = threshold_curve(M, Q, n)
    aup = float(c.precision[c.valid].mean()) if c.valid.any() else 0.0
    return aup, float(c.recall.mean())


def auprc(M, Q) -> float:
    """Trapezoidal area under the precision-recall sweep of descending scores.

    Entries with equal scores enter the selection together, so a constant
    map yields the single point (1, p/n) and the area p/n.
    """
    s, q = _flat_pair(M, Q)
    order = np.argsort(-s, kind="stable")
    s, q = s[order], q[order]
    tp = np.cumsum(q)
    # keep only the last index of each run of equal scores
    ends = np.append(np.nonzero(s[1:] != s[:-1])[0], s.size - 1)
    tp = tp[ends].astype(np.float64)
    k = ends + 1.0
    precision = tp / k
    recall = tp / q.sum()
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[precision[0]], precision])
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))


def asr(predicted, target, original) -> float:
    """Share of samples predicted as their target and differing from the clean prediction."""
    predicted, target, original = (np.asarray(v) for v in (predicted, target, original))
    if predicted.size == 0:
        return float("nan")
    return float(np.mean((predicted == target) & (predicted != original)))


def confusion_matrix(true, pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true), np.asarray(pred)), 1)
    return cm


def target_f1(predicted, target, n_classes: int | None = None) -> float:
    """Micro-averaged F1 of predictions against the target labels."""
    predicted, target = np.asarray(predicted), np.asarray(target)
    if predicted.size == 0:
        return float("nan")
    n_classes = n_classes or int(max(predicted.max(), target.max())) + 1
    cm = confusion_matrix(target, predicted, n_classes)
    tp = np.trace(cm)
    fp = cm.sum(axis=0).sum() - tp
    fn = cm.sum(axis=1).sum() - tp
    return float(2 * tp / (2 * tp + fp + fn))


def mean_stderr(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


@dataclass
class MetricsReport:
    n: int
    f1: tuple[float, float]
    asr: tuple[float, float]
    auprc: tuple[float, float]
    aup: tuple[float, float]
    aur: tuple[float, float]
    n_saliency: int = 0
    label: str = ""
    extra: dict = field(default_factory=dict)

    def columns(self) -> dict[str, tuple[float, float]]:
        return {"F1": self.f1, "ASR": self.asr, "AUPRC": self.auprc, "AUP": self.aup, "AUR": self.aur}

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("f1", "asr", "auprc", "aup", "aur"):
            d[k] = {"mean": d[k][0], "stderr": d[k][1]}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        kw = dict(d)
        for k in ("f1", "asr", "auprc", "aup", "aur"):
            kw[k] = (kw[k]["mean"], kw[k]["stderr"])
        return cls(**kw)


def evaluate(predicted, target, original, saliency=None, reference=None, label: str = "") -> MetricsReport:
    """Per-sample metrics with mean and standard error.

    ASR and F1 use every sample; the saliency metrics skip samples whose
    reference mask is empty.
    """
    predicted, target, original = (np.asarray(v).astype(np.int64) for v in (predicted, target, original))
    n = predicted.size
    hit = ((predicted == target) & (predicted != original)).astype(np.float64)
    correct = (predicted == target).astype(np.float64)
    f1_mean = target_f1(predicted, target) if n else float("nan")
    f1 = (f1_mean, mean_stderr(correct)[1])
    rows = {"auprc": [], "aup": [], "aur": []}
    if saliency is not None and reference is not None:
        for M, Q in zip(saliency, reference):
            if not np.any(np.asarray(Q) > 0.5):
                continue
            rows["auprc"].append(auprc(M, Q))
            p, r = aup_aur(M, Q)
            rows["aup"].append(p)
            rows["aur"].append(r)
    return MetricsReport(n, f1, mean_stderr(hit), mean_stderr(rows["auprc"]), mean_stderr(rows["aup"]),
                         mean_stderr(rows["aur"]), len(rows["auprc"]), label)


def _cell(v: tuple[float, float]) -> str:
    m, s = v
    if not np.isfinite(m):
        return "n/a"
    return f"{m:.3f} ± {s:.3f}"


def render(reports: list[MetricsReport], fmt: str = "markdown") -> str:
    """Table of reports with columns F1, ASR, AUPRC, AUP, AUR."""
    if fmt == "json":
        import json

        return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["label", "n"]
        for c in TABLE_COLUMNS:
            header += [c, f"{c}_stderr"]
        w.writerow(header)
        for r in reports:
            row = [r.label, r.n]
            for c in TABLE_COLUMNS:
                m, s = r.columns()[c]
                row += [f"{m:.6f}", f"{s:.6f}"]
            w.writerow(row)
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| Method | " + " | ".join(TABLE_COLUMNS) + " |", "|---" * (len(TABLE_COLUMNS) + 1) + "|"]
        for r in reports:
            lines.append(f"| {r.label} | " + " | ".join(_cell(r.columns()[c]) for c in TABLE_COLUMNS) + " |")
        return "\n".join(lines) + "\n"
    raise MetricError(f"unknown format {fmt!r}; use json, csv or markdown")
