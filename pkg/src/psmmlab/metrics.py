"""PAD error rates, ROC, operating-point selection and cross-protocol aggregation.

Scores are bona fide likelihoods; a sample is accepted as bona fide when
``score >= threshold``.  Labels are 1 for bona fide and 0 for attack.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MetricsError(ValueError):
    pass


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise MetricsError(f"{len(s)} scores but {len(y)} labels")
    if not np.all(np.isfinite(s)):
        raise MetricsError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise MetricsError("labels must be 0 (attack) or 1 (bona fide)")
    y = y.astype(int)
    if not (y == 1).any() or not (y == 0).any():
        raise MetricsError("both bona fide and attack samples are required")
    return s, y


@dataclass(frozen=True)
class ErrorRates:
    apcer: float
    bpcer: float
    acer: float


def apcer_bpcer_acer(scores, labels, threshold: float, pais: Sequence[str] | None = None, worst_pai: bool = False) -> ErrorRates:
    """Attack and bona fide error rates at ``threshold`` and their mean.

    With ``worst_pai`` the APCER is the maximum over attack instruments
    (``pais`` gives one tag per sample); otherwise all attacks are pooled.
    """
    s, y = _validate(scores, labels)
    attack = y == 0
    if worst_pai:
        if pais is None:
            raise MetricsError("worst_pai requires per-sample PAI tags")
        tags = np.asarray(pais).reshape(-1)
        if tags.shape != s.shape:
            raise MetricsError("one PAI tag per sample is required")
        apcer = max(float(np.mean(s[attack & (tags == t)] >= threshold)) for t in np.unique(tags[attack]))
    else:
        apcer = float(np.mean(s[attack] >= threshold))
    bpcer = float(np.mean(s[~attack] < threshold))
    return ErrorRates(apcer, bpcer, (apcer + bpcer) / 2)


def acer(apcer: float, bpcer: float) -> float:
    return (apcer + bpcer) / 2


@dataclass(frozen=True)
class ROC:
    thresholds: np.ndarray  # descending, starting at +inf
    fpr: np.ndarray
    tpr: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc(scores, labels) -> ROC:
    """ROC swept over every distinct score, plus the all-reject point at +inf."""
    s, y = _validate(scores, labels)
    thr = np.concatenate([[np.inf], np.unique(s)[::-1]])
    pos, neg = s[y == 1], s[y == 0]
    tpr = np.array([np.mean(pos >= t) for t in thr])
    fpr = np.array([np.mean(neg >= t) for t in thr])
    return ROC(thr, fpr, tpr)


def tpr_at_fpr(scores, labels, targets) -> list[float]:
    """TPR at the operating point of highest TPR whose FPR does not exceed each target.

    The ROC is read as a step function: no interpolation between points.
    """
    targets = np.atleast_1d(np.asarray(targets, dtype=np.float64))
    if np.any((targets <= 0) | (targets > 1)):
        raise MetricsError("FPR targets must lie in (0, 1]")
    curve = roc(scores, labels)
    return [float(curve.tpr[curve.fpr <= t].max()) for t in targets]


def eer_threshold(scores, labels) -> float:
    """Distinct score minimising ``|FPR - FNR|``; ties go to the lower threshold."""
    s, y = _validate(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    n_pos, n_neg = len(pos), len(neg)
    best, best_key = None, None
    for t in np.unique(s):  # ascending, so strict < keeps the lowest tie
        fa = int(np.sum(neg >= t))
        fr = int(np.sum(pos < t))
        key = abs(fa * n_pos - fr * n_neg)  # integer form of |fa/n_neg - fr/n_pos|
        if best_key is None or key < best_key:
            best, best_key = float(t), key
    return best


def aggregate_mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1 denominator)."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(v) < 2:
        raise MetricsError("aggregation needs at least two values")
    return float(v.mean()), float(v.std(ddof=1))


# --------------------------------------------------------------------------
# score files and reports
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreRow:
    path: str
    score: float
    label: int
    sub_protocol: str
    pai: str = ""


def write_scores(path, rows: Sequence[ScoreRow], meta: dict[str, str] | None = None) -> Path:
    """``path score label sub_protocol`` per line; ``# key=value`` header lines carry metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}={v}\n")
        for r in rows:
            fh.write(f"{r.path} {r.score:.17g} {r.label} {r.sub_protocol}\n")
    return path


def read_scores(path) -> tuple[list[ScoreRow], dict[str, str]]:
    rows, meta = [], {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            k, sep, v = line[1:].strip().partition("=")
            if sep:
                meta[k.strip()] = v.strip()
            continue
        parts = line.split()
        if len(parts) != 4:
            raise MetricsError(f"{path}:{lineno}: expected 'path score label sub_protocol'")
        p, score, label, sub = parts
        if label not in ("0", "1"):
            raise MetricsError(f"{path}:{lineno}: label must be 0 or 1")
        try:
            value = float(score)
        except ValueError:
            raise MetricsError(f"{path}:{lineno}: bad score {score!r}") from None
        rows.append(ScoreRow(p, value, int(label), sub, pai_from_path(p)))
    return rows, meta


def pai_from_path(path: str) -> str:
    """PAI tag parsed from a ``subject/<pai>_<k>/modality`` clip path, or ''."""
    parts = path.split("/")
    return parts[1].rsplit("_", 1)[0] if len(parts) >= 2 else ""


@dataclass
class SubProtocolReport:
    sub_protocol: str
    threshold: float
    rates: ErrorRates
    tpr: dict[float, float]
    n_bona: int
    n_attack: int


def evaluate_rows(
    rows: Sequence[ScoreRow],
    threshold: float | None = None,
    fpr_targets=(1e-2, 1e-3, 1e-4),
    worst_pai: bool = False,
) -> SubProtocolReport:
    """Metrics of one score file; without a threshold the file's own EER point is used."""
    subs = {r.sub_protocol for r in rows}
    if len(subs) != 1:
        raise MetricsError(f"a score file must hold one sub-protocol, got {sorted(subs)}")
    scores = [r.score for r in rows]
    labels = [r.label for r in rows]
    if threshold is None:
        threshold = eer_threshold(scores, labels)
    rates = apcer_bpcer_acer(scores, labels, threshold, [r.pai for r in rows], worst_pai)
    tprs = tpr_at_fpr(scores, labels, list(fpr_targets))
    n_bona = sum(labels)
    return SubProtocolReport(subs.pop(), threshold, rates, dict(zip(fpr_targets, tprs)), n_bona, len(labels) - n_bona)


def protocol_of(sub_protocol: str) -> str:
    return sub_protocol.split("_")[0]


def format_report(reports: Sequence[SubProtocolReport]) -> tuple[str, str]:
    """Human-readable table (percent) and ``key=value`` lines (fractions).

    The Avg±Std row appears only when two or more sub-protocols are given.
    """
    if not reports:
        raise MetricsError("no score files to report")
    protos = {protocol_of(r.sub_protocol) for r in reports}
    if len(protos) != 1:
        raise MetricsError(f"score files mix protocols {sorted(protos)}")
    lines = [f"{'Prot.':<8}{'APCER(%)':>14}{'BPCER(%)':>14}{'ACER(%)':>14}"]
    kv = []
    for r in reports:
        a, b, c = (100 * x for x in (r.rates.apcer, r.rates.bpcer, r.rates.acer))
        lines.append(f"{r.sub_protocol:<8}{a:>14.1f}{b:>14.1f}{c:>14.1f}")
        p = r.sub_protocol
        kv += [f"{p}.threshold={r.threshold!r}", f"{p}.apcer={r.rates.apcer!r}", f"{p}.bpcer={r.rates.bpcer!r}", f"{p}.acer={r.rates.acer!r}"]
        kv += [f"{p}.tpr_at_fpr_{t:g}={v!r}" for t, v in r.tpr.items()]
    if len(reports) >= 2:
        cells = []
        for metric in ("apcer", "bpcer", "acer"):
            vals = [100 * getattr(r.rates, metric) for r in reports]
            m, s = aggregate_mean_std(vals)
            cells.append(f"{m:.1f}±{s:.1f}")
            kv += [f"avg.{metric}={m / 100!r}", f"std.{metric}={s / 100!r}"]
        lines.append(f"{'Avg±Std':<8}" + "".join(f"{c:>14}" for c in cells))
    else:
        lines.append("note: a single sub-protocol was given, so the Avg±Std row is omitted")
    return "\n".join(lines) + "\n", "\n".join(kv) + "\n"
