"""Survey rates, AUC, calibration, per-user feedback AUC and stratified reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    """A metric is undefined for the given input."""


@dataclass(frozen=True)
class PredictionRecord:
    user_id: int
    item_id: int
    head: str
    p: float
    y: int
    ipw_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"prediction {self.p} outside [0, 1]")
        if self.y not in (0, 1):
            raise ValueError("label must be 0 or 1")
        if not self.ipw_weight > 0:
            raise ValueError("ipw_weight must be positive")


def records_to_arrays(records: Iterable[PredictionRecord]):
    """``(user_ids, p, y, w)`` arrays from a record list."""
    records = list(records)
    users = np.array([r.user_id for r in records], dtype=np.int64)
    p = np.array([r.p for r in records], dtype=np.float64)
    y = np.array([r.y for r in records], dtype=np.float64)
    w = np.array([r.ipw_weight for r in records], dtype=np.float64)
    return users, p, y, w


@dataclass
class SurveyTally:
    """Show/submit counts of one survey kind plus per-answer submit counts."""

    kind: str
    shows: int = 0
    submits: int = 0
    answers: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.submits > self.shows:
            raise ValueError("submits cannot exceed shows")
        if any(c > self.submits for c in self.answers.values()):
            raise ValueError("an answer count exceeds the number of submits")

    def add(self, shown: bool, submitted: bool, answers: Sequence[str] = ()):
        if submitted and not shown:
            raise ValueError("a survey cannot be submitted without being shown")
        self.shows += int(shown)
        self.submits += int(submitted)
        if submitted:
            for a in set(answers):
                self.answers[a] = self.answers.get(a, 0) + 1


SURVEY_OPTIONS = {
    "satisfaction": ("like", "neutral", "dislike"),
    "inappropriate": ("appropriate", "inappropriate", "sexual", "disgusting", "hateful", "violent", "spam", "uninteresting"),
}


def survey_issue_rate(tally: SurveyTally, option: str, options: Optional[Sequence[str]] = None) -> float:
    """Share of submits that selected ``option``.

    ``options`` defaults to the standard answers of ``tally.kind``.
    """
    known = options if options is not None else SURVEY_OPTIONS.get(tally.kind, ())
    if option not in known:
        raise MetricError(f"unknown option {option!r} for {tally.kind} survey")
    if tally.submits == 0:
        raise MetricError("rate undefined with zero submits")
    return tally.answers.get(option, 0) / tally.submits


def survey_like_rate(tally: SurveyTally) -> float:
    """Share of satisfaction-survey submits answering "like"."""
    if tally.submits == 0:
        raise MetricError("rate undefined with zero submits")
    return tally.answers.get("like", 0) / tally.submits


def _binary(p, y):
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    return p, y


def auc(p, y) -> float:
    """Mann-Whitney AUC; a tied positive/negative pair counts one half."""
    p, y = _binary(p, y)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = p.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes")
    ranks = rankdata(p)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pair_auc(pos_scores, neg_scores, tie_value: float = 0.0) -> float:
    """Fraction of (positive, negative) pairs ranked correctly.

    Ties score ``tie_value``; the default 0 is the strict indicator
    ``I(p_i > p_j)``.
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.sort(np.asarray(neg_scores, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise MetricError("need at least one positive and one negative")
    below = np.searchsorted(neg, pos, side="left").sum()
    if tie_value:
        ties = (np.searchsorted(neg, pos, side="right") - np.searchsorted(neg, pos, side="left")).sum()
        return float((below + tie_value * ties) / (pos.size * neg.size))
    return float(below / (pos.size * neg.size))


def user_auc(user_ids, p, y, tie_value: float = 0.0) -> float:
    """Mean over users of the per-user pair AUC.

    Users without both a positive and a negative item are skipped.
    """
    users = np.asarray(user_ids).reshape(-1)
    p, y = _binary(p, y)
    order = np.argsort(users, kind="stable")
    users, p, y = users[order], p[order], y[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    vals = []
    for pu, yu in zip(np.split(p, bounds), np.split(y, bounds)):
        pos = yu == 1
        if pos.any() and (~pos).any():
            vals.append(pair_auc(pu[pos], pu[~pos], tie_value))
    if not vals:
        raise MetricError("no user has both positive and negative feedback")
    return math.fsum(vals) / len(vals)


NEGATIVE_FEEDBACK = ("dislike", "report")
POSITIVE_FEEDBACK = ("like", "share", "favorite")


def feedback_labels(engagements: Sequence[str], positive: Sequence[str]) -> np.ndarray:
    """1 where the engagement outcome is in ``positive``, else 0."""
    positive = set(positive)
    return np.array([1.0 if e in positive else 0.0 for e in engagements])


def nfb_uauc(user_ids, p, engagements, positive=NEGATIVE_FEEDBACK, tie_value: float = 0.0) -> float:
    """Per-user AUC against dislike/report feedback, averaged over users."""
    return user_auc(user_ids, p, feedback_labels(engagements, positive), tie_value)


def pfb_uauc(user_ids, p, engagements, positive=POSITIVE_FEEDBACK, tie_value: float = 0.0) -> float:
    """Per-user AUC against like/share/favorite feedback, averaged over users."""
    return user_auc(user_ids, p, feedback_labels(engagements, positive), tie_value)


def calibration(p, y, weights=None) -> float:
    """``mean(p) / mean(y) - 1``; optionally weighted means."""
    p, y = _binary(p, y)
    w = np.ones_like(p) if weights is None else np.asarray(weights, dtype=np.float64)
    mean_y = float((w * y).sum() / w.sum())
    if mean_y <= 0:
        raise MetricError("calibration undefined without positives")
    return float((w * p).sum() / w.sum()) / mean_y - 1.0


def nearest_rank_quantiles(values, qs: Sequence[float]) -> np.ndarray:
    """Nearest-rank quantiles: the ``ceil(q * n)``-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise MetricError("no values")
    ranks = [max(1, math.ceil(q * v.size)) for q in qs]
    return np.array([v[r - 1] for r in ranks])


@dataclass
class Stratum:
    label: str
    lower: float
    upper: float
    n: int
    auc: Optional[float]
    calibration: Optional[float]


def stratified_report(p, y, propensity, quantiles=(0.25, 0.5, 0.75), edges=None) -> List[Stratum]:
    """AUC and calibration per propensity bucket.

    Buckets are ``[P0, Pq1), [Pq1, Pq2), ... [Pqk, max]`` with edges taken by
    nearest rank from ``propensity`` unless explicit ``edges`` are given. A bucket with
    a single class (or no rows) reports None for the undefined metric.
    """
    p, y = _binary(p, y)
    prop = np.asarray(propensity, dtype=np.float64).reshape(-1)
    if prop.shape != p.shape:
        raise ValueError("need one propensity per record")
    if edges is None:
        edges = list(nearest_rank_quantiles(prop, quantiles))
        names = ["0"] + [f"P{round(q * 100)}" for q in quantiles] + ["P100"]
    else:
        edges = [float(e) for e in edges]
        if edges != sorted(edges):
            raise ValueError("edges must be non-decreasing")
        names = ["0"] + [f"{e:g}" for e in edges] + ["max"]
    bounds = [-np.inf] + edges + [np.inf]
    out = []
    for i in range(len(bounds) - 1):
        lo, hi = bounds[i], bounds[i + 1]
        last = i == len(bounds) - 2
        sel = (prop >= lo) & ((prop <= hi) if last else (prop < hi))
        label = f"[{names[i]},{names[i + 1]}{']' if last else ')'}"
        a = c = None
        if sel.any():
            try:
                a = auc(p[sel], y[sel])
            except MetricError:
                pass
            try:
                c = calibration(p[sel], y[sel])
            except MetricError:
                pass
        out.append(Stratum(label, float(lo), float(hi), int(sel.sum()), a, c))
    return out
