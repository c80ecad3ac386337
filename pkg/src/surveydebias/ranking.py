"""Ranking-stage fusion of survey-head predictions with other engagement scores."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .features import FeatureSpec


def final_score(p: Mapping[str, float], weights: Mapping[str, float], other_s: float) -> float:
    """``sum_i w_i * p_i + other_s``."""
    total = 0.0
    for head, w in weights.items():
        if not math.isfinite(w):
            raise ValueError(f"weight for {head!r} is not finite")
        if w == 0:
            continue
        if head not in p:
            raise KeyError(f"no prediction for weighted head {head!r}")
        total += w * p[head]
    return total + other_s


def final_scores(probs: np.ndarray, heads: Sequence[str], weights: Mapping[str, float], other_s) -> np.ndarray:
    """Vectorised :func:`final_score` over rows of a ``(n, n_heads)`` matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    out = np.zeros(probs.shape[:-1])
    for head, w in weights.items():
        if not math.isfinite(w):
            raise ValueError(f"weight for {head!r} is not finite")
        if w == 0:
            continue
        if head not in heads:
            raise KeyError(f"no prediction for weighted head {head!r}")
        out = out + w * probs[..., list(heads).index(head)]
    # same summation order as final_score
    return out + np.asarray(other_s, dtype=np.float64)


@dataclass
class Candidate:
    item_id: int
    features: np.ndarray
    other_s: float = 0.0


@dataclass
class RankRequest:
    candidates: List[Candidate]
    weights: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("a rank request needs at least one candidate")
        for head, w in self.weights.items():
            if not math.isfinite(w):
                raise ValueError(f"weight for {head!r} is not finite")


@dataclass
class RankedItem:
    item_id: int
    final_s: float
    p: Dict[str, float]


@dataclass
class RankResult:
    items: List[RankedItem]
    k: int

    def to_dict(self) -> dict:
        return {"k": self.k, "items": [{"item_id": r.item_id, "final_s": r.final_s, "p": r.p} for r in self.items]}


def top_k_order(scores: np.ndarray, item_ids: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` best rows: score descending, then item id ascending."""
    order = np.lexsort((item_ids, -scores))
    return order[:k]


def rank_top_k(request: RankRequest, model, k: int = 10) -> RankResult:
    """Score every candidate with ``model.predict_proba`` and keep the best ``k``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    X = np.vstack([np.asarray(c.features, dtype=np.float64) for c in request.candidates])
    probs = model.predict_proba(X)
    heads = list(model.heads_)
    other = np.array([c.other_s for c in request.candidates], dtype=np.float64)
    ids = np.array([c.item_id for c in request.candidates])
    scores = final_scores(probs, heads, request.weights, other)
    keep = top_k_order(scores, ids, k)
    items = [
        RankedItem(int(ids[i]), float(scores[i]), {h: float(probs[i, j]) for j, h in enumerate(heads)})
        for i in keep
    ]
    return RankResult(items, k)


def request_from_json(doc: dict, spec: FeatureSpec) -> Tuple[RankRequest, int]:
    """Parse a rank request document.

    ``{"user": {...}, "candidates": [{"item_id", "features": {...}, "other_s"}],
    "weights": {...}, "k": 10}``; user fields and candidate fields are merged
    to fill the columns of ``spec``.
    """
    user = doc.get("user", {})
    cands = []
    for c in doc["candidates"]:
        merged = {"item_id": c["item_id"], **user, **c.get("features", {})}
        missing = [col for col in spec.columns if col not in merged]
        if missing:
            raise KeyError(f"candidate {c['item_id']} lacks features {missing}")
        cands.append(Candidate(int(c["item_id"]), np.array([merged[col] for col in spec.columns], dtype=np.float64),
                               float(c.get("other_s", 0.0))))
    weights = {k: float(v) for k, v in doc.get("weights", {}).items()}
    return RankRequest(cands, weights), int(doc.get("k", 10))


# -- offline A/B replay ----------------------------------------------------------


@dataclass
class Arm:
    """One ranking configuration: a scorer returning ``(n, n_heads)`` probabilities plus head weights."""

    name: str
    model: object
    weights: Dict[str, float]
    spec: Optional[FeatureSpec] = None


@dataclass
class ArmOutcome:
    name: str
    inappropriate_rate: float
    like_rate: float
    dislike_rate: float
    issue_rates: Dict[str, float]
    n_selected: int


class OracleScorer:
    """Scores candidates with the simulator's true answer probabilities."""

    def __init__(self, world):
        self.world = world
        self.heads_ = ("satisfaction", "inappropriate") + tuple(world.config.issues)

    def predict_pairs(self, users, items) -> np.ndarray:
        t = self.world.truth(users, items)
        cols = [t["p_dislike_ans"], t["p_inappropriate_ans"]]
        issue = t["p_inappropriate_ans"][..., None] * t["p_option_given_inappropriate"]
        cols += [issue[..., k] for k in range(issue.shape[-1])]
        return np.stack(cols, axis=-1)


def ab_rank_eval(world, arms: Sequence[Arm], k: int = 10, n_requests: int = 10000, n_candidates: int = 50,
                 seed: int = 0, batch: int = 2000) -> List[ArmOutcome]:
    """Replay identical candidate sets through every arm.

    Each request is a random user with ``n_candidates`` random items;
    ``other_s`` is the simulator's engagement affinity. Reported rates are
    the oracle expectations (not samples) averaged over all selected items.
    """
    if not 1 <= n_candidates <= world.config.n_items:
        raise ValueError(f"n_candidates={n_candidates} must lie in [1, n_items={world.config.n_items}]")
    if k < 1 or n_requests < 1:
        raise ValueError("k and n_requests must be positive")
    rng = np.random.default_rng([seed, 3])
    users = rng.integers(0, world.config.n_users, size=n_requests)
    items = np.stack([rng.choice(world.config.n_items, size=n_candidates, replace=False) for _ in range(n_requests)])
    issues = world.config.issues
    totals = {a.name: np.zeros(3 + len(issues)) for a in arms}
    for start in range(0, n_requests, batch):
        u = np.repeat(users[start : start + batch, None], n_candidates, axis=1)
        it = items[start : start + batch]
        truth = world.truth(u, it)
        other = truth["affinity"]
        for arm in arms:
            if isinstance(arm.model, OracleScorer):
                probs = arm.model.predict_pairs(u, it)
            else:
                X = world.feature_matrix(u, it, arm.spec)
                probs = arm.model.predict_proba(X).reshape(u.shape + (-1,))
            scores = final_scores(probs, list(arm.model.heads_), arm.weights, other)
            order = np.lexsort((it, -scores), axis=-1)[:, :k]
            take = lambda a: np.take_along_axis(a, order, axis=1)  # noqa: E731
            opt = truth["p_option_given_inappropriate"]
            vals = [take(truth["p_inappropriate_ans"]).sum(), take(truth["p_like_ans"]).sum(),
                    take(truth["p_dislike_ans"]).sum()]
            for j in range(len(issues)):
                vals.append(take(truth["p_inappropriate_ans"] * opt[..., j]).sum())
            totals[arm.name] += np.array(vals)
    n_sel = n_requests * min(k, n_candidates)
    out = []
    for arm in arms:
        t = totals[arm.name] / n_sel
        out.append(ArmOutcome(arm.name, float(t[0]), float(t[1]), float(t[2]),
                              {name: float(t[3 + j]) for j, name in enumerate(issues)}, n_sel))
    return out
