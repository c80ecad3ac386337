"""Survey-submit propensity model and inverse-propensity estimators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.utils.validation import check_is_fitted

from .features import FeatureSpec
from .survey_model import HeadSpec, MultiHeadEstimator, MultiHeadNet

DEFAULT_CLIP_FLOOR = 0.01


def submit_heads(kinds: Sequence[str]):
    return tuple(HeadSpec(f"{k}_submit", k, "submitted") for k in kinds)


@dataclass(frozen=True)
class PropensityRecord:
    kind: str
    predicted: float
    clipped: float
    ipw_weight: float


def clip_propensity(p, clip_floor: float = DEFAULT_CLIP_FLOOR):
    """Propensities floored at ``clip_floor`` and capped at 1."""
    if not 0 < clip_floor <= 1:
        raise ValueError("clip_floor must lie in (0, 1]")
    return np.clip(np.asarray(p, dtype=np.float64), clip_floor, 1.0)


def ipw_weight(p, clip_floor: float = DEFAULT_CLIP_FLOOR):
    """``1 / max(p, clip_floor)``; never exceeds ``1 / clip_floor``."""
    return 1.0 / clip_propensity(p, clip_floor)


class SubmitModel(MultiHeadEstimator):
    """Predicts P(submit | survey shown), one head per survey kind.

    Same architecture family as :class:`~surveydebias.survey_model.SurveyModel`
    but without LHUC gates. ``fit`` takes the survey kind of every show and a
    0/1 submitted flag; each row trains only the head of its own kind.
    """

    model_kind = "submit"

    def __init__(
        self,
        features: Optional[FeatureSpec] = None,
        kinds=("satisfaction", "inappropriate"),
        backbone_dims=(512, 256, 128),
        head_dims=(64, 16, 1),
        use_se=True,
        se_reduction=4,
        embedding_dim=16,
        hash_buckets=2**16,
        clip_floor=DEFAULT_CLIP_FLOOR,
        optimizer="adam",
        learning_rate=1e-3,
        batch_size=256,
        epochs=5,
        max_steps=None,
        random_state=0,
    ):
        self.features = features
        self.kinds = kinds
        self.backbone_dims = backbone_dims
        self.head_dims = head_dims
        self.use_se = use_se
        self.se_reduction = se_reduction
        self.embedding_dim = embedding_dim
        self.hash_buckets = hash_buckets
        self.clip_floor = clip_floor
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.random_state = random_state

    def _make_net(self, spec):
        return MultiHeadNet(
            spec,
            submit_heads(self.kinds),
            backbone_dims=self.backbone_dims,
            head_dims=self.head_dims,
            use_lhuc=False,
            use_se=self.use_se,
            se_reduction=self.se_reduction,
            embedding_dim=self.embedding_dim,
            hash_buckets=self.hash_buckets,
            seed=self.random_state,
        )

    def fit(self, X, kinds, submitted):
        kinds = np.asarray(kinds)
        submitted = np.asarray(submitted, dtype=np.float64).reshape(-1)
        if kinds.shape[0] != submitted.shape[0]:
            raise ValueError("kinds and submitted must have equal length")
        unknown = set(kinds.tolist()) - set(self.kinds)
        if unknown:
            raise ValueError(f"unknown survey kinds {sorted(unknown)}")
        Y = np.full((len(submitted), len(self.kinds)), np.nan)
        for j, kind in enumerate(self.kinds):
            rows = kinds == kind
            labels = submitted[rows]
            if labels.size == 0 or labels.min() == labels.max():
                raise ValueError(f"survey kind {kind!r} needs both submitted and non-submitted shows")
            Y[rows, j] = labels
        return self._fit_arrays(X, Y)

    def predict_submit(self, X, kinds) -> np.ndarray:
        """P(submit | shown) of each row under its own survey kind."""
        probs = self.predict_proba(X)
        cols = np.array([self._kind_index(k) for k in np.asarray(kinds).tolist()], dtype=np.int64)
        return probs[np.arange(len(cols)), cols]

    def _kind_index(self, kind) -> int:
        try:
            return list(self.kinds).index(kind)
        except ValueError:
            raise KeyError(f"unknown survey kind {kind!r}") from None

    def propensity(self, x, kind) -> PropensityRecord:
        """Propensity record of a single feature row."""
        check_is_fitted(self, "net_")
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        p = float(self.predict_proba(x)[0, self._kind_index(kind)])
        return make_propensity_record(kind, p, self.clip_floor)

    def ipw_weights(self, X, kinds) -> np.ndarray:
        return ipw_weight(self.predict_submit(X, kinds), self.clip_floor)


def make_propensity_record(kind: str, predicted: float, clip_floor: float = DEFAULT_CLIP_FLOOR) -> PropensityRecord:
    clipped = float(clip_propensity(predicted, clip_floor))
    return PropensityRecord(kind, float(predicted), clipped, 1.0 / clipped)


def _check_submits(flags, sub_pred):
    flags = np.asarray(flags, dtype=np.float64).reshape(-1)
    sub_pred = np.asarray(sub_pred, dtype=np.float64).reshape(-1)
    if flags.size == 0:
        raise ValueError("no submits")
    if flags.shape != sub_pred.shape:
        raise ValueError("flags and sub_pred must have equal length")
    if np.any(sub_pred <= 0) or np.any(sub_pred > 1):
        raise ValueError("sub_pred must lie in (0, 1]")
    return flags, sub_pred


def debiased_issue_rate(issue_flags, sub_pred) -> float:
    """Self-normalised inverse-propensity issue rate over submitted surveys.

    ``sum(issue / sub_pred) / sum(1 / sub_pred)``.
    """
    flags, sub_pred = _check_submits(issue_flags, sub_pred)
    w = 1.0 / sub_pred
    # rescaling by the largest weight makes equal propensities give exact unit weights
    w = w / w.max()
    return float((w * flags).sum() / w.sum())


def horvitz_thompson_rate(issue_flags, sub_pred, n_shows: int) -> float:
    """Unnormalised estimate ``sum(issue / sub_pred) / n_shows``."""
    flags, sub_pred = _check_submits(issue_flags, sub_pred)
    if n_shows < 1:
        raise ValueError("n_shows must be positive")
    return float((flags / sub_pred).sum() / n_shows)


def attach_ipw(X, kinds, model: SubmitModel, sample_weight=None) -> np.ndarray:
    """Sample weights for survey-model training: existing weights times the IPW factor."""
    w = model.ipw_weights(X, kinds)
    if sample_weight is not None:
        w = w * np.asarray(sample_weight, dtype=np.float64)
    return w
