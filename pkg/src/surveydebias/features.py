"""Column layout shared by the simulator, the models and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from sklearn.utils.validation import check_array


@dataclass(frozen=True)
class FeatureSpec:
    """Fixed column order of a feature matrix.

    Columns are ``id_fields`` (hashed into learned embeddings), then
    ``categorical`` fields (one-hot, given as ``(name, cardinality)``), then
    ``numeric`` fields (standardised at fit time).
    """

    id_fields: Tuple[str, ...] = ("user_id", "item_id", "author_id")
    categorical: Tuple[Tuple[str, int], ...] = (("language", 4), ("region", 4), ("device", 3))
    numeric: Tuple[str, ...] = ()

    @property
    def columns(self) -> Tuple[str, ...]:
        return self.id_fields + tuple(n for n, _ in self.categorical) + self.numeric

    @property
    def cardinality(self) -> Dict[str, int]:
        return dict(self.categorical)

    def index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise KeyError(f"unknown feature {name!r}; known: {', '.join(self.columns)}") from None

    def select(self, names) -> "FeatureSpec":
        """Sub-layout keeping only ``names`` (order follows this spec)."""
        names = set(names)
        missing = names - set(self.columns)
        if missing:
            raise KeyError(f"unknown features {sorted(missing)}")
        return FeatureSpec(
            tuple(f for f in self.id_fields if f in names),
            tuple(c for c in self.categorical if c[0] in names),
            tuple(f for f in self.numeric if f in names),
        )

    def to_dict(self) -> dict:
        return {
            "id_fields": list(self.id_fields),
            "categorical": [[n, c] for n, c in self.categorical],
            "numeric": list(self.numeric),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(
            tuple(d["id_fields"]),
            tuple((n, int(c)) for n, c in d["categorical"]),
            tuple(d["numeric"]),
        )


def check_features(X, spec: FeatureSpec) -> np.ndarray:
    """Validate a feature matrix against ``spec`` and return it as float64."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != len(spec.columns):
        raise ValueError(f"X has {X.shape[1]} columns, layout expects {len(spec.columns)} ({', '.join(spec.columns)})")
    n_id = len(spec.id_fields)
    ids = X[:, :n_id]
    if np.any(ids < 0) or np.any(ids != np.floor(ids)):
        raise ValueError("id columns must hold non-negative integers")
    for j, (name, card) in enumerate(spec.categorical):
        col = X[:, n_id + j]
        if np.any(col != np.floor(col)) or np.any(col < 0) or np.any(col >= card):
            raise ValueError(f"categorical column {name!r} must hold integer codes in [0, {card})")
    return X


def check_targets(Y, n_samples: int, n_heads: int) -> np.ndarray:
    """Label matrix of shape (n_samples, n_heads); NaN marks not-applicable."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape != (n_samples, n_heads):
        raise ValueError(f"Y has shape {Y.shape}, expected {(n_samples, n_heads)}")
    known = ~np.isnan(Y)
    if np.any((Y[known] != 0) & (Y[known] != 1)):
        raise ValueError("labels must be 0, 1 or NaN")
    return Y


def check_sample_weight(sample_weight, n_samples: int) -> np.ndarray:
    if sample_weight is None:
        return np.ones(n_samples)
    w = np.asarray(sample_weight, dtype=np.float64).reshape(-1)
    if w.shape[0] != n_samples:
        raise ValueError(f"sample_weight has {w.shape[0]} entries, expected {n_samples}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("sample_weight must be finite and positive")
    return w


@dataclass
class Encoded:
    """Encoded batch: backbone input, LHUC input and the bucket indices per id field."""

    x: np.ndarray
    lhuc_x: np.ndarray | None
    buckets: Dict[str, np.ndarray] = field(default_factory=dict)
