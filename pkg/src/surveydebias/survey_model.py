"""Multi-head survey model with optional LHUC gating and SE rescaling.

The network is a shared backbone of dense layers followed by one small tower
per survey option. Two optional modules modulate the backbone:

* LHUC: a chain of ``two_sigmoid`` layers driven by the id embeddings plus a
  few contextual features. Its i-th output multiplies the i-th backbone
  output channel-wise (after the backbone activation). Gate layers start at
  zero so every gate starts at exactly 1.
* SE: on the final backbone output ``s`` (each unit is one channel with
  spatial size 1, so the squeeze is the identity),
  ``e = sigmoid(W2 relu(W1 s))`` and the representation becomes ``e * s``.
  ``W2`` starts at zero so ``e`` starts at exactly 0.5.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .features import Encoded, FeatureSpec, check_features, check_sample_weight, check_targets
from .nn_core import (
    ConfigurationError,
    MlpStack,
    OptimizerState,
    Params,
    TrainingError,
    activate,
    activation_grad,
    apply_update,
    check_finite,
    clip_probabilities,
    forward,
    glorot_uniform,
    grad_check,
    load_params,
    save_params,
    sigmoid,
    stack_backward,
)

logger = logging.getLogger(__name__)

_HASH_MULT = np.uint64(0x9E3779B97F4A7C15)


@dataclass(frozen=True)
class HeadSpec:
    """One output head: positive when ``option`` is among the answers of a ``kind`` survey."""

    name: str
    kind: str
    option: str

    def to_dict(self):
        return {"name": self.name, "kind": self.kind, "option": self.option}


SATISFACTION_HEADS = (HeadSpec("satisfaction", "satisfaction", "dislike"),)
INAPPROPRIATE_HEADS = (
    HeadSpec("inappropriate", "inappropriate", "inappropriate"),
    HeadSpec("sexual", "inappropriate", "sexual"),
    HeadSpec("violent", "inappropriate", "violent"),
    HeadSpec("spam", "inappropriate", "spam"),
)
DEFAULT_HEADS = SATISFACTION_HEADS + INAPPROPRIATE_HEADS


def head_labels(kind: str, answers: Sequence[str], heads: Sequence[HeadSpec]) -> np.ndarray:
    """Label row for one submitted survey; NaN for heads of other survey kinds.

    For a satisfaction survey only the satisfaction head is labelled ("dislike"
    answer => positive). For an inappropriate survey each option head is
    positive iff that option was selected.
    """
    answers = set(answers)
    return np.array(
        [(1.0 if h.option in answers else 0.0) if h.kind == kind else np.nan for h in heads]
    )


def _as_heads(heads) -> Tuple[HeadSpec, ...]:
    out = []
    for h in heads:
        if isinstance(h, HeadSpec):
            out.append(h)
        elif isinstance(h, dict):
            out.append(HeadSpec(**h))
        else:
            out.append(HeadSpec(*h))
    if len({h.name for h in out}) != len(out):
        raise ConfigurationError("head names must be unique")
    if not out:
        raise ConfigurationError("at least one head is required")
    return tuple(out)


class MultiHeadNet:
    """Parameters and manual forward/backward passes of the survey network."""

    def __init__(
        self,
        spec: FeatureSpec,
        heads: Sequence[HeadSpec],
        backbone_dims=(512, 256, 128),
        head_dims=(64, 16, 1),
        use_lhuc=False,
        use_se=False,
        se_reduction=4,
        lhuc_features=("language", "region", "device"),
        embedding_dim=16,
        hash_buckets=2**16,
        seed=0,
    ):
        self.spec = spec
        self.heads = _as_heads(heads)
        self.backbone_dims = tuple(int(d) for d in backbone_dims)
        self.head_dims = tuple(int(d) for d in head_dims)
        self.use_lhuc = bool(use_lhuc)
        self.use_se = bool(use_se)
        self.se_reduction = int(se_reduction)
        self.lhuc_features = tuple(lhuc_features) if use_lhuc else ()
        self.embedding_dim = int(embedding_dim)
        self.hash_buckets = int(hash_buckets)
        self._validate()

        rng = np.random.default_rng(seed)
        self.params: Params = {}
        self.embeddings: Dict[str, np.ndarray] = {}
        for f in spec.id_fields:
            table = rng.normal(0.0, 0.05, size=(self.hash_buckets, self.embedding_dim))
            self.embeddings[f] = table
            self.params[f"emb.{f}"] = table

        self.backbone = MlpStack.init(rng, self.input_dim, self.backbone_dims, ["relu"] * len(self.backbone_dims))
        self.params.update(self.backbone.parameters("backbone"))

        self.lhuc: Optional[MlpStack] = None
        if self.use_lhuc:
            self.lhuc = MlpStack.init(
                rng, self.lhuc_input_dim, self.backbone_dims, ["two_sigmoid"] * len(self.backbone_dims), zero=True
            )
            self.params.update(self.lhuc.parameters("lhuc"))

        rep = self.backbone_dims[-1]
        if self.use_se:
            squeezed = rep // self.se_reduction
            self.params["se.w1"] = glorot_uniform(rng, squeezed, rep)
            self.params["se.w2"] = np.zeros((rep, squeezed))

        acts = ["relu"] * (len(self.head_dims) - 1) + ["sigmoid"]
        self.towers: Dict[str, MlpStack] = {}
        for h in self.heads:
            tower = MlpStack.init(rng, rep, self.head_dims, acts)
            self.towers[h.name] = tower
            self.params.update(tower.parameters(f"head.{h.name}"))

        self.numeric_mean = np.zeros(len(spec.numeric))
        self.numeric_scale = np.ones(len(spec.numeric))

    def _validate(self):
        if not self.backbone_dims or any(d < 1 for d in self.backbone_dims):
            raise ConfigurationError(f"invalid backbone dims {self.backbone_dims}")
        if not self.head_dims or self.head_dims[-1] != 1 or any(d < 1 for d in self.head_dims):
            raise ConfigurationError(f"head dims must be positive and end in 1, got {self.head_dims}")
        if self.use_se and (self.se_reduction < 1 or self.backbone_dims[-1] // self.se_reduction < 1):
            raise ConfigurationError(
                f"se_reduction {self.se_reduction} too large for {self.backbone_dims[-1]} channels"
            )
        if self.embedding_dim < 1 or self.hash_buckets < 1:
            raise ConfigurationError("embedding_dim and hash_buckets must be positive")
        unknown = set(self.lhuc_features) - set(self.spec.columns)
        if unknown:
            raise ConfigurationError(f"unknown LHUC features {sorted(unknown)}")

    # -- layout ---------------------------------------------------------------

    def _width(self, name: str) -> int:
        if name in self.spec.id_fields:
            return self.embedding_dim
        card = self.spec.cardinality
        return card.get(name, 1)

    @property
    def input_dim(self) -> int:
        return sum(self._width(c) for c in self.spec.columns)

    @property
    def lhuc_columns(self) -> Tuple[str, ...]:
        extra = [c for c in self.spec.columns if c in self.lhuc_features and c not in self.spec.id_fields]
        return self.spec.id_fields + tuple(extra)

    @property
    def lhuc_input_dim(self) -> int:
        return sum(self._width(c) for c in self.lhuc_columns)

    def bucket(self, field: str, ids: np.ndarray) -> np.ndarray:
        salt = np.uint64(((self.spec.id_fields.index(field) + 1) * 0x632BE59BD9B4E019) % 2**64)
        h = ids.astype(np.uint64) * _HASH_MULT + salt
        return (h % np.uint64(self.hash_buckets)).astype(np.int64)

    def encode(self, X: np.ndarray, mask: Sequence[str] = ()) -> Encoded:
        """Dense backbone input (and LHUC input) for a validated feature matrix.

        Features listed in ``mask`` have all their slots set to zero.
        """
        n = X.shape[0]
        mask = set(mask)
        blocks: Dict[str, np.ndarray] = {}
        buckets = {}
        col = 0
        for f in self.spec.id_fields:
            idx = self.bucket(f, X[:, col])
            buckets[f] = idx
            blocks[f] = np.zeros((n, self.embedding_dim)) if f in mask else self.embeddings[f][idx]
            col += 1
        for name, card in self.spec.categorical:
            onehot = np.zeros((n, card))
            if name not in mask:
                onehot[np.arange(n), X[:, col].astype(np.int64)] = 1.0
            blocks[name] = onehot
            col += 1
        for j, name in enumerate(self.spec.numeric):
            v = (X[:, col] - self.numeric_mean[j]) / self.numeric_scale[j]
            blocks[name] = np.zeros((n, 1)) if name in mask else v[:, None]
            col += 1
        x = np.concatenate([blocks[c] for c in self.spec.columns], axis=1)
        lhuc_x = None
        if self.use_lhuc:
            lhuc_x = np.concatenate([blocks[c] for c in self.lhuc_columns], axis=1)
        return Encoded(x, lhuc_x, buckets)

    # -- forward / backward ---------------------------------------------------

    def forward(self, X: np.ndarray, mask: Sequence[str] = (), gates: Optional[List[np.ndarray]] = None):
        """Per-head probabilities ``(n, n_heads)`` and the cache for :meth:`backward`.

        ``gates`` overrides the LHUC gate outputs (one array per backbone
        layer, broadcastable to ``(n, dim)``); it also works on a model built
        without LHUC.
        """
        enc = self.encode(X, mask)
        cache = {"enc": enc}
        cache["gates_learned"] = gates is None and self.use_lhuc
        if cache["gates_learned"]:
            gates = forward(self.lhuc, enc.lhuc_x)
        cache["gates"] = gates
        h = enc.x
        acts, hs = [], []
        for i, layer in enumerate(self.backbone.layers):
            a = activate(h @ layer.weight.T + layer.bias, layer.activation)
            acts.append(a)
            h = a * gates[i] if gates is not None else a
            hs.append(h)
        cache["acts"], cache["hs"] = acts, hs
        if self.use_se:
            s = h
            u = np.maximum(s @ self.params["se.w1"].T, 0.0)
            e = sigmoid(u @ self.params["se.w2"].T)
            h = e * s
            cache["se"] = (s, u, e)
        cache["rep"] = h
        tower_outs = {}
        probs = np.empty((X.shape[0], len(self.heads)))
        for j, head in enumerate(self.heads):
            outs = forward(self.towers[head.name], h)
            tower_outs[head.name] = outs
            probs[:, j] = outs[-1][:, 0]
        cache["towers"] = tower_outs
        return probs, cache

    def relu_pattern(self, X: np.ndarray) -> np.ndarray:
        """On/off state of every relu unit for the rows of ``X``, flattened."""
        _, cache = self.forward(X)
        parts = [a > 0 for a, layer in zip(cache["acts"], self.backbone.layers) if layer.activation == "relu"]
        if self.use_se:
            parts.append(cache["se"][1] > 0)
        for head in self.heads:
            layers = self.towers[head.name].layers
            parts += [o > 0 for o, layer in zip(cache["towers"][head.name], layers) if layer.activation == "relu"]
        return np.concatenate([p.reshape(-1) for p in parts])

    def backward(self, cache, dlogits: np.ndarray) -> Params:
        """Gradients of a loss whose derivative w.r.t. each head's logit is ``dlogits``."""
        grads: Params = {}
        rep = cache["rep"]
        drep = np.zeros_like(rep)
        for j, head in enumerate(self.heads):
            g = dlogits[:, j : j + 1]
            if not np.any(g):
                continue
            drep += self._tower_backward(self.towers[head.name], rep, cache["towers"][head.name], g, f"head.{head.name}", grads)

        dh = drep
        if self.use_se:
            s, u, e = cache["se"]
            de = dh * s
            ds = dh * e
            dze = de * e * (1.0 - e)
            grads["se.w2"] = dze.T @ u
            du = dze @ self.params["se.w2"]
            dzu = du * (u > 0)
            grads["se.w1"] = dzu.T @ s
            dh = ds + dzu @ self.params["se.w1"]

        enc = cache["enc"]
        gates = cache["gates"]
        dgates = []
        for i in range(len(self.backbone.layers) - 1, -1, -1):
            layer = self.backbone.layers[i]
            a = cache["acts"][i]
            if gates is not None:
                dgates.append(dh * a)
                da = dh * gates[i]
            else:
                da = dh
            dz = da * activation_grad(a, layer.activation)
            inp = enc.x if i == 0 else cache["hs"][i - 1]
            grads[f"backbone.{i}.weight"] = dz.T @ inp
            grads[f"backbone.{i}.bias"] = dz.sum(axis=0)
            dh = dz @ layer.weight
        dx = dh
        dgates.reverse()

        dlhuc_x = None
        if cache["gates_learned"]:
            dlhuc_x = stack_backward(self.lhuc, enc.lhuc_x, gates, dgates, "lhuc", grads)

        self._embedding_backward(enc, dx, dlhuc_x, grads)
        return grads

    @staticmethod
    def _tower_backward(stack, x, outs, dlogit, prefix, grads):
        upstream = dlogit
        for i in range(len(stack.layers) - 1, -1, -1):
            layer = stack.layers[i]
            if i == len(stack.layers) - 1:
                dz = upstream
            else:
                dz = upstream * activation_grad(outs[i], layer.activation)
            inp = x if i == 0 else outs[i - 1]
            grads[f"{prefix}.{i}.weight"] = dz.T @ inp
            grads[f"{prefix}.{i}.bias"] = dz.sum(axis=0)
            upstream = dz @ layer.weight
        return upstream

    def _embedding_backward(self, enc: Encoded, dx, dlhuc_x, grads):
        k = self.embedding_dim
        for pos, f in enumerate(self.spec.id_fields):
            d = dx[:, pos * k : (pos + 1) * k]
            if dlhuc_x is not None:
                d = d + dlhuc_x[:, pos * k : (pos + 1) * k]
            g = np.zeros_like(self.embeddings[f])
            np.add.at(g, enc.buckets[f], d)
            grads[f"emb.{f}"] = g

    # -- loss -----------------------------------------------------------------

    def loss_and_grads(self, X, Y, w, with_grads=True):
        """Sum over heads of the weight-normalised BCE on applicable rows."""
        probs, cache = self.forward(X)
        p = clip_probabilities(probs)
        known = ~np.isnan(Y)
        dlogits = np.zeros_like(probs)
        loss = 0.0
        for j in range(Y.shape[1]):
            rows = known[:, j]
            if not rows.any():
                continue
            wn = w[rows] / w[rows].sum()
            y = Y[rows, j]
            pj = p[rows, j]
            loss += float(-(wn * (y * np.log(pj) + (1.0 - y) * np.log1p(-pj))).sum())
            dlogits[rows, j] = wn * (probs[rows, j] - y)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss}")
        if not with_grads:
            return loss, None
        return loss, self.backward(cache, dlogits)

    def loss(self, X, Y, w) -> float:
        return self.loss_and_grads(X, Y, w, with_grads=False)[0]

    # -- persistence ----------------------------------------------------------

    def config(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "heads": [h.to_dict() for h in self.heads],
            "backbone_dims": list(self.backbone_dims),
            "head_dims": list(self.head_dims),
            "use_lhuc": self.use_lhuc,
            "use_se": self.use_se,
            "se_reduction": self.se_reduction,
            "lhuc_features": list(self.lhuc_features),
            "embedding_dim": self.embedding_dim,
            "hash_buckets": self.hash_buckets,
        }

    def layer_table(self) -> dict:
        """Per-stack ``[in_dim, out_dim, activation]`` rows (recorded in saved models)."""
        stacks = {"backbone": self.backbone, **{f"head.{k}": v for k, v in self.towers.items()}}
        if self.lhuc is not None:
            stacks["lhuc"] = self.lhuc
        table = {k: [[l.in_dim, l.out_dim, l.activation] for l in st.layers] for k, st in stacks.items()}
        if self.use_se:
            rep = self.backbone_dims[-1]
            table["se"] = [[rep, rep // self.se_reduction, "relu"], [rep // self.se_reduction, rep, "sigmoid"]]
        return table

    def state(self) -> Params:
        out = dict(self.params)
        out["buffer.numeric_mean"] = self.numeric_mean
        out["buffer.numeric_scale"] = self.numeric_scale
        return out

    def load_state(self, state: Params):
        for name, arr in state.items():
            if name == "buffer.numeric_mean":
                self.numeric_mean = arr.copy()
            elif name == "buffer.numeric_scale":
                self.numeric_scale = arr.copy()
            elif name in self.params:
                if self.params[name].shape != arr.shape:
                    raise ConfigurationError(f"shape mismatch for {name}: {arr.shape} vs {self.params[name].shape}")
                self.params[name][...] = arr
            else:
                raise ConfigurationError(f"unexpected parameter {name!r}")


class MultiHeadEstimator(BaseEstimator):
    """Shared fit/predict machinery for the survey and submit models."""

    model_kind = "multihead"

    def _make_net(self, spec: FeatureSpec) -> MultiHeadNet:
        raise NotImplementedError

    def _fit_arrays(self, X, Y, sample_weight=None):
        spec = self.features or FeatureSpec()
        X = check_features(X, spec)
        n = X.shape[0]
        if n == 0:
            raise ValueError("cannot fit on an empty dataset")
        net = self._make_net(spec)
        Y = check_targets(Y, n, len(net.heads))
        if np.any(np.isnan(Y).all(axis=1)):
            raise ValueError("every example needs at least one applicable head label")
        w = check_sample_weight(sample_weight, n)

        if spec.numeric:
            numeric = X[:, len(spec.id_fields) + len(spec.categorical) :]
            net.numeric_mean = numeric.mean(axis=0)
            scale = numeric.std(axis=0)
            net.numeric_scale = np.where(scale > 0, scale, 1.0)

        state = OptimizerState(kind=self.optimizer, learning_rate=self.learning_rate)
        rng = np.random.default_rng([self.random_state, 1])
        trace = []
        steps = 0
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            total, batches = 0.0, 0
            for start in range(0, n, self.batch_size):
                if self.max_steps is not None and steps >= self.max_steps:
                    break
                idx = order[start : start + self.batch_size]
                loss, grads = net.loss_and_grads(X[idx], Y[idx], w[idx])
                check_finite(grads)
                apply_update(net.params, grads, state)
                total += loss
                batches += 1
                steps += 1
            if batches:
                trace.append(total / batches)
                logger.debug("%s epoch %d loss %.6f", self.model_kind, epoch, trace[-1])
            if self.max_steps is not None and steps >= self.max_steps:
                break
        self.net_ = net
        self.loss_trace_ = trace
        self.n_steps_ = steps
        self.heads_ = tuple(h.name for h in net.heads)
        return self

    def predict_proba(self, X, mask: Sequence[str] = ()) -> np.ndarray:
        """Per-head probabilities, one column per head in ``heads_`` order."""
        check_is_fitted(self, "net_")
        X = check_features(X, self.net_.spec)
        return self.net_.forward(X, mask=mask)[0]

    def head_index(self, name: str) -> int:
        check_is_fitted(self, "net_")
        try:
            return self.heads_.index(name)
        except ValueError:
            raise KeyError(f"unknown head {name!r}; model has {', '.join(self.heads_)}") from None

    def save(self, path):
        check_is_fitted(self, "net_")
        meta = {
            "model_kind": self.model_kind,
            "config": self.net_.config(),
            "layers": self.net_.layer_table(),
            "estimator_params": _jsonable(self.get_params()),
            "heads": list(self.heads_),
            "loss_trace": self.loss_trace_,
        }
        save_params(path, self.net_.state(), meta)

    @classmethod
    def load(cls, path):
        state, meta = load_params(path)
        if meta.get("model_kind") != cls.model_kind:
            raise ConfigurationError(f"{path} holds a {meta.get('model_kind')!r} model, expected {cls.model_kind!r}")
        cfg = dict(meta["config"])
        spec = FeatureSpec.from_dict(cfg.pop("spec"))
        net = MultiHeadNet(spec, [HeadSpec(**h) for h in cfg.pop("heads")], **cfg)
        net.load_state(state)
        params = dict(meta["estimator_params"])
        params["features"] = spec
        if "heads" in params:
            params["heads"] = tuple(net.heads)
        est = cls(**{k: v for k, v in params.items() if k in cls._get_param_names()})
        est.net_ = net
        est.heads_ = tuple(meta["heads"])
        est.loss_trace_ = list(meta.get("loss_trace", []))
        est.n_steps_ = None
        return est


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, FeatureSpec):
            continue
        if isinstance(v, tuple):
            v = [x.to_dict() if isinstance(x, HeadSpec) else x for x in v]
        out[k] = v
    return out


class SurveyModel(MultiHeadEstimator):
    """In-feed survey model: one probability per survey option.

    Parameters
    ----------
    features : FeatureSpec
        Column layout of ``X``.
    heads : sequence of HeadSpec
        Output heads in column order of ``Y`` and of ``predict_proba``.
    backbone_dims, head_dims : sequence of int
        Output sizes of the backbone layers and of each head tower.
    use_lhuc, use_se : bool
        Enable the LHUC gates / the SE block.
    se_reduction : int
        Bottleneck factor of the SE block.
    lhuc_features : sequence of str
        Contextual features fed to the LHUC tower next to the id embeddings.
    optimizer : {"adam", "sgd"}
    """

    model_kind = "survey"

    def __init__(
        self,
        features: Optional[FeatureSpec] = None,
        heads=DEFAULT_HEADS,
        backbone_dims=(512, 256, 128),
        head_dims=(64, 16, 1),
        use_lhuc=False,
        use_se=False,
        se_reduction=4,
        lhuc_features=("language", "region", "device"),
        embedding_dim=16,
        hash_buckets=2**16,
        optimizer="adam",
        learning_rate=1e-3,
        batch_size=256,
        epochs=5,
        max_steps=None,
        random_state=0,
    ):
        self.features = features
        self.heads = heads
        self.backbone_dims = backbone_dims
        self.head_dims = head_dims
        self.use_lhuc = use_lhuc
        self.use_se = use_se
        self.se_reduction = se_reduction
        self.lhuc_features = lhuc_features
        self.embedding_dim = embedding_dim
        self.hash_buckets = hash_buckets
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.random_state = random_state

    def _make_net(self, spec):
        return MultiHeadNet(
            spec,
            self.heads,
            backbone_dims=self.backbone_dims,
            head_dims=self.head_dims,
            use_lhuc=self.use_lhuc,
            use_se=self.use_se,
            se_reduction=self.se_reduction,
            lhuc_features=self.lhuc_features,
            embedding_dim=self.embedding_dim,
            hash_buckets=self.hash_buckets,
            seed=self.random_state,
        )

    def build(self) -> MultiHeadNet:
        """Freshly initialised network for this configuration (no training)."""
        return self._make_net(self.features or FeatureSpec())

    def fit(self, X, Y, sample_weight=None):
        """Train on submitted surveys.

        ``Y`` has one column per head; NaN marks heads of another survey kind,
        which then get no loss for that row.
        """
        return self._fit_arrays(X, Y, sample_weight)

    def score(self, X, Y, head=None):
        """Held-out AUC of one head (default: the first) on its labelled rows."""
        from .metrics import auc

        j = 0 if head is None else self.head_index(head)
        Y = check_targets(Y, len(X), len(self.heads_))
        rows = ~np.isnan(Y[:, j])
        return auc(self.predict_proba(np.asarray(X)[rows])[:, j], Y[rows, j])


def feature_importance(model: MultiHeadEstimator, X, Y, features=None, head=None) -> List[Tuple[str, float]]:
    """Rank features by the AUC lost when their slots are zeroed.

    Returns ``(feature, auc_full - auc_masked)`` sorted with the largest drop first.
    """
    from .metrics import auc

    check_is_fitted(model, "net_")
    spec = model.net_.spec
    features = list(spec.columns if features is None else features)
    for f in features:
        spec.index(f)
    j = 0 if head is None else model.head_index(head)
    X = check_features(X, spec)
    Y = check_targets(Y, X.shape[0], len(model.heads_))
    rows = ~np.isnan(Y[:, j])
    X, y = X[rows], Y[rows, j]
    base = auc(model.predict_proba(X)[:, j], y)
    out = [(f, base - auc(model.predict_proba(X, mask=[f])[:, j], y)) for f in features]
    return sorted(out, key=lambda t: (-t[1], t[0]))


def random_batch(spec: FeatureSpec, n: int, rng: np.random.Generator, n_heads: int, missing: float = 0.3):
    """Random valid ``(X, Y, w)`` for ``spec``; a fraction of labels is NaN."""
    cols = [rng.integers(0, 10_000, size=n).astype(np.float64) for _ in spec.id_fields]
    cols += [rng.integers(0, card, size=n).astype(np.float64) for _, card in spec.categorical]
    cols += [rng.normal(size=n) for _ in spec.numeric]
    X = np.column_stack(cols) if cols else np.zeros((n, 0))
    Y = rng.integers(0, 2, size=(n, n_heads)).astype(np.float64)
    Y[rng.random(Y.shape) < missing] = np.nan
    Y[np.isnan(Y).all(axis=1), 0] = 1.0
    w = rng.uniform(0.5, 3.0, size=n)
    return X, Y, w


def topology_grad_check(spec: FeatureSpec, use_lhuc: bool, use_se: bool, seed: int = 0, batch: int = 16,
                        h: float = 1e-4, heads=DEFAULT_HEADS, max_coords_per_param: int = 20,
                        stats: Optional[dict] = None, **net_kwargs) -> float:
    """Worst relative gradient error of one topology on a random batch.

    Every parameter is perturbed away from its initial value first, because
    the zero-initialised gate layers would otherwise hide half the chain rule.
    Coordinates whose finite-difference step crosses a relu kink are skipped.
    """
    rng = np.random.default_rng([seed, 7])
    net_kwargs.setdefault("hash_buckets", 1024)
    net = MultiHeadNet(spec, heads, use_lhuc=use_lhuc, use_se=use_se, seed=seed, **net_kwargs)
    for v in net.params.values():
        v += rng.normal(0.0, 0.1, size=v.shape)
    X, Y, w = random_batch(spec, batch, rng, len(net.heads))
    _, grads = net.loss_and_grads(X, Y, w)
    return grad_check(lambda: net.loss(X, Y, w), net.params, grads, h=h,
                      max_coords_per_param=max_coords_per_param, seed=seed,
                      pattern_fn=lambda: net.relu_pattern(X), stats=stats)
