"""Synthetic feed with known ground truth.

Every behavioural probability is logistic (or softmax) in user/item latents,
so each event carries its exact oracle probabilities. Response bias comes
from a user-level "submission temperament" that is correlated with the
user's satisfaction disposition through ``response_bias_corr``.

Ground-truth model for user ``u`` and item ``i``::

    affinity      = sat_scale * sat_u + <pref_u, quality_i> / sqrt(d) + base_i
                    + exp(+h * sat_u) * sum_a context[a][attr_u[a], category_i]
                    - exp(-h * sat_u) * issue_penalty * issue_i
    P(like|ans)    = (1 - neutral) * sigmoid(affinity)
    P(dislike|ans) = (1 - neutral) * (1 - sigmoid(affinity))
    P(inapp|ans)   = sigmoid(inapp_bias + inapp_issue * issue_i + inapp_sens * sens_u)
    P(k|ans)       = P(inapp|ans) * sigmoid(option_bias + option_scale * intensity_ik)
    P(ans|ss)      = sigmoid(submit_bias + temperament_u + submit_activity * activity_u)
    temperament_u  = temperament_scale * (rho * sat_u + sqrt(1 - rho^2) * noise_u) + temperament_shift
    P(like|ss)     = P(like|ans) * P(ans|ss)

where ``issue_i`` is the item's largest issue intensity and ``h`` is
``heterogeneity``: with h > 0, satisfied users weigh context more and item
issues less, so groups with different submission propensity differ in which
features drive their answers, not only in their base rate.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .features import FeatureSpec
from .nn_core import sigmoid

ENGAGEMENTS = ("none", "like", "dislike", "report")
SURVEY_KINDS = ("satisfaction", "inappropriate")


@dataclass
class SimConfig:
    n_users: int = 2000
    n_items: int = 400
    n_authors: int = 100
    latent_dim: int = 8
    languages: Tuple[float, ...] = (0.4, 0.3, 0.2, 0.1)
    regions: Tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    devices: Tuple[float, ...] = (0.5, 0.3, 0.2)
    n_categories: int = 6
    issues: Tuple[str, ...] = ("sexual", "violent", "spam")
    issue_item_share: float = 0.2

    sat_scale: float = 1.5
    heterogeneity: float = 1.0
    context_scale: float = 0.8
    issue_penalty: float = 3.0
    neutral: float = 0.2
    inapp_bias: float = -3.0
    inapp_issue: float = 6.0
    inapp_sens: float = 0.7
    option_bias: float = -2.0
    option_scale: float = 6.0

    response_bias_corr: float = -0.8
    submit_bias: float = -1.0
    submit_activity: float = 0.5
    temperament_scale: float = 1.0
    temperament_shift: float = 0.0
    history_window: int = 30

    impressions_per_user: int = 50
    show_prob: float = 0.6

    def __post_init__(self):
        for name in ("n_users", "n_items", "n_authors"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.latent_dim < 0:
            raise ValueError("latent_dim must be non-negative")
        if not 0.0 <= self.show_prob <= 1.0:
            raise ValueError("show_prob must lie in [0, 1]")
        if not -1.0 <= self.response_bias_corr <= 1.0:
            raise ValueError("response_bias_corr must lie in [-1, 1]")
        for name in ("languages", "regions", "devices"):
            probs = np.asarray(getattr(self, name), dtype=np.float64)
            if probs.ndim != 1 or probs.size == 0 or np.any(probs < 0) or not math.isclose(probs.sum(), 1.0):
                raise ValueError(f"{name} must be a probability vector")
            setattr(self, name, tuple(float(p) for p in probs))
        self.issues = tuple(self.issues)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown simulator settings {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @property
    def answer_vocab(self) -> Tuple[str, ...]:
        return ("like", "neutral", "dislike", "appropriate", "inappropriate") + self.issues


ATTRIBUTES = ("language", "region", "device")


def survey_spec(config: SimConfig) -> FeatureSpec:
    """Layout seen by the survey model."""
    return FeatureSpec(
        ("user_id", "item_id", "author_id"),
        (("language", len(config.languages)), ("region", len(config.regions)),
         ("device", len(config.devices)), ("category", config.n_categories)),
        ("activity", "item_neg_rate"),
    )


def submit_spec(config: SimConfig) -> FeatureSpec:
    """Layout seen by the submit model: survey features plus submission history."""
    s = survey_spec(config)
    return FeatureSpec(s.id_fields, s.categorical, s.numeric + ("history_submissions",))


@dataclass(frozen=True)
class SimUser:
    user_id: int
    preference: np.ndarray
    satisfaction: float
    issue_sensitivity: float
    activity: float
    temperament: float
    language: int
    region: int
    device: int


@dataclass(frozen=True)
class SimItem:
    item_id: int
    author_id: int
    quality: np.ndarray
    base: float
    category: int
    issue_intensity: Dict[str, float]


class World:
    """Users, items and the closed-form behavioural model linking them."""

    def __init__(self, config: SimConfig, seed: int):
        self.config = c = config
        self.seed = seed
        rng = np.random.default_rng([seed, 0])
        nu, ni, d = c.n_users, c.n_items, c.latent_dim

        self.pref = rng.standard_normal((nu, d))
        self.sat = rng.standard_normal(nu)
        xi = rng.standard_normal(nu)
        rho = c.response_bias_corr
        self.temperament = c.temperament_scale * (rho * self.sat + math.sqrt(1.0 - rho * rho) * xi) + c.temperament_shift
        self.activity = rng.standard_normal(nu)
        self.sens = rng.standard_normal(nu)
        self.attrs = {
            "language": rng.choice(len(c.languages), size=nu, p=c.languages),
            "region": rng.choice(len(c.regions), size=nu, p=c.regions),
            "device": rng.choice(len(c.devices), size=nu, p=c.devices),
        }
        self.activity_obs = self.activity + 0.3 * rng.standard_normal(nu)

        self.quality = rng.standard_normal((ni, d))
        self.base = 0.5 * rng.standard_normal(ni)
        self.category = rng.integers(0, c.n_categories, size=ni)
        self.author = rng.integers(0, c.n_authors, size=ni)
        k = len(c.issues)
        problematic = rng.random(ni) < c.issue_item_share
        intensity = rng.uniform(0.0, 0.05, size=(ni, k))
        if k:
            dominant = rng.integers(0, k, size=ni)
            strong = rng.beta(4.0, 2.0, size=ni)
            side = rng.uniform(0.0, 0.3, size=(ni, k))
            rows = np.flatnonzero(problematic)
            intensity[rows] = side[rows]
            intensity[rows, dominant[rows]] = strong[rows]
        self.intensity = intensity
        self.issue = intensity.max(axis=1) if k else np.zeros(ni)
        self.item_neg_rate = self.issue + 0.1 * rng.standard_normal(ni)

        self.context = {
            a: c.context_scale * rng.standard_normal((len(getattr(c, a + "s")), c.n_categories))
            for a in ATTRIBUTES
        }
        self.submit_prob = sigmoid(c.submit_bias + self.temperament + c.submit_activity * self.activity)
        self.history = rng.poisson(c.history_window * self.submit_prob)

    # -- row views -------------------------------------------------------------

    def user(self, u: int) -> SimUser:
        return SimUser(
            int(u), self.pref[u].copy(), float(self.sat[u]), float(self.sens[u]), float(self.activity[u]),
            float(self.temperament[u]), int(self.attrs["language"][u]), int(self.attrs["region"][u]),
            int(self.attrs["device"][u]),
        )

    def item(self, i: int) -> SimItem:
        return SimItem(
            int(i), int(self.author[i]), self.quality[i].copy(), float(self.base[i]), int(self.category[i]),
            {name: float(self.intensity[i, k]) for k, name in enumerate(self.config.issues)},
        )

    # -- oracle ----------------------------------------------------------------

    def preference_logits(self, users, items) -> np.ndarray:
        d = self.config.latent_dim
        if d == 0:
            return np.zeros(np.broadcast(users, items).shape)
        return np.einsum("...k,...k->...", self.pref[users], self.quality[items]) / math.sqrt(d)

    def affinity(self, users, items) -> np.ndarray:
        c = self.config
        s = c.sat_scale * self.sat[users] + self.preference_logits(users, items) + self.base[items]
        cat = self.category[items]
        ctx = sum(self.context[a][self.attrs[a][users], cat] for a in ATTRIBUTES)
        h = c.heterogeneity * self.sat[users]
        return s + np.exp(h) * ctx - np.exp(-h) * c.issue_penalty * self.issue[items]

    def truth(self, users, items) -> Dict[str, np.ndarray]:
        """Oracle probabilities for (user, item) pairs (arrays broadcast together)."""
        c = self.config
        users = np.asarray(users)
        items = np.asarray(items)
        aff = self.affinity(users, items)
        s = sigmoid(aff)
        p_like = (1.0 - c.neutral) * s
        p_dislike = (1.0 - c.neutral) * (1.0 - s)
        p_inapp = sigmoid(c.inapp_bias + c.inapp_issue * self.issue[items] + c.inapp_sens * self.sens[users])
        opt = sigmoid(c.option_bias + c.option_scale * self.intensity[items])
        p_ans = np.broadcast_to(self.submit_prob[users], aff.shape).copy()
        sens = self.sens[users]
        logits = np.stack(
            [
                np.zeros_like(aff),
                -1.0 + aff,
                -3.0 - 0.5 * aff + 3.0 * self.issue[items] + 0.5 * sens,
                -5.0 + 5.0 * self.issue[items] + 0.5 * sens,
            ],
            axis=-1,
        )
        logits -= logits.max(axis=-1, keepdims=True)
        ex = np.exp(logits)
        p_eng = ex / ex.sum(axis=-1, keepdims=True)
        return {
            "affinity": aff,
            "p_like_ans": p_like,
            "p_dislike_ans": p_dislike,
            "p_inappropriate_ans": p_inapp,
            "p_option_given_inappropriate": opt,
            "p_ans_ss": p_ans,
            "p_like_ss": p_like * p_ans,
            "p_engagement": p_eng,
        }

    def observables(self, users, items) -> Dict[str, np.ndarray]:
        users = np.asarray(users)
        items = np.asarray(items)
        return {
            "user_id": users,
            "item_id": items,
            "author_id": self.author[items],
            "language": self.attrs["language"][users],
            "region": self.attrs["region"][users],
            "device": self.attrs["device"][users],
            "category": self.category[items],
            "activity": self.activity_obs[users],
            "item_neg_rate": self.item_neg_rate[items],
            "history_submissions": self.history[users].astype(np.float64),
        }

    def feature_matrix(self, users, items, spec: FeatureSpec) -> np.ndarray:
        obs = self.observables(np.ravel(users), np.ravel(items))
        return np.column_stack([np.asarray(obs[c], dtype=np.float64) for c in spec.columns])


def generate_population(config: SimConfig, seed: int) -> World:
    return World(config, seed)


# -- events --------------------------------------------------------------------


@dataclass
class ImpressionEvent:
    user_id: int
    item_id: int
    author_id: int
    impression_index: int
    attrs: Dict[str, float]
    engagement: str
    survey_kind: str
    survey_shown: bool
    submitted: bool
    answers: Tuple[str, ...]
    p_like_ans: Optional[float] = None
    p_ans_ss: Optional[float] = None
    p_like_ss: Optional[float] = None


OBS_COLUMNS = ("language", "region", "device", "category", "activity", "item_neg_rate", "history_submissions")
INT_ATTRS = ("language", "region", "device", "category")


@dataclass
class EventLog:
    """Column-oriented impression log.

    Observable columns: ids, ``attrs``, ``engagement`` (index into
    ``ENGAGEMENTS``), ``kind`` (index into ``SURVEY_KINDS``), ``shown``,
    ``submitted``, ``answers`` (bitmask over ``vocab``). ``oracle`` holds the
    ground-truth sidecar columns and may be empty.
    """

    vocab: Tuple[str, ...]
    user_id: np.ndarray
    item_id: np.ndarray
    author_id: np.ndarray
    impression_index: np.ndarray
    attrs: Dict[str, np.ndarray]
    engagement: np.ndarray
    kind: np.ndarray
    shown: np.ndarray
    submitted: np.ndarray
    answers: np.ndarray
    oracle: Dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.user_id.shape[0]

    def subset(self, mask) -> "EventLog":
        sel = lambda a: a[mask]  # noqa: E731
        return EventLog(
            self.vocab, sel(self.user_id), sel(self.item_id), sel(self.author_id), sel(self.impression_index),
            {k: sel(v) for k, v in self.attrs.items()}, sel(self.engagement), sel(self.kind), sel(self.shown),
            sel(self.submitted), sel(self.answers), {k: sel(v) for k, v in self.oracle.items()},
        )

    def without_oracle(self) -> "EventLog":
        out = self.subset(slice(None))
        out.oracle = {}
        return out

    def answer_list(self, i: int, mask_col: Optional[np.ndarray] = None) -> Tuple[str, ...]:
        m = int((self.answers if mask_col is None else mask_col)[i])
        return tuple(a for b, a in enumerate(self.vocab) if m >> b & 1)

    def has_answer(self, name: str, latent: bool = False) -> np.ndarray:
        col = self.oracle["latent_answers"] if latent else self.answers
        return (col >> self.vocab.index(name)) & 1 == 1

    def kind_names(self) -> np.ndarray:
        return np.asarray(SURVEY_KINDS)[self.kind]

    def engagement_names(self) -> np.ndarray:
        return np.asarray(ENGAGEMENTS)[self.engagement]

    def row(self, i: int) -> ImpressionEvent:
        attrs = {k: (int(v[i]) if k in INT_ATTRS else float(v[i])) for k, v in self.attrs.items()}
        o = self.oracle
        return ImpressionEvent(
            int(self.user_id[i]), int(self.item_id[i]), int(self.author_id[i]), int(self.impression_index[i]),
            attrs, ENGAGEMENTS[self.engagement[i]], SURVEY_KINDS[self.kind[i]], bool(self.shown[i]),
            bool(self.submitted[i]), self.answer_list(i),
            float(o["p_like_ans"][i]) if o else None,
            float(o["p_ans_ss"][i]) if o else None,
            float(o["p_like_ss"][i]) if o else None,
        )

    def __iter__(self) -> Iterator[ImpressionEvent]:
        for i in range(len(self)):
            yield self.row(i)

    def feature_matrix(self, spec: FeatureSpec) -> np.ndarray:
        cols = {"user_id": self.user_id, "item_id": self.item_id, "author_id": self.author_id, **self.attrs}
        return np.column_stack([np.asarray(cols[c], dtype=np.float64) for c in spec.columns])


def _kind_of(user_ids, idx):
    # Deterministic per-impression alternation of survey kinds.
    h = (user_ids.astype(np.uint64) * np.uint64(0x9E3779B1) + idx.astype(np.uint64) * np.uint64(0x85EBCA77))
    return ((h >> np.uint64(7)) % np.uint64(len(SURVEY_KINDS))).astype(np.int64)


def simulate_feed(world: World, seed: int, impressions_per_user: Optional[int] = None,
                  show_prob: Optional[float] = None) -> EventLog:
    """Simulate impressions for every user.

    Each user draws from its own random stream seeded by ``(seed, user_id)``;
    output is ordered by user id, then impression index.
    """
    c = world.config
    n_imp = c.impressions_per_user if impressions_per_user is None else impressions_per_user
    show_prob = c.show_prob if show_prob is None else show_prob
    if not 0.0 <= show_prob <= 1.0:
        raise ValueError("show_prob must lie in [0, 1]")
    nu = c.n_users
    vocab = c.answer_vocab
    bit = {a: 1 << b for b, a in enumerate(vocab)}
    n_issue = len(c.issues)

    users = np.repeat(np.arange(nu), n_imp)
    idx = np.tile(np.arange(n_imp), nu)
    items = np.empty(nu * n_imp, dtype=np.int64)
    u_draws = np.empty((nu * n_imp, 5 + n_issue))
    for u in range(nu):
        rng = np.random.default_rng([seed, 1, u])
        sl = slice(u * n_imp, (u + 1) * n_imp)
        items[sl] = rng.integers(0, c.n_items, size=n_imp)
        u_draws[sl] = rng.random((n_imp, 5 + n_issue))

    t = world.truth(users, items)
    cum = np.cumsum(t["p_engagement"], axis=1)
    engagement = (u_draws[:, [0]] > cum[:, :-1]).sum(axis=1)
    kind = _kind_of(users, idx)
    shown = u_draws[:, 1] < show_prob
    submitted = shown & (u_draws[:, 2] < t["p_ans_ss"])

    # latent answer: what the user would answer if they submitted
    latent = np.zeros(len(users), dtype=np.int64)
    sat = kind == 0
    r = u_draws[:, 3]
    like = r < t["p_like_ans"]
    dislike = (~like) & (r < t["p_like_ans"] + t["p_dislike_ans"])
    latent[sat & like] = bit["like"]
    latent[sat & dislike] = bit["dislike"]
    latent[sat & ~like & ~dislike] = bit["neutral"]
    inapp = (~sat) & (u_draws[:, 4] < t["p_inappropriate_ans"])
    latent[(~sat) & ~inapp] = bit["appropriate"]
    latent[inapp] = bit["inappropriate"]
    for k, name in enumerate(c.issues):
        chosen = inapp & (u_draws[:, 5 + k] < t["p_option_given_inappropriate"][:, k])
        latent[chosen] |= bit[name]
    answers = np.where(submitted, latent, 0)

    obs = world.observables(users, items)
    attrs = {k: obs[k] for k in OBS_COLUMNS}
    p_issue = t["p_inappropriate_ans"][:, None] * t["p_option_given_inappropriate"]
    oracle = {
        "p_like_ans": t["p_like_ans"],
        "p_dislike_ans": t["p_dislike_ans"],
        "p_ans_ss": t["p_ans_ss"],
        "p_like_ss": t["p_like_ss"],
        "p_inappropriate_ans": t["p_inappropriate_ans"],
        "latent_answers": latent,
    }
    for k, name in enumerate(c.issues):
        oracle[f"p_{name}_ans"] = p_issue[:, k]
    for k, name in enumerate(ENGAGEMENTS):
        oracle[f"p_engage_{name}"] = t["p_engagement"][:, k]
    return EventLog(vocab, users, items, obs["author_id"], idx, attrs, engagement, kind, shown, submitted, answers, oracle)


# -- export --------------------------------------------------------------------

EVENT_FILES = {"train": "events_train.jsonl", "eval": "events_eval.jsonl"}
ORACLE_FILES = {"train": "oracle_train.jsonl", "eval": "oracle_eval.jsonl"}
META_FILE = "dataset.json"


def split_users(user_ids, train_fraction: float, seed: int):
    """Deterministic user-level split; returns ``(train_users, eval_users)`` sorted."""
    uniq = np.unique(np.asarray(user_ids))
    rng = np.random.default_rng([seed, 2])
    perm = rng.permutation(uniq)
    n_train = int(round(train_fraction * uniq.size))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _event_json(log: EventLog, i: int) -> dict:
    attrs = {k: (int(v[i]) if k in INT_ATTRS else float(v[i])) for k, v in log.attrs.items()}
    return {
        "user_id": int(log.user_id[i]),
        "item_id": int(log.item_id[i]),
        "author_id": int(log.author_id[i]),
        "impression_index": int(log.impression_index[i]),
        "attrs": attrs,
        "engagement": ENGAGEMENTS[log.engagement[i]],
        "survey": {
            "kind": SURVEY_KINDS[log.kind[i]],
            "shown": bool(log.shown[i]),
            "submitted": bool(log.submitted[i]),
            "answers": list(log.answer_list(i)),
        },
    }


def _oracle_json(log: EventLog, i: int) -> dict:
    row = {"user_id": int(log.user_id[i]), "impression_index": int(log.impression_index[i])}
    for k, v in log.oracle.items():
        if k == "latent_answers":
            row[k] = list(log.answer_list(i, v))
        else:
            row[k] = float(v[i])
    return row


def export_dataset(log: EventLog, out_dir, train_fraction: float = 0.8, seed: int = 0, config: Optional[SimConfig] = None) -> Dict[str, Path]:
    """Write train/eval JSONL event files, oracle sidecars and a metadata file."""
    if len(log) == 0:
        raise ValueError("no events to export")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_users, eval_users = split_users(log.user_id, train_fraction, seed)
    paths = {}
    for split, users in (("train", train_users), ("eval", eval_users)):
        part = log.subset(np.isin(log.user_id, users))
        ev_path = out / EVENT_FILES[split]
        with open(ev_path, "w") as fh:
            for i in range(len(part)):
                fh.write(json.dumps(_event_json(part, i)) + "\n")
        paths[split] = ev_path
        if part.oracle:
            or_path = out / ORACLE_FILES[split]
            with open(or_path, "w") as fh:
                for i in range(len(part)):
                    fh.write(json.dumps(_oracle_json(part, i)) + "\n")
            paths[f"{split}_oracle"] = or_path
    meta = {"vocab": list(log.vocab), "train_users": len(train_users), "eval_users": len(eval_users)}
    if config is not None:
        meta["config"] = config.to_dict()
    (out / META_FILE).write_text(json.dumps(meta, indent=1, sort_keys=True))
    paths["meta"] = out / META_FILE
    return paths


def load_events(path, vocab: Optional[Sequence[str]] = None) -> EventLog:
    """Read an events JSONL file. Never touches oracle sidecars."""
    path = Path(path)
    if vocab is None:
        vocab = json.loads((path.parent / META_FILE).read_text())["vocab"]
    vocab = tuple(vocab)
    bit = {a: 1 << b for b, a in enumerate(vocab)}
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    n = len(rows)
    attr_names = list(rows[0]["attrs"]) if rows else list(OBS_COLUMNS)
    attrs = {
        k: np.array([r["attrs"][k] for r in rows], dtype=np.int64 if k in INT_ATTRS else np.float64)
        for k in attr_names
    }
    return EventLog(
        vocab,
        np.array([r["user_id"] for r in rows], dtype=np.int64),
        np.array([r["item_id"] for r in rows], dtype=np.int64),
        np.array([r["author_id"] for r in rows], dtype=np.int64),
        np.array([r["impression_index"] for r in rows], dtype=np.int64),
        attrs,
        np.array([ENGAGEMENTS.index(r["engagement"]) for r in rows], dtype=np.int64).reshape(n),
        np.array([SURVEY_KINDS.index(r["survey"]["kind"]) for r in rows], dtype=np.int64).reshape(n),
        np.array([r["survey"]["shown"] for r in rows], dtype=bool).reshape(n),
        np.array([r["survey"]["submitted"] for r in rows], dtype=bool).reshape(n),
        np.array([sum(bit[a] for a in r["survey"]["answers"]) for r in rows], dtype=np.int64).reshape(n),
    )


def load_oracle(path, log: EventLog) -> EventLog:
    """Attach an oracle sidecar to ``log`` (evaluation code paths only)."""
    bit = {a: 1 << b for b, a in enumerate(log.vocab)}
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    index = {(r["user_id"], r["impression_index"]): r for r in rows}
    keys = list(zip(log.user_id.tolist(), log.impression_index.tolist()))
    missing = [k for k in keys if k not in index]
    if missing:
        raise ValueError(f"oracle sidecar lacks {len(missing)} events, e.g. {missing[0]}")
    ordered = [index[k] for k in keys]
    oracle = {}
    for name in rows[0]:
        if name in ("user_id", "impression_index"):
            continue
        if name == "latent_answers":
            oracle[name] = np.array([sum(bit[a] for a in r[name]) for r in ordered], dtype=np.int64)
        else:
            oracle[name] = np.array([r[name] for r in ordered], dtype=np.float64)
    out = log.subset(slice(None))
    out.oracle = oracle
    return out
