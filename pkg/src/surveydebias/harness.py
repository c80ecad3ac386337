"""Experiment orchestration: simulate, train every arm, evaluate, report.

Each stage reads and writes files under ``<output>/seed_<n>/`` so the CLI
subcommands and :func:`run_experiment` share exactly the same code path.
Training stages only ever load event files; oracle sidecars are opened by
the evaluation stage alone.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import shutil
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import metrics as M
from .features import FeatureSpec
from .ranking import Arm, ab_rank_eval
from .simulator import (
    EVENT_FILES,
    ORACLE_FILES,
    SimConfig,
    export_dataset,
    generate_population,
    load_events,
    load_oracle,
    simulate_feed,
    submit_spec,
    survey_spec,
)
from .submit_model import SubmitModel, attach_ipw, debiased_issue_rate
from .survey_model import DEFAULT_HEADS, SurveyModel, head_labels

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ArmSpec:
    use_lhuc: bool
    use_se: bool
    debias: bool


STANDARD_ARMS = {
    "baseline": ArmSpec(False, False, False),
    "lhuc": ArmSpec(True, False, False),
    "lhuc_se": ArmSpec(True, True, False),
    "debias": ArmSpec(True, True, True),
}

MODEL_KEYS = ("backbone_dims", "head_dims", "se_reduction", "embedding_dim", "hash_buckets",
              "optimizer", "learning_rate", "batch_size", "epochs", "max_steps")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class MissingArtifact(FileNotFoundError):
    pass


@dataclass
class ExperimentConfig:
    simulator: SimConfig = field(default_factory=SimConfig)
    arms: Dict[str, ArmSpec] = field(default_factory=lambda: dict(STANDARD_ARMS))
    model: dict = field(default_factory=dict)
    submit: dict = field(default_factory=dict)
    seeds: List[int] = field(default_factory=lambda: [1])
    train_fraction: float = 0.8
    lhuc_features: tuple = ("language", "region", "device")
    metrics: tuple = ("auc", "calibration", "uauc", "rates", "strata")
    ranking: dict = field(default_factory=dict)
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        for key in list(self.model) + list(self.submit):
            if key not in MODEL_KEYS:
                raise ValueError(f"unknown model setting {key!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        sim = SimConfig.from_dict(d.pop("simulator", {}))
        arms_in = d.pop("arms", list(STANDARD_ARMS))
        arms = {}
        if isinstance(arms_in, dict):
            for name, a in arms_in.items():
                arms[name] = ArmSpec(bool(a.get("use_lhuc", False)), bool(a.get("use_se", False)), bool(a.get("debias", False)))
        else:
            for name in arms_in:
                if name not in STANDARD_ARMS:
                    raise ValueError(f"unknown arm {name!r}; define it under [arms.{name}]")
                arms[name] = STANDARD_ARMS[name]
        known = {"model", "submit", "seeds", "train_fraction", "lhuc_features", "metrics", "ranking", "output_dir"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment settings {sorted(unknown)}")
        for k in ("lhuc_features", "metrics"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(simulator=sim, arms=arms, **d)

    def to_dict(self) -> dict:
        return {
            "simulator": self.simulator.to_dict(),
            "arms": {k: asdict(v) for k, v in self.arms.items()},
            "model": self.model,
            "submit": self.submit,
            "seeds": list(self.seeds),
            "train_fraction": self.train_fraction,
            "lhuc_features": list(self.lhuc_features),
            "metrics": list(self.metrics),
            "ranking": self.ranking,
            "output_dir": self.output_dir,
        }


def load_config(path) -> ExperimentConfig:
    """Read a TOML (or ``.json``) experiment definition."""
    path = Path(path)
    if path.suffix == ".json":
        return ExperimentConfig.from_dict(json.loads(path.read_text()))
    with open(path, "rb") as fh:
        return ExperimentConfig.from_dict(tomllib.load(fh))


def _model_kwargs(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        out[k] = tuple(v) if isinstance(v, list) else v
    return out


# -- stages --------------------------------------------------------------------


def seed_dir(root, seed: int) -> Path:
    return Path(root) / f"seed_{seed}"


def stage_simulate(config: ExperimentConfig, seed: int, data_dir) -> Dict[str, Path]:
    world = generate_population(config.simulator, seed)
    log = simulate_feed(world, seed)
    return export_dataset(log, data_dir, config.train_fraction, seed, config.simulator)


def _data(data_dir, split):
    path = Path(data_dir) / EVENT_FILES[split]
    if not path.exists():
        raise MissingArtifact(f"missing dataset {path}; run `simulate` first")
    return load_events(path)


def submit_model_path(model_dir) -> Path:
    return Path(model_dir) / "submit.bin"


def survey_model_path(model_dir, arm) -> Path:
    return Path(model_dir) / f"survey_{arm}.bin"


def stage_train_submit(config: ExperimentConfig, seed: int, data_dir, model_dir) -> SubmitModel:
    log = _data(data_dir, "train")
    shows = log.subset(log.shown)
    spec = submit_spec(config.simulator)
    params = {**_model_kwargs(config.model), **_model_kwargs(config.submit)}
    model = SubmitModel(features=spec, random_state=seed, **params)
    model.fit(shows.feature_matrix(spec), shows.kind_names(), shows.submitted)
    path = submit_model_path(model_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path)
    return model


def survey_training_set(log, spec: FeatureSpec, heads=DEFAULT_HEADS):
    """Submitted surveys as ``(events, X, Y)`` with one label column per head."""
    sub = log.subset(log.submitted)
    kinds = sub.kind_names()
    Y = np.array([head_labels(k, sub.answer_list(i), heads) for i, k in enumerate(kinds)]).reshape(len(sub), len(heads))
    return sub, sub.feature_matrix(spec), Y


def stage_train_arm(config: ExperimentConfig, seed: int, arm: str, data_dir, model_dir) -> SurveyModel:
    if arm not in config.arms:
        raise ValueError(f"unknown arm {arm!r}; configured arms: {', '.join(config.arms)}")
    a = config.arms[arm]
    weights = None
    log = _data(data_dir, "train")
    spec = survey_spec(config.simulator)
    sub, X, Y = survey_training_set(log, spec)
    if a.debias:
        path = submit_model_path(model_dir)
        if not path.exists():
            raise MissingArtifact(f"arm {arm!r} needs the trained submit model {path}; run `train --arm submit` first")
        submit = SubmitModel.load(path)
        weights = attach_ipw(sub.feature_matrix(submit.net_.spec), sub.kind_names(), submit)
    model = SurveyModel(
        features=spec, use_lhuc=a.use_lhuc, use_se=a.use_se, lhuc_features=config.lhuc_features,
        random_state=seed, **_model_kwargs(config.model),
    )
    model.fit(X, Y, sample_weight=weights)
    path = survey_model_path(model_dir, arm)
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path)
    return model


@dataclass
class ReportRow:
    arm: str
    seed: str
    head: str
    metric: str
    stratum: str
    value: Optional[float]
    n: int


def _safe(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except M.MetricError:
        return None


def stage_evaluate(config: ExperimentConfig, seed: int, data_dir, model_dir,
                   arms: Optional[Sequence[str]] = None) -> List[ReportRow]:
    """All configured metrics for every trained arm on the held-out users."""
    arms = list(config.arms) if arms is None else list(arms)
    oracle_path = Path(data_dir) / ORACLE_FILES["eval"]
    if not oracle_path.exists():
        raise MissingArtifact(f"missing oracle sidecar {oracle_path}")
    log = load_oracle(oracle_path, _data(data_dir, "eval"))
    spec = survey_spec(config.simulator)
    submit_path = submit_model_path(model_dir)
    if not submit_path.exists():
        raise MissingArtifact(f"evaluation needs the submit model {submit_path}")
    submit = SubmitModel.load(submit_path)
    s = str(seed)
    rows: List[ReportRow] = []
    want = set(config.metrics)

    shows = log.subset(log.shown)
    shows_prop = submit.predict_submit(shows.feature_matrix(submit.net_.spec), shows.kind_names())
    submitted = shows.submitted

    if "rates" in want:
        rows += _rate_rows(shows, shows_prop, s)

    X_all = log.feature_matrix(spec)
    X_shows = shows.feature_matrix(spec)
    engagements = log.engagement_names()
    for arm in arms:
        path = survey_model_path(model_dir, arm)
        if not path.exists():
            raise MissingArtifact(f"missing trained arm {arm!r} at {path}; run `train --arm {arm}` first")
        model = SurveyModel.load(path)
        p_shows = model.predict_proba(X_shows)
        p_all = model.predict_proba(X_all) if "uauc" in want else None
        for j, head in enumerate(model.net_.heads):
            kind_rows = shows.kind_names() == head.kind
            latent = shows.has_answer(head.option, latent=True)
            for scope, sel in (("labeled", kind_rows & submitted), ("oracle", kind_rows)):
                p, y = p_shows[sel, j], latent[sel].astype(np.float64)
                n = int(sel.sum())
                if "auc" in want:
                    rows.append(ReportRow(arm, s, head.name, f"auc_{scope}", "all", _safe(M.auc, p, y), n))
                if "calibration" in want:
                    rows.append(ReportRow(arm, s, head.name, f"calibration_{scope}", "all", _safe(M.calibration, p, y), n))
                if "strata" in want and n:
                    for st in M.stratified_report(p, y, shows_prop[sel]):
                        rows.append(ReportRow(arm, s, head.name, f"auc_{scope}", st.label, st.auc, st.n))
                        rows.append(ReportRow(arm, s, head.name, f"calibration_{scope}", st.label, st.calibration, st.n))
            if "uauc" in want:
                if head.kind == "satisfaction":
                    # likes should rank above non-likes, so score by 1 - p(dislike)
                    val = _safe(M.pfb_uauc, log.user_id, 1.0 - p_all[:, j], engagements)
                    rows.append(ReportRow(arm, s, head.name, "pfb_uauc", "all", val, len(log)))
                else:
                    val = _safe(M.nfb_uauc, log.user_id, p_all[:, j], engagements)
                    rows.append(ReportRow(arm, s, head.name, "nfb_uauc", "all", val, len(log)))
    if config.ranking.get("enabled", False):
        rows += _ranking_rows(config, seed, model_dir, arms)
    return rows


def _rate_rows(shows, prop, s: str) -> List[ReportRow]:
    rows = []
    for kind, options in (("satisfaction", ("like", "dislike")), ("inappropriate", ("inappropriate",))):
        sel = shows.kind_names() == kind
        sub = sel & shows.submitted
        n_sub = int(sub.sum())
        tally = M.SurveyTally(kind)
        tally.shows = int(sel.sum())
        tally.submits = n_sub
        for opt in options:
            flags = shows.has_answer(opt)[sub]
            tally.answers[opt] = int(flags.sum())
            raw = _safe(M.survey_issue_rate, tally, opt) if n_sub else None
            deb = debiased_issue_rate(flags, prop[sub]) if n_sub else None
            true = float(shows.has_answer(opt, latent=True)[sel].mean()) if sel.any() else None
            rows.append(ReportRow("data", s, kind, f"raw_{opt}_rate", "all", raw, n_sub))
            rows.append(ReportRow("data", s, kind, f"debiased_{opt}_rate", "all", deb, n_sub))
            rows.append(ReportRow("data", s, kind, f"true_{opt}_rate", "all", true, int(sel.sum())))
    return rows


def _ranking_rows(config: ExperimentConfig, seed: int, model_dir, arms: Sequence[str]) -> List[ReportRow]:
    r = config.ranking
    world = generate_population(config.simulator, seed)
    spec = survey_spec(config.simulator)
    weights = {k: float(v) for k, v in r.get("weights", {"inappropriate": -5.0}).items()}
    ranked = [Arm(a, SurveyModel.load(survey_model_path(model_dir, a)), weights, spec) for a in arms]
    outcomes = ab_rank_eval(world, ranked, k=int(r.get("k", 10)), n_requests=int(r.get("n_requests", 2000)),
                            n_candidates=int(r.get("n_candidates", 50)), seed=seed)
    rows = []
    for o in outcomes:
        for metric, v in (("ranked_inappropriate_rate", o.inappropriate_rate), ("ranked_like_rate", o.like_rate),
                          ("ranked_dislike_rate", o.dislike_rate)):
            rows.append(ReportRow(o.name, str(seed), "ranking", metric, "all", v, o.n_selected))
    return rows


# -- reports -------------------------------------------------------------------

REPORT_COLUMNS = ("arm", "seed", "head", "metric", "stratum", "value", "n")
UNDEFINED = "undefined"


def aggregate(rows: Sequence[ReportRow]) -> List[ReportRow]:
    """Mean across seeds of every (arm, head, metric, stratum) cell."""
    groups: Dict[tuple, List[ReportRow]] = {}
    for r in rows:
        groups.setdefault((r.arm, r.head, r.metric, r.stratum), []).append(r)
    out = []
    for (arm, head, metric, stratum), rs in groups.items():
        vals = [r.value for r in rs if r.value is not None]
        out.append(ReportRow(arm, "mean", head, metric, stratum, float(np.mean(vals)) if vals else None,
                             int(sum(r.n for r in rs))))
    return out


def _fmt(v: Optional[float]) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return UNDEFINED
    return repr(float(v))


def report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r.arm, r.seed, r.head, r.metric, r.stratum, _fmt(r.value), r.n])
    return buf.getvalue()


def report_json(rows: Sequence[ReportRow]) -> str:
    docs = [{"arm": r.arm, "seed": r.seed, "head": r.head, "metric": r.metric, "stratum": r.stratum,
             "value": None if r.value is None else float(r.value), "n": r.n} for r in rows]
    return json.dumps(docs, indent=1)


def read_report_csv(path) -> List[ReportRow]:
    with open(path, newline="") as fh:
        return [
            ReportRow(d["arm"], d["seed"], d["head"], d["metric"], d["stratum"],
                      None if d["value"] == UNDEFINED else float(d["value"]), int(d["n"]))
            for d in csv.DictReader(fh)
        ]


@dataclass
class ExperimentReport:
    rows: List[ReportRow]
    output_dir: Path

    def value(self, arm, head, metric, stratum="all", seed="mean") -> Optional[float]:
        for r in self.rows:
            if (r.arm, r.head, r.metric, r.stratum, r.seed) == (arm, head, metric, stratum, str(seed)):
                return r.value
        raise KeyError((arm, head, metric, stratum, seed))


def write_reports(rows: Sequence[ReportRow], out_dir) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "report.csv", "json": out / "report.json"}
    paths["csv"].write_text(report_csv(rows))
    paths["json"].write_text(report_json(rows))
    return paths


def run_experiment(config: ExperimentConfig, output_dir=None) -> ExperimentReport:
    """Simulate, train the submit model and every arm, evaluate and write reports per seed.

    Work happens in ``<output>.partial`` and is moved into place only on
    success; a failing stage removes it and raises :class:`StageError`.
    """
    final = Path(output_dir or config.output_dir)
    work = final.with_name(final.name + ".partial")
    if work.exists():
        shutil.rmtree(work)
    work.mkdir(parents=True)
    rows: List[ReportRow] = []
    try:
        (work / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
        for seed in config.seeds:
            data_dir = seed_dir(work, seed) / "data"
            model_dir = seed_dir(work, seed) / "models"
            _stage("simulate", stage_simulate, config, seed, data_dir)
            # evaluation stratifies by submit propensity, so the submit model is always trained
            _stage("train_submit", stage_train_submit, config, seed, data_dir, model_dir)
            for arm in config.arms:
                _stage(f"train_{arm}", stage_train_arm, config, seed, arm, data_dir, model_dir)
            seed_rows = _stage("evaluate", stage_evaluate, config, seed, data_dir, model_dir)
            write_reports(seed_rows, seed_dir(work, seed))
            rows += seed_rows
        rows += aggregate(rows)
        write_reports(rows, work)
    except BaseException:
        shutil.rmtree(work, ignore_errors=True)
        raise
    if final.exists():
        shutil.rmtree(final)
    work.rename(final)
    return ExperimentReport(rows, final)


def _stage(name, fn, *args):
    logger.info("stage %s", name)
    try:
        return fn(*args)
    except Exception as exc:  # re-raised with the stage attached
        raise StageError(name, exc) from exc
