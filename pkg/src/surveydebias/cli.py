"""Command-line entry point: ``surveydebias <command> [options]``.

Every stage reads and writes the same files as :func:`run_experiment`, so
running ``simulate``, ``train`` and ``evaluate`` by hand reproduces a full run.
Paths default to ``$SURVEYDEBIAS_OUTPUT/seed_<n>/...`` (``runs`` if unset).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import harness as H
from .nn_core import ConfigurationError
from .ranking import Arm, OracleScorer, ab_rank_eval, rank_top_k, request_from_json
from .simulator import EVENT_FILES, generate_population, load_events, survey_spec
from .survey_model import SurveyModel, feature_importance, topology_grad_check

OUTPUT_ENV = "SURVEYDEBIAS_OUTPUT"
TOPOLOGIES = {"baseline": (False, False), "lhuc": (True, False), "se": (False, True), "lhuc_se": (True, True)}


class UsageError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise argparse.ArgumentTypeError(f"no such file or directory: {path}")
    return p


def _int_list(text: str):
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _weight(text: str):
    head, sep, value = text.partition("=")
    try:
        if not sep:
            raise ValueError
        return head, float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HEAD=VALUE, got {text!r}") from None


def _config(args) -> H.ExperimentConfig:
    if args.config is None:
        return H.ExperimentConfig()
    try:
        return H.load_config(args.config)
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"invalid config {args.config}: {exc}") from exc


def _seed(args, config) -> int:
    return args.seed if args.seed is not None else config.seeds[0]


def _dirs(args, seed):
    base = H.seed_dir(output_root(), seed)
    data = Path(args.data) if getattr(args, "data", None) else base / "data"
    models = Path(args.models) if getattr(args, "models", None) else base / "models"
    return data, models


def cmd_simulate(args) -> int:
    config = _config(args)
    seed = _seed(args, config)
    out = Path(args.out) if args.out else _dirs(args, seed)[0]
    paths = H.stage_simulate(config, seed, out)
    for p in paths.values():
        print(p)
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    seed = _seed(args, config)
    data, models = _dirs(args, seed)
    if args.arm == "submit":
        H.stage_train_submit(config, seed, data, models)
        print(H.submit_model_path(models))
    else:
        if args.arm not in config.arms:
            raise UsageError(f"unknown arm {args.arm!r}; choose submit or one of {', '.join(config.arms)}")
        H.stage_train_arm(config, seed, args.arm, data, models)
        print(H.survey_model_path(models, args.arm))
    return 0


def _arm_list(text, config):
    arms = [a for a in text.split(",") if a] if text else list(config.arms)
    unknown = [a for a in arms if a not in config.arms]
    if unknown:
        raise UsageError(f"unknown arms {unknown}; configured arms: {', '.join(config.arms)}")
    return arms


def cmd_evaluate(args) -> int:
    config = _config(args)
    seed = _seed(args, config)
    data, models = _dirs(args, seed)
    arms = _arm_list(args.arms, config)
    rows = H.stage_evaluate(config, seed, data, models, arms)
    out = Path(args.out) if args.out else H.seed_dir(output_root(), seed)
    for p in H.write_reports(rows, out).values():
        print(p)
    return 0


def cmd_rank(args) -> int:
    model = SurveyModel.load(args.model)
    doc = json.loads(sys.stdin.read() if args.request == "-" else Path(args.request).read_text())
    try:
        request, k = request_from_json(doc, model.net_.spec)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"bad rank request: {exc}") from exc
    result = rank_top_k(request, model, args.k if args.k is not None else k)
    text = json.dumps(result.to_dict(), indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


ABTEST_COLUMNS = ("arm", "seed", "weights", "inappropriate_rate", "like_rate", "dislike_rate")


def cmd_abtest(args) -> int:
    config = _config(args)
    seed = _seed(args, config)
    _, models = _dirs(args, seed)
    arms = _arm_list(args.arms, config)
    weights = dict(args.weight) if args.weight else {"inappropriate": -5.0}
    spec = survey_spec(config.simulator)
    world = generate_population(config.simulator, seed)
    ranked = []
    for a in arms:
        path = H.survey_model_path(models, a)
        if not path.exists():
            raise H.MissingArtifact(f"missing trained arm {a!r} at {path}; run `train --arm {a}` first")
        ranked.append(Arm(a, SurveyModel.load(path), weights, spec))
    if args.oracle:
        ranked.append(Arm("oracle", OracleScorer(world), weights))
    try:
        outcomes = ab_rank_eval(world, ranked, k=args.k, n_requests=args.requests, n_candidates=args.candidates,
                                seed=seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    issues = list(config.simulator.issues)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABTEST_COLUMNS + tuple(f"{i}_rate" for i in issues) + ("n_selected",))
    wtext = ";".join(f"{h}={v!r}" for h, v in sorted(weights.items()))
    for o in outcomes:
        w.writerow([o.name, seed, wtext, repr(o.inappropriate_rate), repr(o.like_rate), repr(o.dislike_rate)]
                   + [repr(o.issue_rates[i]) for i in issues] + [o.n_selected])
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def cmd_feature_importance(args) -> int:
    model = SurveyModel.load(args.model)
    spec = model.net_.spec
    events = args.events or (Path(args.data) / EVENT_FILES[args.split])
    if not Path(events).exists():
        raise H.MissingArtifact(f"missing events file {events}")
    _, X, Y = H.survey_training_set(load_events(events), spec, model.net_.heads)
    features = [f for f in args.features.split(",") if f] if args.features else None
    try:
        ranked = feature_importance(model, X, Y, features=features, head=args.head)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    print("feature,auc_drop")
    for name, drop in ranked:
        print(f"{name},{drop!r}")
    return 0


def cmd_grad_check(args) -> int:
    config = _config(args)
    spec = survey_spec(config.simulator)
    names = list(TOPOLOGIES) if args.topology == "all" else [args.topology]
    worst = 0.0
    for name in names:
        lhuc, se = TOPOLOGIES[name]
        for seed in args.seeds:
            stats = {}
            err = topology_grad_check(spec, lhuc, se, seed=seed, batch=args.batch, h=args.step, stats=stats)
            worst = max(worst, err)
            status = "ok" if err <= args.tol else "FAIL"
            print(f"{name} seed={seed} max_rel_err={err:.3e} checked={stats['checked']} "
                  f"kink_skipped={stats['skipped']} {status}")
    return 0 if worst <= args.tol else 1


def cmd_run(args) -> int:
    config = _config(args)
    out = Path(args.out) if args.out else output_root() / Path(config.output_dir).name
    report = H.run_experiment(config, out)
    print(report.output_dir / "report.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surveydebias", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, models=True):
        p.add_argument("--config", type=_existing, help="experiment TOML or JSON")
        p.add_argument("--seed", type=int, help="simulation seed (default: first configured seed)")
        if data:
            p.add_argument("--data", help="dataset directory")
        if models:
            p.add_argument("--models", help="model directory")

    p = sub.add_parser("simulate", help="simulate a feed and export events plus oracle sidecars")
    common(p, data=False, models=False)
    p.add_argument("--out", help="dataset directory to write")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("train", help="train the submit model or one survey arm")
    common(p)
    p.add_argument("--arm", required=True, help="'submit' or a configured arm name")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score trained arms on held-out users")
    common(p)
    p.add_argument("--arms", help="comma-separated arms (default: all configured)")
    p.add_argument("--out", help="directory for report.csv and report.json")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("rank", help="rank a JSON candidate list with a saved survey model")
    p.add_argument("--model", type=_existing, required=True, help="saved survey model (.bin or .json)")
    p.add_argument("--request", required=True, help="request JSON file, or - for stdin")
    p.add_argument("--k", type=int, help="number of items to return (overrides the request)")
    p.add_argument("--out", help="write the response here instead of stdout")
    p.set_defaults(fn=cmd_rank)

    p = sub.add_parser("abtest", help="replay identical requests through several arms")
    common(p, data=False)
    p.add_argument("--arms", help="comma-separated arms (default: all configured)")
    p.add_argument("--weight", type=_weight, action="append", metavar="HEAD=VALUE",
                   help="fusion weight, repeatable (default inappropriate=-5)")
    p.add_argument("--k", type=int, default=10, help="items selected per request")
    p.add_argument("--requests", type=int, default=10000, help="number of simulated requests")
    p.add_argument("--candidates", type=int, default=50, help="candidates per request")
    p.add_argument("--oracle", action="store_true", help="add an arm scored with the true probabilities")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(fn=cmd_abtest)

    p = sub.add_parser("feature-importance", help="AUC drop when each feature is masked")
    p.add_argument("--model", type=_existing, required=True, help="saved survey model (.bin or .json)")
    p.add_argument("--data", default=".", help="dataset directory")
    p.add_argument("--split", choices=sorted(EVENT_FILES), default="eval", help="which split to read from --data")
    p.add_argument("--events", help="events JSONL file (overrides --data/--split)")
    p.add_argument("--head", help="head name (default: first head)")
    p.add_argument("--features", help="comma-separated subset of features")
    p.set_defaults(fn=cmd_feature_importance)

    p = sub.add_parser("grad-check", help="finite-difference check of the manual gradients")
    p.add_argument("--config", type=_existing, help="experiment config whose simulator defines the feature layout")
    p.add_argument("--topology", choices=["all", *TOPOLOGIES], default="all", help="network variant to check")
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3], help="comma-separated initialisation seeds")
    p.add_argument("--batch", type=int, default=16, help="random rows per check")
    p.add_argument("--step", type=float, default=1e-4, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="maximum relative error")
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("run", help="full experiment: every seed, stage and arm")
    p.add_argument("--config", type=_existing, help="experiment TOML or JSON")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (UsageError, H.MissingArtifact, ConfigurationError) as exc:
        parser.exit(2, f"{parser.prog}: error: {exc}\n")
    except H.StageError as exc:
        parser.exit(1, f"{parser.prog}: error: {exc}\n")


if __name__ == "__main__":
    sys.exit(main())
