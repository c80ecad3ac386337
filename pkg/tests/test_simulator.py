import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surveydebias.simulator import (
    EVENT_FILES,
    ORACLE_FILES,
    SimConfig,
    export_dataset,
    generate_population,
    load_events,
    load_oracle,
    simulate_feed,
    split_users,
)


@pytest.fixture(scope="module")
def big_log():
    """100k impressions with every survey shown."""
    world = generate_population(SimConfig(), 11)
    return simulate_feed(world, 11, show_prob=1.0)


def test_population_is_deterministic():
    a = generate_population(SimConfig(n_users=1000), 3)
    b = generate_population(SimConfig(n_users=1000), 3)
    for name in ("pref", "sat", "temperament", "activity", "quality", "intensity", "history"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_region_shares():
    world = generate_population(SimConfig(n_users=10_000, regions=(0.5, 0.5)), 5)
    assert abs(np.mean(world.attrs["region"] == 0) - 0.5) <= 0.05


def test_zero_latent_dim_gives_constant_preferences():
    world = generate_population(SimConfig(latent_dim=0, n_users=50, n_items=30), 1)
    logits = world.preference_logits(np.arange(50)[:, None], np.arange(30)[None, :])
    assert np.all(logits == logits.flat[0])


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(regions=(0.5, 0.6))
    with pytest.raises(ValueError):
        SimConfig(show_prob=1.5)
    with pytest.raises(ValueError):
        SimConfig.from_dict({"bogus": 1})
    assert SimConfig.from_dict(SimConfig().to_dict()) == SimConfig()


def test_no_shows_means_no_surveys():
    log = simulate_feed(generate_population(SimConfig(n_users=100), 1), 1, show_prob=0.0)
    assert not log.shown.any() and not log.submitted.any() and not log.answers.any()


def test_saturated_temperament_submits_everything():
    config = SimConfig(n_users=500, temperament_scale=0.0, temperament_shift=11.0, submit_activity=0.0)
    world = generate_population(config, 2)
    assert np.allclose(world.submit_prob, 1.0 / (1.0 + math.exp(-10.0)))
    log = simulate_feed(world, 2, show_prob=1.0)
    assert log.submitted.mean() > 0.999


def test_submits_imply_shows_and_answers(big_log):
    assert not (big_log.submitted & ~big_log.shown).any()
    assert np.all((big_log.answers != 0) == big_log.submitted)
    assert np.all(big_log.oracle["latent_answers"] != 0)


def test_like_ss_identity_on_every_event(big_log):
    o = big_log.oracle
    assert np.max(np.abs(o["p_like_ss"] - o["p_like_ans"] * o["p_ans_ss"])) <= 1e-12
    for ev in big_log.subset(slice(0, 500)):
        assert abs(ev.p_like_ss - ev.p_like_ans * ev.p_ans_ss) <= 1e-12


def _binomial_ok(hits, probs, z=4.5):
    n = len(probs)
    sd = math.sqrt(np.sum(probs * (1 - probs))) / n
    return abs(hits.mean() - probs.mean()) <= z * sd


def test_empirical_frequencies_match_oracle(big_log):
    o = big_log.oracle
    assert len(big_log) == 100_000
    assert _binomial_ok(big_log.submitted, o["p_ans_ss"])
    sat = big_log.kind == 0
    assert _binomial_ok(big_log.has_answer("like", latent=True)[sat], o["p_like_ans"][sat])
    assert _binomial_ok(big_log.has_answer("dislike", latent=True)[sat], o["p_dislike_ans"][sat])
    inapp = ~sat
    assert _binomial_ok(big_log.has_answer("inappropriate", latent=True)[inapp], o["p_inappropriate_ans"][inapp])
    assert _binomial_ok(big_log.has_answer("spam", latent=True)[inapp], o["p_spam_ans"][inapp])
    for k, name in enumerate(("none", "like", "dislike", "report")):
        assert _binomial_ok(big_log.engagement == k, o[f"p_engage_{name}"])


def test_sidecar_propensity_matches_submit_rate(big_log):
    assert abs(big_log.oracle["p_ans_ss"].mean() - big_log.submitted.mean()) <= 0.01


def test_confounding_creates_response_bias(big_log):
    sat = big_log.kind == 0
    sub = sat & big_log.submitted
    raw = big_log.has_answer("like")[sub].mean()
    true = big_log.oracle["p_like_ans"][sat].mean()
    assert abs(raw - true) > 0.05


def test_oracle_ipw_recovers_true_like_rate(big_log):
    sat = big_log.kind == 0
    sub = sat & big_log.submitted
    w = 1.0 / big_log.oracle["p_ans_ss"][sub]
    est = np.sum(w * big_log.has_answer("like")[sub]) / w.sum()
    assert abs(est - big_log.oracle["p_like_ans"][sat].mean()) <= 0.02


def test_negative_feedback_correlates_with_inappropriate_answers(big_log):
    sub = (big_log.kind == 1) & big_log.submitted
    neg = np.isin(big_log.engagement_names()[sub], ["dislike", "report"]).astype(float)
    inapp = big_log.has_answer("inappropriate")[sub].astype(float)
    assert np.corrcoef(neg, inapp)[0, 1] > 0.2


def test_split_sizes():
    train, test = split_users(np.arange(1000), 0.8, 4)
    assert len(train) == 800 and len(test) == 200
    assert not set(train) & set(test)


@settings(max_examples=50)
@given(st.lists(st.integers(0, 500), min_size=1, max_size=300), st.floats(0.0, 1.0), st.integers(0, 10**6))
def test_split_is_a_disjoint_partition(ids, frac, seed):
    train, test = split_users(ids, frac, seed)
    assert not set(train.tolist()) & set(test.tolist())
    assert set(train.tolist()) | set(test.tolist()) == set(ids)


def test_simulation_is_deterministic():
    w = generate_population(SimConfig(n_users=100), 4)
    a, b = simulate_feed(w, 4), simulate_feed(w, 4)
    assert np.array_equal(a.item_id, b.item_id) and np.array_equal(a.answers, b.answers)


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    config = SimConfig(n_users=120, impressions_per_user=15)
    log = simulate_feed(generate_population(config, 8), 8)
    out = tmp_path_factory.mktemp("data")
    export_dataset(log, out, 0.8, 8, config)
    return log, out


def test_export_roundtrip_is_field_identical(exported):
    log, out = exported
    back = [ev for split in ("train", "eval") for ev in load_events(out / EVENT_FILES[split])]
    original = {(ev.user_id, ev.impression_index): ev for ev in log.without_oracle()}
    assert len(back) == len(original)
    for ev in back:
        assert ev == original[(ev.user_id, ev.impression_index)]


def test_export_split_is_user_level(exported):
    _, out = exported
    train = load_events(out / EVENT_FILES["train"])
    test = load_events(out / EVENT_FILES["eval"])
    assert not set(train.user_id.tolist()) & set(test.user_id.tolist())
    assert json.loads((out / "dataset.json").read_text())["train_users"] == 96


def test_event_files_carry_no_ground_truth(exported):
    _, out = exported
    text = (out / EVENT_FILES["train"]).read_text()
    assert "p_" not in text and "latent" not in text
    assert load_events(out / EVENT_FILES["train"]).oracle == {}


def test_oracle_sidecar_roundtrip(exported):
    log, out = exported
    ev = load_oracle(out / ORACLE_FILES["eval"], load_events(out / EVENT_FILES["eval"]))
    users = np.isin(log.user_id, np.unique(ev.user_id))
    ref = log.subset(users)
    for k in ("p_like_ans", "p_ans_ss", "p_like_ss", "p_spam_ans", "latent_answers"):
        assert np.array_equal(ev.oracle[k], ref.oracle[k])


def test_oracle_sidecar_must_cover_events(exported):
    _, out = exported
    with pytest.raises(ValueError, match="lacks"):
        load_oracle(out / ORACLE_FILES["eval"], load_events(out / EVENT_FILES["train"]))
