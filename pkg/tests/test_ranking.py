import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surveydebias.ranking import (
    Arm,
    Candidate,
    OracleScorer,
    RankRequest,
    ab_rank_eval,
    final_score,
    final_scores,
    rank_top_k,
    request_from_json,
    top_k_order,
)
from surveydebias.simulator import SimConfig, generate_population, survey_spec
from surveydebias.survey_model import SurveyModel


class Lookup:
    """Scorer whose feature rows are the head probabilities themselves."""

    heads_ = ("a", "b")

    def predict_proba(self, X):
        return np.asarray(X, dtype=np.float64)[:, :2]


def _request(probs, other, weights, ids=None):
    ids = range(len(probs)) if ids is None else ids
    cands = [Candidate(int(i), np.asarray(p, dtype=np.float64), float(o)) for i, p, o in zip(ids, probs, other)]
    return RankRequest(cands, weights)


def test_final_score_examples():
    assert final_score({"a": 0.1, "b": 0.2}, {"a": 1.0, "b": -2.0}, 0.5) == pytest.approx(0.2, abs=1e-15)
    assert final_score({"a": 0.7}, {"a": 0.0}, 0.3) == 0.3
    assert final_score({}, {}, 0.3) == 0.3
    lo = final_score({"issue": 0.1}, {"issue": -1.0}, 1.0)
    hi = final_score({"issue": 0.9}, {"issue": -1.0}, 1.0)
    assert lo > hi
    with pytest.raises(KeyError):
        final_score({"a": 0.1}, {"b": 1.0}, 0.0)
    with pytest.raises(ValueError):
        final_score({"a": 0.1}, {"a": float("nan")}, 0.0)


def test_vectorised_scores_match_scalar():
    rng = np.random.default_rng(0)
    probs = rng.random((20, 2))
    other = rng.normal(size=20)
    w = {"a": 0.7, "b": -3.0}
    got = final_scores(probs, ["a", "b"], w, other)
    want = [final_score({"a": p[0], "b": p[1]}, w, o) for p, o in zip(probs, other)]
    assert got.tolist() == want


def test_k_larger_than_candidates_returns_all_sorted():
    res = rank_top_k(_request([[0.1, 0], [0.9, 0], [0.5, 0]], [0, 0, 0], {"a": 1.0}), Lookup(), k=10)
    assert [r.item_id for r in res.items] == [1, 2, 0]
    assert res.items[0].p == {"a": 0.9, "b": 0.0}


def test_ties_break_on_lower_item_id():
    res = rank_top_k(_request([[0.5, 0], [0.5, 0]], [0, 0], {"a": 1.0}, ids=[9, 4]), Lookup(), k=2)
    assert [r.item_id for r in res.items] == [4, 9]


def _brute_force(scores, ids, k):
    return [i for _, i in sorted(zip(-np.asarray(scores), ids))][:k]


def test_fifty_candidates_match_full_sort_prefix():
    rng = np.random.default_rng(50)
    probs = rng.random((50, 2))
    other = rng.normal(size=50)
    ids = rng.permutation(1000)[:50]
    w = {"a": -2.0, "b": 1.0}
    res = rank_top_k(_request(probs, other, w, ids), Lookup(), k=10)
    scores = final_scores(probs, ["a", "b"], w, other)
    assert [r.item_id for r in res.items] == _brute_force(scores, ids, 10)


grid = st.integers(0, 64).map(lambda v: v / 64)


@settings(max_examples=100)
@given(st.lists(st.tuples(grid, grid, st.integers(-8, 8)), min_size=1, max_size=40),
       st.integers(1, 45), st.integers(-50, 50))
def test_order_is_full_sort_prefix_and_shift_invariant(rows, k, c):
    probs = [[a, b] for a, b, _ in rows]
    other = [o / 4 for _, _, o in rows]
    w = {"a": -1.0, "b": 2.0}
    ranked = [r.item_id for r in rank_top_k(_request(probs, other, w), Lookup(), k).items]
    scores = final_scores(np.array(probs), ["a", "b"], w, np.array(other))
    assert ranked == _brute_force(scores, list(range(len(rows))), k)
    shifted = [r.item_id for r in rank_top_k(_request(probs, [o + c for o in other], w), Lookup(), k).items]
    assert shifted == ranked


def test_top_k_order_tie_rule():
    assert top_k_order(np.array([1.0, 2.0, 2.0, 0.0]), np.array([5, 7, 3, 1]), 3).tolist() == [2, 1, 0]


def test_request_validation():
    with pytest.raises(ValueError):
        RankRequest([], {})
    with pytest.raises(ValueError):
        RankRequest([Candidate(1, np.zeros(2))], {"a": float("inf")})
    with pytest.raises(ValueError):
        rank_top_k(_request([[0.1, 0.2]], [0], {}), Lookup(), k=0)


def test_request_from_json():
    spec = survey_spec(SimConfig())
    user = {"user_id": 3, "language": 1, "region": 0, "device": 2, "activity": 0.5}
    doc = {
        "user": user,
        "candidates": [
            {"item_id": 10, "features": {"author_id": 1, "category": 2, "item_neg_rate": 0.1}, "other_s": 0.4},
            {"item_id": 11, "features": {"author_id": 2, "category": 0, "item_neg_rate": 0.3}},
        ],
        "weights": {"inappropriate": -5},
        "k": 1,
    }
    req, k = request_from_json(doc, spec)
    assert k == 1 and req.weights == {"inappropriate": -5.0}
    assert req.candidates[0].features.tolist() == [3, 10, 1, 1, 0, 2, 2, 0.5, 0.1]
    assert req.candidates[1].other_s == 0.0
    del doc["candidates"][1]["features"]["category"]
    with pytest.raises(KeyError, match="category"):
        request_from_json(doc, spec)


@pytest.fixture(scope="module")
def world():
    return generate_population(SimConfig(n_users=300, n_items=200), 2)


@pytest.fixture(scope="module")
def tiny_model(world):
    spec = survey_spec(world.config)
    rng = np.random.default_rng(0)
    users, items = rng.integers(0, 300, 400), rng.integers(0, 200, 400)
    X = world.feature_matrix(users, items, spec)
    t = world.truth(users, items)
    Y = np.column_stack([rng.random(400) < t["p_dislike_ans"], rng.random(400) < t["p_inappropriate_ans"]]).astype(float)
    heads = (("satisfaction", "satisfaction", "dislike"), ("inappropriate", "inappropriate", "inappropriate"))
    return SurveyModel(spec, heads=heads, backbone_dims=(16, 8, 4), head_dims=(4, 1), hash_buckets=512,
                       epochs=2).fit(X, Y)


def test_identical_arms_get_identical_rates(world, tiny_model):
    spec = survey_spec(world.config)
    arms = [Arm("x", tiny_model, {"inappropriate": -5.0}, spec), Arm("y", tiny_model, {"inappropriate": -5.0}, spec)]
    a, b = ab_rank_eval(world, arms, n_requests=300, seed=1)
    assert (a.inappropriate_rate, a.like_rate, a.issue_rates) == (b.inappropriate_rate, b.like_rate, b.issue_rates)


def test_negative_weight_lowers_inappropriate_rate(world):
    oracle = OracleScorer(world)
    off, on = ab_rank_eval(world, [Arm("off", oracle, {"inappropriate": 0.0}),
                                   Arm("on", oracle, {"inappropriate": -5.0})], n_requests=2000, seed=3)
    assert on.inappropriate_rate < off.inappropriate_rate
    assert on.n_selected == off.n_selected == 20_000


def test_oracle_scorer_minimises_issue_rate(world, tiny_model):
    spec = survey_spec(world.config)
    w = {"inappropriate": -5.0}
    res = ab_rank_eval(world, [Arm("oracle", OracleScorer(world), w), Arm("model", tiny_model, w, spec),
                               Arm("plain", tiny_model, {}, spec)], n_requests=1000, seed=4)
    rates = {o.name: o.inappropriate_rate for o in res}
    assert rates["oracle"] == min(rates.values())
