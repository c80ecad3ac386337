import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import mean_user_auc, pairwise_auc, strict_pair_auc
from surveydebias.metrics import (
    MetricError,
    PredictionRecord,
    SurveyTally,
    auc,
    calibration,
    nearest_rank_quantiles,
    nfb_uauc,
    pair_auc,
    pfb_uauc,
    records_to_arrays,
    stratified_report,
    survey_issue_rate,
    survey_like_rate,
    user_auc,
)
from surveydebias.submit_model import debiased_issue_rate


def _tally(like, submits):
    return SurveyTally("satisfaction", shows=submits, submits=submits, answers={"like": like})


@pytest.mark.parametrize("like, submits, rate", [(3, 10, 0.3), (0, 10, 0.0), (10, 10, 1.0)])
def test_like_rate(like, submits, rate):
    assert survey_like_rate(_tally(like, submits)) == rate


def test_issue_rate():
    t = SurveyTally("inappropriate", shows=80, submits=50, answers={"sexual": 2})
    assert survey_issue_rate(t, "sexual") == 0.04
    with pytest.raises(MetricError):
        survey_issue_rate(t, "nonsense")
    with pytest.raises(MetricError):
        survey_issue_rate(SurveyTally("inappropriate"), "sexual")


def test_tally_add_and_validation():
    t = SurveyTally("satisfaction")
    t.add(True, True, ["like"])
    t.add(True, False)
    t.add(False, False)
    assert (t.shows, t.submits, t.answers) == (2, 1, {"like": 1})
    with pytest.raises(ValueError):
        t.add(False, True)
    with pytest.raises(ValueError):
        SurveyTally("satisfaction", shows=1, submits=2)


def test_auc_simple_cases():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.4] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(MetricError):
        auc([0.1, 0.2], [1, 1])


def test_auc_brute_force_200_records():
    rng = np.random.default_rng(200)
    p = np.round(rng.random(200), 2)
    y = rng.integers(0, 2, 200)
    assert auc(p, y) == pairwise_auc(p.tolist(), y.tolist())


def _instance(draw, n_max=500):
    n = draw(st.integers(2, n_max))
    seed = draw(st.integers(0, 2**32 - 1))
    levels = draw(st.sampled_from([3, 20, 10**6]))
    rng = np.random.default_rng(seed)
    p = rng.integers(0, levels, n) / levels
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    return p, y, rng


@st.composite
def instances(draw):
    return _instance(draw)


@settings(max_examples=100, deadline=None)
@given(instances())
def test_auc_equals_pair_enumeration(inst):
    p, y, _ = inst
    assert auc(p, y) == pairwise_auc(p.tolist(), y.tolist())


@settings(max_examples=100, deadline=None)
@given(instances())
def test_user_auc_equals_pair_enumeration(inst):
    p, y, rng = inst
    users = rng.integers(0, 12, len(p))
    users[0] = users[1]
    assert user_auc(users, p, y) == mean_user_auc(users.tolist(), p.tolist(), y.tolist())


@settings(max_examples=50, deadline=None)
@given(instances(), st.sampled_from([np.exp, np.log1p, lambda v: v**3 - 7.0, lambda v: -1.0 / (v + 1.0)]))
def test_auc_invariant_to_monotone_transform(inst, f):
    p, y, _ = inst
    assert auc(f(p), y) == auc(p, y)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40),
       st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40))
def test_pair_auc_strict_matches_oracle(pos, neg):
    assert pair_auc(pos, neg) == strict_pair_auc(pos, neg)


def test_uauc_examples():
    assert nfb_uauc([1, 1], [0.9, 0.1], ["dislike", "none"]) == 1.0
    assert nfb_uauc([1, 1], [0.5, 0.5], ["report", "none"]) == 0.0
    users = [1, 1, 2, 2, 2, 2]
    p = [0.9, 0.1, 0.8, 0.2, 0.6, 0.4]
    eng = ["dislike", "none", "dislike", "report", "none", "none"]
    # user 2: pairs (0.8>0.6, 0.8>0.4, 0.2<0.6, 0.2<0.4) -> 0.5
    assert nfb_uauc(users, p, eng) == 0.75
    assert pfb_uauc([3, 3, 3], [0.7, 0.6, 0.1], ["like", "favorite", "none"]) == 1.0
    with pytest.raises(MetricError):
        nfb_uauc([1, 2], [0.1, 0.2], ["dislike", "none"])


def test_pfb_uauc_random_scores_near_half():
    rng = np.random.default_rng(7)
    n = 40_000
    users = rng.integers(0, 400, n)
    eng = rng.choice(["like", "none", "share"], n)
    assert abs(pfb_uauc(users, rng.random(n), eng) - 0.5) <= 0.03


@settings(max_examples=50, deadline=None)
@given(instances())
def test_nfb_uauc_without_ties_is_mean_of_user_aucs(inst):
    _, y, rng = inst
    p = rng.permutation(len(y)) / len(y)
    users = rng.integers(0, 8, len(y))
    users[0] = users[1]
    eng = np.where(y == 1, "dislike", "like")
    assert nfb_uauc(users, p, eng) == mean_user_auc(users.tolist(), p.tolist(), y.tolist())


def test_calibration_examples():
    assert calibration([0.2, 0.2, 0.2, 0.2, 0.2], [1, 0, 0, 0, 0]) == 0.0
    assert calibration([0.3, 0.3], [0.4, 0.0]) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(MetricError):
        calibration([0.1], [0])


@settings(max_examples=100)
@given(st.sampled_from([8, 64, 256]).flatmap(lambda n: st.lists(st.integers(0, 1), min_size=n, max_size=n)).filter(any))
def test_base_rate_predictor_is_perfectly_calibrated(y):
    # power-of-two sizes keep every partial sum exact
    rate = sum(y) / len(y)
    assert calibration([rate] * len(y), y) == 0.0


def test_weighted_calibration():
    assert calibration([0.5, 0.1], [1, 0], weights=[1, 3]) == pytest.approx((0.8 / 4) / (1 / 4) - 1)


@settings(max_examples=100)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=80).filter(any), st.floats(1e-3, 1.0))
def test_issue_rate_equals_debiased_rate_with_equal_weights(flags, p):
    t = SurveyTally("inappropriate", shows=len(flags), submits=len(flags), answers={"spam": sum(flags)})
    assert survey_issue_rate(t, "spam") == debiased_issue_rate(flags, [p] * len(flags))


def test_nearest_rank_quantiles():
    assert nearest_rank_quantiles([5, 1, 4, 2, 3], [0.2, 0.5, 1.0]).tolist() == [1, 3, 5]
    with pytest.raises(MetricError):
        nearest_rank_quantiles([], [0.5])


def test_strata_with_uniform_propensities():
    rng = np.random.default_rng(0)
    n = 20_000
    prop = rng.random(n)
    strata = stratified_report(rng.random(n), rng.integers(0, 2, n), prop, edges=[0.25, 0.5])
    assert [s.label for s in strata] == ["[0,0.25)", "[0.25,0.5)", "[0.5,max]"]
    assert abs(strata[0].n / n - 0.25) < 0.02 and abs(strata[1].n / n - 0.25) < 0.02
    assert sum(s.n for s in strata) == n


def test_strata_quantile_labels_and_coverage():
    prop = np.arange(1, 101) / 100
    y = np.tile([0, 1], 50)
    strata = stratified_report(prop, y, prop)
    assert [s.label for s in strata] == ["[0,P25)", "[P25,P50)", "[P50,P75)", "[P75,P100]"]
    assert [s.n for s in strata] == [24, 25, 25, 26]


def test_empty_or_single_class_bucket_is_undefined():
    strata = stratified_report([0.1, 0.2, 0.3], [0, 1, 0], [0.5, 0.6, 0.7], edges=[0.1, 0.65])
    assert strata[0].n == 0 and strata[0].auc is None and strata[0].calibration is None
    assert strata[2].n == 1 and strata[2].auc is None and strata[2].calibration is None
    assert strata[1].auc == 1.0


def test_prediction_records():
    recs = [PredictionRecord(1, 2, "satisfaction", 0.3, 1), PredictionRecord(1, 3, "satisfaction", 0.1, 0, 2.0)]
    users, p, y, w = records_to_arrays(recs)
    assert users.tolist() == [1, 1] and w.tolist() == [1.0, 2.0]
    assert auc(p, y) == 1.0
    with pytest.raises(ValueError):
        PredictionRecord(1, 2, "h", 1.5, 1)
    with pytest.raises(ValueError):
        PredictionRecord(1, 2, "h", 0.5, 2)
