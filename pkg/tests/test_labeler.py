import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cspipe.labeler import (CLASS_ORDER, BootstrapInstabilityError, ConfidenceRecord,
                            InfeasibleThresholdError, LabelClass, LabelPair, LabelParseError,
                            bootstrap_ci, ensemble_label, evaluate, fleiss_kappa,
                            majority_vote, parse_model_reply, precision_at_threshold,
                            render_prompt, load_prompt_template, roc_auc, select_threshold,
                            temperature_sweep)
from cspipe.scorers import ScorerClient, ScorerConfig, Scorers

from conftest import record

CS, HS, OT = LabelClass.COUNTERSPEECH, LabelClass.HATE_SPEECH, LabelClass.OTHER


# ---------------------------------------------------------------- parsing

def test_parse_answer_line():
    assert parse_model_reply("(Newcomer: hate speech, reply: other)") == (HS, OT)
    assert parse_model_reply("(newcomer: COUNTERSPEECH, reply: counterspeech)") == (CS, CS)
    assert parse_model_reply("Sure. ( newcomer :  Hate   Speech ,reply:Other )") == (HS, OT)
    with pytest.raises(LabelParseError):
        parse_model_reply("I think it's fine")


# ---------------------------------------------------------------- ensemble

def _scorers_answering(answers):
    """Generation stub returning ``answers[seed - 1]`` (seeds beyond repeat the last)."""
    def gen(payload):
        _, _, seed = payload
        return answers[min(seed, len(answers)) - 1]
    s = Scorers.stubs()
    s.generation = ScorerClient("generation", gen, ScorerConfig(retries=0))
    return s


PAIR = LabelPair("n", "ctx", "newcomer text", "r", "reply text")


def test_all_counterspeech():
    s = _scorers_answering(["(newcomer: other, reply: counterspeech)"] * 5)
    rn, rr = ensemble_label(PAIR, s)
    assert rr.conf(CS) == 1.0 and rn.conf(OT) == 1.0


def test_four_of_five():
    ans = ["(newcomer: hate speech, reply: counterspeech)"] * 4 + \
        ["(newcomer: hate speech, reply: other)"]
    _, rr = ensemble_label(PAIR, _scorers_answering(ans))
    assert rr.conf(CS) == 0.8


def test_tie_order():
    r = ConfidenceRecord("x", {CS: 2, HS: 2, OT: 1})
    assert r.argmax_label == CS
    assert ConfidenceRecord("x", {CS: 0, HS: 2, OT: 2}).argmax_label == HS


def test_unparseable_resampled_then_other():
    ans = ["garbage"] * 5 + ["(newcomer: hate, reply: counterspeech)"] * 3
    _, rr = ensemble_label(PAIR, _scorers_answering(ans))
    assert rr.conf(CS) == 1.0     # seeds 6..8 replaced the five failures
    s = _scorers_answering(["garbage"])
    with pytest.warns(RuntimeWarning):
        rn, rr = ensemble_label(PAIR, s, k=2, resample_budget=1)
    assert rr.conf(OT) == 1.0


def test_prompt_slots():
    t = load_prompt_template()
    p = render_prompt(t, PAIR)
    assert "Newcomer: newcomer text\nReply: reply text\nAnswer:" in p


@given(st.lists(st.sampled_from(["(newcomer: other, reply: counterspeech)",
                                 "(newcomer: hate speech, reply: other)",
                                 "(newcomer: other, reply: hate speech)"]),
                min_size=7, max_size=7), st.integers(1, 7))
@settings(max_examples=40, deadline=None)
def test_vote_conservation(answers, k):
    rn, rr = ensemble_label(PAIR, _scorers_answering(answers), k=k)
    for r in (rn, rr):
        assert sum(r.votes.values()) == k == r.k
        assert math.isclose(sum(r.confidence.values()), 1.0)
        assert all(round(c * k) == c * k or math.isclose(c * k, round(c * k))
                   for c in r.confidence.values())


# ---------------------------------------------------------------- agreement

def test_majority_vote():
    labels, ties = majority_vote([[CS, CS, HS], [CS, HS, OT], [OT, OT, OT]])
    assert labels == [CS, CS, OT] and ties == [False, True, False]


def test_kappa_fixtures():
    assert fleiss_kappa([[CS, CS, CS], [HS, HS, HS]]) == 1.0
    k = fleiss_kappa([[CS, CS, HS], [CS, HS, HS]])
    assert abs(k - (-1.0 / 3.0)) < 1e-9
    assert math.isnan(fleiss_kappa([[OT, OT], [OT, OT]]))


def test_kappa_random_near_zero():
    rng = np.random.default_rng(0)
    table = [[CLASS_ORDER[i] for i in row] for row in rng.integers(0, 3, size=(3000, 3))]
    assert abs(fleiss_kappa(table)) < 0.05


@given(st.lists(st.sampled_from(CLASS_ORDER), min_size=2, max_size=20), st.integers(2, 6))
def test_kappa_perfect_agreement(items, raters):
    if len(set(items)) < 2:
        return
    assert math.isclose(fleiss_kappa([[c] * raters for c in items]), 1.0)


def test_kappa_matches_statsmodels():
    sm = pytest.importorskip("statsmodels.stats.inter_rater")
    rng = np.random.default_rng(3)
    codes = rng.integers(0, 3, size=(50, 4))
    table = [[CLASS_ORDER[i] for i in row] for row in codes]
    counts, _ = sm.aggregate_raters(codes, n_cat=3)
    assert abs(fleiss_kappa(table) - sm.fleiss_kappa(counts)) < 1e-12


# ---------------------------------------------------------------- precision / threshold

def _threshold_fixture(n_top=12):
    # confidence 1.0: n_top predicted, 11 correct (when 12); 0.8: +5 (4 correct); 0.6: +10 (5 correct)
    conf, gold = [], []
    top_ok = 11 if n_top == 12 else n_top - 1
    conf += [1.0] * n_top
    gold += [CS] * top_ok + [OT] * (n_top - top_ok)
    extra_08 = 17 - n_top
    ok_08 = 15 - top_ok
    conf += [0.8] * extra_08
    gold += [CS] * ok_08 + [OT] * (extra_08 - ok_08)
    conf += [0.6] * 10
    gold += [CS] * 5 + [OT] * 5
    conf += [0.2] * 5
    gold += [OT] * 5
    return np.array(conf), gold


def test_precision_fixtures():
    conf, gold = _threshold_fixture()
    p, n = precision_at_threshold(conf, gold, CS, 1.0)
    assert (n, round(p, 4)) == (12, 0.9167)
    assert abs(p - 11 / 12) < 1e-9
    p, n = precision_at_threshold(conf, gold, CS, 0.8)
    assert n == 17 and abs(p - 15 / 17) < 1e-9
    p, n = precision_at_threshold(conf, gold, CS, 0.6)
    assert n == 27 and abs(p - 20 / 27) < 1e-9
    p, n = precision_at_threshold(conf, gold, CS, 1.5)
    assert n == 0 and math.isnan(p)
    assert precision_at_threshold([1.0, 1.0], [CS, CS], CS, 1.0) == (1.0, 2)


def test_select_threshold_fixtures():
    conf, gold = _threshold_fixture()
    assert select_threshold(conf, gold, CS) == 1.0
    conf, gold = _threshold_fixture(n_top=8)
    assert select_threshold(conf, gold, CS) == 0.8
    assert select_threshold([0.4] * 10, [CS] * 10, CS) == 0.4
    with pytest.raises(InfeasibleThresholdError):
        select_threshold([0.4] * 9, [CS] * 9, CS)


fixtures = st.lists(st.tuples(st.sampled_from([0.0, 0.2, 0.4, 0.6, 0.8, 1.0]), st.booleans()),
                    min_size=1, max_size=60)


@given(fixtures)
def test_precision_brute_force_and_monotone(rows):
    conf = np.array([c for c, _ in rows])
    gold = [CS if g else OT for _, g in rows]
    last_n = None
    for t in sorted(set(conf.tolist())):
        p, n = precision_at_threshold(conf, gold, CS, t)
        tp = sum(1 for c, g in rows if c >= t and g)
        fp = sum(1 for c, g in rows if c >= t and not g)
        assert n == tp + fp
        assert p == tp / (tp + fp)
        if last_n is not None:
            assert n <= last_n
        last_n = n


@given(fixtures, st.integers(1, 15))
def test_selected_threshold_respects_minimum(rows, min_pos):
    conf = np.array([c for c, _ in rows])
    gold = [CS if g else OT for _, g in rows]
    try:
        t = select_threshold(conf, gold, CS, min_pos)
    except InfeasibleThresholdError:
        assert (conf >= conf.min()).sum() < min_pos
        return
    assert precision_at_threshold(conf, gold, CS, t)[1] >= min_pos


# ---------------------------------------------------------------- AUC

def test_auc_fixtures():
    assert roc_auc([0.9, 0.4, 0.6, 0.1], [CS, CS, OT, OT], CS) == 0.75
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [CS, CS, OT, OT], CS) == 1.0
    assert roc_auc([0.5] * 4, [CS, OT, CS, OT], CS) == 0.5
    assert math.isnan(roc_auc([0.5, 0.6], [CS, CS], CS))


@given(st.lists(st.tuples(st.integers(0, 100), st.booleans()), min_size=2, max_size=40))
def test_auc_invariant_to_monotone_transform(rows):
    conf = np.array([c / 100 for c, _ in rows])
    gold = [CS if g else OT for _, g in rows]
    a = roc_auc(conf, gold, CS)
    b = roc_auc(np.exp(3 * conf) + 7, gold, CS)
    assert (math.isnan(a) and math.isnan(b)) or a == b


def test_auc_matches_pairwise_count():
    rng = np.random.default_rng(1)
    conf = rng.integers(0, 6, 80) / 5
    pos = rng.uniform(size=80) < 0.4
    gold = [CS if p else OT for p in pos]
    P, N = conf[pos], conf[~pos]
    brute = (np.sum(P[:, None] > N[None, :]) + 0.5 * np.sum(P[:, None] == N[None, :])) / (len(P) * len(N))
    assert abs(roc_auc(conf, gold, CS) - brute) < 1e-12


# ---------------------------------------------------------------- bootstrap

def test_bootstrap_constant_and_seeded():
    data = np.arange(20.0)
    assert bootstrap_ci(lambda s: 3.0, data) == (3.0, 3.0)
    assert bootstrap_ci(np.mean, data, seed=4) == bootstrap_ci(np.mean, data, seed=4)


def test_bootstrap_coin_interval_shrinks():
    rng = np.random.default_rng(0)
    small = (rng.uniform(size=1000) < 0.5).astype(float)
    big = (rng.uniform(size=10000) < 0.5).astype(float)
    lo, hi = bootstrap_ci(np.mean, small, seed=1)
    lo2, hi2 = bootstrap_ci(np.mean, big, seed=1, n_resamples=300)
    assert lo <= 0.5 <= hi
    assert hi2 - lo2 < hi - lo


def test_bootstrap_instability():
    with pytest.raises(BootstrapInstabilityError):
        bootstrap_ci(lambda s: math.nan, [1, 2, 3])
    with pytest.raises(ValueError):
        bootstrap_ci(np.mean, [])


def test_evaluate_report_shape():
    conf, gold = _threshold_fixture()
    recs = [record(str(k), cs=int(round(c * 5)), ot=5 - int(round(c * 5))) for k, c in enumerate(conf)]
    rep = evaluate(recs, gold, classes=(CS,), n_resamples=200)
    e = rep.classes[CS]
    assert e.threshold == 1.0 and abs(e.precision - 11 / 12) < 1e-12
    assert e.precision_ci[0] <= e.precision <= e.precision_ci[1]
    assert e.auc_ci[0] <= e.auc <= e.auc_ci[1]
    assert 0 <= e.auc <= 1
    assert "Counterspeech" in rep.to_table()
    assert rep.to_dict()["classes"]["Counterspeech"]["n_predicted"] == 12


# ---------------------------------------------------------------- temperature sweep

def _tagged_pairs(n):
    pairs, gold = [], []
    for k in range(n):
        is_cs = k % 2 == 0
        pairs.append(LabelPair(f"n{k}", "c", f"text {k}", f"r{k}", f"reply {k}"))
        gold.append(CS if is_cs else OT)
    return pairs, gold


def test_sweep_ignoring_temperature_ties_low():
    pairs, gold = _tagged_pairs(30)
    s = _scorers_answering(["(newcomer: other, reply: counterspeech)"])
    res = temperature_sweep(pairs, gold, s, temperatures=[0.5, 0.3, 1.0])
    assert res.best_temperature == 0.3 and res.tie


def test_sweep_engineered_peak():
    pairs, gold = _tagged_pairs(40)
    is_cs = {f"reply {k}": g == CS for k, g in enumerate(gold)}

    def gen(payload):
        prompt, temp, _ = payload
        reply = prompt.split("Reply: ")[-1].split("\n")[0]
        k = int(reply.split()[-1])
        # away from 1.2 some non-counterspeech replies are confidently mislabeled
        fooled = not is_cs[reply] and (k // 2) % 5 < round(abs(temp - 1.2) * 5)
        says_cs = is_cs[reply] or fooled
        return f"(newcomer: other, reply: {'counterspeech' if says_cs else 'other'})"

    s = Scorers.stubs()
    s.generation = ScorerClient("generation", gen, ScorerConfig(retries=0))
    res = temperature_sweep(pairs, gold, s, temperatures=[0.8, 1.0, 1.2, 1.4])
    assert res.best_temperature == 1.2 and not res.tie
    assert len(res.rows) == 4
    with pytest.raises(ValueError):
        temperature_sweep(pairs, gold, s, temperatures=[])
