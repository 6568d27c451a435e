import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polarcheck.data import MASK, Corpus, Example
from polarcheck.explain import Explanation
from polarcheck.metrics import (MetricConfig, aggregate, auc_tp, build_report, comprehensiveness,
                                evaluate_example, evaluate_methods, rank_correlation, spearman,
                                sufficiency, summarize, trapezoid_auc, violation_test)
from polarcheck.models import AttentionModel, ModelSpec, linear_softmax_model
from polarcheck.perturb import DEFAULT_STRATEGIES, MASK_TOKEN, ReplacementStrategy

MT = ReplacementStrategy(MASK_TOKEN)


def softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def oracle_model(seed=0, V=12, D=3, C=2):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(V, D))
    emb[MASK] = 0.0
    W = rng.normal(size=(D, C))
    return linear_softmax_model(W, emb), emb, W


def oracle_probs(emb, W, ids, removed=()):
    kept = [t for i, t in enumerate(ids) if i not in set(removed)]
    return softmax(emb[kept].sum(0) @ W) if kept else softmax(np.zeros(W.shape[1]))


def exp(w):
    return Explanation("hand", 0, np.asarray(w, float))


def avg_ranks(x):
    # average ranks by counting, independent of scipy
    x = np.asarray(x, float)
    return np.array([(x < v).sum() + ((x == v).sum() + 1) / 2 for v in x])


def spearman_oracle(a, b):
    ra, rb = avg_ranks(a), avg_ranks(b)
    return float(np.corrcoef(ra, rb)[0, 1])


# ------------------------------------------------------------ violation

def test_violation_sign_cases():
    m, emb, W = oracle_model()
    ids = np.array([3, 4, 5, 6])
    base = oracle_probs(emb, W, ids)
    yhat = int(np.argmax(base))
    delta = base[yhat] - oracle_probs(emb, W, ids, [0])[yhat]
    agree = violation_test(m, ids, exp([np.sign(delta), 0.1, 0.1, 0.1]), MT)
    disagree = violation_test(m, ids, exp([-np.sign(delta), 0.1, 0.1, 0.1]), MT)
    assert (agree.violation, disagree.violation) == (0, 1)
    assert agree.index == 0 and abs(agree.delta - delta) < 1e-14


def test_violation_undefined_cases():
    m, _, _ = oracle_model()
    assert violation_test(m, [3, 4], exp([0.0, 0.0]), MT).violation is None
    assert violation_test(m, [3], exp([1.0]), MT).violation is None


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False, allow_subnormal=False), min_size=3, max_size=3),
       st.floats(1e-3, 1e3))
def test_violation_invariant_to_positive_rescaling(w, c):
    m, _, _ = oracle_model(1)
    ids = [3, 7, 9]
    a = violation_test(m, ids, exp(w), MT)
    b = violation_test(m, ids, exp(np.asarray(w) * c), MT)
    assert a.violation == b.violation and a.index == b.index


# ------------------------------------------------------------------ AUC

def test_trapezoid_auc_cases():
    x = [0.0, 0.1, 0.5, 0.9]
    assert trapezoid_auc(x, [1, 1, 1, 1]) == 1.0
    assert trapezoid_auc(x, [0, 0, 0, 0]) == 0.0
    assert trapezoid_auc([0, 1], [0, 1]) == 0.5
    assert abs(trapezoid_auc([0, 0.5, 0.9], [1, 0.5, 0]) - (0.375 + 0.1) / 0.9) < 1e-15


def test_auc_tp_matches_oracle_on_corpus():
    m, emb, W = oracle_model(2, V=20)
    rng = np.random.default_rng(0)
    examples = [Example(rng.integers(3, 20, size=int(rng.integers(2, 12))), int(rng.integers(2)))
                for _ in range(15)]
    corpus = Corpus(examples, [str(i) for i in range(20)], 2, "test")
    cfg = MetricConfig()
    explainer = lambda ids: exp(emb[ids] @ (W[:, 1] - W[:, 0]))  # noqa: E731
    got = auc_tp(m, corpus, explainer, MT, cfg)
    curve = np.zeros(len(cfg.thresholds))
    for ex in examples:
        w = explainer(ex.ids).weights
        order = sorted(range(len(w)), key=lambda i: (-abs(w[i]), i))
        for j, t in enumerate(cfg.thresholds):
            k = 0 if t == 0 else min(max(1, int(math.floor(t * len(w) + 1e-9))), len(w) - 1)
            curve[j] += int(np.argmax(oracle_probs(emb, W, ex.ids, order[:k])) == ex.label)
    curve /= len(examples)
    assert abs(got - trapezoid_auc(cfg.thresholds, curve)) < 1e-12


# --------------------------------------------------- sufficiency and comp

def test_sufficiency_hand_case():
    # a 4-token input whose only informative token carries all the logit mass
    emb = np.zeros((6, 2))
    emb[3] = [0.0, math.log(3.0)]
    m = linear_softmax_model(np.eye(2), emb)
    ids = [3, 4, 4, 4]  # p(yhat=1) = 0.75; 4 is a zero embedding
    w = [1.0, 0.0, 0.0, 0.0]
    cfg = MetricConfig(levels=(0.25,))
    # keeping only the informative token leaves confidence at 0.75
    assert abs(sufficiency(m, ids, exp(w), MT, cfg)) < 1e-15
    # removing it drops confidence to 0.5
    assert abs(comprehensiveness(m, ids, exp(w), MT, cfg) - 0.25) < 1e-15
    # explaining with the wrong token mirrors the two
    w_bad = [0.0, 1.0, 0.0, 0.0]
    assert abs(sufficiency(m, ids, exp(w_bad), MT, cfg) - 0.25) < 1e-15
    assert abs(comprehensiveness(m, ids, exp(w_bad), MT, cfg)) < 1e-15


def test_sufficiency_and_comprehensiveness_closed_form():
    m, emb, W = oracle_model(4)
    ids = np.array([3, 4, 5, 6, 7, 8, 9, 10, 11, 3])
    w = np.array([0.3, -1.0, 0.2, 0.05, 0.7, -0.1, 0.0, 0.4, -0.6, 0.01])
    cfg = MetricConfig()
    base = oracle_probs(emb, W, ids)
    yhat = int(np.argmax(base))
    order = sorted(range(10), key=lambda i: (-abs(w[i]), i))
    suf, comp = [], []
    for lvl in cfg.levels:
        k = max(1, int(math.floor(lvl * 10 + 1e-9)))
        top = order[:k]
        comp.append(base[yhat] - oracle_probs(emb, W, ids, top)[yhat])
        suf.append(base[yhat] - oracle_probs(emb, W, ids, [i for i in range(10) if i not in top])[yhat])
    assert abs(sufficiency(m, ids, exp(w), MT, cfg) - np.mean(suf)) < 1e-14
    assert abs(comprehensiveness(m, ids, exp(w), MT, cfg) - np.mean(comp)) < 1e-14


# -------------------------------------------------------- rank correlation

def _single_removal_changes(emb, W, ids):
    base = oracle_probs(emb, W, ids)
    return np.array([np.abs(base - oracle_probs(emb, W, ids, [j])).sum() for j in range(len(ids))])


def test_rank_correlation_extremes():
    m, emb, W = oracle_model(5)
    ids = np.array([3, 4, 5, 6, 7])
    p = _single_removal_changes(emb, W, ids)
    assert abs(rank_correlation(m, ids, exp(p), MT) - 1.0) < 1e-12
    assert abs(rank_correlation(m, ids, exp(1.0 / p), MT) + 1.0) < 1e-12


def test_rank_correlation_brute_force_five_tokens():
    m, emb, W = oracle_model(6)
    rng = np.random.default_rng(1)
    for _ in range(10):
        ids = rng.integers(3, 12, size=5)
        w = rng.normal(size=5)
        order = sorted(range(5), key=lambda i: (-abs(w[i]), i))
        p = _single_removal_changes(emb, W, ids)[order]
        expect = spearman_oracle(np.abs(w)[order], p)
        assert abs(rank_correlation(m, ids, exp(w), MT) - expect) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 6)), min_size=3, max_size=15))
def test_spearman_matches_counting_oracle_with_ties(pairs):
    a, b = zip(*pairs)
    got = spearman(a, b)
    if len(set(a)) < 2 or len(set(b)) < 2:
        assert math.isnan(got)
    else:
        assert abs(got - spearman_oracle(a, b)) < 1e-12


# ------------------------------------------------------------ aggregation

def test_aggregate_is_mean_over_strategies():
    per = {s: {"AUCTP": v, "Violation": v, "Suf": v, "Comp": v, "RC": v}
           for s, v in zip("abc", (0.0, 0.3, 0.6))}
    assert all(abs(v - 0.3) < 1e-15 for v in aggregate(per).values())
    per["c"]["RC"] = math.nan
    assert abs(aggregate(per)["RC"] - 0.15) < 1e-15


def test_undefined_values_are_counted_not_averaged():
    m, _, _ = oracle_model()
    cfg = MetricConfig()
    recs = [evaluate_example(m, [3, 4, 5], 0, exp([1.0, 0.5, 0.2]), MT, cfg, "a"),
            evaluate_example(m, [3, 4], 0, exp([0.0, 0.0]), MT, cfg, "b"),
            evaluate_example(m, [3], 0, exp([1.0]), MT, cfg, "c")]
    values, counts = summarize(recs, cfg)
    assert counts["n"] == 3 and counts["violation_undefined"] == 2
    assert counts["suf_undefined"] == 1
    assert values["Violation"] == recs[0].violation


def test_batched_records_agree_with_single_metric_functions():
    spec = ModelSpec.from_zoo("lstm+tanh", num_classes=3, vocab_size=20, embed_dim=6,
                              hidden_dim=5, att_dim=4, seed=2)
    m = AttentionModel(spec)
    cfg = MetricConfig()
    rng = np.random.default_rng(3)
    ids = rng.integers(3, 20, size=11)
    exps = [Explanation(f"m{i}", 0, rng.normal(size=11)) for i in range(3)]
    for s in DEFAULT_STRATEGIES:
        for rec, e in zip(evaluate_methods(m, ids, 1, exps, s, cfg), exps):
            assert rec.violation == violation_test(m, ids, e, s).violation
            assert abs(rec.sufficiency - sufficiency(m, ids, e, s, cfg)) < 1e-14
            assert abs(rec.comprehensiveness - comprehensiveness(m, ids, e, s, cfg)) < 1e-14
            assert abs(rec.rank_correlation - rank_correlation(m, ids, e, s, cfg)) < 1e-12
        partial = evaluate_methods(m, ids, 1, exps, s, cfg, parts=("violation",))
        full = evaluate_methods(m, ids, 1, exps, s, cfg)
        assert [r.violation for r in partial] == [r.violation for r in full]
        assert all(r.rank_correlation is None for r in partial)


def test_report_groups_and_aggregates():
    m, _, _ = oracle_model()
    cfg = MetricConfig()
    recs = [evaluate_example(m, [3, 4, 5, 6], 1, exp([1.0, -0.5, 0.2, 0.1]), s, cfg, "x")
            for s in DEFAULT_STRATEGIES]
    rep = build_report(recs, cfg)
    assert len(rep.per_strategy) == 3
    expect = np.mean([v["Violation"] for v in rep.per_strategy.values()])
    assert rep.aggregate[("all", "hand")]["Violation"] == pytest.approx(expect, abs=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        MetricConfig(thresholds=(0.1, 0.2))
    with pytest.raises(ValueError):
        MetricConfig(rc_mode="pairs")
