import numpy as np
import pytest
from hypothesis import given, strategies as st

from binsem.errors import ValidationError
from binsem.metrics import ConfusionMatrix, confusion, evaluate, report_by_pair, roc_auc, summarize

from oracles import auc_pairwise


def test_confusion_enumeration():
    cm = confusion([(1, 1), (1, 0), (0, 0), (0, 1)])
    assert cm == ConfusionMatrix(tp=1, fp=1, tn=1, fn=1)
    assert confusion([{"label": 1, "truth": 1}] * 3) == ConfusionMatrix(tp=3)


def test_confusion_errors():
    with pytest.raises(ValidationError):
        confusion([])
    with pytest.raises(ValidationError):
        confusion([(2, 1)])


def test_summarize_fixtures():
    r = summarize(ConfusionMatrix(1, 1, 1, 1))
    assert (r.precision, r.recall, r.f1, r.accuracy, r.fpr) == (0.5, 0.5, 0.5, 0.5, 0.5)
    r = summarize(ConfusionMatrix(tp=4, tn=6))
    assert (r.precision, r.recall, r.f1, r.accuracy, r.fpr, r.tpr) == (1.0, 1.0, 1.0, 1.0, 0.0, 1.0)
    r = summarize(ConfusionMatrix(tp=3, fp=1, tn=4, fn=2))
    assert r.precision == 3 / 4 and r.recall == 3 / 5 and r.fpr == 1 / 5 and r.accuracy == 7 / 10
    assert r.f1 == 2 * (3 / 4) * (3 / 5) / (3 / 4 + 3 / 5)
    r = summarize(ConfusionMatrix(tn=2, fn=1))
    assert r.precision == 0.0 and "precision" in r.undefined and "f1" in r.undefined


def test_auc_fixtures():
    assert roc_auc([(0.9, 1), (0.8, 1), (0.1, 0)]) == 1.0
    assert roc_auc([(0.5, 1), (0.5, 0), (0.5, 1)]) == 0.5
    with pytest.raises(ValidationError):
        roc_auc([(0.2, 1), (0.3, 1)])


def test_auc_matches_bruteforce_on_random_samples():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 60))
        truths = rng.integers(0, 2, size=n)
        truths[0], truths[1] = 0, 1
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))   # rounding creates ties
        got = roc_auc(list(zip(scores, truths)))
        assert abs(got - auc_pairwise(scores.tolist(), truths.tolist())) < 1e-9


scored = st.lists(st.tuples(st.integers(-1000, 1000).map(lambda k: k / 100), st.integers(0, 1)), min_size=2, max_size=40).filter(
    lambda xs: {t for _, t in xs} == {0, 1})


@given(scored)
def test_auc_monotone_invariance(rows):
    base = roc_auc(rows)
    assert abs(roc_auc([(np.exp(s / 4), t) for s, t in rows]) - base) < 1e-9
    assert abs(roc_auc([(3 * s - 1, t) for s, t in rows]) - base) < 1e-9


@given(scored)
def test_auc_reversal(rows):
    scores = [s for s, _ in rows]
    if len(set(scores)) == len(scores):
        assert abs(roc_auc([(-s, t) for s, t in rows]) - (1 - roc_auc(rows))) < 1e-9


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50))
def test_summarize_total_and_bounded(pairs):
    cm = confusion(pairs)
    assert cm.total == len(pairs)
    r = summarize(cm)
    for name in ("fpr", "tpr", "accuracy", "precision", "recall", "f1"):
        assert 0.0 <= getattr(r, name) <= 1.0
    if r.precision + r.recall > 0:
        assert r.f1 == pytest.approx(2 * r.precision * r.recall / (r.precision + r.recall))
    assert summarize(confusion(pairs)) == r


def test_evaluate_adds_auc():
    rows = [{"label": 1, "truth": 1, "score": 0.9}, {"label": 0, "truth": 0, "score": 0.2}]
    assert evaluate(rows).auc == 1.0
    assert evaluate([{"label": 1, "truth": 1, "score": 0.9}]).auc is None


def rows_with_f1(group, f1_target):
    # tp=1, fp=k gives precision 1/(1+k), recall 1
    if f1_target == 0.8:
        return [{"group": group, "label": 1, "truth": 1}] * 2 + [{"group": group, "label": 1, "truth": 0}]
    return [{"group": group, "label": 1, "truth": 1}] + [{"group": group, "label": 1, "truth": 0}] * 8


def test_report_by_pair_average():
    rows = rows_with_f1("(CO0,GO3)", 0.8) + rows_with_f1("(CO1,GO1)", 0.2)
    rep = report_by_pair(rows)
    f1s = [g.f1 for g in rep.groups.values()]
    assert sorted(round(f, 6) for f in f1s) == [0.2, 0.8]
    assert rep.average["f1"] == pytest.approx(0.5)
    weighted = report_by_pair(rows, weighted=True)
    assert weighted.average["f1"] == pytest.approx((3 * 0.8 + 9 * 0.2) / 12)
    csv = rep.to_csv().splitlines()
    assert csv[0] == "pair,P,R,F1"
    assert csv[1].startswith('"(CO0,GO3)"') or csv[1].startswith("(CO0,GO3)")
    assert csv[-1].startswith("Average,")
    assert set(rep.to_dict()["groups"]) == {"(CO0,GO3)", "(CO1,GO1)"}


def test_report_single_group_average_equals_group():
    rep = report_by_pair(rows_with_f1("(GO0,GO3)", 0.8))
    g = rep.groups["(GO0,GO3)"]
    assert rep.average["precision"] == g.precision and rep.average["f1"] == g.f1


def test_report_requires_group():
    with pytest.raises(ValidationError):
        report_by_pair([{"label": 1, "truth": 1}])
