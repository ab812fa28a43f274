import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmiforecast.downstream import (EvalReport, LogisticModel, confusion_counts, evaluate, generalization_gap,
                                    matthews_corrcoef, predict, predict_proba, train_logistic)
from cmiforecast.errors import ContractViolation, DegenerateData, ShapeError


def mcc_oracle(preds, labels):
    tp = fp = tn = fn = 0
    for p, y in zip(preds, labels):
        if p == 1 and y == 1:
            tp += 1
        elif p == 1:
            fp += 1
        elif y == 0:
            tn += 1
        else:
            fn += 1
    num = tp * tn - fp * fn
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    return (tp, fp, tn, fn), (0.0 if den == 0 else num / math.sqrt(den))


def test_separable_toy_set_fits_perfectly(rng):
    x = np.vstack([rng.normal(2, 0.3, (20, 2)), rng.normal(-2, 0.3, (20, 2))])
    y = np.array([1] * 20 + [0] * 20)
    model = train_logistic(x, y, epochs=500)
    assert np.all(predict(model, x) == y)


def test_zero_contexts_give_prior_logit():
    y = np.array([1, 1, 1, 0])
    model = train_logistic(np.zeros((4, 3)), y, epochs=3000)
    np.testing.assert_allclose(model.weights, 0, atol=1e-5)
    assert model.bias == pytest.approx(math.log(3), abs=1e-3)


def test_strong_l2_shrinks_weights(rng):
    x = rng.normal(size=(50, 3))
    y = (x[:, 0] > 0).astype(int)
    weak = train_logistic(x, y, epochs=300, l2=1e-4)
    strong = train_logistic(x, y, epochs=300, l2=1e4)
    assert np.abs(strong.weights).max() < 1e-3 < np.abs(weak.weights).max()


def test_single_class_rejected():
    with pytest.raises(DegenerateData):
        train_logistic(np.ones((3, 2)), [1, 1, 1])


def test_loss_non_increasing_small_lr(rng):
    x = rng.normal(size=(40, 4))
    y = (x @ np.array([1.0, -1.0, 0.5, 0.0]) + 0.3 * rng.normal(size=40) > 0).astype(int)
    hist = train_logistic(x, y, epochs=200, lr=1e-3).loss_history
    assert all(b <= a + 1e-15 for a, b in zip(hist, hist[1:]))
    # the default 1/L step is also monotone
    hist = train_logistic(x, y, epochs=200).loss_history
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


def test_training_deterministic(rng):
    x = rng.normal(size=(30, 3))
    y = (x[:, 1] > 0).astype(int)
    a, b = train_logistic(x, y, seed=4), train_logistic(x, y, seed=4)
    assert a.weights.tobytes() == b.weights.tobytes() and a.bias == b.bias


def test_predict_proba_examples():
    m = LogisticModel(np.zeros(2), 0.0)
    assert predict_proba(m, [[3.0, -1.0]])[0] == 0.5
    m = LogisticModel(np.array([1.0, 0.0]), 0.0)
    assert predict_proba(m, [[1e3, 0.0]])[0] == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        predict_proba(m, [[1.0, 2.0, 3.0]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_predict_proba_sign_symmetry(c, w):
    m = LogisticModel(np.array(w), 0.0)
    c = np.array(c)
    assert predict_proba(m, c) + predict_proba(m, -c) == pytest.approx(1.0, abs=1e-12)


def test_evaluate_perfect_and_inverted():
    y = np.array([1, 0, 1, 1, 0])
    rep = evaluate(y, y)
    assert rep.accuracy == 100.0 and rep.mcc == 1.0
    assert evaluate(1 - y, y).mcc == pytest.approx(-1.0)


def test_evaluate_worked_example():
    preds = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
    labels = [1, 1, 1, 0, 0, 0, 0, 0, 1, 1]
    rep = evaluate(preds, labels)
    assert (rep.tp, rep.fp, rep.tn, rep.fn) == (3, 1, 4, 2)
    assert rep.accuracy == pytest.approx(70.0)
    assert rep.mcc == pytest.approx(0.4082, abs=1e-4)


def test_evaluate_contract():
    with pytest.raises(ContractViolation):
        evaluate([1, 0], [1])
    with pytest.raises(ContractViolation):
        evaluate([], [])


def test_mcc_degenerate_is_zero():
    assert matthews_corrcoef(5, 0, 0, 0) == 0.0
    assert evaluate([1, 1, 1], [1, 0, 1]).mcc == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
def test_evaluate_matches_oracle(pairs):
    preds, labels = map(np.array, zip(*pairs))
    counts, mcc = mcc_oracle(preds, labels)
    rep = evaluate(preds, labels)
    assert (rep.tp, rep.fp, rep.tn, rep.fn) == counts
    assert rep.total == len(preds)
    assert rep.accuracy == pytest.approx(100.0 * (counts[0] + counts[2]) / len(preds))
    assert rep.mcc == pytest.approx(mcc, rel=1e-12, abs=1e-15)
    assert -1.0 <= rep.mcc <= 1.0


def test_random_predictions_mcc_near_zero():
    r = np.random.default_rng(0)
    assert abs(evaluate(r.integers(0, 2, 1000), r.integers(0, 2, 1000)).mcc) < 0.2


def test_confusion_counts_sum():
    assert sum(confusion_counts([1, 0, 1], [0, 0, 1])) == 3


def test_generalization_gap_examples():
    assert generalization_gap(EvalReport(80.0, 0.5), EvalReport(77.0, 0.4)) == pytest.approx(3.0)
    assert generalization_gap(EvalReport(60.0, 0.1), EvalReport(60.0, 0.1)) == 0.0
    assert generalization_gap(EvalReport(60.0, 0.1), EvalReport.undefined()) is None
