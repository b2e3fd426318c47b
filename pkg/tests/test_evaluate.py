import numpy as np
import pytest

from omnimoe.evaluate import evaluate_predictions, topk_retrieval, two_way_identification
from omnimoe.synth import SampleSet


def _set(n=40, tokens=2, c=6, seed=0):
    rng = np.random.default_rng(seed)
    stimuli = np.arange(n) % (n // 2)
    targets = rng.normal(size=(n // 2, tokens, c))[stimuli]
    return stimuli, targets


def test_perfect_predictor_scores_100():
    stimuli, targets = _set()
    assert two_way_identification(targets, targets, stimuli, 20, np.random.default_rng(0)) == 100.0
    assert topk_retrieval(targets, targets, stimuli, 1) == 100.0


def test_random_predictor_near_chance():
    rng = np.random.default_rng(1)
    n, d = 400, 256
    stimuli = np.arange(n)
    targets = rng.normal(size=(n, 1, d))
    preds = rng.normal(size=(n, 1, d))
    score = two_way_identification(preds, targets, stimuli, 50, np.random.default_rng(2))
    # 20000 draws, binomial sd ~0.35 points; queries share predictions so allow more
    assert abs(score - 50.0) < 2.5


def test_positive_rescaling_does_not_change_scores():
    stimuli, targets = _set(seed=3)
    preds = targets + np.random.default_rng(4).normal(size=targets.shape)
    base = two_way_identification(preds, targets, stimuli, 30, np.random.default_rng(5))
    scaled = two_way_identification(preds * 8.0, targets, stimuli, 30, np.random.default_rng(5))
    assert base == scaled
    assert topk_retrieval(preds, targets, stimuli, 3) == topk_retrieval(preds * 0.25, targets, stimuli, 3)


def test_distractor_is_never_the_true_stimulus():
    # with two stimuli, the distractor is always the other one
    stimuli = np.array([0, 1])
    targets = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    preds = np.array([[[1.0, 0.2]], [[1.0, 0.0]]])
    assert two_way_identification(preds, targets, stimuli, 10, np.random.default_rng(0)) == 50.0


def test_errors():
    stimuli, targets = _set()
    with pytest.raises(ValueError):
        two_way_identification(targets[:0], targets[:0], stimuli[:0], 5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        two_way_identification(targets, targets, stimuli, 0, np.random.default_rng(0))


def test_evaluate_predictions_per_subject_and_determinism():
    stimuli, targets = _set()
    n = len(stimuli)
    test = SampleSet(np.zeros((n, 4)), np.arange(n) % 2 + 1, stimuli, np.zeros(n, dtype=np.int64), targets, targets)
    preds = targets + np.random.default_rng(6).normal(size=targets.shape)
    a = evaluate_predictions(preds, preds, test, 20, 3, seed=7)
    b = evaluate_predictions(preds, preds, test, 20, 3, seed=7)
    assert a == b and set(a.per_subject) == {1, 2}
    assert 0.0 <= a.two_way <= 100.0 and 0.0 <= a.topk_retrieval <= 100.0
    with pytest.raises(ValueError):
        evaluate_predictions(preds[:0], preds[:0], test.subset(slice(0, 0)), 20, 3, seed=7)
