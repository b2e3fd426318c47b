import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnimoe.contrastive import (
    ContrastiveConfig,
    bidirectional_infonce,
    flatten_normalize,
    infonce_from_logits,
    similarity_logits,
    total_loss,
)
from omnimoe.errors import ConfigError, DimensionError, ZeroNormError
from omnimoe.tensor import Tensor, backward, finite_difference_check


def _oracle(pred, target, tau):
    """Loop-based reference written directly from the loss definition."""
    n = len(pred)
    p = pred.reshape(n, -1)
    t = target.reshape(n, -1)
    p = p / np.linalg.norm(p, axis=1, keepdims=True)
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    total = 0.0
    for i in range(n):
        row = [float(p[i] @ t[j]) / tau for j in range(n)]
        col = [float(p[j] @ t[i]) / tau for j in range(n)]
        total += -(row[i] - math.log(sum(math.exp(v) for v in row)))
        total += -(col[i] - math.log(sum(math.exp(v) for v in col)))
    return total / n


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(1, 3), st.integers(1, 5), st.floats(0.05, 2.0), st.integers(0, 10**6))
def test_matches_loop_oracle(n, tokens, c, tau, seed):
    rng = np.random.default_rng(seed)
    pred, target = rng.normal(size=(n, tokens, c)), rng.normal(size=(n, tokens, c))
    got = bidirectional_infonce(Tensor(pred), Tensor(target), tau).item()
    assert got == pytest.approx(_oracle(pred, target, tau), rel=1e-10, abs=1e-12)


def test_orthonormal_perfect_match_hand_value():
    # B=2, pred = target = orthonormal rows: each term is log(1 + e^{-1/tau})
    tau = 0.5
    x = Tensor(np.eye(2).reshape(2, 1, 2))
    expected = 2 * math.log(1 + math.exp(-1 / tau))
    assert bidirectional_infonce(x, x, tau).item() == pytest.approx(expected, rel=1e-13)


def test_uniform_logits_give_two_log_n():
    n = 5
    assert infonce_from_logits(Tensor(np.zeros((n, n)))).item() == pytest.approx(2 * math.log(n), rel=1e-14)


def test_loss_is_scale_invariant():
    rng = np.random.default_rng(0)
    pred, target = rng.normal(size=(4, 2, 3)), rng.normal(size=(4, 2, 3))
    a = bidirectional_infonce(Tensor(pred), Tensor(target)).item()
    b = bidirectional_infonce(Tensor(7.5 * pred), Tensor(0.3 * target)).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_temperature_gradient_check():
    rng = np.random.default_rng(1)
    pred = Tensor(rng.normal(size=(4, 2, 3)), requires_grad=True)
    target = Tensor(rng.normal(size=(4, 2, 3)))
    tau = Tensor(0.3, requires_grad=True)
    for p in (pred, tau):
        assert finite_difference_check(lambda: bidirectional_infonce(pred, target, tau), p).passed


def test_float_and_tensor_temperature_agree():
    rng = np.random.default_rng(2)
    pred, target = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    a = bidirectional_infonce(pred, target, 0.2).item()
    b = bidirectional_infonce(pred, target, Tensor(0.2)).item()
    c = bidirectional_infonce(pred, target, ContrastiveConfig(0.2)).item()
    assert a == pytest.approx(b, rel=1e-14) and a == c


def test_total_loss_is_sum_of_terms():
    rng = np.random.default_rng(3)
    pi, ti, pt, tt = (Tensor(rng.normal(size=(3, 2, 4))) for _ in range(4))
    total = total_loss(pi, ti, pt, tt, 0.07).item()
    assert total == pytest.approx(bidirectional_infonce(pi, ti).item() + bidirectional_infonce(pt, tt).item(), rel=1e-14)


def test_errors():
    with pytest.raises(DimensionError):
        bidirectional_infonce(Tensor(np.ones((3, 4))), Tensor(np.ones((2, 4))))
    with pytest.raises(ConfigError):
        ContrastiveConfig(0.0)
    with pytest.raises(ConfigError):
        similarity_logits(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))), -1.0)
    with pytest.raises(ZeroNormError):
        flatten_normalize(Tensor(np.zeros((2, 3))))


def test_loss_gradient_reaches_prediction():
    rng = np.random.default_rng(4)
    pred = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    (g,) = backward(bidirectional_infonce(pred, Tensor(rng.normal(size=(4, 6)))), [pred])
    assert np.abs(g).max() > 0
