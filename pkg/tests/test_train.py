import numpy as np
import pytest

from omnimoe.encoder import FmriEncoder, checkpoint_bytes
from omnimoe.errors import DivergenceError
from omnimoe.gradcheck import micro_config
from omnimoe.synth import generate_world, train_test_sets
from omnimoe.tensor import Tensor
from omnimoe.train import AdamW, calibrate_scale, train


def _data(**kw):
    values = dict(n_stimuli=24, batch_size=8, init_std=0.1, lr=3e-3)
    cfg = micro_config(**{**values, **kw})
    train_set, _ = train_test_sets(generate_world(cfg))
    return cfg, train_set


def test_loss_decreases_on_micro_run():
    cfg, data = _data()
    result = train(cfg, data, epochs=8)
    assert len(result.history) == 9
    assert result.final_loss < result.initial_loss


def test_training_is_deterministic():
    cfg, data = _data(moe_kind="sparse")
    a, b = train(cfg, data, epochs=2), train(cfg, data, epochs=2)
    assert a.history == b.history
    assert checkpoint_bytes(a.model) == checkpoint_bytes(b.model)


def test_weight_decay_skips_biases_norms_and_alpha():
    named = {
        "block0.attn.wq": Tensor(np.ones(2)),
        "block0.moe.alpha": Tensor(np.ones(2)),
        "block0.ln1.g": Tensor(np.ones(2)),
        "head_image.bias": Tensor(np.ones(2)),
    }
    opt = AdamW(named, lr=0.1, weight_decay=0.5)
    opt.step([np.zeros(2)] * 4)
    assert named["block0.attn.wq"].data[0] == pytest.approx(0.95)
    for k in ("block0.moe.alpha", "block0.ln1.g", "head_image.bias"):
        assert named[k].data[0] == 1.0


def test_adamw_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -1.0]))
    opt = AdamW({"x.b": p}, lr=0.01)
    opt.step([np.array([3.0, -0.2])])
    np.testing.assert_allclose(p.data, [0.99, -0.99], rtol=1e-6)


def test_divergence_is_reported():
    cfg, data = _data(lr=1e300)
    with pytest.raises(DivergenceError, match="epoch"):
        train(cfg, data, epochs=3)


def test_calibration_matches_norms_and_keeps_cosines():
    cfg, data = _data(calibrate_scale=False)
    model = train(cfg, data, epochs=1).model
    before = model.predict(data.padded, data.subjects)
    scales = calibrate_scale(model, data)
    after = model.predict(data.padded, data.subjects)
    for name, b, a, target in (("image", before[0], after[0], data.image), ("text", before[1], after[1], data.text)):
        np.testing.assert_allclose(a, scales[name] * b, rtol=1e-12)
        mean_norm = lambda x: np.linalg.norm(x.reshape(len(x), -1), axis=1).mean()
        assert mean_norm(a) == pytest.approx(mean_norm(target), rel=1e-12)


def test_zero_learning_rate_leaves_parameters_unchanged():
    cfg, data = _data(lr=0.0, calibrate_scale=False)
    before = checkpoint_bytes(FmriEncoder(cfg))
    result = train(cfg, data, epochs=2)
    assert checkpoint_bytes(result.model) == before
