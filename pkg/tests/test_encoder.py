import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnimoe.encoder import FmriEncoder, Head, load_checkpoint, preprocess, save_checkpoint, wrap_pad, checkpoint_bytes
from omnimoe.errors import ConfigError, DegenerateSampleError, DimensionError, FormatError, UnknownSubjectError
from omnimoe.gradcheck import micro_batch, micro_config
from omnimoe.tensor import Tensor, backward
from omnimoe.contrastive import total_loss


def test_wrap_pad_examples():
    np.testing.assert_array_equal(wrap_pad([1.0, 2.0, 3.0], 5), [1, 2, 3, 1, 2])
    np.testing.assert_array_equal(wrap_pad([4.0, 5.0], 2), [4, 5])
    with pytest.raises(DimensionError):
        wrap_pad(np.ones(6), 5)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.integers(0, 10**6))
def test_preprocess_wraps_and_standardises(d, seed):
    x = np.random.default_rng(seed).normal(size=d)
    d_max = 40
    padded = wrap_pad(x, d_max)
    assert all(padded[i] == x[i % d] for i in range(d_max))
    z = preprocess(x, d_max)
    assert abs(z.mean()) < 1e-9 and abs(z.std() - 1.0) < 1e-9


def test_preprocess_hand_value_and_degenerate_input():
    np.testing.assert_allclose(preprocess(np.array([1.0, 2.0, 3.0]), 3), [-1.224744871391589, 0.0, 1.224744871391589], rtol=1e-12)
    with pytest.raises(DegenerateSampleError):
        preprocess(np.full(4, 2.0), 8)


def test_output_shapes_single_and_batched():
    cfg = micro_config()
    model = FmriEncoder(cfg)
    x = np.random.default_rng(0).normal(size=(3, cfg.d_max))
    tokens = model.encode(x[0], 1)
    assert tokens.shape == (cfg.n_patches, cfg.width)
    img, txt = model(x, [1, 2, 1])
    assert img.shape == (3, cfg.image_tokens, cfg.width) and txt.shape == (3, cfg.text_tokens, cfg.width)
    with pytest.raises(DimensionError):
        model(np.ones((2, cfg.d_max + 1)), [1, 1])


def test_last_blocks_carry_moe():
    model = FmriEncoder(micro_config(n_blocks=3, n_moe_blocks=2))
    assert [b.sublayer for b in model.blocks] == ["mlp", "omni", "omni"]
    assert len(model.moe_layers()) == 2


def test_zero_network_returns_patch_embedding():
    cfg = micro_config(n_blocks=2, n_moe_blocks=0)
    model = FmriEncoder(cfg)
    for block in model.blocks:
        for name, p in block.params.items():
            if name.startswith(("attn.", "ffn.")):
                p.data[...] = 0.0
    x = np.random.default_rng(1).normal(size=(2, cfg.d_max))
    np.testing.assert_array_equal(model.encode(x, [1, 2]).data, model.embed(Tensor(x)).data)


def test_subject_changes_output_once_alphas_differ():
    cfg = micro_config()
    model = FmriEncoder(cfg)
    x = np.random.default_rng(2).normal(size=cfg.d_max)
    alpha = model.moe_layers()[0].alpha
    alpha.data[1] = alpha.data[0]
    np.testing.assert_array_equal(model.encode(x, 1).data, model.encode(x, 2).data)
    alpha.data[1] += 0.3
    assert not np.array_equal(model.encode(x, 1).data, model.encode(x, 2).data)
    with pytest.raises(UnknownSubjectError):
        model.encode(x, 7)


def test_identity_head_returns_tokens():
    tokens = Tensor(np.random.default_rng(3).normal(size=(2, 4, 5)))
    np.testing.assert_array_equal(Head.identity(4, 5)(tokens).data, tokens.data)


def test_gradient_reaches_subject_parameters():
    cfg = micro_config()
    model = FmriEncoder(cfg)
    data = micro_batch(cfg)
    img, txt = model(data.padded, list(data.subjects))
    loss = total_loss(img, Tensor(data.image), txt, Tensor(data.text), cfg.temperature)
    alpha = model.moe_layers()[0].alpha
    (g,) = backward(loss, [alpha])
    for row, s in enumerate(model.subjects):
        assert np.abs(g[row]).max() > 0, f"no gradient on subject {s}"


def test_same_seed_same_parameters():
    a, b = FmriEncoder(micro_config(seed=5)), FmriEncoder(micro_config(seed=5))
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    c = FmriEncoder(micro_config(seed=6))
    assert checkpoint_bytes(a) != checkpoint_bytes(c)


def test_checkpoint_round_trip(tmp_path):
    cfg = micro_config(moe_kind="sparse")
    model = FmriEncoder(cfg)
    path = tmp_path / "m.psym"
    save_checkpoint(model, path)
    again = load_checkpoint(path, cfg)
    assert again.cfg == cfg
    for k, v in model.state_dict().items():
        assert np.array_equal(again.state_dict()[k], v)
    x = np.random.default_rng(4).normal(size=(2, cfg.d_max))
    assert np.array_equal(model.predict(x, [1, 2])[0], again.predict(x, [1, 2])[0])


def test_checkpoint_mismatch_and_corruption(tmp_path):
    cfg = micro_config()
    path = tmp_path / "m.psym"
    save_checkpoint(FmriEncoder(cfg), path)
    with pytest.raises(ConfigError, match="n_experts"):
        load_checkpoint(path, cfg.replace(n_experts=3))
    # non-architecture fields do not matter
    load_checkpoint(path, cfg.replace(lr=1.0))
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(FormatError):
        load_checkpoint(path)
