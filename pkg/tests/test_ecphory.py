import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnimoe.ecphory import (
    EcphoryConfig,
    MemoryBank,
    bank_bytes,
    build_bank,
    cosine_topk,
    ecphory_infer,
    enhance,
    enhance_batch,
    load_bank,
    save_bank,
)
from omnimoe.encoder import EmbeddingPair
from omnimoe.errors import ConfigError, DimensionError, FormatError, UnknownSubjectError, ZeroNormError


def _bank(ids, values, subject=1):
    ids = np.asarray(ids)
    return MemoryBank({(subject, "image"): (ids, values), (subject, "text"): (ids, values)})


def brute_force_topk(query, ids, values, k, token=0):
    """Full scan: cosine against every entry, sort by (-score, id)."""
    q = query[token] if token is not None else query.ravel()
    qn = q / math.sqrt(math.fsum(q * q))
    scored = []
    for i, v in zip(ids, values):
        row = v[token] if token is not None else v.ravel()
        rn = row / math.sqrt(math.fsum(row * row))
        scored.append((-math.fsum(qn * rn), int(i)))
    scored.sort()
    return [(i, -s) for s, i in scored[:k]]


def _random_bank(rng, n):
    tokens, c = int(rng.integers(1, 4)), int(rng.integers(1, 6))
    ids = rng.choice(10 * n + 10, size=n, replace=False)
    values = rng.normal(size=(n, tokens, c))
    if n > 2:
        # exact duplicates force ties that must break by lower id
        dup = rng.choice(n, size=max(1, n // 10), replace=True)
        values[dup] = values[rng.integers(0, n)]
    return ids, values


def _assert_matches_oracle(hits, expected):
    assert [h[0] for h in hits] == [e[0] for e in expected]
    np.testing.assert_allclose([h[1] for h in hits], [e[1] for e in expected], rtol=0, atol=1e-12)


def test_retrieval_matches_brute_force_on_random_banks():
    rng = np.random.default_rng(0)
    for _ in range(60):
        n = int(rng.integers(1, 400))
        ids, values = _random_bank(rng, n)
        bank = _bank(ids, values)
        k = int(rng.integers(1, n + 1))
        query = values[rng.integers(0, n)] if rng.random() < 0.3 else rng.normal(size=values.shape[1:])
        for token in (0, None):
            hits = cosine_topk(query, bank, 1, "image", k, EcphoryConfig(similarity_token=token))
            _assert_matches_oracle(hits, brute_force_topk(query, ids, values, k, token))


def test_self_retrieval_scores_one():
    rng = np.random.default_rng(1)
    values = rng.normal(size=(20, 2, 3))
    bank = _bank(np.arange(20), values)
    for i in (0, 7, 19):
        (top,) = cosine_topk(values[i], bank, 1, "image", 1)
        assert top[0] == i and top[1] == pytest.approx(1.0, abs=1e-15)


def test_hand_computed_cosine():
    bank = _bank([5], np.array([[[1.0, 1.0]]]))
    ((sid, score),) = cosine_topk(np.array([[1.0, 0.0]]), bank, 1, "text", 1)
    assert sid == 5 and score == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_ties_break_by_lower_id_regardless_of_insertion_order():
    row = np.array([[0.3, -0.4]])
    values = np.stack([row, row, -row, row])
    bank = _bank([9, 2, 4, 7], values)
    hits = cosine_topk(row, bank, 1, "image", 4)
    assert [h[0] for h in hits] == [2, 7, 9, 4]


def test_only_the_similarity_token_matters():
    values = np.array([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [5.0, 5.0]]])
    bank = _bank([3, 1], values)
    hits = cosine_topk(np.array([[2.0, 0.0], [-1.0, 0.0]]), bank, 1, "image", 2)
    assert [h[0] for h in hits] == [1, 3] and hits[0][1] == hits[1][1] == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(1e-3, 1e3))
def test_retrieval_is_scale_invariant(seed, k):
    rng = np.random.default_rng(seed)
    ids, values = _random_bank(rng, int(rng.integers(2, 50)))
    bank = _bank(ids, values)
    q = rng.normal(size=values.shape[1:])
    scaled = q.copy()
    scaled[0] *= k
    a = cosine_topk(q, bank, 1, "image", len(ids))
    b = cosine_topk(scaled, bank, 1, "image", len(ids))
    assert [h[0] for h in a] == [h[0] for h in b]


def test_retrieval_errors():
    bank = _bank([0, 1], np.ones((2, 1, 2)))
    with pytest.raises(ZeroNormError):
        cosine_topk(np.zeros((1, 2)), bank, 1, "image", 1)
    with pytest.raises(ValueError):
        cosine_topk(np.ones((1, 2)), bank, 1, "image", 3)
    with pytest.raises(UnknownSubjectError, match="known"):
        cosine_topk(np.ones((1, 2)), bank, 2, "image", 1)


# -- enhance ------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_enhance_endpoints_are_bit_exact(seed):
    rng = np.random.default_rng(seed)
    pred, mem = rng.normal(size=(2, 3, 4)) * 10.0 ** rng.integers(-5, 5, size=(2, 1, 1))
    assert np.array_equal(enhance(pred, mem, 1.0), pred)
    assert np.array_equal(enhance(pred, mem, 0.0), mem)


def test_enhance_midpoint_and_errors():
    np.testing.assert_array_equal(enhance([1.0, 0.0], [0.0, 1.0], 0.5), [0.5, 0.5])
    with pytest.raises(DimensionError):
        enhance(np.ones(2), np.ones(3), 0.5)
    with pytest.raises(ConfigError):
        enhance(np.ones(2), np.ones(2), 1.5)
    with pytest.raises(ConfigError):
        EcphoryConfig(mix_weight=-0.1)
    with pytest.raises(ConfigError):
        EcphoryConfig(k=0)


# -- ecphory_infer --------------------------------------------------------------


class _FixedEncoder:
    """Stands in for the encoder: always predicts the same embeddings."""

    def __init__(self, image, text):
        self.image, self.text = image, text

    def predict(self, padded, subjects):
        return self.image[None], self.text[None]


def _sample(subject=1):
    return SimpleNamespace(subject=subject, padded=np.zeros(4))


def _two_modality_bank(rng, n=12, subject=1):
    ids = rng.choice(100, size=n, replace=False)
    image, text = rng.normal(size=(n, 2, 3)), rng.normal(size=(n, 3, 3))
    return ids, image, text, MemoryBank({(subject, "image"): (ids, image), (subject, "text"): (ids, text)})


def test_infer_alpha_one_returns_prediction():
    rng = np.random.default_rng(2)
    _, _, _, bank = _two_modality_bank(rng)
    enc = _FixedEncoder(rng.normal(size=(2, 3)), rng.normal(size=(3, 3)))
    out = ecphory_infer(_sample(), enc, bank, EcphoryConfig(mix_weight=1.0))
    assert np.array_equal(out.image, enc.image) and np.array_equal(out.text, enc.text)


def test_infer_fixed_point_when_prediction_is_stored():
    rng = np.random.default_rng(3)
    ids, image, text, bank = _two_modality_bank(rng)
    enc = _FixedEncoder(image[4].copy(), text[4].copy())
    out = ecphory_infer(_sample(), enc, bank, EcphoryConfig(0.5, 1))
    np.testing.assert_allclose(out.image, image[4], rtol=0, atol=1e-15)
    np.testing.assert_allclose(out.text, text[4], rtol=0, atol=1e-15)
    assert out.provenance["image"][0][0] == ids[4]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 1.0), st.integers(1, 4))
def test_infer_equals_composed_oracles(seed, mix, k):
    rng = np.random.default_rng(seed)
    ids, image, text, bank = _two_modality_bank(rng)
    enc = _FixedEncoder(rng.normal(size=(2, 3)), rng.normal(size=(3, 3)))
    out = ecphory_infer(_sample(), enc, bank, EcphoryConfig(mix, k))
    for modality, pred, values, got in (("image", enc.image, image, out.image), ("text", enc.text, text, out.text)):
        hits = brute_force_topk(pred, ids, values, k)
        memory = np.mean([values[list(ids).index(i)] for i, _ in hits], axis=0)
        np.testing.assert_allclose(got, mix * pred + (1 - mix) * memory, rtol=1e-12, atol=1e-14)
        assert [h[0] for h in out.provenance[modality]] == [h[0] for h in hits]


def test_infer_unknown_subject():
    rng = np.random.default_rng(4)
    _, _, _, bank = _two_modality_bank(rng)
    enc = _FixedEncoder(np.ones((2, 3)), np.ones((3, 3)))
    with pytest.raises(UnknownSubjectError):
        ecphory_infer(_sample(subject=9), enc, bank)


def test_banks_are_per_subject():
    a, b = np.ones((1, 1, 2)), -np.ones((1, 1, 2))
    bank = MemoryBank({(1, "image"): ([0], a), (1, "text"): ([0], a), (2, "image"): ([1], b), (2, "text"): ([1], b)})
    assert cosine_topk(np.ones((1, 2)), bank, 2, "image", 1)[0][0] == 1


def test_enhance_batch_matches_single_retrievals():
    rng = np.random.default_rng(5)
    ids, image, _, _ = _two_modality_bank(rng)
    bank = MemoryBank({(1, "image"): (ids, image), (2, "image"): (ids[:5], image[:5])})
    preds = rng.normal(size=(7, 2, 3))
    subjects = np.array([1, 2, 1, 1, 2, 2, 1])
    cfg = EcphoryConfig(0.3, 2)
    out, top = enhance_batch(preds, subjects, bank, "image", cfg)
    for p, s, o, t in zip(preds, subjects, out, top):
        hits = cosine_topk(p, bank, s, "image", 2, cfg)
        sid, vals = bank.entries(s, "image")
        mem = vals[np.searchsorted(sid, [h[0] for h in hits])].mean(axis=0)
        np.testing.assert_allclose(o, 0.3 * p + 0.7 * mem, rtol=1e-13, atol=1e-15)
        assert t == hits[0][0]


# -- building and persistence -------------------------------------------------------


def _samples(pairs):
    return [
        SimpleNamespace(subject=s, stimulus=n, targets=EmbeddingPair(np.full((2, 3), float(n)), np.full((1, 3), -float(n))))
        for s, n in pairs
    ]


def test_build_bank_counts_and_errors():
    bank = build_bank(_samples([(1, n) for n in range(5)]))
    assert bank.subjects == [1] and bank.size(1, "image") == 5 and bank.size(1, "text") == 5
    with pytest.raises(ValueError, match="duplicate"):
        build_bank(_samples([(1, 0), (1, 0)]))
    with pytest.raises(ValueError):
        build_bank([])


def test_bank_entries_are_immutable():
    bank = build_bank(_samples([(1, 0), (1, 1)]))
    _, values = bank.entries(1, "image")
    with pytest.raises(ValueError):
        values[0, 0, 0] = 3.0


def test_bank_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(6)
    ids, image, text, _ = _two_modality_bank(rng)
    bank = MemoryBank({(s, m): (ids, v) for s in (1, 3) for m, v in (("image", image), ("text", text))})
    save_bank(bank, tmp_path / "b.ecph")
    again = load_bank(tmp_path / "b.ecph")
    assert again == bank
    assert bank_bytes(again) == bank_bytes(bank)


def test_corrupt_bank_file(tmp_path):
    path = tmp_path / "x.ecph"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(FormatError):
        load_bank(path)
    good = bank_bytes(build_bank(_samples([(1, 0)])))
    path.write_bytes(good[:-5])
    with pytest.raises(FormatError):
        load_bank(path)
