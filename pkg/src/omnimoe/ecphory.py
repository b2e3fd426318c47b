"""Retrieval-enhanced inference from per-subject memory banks.

A bank stores, for every subject, the image and text target embeddings of
that subject's training stimuli. At inference the predicted embedding is
used as a query: the most similar stored embedding (cosine similarity of
one token row, token 0 by default) is retrieved and blended back into the
prediction with a convex mix-up weight.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import binio
from .errors import ConfigError, DimensionError, FormatError, UnknownSubjectError, ZeroNormError

BANK_MAGIC = b"ECPH"
BANK_VERSION = 1
MODALITIES = ("image", "text")
MODALITY_TAGS = {"image": 0, "text": 1}


@dataclass(frozen=True)
class EcphoryConfig:
    mix_weight: float = 0.5
    k: int = 1
    # None compares whole flattened embeddings instead of one token row
    similarity_token: int | None = 0

    def __post_init__(self):
        if not 0.0 <= self.mix_weight <= 1.0:
            raise ConfigError("mix weight must lie in [0, 1]")
        if self.k < 1:
            raise ConfigError("K must be positive")


@dataclass
class _Memories:
    ids: np.ndarray  # [n] ascending
    values: np.ndarray  # [n, tokens, c]
    keys: dict = field(default_factory=dict)  # similarity_token -> unit rows


class MemoryBank:
    """Immutable per-subject stores of target embeddings keyed by stimulus id."""

    def __init__(self, store: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]]):
        self._store: dict[tuple[int, str], _Memories] = {}
        for (subject, modality), (ids, values) in store.items():
            if modality not in MODALITY_TAGS:
                raise ValueError(f"unknown modality {modality!r}")
            ids = np.asarray(ids, dtype=np.int64)
            values = np.array(values, dtype=np.float64)
            if len(np.unique(ids)) != len(ids):
                raise ValueError(f"duplicate stimulus ids for subject {subject}, {modality}")
            if values.ndim != 3 or values.shape[0] != len(ids):
                raise DimensionError(f"memory values {values.shape} do not match {len(ids)} ids")
            order = np.argsort(ids, kind="stable")
            ids, values = ids[order], values[order]
            ids.setflags(write=False)
            values.setflags(write=False)
            self._store[(int(subject), modality)] = _Memories(ids, values)

    @property
    def subjects(self) -> list[int]:
        return sorted({s for s, _ in self._store})

    def size(self, subject: int, modality: str = "image") -> int:
        return len(self._memories(subject, modality).ids)

    def __len__(self) -> int:
        return sum(len(m.ids) for m in self._store.values())

    def entries(self, subject: int, modality: str) -> tuple[np.ndarray, np.ndarray]:
        mem = self._memories(subject, modality)
        return mem.ids, mem.values

    def _memories(self, subject: int, modality: str) -> _Memories:
        try:
            return self._store[(int(subject), modality)]
        except KeyError:
            if all(s != int(subject) for s, _ in self._store):
                raise UnknownSubjectError(subject, self.subjects) from None
            raise KeyError(f"no {modality} memories for subject {subject}") from None

    def keys(self, subject: int, modality: str, token: int | None) -> np.ndarray:
        """Unit-normalised similarity rows, cached per token choice."""
        mem = self._memories(subject, modality)
        if token not in mem.keys:
            mem.keys[token] = _unit_rows(_similarity_rows(mem.values, token))
        return mem.keys[token]

    def __eq__(self, other) -> bool:
        if not isinstance(other, MemoryBank) or self._store.keys() != other._store.keys():
            return False
        return all(
            np.array_equal(a.ids, other._store[k].ids) and np.array_equal(a.values, other._store[k].values)
            for k, a in self._store.items()
        )


def build_bank(samples: Iterable) -> MemoryBank:
    """Bank of every sample's targets, keyed by (subject, stimulus).

    Samples need ``subject``, ``stimulus`` and ``targets.image/.text``.
    A repeated (subject, stimulus) pair is an error; pass one trial per
    stimulus.
    """
    collected: dict[int, dict[int, tuple[np.ndarray, np.ndarray]]] = {}
    for s in samples:
        per = collected.setdefault(int(s.subject), {})
        if int(s.stimulus) in per:
            raise ValueError(f"duplicate memory for subject {s.subject}, stimulus {s.stimulus}")
        per[int(s.stimulus)] = (s.targets.image, s.targets.text)
    if not collected:
        raise ValueError("cannot build a memory bank from no samples")
    store = {}
    for subject, per in collected.items():
        ids = np.array(sorted(per), dtype=np.int64)
        store[(subject, "image")] = (ids, np.stack([per[i][0] for i in ids]))
        store[(subject, "text")] = (ids, np.stack([per[i][1] for i in ids]))
    return MemoryBank(store)


def bank_from_targets(subjects: Iterable[int], stimuli: Iterable[int], image: np.ndarray, text: np.ndarray) -> MemoryBank:
    """Every subject stores the targets of the given stimuli (rows of ``image``/``text``)."""
    ids = np.array(sorted(set(int(n) for n in stimuli)), dtype=np.int64)
    if ids.size == 0:
        raise ValueError("cannot build a memory bank from no stimuli")
    store = {}
    for s in subjects:
        store[(int(s), "image")] = (ids, image[ids])
        store[(int(s), "text")] = (ids, text[ids])
    return MemoryBank(store)


# ---------------------------------------------------------------------------
# retrieval


def _similarity_rows(x: np.ndarray, token: int | None) -> np.ndarray:
    """``[..., tokens, c]`` -> ``[..., d]`` vectors compared by cosine."""
    if token is None:
        return x.reshape(x.shape[:-2] + (-1,))
    return x[..., token, :]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if (norms == 0).any():
        raise ZeroNormError("zero-norm similarity row")
    return x / norms


def cosine_topk(query: np.ndarray, bank: MemoryBank, subject: int, modality: str, k: int, cfg: EcphoryConfig = EcphoryConfig()) -> list[tuple[int, float]]:
    """Exact top-K memories by cosine similarity, best first.

    Equal scores are ordered by ascending stimulus id.
    """
    ids, _ = bank.entries(subject, modality)
    if not 1 <= k <= len(ids):
        raise ValueError(f"K={k} outside [1, {len(ids)}] for subject {subject}")
    q = _unit_rows(_similarity_rows(np.asarray(query, dtype=np.float64), cfg.similarity_token))
    scores = _row_dots(bank.keys(subject, modality, cfg.similarity_token), q[None, :])[0]
    # ids ascend, so a stable sort on -score breaks ties by lower id
    order = np.argsort(-scores, kind="stable")[:k]
    return [(int(ids[i]), float(scores[i])) for i in order]


def _row_dots(keys: np.ndarray, queries: np.ndarray, chunk: int = 32) -> np.ndarray:
    """``queries @ keys.T`` with each entry reduced on its own.

    A BLAS product may round identical key rows differently depending on
    their position, which would make exact ties depend on storage order.
    """
    out = np.empty((len(queries), len(keys)))
    for lo in range(0, len(queries), chunk):
        q = queries[lo : lo + chunk]
        out[lo : lo + chunk] = (q[:, None, :] * keys[None, :, :]).sum(axis=-1)
    return out


def topk_indices(queries: np.ndarray, keys: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched form of :func:`cosine_topk` over pre-normalised keys."""
    scores = _row_dots(keys, _unit_rows(queries))
    order = np.argsort(-scores, axis=-1, kind="stable")[:, :k]
    return order, np.take_along_axis(scores, order, axis=-1)


def enhance(pred: np.ndarray, retrieved: np.ndarray, mix_weight: float) -> np.ndarray:
    """``mix * pred + (1 - mix) * retrieved``; the endpoints return exact copies."""
    pred = np.asarray(pred, dtype=np.float64)
    retrieved = np.asarray(retrieved, dtype=np.float64)
    if pred.shape != retrieved.shape:
        raise DimensionError(f"enhance: prediction {pred.shape} and memory {retrieved.shape} differ")
    if not 0.0 <= mix_weight <= 1.0:
        raise ConfigError("mix weight must lie in [0, 1]")
    if mix_weight == 1.0:
        return pred.copy()
    if mix_weight == 0.0:
        return retrieved.copy()
    return mix_weight * pred + (1.0 - mix_weight) * retrieved


@dataclass
class EcphoryResult:
    image: np.ndarray
    text: np.ndarray
    provenance: dict[str, list[tuple[int, float]]]


def ecphory_infer(sample, encoder, bank: MemoryBank, cfg: EcphoryConfig = EcphoryConfig()) -> EcphoryResult:
    """Predict, retrieve from the sample's own subject memories, and blend.

    With K > 1 the retrieved embeddings are averaged before blending.
    """
    if int(sample.subject) not in bank.subjects:
        raise UnknownSubjectError(sample.subject, bank.subjects)
    pred_image, pred_text = encoder.predict(sample.padded[None, :], [sample.subject])
    preds = {"image": pred_image[0], "text": pred_text[0]}
    out, provenance = {}, {}
    for modality in MODALITIES:
        hits = cosine_topk(preds[modality], bank, sample.subject, modality, cfg.k, cfg)
        ids, values = bank.entries(sample.subject, modality)
        rows = np.searchsorted(ids, [h[0] for h in hits])
        memory = values[rows[0]] if len(rows) == 1 else values[rows].mean(axis=0)
        out[modality] = enhance(preds[modality], memory, cfg.mix_weight)
        provenance[modality] = hits
    return EcphoryResult(out["image"], out["text"], provenance)


def enhance_batch(
    preds: np.ndarray,
    subjects: np.ndarray,
    bank: MemoryBank,
    modality: str,
    cfg: EcphoryConfig = EcphoryConfig(),
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised Ecphory over many predictions; returns (enhanced, top-1 ids)."""
    out = np.empty_like(preds)
    top_ids = np.empty(len(preds), dtype=np.int64)
    for subject in np.unique(subjects):
        rows = np.flatnonzero(subjects == subject)
        ids, values = bank.entries(int(subject), modality)
        if cfg.k > len(ids):
            raise ValueError(f"K={cfg.k} exceeds {len(ids)} memories of subject {subject}")
        keys = bank.keys(int(subject), modality, cfg.similarity_token)
        order, _ = topk_indices(_similarity_rows(preds[rows], cfg.similarity_token), keys, cfg.k)
        memory = values[order[:, 0]] if cfg.k == 1 else values[order].mean(axis=1)
        out[rows] = enhance(preds[rows], memory, cfg.mix_weight)
        top_ids[rows] = ids[order[:, 0]]
    return out, top_ids


# ---------------------------------------------------------------------------
# persistence
#
# "ECPH" | u32 version | u32 subject count, then for each subject and each
# modality (image then text): u32 subject id | u8 modality tag |
# u32 entry count | u32 token count | u32 dim | entries, each a u64 stimulus
# id followed by token*dim little-endian f64 values (row-major).


def bank_bytes(bank: MemoryBank) -> bytes:
    buf = io.BytesIO()
    buf.write(BANK_MAGIC)
    binio.write_u32(buf, BANK_VERSION)
    subjects = bank.subjects
    binio.write_u32(buf, len(subjects))
    for s in subjects:
        for modality in MODALITIES:
            ids, values = bank.entries(s, modality)
            binio.write_u32(buf, s)
            binio.write_u8(buf, MODALITY_TAGS[modality])
            binio.write_u32(buf, len(ids))
            binio.write_u32(buf, values.shape[1])
            binio.write_u32(buf, values.shape[2])
            for i, row in zip(ids, values):
                binio.write_u64(buf, int(i))
                binio.write_f64s(buf, row)
    return buf.getvalue()


def save_bank(bank: MemoryBank, path) -> None:
    Path(path).write_bytes(bank_bytes(bank))


def load_bank(path) -> MemoryBank:
    tags = {v: k for k, v in MODALITY_TAGS.items()}
    store = {}
    with open(path, "rb") as f:
        binio.expect_magic(f, BANK_MAGIC)
        version = binio.read_u32(f)
        if version != BANK_VERSION:
            raise FormatError(f"unsupported bank version {version}")
        for _ in range(binio.read_u32(f)):
            for _ in MODALITIES:
                subject = binio.read_u32(f)
                tag = binio.read_u8(f)
                if tag not in tags:
                    raise FormatError(f"unknown modality tag {tag}")
                count, tokens, dim = binio.read_u32(f), binio.read_u32(f), binio.read_u32(f)
                ids = np.empty(count, dtype=np.int64)
                values = np.empty((count, tokens, dim))
                for j in range(count):
                    ids[j] = binio.read_u64(f)
                    values[j] = binio.read_f64s(f, (tokens, dim))
                store[(subject, tags[tag])] = (ids, values)
        if f.read(1):
            raise FormatError("trailing bytes after bank data")
    return MemoryBank(store)
