"""Identification metrics on held-out stimuli."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ecphory import EcphoryConfig, MemoryBank, enhance_batch
from .errors import ZeroNormError
from .rng import EVAL, make_rng


def _unit(x: np.ndarray) -> np.ndarray:
    flat = x.reshape(len(x), -1)
    norms = np.sqrt((flat * flat).sum(axis=1, keepdims=True))
    if (norms == 0).any():
        raise ZeroNormError("zero-norm embedding")
    return flat / norms


def _candidates(stimuli: np.ndarray, targets: np.ndarray):
    """Unique stimulus ids and each query's position among them."""
    ids, first = np.unique(stimuli, return_index=True)
    return ids, targets[first], np.searchsorted(ids, stimuli)


def two_way_identification(
    preds: np.ndarray,
    targets: np.ndarray,
    stimuli: np.ndarray,
    trials: int,
    rng: np.random.Generator,
) -> float:
    """Percent of (query, distractor) draws where the true target is more similar.

    ``targets[i]`` is the true target of ``preds[i]``; distractors are drawn
    uniformly from the other distinct stimuli in the set. Ties count half.
    """
    if len(preds) == 0:
        raise ValueError("two-way identification needs at least one test sample")
    if trials < 1:
        raise ValueError("need at least one distractor draw")
    ids, cand, pos = _candidates(np.asarray(stimuli), targets)
    if len(ids) < 2:
        raise ValueError("two-way identification needs at least two distinct stimuli")
    sims = _unit(preds) @ _unit(cand).T
    draws = rng.integers(0, len(ids) - 1, size=(len(preds), trials))
    draws += draws >= pos[:, None]  # skip the true stimulus
    true = sims[np.arange(len(preds)), pos][:, None]
    other = np.take_along_axis(sims, draws, axis=1)
    score = (true > other) + 0.5 * (true == other)
    return float(100.0 * score.mean())


def topk_retrieval(preds: np.ndarray, targets: np.ndarray, stimuli: np.ndarray, k: int) -> float:
    """Percent of queries whose true target ranks in the top k of all distinct test targets."""
    ids, cand, pos = _candidates(np.asarray(stimuli), targets)
    sims = _unit(preds) @ _unit(cand).T
    true = sims[np.arange(len(preds)), pos]
    rank = (sims > true[:, None]).sum(axis=1)
    return float(100.0 * (rank < k).mean())


@dataclass
class Evaluation:
    two_way: float
    two_way_image: float
    two_way_text: float
    topk_retrieval: float
    per_subject: dict[int, float]

    def as_dict(self) -> dict:
        out = {
            "two_way": self.two_way,
            "two_way_image": self.two_way_image,
            "two_way_text": self.two_way_text,
            "topk_retrieval": self.topk_retrieval,
        }
        out.update({f"two_way_s{s}": v for s, v in sorted(self.per_subject.items())})
        return out


def evaluate_predictions(
    pred_image: np.ndarray,
    pred_text: np.ndarray,
    test,
    trials: int,
    retrieval_k: int,
    seed: int,
) -> Evaluation:
    """Score predictions for a :class:`~omnimoe.synth.SampleSet` of test samples.

    The distractor stream depends only on ``seed``, so two evaluations of the
    same test set draw identical distractors.
    """
    if len(test) == 0:
        raise ValueError("empty test set")

    def score(index):
        img = two_way_identification(pred_image[index], test.image[index], test.stimuli[index], trials, make_rng(seed, EVAL, 0))
        txt = two_way_identification(pred_text[index], test.text[index], test.stimuli[index], trials, make_rng(seed, EVAL, 1))
        return img, txt

    img, txt = score(slice(None))
    per_subject = {}
    for s in np.unique(test.subjects):
        rows = test.subjects == s
        per_subject[int(s)] = float(np.mean(score(rows)))
    retrieval = 0.5 * (
        topk_retrieval(pred_image, test.image, test.stimuli, retrieval_k)
        + topk_retrieval(pred_text, test.text, test.stimuli, retrieval_k)
    )
    return Evaluation(0.5 * (img + txt), img, txt, retrieval, per_subject)


def evaluate_two_way(
    model,
    test,
    use_ecphory: bool = False,
    trials: int = 50,
    bank: MemoryBank | None = None,
    ecphory: EcphoryConfig = EcphoryConfig(),
    retrieval_k: int = 5,
    seed: int = 0,
) -> Evaluation:
    """Run the model on ``test`` and score it, optionally Ecphory-enhanced."""
    pred_image, pred_text = model.predict(test.padded, test.subjects)
    if use_ecphory:
        if bank is None:
            raise ValueError("Ecphory evaluation needs a memory bank")
        pred_image, _ = enhance_batch(pred_image, test.subjects, bank, "image", ecphory)
        pred_text, _ = enhance_batch(pred_text, test.subjects, bank, "text", ecphory)
    return evaluate_predictions(pred_image, pred_text, test, trials, retrieval_k, seed)
