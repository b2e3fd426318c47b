"""AdamW training of the encoder on mixed-subject batches."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .contrastive import total_loss
from .encoder import FmriEncoder
from .errors import DivergenceError, NonFiniteError
from .rng import SHUFFLE, make_rng
from .synth import SampleSet
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

# Parameter name suffixes that receive decoupled weight decay. Biases,
# norms, positions and the per-subject routing matrices do not: decay on
# a subject's routing matrix would move it without any of its own data.
_DECAYED = {"w", "w1", "w2", "wq", "wk", "wv", "wo", "mix", "proj", "router"}


class AdamW:
    def __init__(
        self,
        named_params: dict[str, Tensor],
        lr: float = 5e-4,
        betas: tuple[float, float] = (0.9, 0.9999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.names = list(named_params)
        self.params = list(named_params.values())
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.decay = [weight_decay if n.rsplit(".", 1)[-1] in _DECAYED else 0.0 for n in self.names]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v, wd in zip(self.params, grads, self.m, self.v, self.decay):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if wd:
                p.data *= 1.0 - self.lr * wd
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: FmriEncoder
    history: list[dict] = field(default_factory=list)
    scales: dict[str, float] = field(default_factory=dict)

    @property
    def initial_loss(self) -> float:
        return self.history[0]["train_loss"]

    @property
    def final_loss(self) -> float:
        return self.history[-1]["train_loss"]


def batch_loss(model: FmriEncoder, data: SampleSet, index, temperature) -> Tensor:
    img, txt = model(data.padded[index], list(data.subjects[index]))
    return total_loss(img, Tensor(data.image[index]), txt, Tensor(data.text[index]), temperature)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, size):
        idx = order[lo : lo + size]
        if len(idx) >= 2:
            yield idx


def train(cfg: RunConfig, data: SampleSet, model: FmriEncoder | None = None, epochs: int | None = None) -> TrainResult:
    """Optimise every encoder parameter with AdamW on the contrastive loss.

    ``history[0]`` is the loss before any update (same batching as epoch 1);
    later rows hold the mean batch loss of each epoch.
    """
    model = FmriEncoder(cfg) if model is None else model
    epochs = cfg.epochs if epochs is None else epochs
    named = model.named_parameters()
    params = list(named.values())
    opt = AdamW(named, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    rng = make_rng(cfg.seed, SHUFFLE)
    result = TrainResult(model)

    initial = [batch_loss(model, data, idx, cfg.temperature).item() for idx in _batches(len(data), cfg.batch_size, make_rng(cfg.seed, SHUFFLE))]
    result.history.append({"epoch": 0, "train_loss": float(np.mean(initial))})

    for epoch in range(1, epochs + 1):
        losses = []
        for idx in _batches(len(data), cfg.batch_size, rng):
            try:
                loss = batch_loss(model, data, idx, cfg.temperature)
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch} step {opt.t + 1}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"epoch {epoch} step {opt.t + 1}: loss is {value}")
            opt.step(backward(loss, params))
            losses.append(value)
        result.history.append({"epoch": epoch, "train_loss": float(np.mean(losses))})
        log.info("epoch %d train_loss %.5f", epoch, result.history[-1]["train_loss"])
    if cfg.calibrate_scale:
        result.scales = calibrate_scale(model, data)
    return result


def calibrate_scale(model: FmriEncoder, data: SampleSet) -> dict[str, float]:
    """Rescale each head so mean prediction norm equals mean target norm on ``data``.

    The contrastive loss only sees cosines, so training leaves the output
    scale arbitrary; a convex blend with stored targets needs the two on a
    common scale. Scaling ``proj`` and ``bias`` together rescales the head
    output exactly and leaves every cosine unchanged.
    """
    pred_image, pred_text = model.predict(data.padded, data.subjects)
    scales = {}
    for name, pred, target, head in (
        ("image", pred_image, data.image, model.image_head),
        ("text", pred_text, data.text, model.text_head),
    ):
        pn = np.linalg.norm(pred.reshape(len(pred), -1), axis=1).mean()
        tn = np.linalg.norm(target.reshape(len(target), -1), axis=1).mean()
        g = float(tn / pn) if pn > 0 else 1.0
        head.proj.data *= g
        head.bias.data *= g
        scales[name] = g
    return scales
