"""Transformer encoder from padded voxel vectors to image / text embeddings.

The padded vector is cut into ``n_patches`` equal contiguous patches, each
with its own linear map to ``width`` features plus a learned positional
vector. The token sequence then runs through pre-norm transformer blocks
(single-head self-attention, then an FFN or MoE sublayer, each wrapped in a
residual). The last ``n_moe_blocks`` blocks carry the MoE sublayer.
Two linear heads map the ``m x c`` tokens to ``v x c`` and ``t x c``
embedding predictions.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import binio
from .config import RunConfig
from .errors import ConfigError, DegenerateSampleError, DimensionError, FormatError
from .moe import (
    ExpertMlp,
    ExpertStack,
    OmniMoeLayer,
    SplitLumpTrace,
    dense_moe_forward,
    omni_moe_forward,
    sparse_topk_forward,
)
from .rng import INIT, make_rng
from .tensor import (
    Tensor,
    add,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax_along,
    swap_last,
    transpose,
)

CHECKPOINT_MAGIC = b"PSYM"
CHECKPOINT_VERSION = 1


@dataclass
class EmbeddingPair:
    image: np.ndarray  # [v, c]
    text: np.ndarray  # [t, c]


@dataclass
class FmriSample:
    subject: int
    stimulus: int
    trial: int
    voxels: np.ndarray  # [d_s], raw
    padded: np.ndarray  # [d_max], wrapped and z-scored
    targets: EmbeddingPair


def wrap_pad(voxels: np.ndarray, d_max: int) -> np.ndarray:
    voxels = np.asarray(voxels, dtype=np.float64)
    d = voxels.shape[0]
    if not 1 <= d <= d_max:
        raise DimensionError(f"voxel count {d} outside [1, {d_max}]")
    return voxels[np.arange(d_max) % d]


def preprocess(voxels: np.ndarray, d_max: int) -> np.ndarray:
    """Wrap-around pad to ``d_max`` then z-score with the population std."""
    padded = wrap_pad(voxels, d_max)
    mean = padded.mean()
    std = padded.std()
    if std == 0 or not math.isfinite(std):
        raise DegenerateSampleError("voxel vector has zero variance after padding")
    return (padded - mean) / std


# ---------------------------------------------------------------------------
# model


class Block:
    def __init__(self, width: int, hidden: int, sublayer: str, rng, std: float, cfg: RunConfig, subjects):
        c = width
        self.sublayer = sublayer
        self.placement = cfg.moe_placement
        self.params: dict[str, Tensor] = {
            "ln1.g": Tensor(np.ones(c), requires_grad=True),
            "ln1.b": Tensor(np.zeros(c), requires_grad=True),
            "attn.wq": Tensor(rng.normal(0.0, std, (c, c)), requires_grad=True),
            "attn.wk": Tensor(rng.normal(0.0, std, (c, c)), requires_grad=True),
            "attn.wv": Tensor(rng.normal(0.0, std, (c, c)), requires_grad=True),
            "attn.wo": Tensor(rng.normal(0.0, std, (c, c)), requires_grad=True),
            "ln2.g": Tensor(np.ones(c), requires_grad=True),
            "ln2.b": Tensor(np.zeros(c), requires_grad=True),
        }
        self.ffn: ExpertMlp | None = None
        if sublayer == "mlp" or self.placement == "alongside":
            self.ffn = ExpertMlp(
                Tensor(rng.normal(0.0, std, (c, hidden)), requires_grad=True),
                Tensor(np.zeros(hidden), requires_grad=True),
                Tensor(rng.normal(0.0, std, (hidden, c)), requires_grad=True),
                Tensor(np.zeros(c), requires_grad=True),
            )
            self.params.update({"ffn.w1": self.ffn.w1, "ffn.b1": self.ffn.b1, "ffn.w2": self.ffn.w2, "ffn.b2": self.ffn.b2})
        self.moe: OmniMoeLayer | None = None
        self.experts: ExpertStack | None = None
        self.router: Tensor | None = None
        if sublayer == "omni":
            self.moe = OmniMoeLayer.init(rng, subjects, cfg.n_experts, c, hidden, cfg.shared_alpha, std)
            self.experts = self.moe.experts
            self.params["moe.alpha"] = self.moe.alpha
        elif sublayer in ("dense", "sparse"):
            self.experts = ExpertStack.init(rng, cfg.n_experts, c, hidden, std)
            if sublayer == "sparse":
                self.router = Tensor(rng.normal(0.0, std, (c, cfg.n_experts)), requires_grad=True)
                self.params["moe.router"] = self.router
        if self.experts is not None:
            ex = self.experts
            self.params.update({"moe.w1": ex.w1, "moe.b1": ex.b1, "moe.w2": ex.w2, "moe.b2": ex.b2})
        self.sparse_k = cfg.sparse_k
        self.last_trace: SplitLumpTrace | None = None

    def attention(self, x: Tensor) -> Tensor:
        p = self.params
        q = matmul(x, p["attn.wq"])
        k = matmul(x, p["attn.wk"])
        v = matmul(x, p["attn.wv"])
        logits = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(x.shape[-1]))
        return matmul(matmul(softmax_along(logits, axis=-1), v), p["attn.wo"])

    def mix(self, h: Tensor, subjects) -> Tensor:
        if self.sublayer == "mlp":
            return self.ffn(h)
        if self.sublayer == "omni":
            out, self.last_trace = omni_moe_forward(h, self.moe, subjects)
        elif self.sublayer == "dense":
            out = dense_moe_forward(h, self.experts)
        else:
            out = sparse_topk_forward(h, self.experts, self.router, self.sparse_k)
        if self.placement == "alongside":
            out = add(out, self.ffn(h))
        return out

    def __call__(self, x: Tensor, subjects) -> Tensor:
        p = self.params
        x = add(x, self.attention(layer_norm(x, p["ln1.g"], p["ln1.b"])))
        return add(x, self.mix(layer_norm(x, p["ln2.g"], p["ln2.b"]), subjects))


class Head:
    """``(mix @ tokens) @ proj + bias``: token mixing then a channel map."""

    def __init__(self, n_out: int, n_tokens: int, width: int, rng, std: float):
        self.mix = Tensor(rng.normal(0.0, std, (n_out, n_tokens)), requires_grad=True)
        self.proj = Tensor(rng.normal(0.0, std, (width, width)), requires_grad=True)
        self.bias = Tensor(np.zeros(width), requires_grad=True)

    @classmethod
    def identity(cls, n_tokens: int, width: int) -> "Head":
        head = cls.__new__(cls)
        head.mix = Tensor(np.eye(n_tokens), requires_grad=True)
        head.proj = Tensor(np.eye(width), requires_grad=True)
        head.bias = Tensor(np.zeros(width), requires_grad=True)
        return head

    def params(self) -> dict[str, Tensor]:
        return {"mix": self.mix, "proj": self.proj, "bias": self.bias}

    def __call__(self, tokens: Tensor) -> Tensor:
        return add(matmul(matmul(self.mix, tokens), self.proj), self.bias)


class FmriEncoder:
    """Shared encoder for all subjects; MoE sublayers receive the subject ids."""

    def __init__(self, cfg: RunConfig, seed: int | None = None):
        self.cfg = cfg
        rng = make_rng(cfg.seed if seed is None else seed, INIT)
        std = cfg.init_std
        m, c = cfg.n_patches, cfg.width
        self.patch_len = cfg.d_max // m
        self.patch_w = Tensor(rng.normal(0.0, std, (m, self.patch_len, c)), requires_grad=True)
        self.pos = Tensor(rng.normal(0.0, std, (m, c)), requires_grad=True)
        first_moe = cfg.n_blocks - cfg.n_moe_blocks
        self.blocks = [
            Block(c, cfg.hidden, cfg.moe_kind if i >= first_moe else "mlp", rng, std, cfg, cfg.subjects)
            for i in range(cfg.n_blocks)
        ]
        self.image_head = Head(cfg.image_tokens, m, c, rng, std)
        self.text_head = Head(cfg.text_tokens, m, c, rng, std)

    @property
    def subjects(self) -> list[int]:
        return self.cfg.subjects

    def named_parameters(self) -> dict[str, Tensor]:
        named = {"patch.w": self.patch_w, "patch.pos": self.pos}
        for i, block in enumerate(self.blocks):
            named.update({f"block{i}.{k}": v for k, v in block.params.items()})
        named.update({f"head_image.{k}": v for k, v in self.image_head.params().items()})
        named.update({f"head_text.{k}": v for k, v in self.text_head.params().items()})
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def moe_layers(self) -> list[OmniMoeLayer]:
        return [b.moe for b in self.blocks if b.moe is not None]

    def embed(self, padded: Tensor) -> Tensor:
        """``[B, d_max]`` -> ``[B, m, c]`` patch tokens plus positions."""
        if padded.shape[-1] != self.cfg.d_max:
            raise DimensionError(f"expected padded length {self.cfg.d_max}, got {padded.shape}")
        B = padded.shape[0]
        patches = reshape(padded, (B, self.cfg.n_patches, self.patch_len))
        tokens = transpose(matmul(transpose(patches, (1, 0, 2)), self.patch_w), (1, 0, 2))
        return add(tokens, self.pos)

    def encode(self, padded, subjects) -> Tensor:
        """Token sequence after every block. ``padded`` is ``[d_max]`` or ``[B, d_max]``."""
        x = padded if isinstance(padded, Tensor) else Tensor(padded)
        single = x.ndim == 1
        if single:
            x = reshape(x, (1, x.shape[0]))
            subjects = [subjects]
        elif not isinstance(subjects, (list, tuple, np.ndarray)):
            subjects = [subjects] * x.shape[0]
        subjects = [int(s) for s in subjects]
        tokens = self.embed(x)
        for block in self.blocks:
            tokens = block(tokens, subjects)
        if single:
            tokens = reshape(tokens, tokens.shape[1:])
        return tokens

    def project(self, tokens: Tensor, head: str) -> Tensor:
        if head == "image":
            return self.image_head(tokens)
        if head == "text":
            return self.text_head(tokens)
        raise ValueError(f"unknown head {head!r}; expected 'image' or 'text'")

    def __call__(self, padded, subjects) -> tuple[Tensor, Tensor]:
        tokens = self.encode(padded, subjects)
        return self.project(tokens, "image"), self.project(tokens, "text")

    def predict(self, padded: np.ndarray, subjects, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Inference without recording a graph."""
        params = self.parameters()
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            images, texts = [], []
            subjects = np.asarray(subjects)
            for lo in range(0, len(padded), batch_size):
                img, txt = self(padded[lo : lo + batch_size], list(subjects[lo : lo + batch_size]))
                images.append(img.data)
                texts.append(txt.data)
        finally:
            for p, flag in zip(params, flags):
                p.requires_grad = flag
        return np.concatenate(images), np.concatenate(texts)

    # -- persistence ---------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        if set(named) != set(state):
            missing = sorted(set(named) - set(state))
            extra = sorted(set(state) - set(named))
            raise FormatError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, t in named.items():
            if state[k].shape != t.shape:
                raise FormatError(f"parameter {k}: checkpoint shape {state[k].shape}, model {t.shape}")
            t.data[...] = state[k]


def checkpoint_bytes(model: FmriEncoder) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    binio.write_u32(buf, CHECKPOINT_VERSION)
    binio.write_text(buf, model.cfg.to_text())
    binio.write_records(buf, model.state_dict())
    return buf.getvalue()


def save_checkpoint(model: FmriEncoder, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path, expected: RunConfig | None = None) -> FmriEncoder:
    """Rebuild a model from disk.

    If ``expected`` is given, its architecture fields must match the stored
    config exactly; otherwise :class:`ConfigError` is raised.
    """
    with open(path, "rb") as f:
        binio.expect_magic(f, CHECKPOINT_MAGIC)
        version = binio.read_u32(f)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        cfg = RunConfig.from_text(binio.read_text(f))
        state = dict(binio.iter_records(f))
    if expected is not None:
        stored, wanted = cfg.architecture(), expected.architecture()
        diff = {k: (stored[k], wanted[k]) for k in stored if stored[k] != wanted[k]}
        if diff:
            raise ConfigError(f"checkpoint config mismatch (stored, expected): {diff}")
    model = FmriEncoder(cfg)
    model.load_state_dict(state)
    return model

