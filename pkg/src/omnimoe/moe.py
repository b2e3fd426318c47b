"""Omni mixture-of-experts layer and the dense / sparse top-K baselines.

Shapes follow the token convention used throughout the package: ``O`` is
``[..., m, c]`` (m tokens, c features), routing scores are ``[..., m, E]``.
A leading batch axis is optional everywhere; with a batch, each sample may
belong to a different subject.

The split-then-lump layer computes, for subject ``s``::

    scores = O @ alpha[s]                  # [m, E]
    omega  = softmax over tokens (axis m)  # columns sum to 1
    slots  = omega^T @ O                   # [E, c], one slot per expert
    Q[e]   = f_e(slots[e])                 # expert e sees only slot e
    C      = softmax over experts (axis E) # rows sum to 1
    P      = C @ Q                         # [m, c]
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, UnknownSubjectError
from .tensor import (
    Tensor,
    add,
    concatenate,
    gather_rows,
    gelu,
    matmul,
    matmul_exact,
    reshape,
    softmax_along,
    sum_along,
    swap_last,
    transpose,
)

INIT_STD = 0.02

# Added to non-selected router logits; exp() of it underflows to exactly 0.
_MASKED_LOGIT = -1e200


@dataclass
class ExpertMlp:
    """Two-layer GELU MLP mapping ``c`` features back to ``c`` features."""

    w1: Tensor  # [c, h]
    b1: Tensor  # [h]
    w2: Tensor  # [h, c]
    b2: Tensor  # [c]

    def __post_init__(self):
        c, h = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (h, c) or self.b2.shape != (c,):
            raise DimensionError(
                f"expert weights inconsistent: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )

    @property
    def features(self) -> int:
        return self.w1.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(gelu(add(matmul(x, self.w1), self.b1)), self.w2), self.b2)


class ExpertStack:
    """E independent expert MLPs held as stacked weight tensors.

    Stacking lets every expert run in a single batched matmul. Indexing
    yields standalone :class:`ExpertMlp` copies, which is what the oracle
    tests evaluate against.
    """

    def __init__(self, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor):
        E, c, h = w1.shape
        if b1.shape != (E, 1, h) or w2.shape != (E, h, c) or b2.shape != (E, 1, c):
            raise DimensionError(
                f"expert stack inconsistent: w1 {w1.shape}, b1 {b1.shape}, w2 {w2.shape}, b2 {b2.shape}"
            )
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @classmethod
    def init(cls, rng: np.random.Generator, n_experts: int, c: int, h: int, std: float = INIT_STD):
        return cls(
            Tensor(rng.normal(0.0, std, (n_experts, c, h)), requires_grad=True),
            Tensor(np.zeros((n_experts, 1, h)), requires_grad=True),
            Tensor(rng.normal(0.0, std, (n_experts, h, c)), requires_grad=True),
            Tensor(np.zeros((n_experts, 1, c)), requires_grad=True),
        )

    @classmethod
    def from_experts(cls, experts: Sequence[ExpertMlp]) -> "ExpertStack":
        """Stack experts through recorded primitives so gradients reach each one."""
        if not experts:
            raise DimensionError("need at least one expert")

        def stack(ts, shape):
            return concatenate([reshape(t, (1, *shape)) for t in ts], axis=0)

        c, h = experts[0].w1.shape
        return cls(
            stack([e.w1 for e in experts], (c, h)),
            stack([e.b1 for e in experts], (1, h)),
            stack([e.w2 for e in experts], (h, c)),
            stack([e.b2 for e in experts], (1, c)),
        )

    def __len__(self) -> int:
        return self.w1.shape[0]

    def __getitem__(self, e: int) -> ExpertMlp:
        return ExpertMlp(
            Tensor(self.w1.data[e]),
            Tensor(self.b1.data[e, 0]),
            Tensor(self.w2.data[e]),
            Tensor(self.b2.data[e, 0]),
        )

    @property
    def features(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[2]

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def run_grouped(self, x: Tensor) -> Tensor:
        """Apply expert e to ``x[e]`` for ``x`` of shape ``[E, n, c]``."""
        hidden = gelu(add(matmul(x, self.w1), self.b1))
        return add(matmul(hidden, self.w2), self.b2)


def _as_stack(experts) -> ExpertStack:
    if isinstance(experts, ExpertStack):
        return experts
    return ExpertStack.from_experts(list(experts))


class OmniMoeLayer:
    """Experts shared by all subjects plus one ``c x E`` routing matrix per subject.

    With ``shared_alpha=True`` every subject maps onto a single routing
    matrix (the shared-parameter ablation).
    """

    def __init__(
        self,
        experts: ExpertStack,
        alpha: Tensor,
        subjects: Iterable[Hashable],
        shared_alpha: bool = False,
    ):
        self.experts = experts
        self.alpha = alpha
        self.shared_alpha = shared_alpha
        subjects = list(subjects)
        if len(set(subjects)) != len(subjects):
            raise ValueError("subject ids must be unique")
        n_rows = 1 if shared_alpha else len(subjects)
        if alpha.shape != (n_rows, experts.features, len(experts)):
            raise DimensionError(
                f"alpha has shape {alpha.shape}, expected {(n_rows, experts.features, len(experts))}"
            )
        self.subject_index = {s: (0 if shared_alpha else i) for i, s in enumerate(subjects)}

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        subjects: Iterable[Hashable],
        n_experts: int,
        c: int,
        h: int | None = None,
        shared_alpha: bool = False,
        std: float = INIT_STD,
    ) -> "OmniMoeLayer":
        subjects = list(subjects)
        h = 4 * c if h is None else h
        experts = ExpertStack.init(rng, n_experts, c, h, std)
        rows = 1 if shared_alpha else len(subjects)
        alpha = Tensor(rng.normal(0.0, std, (rows, c, n_experts)), requires_grad=True)
        return cls(experts, alpha, subjects, shared_alpha)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_index)

    @property
    def subject_params(self) -> dict[Hashable, np.ndarray]:
        """Read-only view of each subject's routing matrix."""
        return {s: self.alpha.data[i] for s, i in self.subject_index.items()}

    def rows_for(self, subjects) -> np.ndarray:
        try:
            return np.array([self.subject_index[s] for s in subjects], dtype=np.int64)
        except KeyError as exc:
            raise UnknownSubjectError(exc.args[0], self.subject_index) from None

    def parameters(self) -> list[Tensor]:
        return self.experts.parameters() + [self.alpha]

    def __call__(self, O: Tensor, subject) -> Tensor:
        return omni_moe_forward(O, self, subject)[0]


@dataclass
class SplitLumpTrace:
    scores: np.ndarray
    split_weights: np.ndarray
    slot_features: np.ndarray
    lump_weights: np.ndarray
    output: np.ndarray


# ---------------------------------------------------------------------------
# split-then-lump pieces


def subject_scores(O: Tensor, layer: OmniMoeLayer, subject) -> Tensor:
    """``O @ alpha[s]``. For batched ``O`` pass one subject id per sample."""
    if O.shape[-1] != layer.experts.features:
        raise DimensionError(f"tokens have {O.shape[-1]} features, layer expects {layer.experts.features}")
    if O.ndim == 2:
        rows = layer.rows_for([subject])
        alpha = reshape(gather_rows(layer.alpha, rows), layer.alpha.shape[1:])
    else:
        subjects = _per_sample(subject, O.shape[0])
        alpha = gather_rows(layer.alpha, layer.rows_for(subjects))
    return matmul_exact(O, alpha)


def _per_sample(subject, batch: int) -> list:
    if isinstance(subject, (list, tuple, np.ndarray)):
        subjects = list(subject)
        if len(subjects) != batch:
            raise DimensionError(f"{len(subjects)} subject ids for a batch of {batch}")
        return subjects
    return [subject] * batch


def split_weights(scores: Tensor) -> Tensor:
    """Softmax over the token axis: each expert's column sums to 1."""
    return softmax_along(scores, axis=-2, order_invariant=True)


def lump_weights(scores: Tensor) -> Tensor:
    """Softmax over the expert axis: each token's row sums to 1."""
    return softmax_along(scores, axis=-1)


def dispatch(O: Tensor, omega: Tensor) -> Tensor:
    """Slot e = sum_j omega[j, e] * O[j]; returns ``[..., E, c]``.

    The token sum runs in sorted order so that slots are bit-identical
    under any reordering of the tokens.
    """
    if O.shape[:-1] != omega.shape[:-1]:
        raise DimensionError(f"dispatch: tokens {O.shape} and split weights {omega.shape} disagree")
    return matmul_exact(swap_last(omega), O, sort_terms=True)


def apply_experts(slots: Tensor, experts) -> Tensor:
    """Row e of the result is expert e applied to slot e (no cross-slot mixing)."""
    stack = _as_stack(experts)
    E = len(stack)
    if slots.ndim < 2 or slots.shape[-2] != E:
        raise DimensionError(f"apply_experts: {E} experts but slots have shape {slots.shape}")
    if slots.ndim == 2:
        out = stack.run_grouped(reshape(slots, (E, 1, slots.shape[-1])))
        return reshape(out, slots.shape)
    if slots.ndim != 3:
        raise DimensionError(f"apply_experts: expected [E, c] or [B, E, c], got {slots.shape}")
    out = stack.run_grouped(transpose(slots, (1, 0, 2)))
    return transpose(out, (1, 0, 2))


def combine(C: Tensor, Q: Tensor) -> Tensor:
    """``P = C @ Q``: every output token is a convex mix of the slot outputs."""
    if C.shape[-1] != Q.shape[-2]:
        raise DimensionError(f"combine: lump weights {C.shape} and slot outputs {Q.shape} disagree")
    return matmul_exact(C, Q)


def omni_moe_forward(O: Tensor, layer: OmniMoeLayer, subject) -> tuple[Tensor, SplitLumpTrace]:
    scores = subject_scores(O, layer, subject)
    omega = split_weights(scores)
    slots = apply_experts(dispatch(O, omega), layer.experts)
    C = lump_weights(scores)
    P = combine(C, slots)
    trace = SplitLumpTrace(scores.data, omega.data, slots.data, C.data, P.data)
    return P, trace


# ---------------------------------------------------------------------------
# baselines


def _all_experts_on_tokens(O: Tensor, stack: ExpertStack) -> Tensor:
    """Every expert on every token: returns ``[E, N, c]`` with N = prod(leading)."""
    c = O.shape[-1]
    flat = reshape(O, (1, O.size // c, c))
    return stack.run_grouped(flat)


def dense_moe_forward(O: Tensor, experts) -> Tensor:
    """``P = sum_e f_e(O)``: each expert processes all m tokens."""
    stack = _as_stack(experts)
    if O.shape[-1] != stack.features:
        raise DimensionError(f"dense_moe_forward: tokens {O.shape} vs expert width {stack.features}")
    return reshape(sum_along(_all_experts_on_tokens(O, stack), axis=0), O.shape)


def topk_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row; lower index wins ties."""
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def sparse_gates(O: Tensor, router_weights: Tensor, k: int) -> Tensor:
    """Per-token gates: softmax over the k top router logits, exact zeros elsewhere."""
    E = router_weights.shape[-1]
    if not 1 <= k <= E:
        raise ValueError(f"top-K requires 1 <= K <= {E}, got K={k}")
    logits = matmul(O, router_weights)
    mask = topk_mask(logits.data, k)
    gates = softmax_along(add(logits, Tensor(np.where(mask, 0.0, _MASKED_LOGIT))), axis=-1)
    # A selected gate can underflow to 0.0 when its logit trails the top one
    # by more than ~745; lift it to the smallest normal double so every
    # selected expert stays live.
    lifted = mask & (gates.data == 0.0)
    if lifted.any():
        gates = add(gates, Tensor(np.where(lifted, np.finfo(np.float64).tiny, 0.0)))
    return gates


def sparse_topk_forward(O: Tensor, experts, router_weights: Tensor, k: int) -> Tensor:
    """Token-level top-K routing. Outputs of unselected experts get weight 0.

    All experts are evaluated for numerical simplicity; cost accounting in
    :func:`count_costs` reports the m*K applications a real router performs.
    """
    stack = _as_stack(experts)
    if router_weights.shape != (stack.features, len(stack)):
        raise DimensionError(
            f"router weights {router_weights.shape}, expected {(stack.features, len(stack))}"
        )
    gates = sparse_gates(O, router_weights, k)
    E, c = len(stack), O.shape[-1]
    n = O.size // c
    per_expert = transpose(_all_experts_on_tokens(O, stack), (1, 0, 2))  # [N, E, c]
    mixed = matmul(reshape(gates, (n, 1, E)), per_expert)
    return reshape(mixed, O.shape)


# ---------------------------------------------------------------------------
# cost accounting


@dataclass(frozen=True)
class CostReport:
    param_count: int
    expert_application_count: int
    dispatch_flops: int


def count_costs(variant: str, m: int, c: int, h: int, E: int, S: int = 1, K: int = 1) -> CostReport:
    """Parameters and per-sample work of one MoE layer.

    ``dispatch_flops`` counts multiply-adds as two flops and covers the
    routing arithmetic only (scores, softmax inputs, dispatch and combine
    products), not the expert MLPs themselves.
    """
    if min(m, c, h, E, S, K) < 1:
        raise ValueError("count_costs: all sizes must be positive")
    expert_params = E * (c * h + h + h * c + c)
    if variant == "omni":
        return CostReport(expert_params + S * c * E, E, 2 * m * c * E * 3)
    if variant == "dense":
        return CostReport(expert_params, m * E, (E - 1) * m * c)
    if variant == "sparse":
        return CostReport(expert_params + c * E, m * K, 2 * m * c * E + 2 * m * K * c)
    raise ValueError(f"unknown MoE variant {variant!r}; expected omni, dense or sparse")


def trace_summary(traces: Mapping[Hashable, Sequence[SplitLumpTrace]]) -> list[tuple]:
    """Per subject and expert: token-summed split / lump weights averaged over samples.

    Each trace may hold one sample (``[m, E]`` weights) or a batch (``[B, m, E]``).
    """
    rows = []
    for subject in sorted(traces):
        ts = traces[subject]
        E = ts[0].split_weights.shape[-1]
        split = np.concatenate([t.split_weights.sum(axis=-2).reshape(-1, E) for t in ts]).mean(axis=0)
        lump = np.concatenate([t.lump_weights.sum(axis=-2).reshape(-1, E) for t in ts]).mean(axis=0)
        for e in range(E):
            rows.append((subject, e, float(split[e]), float(lump[e])))
    return rows
