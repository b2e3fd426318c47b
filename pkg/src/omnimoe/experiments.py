"""Ablation, expert-count sweep and weight-trace export."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .ecphory import EcphoryConfig, MemoryBank, bank_from_targets
from .encoder import FmriEncoder
from .evaluate import Evaluation, evaluate_two_way
from .moe import count_costs, trace_summary
from .synth import SampleSet, SyntheticWorld, generate_world, split, train_test_sets
from .train import TrainResult, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    number: int
    label: str
    moe_kind: str
    shared_alpha: bool
    ecphory: bool


# Row 2 keeps Ecphory on, so it differs from row 4 only in sharing one alpha.
ABLATION_VARIANTS = (
    Variant(1, "baseline-mlp", "mlp", False, False),
    Variant(2, "omni-shared-alpha", "omni", True, True),
    Variant(3, "omni-subject-alpha", "omni", False, False),
    Variant(4, "omni-subject-alpha+ecphory", "omni", False, True),
)

ABLATION_FIELDS = (
    "variant",
    "label",
    "seed",
    "moe_kind",
    "shared_alpha",
    "ecphory",
    "two_way",
    "two_way_image",
    "two_way_text",
    "topk_retrieval",
    "two_way_plain",
    "two_way_ecphory",
    "two_way_ecphory_selfbank",
    "final_train_loss",
    "param_count",
)

SWEEP_FIELDS = (
    "variant",
    "n_experts",
    "seed",
    "two_way",
    "topk_retrieval",
    "final_train_loss",
    "param_count",
    "moe_param_count",
    "expert_application_count",
    "dispatch_flops",
)


def ecphory_config(cfg: RunConfig) -> EcphoryConfig:
    return EcphoryConfig(cfg.mix_weight, cfg.ecphory_k, cfg.similarity_token)


def training_bank(world: SyntheticWorld) -> MemoryBank:
    """Memory of every subject's training-stimulus targets (test stimuli excluded)."""
    train_ids, _ = split(world)
    return bank_from_targets(world.subjects, train_ids, world.image_targets, world.text_targets)


def full_bank(world: SyntheticWorld) -> MemoryBank:
    """Memory of every stimulus, test stimuli included (an optimistic upper bound)."""
    return bank_from_targets(world.subjects, range(world.n_stimuli), world.image_targets, world.text_targets)


def evaluate_both(cfg: RunConfig, model: FmriEncoder, test: SampleSet, bank: MemoryBank) -> tuple[Evaluation, Evaluation]:
    """Plain and Ecphory-enhanced evaluation with the same distractor draws."""
    common = dict(trials=cfg.two_way_trials, retrieval_k=cfg.retrieval_k, seed=cfg.seed)
    plain = evaluate_two_way(model, test, use_ecphory=False, **common)
    enhanced = evaluate_two_way(model, test, use_ecphory=True, bank=bank, ecphory=ecphory_config(cfg), **common)
    return plain, enhanced


def _num(x: float) -> str:
    return repr(float(x))


def write_csv(path, fields, rows: list[dict]) -> None:
    Path(path).write_text(csv_text(fields, rows), encoding="utf-8")


def csv_text(fields, rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _num(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationResult:
    rows: list[dict]
    models: dict[tuple[int, int], FmriEncoder]  # (variant number, seed) -> model

    def means(self, metric: str = "two_way") -> dict[int, float]:
        return {v.number: float(np.mean(self.values(v.number, metric))) for v in ABLATION_VARIANTS}

    def values(self, number: int, metric: str = "two_way") -> list[float]:
        return [r[metric] for r in self.rows if r["variant"] == number]

    def summary_rows(self) -> list[dict]:
        out = []
        for v in ABLATION_VARIANTS:
            row = {"variant": v.number, "label": v.label, "n_seeds": len(self.values(v.number))}
            for metric in ("two_way", "topk_retrieval", "two_way_plain", "two_way_ecphory", "two_way_ecphory_selfbank"):
                vals = np.asarray(self.values(v.number, metric))
                row[f"{metric}_mean"] = float(vals.mean())
                row[f"{metric}_std"] = float(vals.std())
            out.append(row)
        return out


SUMMARY_FIELDS = (
    "variant",
    "label",
    "n_seeds",
    "two_way_mean",
    "two_way_std",
    "topk_retrieval_mean",
    "topk_retrieval_std",
    "two_way_plain_mean",
    "two_way_plain_std",
    "two_way_ecphory_mean",
    "two_way_ecphory_std",
    "two_way_ecphory_selfbank_mean",
    "two_way_ecphory_selfbank_std",
)


def ablate(cfg: RunConfig, seeds=None, epochs: int | None = None) -> AblationResult:
    """Train and score the four ablation variants for each seed.

    Every variant trains for the same number of epochs on the same world and
    batches. Variants 3 and 4 share one trained model; only inference differs.
    Ecphory rows use a bank of training stimuli; every row also reports the
    score with a bank that holds the test stimuli as well.
    """
    seeds = list(cfg.ablation_seeds if seeds is None else seeds)
    if not seeds:
        raise ValueError("ablate needs at least one seed")
    epochs = cfg.ablation_epochs if epochs is None else epochs
    rows, models = [], {}
    for seed in seeds:
        base = cfg.replace(seed=seed)
        world = generate_world(base)
        train_set, test_set = train_test_sets(world)
        bank, self_bank = training_bank(world), full_bank(world)
        trained: dict[tuple[str, bool], TrainResult] = {}
        for v in ABLATION_VARIANTS:
            run_cfg = base.replace(moe_kind=v.moe_kind, shared_alpha=v.shared_alpha)
            key = (v.moe_kind, v.shared_alpha)
            if key not in trained:
                start = time.perf_counter()
                trained[key] = train(run_cfg, train_set, epochs=epochs)
                log.info("seed %d %s trained in %.1fs", seed, v.label, time.perf_counter() - start)
            result = trained[key]
            plain, enhanced = evaluate_both(run_cfg, result.model, test_set, bank)
            _, with_self = evaluate_both(run_cfg, result.model, test_set, self_bank)
            chosen = enhanced if v.ecphory else plain
            rows.append(
                {
                    "variant": v.number,
                    "label": v.label,
                    "seed": seed,
                    "moe_kind": v.moe_kind,
                    "shared_alpha": v.shared_alpha,
                    "ecphory": v.ecphory,
                    "two_way": chosen.two_way,
                    "two_way_image": chosen.two_way_image,
                    "two_way_text": chosen.two_way_text,
                    "topk_retrieval": chosen.topk_retrieval,
                    "two_way_plain": plain.two_way,
                    "two_way_ecphory": enhanced.two_way,
                    "two_way_ecphory_selfbank": with_self.two_way,
                    "final_train_loss": result.final_loss,
                    "param_count": result.model.param_count(),
                }
            )
            models[(v.number, seed)] = result.model
    return AblationResult(rows, models)


# ---------------------------------------------------------------------------
# expert-count sweep

SWEEP_VARIANTS = ("omni", "dense", "sparse")


def sweep_experts(cfg: RunConfig, expert_counts=None, seeds=None, epochs: int | None = None) -> list[dict]:
    """Quality and cost for each MoE variant and expert count, equal step budget."""
    expert_counts = list(cfg.sweep_experts if expert_counts is None else expert_counts)
    if not expert_counts:
        raise ValueError("sweep_experts needs at least one expert count")
    seeds = [cfg.seed] if seeds is None else list(seeds)
    epochs = cfg.sweep_epochs if epochs is None else epochs
    rows = []
    for seed in seeds:
        base = cfg.replace(seed=seed)
        world = generate_world(base)
        train_set, test_set = train_test_sets(world)
        for variant in SWEEP_VARIANTS:
            for E in expert_counts:
                run_cfg = base.replace(moe_kind=variant, n_experts=E, sparse_k=min(cfg.sparse_k, E))
                result = train(run_cfg, train_set, epochs=epochs)
                ev = evaluate_two_way(
                    result.model, test_set, trials=run_cfg.two_way_trials, retrieval_k=run_cfg.retrieval_k, seed=seed
                )
                cost = count_costs(
                    variant, run_cfg.n_patches, run_cfg.width, run_cfg.hidden, E, run_cfg.n_subjects, run_cfg.sparse_k
                )
                rows.append(
                    {
                        "variant": variant,
                        "n_experts": E,
                        "seed": seed,
                        "two_way": ev.two_way,
                        "topk_retrieval": ev.topk_retrieval,
                        "final_train_loss": result.final_loss,
                        "param_count": result.model.param_count(),
                        "moe_param_count": cost.param_count,
                        "expert_application_count": cost.expert_application_count,
                        "dispatch_flops": cost.dispatch_flops,
                    }
                )
    return rows


# ---------------------------------------------------------------------------
# weight traces

TRACE_FIELDS = ("subject", "expert", "split_weight_sum", "lump_weight_sum")


def collect_traces(model: FmriEncoder, data: SampleSet, block: int | None = None, batch_size: int = 256) -> dict:
    """Split / lump weights of one Omni MoE block for every sample, grouped by subject.

    ``block`` indexes ``model.blocks``; the default is the last Omni MoE block.
    """
    omni_blocks = [i for i, b in enumerate(model.blocks) if b.moe is not None]
    if not omni_blocks:
        raise ValueError("model has no Omni MoE block to trace")
    block = omni_blocks[-1] if block is None else block
    if block not in omni_blocks:
        raise ValueError(f"block {block} is not an Omni MoE block; choose from {omni_blocks}")
    traces: dict[int, list] = {}
    for s in np.unique(data.subjects):
        rows = np.flatnonzero(data.subjects == s)
        for lo in range(0, len(rows), batch_size):
            idx = rows[lo : lo + batch_size]
            model.predict(data.padded[idx], data.subjects[idx], batch_size=len(idx))
            traces.setdefault(int(s), []).append(model.blocks[block].last_trace)
    return traces


def weight_rows(model: FmriEncoder, data: SampleSet, block: int | None = None) -> list[dict]:
    return [
        dict(zip(TRACE_FIELDS, row)) for row in trace_summary(collect_traces(model, data, block))
    ]
