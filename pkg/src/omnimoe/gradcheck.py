"""End-to-end gradient checks on micro configurations."""

from __future__ import annotations

from dataclasses import dataclass

from .config import RunConfig
from .contrastive import total_loss
from .encoder import FmriEncoder
from .synth import SampleSet, collect, generate_world
from .tensor import GradCheckReport, Tensor, finite_difference_check

MICRO = dict(
    n_subjects=2,
    n_stimuli=6,
    latent_dim=4,
    voxel_min=20,
    voxel_max=32,
    d_max=32,
    batch_size=2,
    n_patches=4,
    width=8,
    n_blocks=1,
    n_moe_blocks=1,
    n_experts=2,
    image_tokens=2,
    text_tokens=2,
    n_clusters=3,
)


def micro_config(**overrides) -> RunConfig:
    # A wider init than the training default keeps per-coordinate gradients
    # well above the roundoff of a central difference on the loss.
    values = {**MICRO, "init_std": 0.5}
    values.update(overrides)
    return RunConfig(**values)


@dataclass
class GradCheckResult:
    cfg: RunConfig
    reports: dict[str, GradCheckReport]

    @property
    def max_rel_err(self) -> float:
        return max(r.max_rel_err for r in self.reports.values())

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports.values())


def micro_batch(cfg: RunConfig, batch: int | None = None) -> SampleSet:
    """A mixed-subject batch: alternating subjects, distinct stimuli."""
    batch = cfg.batch_size if batch is None else batch
    world = generate_world(cfg)
    samples = collect(world, range(cfg.n_stimuli), 1)
    by_subject = {s: [x for x in samples if x.subject == s] for s in world.subjects}
    picked = [by_subject[world.subjects[i % len(world.subjects)]][i] for i in range(batch)]
    return SampleSet.from_samples(picked)


def check_model(cfg: RunConfig, step: float = 1e-6, tol: float = 1e-4, batch: int | None = None) -> GradCheckResult:
    """Finite-difference check of every parameter tensor and the temperature."""
    model = FmriEncoder(cfg)
    data = micro_batch(cfg, batch)
    tau = Tensor(cfg.temperature, requires_grad=True)
    subjects = list(data.subjects)
    image, text = Tensor(data.image), Tensor(data.text)

    def objective():
        img, txt = model(data.padded, subjects)
        return total_loss(img, image, txt, text, tau)

    reports = {}
    for name, p in model.named_parameters().items():
        reports[name] = finite_difference_check(objective, p, step, tol)
    reports["temperature"] = finite_difference_check(objective, tau, step, tol)
    return GradCheckResult(cfg, reports)


MICRO_VARIANTS = {
    "omni": {},
    "omni-shared": {"shared_alpha": True},
    "dense": {"moe_kind": "dense"},
    "sparse": {"moe_kind": "sparse", "sparse_k": 1},
    "mlp": {"moe_kind": "mlp"},
}


def run_suite(seed: int = 0, variants=None) -> dict[str, GradCheckResult]:
    variants = MICRO_VARIANTS if variants is None else {k: MICRO_VARIANTS[k] for k in variants}
    return {name: check_model(micro_config(seed=seed, **over)) for name, over in variants.items()}


def summarize(results: dict[str, GradCheckResult]) -> list[tuple[str, str, float, bool]]:
    rows = []
    for variant, res in results.items():
        for name, rep in res.reports.items():
            rows.append((variant, name, float(rep.max_rel_err), bool(rep.passed)))
    return rows


def param_classes(names) -> set[str]:
    classes = set()
    for n in names:
        if n == "temperature":
            classes.add("temperature")
        elif ".moe.alpha" in n:
            classes.add("subject_params")
        elif ".moe." in n or ".ffn." in n:
            classes.add("experts")
        elif ".attn." in n:
            classes.add("attention")
        elif n.startswith("head_"):
            classes.add("heads")
        else:
            classes.add("other")
    return classes

