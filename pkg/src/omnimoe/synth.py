"""Synthetic multi-subject recordings with shared stimulus semantics.

Each stimulus n has a latent code ``z_n`` (drawn around one of a few
category centroids). Its targets depend on ``z_n`` alone, so every subject
shares them. Each subject s observes ``X = W_s z_n + noise`` through its own
random mixing matrix with its own voxel count ``d_s`` and noise level.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import binio
from .config import RunConfig
from .encoder import EmbeddingPair, FmriSample, preprocess
from .errors import ConfigError, FormatError
from .rng import SPLIT, TRIAL, WORLD, make_rng

WORLD_MAGIC = b"SYNW"
WORLD_VERSION = 1


@dataclass
class SyntheticWorld:
    cfg: RunConfig
    voxel_counts: dict[int, int]
    mixing: dict[int, np.ndarray]  # subject -> [d_s, z]
    noise: dict[int, float]
    latents: np.ndarray  # [N, z]
    clusters: np.ndarray  # [N] category of each stimulus
    image_targets: np.ndarray  # [N, v, c]
    text_targets: np.ndarray  # [N, t, c]
    target_maps: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.cfg.seed

    @property
    def subjects(self) -> list[int]:
        return sorted(self.voxel_counts)

    @property
    def n_stimuli(self) -> int:
        return self.latents.shape[0]

    def targets(self, stimulus: int) -> EmbeddingPair:
        return EmbeddingPair(self.image_targets[stimulus], self.text_targets[stimulus])

    def _check(self, subject: int, stimulus: int) -> None:
        if subject not in self.voxel_counts:
            raise KeyError(f"unknown subject {subject}; known: {self.subjects}")
        if not 0 <= stimulus < self.n_stimuli:
            raise KeyError(f"stimulus {stimulus} outside [0, {self.n_stimuli})")

    def clean_signal(self, subject: int, stimulus: int) -> np.ndarray:
        self._check(subject, stimulus)
        x = self.mixing[subject] @ self.latents[stimulus]
        return np.tanh(x) if self.cfg.nonlinear_mixing else x


def _target_map(rng: np.random.Generator, z: int, tokens: int, c: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(z), (z, tokens * c))


def generate_world(cfg: RunConfig) -> SyntheticWorld:
    cfg.validate()
    rng = make_rng(cfg.seed, WORLD)
    S, N, z = cfg.n_subjects, cfg.n_stimuli, cfg.latent_dim
    subjects = cfg.subjects
    counts = rng.choice(np.arange(cfg.voxel_min, cfg.voxel_max + 1), size=S, replace=False)
    voxel_counts = {s: int(d) for s, d in zip(subjects, counts)}
    mixing = {s: rng.normal(0.0, 1.0 / np.sqrt(z), (voxel_counts[s], z)) for s in subjects}
    noise = {s: float(rng.uniform(cfg.noise_min, cfg.noise_max)) for s in subjects}

    centroids = rng.normal(0.0, 1.0, (cfg.n_clusters, z))
    clusters = rng.integers(0, cfg.n_clusters, size=N)
    latents = centroids[clusters] + cfg.cluster_spread * rng.normal(0.0, 1.0, (N, z))

    v, t, c = cfg.image_tokens, cfg.text_tokens, cfg.width
    g_image = _target_map(rng, z, v, c)
    g_text = _target_map(rng, z, t, c)
    image = np.tanh(latents @ g_image).reshape(N, v, c)
    text = np.tanh(latents @ g_text).reshape(N, t, c)
    return SyntheticWorld(
        cfg, voxel_counts, mixing, noise, latents, clusters, image, text, {"image": g_image, "text": g_text}
    )


def sample(world: SyntheticWorld, subject: int, stimulus: int, trial_seed: int) -> FmriSample:
    """One noisy trial of ``subject`` viewing ``stimulus``."""
    clean = world.clean_signal(subject, stimulus)
    sigma = world.noise[subject]
    if sigma > 0:
        rng = make_rng(world.seed, TRIAL, subject, stimulus, trial_seed)
        voxels = clean + rng.normal(0.0, sigma, clean.shape)
    else:
        voxels = clean.copy()
    return FmriSample(
        subject=subject,
        stimulus=stimulus,
        trial=trial_seed,
        voxels=voxels,
        padded=preprocess(voxels, world.cfg.d_max),
        targets=world.targets(stimulus),
    )


def split(world: SyntheticWorld, train_fraction: float | None = None) -> tuple[list[int], list[int]]:
    """Disjoint stimulus-level split shared by every subject."""
    frac = world.cfg.train_fraction if train_fraction is None else train_fraction
    if not 0.0 < frac < 1.0:
        raise ConfigError("train_fraction must lie strictly between 0 and 1")
    N = world.n_stimuli
    n_train = int(round(N * frac))
    if n_train in (0, N):
        raise ConfigError(f"train_fraction {frac} leaves an empty side for {N} stimuli")
    order = make_rng(world.seed, SPLIT).permutation(N)
    return sorted(int(i) for i in order[:n_train]), sorted(int(i) for i in order[n_train:])


def collect(world: SyntheticWorld, stimuli: Iterable[int], trials: int, trial_offset: int = 0) -> list[FmriSample]:
    return [
        sample(world, s, n, trial_offset + r)
        for s in world.subjects
        for n in stimuli
        for r in range(trials)
    ]


@dataclass
class SampleSet:
    """Column-stacked samples, the form the trainer and evaluators consume."""

    padded: np.ndarray  # [K, d_max]
    subjects: np.ndarray  # [K]
    stimuli: np.ndarray  # [K]
    trials: np.ndarray  # [K]
    image: np.ndarray  # [K, v, c]
    text: np.ndarray  # [K, t, c]

    def __len__(self) -> int:
        return self.padded.shape[0]

    @classmethod
    def from_samples(cls, samples: list[FmriSample]) -> "SampleSet":
        if not samples:
            raise ValueError("no samples")
        return cls(
            np.stack([s.padded for s in samples]),
            np.array([s.subject for s in samples], dtype=np.int64),
            np.array([s.stimulus for s in samples], dtype=np.int64),
            np.array([s.trial for s in samples], dtype=np.int64),
            np.stack([s.targets.image for s in samples]),
            np.stack([s.targets.text for s in samples]),
        )

    def subset(self, index) -> "SampleSet":
        return SampleSet(*(a[index] for a in (self.padded, self.subjects, self.stimuli, self.trials, self.image, self.text)))


# Test trials use ids past every train trial so the two never share noise.
TEST_TRIAL_OFFSET = 1000


def train_test_sets(world: SyntheticWorld) -> tuple[SampleSet, SampleSet]:
    train_ids, test_ids = split(world)
    train = SampleSet.from_samples(collect(world, train_ids, world.cfg.train_trials))
    test = SampleSet.from_samples(collect(world, test_ids, world.cfg.test_trials, TEST_TRIAL_OFFSET))
    return train, test


# ---------------------------------------------------------------------------
# persistence


def world_arrays(world: SyntheticWorld) -> dict[str, np.ndarray]:
    arrays = {
        "latents": world.latents,
        "clusters": world.clusters.astype(np.float64),
        "image_targets": world.image_targets,
        "text_targets": world.text_targets,
        "target_map.image": world.target_maps["image"],
        "target_map.text": world.target_maps["text"],
    }
    for s in world.subjects:
        arrays[f"subject{s}.mixing"] = world.mixing[s]
        arrays[f"subject{s}.noise"] = np.array([world.noise[s]])
    return arrays


def save_world(world: SyntheticWorld, path) -> None:
    buf = io.BytesIO()
    buf.write(WORLD_MAGIC)
    binio.write_u32(buf, WORLD_VERSION)
    binio.write_text(buf, world.cfg.to_text())
    binio.write_records(buf, world_arrays(world))
    Path(path).write_bytes(buf.getvalue())


def load_world(path) -> SyntheticWorld:
    with open(path, "rb") as f:
        binio.expect_magic(f, WORLD_MAGIC)
        version = binio.read_u32(f)
        if version != WORLD_VERSION:
            raise FormatError(f"unsupported world file version {version}")
        cfg = RunConfig.from_text(binio.read_text(f))
        arrays = dict(binio.iter_records(f))
    subjects = cfg.subjects
    try:
        mixing = {s: arrays[f"subject{s}.mixing"] for s in subjects}
        noise = {s: float(arrays[f"subject{s}.noise"][0]) for s in subjects}
        return SyntheticWorld(
            cfg,
            {s: mixing[s].shape[0] for s in subjects},
            mixing,
            noise,
            arrays["latents"],
            arrays["clusters"].astype(np.int64),
            arrays["image_targets"],
            arrays["text_targets"],
            {"image": arrays["target_map.image"], "text": arrays["target_map.text"]},
        )
    except KeyError as exc:
        raise FormatError(f"world file lacks array {exc.args[0]!r}") from None


def write_manifest(world: SyntheticWorld, path) -> None:
    """CSV of every (subject, stimulus, trial, split) the default sets contain."""
    train_ids, test_ids = split(world)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["subject", "stimulus", "trial", "split"])
        for s in world.subjects:
            for n in train_ids:
                for r in range(world.cfg.train_trials):
                    w.writerow([s, n, r, "train"])
            for n in test_ids:
                for r in range(world.cfg.test_trials):
                    w.writerow([s, n, TEST_TRIAL_OFFSET + r, "test"])
