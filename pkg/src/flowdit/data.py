"""Training datasets: a synthetic class-conditional toy task for desk-scale
runs, and a latent-cache dataset fed by the curation pipeline."""

from __future__ import annotations

import numpy as np

from .datapipe import CorpusRecord
from .errors import ConfigError

_CLASS_WORDS = ["zero", "one", "two", "three", "four", "five", "six", "seven",
                "eight", "nine", "ten", "eleven"]


class ToyClassDataset:
    """N prompt classes mapped to N well-separated latent distributions.

    Class k draws x1 = centroid_k + noise_scale * N(0, I) where centroids
    are scaled Rademacher patterns, far apart relative to the within-class
    spread. Prompts are two words each so batches stack without padding.
    """

    resolution_policy = "fixed"

    def __init__(self, channels: int = 16, height: int = 8, width: int = 8,
                 n_classes: int = 8, seed: int = 0, noise_scale: float = 0.1,
                 centroid_scale: float = 1.5):
        if n_classes < 1 or n_classes > len(_CLASS_WORDS):
            raise ConfigError(
                f"n_classes must be in [1, {len(_CLASS_WORDS)}], got {n_classes}"
            )
        rng = np.random.default_rng(seed)
        signs = rng.integers(0, 2, size=(n_classes, channels, height, width)) * 2 - 1
        self.centroids = (signs * centroid_scale).astype(np.float32)
        self.noise_scale = float(noise_scale)
        self.prompts = [f"pattern {w}" for w in _CLASS_WORDS[:n_classes]]

    def __len__(self) -> int:
        return len(self.prompts)

    def prompt_for(self, class_id: int) -> str:
        return self.prompts[class_id]

    def sample_batch(self, rng: np.random.Generator, batch_size: int):
        cls = rng.integers(0, len(self.prompts), size=batch_size)
        noise = rng.standard_normal((batch_size,) + self.centroids.shape[1:])
        x1 = self.centroids[cls] + self.noise_scale * noise.astype(np.float32)
        return x1.astype(np.float32), [self.prompts[k] for k in cls], cls

    def classify(self, latent: np.ndarray) -> int:
        """Nearest-centroid class of a generated latent."""
        flat = np.asarray(latent).reshape(1, -1)
        cents = self.centroids.reshape(len(self.prompts), -1)
        return int(np.argmin(((cents - flat) ** 2).sum(axis=1)))


class LatentCacheDataset:
    """Curated records backed by pre-encoded latents.

    Prompts are captions with the quality tag prepended when present, which
    is how the tags steer generation (and negative prompts) downstream.
    """

    def __init__(self, records: list[CorpusRecord], latents: dict[str, np.ndarray],
                 resolution_policy: str = "fixed"):
        self.records = [r for r in records if r.id in latents]
        if not self.records:
            raise ConfigError("no corpus record has a cached latent")
        shapes = {latents[r.id].shape for r in self.records}
        if len(shapes) != 1:
            raise ConfigError(f"cached latents disagree in shape: {sorted(shapes)}")
        self.latents = latents
        self.resolution_policy = resolution_policy

    def __len__(self) -> int:
        return len(self.records)

    @staticmethod
    def prompt_of(record: CorpusRecord) -> str:
        if record.quality_tag:
            return f"{record.quality_tag} {record.caption}".strip()
        return record.caption

    def sample_batch(self, rng: np.random.Generator, batch_size: int):
        idx = rng.integers(0, len(self.records), size=batch_size)
        records = [self.records[i] for i in idx]
        x1 = np.stack([self.latents[r.id] for r in records]).astype(np.float32)
        return x1, [self.prompt_of(r) for r in records], idx
