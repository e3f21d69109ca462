"""Limited-data curation: iterative embedding deduplication, quality-score
bucket tagging, two-stage resolution preprocessing, and latent caching.

Embeddings are ingested as fixed-dimension unit vectors (the upstream
vision encoder is out of scope here); all clustering is deterministic for
a given seed: ids are visited in sorted order and border ties go to the
cluster that reaches them first in that order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .container import load_container, save_container
from .errors import ValidationError

BUCKET_EXCELLENT = "excellent"
BUCKET_GOOD = "good"
BUCKET_AVERAGE = "average"
BUCKET_EXCLUDED = "excluded"

_BUCKET_ORDER = [BUCKET_EXCLUDED, BUCKET_AVERAGE, BUCKET_GOOD, BUCKET_EXCELLENT]

STAGE2_TARGET_AREA = 250_000
STAGE2_MAX_ASPECT = 3.0
STAGE2_GRID = 64
STAGE1_EDGE = 256


# --- records ---

@dataclass
class CorpusRecord:
    id: str
    image: str
    caption: str = ""
    quality_score: Optional[float] = None
    quality_tag: Optional[str] = None

    def __post_init__(self):
        if self.quality_score is not None and self.quality_tag is not None:
            expected = score_bucket(self.quality_score)
            if expected != self.quality_tag:
                raise ValidationError(
                    f"record {self.id}: tag {self.quality_tag!r} inconsistent with "
                    f"score {self.quality_score} (expected {expected!r})"
                )

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "CorpusRecord":
        return cls(**json.loads(line))


def read_manifest(path) -> list[CorpusRecord]:
    """Parse a JSON-lines corpus manifest; errors carry the line number."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(CorpusRecord.from_json(line))
            except (json.JSONDecodeError, TypeError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_manifest(path, records: list[CorpusRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


@dataclass
class EmbeddingRecord:
    id: str
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) >= 1e-5:
            raise ValidationError(
                f"embedding {self.id}: norm {norm:.6f} is not unit within 1e-5"
            )


def save_embeddings(path, ids: list[str], matrix: np.ndarray) -> None:
    """[n, d] unit vectors plus their id list, in the container format."""
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ValidationError(
            f"embedding matrix {matrix.shape} does not match {len(ids)} ids"
        )
    save_container(path, {"embeddings": matrix}, config={"ids": list(ids)})


def load_embeddings(path) -> dict[str, np.ndarray]:
    tensors, config = load_container(path)
    ids = config["ids"]
    matrix = tensors["embeddings"]
    records = [EmbeddingRecord(i, v) for i, v in zip(ids, matrix)]
    return {r.id: r.vector for r in records}


# --- DBSCAN over cosine similarity ---

def dbscan_cosine(embeddings: dict[str, np.ndarray], sim_threshold: float,
                  min_pts: int) -> tuple[list[list[str]], set[str]]:
    """Density clustering where neighbors are pairs with cos >= sim_threshold.

    min_pts counts the point itself. Returns (clusters, noise) partitioning
    the input; visit order is sorted by id so results are reproducible and
    border points go to the first cluster that reaches them.
    """
    if not 0.0 < sim_threshold < 1.0:
        raise ValidationError(f"sim_threshold must be in (0, 1), got {sim_threshold}")
    if min_pts < 1:
        raise ValidationError(f"min_pts must be >= 1, got {min_pts}")
    ids = sorted(embeddings)
    if not ids:
        return [], set()
    matrix = np.stack([embeddings[i] for i in ids])
    sims = matrix @ matrix.T
    neighbor_lists = [np.nonzero(sims[i] >= sim_threshold)[0] for i in range(len(ids))]
    core = [len(n) >= min_pts for n in neighbor_lists]

    label = {}  # index -> cluster number
    clusters: list[list[str]] = []
    for start in range(len(ids)):
        if start in label or not core[start]:
            continue
        cluster_no = len(clusters)
        members = []
        queue = [start]
        label[start] = cluster_no
        while queue:
            i = queue.pop(0)
            members.append(i)
            if not core[i]:
                continue
            for j in neighbor_lists[i]:
                j = int(j)
                if j not in label:
                    label[j] = cluster_no
                    queue.append(j)
        clusters.append(sorted(ids[i] for i in members))
    noise = {ids[i] for i in range(len(ids)) if i not in label}
    return clusters, noise


# --- iterative deduplication ---

@dataclass
class DedupConfig:
    sim_threshold: float = 0.9
    min_pts: int = 2
    partition_size: int = 1024
    max_rounds: int = 16
    seed: int = 0


@dataclass
class DedupState:
    round: int
    ids: list[str]
    partition_size: int
    seed: int


def dedup_round(state: DedupState, embeddings: dict[str, np.ndarray],
                config: DedupConfig) -> tuple[DedupState, dict]:
    """One partition/cluster/representative-extraction pass.

    Partitions are a seed-derived shuffle of the current id set; one
    seeded-random representative survives per cluster plus all noise points.
    """
    rng = np.random.default_rng((state.seed, state.round))
    order = sorted(state.ids)
    rng.shuffle(order)
    survivors: list[str] = []
    n_clusters = 0
    n_noise = 0
    for lo in range(0, len(order), state.partition_size):
        chunk = order[lo:lo + state.partition_size]
        chunk_embeddings = {i: embeddings[i] for i in chunk}
        clusters, noise = dbscan_cosine(chunk_embeddings, config.sim_threshold,
                                        config.min_pts)
        for members in clusters:
            survivors.append(members[int(rng.integers(len(members)))])
        survivors.extend(sorted(noise))
        n_clusters += len(clusters)
        n_noise += len(noise)
    audit = {
        "round": state.round,
        "input_size": len(state.ids),
        "chunks": math.ceil(len(order) / state.partition_size) if order else 0,
        "clusters": n_clusters,
        "noise": n_noise,
        "output_size": len(survivors),
    }
    next_state = DedupState(round=state.round + 1, ids=sorted(survivors),
                            partition_size=state.partition_size, seed=state.seed)
    return next_state, audit


def dedup_converge(embeddings: dict[str, np.ndarray],
                   config: DedupConfig) -> tuple[list[str], dict]:
    """Repeat dedup rounds until the representative set is a fixed point.

    Returns (representative ids, report). The report carries per-round
    audit entries and a converged flag; hitting max_rounds without a fixed
    point completes with converged=False.
    """
    state = DedupState(round=0, ids=sorted(embeddings),
                       partition_size=config.partition_size, seed=config.seed)
    rounds = []
    converged = False
    while state.round < config.max_rounds:
        before = set(state.ids)
        state, audit = dedup_round(state, embeddings, config)
        rounds.append(audit)
        if set(state.ids) == before:
            converged = True
            break
    report = {
        "rounds": rounds,
        "converged": converged,
        "representatives": len(state.ids),
        "sim_threshold": config.sim_threshold,
        "min_pts": config.min_pts,
        "partition_size": config.partition_size,
        "seed": config.seed,
    }
    return state.ids, report


# --- quality buckets ---

def score_bucket(score: float) -> str:
    """Map a 1..10 aesthetic score to its tag: (6,10] excellent,
    (5.2,6] good, [4,5.2] average, [1,4) excluded."""
    if not 1.0 <= score <= 10.0:
        raise ValidationError(f"quality score {score} outside [1, 10]")
    if score > 6.0:
        return BUCKET_EXCELLENT
    if score > 5.2:
        return BUCKET_GOOD
    if score >= 4.0:
        return BUCKET_AVERAGE
    return BUCKET_EXCLUDED


def bucket_rank(tag: str) -> int:
    return _BUCKET_ORDER.index(tag)


def tag_records(records: list[CorpusRecord]) -> tuple[list[CorpusRecord], list[str]]:
    """Annotate quality_tag from quality_score; records without a score or
    with an out-of-range score are collected as failures."""
    tagged = []
    failures = []
    for rec in records:
        if rec.quality_score is None:
            failures.append(f"{rec.id}: no quality_score")
            tagged.append(rec)
            continue
        try:
            tag = score_bucket(rec.quality_score)
        except ValidationError as exc:
            failures.append(str(exc))
            tagged.append(rec)
            continue
        tagged.append(CorpusRecord(rec.id, rec.image, rec.caption,
                                   rec.quality_score, tag))
    return tagged, failures


# --- staged resolution preprocessing ---

class AspectRatioSkip(ValidationError):
    """Stage-2 input too elongated (aspect ratio >= 1:3)."""


@dataclass
class ResizePlan:
    scaled_w: int
    scaled_h: int
    crop_x: int
    crop_y: int
    target_w: int
    target_h: int


def stage_resize(width: int, height: int, stage: int,
                 rng: Optional[np.random.Generator] = None) -> ResizePlan:
    """Stage 1: short edge to 256 then a random 256x256 crop.
    Stage 2: scale to ~250k pixels then center-crop to multiples of 64.
    Aspect ratio is preserved up to sub-pixel rounding."""
    if width < 1 or height < 1:
        raise ValidationError(f"degenerate image dims {width}x{height}")
    if stage == 1:
        s = STAGE1_EDGE / min(width, height)
        sw, sh = round(width * s), round(height * s)
        rng = rng or np.random.default_rng(0)
        cx = int(rng.integers(0, sw - STAGE1_EDGE + 1))
        cy = int(rng.integers(0, sh - STAGE1_EDGE + 1))
        return ResizePlan(sw, sh, cx, cy, STAGE1_EDGE, STAGE1_EDGE)
    if stage == 2:
        ratio = max(width, height) / min(width, height)
        if ratio >= STAGE2_MAX_ASPECT:
            raise AspectRatioSkip(
                f"aspect ratio {ratio:.2f} >= {STAGE2_MAX_ASPECT:.0f}:1, skipped"
            )
        s = math.sqrt(STAGE2_TARGET_AREA / (width * height))
        sw, sh = round(width * s), round(height * s)
        tw = (sw // STAGE2_GRID) * STAGE2_GRID
        th = (sh // STAGE2_GRID) * STAGE2_GRID
        if tw < STAGE2_GRID or th < STAGE2_GRID:
            raise ValidationError(
                f"scaled dims {sw}x{sh} too small for the {STAGE2_GRID}-multiple crop"
            )
        return ResizePlan(sw, sh, (sw - tw) // 2, (sh - th) // 2, tw, th)
    raise ValidationError(f"stage must be 1 or 2, got {stage}")


# --- latent cache ---

def _file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def build_latent_cache(records: list[CorpusRecord], adapter, out_path,
                       manifest_path=None) -> dict:
    """Encode every record to a latent and pack them into one container.

    The manifest maps record id -> {tensor, sha256-of-input}; missing or
    unreadable images land in the error list and the pipeline continues.
    Re-running against unchanged inputs is a no-op (content-hash skip).
    """
    out_path = Path(out_path)
    manifest_path = Path(manifest_path) if manifest_path else out_path.with_suffix(".manifest.json")

    entries: dict[str, dict] = {}
    errors: list[str] = []
    latents: dict[str, np.ndarray] = {}
    for rec in records:
        src = Path(rec.image)
        if not src.exists():
            errors.append(f"{rec.id}: missing image {rec.image}")
            continue
        digest = _file_sha256(src)
        try:
            latent = adapter.encode(src)
        except Exception as exc:  # noqa: BLE001 - record and continue
            errors.append(f"{rec.id}: encode failed ({exc})")
            continue
        tensor_name = f"latent.{rec.id}"
        latents[tensor_name] = np.asarray(latent, dtype=np.float32)
        entries[rec.id] = {"tensor": tensor_name, "sha256": digest}

    manifest = {
        "entries": entries,
        "errors": errors,
        "inputs_digest": hashlib.sha256(
            json.dumps(entries, sort_keys=True).encode()).hexdigest(),
    }

    if manifest_path.exists() and out_path.exists():
        try:
            previous = json.loads(manifest_path.read_text())
        except json.JSONDecodeError:
            previous = {}
        if previous.get("inputs_digest") == manifest["inputs_digest"]:
            manifest["skipped"] = True
            return manifest

    save_container(out_path, latents, config={"ids": sorted(entries)})
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return manifest


def load_latent_cache(cache_path) -> dict[str, np.ndarray]:
    tensors, config = load_container(cache_path)
    return {i: tensors[f"latent.{i}"] for i in config["ids"]}
