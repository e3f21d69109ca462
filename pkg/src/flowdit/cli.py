"""Operator surface: train, sample, dedup, score, and prep subcommands.

Every output is machine-parseable JSON or JSON-lines. Exit codes:
0 success, 1 usage/config, 2 data integrity, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import datapipe
from .data import LatentCacheDataset, ToyClassDataset
from .errors import ConfigError, IntegrityError, ValidationError
from .flow import SamplerConfig, sample
from .latents import IdentityLatentAdapter
from .model import ModelConfig
from .trainer import (LoopConfig, StageSpec, init_train_state, load_checkpoint,
                      run_stage, save_checkpoint)

log = logging.getLogger("flowdit")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


def _parse_image_size(raw: str) -> tuple[int, int]:
    """Accepts the bracketed '[H,W]' syntax; order is [height, width]."""
    try:
        parsed = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--image_size must look like '[416,736]', got {raw!r}") from exc
    if (not isinstance(parsed, list) or len(parsed) != 2
            or not all(isinstance(v, int) and v > 0 for v in parsed)):
        raise ConfigError(f"--image_size must be two positive integers, got {raw!r}")
    return parsed[0], parsed[1]


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


# --- sample ---

def cmd_sample(args) -> int:
    state = load_checkpoint(args.model_path)
    model = state.model
    cfg = model.config
    adapter = IdentityLatentAdapter(downsample_factor=args.downsample_factor)

    height, width = _parse_image_size(args.image_size)
    factor = cfg.patch_size * adapter.downsample_factor
    if height % factor or width % factor:
        raise ConfigError(
            f"image size {height}x{width} must be divisible by {factor} "
            f"(patch size {cfg.patch_size} x latent downsample {adapter.downsample_factor})"
        )
    shape = (cfg.latent_channels, height // adapter.downsample_factor,
             width // adapter.downsample_factor)

    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    uncond = model.embed_text(args.negative_prompt) if args.negative_prompt else None

    entries = []
    for i, prompt in enumerate(args.prompts):
        seed = args.seed + i
        sampler = SamplerConfig(steps=args.steps, cfg_scale=args.cfg_scale, seed=seed)
        latent = sample(model, model.embed_text(prompt), shape, sampler,
                        uncond_text=uncond)
        pixels = adapter.decode(latent)
        name = f"sample_{i:02d}.png"
        Image.fromarray(pixels, mode="RGB").save(out_dir / name)
        entries.append({"file": name, "prompt": prompt, "seed": seed,
                        "steps": args.steps, "cfg_scale": args.cfg_scale})
        log.info("wrote %s for prompt %r", name, prompt)

    manifest = {
        "model_path": str(args.model_path),
        "checkpoint_sha256": _sha256(args.model_path),
        "image_size": [height, width],
        "negative_prompt": args.negative_prompt,
        "outputs": entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


# --- train ---

def _field(doc: dict, path: str, kind, default=None, required=False):
    node = doc
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            if required:
                raise ConfigError(f"config field {path!r} is required")
            return default
        node = node[part]
    if kind is float and isinstance(node, int):
        node = float(node)
    if not isinstance(node, kind):
        raise ConfigError(f"config field {path!r} must be {kind.__name__}, got {node!r}")
    return node


def load_train_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc

    try:
        model = ModelConfig.from_dict(doc.get("model", {}))
    except TypeError as exc:
        raise ConfigError(f"{path}: model: {exc}") from exc

    stages_doc = doc.get("stages")
    if not isinstance(stages_doc, list) or not stages_doc:
        raise ConfigError(f"{path}: 'stages' must be a non-empty list")
    stages = []
    for i, sdoc in enumerate(stages_doc):
        try:
            stages.append(StageSpec(**sdoc))
        except (TypeError, ConfigError) as exc:
            raise ConfigError(f"{path}: stages[{i}]: {exc}") from exc

    loop = LoopConfig(
        sigma=_field(doc, "sigma", float, 0.0),
        cfg_dropout=_field(doc, "cfg_dropout", float, 0.1),
        spike_threshold=_field(doc, "spike_threshold", float, 3.0),
        spike_lr_decay=_field(doc, "spike_lr_decay", float, 0.7),
        ema_decay=_field(doc, "ema_decay", float, 0.9),
        checkpoint_every=_field(doc, "checkpoint_every", int, 0),
    )
    return {
        "model": model,
        "stages": stages,
        "loop": loop,
        "seed": _field(doc, "seed", int, 0),
        "weight_decay": _field(doc, "weight_decay", float, 0.0),
        "data": doc.get("data", {"kind": "toy"}),
        "out_dir": _field(doc, "out_dir", str, "runs/default"),
    }


def build_dataset(data_doc: dict, model: ModelConfig):
    kind = data_doc.get("kind", "toy")
    if kind == "toy":
        return ToyClassDataset(
            channels=model.latent_channels,
            height=int(data_doc.get("height", 8)),
            width=int(data_doc.get("width", 8)),
            n_classes=int(data_doc.get("classes", 8)),
            seed=int(data_doc.get("seed", 0)),
            noise_scale=float(data_doc.get("noise_scale", 0.1)),
        )
    if kind == "latent_cache":
        records = datapipe.read_manifest(data_doc["manifest"])
        latents = datapipe.load_latent_cache(data_doc["cache"])
        return LatentCacheDataset(records, latents,
                                  resolution_policy=data_doc.get("resolution_policy", "fixed"))
    raise ConfigError(f"data.kind must be 'toy' or 'latent_cache', got {kind!r}")


def cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    out_dir = Path(args.out_dir or cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "checkpoint.bin"
    metrics_path = out_dir / "metrics.jsonl"

    if args.resume:
        state = load_checkpoint(args.resume, expected_config=cfg["model"])
        log.info("resumed from %s at stage %d step %d", args.resume,
                 state.stage_index, state.step_in_stage)
    else:
        state = init_train_state(cfg["model"], seed=cfg["seed"],
                                 weight_decay=cfg["weight_decay"],
                                 ema_decay=cfg["loop"].ema_decay)

    dataset = build_dataset(cfg["data"], cfg["model"])
    for index, stage in enumerate(cfg["stages"]):
        if index < state.stage_index:
            continue
        log.info("stage %s: %d steps", stage.name, stage.max_steps)
        state = run_stage(state, stage, dataset, cfg["loop"],
                          metrics_path=metrics_path, checkpoint_path=checkpoint_path)
        save_checkpoint(state, checkpoint_path)
    print(json.dumps({"checkpoint": str(checkpoint_path),
                      "metrics": str(metrics_path),
                      "stages": len(cfg["stages"])}))
    return EXIT_OK


# --- dedup / score / prep ---

def cmd_dedup(args) -> int:
    embeddings = datapipe.load_embeddings(args.embeddings)
    config = datapipe.DedupConfig(
        sim_threshold=args.sim_threshold, min_pts=args.min_pts,
        partition_size=args.partition_size, max_rounds=args.max_rounds,
        seed=args.seed,
    )
    ids, report = datapipe.dedup_converge(embeddings, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "representatives.json").write_text(json.dumps(sorted(ids), indent=2))
    (out / "dedup_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps({"representatives": len(ids), "converged": report["converged"]}))
    return EXIT_OK if report["converged"] else EXIT_RUNTIME


def cmd_score(args) -> int:
    records = datapipe.read_manifest(args.manifest)
    tagged, failures = datapipe.tag_records(records)
    datapipe.write_manifest(args.out, tagged)
    print(json.dumps({"records": len(tagged), "failures": failures}))
    return EXIT_OK if not failures else EXIT_DATA


def cmd_prep(args) -> int:
    records = datapipe.read_manifest(args.manifest)
    out = args.out or os.environ.get("FLOWDIT_CACHE_DIR")
    if not out:
        raise ConfigError("prep needs --out or the FLOWDIT_CACHE_DIR environment variable")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)

    plans = []
    skipped = []
    kept = []
    for rec in records:
        dims = _record_dims(rec, args)
        try:
            plan = datapipe.stage_resize(dims[0], dims[1], args.stage, rng)
        except datapipe.AspectRatioSkip as exc:
            skipped.append({"id": rec.id, "reason": str(exc)})
            continue
        plans.append({"id": rec.id, "width": dims[0], "height": dims[1],
                      "plan": vars(plan)})
        kept.append(rec)

    report = {"stage": args.stage, "planned": plans, "skipped": skipped}
    (out_dir / "prep_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))

    cache_manifest = {}
    if not args.skip_latents:
        adapter = IdentityLatentAdapter(downsample_factor=args.downsample_factor)
        cache_manifest = datapipe.build_latent_cache(
            kept, adapter, out_dir / "latents.bin", out_dir / "latents.manifest.json")
    print(json.dumps({"planned": len(plans), "skipped": len(skipped),
                      "cache_errors": cache_manifest.get("errors", [])}))
    if cache_manifest.get("errors"):
        return EXIT_DATA
    return EXIT_OK


def _record_dims(rec, args) -> tuple[int, int]:
    """Pixel dims for resize planning; synthetic latents use declared dims."""
    if args.width and args.height:
        return args.width, args.height
    path = Path(rec.image)
    if path.suffix == ".npy" and path.exists():
        latent = np.load(path)
        f = args.downsample_factor
        return latent.shape[2] * f, latent.shape[1] * f
    if path.exists():
        with Image.open(path) as im:
            return im.width, im.height
    return 0, 0  # triggers the degenerate-dims validation error


# --- argument parsing ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowdit",
                                     description="Flow-matching DiT toolkit")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="generate images from a checkpoint")
    p.add_argument("--prompts", nargs="+", required=True)
    p.add_argument("--image_size", required=True,
                   help="'[height,width]' in pixels, e.g. '[416,736]'")
    p.add_argument("--cfg_scale", type=float, default=5.0)
    p.add_argument("--model_path", required=True)
    p.add_argument("--output_dir", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--negative_prompt", default=None,
                   help="replaces the unconditional branch in guidance")
    p.add_argument("--downsample_factor", type=int, default=8)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("train", help="run the staged training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--out_dir", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("dedup", help="iterative embedding deduplication")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sim_threshold", type=float, default=0.9)
    p.add_argument("--min_pts", type=int, default=2)
    p.add_argument("--partition_size", type=int, default=1024)
    p.add_argument("--max_rounds", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_dedup)

    p = sub.add_parser("score", help="annotate quality tags from scores")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("prep", help="stage resize plans and latent cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None,
                   help="output directory (falls back to $FLOWDIT_CACHE_DIR)")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=0,
                   help="override source pixel width for all records")
    p.add_argument("--height", type=int, default=0)
    p.add_argument("--downsample_factor", type=int, default=8)
    p.add_argument("--skip_latents", action="store_true")
    p.set_defaults(fn=cmd_prep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
