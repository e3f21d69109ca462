"""Head-schedule comparison harness.

Trains a uniform-head stack and a few-early/many-late scheduled stack with
identical seeds and data, and reports the two loss curves side by side.
Head count does not change parameter count, so the comparison isolates
attention granularity. Whether the scheduled stack genuinely learns faster
is not decidable at desk scale; the harness only measures and reports.
"""

from __future__ import annotations

import json
import tempfile
from pathlib import Path

from .data import ToyClassDataset
from .errors import ConfigError
from .model import ModelConfig
from .trainer import LoopConfig, StageSpec, init_train_state, run_stage


def _train_once(cfg: ModelConfig, seed: int, steps: int, batch_size: int,
                lr: float) -> dict:
    state = init_train_state(cfg, seed=seed)
    dataset = ToyClassDataset(channels=cfg.latent_channels, seed=seed + 500)
    stage = StageSpec(name="ablate", lr_start=lr, lr_end=lr / 4,
                      batch_size=batch_size, max_steps=steps,
                      warmup_steps=min(20, steps // 4))
    with tempfile.TemporaryDirectory() as tmp:
        metrics = Path(tmp) / "metrics.jsonl"
        run_stage(state, stage, dataset, LoopConfig(), metrics_path=metrics)
        lines = [json.loads(l) for l in metrics.read_text().splitlines()]
    return {
        "loss": [round(l["loss"], 6) for l in lines],
        "ema_loss": [round(l["ema_loss"], 6) for l in lines],
        "final_ema": lines[-1]["ema_loss"],
    }


def compare_head_schedules(layers: int = 4, model_dim: int = 192,
                           uniform_heads: int = 16,
                           scheduled: list[int] | None = None,
                           seeds: tuple = (0, 1), steps: int = 120,
                           batch_size: int = 8, lr: float = 8e-4,
                           out_path=None) -> dict:
    scheduled = scheduled or [8, 16, 24, 48]
    if len(scheduled) != layers:
        raise ConfigError(f"schedule length {len(scheduled)} != layers {layers}")

    variants = {
        "uniform": ModelConfig(layers=layers, model_dim=model_dim,
                               head_schedule=[uniform_heads] * layers),
        "scheduled": ModelConfig(layers=layers, model_dim=model_dim,
                                 head_schedule=list(scheduled)),
    }
    curves = {
        name: {str(seed): _train_once(cfg, seed, steps, batch_size, lr)
               for seed in seeds}
        for name, cfg in variants.items()
    }
    report = {
        "layers": layers,
        "model_dim": model_dim,
        "uniform_heads": uniform_heads,
        "scheduled_heads": scheduled,
        "steps": steps,
        "seeds": list(seeds),
        "curves": curves,
        "note": ("comparison harness only; the claimed learning-efficiency "
                 "advantage of scheduled heads is not verifiable at this scale"),
    }
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
