"""Staged training loop: AdamW with warmup, linear stage schedules,
loss-spike-triggered LR decay, bit-exact checkpoint/resume, and JSONL
metrics.

Determinism contract: every stochastic choice in a stage (batch indices,
flow noise, guidance dropout) comes from one generator whose state rides
in the checkpoint, so restoring mid-stage continues the exact run.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .container import load_container, save_container
from .errors import ConfigError
from .flow import FlowBatch, icfm_loss, make_flow_batch
from .model import DiTModel, ModelConfig

log = logging.getLogger(__name__)


@dataclass
class StageSpec:
    name: str
    resolution_policy: str = "fixed"
    lr_start: float = 2e-4
    lr_end: float = 0.0
    batch_size: int = 16
    max_steps: int = 200
    warmup_steps: int = 20

    def __post_init__(self):
        if self.lr_end > self.lr_start:
            raise ConfigError(
                f"stage {self.name}: lr_end {self.lr_end} > lr_start {self.lr_start}"
            )
        if self.warmup_steps > self.max_steps:
            raise ConfigError(
                f"stage {self.name}: warmup {self.warmup_steps} > max_steps {self.max_steps}"
            )
        if self.batch_size < 1:
            raise ConfigError(f"stage {self.name}: batch_size must be >= 1")


@dataclass
class LoopConfig:
    sigma: float = 0.0
    cfg_dropout: float = 0.1
    spike_threshold: float = 3.0   # spike iff loss > k * EMA
    spike_lr_decay: float = 0.7    # gamma applied per spike event
    ema_decay: float = 0.9
    checkpoint_every: int = 0      # 0 disables periodic checkpoints


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(named_params: dict, state: OptimizerState, lr: float) -> bool:
    """One decoupled-weight-decay Adam update with bias correction.

    Returns False (and leaves all state untouched) when any gradient is
    non-finite; the caller logs the skipped step.
    """
    grads = {}
    for name, p in named_params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            return False
        grads[name] = g
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in named_params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        scratch = np.empty_like(p.data)
        m *= state.beta1
        np.multiply(g, 1.0 - state.beta1, out=scratch)
        m += scratch
        v *= state.beta2
        np.multiply(g, g, out=scratch)
        scratch *= 1.0 - state.beta2
        v += scratch
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        np.divide(v, c2, out=scratch)
        np.sqrt(scratch, out=scratch)
        scratch += state.eps
        np.divide(m, scratch, out=scratch)
        scratch *= lr / c1
        p.data -= scratch
    return True


def lr_at(step: int, stage: StageSpec, spike_events: int = 0,
          spike_lr_decay: float = 0.7) -> float:
    """Linear warmup to lr_start, linear decay to lr_end, times the
    per-spike decay factor for every spike event seen so far."""
    if stage.warmup_steps > 0 and step < stage.warmup_steps:
        base = stage.lr_start * step / stage.warmup_steps
    else:
        span = stage.max_steps - stage.warmup_steps
        frac = (step - stage.warmup_steps) / span if span > 0 else 1.0
        base = stage.lr_start + (stage.lr_end - stage.lr_start) * min(frac, 1.0)
    return base * spike_lr_decay ** spike_events


@dataclass
class EmaState:
    decay: float = 0.9
    value: Optional[float] = None

    def update(self, x: float) -> float:
        self.value = x if self.value is None else self.decay * self.value + (1 - self.decay) * x
        return self.value


def spike_detect(loss: float, ema: EmaState, threshold: float = 3.0) -> bool:
    """Spike iff loss exceeds threshold * EMA(previous losses); the EMA is
    then updated with the new loss either way."""
    spike = ema.value is not None and loss > threshold * ema.value
    ema.update(loss)
    return spike


@dataclass
class TrainState:
    model: DiTModel
    opt: OptimizerState
    train_rng: np.random.Generator
    ema: EmaState
    stage_index: int = 0
    step_in_stage: int = 0
    stage_spike_count: int = 0
    total_spikes: int = 0


def init_train_state(config: ModelConfig, seed: int = 0,
                     weight_decay: float = 0.0, ema_decay: float = 0.9,
                     dtype=np.float32) -> TrainState:
    model = DiTModel(config, seed=seed, dtype=dtype)
    return TrainState(
        model=model,
        opt=OptimizerState(weight_decay=weight_decay),
        train_rng=np.random.default_rng((seed, 0xDA7A)),
        ema=EmaState(decay=ema_decay),
    )


def _embed_batch(model: DiTModel, prompts: list[str]):
    embeds = [model.embed_text(p) for p in prompts]
    shapes = {e.shape for e in embeds}
    return np.stack(embeds) if len(shapes) == 1 else embeds


def _batch_loss(model: DiTModel, batch: FlowBatch, text):
    if not isinstance(text, list):
        return icfm_loss(model, batch, text)
    # Unequal prompt lengths: accumulate per-sample losses.
    total = None
    for i, emb in enumerate(text):
        sub = FlowBatch(
            x0=batch.x0[i:i + 1], x1=batch.x1[i:i + 1], t=batch.t[i:i + 1],
            sigma=batch.sigma, eps=batch.eps[i:i + 1], xt=batch.xt[i:i + 1],
            target_u=batch.target_u[i:i + 1],
        )
        part = icfm_loss(model, sub, emb[None])
        total = part if total is None else total + part
    return total.scale(1.0 / len(text))


def run_stage(state: TrainState, stage: StageSpec, dataset, loop: LoopConfig,
              metrics_path=None, checkpoint_path=None) -> TrainState:
    """Train one stage from state.step_in_stage to stage.max_steps."""
    if getattr(dataset, "resolution_policy", None) != stage.resolution_policy:
        raise ConfigError(
            f"dataset policy {getattr(dataset, 'resolution_policy', None)!r} does not "
            f"match stage {stage.name!r} policy {stage.resolution_policy!r}"
        )
    if len(dataset) == 0:
        raise ConfigError(f"stage {stage.name}: dataset is empty")

    model = state.model
    params = dict(model.named_parameters())
    metrics_fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        for step in range(state.step_in_stage, stage.max_steps):
            lr = lr_at(step, stage, state.stage_spike_count, loop.spike_lr_decay)
            rng = state.train_rng
            x1, prompts, _ = dataset.sample_batch(rng, stage.batch_size)
            if rng.uniform() < loop.cfg_dropout:
                prompts = [""] * len(prompts)
            batch = make_flow_batch(x1, rng, sigma=loop.sigma)
            text = _embed_batch(model, prompts)

            model.zero_grad()
            loss = _batch_loss(model, batch, text)
            loss_val = float(loss.item())
            loss.backward()

            spike = spike_detect(loss_val, state.ema, loop.spike_threshold)
            applied = adamw_step(params, state.opt, lr)
            if not applied:
                log.warning("stage %s step %d: non-finite gradient, step skipped",
                            stage.name, step)
            if spike:
                state.stage_spike_count += 1
                state.total_spikes += 1
                log.info("stage %s step %d: loss spike %.4g (ema %.4g), LR decays by %g",
                         stage.name, step, loss_val, state.ema.value, loop.spike_lr_decay)

            state.step_in_stage = step + 1
            if metrics_fh:
                line = {"step": step, "stage": stage.name, "loss": loss_val,
                        "ema_loss": state.ema.value, "lr": lr, "spike": spike,
                        "wallclock": time.time()}
                if not applied:
                    line["skipped"] = True
                metrics_fh.write(json.dumps(line) + "\n")
                metrics_fh.flush()
            if (loop.checkpoint_every and checkpoint_path
                    and (step + 1) % loop.checkpoint_every == 0):
                save_checkpoint(state, checkpoint_path)
    finally:
        if metrics_fh:
            metrics_fh.close()

    state.stage_index += 1
    state.step_in_stage = 0
    return state


# --- checkpoint I/O ---

def save_checkpoint(state: TrainState, path) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, p in state.model.named_parameters():
        tensors[f"param.{name}"] = p.data
    for name, arr in state.opt.m.items():
        tensors[f"adam_m.{name}"] = arr
    for name, arr in state.opt.v.items():
        tensors[f"adam_v.{name}"] = arr
    config = {
        "model": state.model.config.to_dict(),
        "model_dtype": state.model.np_dtype.name,
        "optimizer": {
            "beta1": state.opt.beta1, "beta2": state.opt.beta2,
            "eps": state.opt.eps, "weight_decay": state.opt.weight_decay,
            "step": state.opt.step,
        },
        "stage_index": state.stage_index,
        "step_in_stage": state.step_in_stage,
        "stage_spike_count": state.stage_spike_count,
        "total_spikes": state.total_spikes,
        "ema": {"decay": state.ema.decay, "value": state.ema.value},
        "rng_state": state.train_rng.bit_generator.state,
    }
    save_container(path, tensors, config=config)


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None) -> TrainState:
    tensors, config = load_container(path)
    if config is None or "model" not in config:
        raise ConfigError(f"{path}: not a training checkpoint (no model config)")
    model_config = ModelConfig.from_dict(config["model"])
    if expected_config is not None and expected_config.to_dict() != model_config.to_dict():
        theirs, ours = model_config.to_dict(), expected_config.to_dict()
        diff = sorted(k for k in ours if ours[k] != theirs.get(k))
        raise ConfigError(
            f"{path}: checkpoint model config differs from the requested one "
            f"(fields: {', '.join(diff)})"
        )
    dtype = np.dtype(config.get("model_dtype", "float32"))
    model = DiTModel(model_config, seed=0, dtype=dtype)
    model.load_state({
        name[len("param."):]: arr for name, arr in tensors.items()
        if name.startswith("param.")
    })
    opt_cfg = config["optimizer"]
    opt = OptimizerState(
        beta1=opt_cfg["beta1"], beta2=opt_cfg["beta2"], eps=opt_cfg["eps"],
        weight_decay=opt_cfg["weight_decay"], step=opt_cfg["step"],
        m={n[len("adam_m."):]: a for n, a in tensors.items() if n.startswith("adam_m.")},
        v={n[len("adam_v."):]: a for n, a in tensors.items() if n.startswith("adam_v.")},
    )
    rng = np.random.default_rng()
    rng.bit_generator.state = config["rng_state"]
    ema = EmaState(decay=config["ema"]["decay"], value=config["ema"]["value"])
    return TrainState(
        model=model, opt=opt, train_rng=rng, ema=ema,
        stage_index=config["stage_index"], step_in_stage=config["step_in_stage"],
        stage_spike_count=config["stage_spike_count"],
        total_spikes=config["total_spikes"],
    )
