"""Flow-matching objective and ODE sampling.

Training regresses the model's velocity toward u = x1 - x0 along the
linear interpolant xt = t*x1 + (1-t)*x0 (+ sigma*eps); sampling integrates
the learned field from t=0 (noise) to t=1 (data) with Euler steps and
classifier-free guidance between an unconditional and a conditional branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, no_grad


@dataclass
class FlowBatch:
    """One training batch on the interpolation path.

    Invariants: xt == t*x1 + (1-t)*x0 + sigma*eps and target_u == x1 - x0,
    both elementwise with t broadcast over sample dims.
    """

    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    sigma: float
    eps: np.ndarray
    xt: np.ndarray
    target_u: np.ndarray


@dataclass
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"sampler needs steps >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise ConfigError(f"cfg_scale must be >= 0, got {self.cfg_scale}")


def make_flow_batch(x1: np.ndarray, rng: np.random.Generator, sigma: float = 0.0,
                    t: np.ndarray | None = None) -> FlowBatch:
    """Draw (t, x0, eps) and build the interpolant for a [B, ...] data batch."""
    x1 = np.asarray(x1, dtype=np.float32)
    b = x1.shape[0]
    if t is None:
        t = rng.uniform(size=b)
    t = np.asarray(t, dtype=np.float64)
    x0 = rng.standard_normal(x1.shape).astype(np.float32)
    eps = rng.standard_normal(x1.shape).astype(np.float32)
    t_b = t.reshape((b,) + (1,) * (x1.ndim - 1)).astype(np.float32)
    xt = t_b * x1 + (1.0 - t_b) * x0 + np.float32(sigma) * eps
    return FlowBatch(x0=x0, x1=x1, t=t, sigma=float(sigma), eps=eps,
                     xt=xt, target_u=x1 - x0)


def icfm_loss(model, batch: FlowBatch, text) -> Tensor:
    """Mean squared error between predicted and target velocity.

    `text` is a [B, n_tokens, d] embedding array (or a list of equal-shape
    per-sample embeddings). Differentiable with respect to model parameters.
    """
    if isinstance(text, (list, tuple)):
        shapes = {a.shape for a in text}
        if len(shapes) != 1:
            raise ContractError(
                f"per-sample text embeddings must share a shape, got {sorted(shapes)}"
            )
        text = np.stack(text)
    v = model(batch.xt, batch.t, text)
    if v.shape != batch.target_u.shape:
        raise ContractError(
            f"velocity shape {v.shape} != target shape {batch.target_u.shape}"
        )
    diff = v - Tensor(np.asarray(batch.target_u, dtype=v.dtype))
    return (diff * diff).mean()


def cfg_velocity(v_uncond: np.ndarray, v_cond: np.ndarray, scale: float) -> np.ndarray:
    """v_uncond + scale * (v_cond - v_uncond)."""
    if v_uncond.shape != v_cond.shape:
        raise ContractError(
            f"guidance branches disagree in shape: {v_uncond.shape} vs {v_cond.shape}"
        )
    return v_uncond + scale * (v_cond - v_uncond)


def sample(model, text: np.ndarray, shape: tuple, config: SamplerConfig,
           uncond_text: np.ndarray | None = None) -> np.ndarray:
    """Integrate the velocity field from seeded noise; deterministic per seed.

    The unconditional branch defaults to the empty-prompt (BOS-only)
    embedding; passing `uncond_text` replaces it (negative prompting).
    """
    rng = np.random.default_rng(config.seed)
    x = rng.standard_normal(shape).astype(np.float32)
    if uncond_text is None:
        uncond_text = model.embed_text("")
    dt = 1.0 / config.steps
    with no_grad():
        for i in range(config.steps):
            t = i * dt
            v_cond = model(x, t, text).numpy()
            if config.cfg_scale == 1.0:
                v = v_cond
            else:
                v_uncond = model(x, t, uncond_text).numpy()
                v = cfg_velocity(v_uncond, v_cond, config.cfg_scale)
            x = x + np.float32(dt) * v
    return x
