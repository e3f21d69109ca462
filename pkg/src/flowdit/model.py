"""Full generator: input embedders, patchify, the block stack with a
per-layer head schedule, and the velocity head.

The text-embedding provider and the latent adapter sit behind frozen,
pluggable interfaces; everything else (projections, blocks, final head)
is trainable.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from .blocks import (BlockSpec, ConditionModulation, DiTBlock, Linear, Module,
                     modulated_norm)
from .errors import ConfigError, ShapeError, ValidationError
from .tensor import Tensor, concat

HEAD_SCHEDULE_VALUES = (8, 16, 24, 48)

# Fixed provider seed: the hash-text embedder stands in for a pretrained
# encoder, so its table must be identical across processes and runs.
_TEXT_PROVIDER_SEED = 0x7E57
_BOS_ROW = -1


def head_schedule_default(layers: int) -> list[int]:
    """Four equal contiguous groups of [8, 16, 24, 48] heads, few heads early."""
    if layers % 4 != 0:
        raise ConfigError(
            f"layers={layers} is not divisible by 4; pass an explicit head_schedule"
        )
    group = layers // 4
    schedule: list[int] = []
    for heads in HEAD_SCHEDULE_VALUES:
        schedule.extend([heads] * group)
    return schedule


@dataclass
class ModelConfig:
    layers: int = 8
    model_dim: int = 192
    head_schedule: list[int] = field(default_factory=list)
    patch_size: int = 2
    latent_channels: int = 16
    text_embed_dim: int = 32
    max_text_tokens: int = 16
    vocab_hash_size: int = 4096
    mlp_hidden_dim: int = 0          # 0 -> 2 * model_dim (desk profile)
    time_freq_dim: int = 64
    norm_eps: float = 1e-6
    condition_on_pooled_text: bool = False

    def __post_init__(self):
        if not self.head_schedule:
            self.head_schedule = head_schedule_default(self.layers)
        if self.mlp_hidden_dim == 0:
            self.mlp_hidden_dim = 2 * self.model_dim
        if len(self.head_schedule) != self.layers:
            raise ConfigError(
                f"head_schedule length {len(self.head_schedule)} != layers {self.layers}"
            )
        for heads in self.head_schedule:
            # raises ConfigError on bad divisibility
            BlockSpec(self.model_dim, heads, self.mlp_hidden_dim, self.norm_eps)
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.max_text_tokens < 1:
            raise ConfigError("max_text_tokens must allow at least the BOS token")
        if self.time_freq_dim % 2 != 0:
            raise ConfigError("time_freq_dim must be even (sin/cos pairs)")

    def block_spec(self, layer: int) -> BlockSpec:
        return BlockSpec(self.model_dim, self.head_schedule[layer],
                         self.mlp_hidden_dim, self.norm_eps)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def patchify(latent, patch_size: int):
    """Space-to-depth: [..., C, H, W] -> ([..., (H/p)(W/p), p*p*C], positions).

    Token order is row-major over the patch grid; positions carry raw
    (row, col) per token. unpatchify(patchify(x)) is bit-exact.
    """
    x = latent if isinstance(latent, Tensor) else Tensor(latent)
    p = patch_size
    c, h, w = x.shape[-3:]
    if h % p or w % p:
        raise ShapeError(f"latent dims {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    lead = x.shape[:-3]
    n = len(lead)
    t = x.reshape(*lead, c, gh, p, gw, p)
    t = t.transpose(*range(n), n + 1, n + 3, n, n + 2, n + 4)
    tokens = t.reshape(*lead, gh * gw, c * p * p)
    rows, cols = np.divmod(np.arange(gh * gw), gw)
    positions = np.stack([rows, cols], axis=1)
    return tokens, positions


def unpatchify(tokens, channels: int, height: int, width: int, patch_size: int):
    """Inverse of patchify for the same (C, H, W, p)."""
    t = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    p = patch_size
    gh, gw = height // p, width // p
    lead = t.shape[:-2]
    n = len(lead)
    if t.shape[-2:] != (gh * gw, channels * p * p):
        raise ShapeError(
            f"token block {t.shape[-2:]} does not unpatchify to "
            f"{channels}x{height}x{width} at p={p}"
        )
    t = t.reshape(*lead, gh, gw, channels, p, p)
    t = t.transpose(*range(n), n + 2, n, n + 3, n + 1, n + 4)
    return t.reshape(*lead, channels, height, width)


def timestep_features(t, freq_dim: int, dtype=np.float32, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of t in [0, 1], shape [..., freq_dim]."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValidationError(f"timestep outside [0, 1]: {t!r}")
    half = freq_dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    angles = t[..., None] * 1000.0 * freqs
    return np.concatenate([np.cos(angles), np.sin(angles)], axis=-1).astype(dtype)


class TimestepEmbedder(Module):
    """Sinusoidal features followed by a 3-layer SiLU MLP."""

    def __init__(self, freq_dim, model_dim, rng, dtype=np.float32):
        self.freq_dim = freq_dim
        self.fc1 = Linear(freq_dim, model_dim, rng, dtype=dtype)
        self.fc2 = Linear(model_dim, model_dim, rng, dtype=dtype)
        self.fc3 = Linear(model_dim, model_dim, rng, dtype=dtype)

    def forward(self, t) -> Tensor:
        feats = Tensor(timestep_features(t, self.freq_dim, dtype=self.fc1.weight.dtype))
        return self.fc3(self.fc2(self.fc1(feats).silu()).silu())


class HashTextEmbedder:
    """Frozen stand-in for a pretrained text encoder.

    Whitespace tokens hash (crc32) into a fixed random table; a dedicated
    BOS row is always prepended. Deterministic across processes: the table
    seed is a constant, mirroring how a pretrained encoder ships fixed
    weights that are never part of our checkpoints.
    """

    def __init__(self, vocab_hash_size: int, embed_dim: int, max_tokens: int):
        self.vocab_hash_size = vocab_hash_size
        self.embed_dim = embed_dim
        self.max_tokens = max_tokens
        rng = np.random.default_rng(_TEXT_PROVIDER_SEED)
        # last row is BOS
        self.table = rng.standard_normal((vocab_hash_size + 1, embed_dim)).astype(np.float32)

    def token_ids(self, prompt: str) -> list[int]:
        words = prompt.split()[: self.max_tokens - 1]
        return [_BOS_ROW % (self.vocab_hash_size + 1)] + [
            zlib.crc32(w.encode("utf-8")) % self.vocab_hash_size for w in words
        ]

    def embed(self, prompt: str) -> np.ndarray:
        """[n_tokens, embed_dim] with BOS first; empty prompt -> BOS only."""
        return self.table[self.token_ids(prompt)]


class DiTModel(Module):
    """Velocity-field generator over latent images.

    forward() concatenates [BOS+text, image] tokens into one joint sequence,
    runs every block with its scheduled head count, applies a conditioned
    final norm plus linear head to the image tokens only, and unpatchifies
    back to the latent shape.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.np_dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        dim = config.model_dim
        token_dim = config.patch_size ** 2 * config.latent_channels
        self.text_proj = Linear(config.text_embed_dim, dim, rng, dtype=dtype)
        self.image_proj = Linear(token_dim, dim, rng, dtype=dtype)
        self.time_embed = TimestepEmbedder(config.time_freq_dim, dim, rng, dtype=dtype)
        self.blocks = [DiTBlock(config.block_spec(i), rng, dtype=dtype)
                       for i in range(config.layers)]
        self.final_modulation = ConditionModulation(dim, 2, rng, dtype=dtype)
        self.head = Linear(dim, token_dim, rng, zero_init=True, dtype=dtype)
        self.text_provider = HashTextEmbedder(
            config.vocab_hash_size, config.text_embed_dim, config.max_text_tokens
        )

    def embed_text(self, prompt: str) -> np.ndarray:
        return self.text_provider.embed(prompt)

    def forward(self, latent, t, text) -> Tensor:
        cfg = self.config
        lat = latent if isinstance(latent, Tensor) else Tensor(np.asarray(latent, dtype=self.np_dtype))
        batched = lat.ndim == 4
        if not batched:
            if lat.ndim != 3:
                raise ShapeError(f"latent must be [C,H,W] or [B,C,H,W], got {lat.shape}")
            lat = lat.reshape(1, *lat.shape)
        b, c, h, w = lat.shape
        if c != cfg.latent_channels:
            raise ShapeError(
                f"latent has {c} channels, model expects {cfg.latent_channels}"
            )

        text_arr = np.asarray(text, dtype=self.np_dtype)
        if text_arr.ndim == 2:
            text_arr = text_arr[None]
        if text_arr.ndim != 3 or text_arr.shape[-1] != cfg.text_embed_dim:
            raise ShapeError(
                f"text embedding shape {text_arr.shape} does not match "
                f"[B, n_tokens, {cfg.text_embed_dim}]"
            )
        if text_arr.shape[0] == 1 and b > 1:
            text_arr = np.repeat(text_arr, b, axis=0)
        if text_arr.shape[0] != b:
            raise ShapeError(
                f"text batch {text_arr.shape[0]} does not match latent batch {b}"
            )
        n_text = text_arr.shape[1]
        if n_text < 1 or n_text > cfg.max_text_tokens:
            raise ShapeError(
                f"text token count {n_text} outside [1, {cfg.max_text_tokens}]"
            )

        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))

        tokens, grid_pos = patchify(lat, cfg.patch_size)
        img_tok = self.image_proj(tokens)
        txt_tok = self.text_proj(Tensor(text_arr))

        cond = self.time_embed(t_arr)
        if cfg.condition_on_pooled_text:
            cond = cond + txt_tok.mean(axis=-2)

        # text tokens at (0, index), image tokens at (row+1, col)
        text_pos = np.stack([np.zeros(n_text, dtype=np.int64), np.arange(n_text)], axis=1)
        img_pos = grid_pos + np.array([1, 0])
        positions = np.concatenate([text_pos, img_pos], axis=0)

        seq = concat([txt_tok, img_tok], axis=1)
        for block in self.blocks:
            seq = block(seq, cond, positions)

        img_out = seq.narrow(1, n_text, tokens.shape[1])
        scale, shift = self.final_modulation(cond)
        mod_shape = (b, 1, cfg.model_dim)
        img_out = modulated_norm(img_out, scale.reshape(mod_shape),
                                 shift.reshape(mod_shape), cfg.norm_eps)
        velocity_tokens = self.head(img_out)
        velocity = unpatchify(velocity_tokens, c, h, w, cfg.patch_size)
        return velocity if batched else velocity.reshape(c, h, w)

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(tensors))
        extra = sorted(set(tensors) - set(own))
        if missing or extra:
            raise ConfigError(
                f"parameter names do not match checkpoint (missing={missing[:3]}, "
                f"unexpected={extra[:3]})"
            )
        for name, param in own.items():
            arr = tensors[name]
            if tuple(arr.shape) != param.shape:
                raise ConfigError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} vs model {param.shape}"
                )
            param.data = arr.astype(param.dtype, copy=True)
