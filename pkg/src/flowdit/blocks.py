"""Transformer building blocks: conditioned sandwich RMS normalization,
SwiGLU MLP, two-axis rotary embeddings, and QK-normalized joint
self-attention with a per-block head count.

Everything here is a pure function of (weights, inputs); weights are plain
autodiff tensors discovered by name through the Module tree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, _unbroadcast


class Module:
    """Minimal parameter container; children discovered via attributes."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """y = x @ weight (+ bias); weight stored [in, out]."""

    def __init__(self, in_features, out_features, rng, bias=True, zero_init=False,
                 dtype=np.float32):
        if zero_init:
            w = np.zeros((in_features, out_features), dtype=dtype)
        else:
            w = rng.standard_normal((in_features, out_features)) * in_features ** -0.5
            w = w.astype(dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x.matmul(self.weight)
        if self.bias is not None:
            y = y.add(self.bias)
        return y


@dataclass(frozen=True)
class BlockSpec:
    """Per-block architecture description."""

    model_dim: int
    head_count: int
    mlp_hidden_dim: int
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.head_count < 1:
            raise ConfigError(f"head_count must be positive, got {self.head_count}")
        if self.model_dim % self.head_count != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by head_count {self.head_count}"
            )
        if self.head_dim % 4 != 0:
            raise ConfigError(
                f"head_dim {self.head_dim} must be divisible by 4 "
                f"(two rotary axes x rotation pairs)"
            )

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.head_count


def rope_tables(positions: np.ndarray, head_dim: int, base: float = 10000.0,
                dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables [tokens, 1, head_dim//2] for a (axis0, axis1) position list.

    The first head_dim//4 angle columns come from axis0, the rest from axis1;
    the singleton middle dim broadcasts over heads.
    """
    positions = np.asarray(positions)
    quarter = head_dim // 4
    freqs = base ** (-np.arange(quarter, dtype=np.float64) / quarter)
    ang0 = positions[:, 0:1].astype(np.float64) * freqs
    ang1 = positions[:, 1:2].astype(np.float64) * freqs
    angles = np.concatenate([ang0, ang1], axis=-1)[:, None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _rotate_pairs(arr: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Pairwise-rotate the last dim: feature j pairs with j + quarter inside
    each axis half; cos/sin carry both halves side by side."""
    half = arr.shape[-1] // 2
    quarter = half // 2
    u = np.concatenate([arr[..., :quarter], arr[..., 2 * quarter:3 * quarter]], axis=-1)
    v = np.concatenate([arr[..., quarter:2 * quarter], arr[..., 3 * quarter:]], axis=-1)
    ru = u * cos - v * sin
    rv = u * sin + v * cos
    out = np.empty_like(arr)
    out[..., :quarter] = ru[..., :quarter]
    out[..., quarter:2 * quarter] = rv[..., :quarter]
    out[..., 2 * quarter:3 * quarter] = ru[..., quarter:]
    out[..., 3 * quarter:] = rv[..., quarter:]
    return out


def rope2d_rotate(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotate [..., tokens, heads, head_dim] by two-axis position angles.

    First half of head_dim turns by axis0 angles, second half by axis1.
    Zero positions are the identity and every rotation preserves per-head
    norms; the backward pass is the inverse rotation (negated angles).
    """
    head_dim = x.shape[-1]
    if head_dim % 4 != 0:
        raise ConfigError(f"head_dim {head_dim} must be divisible by 4 for 2D rotation")
    tokens = x.shape[-3]
    positions = np.asarray(positions)
    if positions.shape != (tokens, 2):
        raise ConfigError(
            f"positions shape {positions.shape} does not match {tokens} tokens"
        )
    cos, sin = rope_tables(positions, head_dim, base=base, dtype=x.dtype)
    a = x

    def backward_fn():
        if a.requires_grad:
            a._accumulate(_rotate_pairs(out.grad, cos, -sin), own=True)

    out = Tensor._result(_rotate_pairs(x.data, cos, sin), (a,), backward_fn)
    return out


class JointSelfAttention(Module):
    """Full bidirectional attention over one concatenated text+image sequence.

    Q and K are RMS-normalized per head before rotation (QK normalization,
    no learned gain), then rotated by the two-axis tables; attention uses
    1/sqrt(head_dim) scaling and a dense full weight matrix.
    """

    def __init__(self, spec: BlockSpec, rng, dtype=np.float32):
        self.spec = spec
        dim = spec.model_dim
        self.w_q = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.w_k = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.w_v = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.w_o = Linear(dim, dim, rng, bias=False, dtype=dtype)

    def _qk(self, w: Linear, seq: Tensor, positions, lead) -> Tensor:
        spec = self.spec
        tokens = seq.shape[-2]
        n = len(lead)
        t = w(seq).reshape(*lead, tokens, spec.head_count, spec.head_dim)
        t = t.rms_normalize(spec.norm_eps)
        if positions is not None:
            t = rope2d_rotate(t, positions)
        # [..., tokens, heads, hd] -> [..., heads, tokens, hd]
        return t.transpose(*range(n), n + 1, n, n + 2)

    def forward(self, seq: Tensor, positions=None) -> Tensor:
        spec = self.spec
        tokens = seq.shape[-2]
        if tokens == 0:
            raise ContractError("attention over an empty token sequence")
        lead = seq.shape[:-2]
        n = len(lead)
        heads, hd = spec.head_count, spec.head_dim

        q = self._qk(self.w_q, seq, positions, lead)
        k = self._qk(self.w_k, seq, positions, lead)
        v = self.w_v(seq).reshape(*lead, tokens, heads, hd)
        v = v.transpose(*range(n), n + 1, n, n + 2)

        k_t = k.transpose(*range(n + 1), n + 2, n + 1)
        weights = q.matmul(k_t).scale(hd ** -0.5).softmax_lastdim()
        out = weights.matmul(v)
        out = out.transpose(*range(n), n + 1, n, n + 2).reshape(*lead, tokens, spec.model_dim)
        return self.w_o(out)

    def attention_weights(self, seq: Tensor, positions=None) -> np.ndarray:
        """Post-softmax weights [..., heads, tokens, tokens], for inspection."""
        lead = seq.shape[:-2]
        n = len(lead)
        q = self._qk(self.w_q, seq, positions, lead)
        k = self._qk(self.w_k, seq, positions, lead)
        k_t = k.transpose(*range(n + 1), n + 2, n + 1)
        return q.matmul(k_t).scale(self.spec.head_dim ** -0.5).softmax_lastdim().numpy()


class SwiGluMlp(Module):
    """y = W_out(silu(W_gate x) * (W_up x)), bias-free."""

    def __init__(self, spec: BlockSpec, rng, dtype=np.float32):
        self.w_gate = Linear(spec.model_dim, spec.mlp_hidden_dim, rng, bias=False, dtype=dtype)
        self.w_up = Linear(spec.model_dim, spec.mlp_hidden_dim, rng, bias=False, dtype=dtype)
        self.w_out = Linear(spec.mlp_hidden_dim, spec.model_dim, rng, bias=False, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.w_out(self.w_gate(x).silu() * self.w_up(x))


class ConditionModulation(Module):
    """Two-layer projection of the conditioning vector into n_out per-channel
    modulation vectors. The second layer is zero-initialized so every
    modulation starts at exactly zero (identity block at init)."""

    def __init__(self, model_dim, n_out, rng, dtype=np.float32):
        self.n_out = n_out
        self.proj_in = Linear(model_dim, model_dim, rng, dtype=dtype)
        self.proj_out = Linear(model_dim, n_out * model_dim, rng, zero_init=True, dtype=dtype)

    def forward(self, cond: Tensor) -> list[Tensor]:
        dim = cond.shape[-1]
        vector = cond.ndim == 1
        if vector:
            cond = cond.reshape(1, dim)
        out = self.proj_out(self.proj_in(cond).silu())
        parts = [out.narrow(-1, i * dim, dim) for i in range(self.n_out)]
        if vector:
            parts = [p.reshape(dim) for p in parts]
        return parts


def modulated_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float) -> Tensor:
    """RMS(x) * (1 + scale) + shift: the conditioned pre-norm (one fused op)."""
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    norm = x.data * inv
    gain = scale.data + 1.0
    out_data = norm * gain + shift.data
    n = x.shape[-1]

    def backward_fn():
        g = out.grad
        if x.requires_grad:
            gn = g * gain
            dot = (gn * norm).sum(axis=-1, keepdims=True)
            x._accumulate(inv * (gn - norm * (dot / n)), own=True)
        if scale.requires_grad:
            scale._accumulate(_unbroadcast(g * norm, scale.shape), own=True)
        if shift.requires_grad:
            shift._accumulate(_unbroadcast(g, shift.shape), own=True)

    out = Tensor._result(out_data, (x, scale, shift), backward_fn)
    return out


def sandwich_apply(x: Tensor, inner_out: Tensor, gate: Tensor, eps: float) -> Tensor:
    """x + gate * RMS(inner_out): the residual half of a sandwiched sublayer
    (one fused op)."""
    h = inner_out
    ms = np.mean(h.data * h.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    norm = h.data * inv
    out_data = x.data + gate.data * norm
    n = h.shape[-1]

    def backward_fn():
        g = out.grad
        if x.requires_grad:
            x._accumulate(g)
        if h.requires_grad:
            gn = g * gate.data
            dot = (gn * norm).sum(axis=-1, keepdims=True)
            h._accumulate(inv * (gn - norm * (dot / n)), own=True)
        if gate.requires_grad:
            gate._accumulate(_unbroadcast(g * norm, gate.shape), own=True)

    out = Tensor._result(out_data, (x, inner_out, gate), backward_fn)
    return out


class SandwichSublayer(Module):
    """x + gate(cond) * PostNorm(inner(ModulatedPreNorm(x, cond))).

    Both norms are RMS; the pre-norm carries the conditioning-derived
    (1+scale, shift) modulation and the post side a conditioning-derived
    gate. With modulation zero-initialized the whole layer is the identity.
    """

    def __init__(self, inner: Module, spec: BlockSpec, rng, takes_positions: bool,
                 dtype=np.float32):
        self.inner = inner
        self.modulation = ConditionModulation(spec.model_dim, 3, rng, dtype=dtype)
        self.norm_eps = spec.norm_eps
        self.takes_positions = takes_positions

    def forward(self, x: Tensor, cond: Tensor, positions=None) -> Tensor:
        scale, shift, gate = self.modulation(cond)
        if cond.ndim == x.ndim - 1:
            mod_shape = cond.shape[:-1] + (1, cond.shape[-1])
            scale, shift, gate = (m.reshape(mod_shape) for m in (scale, shift, gate))
        h = modulated_norm(x, scale, shift, self.norm_eps)
        h = self.inner(h, positions) if self.takes_positions else self.inner(h)
        return sandwich_apply(x, h, gate, self.norm_eps)


class DiTBlock(Module):
    """One transformer block: sandwiched attention then sandwiched MLP,
    with one shared two-layer projection emitting both sublayers'
    (scale, shift, gate) triples."""

    def __init__(self, spec: BlockSpec, rng, dtype=np.float32):
        self.spec = spec
        self.attn = JointSelfAttention(spec, rng, dtype=dtype)
        self.mlp = SwiGluMlp(spec, rng, dtype=dtype)
        self.modulation = ConditionModulation(spec.model_dim, 6, rng, dtype=dtype)

    def forward(self, x: Tensor, cond: Tensor, positions) -> Tensor:
        eps = self.spec.norm_eps
        mods = self.modulation(cond)
        if cond.ndim == x.ndim - 1:
            mod_shape = cond.shape[:-1] + (1, cond.shape[-1])
            mods = [m.reshape(mod_shape) for m in mods]
        a_scale, a_shift, a_gate, m_scale, m_shift, m_gate = mods
        h = self.attn(modulated_norm(x, a_scale, a_shift, eps), positions)
        x = sandwich_apply(x, h, a_gate, eps)
        h = self.mlp(modulated_norm(x, m_scale, m_shift, eps))
        return sandwich_apply(x, h, m_gate, eps)
