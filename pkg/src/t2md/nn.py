"""Transformer-side layers: attention, feed-forward, adaLN, patching, positions."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class UnsupportedResolutionError(ValueError):
    """Raised when a fixed positional table is asked for a grid it was not built for."""


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Minimal parameter container; parameters and sub-modules are plain attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, value in state.items():
            if name not in own:
                continue
            p = own[name]
            if tuple(value.shape) != p.shape:
                raise T.ShapeError(f"{name}: expected {p.shape}, got {tuple(value.shape)}")
            p.data = np.array(value, dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name: str):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """``y = x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero_init: bool = False):
        bound = math.sqrt(6.0 / (d_in + d_out))
        w = np.zeros((d_in, d_out)) if zero_init else _uniform(rng, (d_in, d_out), bound)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        y = T.matmul(T.reshape(x, (-1, x.shape[-1])), self.weight)
        if self.bias is not None:
            y = y + self.bias
        return T.reshape(y, lead + (y.shape[-1],))


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True):
        self.weight = Parameter(np.ones(dim)) if affine else None
        self.bias = Parameter(np.zeros(dim)) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias)


# ---------------------------------------------------------------- attention

def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, 1, 2), (b, n, h * dh))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, query_block: int | None = None) -> Tensor:
    """softmax(q kᵀ / sqrt(d_head)) v over (B, heads, L, d_head) operands.

    ``query_block`` bounds score-matrix memory by processing query rows in
    blocks; the result is identical to the unblocked evaluation.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    kt = T.transpose(k, -1, -2)
    if query_block is None or q.shape[2] <= query_block:
        return T.matmul(T.softmax(T.matmul(q, kt) * scale), v)
    parts = []
    for start in range(0, q.shape[2], query_block):
        qb = q[:, :, start:start + query_block]
        parts.append(T.matmul(T.softmax(T.matmul(qb, kt) * scale), v))
    return T.concat(parts, axis=2)


class SelfAttention(Module):
    """Full (non-causal) multi-head self-attention without biases."""

    query_block: int | None = None

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"dim {dim} is not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(dim, dim, rng, bias=False)
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng, bias=False)
        self.o = Linear(dim, dim, rng, bias=False)

    def forward(self, x: Tensor, grid: tuple[int, int] | None = None) -> Tensor:
        h = self.heads
        block = None if T.is_grad_enabled() else self.query_block
        out = scaled_dot_attention(_split_heads(self.q(x), h), _split_heads(self.k(x), h),
                                   _split_heads(self.v(x), h), query_block=block)
        return self.o(_merge_heads(out))


class CrossAttention(Module):
    """Queries from the token stream, keys/values from a context sequence."""

    def __init__(self, dim: int, ctx_dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"dim {dim} is not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(dim, dim, rng, bias=False)
        self.k = Linear(ctx_dim, dim, rng, bias=False)
        self.v = Linear(ctx_dim, dim, rng, bias=False)
        self.o = Linear(dim, dim, rng, bias=False)

    def forward(self, x: Tensor, ctx: Tensor) -> Tensor:
        if ctx.shape[1] < 1:
            raise ValueError("cross-attention context is empty")
        h = self.heads
        out = scaled_dot_attention(_split_heads(self.q(x), h), _split_heads(self.k(ctx), h),
                                   _split_heads(self.v(ctx), h))
        return self.o(_merge_heads(out))


class FeedForward(Module):
    def __init__(self, dim: int, rng: np.random.Generator, mult: int = 4):
        self.fc1 = Linear(dim, mult * dim, rng)
        self.fc2 = Linear(mult * dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


# ---------------------------------------------------------------- conditioning

def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """``(1 + scale) * LN(x) + shift`` with a non-affine layer norm."""
    return T.layer_norm(x) * (scale + 1.0) + shift


class AdaLNModulation(Module):
    """SiLU -> Linear emitting ``groups`` (shift, scale, gate) triplets.

    The projection starts at zero, so every gate is zero at init and each
    modulated sub-layer leaves the residual stream untouched.
    """

    def __init__(self, dim: int, groups: int, rng: np.random.Generator, with_gate: bool = True):
        self.groups = groups
        self.width = 3 if with_gate else 2
        self.proj = Linear(dim, self.width * groups * dim, rng, zero_init=True)

    def forward(self, c: Tensor) -> list[tuple[Tensor, ...]]:
        b, d = c.shape
        m = T.reshape(self.proj(T.silu(c)), (b, 1, self.width * self.groups * d))
        out = []
        for g in range(self.groups):
            base = g * self.width
            out.append(tuple(m[:, :, (base + i) * d:(base + i + 1) * d] for i in range(self.width)))
        return out


def adaln_modulate(x: Tensor, shift: Tensor, scale: Tensor, gate: Tensor) -> tuple[Tensor, Tensor]:
    return modulate(x, shift, scale), gate


def timestep_frequencies(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


class TimestepEmbedder(Module):
    def __init__(self, dim: int, rng: np.random.Generator, freq_dim: int = 64):
        self.freq_dim = freq_dim
        self.fc1 = Linear(freq_dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def forward(self, t) -> Tensor:
        f = T.tensor(timestep_frequencies(t, self.freq_dim))
        return self.fc2(T.silu(self.fc1(f)))


# ---------------------------------------------------------------- positions

POSITION_VARIANTS = ("standard", "centered")


def grid_coordinates(h: int, w: int, variant: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-token (row, col) coordinates in raster order.

    ``standard`` uses integer indices from the top-left corner. ``centered``
    measures offsets from the token at (h//2, w//2) in units of the long edge,
    so coordinates lie in [-0.5, 0.5) for every grid size.
    """
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    if variant == "standard":
        return rows.reshape(-1), cols.reshape(-1)
    if variant == "centered":
        long_edge = max(h, w)
        return ((rows - h // 2) / long_edge).reshape(-1), ((cols - w // 2) / long_edge).reshape(-1)
    raise ConfigError(f"unknown positional variant {variant!r}")


def _sincos_1d(pos: np.ndarray, dim: int) -> np.ndarray:
    k = dim // 2
    omega = 1.0 / 10000.0 ** (np.arange(k) / k)
    args = pos[:, None] * omega[None]
    out = np.empty((pos.size, dim))
    out[:, 0::2] = np.sin(args)
    out[:, 1::2] = np.cos(args)
    return out


def positional_encoding(h: int, w: int, dim: int, variant: str = "standard", scale: float = 1.0) -> np.ndarray:
    """2D sin-cos table of shape (h*w, dim): first half encodes rows, second columns.

    Channels interleave sin/cos per frequency. ``scale`` multiplies the
    coordinates before embedding (the centered variant uses the training
    grid's long edge so that base-resolution offsets stay integral).
    """
    if dim % 4:
        raise ConfigError(f"positional dim {dim} must be divisible by 4")
    r, c = grid_coordinates(h, w, variant)
    return np.concatenate([_sincos_1d(r * scale, dim // 2), _sincos_1d(c * scale, dim // 2)], axis=1)


class PositionalEmbedding:
    """Fixed (non-learned) 2D positions for a model.

    The standard table exists only for the training grid; asking it for any
    other grid raises :class:`UnsupportedResolutionError`.
    """

    def __init__(self, dim: int, variant: str, base_grid: tuple[int, int]):
        if variant not in POSITION_VARIANTS:
            raise ConfigError(f"unknown positional variant {variant!r}")
        self.dim = dim
        self.variant = variant
        self.base_grid = tuple(base_grid)
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def table(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._cache:
            if self.variant == "standard":
                if key != self.base_grid:
                    raise UnsupportedResolutionError(
                        f"unsupported resolution: standard positional table covers {self.base_grid[0]}x"
                        f"{self.base_grid[1]} tokens, got {h}x{w}; adapt the model to centered positions first")
                self._cache[key] = positional_encoding(h, w, self.dim, "standard")
            else:
                self._cache[key] = positional_encoding(h, w, self.dim, "centered", scale=max(self.base_grid))
        return self._cache[key]


# ---------------------------------------------------------------- patches

def patchify(latent: Tensor, p: int) -> Tensor:
    """(B, C, H, W) -> (B, H/p * W/p, C*p*p); tokens in raster order, features (C, p, p)."""
    latent = latent if isinstance(latent, Tensor) else T.tensor(latent)
    b, c, h, w = latent.shape
    if h % p or w % p:
        raise T.ShapeError(f"latent {h}x{w} is not divisible by patch size {p}")
    x = T.reshape(latent, (b, c, h // p, p, w // p, p))
    x = T.permute(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (b, (h // p) * (w // p), c * p * p))


def unpatchify(tokens: Tensor, channels: int, grid: tuple[int, int], p: int) -> Tensor:
    b, n, f = tokens.shape
    gh, gw = grid
    if n != gh * gw or f != channels * p * p:
        raise T.ShapeError(f"tokens {tokens.shape} do not match grid {grid}, C={channels}, p={p}")
    x = T.reshape(tokens, (b, gh, gw, channels, p, p))
    x = T.permute(x, (0, 3, 1, 4, 2, 5))
    return T.reshape(x, (b, channels, gh * p, gw * p))
