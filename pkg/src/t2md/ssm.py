"""Mamba-2 token mixer: discretization, scans and bidirectional 2D scanning.

Scan operands use the layout

    x  (batch, L, heads, head_dim)   inputs
    dt (batch, L, heads)             positive step sizes
    A  (heads,)                      negative per-head decay rates
    B  (batch, L, state)             input maps (shared across heads)
    C  (batch, L, state)             output maps

Discretization is zero-order hold with a scalar-times-identity A:
``Abar = exp(dt*A)`` and ``Bbar = (exp(dt*A) - 1)/A * B`` (``dt*B`` as A -> 0),
followed by ``h_t = Abar_t h_{t-1} + Bbar_t x_t`` and ``y_t = C_t h_t``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module, Parameter
from .tensor import Tensor


def discretize(A: float, B, dt: float) -> tuple[float, np.ndarray]:
    """Zero-order-hold discretization of a scalar decay ``A`` and input map ``B``."""
    if dt <= 0:
        raise ValueError(f"step size must be positive, got {dt}")
    B = np.asarray(B, dtype=np.float64)
    la = dt * A
    a_bar = math.exp(la)
    coef = dt if A == 0 else math.expm1(la) / A
    return a_bar, coef * B


def _normalize(x, dt, A, B, C):
    x, dt, A, B, C = (v if isinstance(v, Tensor) else T.tensor(v) for v in (x, dt, A, B, C))
    if x.ndim == 2:  # single sequence, single head: (L, P)
        x = T.reshape(x, (1, x.shape[0], 1, x.shape[1]))
        dt = T.reshape(dt, (1, -1, 1))
        A = T.reshape(A, (1,))
        B = T.reshape(B, (1,) + B.shape)
        C = T.reshape(C, (1,) + C.shape)
        return x, dt, A, B, C, True
    if x.ndim != 4:
        raise T.ShapeError(f"scan input must be (L, P) or (B, L, H, P), got {x.shape}")
    b, L, h, _ = x.shape
    if dt.shape != (b, L, h) or A.shape != (h,) or B.shape[:2] != (b, L) or C.shape != B.shape:
        raise T.ShapeError(f"scan operand shapes disagree: x={x.shape} dt={dt.shape} A={A.shape} "
                           f"B={B.shape} C={C.shape}")
    return x, dt, A, B, C, False


def _discretized_inputs(x: Tensor, dt: Tensor, A: Tensor) -> tuple[Tensor, Tensor]:
    """Return (log decay, Bbar-scaled input) with Bbar's B factored out."""
    la = dt * A
    a = A.data
    zero = a == 0
    if zero.any():
        safe = T.where(zero, 1.0, A)
        coef = T.where(zero, dt, T.expm1(la) / safe)
    else:
        coef = T.expm1(la) / A
    u = x * T.reshape(coef, coef.shape + (1,))
    return la, u


def _recurrence(u: Tensor, la: Tensor, B: Tensor, C: Tensor) -> Tensor:
    b, L, h, p = u.shape
    n = B.shape[-1]
    state = T.zeros((b, h, p, n))
    ys = []
    for t in range(L):
        decay = T.reshape(T.exp(la[:, t]), (b, h, 1, 1))
        inject = T.reshape(u[:, t], (b, h, p, 1)) * T.reshape(B[:, t], (b, 1, 1, n))
        state = state * decay + inject
        ys.append(T.reshape(T.matmul(state, T.reshape(C[:, t], (b, 1, n, 1))), (b, h, p)))
    return T.stack(ys, axis=1)


def scan_sequential(x, dt, A, B, C) -> Tensor:
    """Step-by-step recurrence; the reference every other scan is checked against."""
    x, dt, A, B, C, single = _normalize(x, dt, A, B, C)
    la, u = _discretized_inputs(x, dt, A)
    y = _recurrence(u, la, B, C)
    return T.reshape(y, (y.shape[1], y.shape[3])) if single else y


def _ssd_chunks(u: Tensor, la: Tensor, B: Tensor, C: Tensor, q: int) -> Tensor:
    b, L, h, p = u.shape
    n = B.shape[-1]
    pad = (-L) % q
    if pad:
        u, la, B, C = (T.pad_axis(v, 0, pad, axis=1) for v in (u, la, B, C))
    nc = (L + pad) // q
    u = T.permute(T.reshape(u, (b, nc, q, h, p)), (0, 1, 3, 2, 4))   # (b, c, h, q, p)
    B = T.reshape(B, (b, nc, 1, q, n))
    C = T.reshape(C, (b, nc, 1, q, n))
    la = T.transpose(T.reshape(la, (b, nc, q, h)), 2, 3)              # (b, c, h, q)

    # seg[i, j] = sum_{j < k <= i} la_k via a masked cumsum (no cancellation)
    strict = np.tril(np.ones((q, q), dtype=bool), -1)
    tril = np.tril(np.ones((q, q), dtype=bool))
    rep = T.reshape(la, (b, nc, h, q, 1)) * np.ones((1, q), dtype=la.dtype)   # rep[k, j] = la_k
    seg = T.cumsum(T.where(strict, rep, 0.0), axis=3)
    decay = T.exp(T.where(tril, seg, -np.inf))                        # (b, c, h, i, j)

    # intra-chunk: y_i = sum_{j<=i} decay[i, j] (C_i . B_j) u_j
    cb = T.matmul(C, T.transpose(B, 3, 4))                            # (b, c, 1, i, j)
    y = T.matmul(decay * cb, u)                                       # (b, c, h, i, p)

    # chunk-local end states and whole-chunk decays
    to_end = T.reshape(decay[:, :, :, q - 1, :], (b, nc, h, q, 1))
    local = T.matmul(T.transpose(u * to_end, 3, 4), B)                 # (b, c, h, p, n)
    cs = T.cumsum(la, axis=3)
    chunk_decay = T.exp(cs[:, :, :, q - 1])                           # (b, c, h)

    # inter-chunk: carry the state across chunk boundaries
    state = T.zeros((b, h, p, n))
    starts = []
    for c in range(nc):
        starts.append(state)
        state = state * T.reshape(chunk_decay[:, c], (b, h, 1, 1)) + local[:, c]
    starts = T.stack(starts, axis=1)                                  # (b, c, h, p, n)
    carry = T.matmul(C, T.transpose(starts, 3, 4))                    # (b, c, h, i, p)
    y = y + carry * T.reshape(T.exp(cs), (b, nc, h, q, 1))
    y = T.reshape(T.permute(y, (0, 1, 3, 2, 4)), (b, nc * q, h, p))
    return y[:, :L] if pad else y


def scan_chunked(x, dt, A, B, C, chunk: int = 16) -> Tensor:
    """State-space-duality scan: dense intra-chunk matmuls plus a chunk-level recurrence.

    ``chunk=1`` has no intra-chunk work and is evaluated as the plain recurrence.
    """
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    x, dt, A, B, C, single = _normalize(x, dt, A, B, C)
    la, u = _discretized_inputs(x, dt, A)
    y = _recurrence(u, la, B, C) if chunk == 1 else _ssd_chunks(u, la, B, C, chunk)
    return T.reshape(y, (y.shape[1], y.shape[3])) if single else y


# ---------------------------------------------------------------- scan orders

class Axis(str, enum.Enum):
    HEIGHT = "height"
    WIDTH = "width"


@dataclass(frozen=True)
class ScanOrder:
    """Linearization of an (h, w) token grid.

    Width-first is the row-major raster (the canonical token order);
    height-first is column-major.
    """

    axis: Axis
    reverse: bool = False

    def permutation(self, h: int, w: int) -> np.ndarray:
        idx = np.arange(h * w).reshape(h, w)
        perm = (idx if self.axis == Axis.WIDTH else idx.T).reshape(-1)
        return perm[::-1].copy() if self.reverse else perm

    def inverse(self, h: int, w: int) -> np.ndarray:
        return np.argsort(self.permutation(h, w))


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class MambaMixer(Module):
    """Bidirectional Mamba-2 token mixer over a 2D token grid.

    Tokens are reordered along the layer's axis, scanned forward and in
    reverse with the same SSM weights, each direction is gated by
    ``silu(z)``, and the two results are concatenated and fused back to the
    model width. Projections carry no bias.
    """

    def __init__(self, dim: int, d_state: int, expand: int, head_dim: int, axis: Axis | str,
                 rng: np.random.Generator, chunk: int = 16,
                 dt_range: tuple[float, float] = (0.01, 0.1),
                 decay_range: tuple[float, float] = (0.9, 0.999)):
        inner = expand * dim
        if inner % head_dim:
            raise ValueError(f"inner width {inner} is not divisible by head_dim {head_dim}")
        self.axis = Axis(axis)
        self.dim, self.inner, self.d_state = dim, inner, d_state
        self.head_dim = head_dim
        self.heads = inner // head_dim
        self.chunk = chunk
        self.in_proj = Linear(dim, 2 * inner + 2 * d_state + self.heads, rng, bias=False)
        dt0 = np.exp(np.linspace(np.log(dt_range[0]), np.log(dt_range[1]), self.heads))
        a_bar0 = rng.uniform(*decay_range, size=self.heads)
        self.dt_bias = Parameter(_inv_softplus(dt0))
        self.A_log = Parameter(np.log(-np.log(a_bar0) / dt0))
        self.fuse = Linear(2 * inner, dim, rng, bias=False)

    def decay_rates(self) -> Tensor:
        return -T.exp(self.A_log)

    def _project(self, x: Tensor):
        b, L, _ = x.shape
        i, n = self.inner, self.d_state
        proj = self.in_proj(x)
        z = proj[:, :, :i]
        xs = T.reshape(proj[:, :, i:2 * i], (b, L, self.heads, self.head_dim))
        Bm = proj[:, :, 2 * i:2 * i + n]
        Cm = proj[:, :, 2 * i + n:2 * i + 2 * n]
        dt = T.softplus(proj[:, :, 2 * i + 2 * n:] + self.dt_bias)
        return z, xs, dt, Bm, Cm

    def scan_direction(self, xs: Tensor, dt: Tensor, Bm: Tensor, Cm: Tensor, reverse: bool) -> Tensor:
        A = self.decay_rates()
        if not reverse:
            return scan_chunked(xs, dt, A, Bm, Cm, self.chunk)
        y = scan_chunked(T.flip(xs, 1), T.flip(dt, 1), A, T.flip(Bm, 1), T.flip(Cm, 1), self.chunk)
        return T.flip(y, 1)

    def forward(self, x: Tensor, grid: tuple[int, int]) -> Tensor:
        b, L, d = x.shape
        h, w = grid
        if L != h * w:
            raise T.ShapeError(f"token count {L} does not match grid {h}x{w}")
        order = ScanOrder(self.axis)
        if self.axis == Axis.HEIGHT:
            x = T.take(x, order.permutation(h, w), axis=1)
        z, xs, dt, Bm, Cm = self._project(x)
        gate = T.silu(z)
        y_fwd = T.reshape(self.scan_direction(xs, dt, Bm, Cm, reverse=False), (b, L, self.inner)) * gate
        y_rev = T.reshape(self.scan_direction(xs, dt, Bm, Cm, reverse=True), (b, L, self.inner)) * gate
        out = self.fuse(T.concat([y_fwd, y_rev], axis=-1))
        if self.axis == Axis.HEIGHT:
            out = T.take(out, order.inverse(h, w), axis=1)
        return out
