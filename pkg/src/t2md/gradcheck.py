"""Central finite-difference gradient checks and a catalogue of checkable cases."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _coords(size: int, limit: int | None, rng: np.random.Generator) -> np.ndarray:
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, size=limit, replace=False))


def gradient_error(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], params: Sequence[Tensor] = (),
                   max_coords: int | None = None, seed: int = 0, h: float = 1e-6) -> float:
    """Relative error between backprop and central differences, in 64-bit.

    ``fn`` takes tensors built from ``inputs`` and may also read ``params``
    (module parameters, perturbed in place). With ``max_coords`` only a
    random subset of coordinates per array is differenced.
    """
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        arrays = [np.array(v, dtype=np.float64) for v in inputs]
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        ts = [T.tensor(v, requires_grad=True) for v in arrays]
        T.backward(fn(*ts))
        analytic = [t.grad for t in ts] + [p.grad for p in params]
        targets = arrays + [p.data for p in params]
        a_parts, n_parts = [], []
        for arr, grad in zip(targets, analytic):
            grad = np.zeros_like(arr) if grad is None else grad
            flat = arr.reshape(-1)
            idx = _coords(flat.size, max_coords, rng)
            num = np.empty(len(idx))
            for k, j in enumerate(idx):
                orig = flat[j]
                flat[j] = orig + h
                up = fn(*[T.tensor(v) for v in arrays]).item()
                flat[j] = orig - h
                down = fn(*[T.tensor(v) for v in arrays]).item()
                flat[j] = orig
                num[k] = (up - down) / (2 * h)
            a_parts.append(grad.reshape(-1)[idx])
            n_parts.append(num)
        for p in params:
            p.grad = None
        return relative_error(a_parts, n_parts)


def relative_error(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    a = np.concatenate([np.ravel(x) for x in a])
    b = np.concatenate([np.ravel(x) for x in b])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-10))


def projected(fn: Callable[..., Tensor], seed: int) -> Callable[..., Tensor]:
    """Reduce a tensor-valued function to a scalar with a fixed random projection."""
    cache: dict = {}

    def scalar(*args):
        out = fn(*args)
        if out.shape not in cache:
            cache[out.shape] = np.random.default_rng(seed).standard_normal(out.shape)
        return T.sum(out * cache[out.shape])
    return scalar


@dataclass(frozen=True)
class GradCase:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]


def _n(rng, *shape):
    return rng.standard_normal(shape)


def _pos(rng, *shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _unary(name, op, gen=_n):
    return GradCase(name, lambda rng: (op, [gen(rng, 2, 3)]))


def _binary(name, op, gen_b=_n):
    def build(rng):
        shapes = [((2, 3), (2, 3)), ((2, 3), (3,)), ((2, 1), (1, 3))][rng.integers(3)]
        return op, [_n(rng, *shapes[0]), gen_b(rng, *shapes[1])]
    return GradCase(name, build)


def _matmul(rng):
    shapes = [((3, 4), (4, 2)), ((2, 3, 4), (4, 2)), ((2, 1, 3, 4), (3, 4, 2))][rng.integers(3)]
    return T.matmul, [_n(rng, *shapes[0]), _n(rng, *shapes[1])]


def _where(rng):
    cond = rng.random((2, 3)) < 0.5
    return (lambda a, b: T.where(cond, a, b)), [_n(rng, 2, 3), _n(rng, 2, 3)]


def _layer_norm(rng):
    return (lambda x, w, b: T.layer_norm(x, w, b)), [_n(rng, 2, 5), _n(rng, 5), _n(rng, 5)]


def _getitem(rng):
    return (lambda x: x[:, 1:3]), [_n(rng, 2, 4)]


def _take(rng):
    idx = rng.integers(0, 4, size=5)
    return (lambda x: T.take(x, idx, axis=1)), [_n(rng, 2, 4)]


def _gather(rng):
    idx = rng.integers(0, 4, size=(2, 3))
    return (lambda x: T.gather_rows(x, idx)), [_n(rng, 4, 3)]


def _einsum(rng):
    return (lambda a, b: T.einsum("bij,bjk->bik", a, b)), [_n(rng, 2, 3, 4), _n(rng, 2, 4, 2)]


def _pad(rng):
    return (lambda x: T.pad_axis(x, 1, 2, axis=1)), [_n(rng, 2, 3)]


OP_CASES: list[GradCase] = [
    _binary("add", T.add), _binary("sub", T.sub), _binary("mul", T.mul), _binary("div", T.div, _pos),
    _unary("neg", T.neg), _unary("exp", T.exp), _unary("expm1", T.expm1), _unary("log", T.log, _pos),
    _unary("sqrt", T.sqrt, _pos), _unary("square", T.square), _unary("sigmoid", T.sigmoid),
    _unary("softplus", T.softplus), _unary("silu", T.silu), _unary("gelu", T.gelu),
    _unary("softmax", T.softmax), _unary("sum", lambda x: T.sum(x, axis=1)),
    _unary("mean", lambda x: T.mean(x, axis=0, keepdims=True)),
    _unary("reshape", lambda x: T.reshape(x, (3, 2))), _unary("transpose", lambda x: T.transpose(x, 0, 1)),
    _unary("permute", lambda x: T.permute(T.reshape(x, (1, 2, 3)), (2, 0, 1))),
    _unary("flip", lambda x: T.flip(x, 1)), _unary("cumsum", lambda x: T.cumsum(x, axis=1)),
    GradCase("concat", lambda rng: (lambda a, b: T.concat([a, b], axis=1), [_n(rng, 2, 3), _n(rng, 2, 2)])),
    GradCase("stack", lambda rng: (lambda a, b: T.stack([a, b], axis=1), [_n(rng, 2, 3), _n(rng, 2, 3)])),
    GradCase("matmul", _matmul), GradCase("einsum", _einsum), GradCase("where", _where),
    GradCase("layer_norm", _layer_norm), GradCase("getitem", _getitem), GradCase("take", _take),
    GradCase("gather_rows", _gather), GradCase("pad_axis", _pad),
]


# ---------------------------------------------------------------- layers and losses

@dataclass(frozen=True)
class LayerCase:
    """``build(rng) -> (fn, inputs, params)``; params are checked on a coordinate subset."""

    name: str
    build: Callable


def _randomized(module, rng, scale: float = 0.5):
    # zero-initialized gates and heads would hide most of the graph
    for p in module.parameters():
        p.data = rng.standard_normal(p.shape) * scale
    return module


def tiny_model_config():
    from .model import ModelConfig
    return ModelConfig(groups=1, mambas_per_group=1, dim=8, heads=2, patch=2, d_state=4, expand=2, ssm_head_dim=4,
                       ssm_chunk=2, channels=4, latent_size=4, text_vocab=10, text_dim=6)


def _self_attention(rng):
    from .nn import SelfAttention
    m = _randomized(SelfAttention(8, 2, rng), rng)
    return (lambda x: m(x)), [_n(rng, 2, 3, 8)], m.parameters()


def _cross_attention(rng):
    from .nn import CrossAttention
    m = _randomized(CrossAttention(8, 6, 2, rng), rng)
    return (lambda x, c: m(x, c)), [_n(rng, 2, 3, 8), _n(rng, 2, 2, 6)], m.parameters()


def _mamba(rng):
    from .ssm import Axis, MambaMixer
    axis = [Axis.HEIGHT, Axis.WIDTH][rng.integers(2)]
    chunk = int([1, 2, 4][rng.integers(3)])
    m = MambaMixer(4, 2, 2, 4, axis, rng, chunk=chunk)
    m.in_proj.weight.data = rng.standard_normal(m.in_proj.weight.shape) * 0.5
    return (lambda x: m(x, (2, 3))), [_n(rng, 1, 6, 4)], m.parameters()


def _block(rng):
    from .model import Block, BlockKind
    kind = [BlockKind.SA, BlockKind.HM, BlockKind.WM][rng.integers(3)]
    b = Block(kind, tiny_model_config(), rng)
    _randomized(b.adaln, rng, 0.3)
    return (lambda x, c, ctx: b(x, c, ctx, (2, 2))), [_n(rng, 1, 4, 8), _n(rng, 1, 8), _n(rng, 1, 2, 6)], b.parameters()


def _mse(rng):
    from .diffusion import mse_loss
    return mse_loss, [_n(rng, 2, 4, 2, 2), _n(rng, 2, 4, 2, 2)], []


def _distill(lam1, lam2):
    def build(rng):
        from .distill import distill_loss
        eps, eps_t = _n(rng, 2, 4, 2, 2), _n(rng, 2, 4, 2, 2)
        mix_t = [_n(rng, 1, 4, 8) for _ in range(2)]

        def fn(eps_s, ms0, ms1):
            # teacher quantities are constants: no gradient flows into them
            return distill_loss(eps, eps_s, eps_t, [ms0, ms1], mix_t, lam1, lam2)[0]
        return fn, [_n(rng, 2, 4, 2, 2), _n(rng, 1, 4, 8), _n(rng, 1, 4, 8)], []
    return build


def _forcing(rng):
    from .distill import forcing_loss
    from .model import build_model, build_teacher
    cfg = tiny_model_config()
    with T.precision(np.float64):
        teacher = _randomized(build_teacher(cfg.replace(init_seed=int(rng.integers(1 << 30)))), rng, 0.3)
        student = build_model(cfg.replace(init_seed=int(rng.integers(1 << 30))))
        with T.no_grad():
            _, taps = teacher.forward_with_taps(_n(rng, 1, 4, 4, 4), np.array([5]), np.array([[1, 2, 3]]))
    mamba = student.mamba_parameters()
    return (lambda: forcing_loss(taps, student, (2, 2))[0]), [], mamba


LAYER_CASES: list[LayerCase] = [
    LayerCase("self_attention", _self_attention), LayerCase("cross_attention", _cross_attention),
    LayerCase("mamba_mixer", _mamba), LayerCase("adaln_block", _block),
    LayerCase("loss_mse", _mse), LayerCase("loss_pseudo", _distill(1.0, 0.0)),
    LayerCase("loss_mixer", _distill(0.0, 1.0)), LayerCase("loss_distill", _distill(0.5, 0.2)),
    LayerCase("loss_forcing", _forcing),
]


def run_case(case, seed: int, max_coords: int | None = 24) -> float:
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        if isinstance(case, GradCase):
            fn, inputs = case.build(rng)
            return gradient_error(projected(fn, seed), inputs, seed=seed)
        fn, inputs, params = case.build(rng)
        scalar = fn if case.name.startswith("loss") else projected(fn, seed)
        return gradient_error(scalar, inputs, params, max_coords=max_coords, seed=seed)
