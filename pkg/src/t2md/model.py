"""Hybrid attention/Mamba diffusion backbone and its all-attention teacher."""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import (AdaLNModulation, ConfigError, CrossAttention, FeedForward, Linear, Module,
                 Parameter, PositionalEmbedding, SelfAttention, TimestepEmbedder, modulate,
                 patchify, unpatchify)
from .ssm import Axis, MambaMixer
from .tensor import Tensor


class BlockKind(str, enum.Enum):
    SA = "SA"
    HM = "HM"
    WM = "WM"


def build_pattern(groups: int, mambas_per_group: int) -> list[BlockKind]:
    """``groups`` repetitions of ``[SA, (HM, WM) * mambas_per_group]``."""
    if groups < 1 or mambas_per_group < 0:
        raise ConfigError(f"invalid pattern g={groups}, m={mambas_per_group}")
    unit = [BlockKind.SA] + [BlockKind.HM, BlockKind.WM] * mambas_per_group
    return unit * groups


@dataclass(frozen=True)
class ModelConfig:
    groups: int = 2
    mambas_per_group: int = 3
    dim: int = 128
    heads: int = 4
    patch: int = 2
    d_state: int = 32
    expand: int = 2
    ssm_head_dim: int = 32
    ssm_chunk: int = 16
    channels: int = 4
    latent_size: int = 16
    text_vocab: int = 16
    text_dim: int = 64
    ffn_mult: int = 4
    pe_variant: str = "standard"
    all_attention: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 4:
            raise ConfigError(f"dim {self.dim} must be divisible by 4 for 2D positions")
        if self.latent_size % self.patch:
            raise ConfigError(f"latent size {self.latent_size} not divisible by patch {self.patch}")
        if (self.expand * self.dim) % self.ssm_head_dim:
            raise ConfigError("expand*dim must be divisible by ssm_head_dim")

    @property
    def depth(self) -> int:
        return self.groups * (1 + 2 * self.mambas_per_group)

    @property
    def pattern(self) -> list[BlockKind]:
        kinds = build_pattern(self.groups, self.mambas_per_group)
        return [BlockKind.SA] * len(kinds) if self.all_attention else kinds

    @property
    def base_grid(self) -> tuple[int, int]:
        g = self.latent_size // self.patch
        return g, g

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, str]:
        return {f.name: _fmt(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> ModelConfig:
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in d:
                kwargs[f.name] = _parse(d[f.name], f.type)
        return cls(**kwargs)

    @classmethod
    def full_scale(cls) -> ModelConfig:
        """The full-size layout: 28 blocks, width 1152, state 256, expand 2, patch 2."""
        return cls(groups=4, mambas_per_group=3, dim=1152, heads=16, patch=2, d_state=256,
                   expand=2, ssm_head_dim=64, ssm_chunk=64, channels=4, latent_size=64,
                   text_vocab=32128, text_dim=4096)


def _fmt(v) -> str:
    return ("true" if v else "false") if isinstance(v, bool) else str(v)


def _parse(s: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if s not in ("true", "false"):
            raise ValueError(f"expected true/false, got {s!r}")
        return s == "true"
    if typ == "int":
        return int(s)
    if typ == "float":
        return float(s)
    return s


class Block(Module):
    """Token mixer, cross-attention and FFN, each adaLN-modulated and gated into the residual."""

    def __init__(self, kind: BlockKind, cfg: ModelConfig, rng: np.random.Generator):
        self.kind = BlockKind(kind)
        d = cfg.dim
        self.adaln = AdaLNModulation(d, 3, rng)
        if self.kind == BlockKind.SA:
            self.mixer = SelfAttention(d, cfg.heads, rng)
        else:
            axis = Axis.HEIGHT if self.kind == BlockKind.HM else Axis.WIDTH
            self.mixer = MambaMixer(d, cfg.d_state, cfg.expand, cfg.ssm_head_dim, axis, rng,
                                    chunk=cfg.ssm_chunk)
        self.cross = CrossAttention(d, cfg.text_dim, cfg.heads, rng)
        self.ffn = FeedForward(d, rng, cfg.ffn_mult)

    def forward(self, x: Tensor, c: Tensor, ctx: Tensor, grid: tuple[int, int], taps: list | None = None) -> Tensor:
        (sh1, sc1, g1), (sh2, sc2, g2), (sh3, sc3, g3) = self.adaln(c)
        h = modulate(x, sh1, sc1)
        m = self.mixer(h, grid)
        if taps is not None:
            taps.append((h, m))
        x = x + g1 * m
        x = x + g2 * self.cross(modulate(x, sh2, sc2), ctx)
        return x + g3 * self.ffn(modulate(x, sh3, sc3))


class DiffusionBackbone(Module):
    """Patchify -> +positions -> blocks -> adaLN final layer -> unpatchify; predicts noise."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        d, p, c = cfg.dim, cfg.patch, cfg.channels
        self.patch_embed = Linear(c * p * p, d, rng)
        self.t_embed = TimestepEmbedder(d, rng)
        self.text_embed = Parameter(rng.normal(0.0, 1.0, size=(cfg.text_vocab, cfg.text_dim)))
        self.blocks = [Block(kind, cfg, rng) for kind in cfg.pattern]
        self.final_adaln = AdaLNModulation(d, 1, rng, with_gate=False)
        self.head = Linear(d, c * p * p, rng, zero_init=True)
        self.positions = PositionalEmbedding(d, cfg.pe_variant, cfg.base_grid)

    @property
    def kinds(self) -> list[BlockKind]:
        return [b.kind for b in self.blocks]

    def set_position_variant(self, variant: str) -> None:
        self.cfg = self.cfg.replace(pe_variant=variant)
        self.positions = PositionalEmbedding(self.cfg.dim, variant, self.cfg.base_grid)

    def embed(self, z, t, text_tokens) -> tuple[Tensor, Tensor, Tensor, tuple[int, int]]:
        z = z if isinstance(z, Tensor) else T.tensor(np.asarray(z, dtype=T.get_default_dtype()))
        b, c, hh, ww = z.shape
        p = self.cfg.patch
        if c != self.cfg.channels:
            raise T.ShapeError(f"expected {self.cfg.channels} latent channels, got {c}")
        grid = (hh // p, ww // p)
        x = self.patch_embed(patchify(z, p))
        x = x + self.positions.table(*grid).astype(x.dtype)
        t = np.broadcast_to(np.asarray(t), (b,))
        cond = self.t_embed(t)
        ctx = T.gather_rows(self.text_embed, np.asarray(text_tokens, dtype=np.int64))
        return x, cond, ctx, grid

    def head_out(self, x: Tensor, cond: Tensor, grid: tuple[int, int]) -> Tensor:
        ((shift, scale),) = self.final_adaln(cond)
        out = self.head(modulate(x, shift, scale))
        return unpatchify(out, self.cfg.channels, grid, self.cfg.patch)

    def forward_with_taps(self, z, t, text_tokens) -> tuple[Tensor, list[tuple[Tensor, Tensor]]]:
        """Noise prediction plus, per block, (mixer input, raw mixer output)."""
        x, cond, ctx, grid = self.embed(z, t, text_tokens)
        taps: list[tuple[Tensor, Tensor]] = []
        for block in self.blocks:
            x = block(x, cond, ctx, grid, taps)
        return self.head_out(x, cond, grid), taps

    def forward(self, z, t, text_tokens) -> Tensor:
        x, cond, ctx, grid = self.embed(z, t, text_tokens)
        for block in self.blocks:
            x = block(x, cond, ctx, grid)
        return self.head_out(x, cond, grid)

    def predict(self, z, t, text_tokens) -> np.ndarray:
        with T.no_grad():
            return self.forward(z, t, text_tokens).data

    # -------------------------------------------------------- parameter groups

    def mixer_parameters(self, kinds=None) -> list[Parameter]:
        """Token-mixer parameters, optionally restricted to some block kinds."""
        out = []
        for block in self.blocks:
            if kinds is None or block.kind in kinds:
                out.extend(block.mixer.parameters())
        return out

    def mamba_parameters(self) -> list[Parameter]:
        return self.mixer_parameters({BlockKind.HM, BlockKind.WM})

    def non_mixer_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.state_dict().items() if ".mixer." not in k}


def build_model(cfg: ModelConfig) -> DiffusionBackbone:
    return DiffusionBackbone(cfg)


def build_teacher(cfg: ModelConfig) -> DiffusionBackbone:
    """All-attention model of the same depth; names align with the student outside mixers."""
    return DiffusionBackbone(cfg.replace(all_attention=True))


def copy_from_teacher(student: DiffusionBackbone, teacher: DiffusionBackbone, include_sa_mixers: bool = True) -> None:
    """Copy every non-mixer weight, and the attention mixers at SA positions, into ``student``."""
    tstate = teacher.state_dict()
    own = student.state_dict()
    update = {}
    for name in own:
        if ".mixer." not in name:
            update[name] = tstate[name]
    if include_sa_mixers:
        for i, block in enumerate(student.blocks):
            if block.kind == BlockKind.SA:
                prefix = f"blocks.{i}.mixer."
                update.update({k: v for k, v in tstate.items() if k.startswith(prefix)})
    student.load_state_dict(update, strict=False)


# ---------------------------------------------------------------- persistence

def save_model(path, model: DiffusionBackbone, meta: dict[str, str] | None = None) -> str:
    """Write weights plus the config (as ``config.*`` keys) and extra metadata."""
    from . import checkpoint

    full = {f"config.{k}": v for k, v in model.cfg.to_dict().items()}
    full.update({k: str(v) for k, v in (meta or {}).items()})
    return checkpoint.save(path, model.state_dict(), full)


def load_model(path, dtype=None) -> tuple[DiffusionBackbone, dict[str, str]]:
    from . import checkpoint

    tensors, meta = checkpoint.load(path)
    cfg = ModelConfig.from_dict({k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")})
    with T.precision(dtype or T.get_default_dtype()):
        model = DiffusionBackbone(cfg)
    model.load_state_dict(tensors)
    return model, meta
