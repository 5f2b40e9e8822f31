"""Latency scaling of hybrid vs all-attention backbones, and of single token mixers."""
from __future__ import annotations

import contextlib
import csv
import io
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import ModelConfig, build_model
from .nn import ConfigError, SelfAttention
from .ssm import Axis, MambaMixer

BENCH_COLUMNS = ("kind", "L", "d", "depth", "reps", "mean_ms", "std_ms", "throughput_sps")
PROBE_COLUMNS = ("layer_kind", "L", "d", "mean_ms", "std_ms", "reps")
UNSTABLE_CV = 0.25


@dataclass(frozen=True)
class BenchSpec:
    """Hybrid and all-attention configs share depth and width; ``ladder`` is in tokens."""

    hybrid: ModelConfig
    ladder: tuple[int, ...] = (256, 1024, 4096, 16384)
    reps: int = 5
    warmup: int = 1
    batch: int = 1
    min_rep_seconds: float = 0.02
    query_block: int = 1024

    def __post_init__(self):
        if not self.ladder:
            raise ConfigError("empty token ladder")
        if any(b <= a for a, b in zip(self.ladder, self.ladder[1:])):
            raise ConfigError(f"ladder must be strictly increasing, got {self.ladder}")
        if self.reps < 5:
            raise ConfigError(f"need at least 5 repetitions, got {self.reps}")
        for L in self.ladder:
            grid_side(L)

    @property
    def teacher(self) -> ModelConfig:
        return self.hybrid.replace(all_attention=True)


@dataclass(frozen=True)
class BenchRow:
    kind: str
    L: int
    d: int
    depth: int
    reps: int
    mean_ms: float
    std_ms: float
    throughput_sps: float

    @property
    def unstable(self) -> bool:
        return self.std_ms / self.mean_ms >= UNSTABLE_CV if self.mean_ms > 0 else True


def grid_side(L: int) -> int:
    side = math.isqrt(L)
    if side * side != L:
        raise ConfigError(f"token count {L} is not a square grid")
    return side


def thread_limit() -> int | None:
    """Thread cap from T2MD_THREADS; ``None`` when unset."""
    raw = os.environ.get("T2MD_THREADS")
    if raw is None or raw == "":
        return None
    n = int(raw)
    if n < 1:
        raise ConfigError(f"T2MD_THREADS must be >= 1, got {raw!r}")
    return n


@contextlib.contextmanager
def limited_threads(n: int | None):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield


def time_call(fn: Callable[[], object], reps: int, warmup: int, min_rep_seconds: float) -> tuple[float, float, int]:
    """Per-call (median-of-means seconds, std seconds, calls per rep).

    When one call is too short to time reliably, each repetition loops the
    call enough times to last ``min_rep_seconds``.
    """
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter()
    fn()
    single = time.perf_counter() - t0
    resolution = time.get_clock_info("perf_counter").resolution
    floor = max(min_rep_seconds, 1000 * resolution)
    inner = 1 if single >= floor else int(math.ceil(floor / max(single, resolution)))
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) / inner)
    samples = np.array(samples)
    groups = np.array_split(samples, min(3, len(samples)))
    center = float(np.median([g.mean() for g in groups]))
    return center, float(samples.std(ddof=1)), inner


def _model_input(cfg: ModelConfig, L: int, batch: int, rng: np.random.Generator):
    side = grid_side(L) * cfg.patch
    z = rng.standard_normal((batch, cfg.channels, side, side)).astype(T.get_default_dtype())
    t = np.full(batch, 1)
    tokens = rng.integers(0, cfg.text_vocab, size=(batch, 3))
    return z, t, tokens


def run_bench(spec: BenchSpec, threads: int | None = 1, log: Callable[[str], None] | None = None) -> list[BenchRow]:
    """Time one noise prediction per ladder point for both backbones (inference mode)."""
    rows = []
    rng = np.random.default_rng(0)
    models = {}
    for kind, cfg in (("hybrid", spec.hybrid.replace(pe_variant="centered")),
                      ("all_sa", spec.teacher.replace(pe_variant="centered"))):
        models[kind] = (cfg, build_model(cfg))
    saved_block = SelfAttention.query_block
    SelfAttention.query_block = spec.query_block
    try:
        with limited_threads(threads), T.no_grad():
            for L in spec.ladder:
                for kind, (cfg, model) in models.items():
                    z, t, tok = _model_input(cfg, L, spec.batch, rng)
                    mean, std, inner = time_call(lambda: model.forward(z, t, tok), spec.reps, spec.warmup,
                                                 spec.min_rep_seconds)
                    row = BenchRow(kind, L, cfg.dim, cfg.depth, spec.reps * inner, mean * 1e3, std * 1e3,
                                   spec.batch / mean)
                    rows.append(row)
                    if log:
                        log(f"{kind:>7} L={L:>6} {row.mean_ms:10.2f} ms")
    finally:
        SelfAttention.query_block = saved_block
    return rows


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


@dataclass
class BenchSummary:
    slopes: dict[str, float] = field(default_factory=dict)
    ratio_at_top: float | None = None
    crossover_L: float | None = None
    flags: list[str] = field(default_factory=list)
    text: str = ""
    csv: str = ""


def rows_to_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        w.writerow([r.kind, r.L, r.d, r.depth, r.reps, f"{r.mean_ms:.4f}", f"{r.std_ms:.4f}",
                    f"{r.throughput_sps:.4f}"])
    return buf.getvalue()


def _crossover(ls: np.ndarray, fast: np.ndarray, slow: np.ndarray) -> float | None:
    """Smallest L (log-interpolated) where ``fast`` drops below ``slow``."""
    diff = np.log(fast) - np.log(slow)
    if diff[0] < 0:
        return float(ls[0])
    for i in range(1, len(ls)):
        if diff[i] < 0:
            w = diff[i - 1] / (diff[i - 1] - diff[i])
            return float(np.exp(np.log(ls[i - 1]) + w * (np.log(ls[i]) - np.log(ls[i - 1]))))
    return None


def report(rows: Sequence[BenchRow]) -> BenchSummary:
    if not rows:
        raise ConfigError("no benchmark rows to report")
    out = BenchSummary(csv=rows_to_csv(rows))
    by_kind: dict[str, list[BenchRow]] = {}
    for r in rows:
        by_kind.setdefault(r.kind, []).append(r)
    lines = [f"{'kind':>8} {'L':>7} {'mean_ms':>11} {'std_ms':>9} {'samples/s':>10}"]
    for r in rows:
        mark = "  unstable" if r.unstable else ""
        lines.append(f"{r.kind:>8} {r.L:>7} {r.mean_ms:11.3f} {r.std_ms:9.3f} {r.throughput_sps:10.3f}{mark}")
        if r.unstable:
            out.flags.append(f"unstable:{r.kind}:L={r.L}")
    for kind, rs in by_kind.items():
        if len(rs) < 2:
            out.flags.append(f"slope-omitted:{kind}:single-point")
            continue
        out.slopes[kind] = loglog_slope([r.L for r in rs], [r.mean_ms for r in rs])
        lines.append(f"log-log slope {kind}: {out.slopes[kind]:.3f}")
    if "hybrid" in by_kind and "all_sa" in by_kind:
        hy = {r.L: r.mean_ms for r in by_kind["hybrid"]}
        sa = {r.L: r.mean_ms for r in by_kind["all_sa"]}
        common = np.array(sorted(set(hy) & set(sa)))
        if len(common):
            top = common[-1]
            out.ratio_at_top = sa[top] / hy[top]
            lines.append(f"all_sa/hybrid latency at L={top}: {out.ratio_at_top:.2f}x")
            out.crossover_L = _crossover(common, np.array([hy[L] for L in common]), np.array([sa[L] for L in common]))
            lines.append("crossover: " + (f"L~{out.crossover_L:.0f}" if out.crossover_L else "none in ladder"))
    for f in out.flags:
        lines.append(f"flag {f}")
    out.text = "\n".join(lines)
    return out


# ---------------------------------------------------------------- per-layer probe

@dataclass(frozen=True)
class ProbeRow:
    layer_kind: str
    L: int
    d: int
    mean_ms: float
    std_ms: float
    reps: int


def mixer_complexity_probe(lengths: Sequence[int], dim: int = 64, heads: int = 4, d_state: int = 16,
                           head_dim: int = 16, chunk: int = 64, reps: int = 5, threads: int | None = 1,
                           min_rep_seconds: float = 0.02, query_block: int = 1024) -> list[ProbeRow]:
    """Forward wall time of one Mamba mixer and one self-attention layer per token count."""
    rng = np.random.default_rng(0)
    mamba = MambaMixer(dim, d_state, 2, head_dim, Axis.WIDTH, rng, chunk=chunk)
    attn = SelfAttention(dim, heads, rng)
    attn.query_block = query_block
    rows = []
    with limited_threads(threads), T.no_grad():
        for L in lengths:
            side = grid_side(L)
            x = T.tensor(rng.standard_normal((1, L, dim)))
            for kind, layer in (("mamba_mixer", mamba), ("self_attention", attn)):
                mean, std, inner = time_call(lambda: layer(x, (side, side)), reps, 1, min_rep_seconds)
                rows.append(ProbeRow(kind, L, dim, mean * 1e3, std * 1e3, reps * inner))
    return rows


def probe_to_csv(rows: Sequence[ProbeRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PROBE_COLUMNS)
    for r in rows:
        w.writerow([r.layer_kind, r.L, r.d, f"{r.mean_ms:.4f}", f"{r.std_ms:.4f}", r.reps])
    return buf.getvalue()
