"""Invariant suite behind the ``verify`` subcommand."""
from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from . import tensor as T
from .diffusion import add_noise, build_schedule, ddpm_step
from .gradcheck import LAYER_CASES, OP_CASES, run_case
from .model import BlockKind, build_model, build_pattern
from .ssm import Axis, ScanOrder, scan_chunked, scan_sequential


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str


def random_scan_case(rng: np.random.Generator, L: int, heads: int = 2, head_dim: int = 3, state: int = 4,
                     batch: int = 1) -> tuple[np.ndarray, ...]:
    x = rng.standard_normal((batch, L, heads, head_dim))
    dt = rng.uniform(0.01, 0.5, size=(batch, L, heads))
    A = -rng.uniform(0.1, 2.0, size=heads)
    B = rng.standard_normal((batch, L, state))
    C = rng.standard_normal((batch, L, state))
    return x, dt, A, B, C


def scan_oracle_error(rng: np.random.Generator, L: int, chunk: int, dtype) -> float:
    with T.precision(dtype):
        args = [a.astype(dtype) for a in random_scan_case(rng, L)]
        ref = scan_sequential(*args).data
        got = scan_chunked(*args, chunk=chunk).data
    return float(np.max(np.abs(ref.astype(np.float64) - got)))


def _gradients(cases: int) -> list[Check]:
    out = []
    for case in list(OP_CASES) + list(LAYER_CASES):
        worst = max(run_case(case, seed) for seed in range(cases))
        out.append(Check(f"grad:{case.name}", worst < 1e-5, f"max rel err {worst:.2e} over {cases} cases"))
    return out


def _scan_oracle(cases: int) -> list[Check]:
    rng = np.random.default_rng(0)
    worst = {np.float32: 0.0, np.float64: 0.0}
    for _ in range(cases):
        L = int(rng.integers(1, 65))
        for chunk in (1, 4, 8, L):
            for dtype in worst:
                worst[dtype] = max(worst[dtype], scan_oracle_error(rng, L, chunk, dtype))
    return [Check("scan:float32", worst[np.float32] < 1e-5, f"max abs diff {worst[np.float32]:.2e}"),
            Check("scan:float64", worst[np.float64] < 1e-10, f"max abs diff {worst[np.float64]:.2e}")]


def _pattern() -> list[Check]:
    kinds = build_pattern(4, 3)
    sa = [i for i, k in enumerate(kinds) if k == BlockKind.SA]
    counts = {k.value: kinds.count(k) for k in BlockKind}
    ok = len(kinds) == 28 and sa == [0, 7, 14, 21] and counts == {"SA": 4, "HM": 12, "WM": 12}
    return [Check("pattern:4x3", ok, f"{len(kinds)} blocks, SA at {sa}, counts {counts}")]


def _orders() -> list[Check]:
    ok = True
    for h, w in [(1, 1), (2, 2), (3, 5), (4, 7)]:
        for axis in Axis:
            for rev in (False, True):
                o = ScanOrder(axis, rev)
                p = o.permutation(h, w)
                ok &= sorted(p.tolist()) == list(range(h * w)) and np.array_equal(p[o.inverse(h, w)], np.arange(h * w))
    return [Check("scan-order:bijection", bool(ok), "permutation/inverse round trip")]


def _diffusion() -> list[Check]:
    sched = build_schedule(1000)
    rng = np.random.default_rng(0)
    z0 = rng.standard_normal((2, 4, 3, 3))
    worst = 0.0
    for t in range(1, sched.T + 1):
        eps = rng.standard_normal(z0.shape)
        zt = add_noise(sched, z0, t, eps)
        ab, ab_prev, beta = sched.alpha_bar(t), sched.alpha_bar(t - 1), sched.beta(t)
        posterior = (np.sqrt(ab_prev) * beta / (1 - ab) * z0
                     + np.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab) * zt)
        worst = max(worst, float(np.max(np.abs(ddpm_step(sched, zt, eps, t) - posterior))))
    return [Check("diffusion:inversion", worst < 1e-5, f"max abs err {worst:.2e} over {sched.T} steps")]


def _checkpoint() -> list[Check]:
    from .model import ModelConfig
    cfg = ModelConfig(groups=1, mambas_per_group=1, dim=16, heads=2, d_state=4, ssm_head_dim=8, latent_size=4)
    model = build_model(cfg)
    with tempfile.TemporaryDirectory() as tmp:
        a, b = Path(tmp) / "a.t2md", Path(tmp) / "b.t2md"
        checkpoint.save(a, model.state_dict(), {"stage": "TeacherPretrain"})
        tensors, meta = checkpoint.load(a)
        checkpoint.save(b, tensors, meta)
        same = a.read_bytes() == b.read_bytes()
    return [Check("checkpoint:round-trip", same, "save -> load -> save is byte-identical")]


def run_invariants(grad_cases: int = 20, scan_cases: int = 100,
                   progress: Callable[[Check], None] | None = None) -> list[Check]:
    checks = []
    for group in (lambda: _gradients(grad_cases), lambda: _scan_oracle(scan_cases), _pattern, _orders,
                  _diffusion, _checkpoint):
        for c in group():
            checks.append(c)
            if progress:
                progress(c)
    return checks
