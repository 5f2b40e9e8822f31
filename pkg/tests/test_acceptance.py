"""Acceptance suite: one PASS/FAIL line per criterion, at the contract tolerances.

The desk-scale fixtures (teacher pretraining, the ablation study, the
benchmark ladder) take tens of minutes on one CPU core.
"""
import time

import numpy as np
import pytest

from t2md import checkpoint
from t2md import tensor as T
from t2md.bench import BenchSpec, report, run_bench
from t2md.cli import CHECKPOINTS, main
from t2md.config import RunConfig
from t2md.data import SyntheticDataset, captioned_quadrant, quadrant_of
from t2md.diffusion import add_noise, build_schedule, ddpm_step, sample
from t2md.distill import (ABLATION_ARMS, ablation_means, chained_divergence_profile, depth_slope, fresh_student,
                          run_ablation, run_adaptation, run_teacher_forcing, train_teacher, val_mse,
                          validation_batch)
from t2md.gradcheck import LAYER_CASES, OP_CASES, run_case
from t2md.model import BlockKind, build_pattern, load_model, save_model
from t2md.nn import UnsupportedResolutionError
from t2md.verify import scan_oracle_error

CFG = RunConfig()
DATA = SyntheticDataset(CFG.data_seed, CFG.model.latent_size, CFG.model.channels, CFG.data_objects)


@pytest.fixture
def verdict(capsys):
    def emit(n, title, passed, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if passed else 'FAIL'} {title}: {detail}")
        assert passed, detail
    return emit


@pytest.fixture(scope="session")
def teacher():
    t0 = time.perf_counter()
    model, _ = train_teacher(CFG.model, DATA, CFG.distill, seed=CFG.seed)
    return model, time.perf_counter() - t0


@pytest.fixture(scope="session")
def ablation(teacher):
    t0 = time.perf_counter()
    results = run_ablation(teacher[0], DATA, CFG.distill, seeds=(0, 1, 2))
    return results, time.perf_counter() - t0


def test_1_gradient_integrity(verdict):
    t0 = time.perf_counter()
    worst = {}
    for case in list(OP_CASES) + list(LAYER_CASES):
        worst[case.name] = max(run_case(case, seed) for seed in range(20))
    elapsed = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    verdict(1, "gradient integrity", err < 1e-5 and elapsed < 300,
            f"{len(worst)} ops/layers x 20 cases, worst {name} rel err {err:.2e}, {elapsed:.0f}s")


def test_2_scan_oracle(verdict):
    rng = np.random.default_rng(2024)
    worst = {np.float32: 0.0, np.float64: 0.0}
    for _ in range(100):
        L = int(rng.integers(1, 257))
        for chunk in (1, 4, 8, L):
            for dtype in worst:
                worst[dtype] = max(worst[dtype], scan_oracle_error(rng, L, chunk, dtype))
    verdict(2, "scan-oracle equivalence", worst[np.float32] < 1e-5 and worst[np.float64] < 1e-10,
            f"100 cases, L<=256, chunks 1/4/8/L: max diff {worst[np.float32]:.1e} (32-bit), "
            f"{worst[np.float64]:.1e} (64-bit)")


def test_3_architecture(verdict):
    kinds = build_pattern(4, 3)
    sa = [i for i, k in enumerate(kinds) if k == BlockKind.SA]
    counts = {k.value: kinds.count(k) for k in BlockKind}
    ok = len(kinds) == 28 and sa == [0, 7, 14, 21] and counts == {"SA": 4, "HM": 12, "WM": 12}
    verdict(3, "architecture conformance", ok,
            f"{len(kinds)} blocks, SA at {sa}, counts {counts}, SA share {counts['SA'] / len(kinds):.0%}")


def test_4_distillation_ordering(teacher, ablation, verdict):
    results, elapsed = ablation
    div = ablation_means(results)
    val = ablation_means(results, "val_mse")
    teacher_val = val_mse(teacher[0], validation_batch(DATA, CFG.distill.schedule(), CFG.distill.val_size))
    d = [div[a] for a in ABLATION_ARMS]
    ordered = d[0] > d[1] > d[2] > d[3] >= d[4]
    ratio = val["+forcing"] / teacher_val
    total = elapsed + teacher[1]
    detail = ", ".join(f"{a} {div[a]:.3e}" for a in ABLATION_ARMS)
    verdict(4, "distillation ordering", ordered and ratio <= 1.10 and total <= 90 * 60,
            f"mean teacher divergence over 3 seeds: {detail}; +forcing val/teacher val {ratio:.3f}; "
            f"{total / 60:.1f} min with teacher pretraining")


def test_5_forcing_flattens_error_growth(teacher, verdict):
    model = teacher[0]
    student = fresh_student(CFG.model, model, seed=1000 + CFG.seed)
    probe = validation_batch(DATA, CFG.distill.schedule(), 32, seed=4242)
    before = depth_slope(chained_divergence_profile(model, student, probe))
    run_teacher_forcing(model, student, DATA, CFG.distill, seed=CFG.seed)
    after = depth_slope(chained_divergence_profile(model, student, probe))
    verdict(5, "teacher forcing flattens error growth", after < before,
            f"chained-divergence depth slope {before:.3e} at init -> {after:.3e} after forcing")


def test_6_complexity_scaling(verdict):
    hybrid = CFG.model.replace(groups=1, mambas_per_group=3, dim=64, ssm_chunk=64)
    t0 = time.perf_counter()
    summary = report(run_bench(BenchSpec(hybrid=hybrid), threads=1))
    elapsed = time.perf_counter() - t0
    hy, sa = summary.slopes["hybrid"], summary.slopes["all_sa"]
    ok = 0.9 <= hy <= 1.4 and 1.6 <= sa <= 2.2 and summary.ratio_at_top >= 1.5 and elapsed < 15 * 60
    verdict(6, "complexity scaling", ok,
            f"slopes hybrid {hy:.2f}, all-SA {sa:.2f}; all-SA/hybrid at L=16384 {summary.ratio_at_top:.2f}x; "
            f"{elapsed / 60:.1f} min")


def test_7_zero_shot_resolution(teacher, ablation, tmp_path, verdict):
    student = next(r.student for r in ablation[0] if r.arm == "+forcing" and r.seed == 0)
    save_model(tmp_path / "distilled.t2md", student, {"stage": "KnowledgeDistill"})
    try:
        student.predict(np.zeros((1, 4, 16, 16), np.float32), np.array([50]), np.zeros((1, 3), np.int64))
        refused = False
    except UnsupportedResolutionError as exc:
        refused = "unsupported resolution" in str(exc)
    run_adaptation(student, DATA, CFG.distill, seed=CFG.seed)
    save_model(tmp_path / "adapted.t2md", student, {"stage": "Adaptation"})
    adapted, _ = load_model(tmp_path / "adapted.t2md")
    base = SyntheticDataset(7, 8).batch(range(4))
    big = SyntheticDataset(7, 16).batch(range(4))
    s = CFG.distill.schedule()
    rng = np.random.default_rng(0)
    t = np.array([10, 40, 70, 100])
    z8 = add_noise(s, base[0], t, rng.standard_normal(base[0].shape))
    z16 = add_noise(s, big[0], t, rng.standard_normal(big[0].shape))
    out8, out16 = adapted.predict(z8, t, base[1]), adapted.predict(z16, t, big[1])
    tok8 = np.linalg.norm(out8, axis=1).max()
    tok16 = np.linalg.norm(out16, axis=1).max()
    ok = refused and np.isfinite(out16).all() and tok16 <= 3 * tok8
    verdict(7, "zero-shot resolution", ok,
            f"standard positions refuse 2x grid: {refused}; adapted 2x output finite, max token norm "
            f"{tok16:.2f} vs {tok8:.2f} at base")


def test_8_diffusion_sanity(teacher, verdict):
    with T.precision(np.float64):
        s = build_schedule(1000)
        rng = np.random.default_rng(8)
        z0 = rng.standard_normal((2, 4, 8, 8))
        worst = 0.0
        for t in range(1, s.T + 1):
            eps = rng.standard_normal(z0.shape)
            zt = add_noise(s, z0, t, eps)
            ab, ab_prev, beta = s.alpha_bar(t), s.alpha_bar(t - 1), s.beta(t)
            mean = np.sqrt(ab_prev) * beta / (1 - ab) * z0 + np.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab) * zt
            worst = max(worst, float(np.abs(ddpm_step(s, zt, eps, t) - mean).max()))
    model = teacher[0]
    captions = SyntheticDataset(CFG.data_seed + 1, 8).batch(range(64))[1]
    z = sample(lambda zt, t, c: model.predict(zt, t, c), CFG.distill.schedule(), (64, 4, 8, 8), captions, seed=0)
    acc = float(np.mean([quadrant_of(a) == captioned_quadrant(c) for a, c in zip(z, captions)]))
    verdict(8, "diffusion sanity", worst < 1e-5 and acc >= 0.9,
            f"inversion max err {worst:.1e} over 1000 steps; teacher samples in captioned quadrant {acc:.0%}")


def test_9_determinism(tmp_path, verdict):
    tiny = {"model.groups": "1", "model.mambas_per_group": "1", "model.dim": "16", "model.heads": "2",
            "model.d_state": "4", "model.ssm_head_dim": "8", "model.ssm_chunk": "4", "model.text_dim": "8",
            "distill.teacher_steps": "6", "distill.forcing_steps": "4", "distill.distill_steps": "4",
            "distill.adapt_steps": "4", "distill.finetune_a_steps": "3", "distill.finetune_b_steps": "2",
            "distill.batch_size": "2", "distill.val_size": "4", "distill.log_every": "1"}
    (tmp_path / "c.txt").write_text(RunConfig.from_dict(tiny).to_text())
    for run in ("a", "b"):
        out = str(tmp_path / run)
        assert main(["train-teacher", "--out-dir", out, "--config", str(tmp_path / "c.txt")]) == 0
        for cmd in ("force", "distill", "adapt", "finetune"):
            assert main([cmd, "--out-dir", out]) == 0

    def metrics(run):
        lines = (tmp_path / run / "metrics.csv").read_text().splitlines()
        return [line.rsplit(",", 1)[0] for line in lines]

    same_ckpt = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in CHECKPOINTS.values())
    same_metrics = metrics("a") == metrics("b")
    tensors, meta = checkpoint.load(tmp_path / "a" / "finetuned.t2md")
    checkpoint.save(tmp_path / "again.t2md", tensors, meta)
    round_trip = (tmp_path / "again.t2md").read_bytes() == (tmp_path / "a" / "finetuned.t2md").read_bytes()
    verdict(9, "determinism and persistence", same_ckpt and same_metrics and round_trip,
            f"5 stage checkpoints identical: {same_ckpt}; metrics identical without wall_ms: {same_metrics}; "
            f"round trip byte-identical: {round_trip}")
