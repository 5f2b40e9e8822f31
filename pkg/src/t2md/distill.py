"""Training stages: teacher pretraining, layer-level teacher forcing, knowledge
distillation, positional adaptation and multi-resolution fine-tuning."""
from __future__ import annotations

import contextlib
import csv
import math
import enum
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import SyntheticDataset
from .diffusion import NoiseSchedule, add_noise, build_schedule, mse_loss
from .model import BlockKind, DiffusionBackbone, ModelConfig, build_model, build_teacher, copy_from_teacher
from .nn import Parameter
from .optim import EMA, AdamW


class StageTag(str, enum.Enum):
    TEACHER_PRETRAIN = "TeacherPretrain"
    TEACHER_FORCING = "TeacherForcing"
    KNOWLEDGE_DISTILL = "KnowledgeDistill"
    ADAPTATION = "Adaptation"
    HIGHRES_FINETUNE = "HighResFinetune"


PRECEDING = {
    StageTag.TEACHER_FORCING: StageTag.TEACHER_PRETRAIN,
    StageTag.KNOWLEDGE_DISTILL: StageTag.TEACHER_FORCING,
    StageTag.ADAPTATION: StageTag.KNOWLEDGE_DISTILL,
    StageTag.HIGHRES_FINETUNE: StageTag.ADAPTATION,
}


class PrerequisiteError(RuntimeError):
    pass


class DivergenceError(FloatingPointError):
    pass


def require_stage(meta: dict[str, str], tag: StageTag) -> None:
    if meta.get("stage") != tag.value:
        raise PrerequisiteError(f"requires {tag.value} checkpoint (found {meta.get('stage', 'none')!r})")


@dataclass(frozen=True)
class DistillConfig:
    lambda_pseudo: float = 0.5
    lambda_mixer: float = 0.2
    ema_decay: float = 0.9999
    lr_teacher: float = 1e-4
    lr_forcing: float = 1e-4
    lr_distill: float = 5e-5
    lr_adapt: float = 5e-5
    lr_finetune: float = 5e-5
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    batch_size: int = 16
    teacher_steps: int = 2000
    forcing_steps: int = 500
    distill_steps: int = 500
    adapt_steps: int = 200
    finetune_a_steps: int = 100
    finetune_b_steps: int = 50
    highres_share: float = 0.8
    diffusion_steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    val_size: int = 64
    log_every: int = 50
    lr_schedule: str = "constant"
    mixer_lr_schedule: str = "constant"

    def __post_init__(self):
        if self.lambda_pseudo < 0 or self.lambda_mixer < 0:
            raise ValueError("loss weights must be non-negative")
        for name in ("lr_schedule", "mixer_lr_schedule"):
            if getattr(self, name) not in ("constant", "cosine"):
                raise ValueError(f"{name} must be constant or cosine, got {getattr(self, name)!r}")
        if not 0.0 <= self.highres_share <= 1.0:
            raise ValueError("highres_share must lie in [0, 1]")

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.diffusion_steps, self.beta_min, self.beta_max)

    def lr_schedule_for(self, stage: StageTag) -> str:
        """Mixer-only stages (forcing, distillation) have their own schedule."""
        if stage in (StageTag.TEACHER_FORCING, StageTag.KNOWLEDGE_DISTILL):
            return self.mixer_lr_schedule
        return self.lr_schedule

    def replace(self, **changes) -> DistillConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}


# ---------------------------------------------------------------- metrics

METRIC_COLUMNS = ("stage", "step", "loss_total", "loss_mse", "loss_pseudo", "loss_mixer",
                  "forcing_mse", "val_mse", "ema_val_mse", "wall_ms")


class MetricsLog:
    """Append-only CSV of per-step metrics; blank cells for quantities a stage does not produce."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.rows: list[dict[str, str]] = []
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)

    def log(self, **values) -> None:
        unknown = set(values) - set(METRIC_COLUMNS)
        if unknown:
            raise KeyError(f"unknown metric columns {sorted(unknown)}")
        row = {c: _cell(values.get(c)) for c in METRIC_COLUMNS}
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow([row[c] for c in METRIC_COLUMNS])

    def series(self, column: str, stage: str | None = None) -> np.ndarray:
        return np.array([float(r[column]) for r in self.rows
                         if r[column] != "" and (stage is None or r["stage"] == stage)])


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


# ---------------------------------------------------------------- data

@dataclass
class Batch:
    z0: np.ndarray
    tokens: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    zt: np.ndarray


class BatchStream:
    """Seeded stream of noised training batches drawn from a procedural dataset."""

    def __init__(self, dataset: SyntheticDataset, schedule: NoiseSchedule, batch_size: int, seed: int):
        self.dataset = dataset
        self.schedule = schedule
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def next(self, dataset: SyntheticDataset | None = None) -> Batch:
        return make_batch(dataset or self.dataset, self.schedule, self.batch_size, self.rng)


def make_batch(dataset: SyntheticDataset, schedule: NoiseSchedule, n: int, rng: np.random.Generator) -> Batch:
    idx = rng.integers(0, 2 ** 31 - 1, size=n)
    z0, tokens = dataset.batch(idx)
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(z0.shape)
    dtype = T.get_default_dtype()
    zt = add_noise(schedule, z0, t, eps)
    return Batch(z0.astype(dtype), tokens, t, eps.astype(dtype), zt.astype(dtype))


def validation_batch(dataset: SyntheticDataset, schedule: NoiseSchedule, n: int, seed: int = 10_007) -> Batch:
    """Held-out batch: a different dataset seed and a fixed noise draw."""
    held_out = replace(dataset, seed=dataset.seed + seed)
    return make_batch(held_out, schedule, n, np.random.default_rng(seed))


def predict(model: DiffusionBackbone, batch: Batch, chunk: int = 64) -> np.ndarray:
    outs = []
    for s in range(0, len(batch.t), chunk):
        outs.append(model.predict(batch.zt[s:s + chunk], batch.t[s:s + chunk], batch.tokens[s:s + chunk]))
    return np.concatenate(outs)


def val_mse(model: DiffusionBackbone, batch: Batch) -> float:
    return float(np.mean((predict(model, batch).astype(np.float64) - batch.eps) ** 2))


def teacher_divergence(student: DiffusionBackbone, teacher_eps: np.ndarray, batch: Batch) -> float:
    return float(np.mean((predict(student, batch).astype(np.float64) - teacher_eps) ** 2))


# ---------------------------------------------------------------- freezing

@contextlib.contextmanager
def trainable_only(model: DiffusionBackbone, params: Sequence[Parameter]):
    """Mark everything outside ``params`` as not requiring gradients for the stage."""
    keep = {id(p) for p in params}
    saved = [(p, p.requires_grad) for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad = id(p) in keep
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag
            p.grad = None


def frozen_snapshot(model: DiffusionBackbone, params: Sequence[Parameter]) -> dict[str, bytes]:
    """Bytes of every parameter outside ``params`` (for freeze audits)."""
    keep = {id(p) for p in params}
    return {name: p.data.tobytes() for name, p in model.named_parameters() if id(p) not in keep}


# ---------------------------------------------------------------- losses

def forcing_loss(teacher_taps: Sequence, student: DiffusionBackbone, grid: tuple[int, int]) -> tuple[T.Tensor, list[float]]:
    """Sum over Mamba positions of MSE(student mixer(teacher input), teacher mixer output).

    Attention positions contribute nothing; only Mamba mixer parameters
    receive gradient.
    """
    if len(teacher_taps) != len(student.blocks):
        raise ValueError(f"depth mismatch: {len(teacher_taps)} teacher taps, {len(student.blocks)} student blocks")
    total = None
    per_layer = []
    for block, (h_in, h_out) in zip(student.blocks, teacher_taps):
        if block.kind == BlockKind.SA:
            continue
        h_in = T.tensor(_data(h_in))
        err = mse_loss(_data(h_out), block.mixer(h_in, grid))
        per_layer.append(err.item())
        total = err if total is None else total + err
    if total is None:
        raise ValueError("student has no Mamba blocks to force")
    return total, per_layer


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, T.Tensor) else np.asarray(x)


def distill_loss(eps, eps_student, eps_teacher, mixers_student, mixers_teacher,
                 lambda_pseudo: float, lambda_mixer: float) -> tuple[T.Tensor, dict[str, float]]:
    """``L_mse + lambda_pseudo * L_pseudo + lambda_mixer * L_mixer`` (element means).

    ``L_mixer`` averages the per-block mixer-output MSE over every block.
    Terms with zero weight are skipped entirely.
    """
    l_mse = mse_loss(eps, eps_student)
    total = l_mse
    parts = {"loss_mse": l_mse.item()}
    if lambda_pseudo:
        l_pseudo = mse_loss(_data(eps_teacher), eps_student)
        total = total + lambda_pseudo * l_pseudo
        parts["loss_pseudo"] = l_pseudo.item()
    if lambda_mixer:
        if len(mixers_student) != len(mixers_teacher):
            raise ValueError("student and teacher depths differ")
        acc = None
        for ms, mt in zip(mixers_student, mixers_teacher):
            e = mse_loss(_data(mt), ms)
            acc = e if acc is None else acc + e
        l_mixer = acc * (1.0 / len(mixers_student))
        total = total + lambda_mixer * l_mixer
        parts["loss_mixer"] = l_mixer.item()
    parts["loss_total"] = total.item()
    return total, parts


def combine_losses(l_mse: float, l_pseudo: float, l_mixer: float, lambda_pseudo: float, lambda_mixer: float) -> float:
    return l_mse + lambda_pseudo * l_pseudo + lambda_mixer * l_mixer


# ---------------------------------------------------------------- generic loop

@dataclass
class StageResult:
    stage: str
    steps: int
    losses: list[float] = field(default_factory=list)
    val: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def lr_at(lr: float, step: int, steps: int, schedule: str) -> float:
    """Learning rate for 1-based ``step``; cosine decays to zero at the last step."""
    if schedule == "constant" or steps <= 1:
        return lr
    return lr * 0.5 * (1.0 + math.cos(math.pi * (step - 1) / (steps - 1)))


def _fit(model: DiffusionBackbone, params: Sequence[Parameter], steps: int, lr: float, dcfg: DistillConfig,
         stage: StageTag, step_fn: Callable[[int], tuple[T.Tensor, dict]], log: MetricsLog | None,
         val_fn: Callable[[], float] | None = None) -> StageResult:
    result = StageResult(stage.value, steps)
    opt = AdamW(params, lr, weight_decay=dcfg.weight_decay, grad_clip=dcfg.grad_clip)
    ema = EMA(params, dcfg.ema_decay)
    schedule = dcfg.lr_schedule_for(stage)
    with trainable_only(model, params):
        for step in range(1, steps + 1):
            t0 = time.perf_counter()
            opt.zero_grad()
            opt.lr = lr_at(lr, step, steps, schedule)
            loss, parts = step_fn(step)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"{stage.value}: loss became {value} at step {step}")
            T.backward(loss)
            opt.step()
            ema.update()
            result.losses.append(value)
            wall = (time.perf_counter() - t0) * 1e3
            if log is not None and (step % dcfg.log_every == 0 or step == steps):
                row = dict(parts)
                if val_fn is not None:
                    row["val_mse"] = val_fn()
                    with ema.swapped():
                        row["ema_val_mse"] = val_fn()
                log.log(stage=stage.value, step=step, wall_ms=f"{wall:.3f}", **row)
    return result


def train_diffusion(model: DiffusionBackbone, dataset: SyntheticDataset, dcfg: DistillConfig, steps: int, lr: float,
                    seed: int, stage: StageTag, log: MetricsLog | None = None,
                    params: Sequence[Parameter] | None = None, val: Batch | None = None) -> StageResult:
    """Plain epsilon-prediction training of ``params`` (default: everything)."""
    schedule = dcfg.schedule()
    stream = BatchStream(dataset, schedule, dcfg.batch_size, seed)
    params = list(params) if params is not None else model.parameters()

    def step_fn(step):
        b = stream.next()
        loss = mse_loss(b.eps, model.forward(b.zt, b.t, b.tokens))
        return loss, {"loss_total": loss.item(), "loss_mse": loss.item()}

    val_fn = (lambda: val_mse(model, val)) if val is not None else None
    return _fit(model, params, steps, lr, dcfg, stage, step_fn, log, val_fn)


# ---------------------------------------------------------------- stages

def train_teacher(cfg: ModelConfig, dataset: SyntheticDataset, dcfg: DistillConfig, seed: int = 0,
                  log: MetricsLog | None = None, steps: int | None = None) -> tuple[DiffusionBackbone, StageResult]:
    teacher = build_teacher(cfg.replace(init_seed=seed))
    val = validation_batch(dataset, dcfg.schedule(), dcfg.val_size)
    baseline = val_mse(teacher, val)
    res = train_diffusion(teacher, dataset, dcfg, steps or dcfg.teacher_steps, dcfg.lr_teacher, seed,
                          StageTag.TEACHER_PRETRAIN, log, val=val)
    res.val = {"untrained_val_mse": baseline, "val_mse": val_mse(teacher, val)}
    return teacher, res


def fresh_student(cfg: ModelConfig, teacher: DiffusionBackbone | None, seed: int) -> DiffusionBackbone:
    """Hybrid student; with a teacher, all non-Mamba weights are copied from it."""
    student = build_model(cfg.replace(init_seed=seed, all_attention=False))
    if teacher is not None:
        copy_from_teacher(student, teacher)
    return student


def run_teacher_forcing(teacher: DiffusionBackbone, student: DiffusionBackbone, dataset: SyntheticDataset,
                        dcfg: DistillConfig, seed: int = 0, log: MetricsLog | None = None,
                        steps: int | None = None) -> StageResult:
    """Train only the student's Mamba mixers on the teacher's own mixer inputs."""
    schedule = dcfg.schedule()
    stream = BatchStream(dataset, schedule, dcfg.batch_size, seed)
    probe = validation_batch(dataset, schedule, min(dcfg.val_size, 32))
    p = teacher.cfg.patch
    n_mamba = sum(k != BlockKind.SA for k in student.kinds)

    def taps_for(b: Batch):
        with T.no_grad():
            _, taps = teacher.forward_with_taps(b.zt, b.t, b.tokens)
        return taps

    def probe_mse() -> float:
        grid = (probe.zt.shape[2] // p, probe.zt.shape[3] // p)
        with T.no_grad():
            loss, _ = forcing_loss(taps_for(probe), student, grid)
        return loss.item() / n_mamba

    initial = probe_mse()

    def step_fn(step):
        b = stream.next()
        grid = (b.zt.shape[2] // p, b.zt.shape[3] // p)
        loss, per_layer = forcing_loss(taps_for(b), student, grid)
        return loss, {"loss_total": loss.item(), "forcing_mse": float(np.mean(per_layer))}

    res = _fit(student, student.mamba_parameters(), steps if steps is not None else dcfg.forcing_steps,
               dcfg.lr_forcing, dcfg, StageTag.TEACHER_FORCING, step_fn, log)
    res.val = {"initial_forcing_mse": initial, "forcing_mse": probe_mse()}
    return res


def run_knowledge_distill(teacher: DiffusionBackbone, student: DiffusionBackbone, dataset: SyntheticDataset,
                          dcfg: DistillConfig, seed: int = 0, log: MetricsLog | None = None,
                          steps: int | None = None, lambda_pseudo: float | None = None,
                          lambda_mixer: float | None = None, params: Sequence[Parameter] | None = None,
                          val: Batch | None = None) -> StageResult:
    """Train token mixers (by default) under the combined distillation loss."""
    lam1 = dcfg.lambda_pseudo if lambda_pseudo is None else lambda_pseudo
    lam2 = dcfg.lambda_mixer if lambda_mixer is None else lambda_mixer
    schedule = dcfg.schedule()
    stream = BatchStream(dataset, schedule, dcfg.batch_size, seed)
    params = list(params) if params is not None else student.mixer_parameters()
    val = val or validation_batch(dataset, schedule, dcfg.val_size)

    def step_fn(step):
        b = stream.next()
        eps_t, mix_t = None, []
        if lam1 or lam2:
            with T.no_grad():
                eps_t, taps_t = teacher.forward_with_taps(b.zt, b.t, b.tokens)
            mix_t = [m for _, m in taps_t]
        if lam2:
            eps_s, taps_s = student.forward_with_taps(b.zt, b.t, b.tokens)
            mix_s = [m for _, m in taps_s]
        else:
            eps_s, mix_s = student.forward(b.zt, b.t, b.tokens), []
        return distill_loss(b.eps, eps_s, eps_t, mix_s, mix_t, lam1, lam2)

    res = _fit(student, params, steps if steps is not None else dcfg.distill_steps, dcfg.lr_distill, dcfg,
               StageTag.KNOWLEDGE_DISTILL, step_fn, log, lambda: val_mse(student, val))
    teacher_eps = predict(teacher, val)
    res.val = {"val_mse": val_mse(student, val), "teacher_divergence": teacher_divergence(student, teacher_eps, val),
               "teacher_val_mse": val_mse(teacher, val)}
    return res


def run_adaptation(student: DiffusionBackbone, dataset: SyntheticDataset, dcfg: DistillConfig, seed: int = 0,
                   log: MetricsLog | None = None, steps: int | None = None) -> StageResult:
    """Swap to centered, long-edge-normalized positions and fine-tune everything at base resolution."""
    val = validation_batch(dataset, dcfg.schedule(), dcfg.val_size)
    before = val_mse(student, val)
    student.set_position_variant("centered")
    after_swap = val_mse(student, val)
    res = train_diffusion(student, dataset, dcfg, steps if steps is not None else dcfg.adapt_steps,
                          dcfg.lr_adapt, seed, StageTag.ADAPTATION, log, val=val)
    res.val = {"pre_swap_val_mse": before, "post_swap_val_mse": after_swap, "val_mse": val_mse(student, val)}
    return res


def resolution_draws(rng: np.random.Generator, n: int, share: float) -> np.ndarray:
    """True where a step uses the doubled grid."""
    return rng.random(n) < share


def run_highres_finetune(student: DiffusionBackbone, dataset: SyntheticDataset, dcfg: DistillConfig, seed: int = 0,
                         log: MetricsLog | None = None, steps_a: int | None = None,
                         steps_b: int | None = None) -> StageResult:
    """Stage A mixes base and 2x grids (``highres_share`` at 2x); stage B trains on 4x grids only."""
    if student.cfg.pe_variant != "centered":
        raise PrerequisiteError("requires Adaptation checkpoint (centered positions)")
    steps_a = dcfg.finetune_a_steps if steps_a is None else steps_a
    steps_b = dcfg.finetune_b_steps if steps_b is None else steps_b
    schedule = dcfg.schedule()
    base = dataset.size
    ds2, ds4 = dataset.at_size(2 * base), dataset.at_size(4 * base)
    rng = np.random.default_rng([seed, 2])
    draws = resolution_draws(rng, steps_a, dcfg.highres_share)
    stream = BatchStream(dataset, schedule, dcfg.batch_size, seed)
    small = max(1, dcfg.batch_size // 4)
    stream4 = BatchStream(ds4, schedule, small, seed + 1)
    val4 = validation_batch(ds4, schedule, max(8, dcfg.val_size // 4))

    def step_a(step):
        b = stream.next(ds2 if draws[step - 1] else dataset)
        loss = mse_loss(b.eps, student.forward(b.zt, b.t, b.tokens))
        return loss, {"loss_total": loss.item(), "loss_mse": loss.item()}

    def step_b(step):
        b = stream4.next()
        loss = mse_loss(b.eps, student.forward(b.zt, b.t, b.tokens))
        return loss, {"loss_total": loss.item(), "loss_mse": loss.item()}

    params = student.parameters()
    res_a = _fit(student, params, steps_a, dcfg.lr_finetune, dcfg, StageTag.HIGHRES_FINETUNE, step_a, log)
    before_b = val_mse(student, val4)
    res_b = _fit(student, params, steps_b, dcfg.lr_finetune, dcfg, StageTag.HIGHRES_FINETUNE, step_b, log,
                 lambda: val_mse(student, val4))
    res = StageResult(StageTag.HIGHRES_FINETUNE.value, steps_a + steps_b, res_a.losses + res_b.losses)
    res.val = {"val4_before_b": before_b, "val4_after_b": val_mse(student, val4)}
    res.extra = {"highres_share": float(draws.mean()) if steps_a else float("nan")}
    return res


# ---------------------------------------------------------------- probes

def chained_divergence_profile(teacher: DiffusionBackbone, student: DiffusionBackbone, batch: Batch) -> np.ndarray:
    """Per-block MSE between student and teacher mixer inputs, each model running on its own chain."""
    with T.no_grad():
        _, taps_t = teacher.forward_with_taps(batch.zt, batch.t, batch.tokens)
        _, taps_s = student.forward_with_taps(batch.zt, batch.t, batch.tokens)
    return np.array([float(np.mean((hs.data.astype(np.float64) - ht.data) ** 2))
                     for (hs, _), (ht, _) in zip(taps_s, taps_t)])


def depth_slope(profile: np.ndarray) -> float:
    """Least-squares slope of a per-layer profile against block index."""
    x = np.arange(len(profile), dtype=np.float64)
    return float(np.polyfit(x, profile, 1)[0])


# ---------------------------------------------------------------- ablation

ABLATION_ARMS = ("scratch", "init-only", "+pseudo", "+mixer", "+forcing")


@dataclass
class ArmResult:
    arm: str
    seed: int
    teacher_divergence: float
    val_mse: float
    seconds: float
    student: DiffusionBackbone | None = field(default=None, repr=False)


def run_ablation_arm(arm: str, teacher: DiffusionBackbone, dataset: SyntheticDataset, dcfg: DistillConfig,
                     seed: int, steps: int | None = None, forcing_steps: int | None = None,
                     log: MetricsLog | None = None) -> ArmResult:
    """One cumulative ablation arm; every arm spends the same distillation budget.

    scratch trains a freshly initialized hybrid on the plain loss; init-only
    copies teacher weights and trains mixers on the plain loss; +pseudo and
    +mixer add the soft-label and mixer terms; +forcing runs the forcing
    stage first.
    """
    if arm not in ABLATION_ARMS:
        raise ValueError(f"unknown arm {arm!r}; expected one of {ABLATION_ARMS}")
    t0 = time.perf_counter()
    cfg = teacher.cfg.replace(all_attention=False)
    student = fresh_student(cfg, None if arm == "scratch" else teacher, seed=1000 + seed)
    lam1 = dcfg.lambda_pseudo if arm in ("+pseudo", "+mixer", "+forcing") else 0.0
    lam2 = dcfg.lambda_mixer if arm in ("+mixer", "+forcing") else 0.0
    if arm == "+forcing":
        run_teacher_forcing(teacher, student, dataset, dcfg, seed=seed, log=log, steps=forcing_steps)
    params = student.parameters() if arm == "scratch" else None
    res = run_knowledge_distill(teacher, student, dataset, dcfg, seed=seed, log=log, steps=steps,
                                lambda_pseudo=lam1, lambda_mixer=lam2, params=params)
    return ArmResult(arm, seed, res.val["teacher_divergence"], res.val["val_mse"], time.perf_counter() - t0,
                     student)


def run_ablation(teacher: DiffusionBackbone, dataset: SyntheticDataset, dcfg: DistillConfig,
                 seeds: Sequence[int] = (0, 1, 2), arms: Sequence[str] = ABLATION_ARMS, steps: int | None = None,
                 forcing_steps: int | None = None) -> list[ArmResult]:
    return [run_ablation_arm(arm, teacher, dataset, dcfg, seed, steps, forcing_steps)
            for seed in seeds for arm in arms]


def ablation_means(results: Sequence[ArmResult], key: str = "teacher_divergence") -> dict[str, float]:
    arms = dict.fromkeys(r.arm for r in results)
    return {a: float(np.mean([getattr(r, key) for r in results if r.arm == a])) for a in arms}
