"""Stage-by-stage experiment driver.

Every subcommand works inside ``--out-dir``: it reads the previous stage's
checkpoint from there, writes its own, refreshes ``config.txt`` and
``manifest.txt`` and appends to ``metrics.csv``. Exit codes: 0 success,
1 runtime failure, 2 usage or prerequisite error.
"""
from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .config import RunConfig, parse_pairs
from .data import SyntheticDataset, captioned_quadrant, describe, quadrant_of
from .diffusion import sample as ddpm_sample
from .distill import (MetricsLog, PrerequisiteError, StageTag, fresh_student,
                      require_stage, run_adaptation, run_highres_finetune, run_knowledge_distill,
                      run_teacher_forcing, train_teacher)
from .model import DiffusionBackbone, copy_from_teacher, load_model, save_model
from .nn import ConfigError

CHECKPOINTS = {
    StageTag.TEACHER_PRETRAIN: "teacher.t2md",
    StageTag.TEACHER_FORCING: "forced.t2md",
    StageTag.KNOWLEDGE_DISTILL: "distilled.t2md",
    StageTag.ADAPTATION: "adapted.t2md",
    StageTag.HIGHRES_FINETUNE: "finetuned.t2md",
}
MANIFEST = "manifest.txt"


class Run:
    """Resolved config plus the output directory it writes into."""

    def __init__(self, args: argparse.Namespace):
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        base = None
        if args.config:
            base = RunConfig.load(args.config)
        elif (self.out / "config.txt").exists():
            base = RunConfig.load(self.out / "config.txt")
        overrides = parse_pairs(args.set or [])
        if getattr(args, "seed", None) is not None:
            overrides["seed"] = str(args.seed)
        self.cfg = RunConfig.from_dict(overrides, base)
        self.cfg.save(self.out / "config.txt")
        self.log = MetricsLog(self.out / "metrics.csv")

    @property
    def dataset(self) -> SyntheticDataset:
        return SyntheticDataset(self.cfg.data_seed, self.cfg.model.latent_size, self.cfg.model.channels,
                                self.cfg.data_objects)

    def load_stage(self, tag: StageTag) -> tuple[DiffusionBackbone, dict[str, str]]:
        path = self.out / CHECKPOINTS[tag]
        if not path.exists():
            raise PrerequisiteError(f"requires {tag.value} checkpoint ({path} not found)")
        model, meta = load_model(path)
        require_stage(meta, tag)
        return model, meta

    def save_stage(self, tag: StageTag, model: DiffusionBackbone, parent: dict[str, str] | None, steps: int) -> str:
        parent_chain = parent.get("chain", "") if parent else ""
        meta = {"stage": tag.value, "seed": str(self.cfg.seed), "steps": str(steps), "parent_chain": parent_chain}
        path = self.out / CHECKPOINTS[tag]
        blob = save_model(path, model, meta)
        chain = checkpoint.chain_hash(parent_chain, blob)
        manifest = self._manifest()
        manifest.update({"stage": tag.value, f"{tag.value}.checkpoint": path.name,
                         f"{tag.value}.blob": blob, f"{tag.value}.chain": chain})
        (self.out / MANIFEST).write_text("".join(f"{k}={v}\n" for k, v in sorted(manifest.items())))
        print(f"{tag.value}: wrote {path.name} (blob {blob[:12]}, chain {chain[:12]})")
        return chain

    def _manifest(self) -> dict[str, str]:
        path = self.out / MANIFEST
        return parse_pairs(path.read_text().splitlines()) if path.exists() else {}

    def chain_of(self, tag: StageTag) -> dict[str, str]:
        """Metadata view of a stage's chain hash, used as the next stage's parent."""
        return {"chain": self._manifest().get(f"{tag.value}.chain", "")}


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(run: Run, args) -> int:
    ds = run.dataset
    workers = _threads() or 1
    with ThreadPoolExecutor(max_workers=workers) as pool:
        items = list(pool.map(ds.item, range(args.count)))
    latents = np.stack([z for z, _ in items]).astype(np.float32)
    captions = np.stack([c for _, c in items])
    data = run.out / "data"
    data.mkdir(exist_ok=True)
    np.save(data / "latents.npy", latents)
    np.save(data / "captions.npy", captions)
    lines = [f"{i}\t{describe(c)}" for i, c in enumerate(captions)]
    (data / "captions.txt").write_text("\n".join(lines) + "\n")
    print(f"gen-data: {args.count} latents of shape {latents.shape[1:]} in {data}")
    return 0


def cmd_train_teacher(run: Run, args) -> int:
    c = run.cfg
    teacher, res = train_teacher(c.model, run.dataset, c.distill, seed=c.seed, log=run.log)
    print(f"TeacherPretrain: val eps-MSE {res.val['untrained_val_mse']:.4f} -> {res.val['val_mse']:.4f}")
    run.save_stage(StageTag.TEACHER_PRETRAIN, teacher, None, res.steps)
    return 0


def cmd_force(run: Run, args) -> int:
    teacher, _ = run.load_stage(StageTag.TEACHER_PRETRAIN)
    student = fresh_student(teacher.cfg, teacher, seed=1000 + run.cfg.seed)
    res = run_teacher_forcing(teacher, student, run.dataset, run.cfg.distill, seed=run.cfg.seed, log=run.log)
    print(f"TeacherForcing: forcing-MSE {res.val['initial_forcing_mse']:.5f} -> {res.val['forcing_mse']:.5f}")
    run.save_stage(StageTag.TEACHER_FORCING, student, run.chain_of(StageTag.TEACHER_PRETRAIN), res.steps)
    return 0


def cmd_distill(run: Run, args) -> int:
    teacher, _ = run.load_stage(StageTag.TEACHER_PRETRAIN)
    student, _ = run.load_stage(StageTag.TEACHER_FORCING)
    copy_from_teacher(student, teacher)
    res = run_knowledge_distill(teacher, student, run.dataset, run.cfg.distill, seed=run.cfg.seed, log=run.log)
    print(f"KnowledgeDistill: val eps-MSE {res.val['val_mse']:.5f} (teacher {res.val['teacher_val_mse']:.5f}), "
          f"teacher divergence {res.val['teacher_divergence']:.5f}")
    run.save_stage(StageTag.KNOWLEDGE_DISTILL, student, run.chain_of(StageTag.TEACHER_FORCING), res.steps)
    return 0


def cmd_adapt(run: Run, args) -> int:
    student, _ = run.load_stage(StageTag.KNOWLEDGE_DISTILL)
    res = run_adaptation(student, run.dataset, run.cfg.distill, seed=run.cfg.seed, log=run.log)
    v = res.val
    print(f"Adaptation: val eps-MSE {v['pre_swap_val_mse']:.5f} before swap, {v['post_swap_val_mse']:.5f} after, "
          f"{v['val_mse']:.5f} at end")
    run.save_stage(StageTag.ADAPTATION, student, run.chain_of(StageTag.KNOWLEDGE_DISTILL), res.steps)
    return 0


def cmd_finetune(run: Run, args) -> int:
    student, _ = run.load_stage(StageTag.ADAPTATION)
    res = run_highres_finetune(student, run.dataset, run.cfg.distill, seed=run.cfg.seed, log=run.log)
    v = res.val
    print(f"HighResFinetune: 2x share {res.extra['highres_share']:.3f}; 4x val eps-MSE "
          f"{v['val4_before_b']:.5f} -> {v['val4_after_b']:.5f}")
    run.save_stage(StageTag.HIGHRES_FINETUNE, student, run.chain_of(StageTag.ADAPTATION), res.steps)
    return 0


def cmd_sample(run: Run, args) -> int:
    path = run.out / args.checkpoint
    if not path.exists():
        raise PrerequisiteError(f"requires a checkpoint: {path} not found")
    model, meta = load_model(path)
    scale = args.scale
    if scale != 1 and model.cfg.pe_variant != "centered":
        raise PrerequisiteError("requires Adaptation checkpoint for resolutions other than the base grid")
    size = model.cfg.latent_size * scale
    n = args.count or run.cfg.sample_count
    ds = SyntheticDataset(run.cfg.data_seed + 1, size, model.cfg.channels, run.cfg.data_objects)
    _, captions = ds.batch(range(n))
    schedule = run.cfg.distill.schedule()
    z = ddpm_sample(lambda zt, t, ctx: model.predict(zt.astype(np.float32), t, ctx), schedule,
                    (n, model.cfg.channels, size, size), captions, seed=run.cfg.seed)
    outdir = run.out / "samples"
    outdir.mkdir(exist_ok=True)
    stem = Path(args.checkpoint).stem + (f"_x{scale}" if scale != 1 else "")
    np.save(outdir / f"{stem}.npy", z.astype(np.float32))
    hits = [quadrant_of(a) == captioned_quadrant(c) for a, c in zip(z, captions)]
    lines = [f"checkpoint={args.checkpoint}", f"stage={meta.get('stage', '')}", f"count={n}",
             f"shape={'x'.join(map(str, z.shape[1:]))}", f"quadrant_accuracy={np.mean(hits):.4f}",
             f"finite={bool(np.isfinite(z).all())}"]
    lines += [f"{i}\t{describe(c)}\t{'hit' if h else 'miss'}\tmax|z|={np.abs(a).max():.3f}"
              for i, (a, c, h) in enumerate(zip(z, captions, hits))]
    (outdir / f"{stem}.txt").write_text("\n".join(lines) + "\n")
    print(f"sample: {n} latents -> samples/{stem}.npy; quadrant accuracy {np.mean(hits):.3f}")
    return 0


def cmd_bench(run: Run, args) -> int:
    from .bench import BenchSpec, mixer_complexity_probe, probe_to_csv, report, run_bench
    threads = args.threads or _threads() or 1
    ladder = tuple(int(v) for v in args.ladder.split(","))
    hybrid = run.cfg.model.replace(groups=args.groups, mambas_per_group=args.mambas, dim=args.dim,
                                   ssm_chunk=args.chunk)
    spec = BenchSpec(hybrid=hybrid, ladder=ladder, reps=args.reps)
    rows = run_bench(spec, threads=threads, log=print)
    summary = report(rows)
    (run.out / "bench.csv").write_text(summary.csv)
    (run.out / "bench.txt").write_text(summary.text + "\n")
    print(summary.text)
    if args.probe:
        probe = mixer_complexity_probe([int(v) for v in args.probe.split(",")], dim=args.dim, threads=threads)
        (run.out / "probe.csv").write_text(probe_to_csv(probe))
        print(probe_to_csv(probe), end="")
    return 0


def cmd_verify(run: Run, args) -> int:
    from .verify import run_invariants

    def show(c):
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}", flush=True)

    checks = run_invariants(grad_cases=args.grad_cases, scan_cases=args.scan_cases, progress=show)
    passed = sum(c.passed for c in checks)
    print(f"verify: {passed}/{len(checks)} checks passed")
    return 0 if passed == len(checks) else 1


def _threads() -> int | None:
    from .bench import thread_limit
    return thread_limit()


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="t2md", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out-dir", required=True, help="directory holding every artifact of the run")
        p.add_argument("--config", help="key=value file (defaults to OUT_DIR/config.txt, else desk defaults)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        p.set_defaults(func=fn)
        return p

    add("gen-data", cmd_gen_data, "materialize dataset samples").add_argument("--count", type=int, default=64)
    add("train-teacher", cmd_train_teacher, "pretrain the all-attention teacher")
    add("force", cmd_force, "layer-level teacher forcing of the student's Mamba mixers")
    add("distill", cmd_distill, "knowledge distillation of the token mixers")
    add("adapt", cmd_adapt, "switch to centered positions and fine-tune")
    add("finetune", cmd_finetune, "mixed 2x then 4x resolution fine-tuning")
    p = add("sample", cmd_sample, "ancestral sampling from a checkpoint")
    p.add_argument("--checkpoint", default=CHECKPOINTS[StageTag.KNOWLEDGE_DISTILL])
    p.add_argument("--count", type=int)
    p.add_argument("--scale", type=int, default=1, help="token-grid multiplier (needs centered positions)")
    p = add("bench", cmd_bench, "latency scaling of hybrid vs all-attention")
    p.add_argument("--ladder", default="256,1024,4096,16384")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--groups", type=int, default=1)
    p.add_argument("--mambas", type=int, default=3)
    p.add_argument("--chunk", type=int, default=64)
    p.add_argument("--threads", type=int, help="worker threads (default: T2MD_THREADS or 1)")
    p.add_argument("--probe", help="comma-separated token counts for the per-layer probe")
    p = add("verify", cmd_verify, "run the invariant suite")
    p.add_argument("--grad-cases", type=int, default=20)
    p.add_argument("--scan-cases", type=int, default=100)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = Run(args)
        return args.func(run, args)
    except (PrerequisiteError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
