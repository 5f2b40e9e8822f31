"""The distillation pipeline end to end, in one process, on the desk config.

A small all-attention teacher learns captioned shapes; a hybrid student
then inherits its weights, learns its Mamba mixers by layer-level teacher
forcing, is distilled, switches to centered positions and is sampled at
twice the training resolution.

Run: python demos/02_distillation_story.py [--quick]
(--quick shrinks every budget about tenfold; the numbers are then rough.)
"""
import argparse
import time

import numpy as np

from t2md.config import RunConfig
from t2md.data import SyntheticDataset, captioned_quadrant, describe, quadrant_of
from t2md.diffusion import sample
from t2md.distill import (chained_divergence_profile, depth_slope, fresh_student, run_adaptation,
                          run_knowledge_distill, run_teacher_forcing, train_teacher, validation_batch)

parser = argparse.ArgumentParser()
parser.add_argument("--quick", action="store_true")
quick = parser.parse_args().quick

cfg = RunConfig()
dcfg = cfg.distill
if quick:
    dcfg = dcfg.replace(teacher_steps=400, forcing_steps=100, distill_steps=60, adapt_steps=150, val_size=64)
data = SyntheticDataset(cfg.data_seed, cfg.model.latent_size)
clock = time.perf_counter()


def stamp(msg):
    print(f"[{time.perf_counter() - clock:6.0f}s] {msg}")


z, tok = data.item(0)
stamp(f"dataset: {z.shape} latents, e.g. caption '{describe(tok)}'")

teacher, res = train_teacher(cfg.model, data, dcfg, seed=cfg.seed)
stamp(f"teacher ({cfg.model.depth} attention blocks): val eps-MSE {res.val['untrained_val_mse']:.3f} "
      f"-> {res.val['val_mse']:.4f}")

student = fresh_student(cfg.model, teacher, seed=1000)
probe = validation_batch(data, dcfg.schedule(), 32, seed=4242)
before = chained_divergence_profile(teacher, student, probe)
res = run_teacher_forcing(teacher, student, data, dcfg)
after = chained_divergence_profile(teacher, student, probe)
stamp(f"teacher forcing: mixer MSE {res.val['initial_forcing_mse']:.4f} -> {res.val['forcing_mse']:.5f}")
stamp(f"  divergence by depth before: {np.array2string(before, precision=5)}")
stamp(f"  divergence by depth after:  {np.array2string(after, precision=5)}")
stamp(f"  depth slope {depth_slope(before):.2e} -> {depth_slope(after):.2e}")

res = run_knowledge_distill(teacher, student, data, dcfg)
stamp(f"distillation: student val {res.val['val_mse']:.4f} vs teacher {res.val['teacher_val_mse']:.4f}")

res = run_adaptation(student, data, dcfg)
stamp(f"adaptation: val {res.val['pre_swap_val_mse']:.4f} -> {res.val['post_swap_val_mse']:.4f} after the "
      f"position swap -> {res.val['val_mse']:.4f}")

size = 2 * cfg.model.latent_size
captions = SyntheticDataset(99, size).batch(range(16))[1]
z = sample(lambda zt, t, c: student.predict(zt, t, c), dcfg.schedule(), (16, 4, size, size), captions, seed=0)
hits = np.mean([quadrant_of(a) == captioned_quadrant(c) for a, c in zip(z, captions)])
stamp(f"zero-shot {size}x{size} samples: finite={np.isfinite(z).all()}, captioned quadrant hit rate {hits:.0%}")
