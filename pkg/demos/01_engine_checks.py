"""Walk through the numerical foundations: gradients, the SSD scan and the noise schedule.

Run: python demos/01_engine_checks.py
"""
import numpy as np

from t2md import tensor as T
from t2md.diffusion import add_noise, build_schedule, ddpm_step
from t2md.gradcheck import LAYER_CASES, run_case
from t2md.ssm import discretize, scan_chunked, scan_sequential
from t2md.verify import random_scan_case

print("1. Backprop against central differences (64-bit), three seeds per layer:")
for case in LAYER_CASES:
    worst = max(run_case(case, seed) for seed in range(3))
    print(f"   {case.name:<16} worst relative error {worst:.1e}")

print("\n2. Zero-order-hold discretization, A=-1, dt=0.5, B=[2]:")
a_bar, b_bar = discretize(-1.0, [2.0], 0.5)
print(f"   Abar = {a_bar:.5f}, Bbar = {b_bar[0]:.5f}")

print("\n3. The chunked (matmul) scan reproduces the sequential recurrence:")
rng = np.random.default_rng(0)
with T.precision(np.float64):
    args = random_scan_case(rng, 64)
    ref = scan_sequential(*args).data
    for chunk in (1, 8, 64):
        got = scan_chunked(*args, chunk=chunk).data
        print(f"   chunk {chunk:>2}: max |diff| = {np.abs(ref - got).max():.1e}")

print("\n4. One reverse step with the true noise lands on the posterior mean:")
s = build_schedule(1000)
z0 = rng.standard_normal((1, 4, 8, 8))
for t in (1, 500, 1000):
    eps = rng.standard_normal(z0.shape)
    zt = add_noise(s, z0, t, eps)
    ab, ab_prev, beta = s.alpha_bar(t), s.alpha_bar(t - 1), s.beta(t)
    mean = np.sqrt(ab_prev) * beta / (1 - ab) * z0 + np.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab) * zt
    print(f"   t={t:>4}: alpha_bar={ab:.4f}, error {np.abs(ddpm_step(s, zt, eps, t) - mean).max():.1e}")
