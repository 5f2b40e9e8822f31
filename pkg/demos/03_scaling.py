"""How one Mamba mixer and one attention layer scale with token count.

Run: python demos/03_scaling.py [--max-tokens 4096]
"""
import argparse

from t2md.bench import loglog_slope, mixer_complexity_probe

parser = argparse.ArgumentParser()
parser.add_argument("--max-tokens", type=int, default=4096)
top = parser.parse_args().max_tokens
lengths = [L for L in (64, 256, 1024, 4096, 16384) if L <= top]

rows = mixer_complexity_probe(lengths)
print(f"{'tokens':>7} {'mamba ms':>10} {'attention ms':>13}")
by = {(r.layer_kind, r.L): r.mean_ms for r in rows}
for L in lengths:
    print(f"{L:>7} {by['mamba_mixer', L]:10.2f} {by['self_attention', L]:13.2f}")
for kind in ("mamba_mixer", "self_attention"):
    print(f"log-log slope {kind}: {loglog_slope(lengths, [by[kind, L] for L in lengths]):.2f}")
