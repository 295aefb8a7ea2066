"""Measured multiply-accumulate counts: factored block vs brute force.

Every matrix product in both forward passes reports into an instrumented
counter, so the numbers below are measured, not derived from formulas. The
brute-force block's attention grows with the square of the channel count;
the factored block grows linearly.

Run: python demos/03_complexity_benchmark.py  (about a minute)
"""

import numpy as np

from lessvit import tensor as tc
from lessvit.attention import AttentionRatioConfig, flop_report

tc.set_precision("f32")  # counts are precision independent; f32 runs quicker

cfg = AttentionRatioConfig(dim=768, num_heads=12, ratio=16, rank=1)
print("base-shaped block, 64 patches, sweeping channel count\n")
print(f"{'C':>4} {'factored MACs':>15} {'brute MACs':>15} {'brute/factored':>15} "
      f"{'brute attn MACs':>16}")

rows = []
for c in (4, 8, 16, 32, 64):
    rep = flop_report(cfg, n=64, c=c, seed=0)
    rows.append(rep)
    print(f"{c:>4} {rep['less_macs']:>15,} {rep['vanilla_macs']:>15,} "
          f"{rep['ratio']:>15.2f} {rep['vanilla_attention_macs']:>16,}")

print()
print("channel doubling, 32 -> 64:")
grow_vanilla = rows[-1]["vanilla_attention_macs"] / rows[-2]["vanilla_attention_macs"]
grow_less = rows[-1]["less_macs"] / rows[-2]["less_macs"]
print(f"  brute-force attention MACs grow {grow_vanilla:.2f}x (quadratic trend)")
print(f"  factored block total MACs grow {grow_less:.2f}x (linear trend)")

cs = np.array([4, 8, 16, 32], dtype=float)
macs = np.array([r["less_macs"] for r in rows[:4]], dtype=float)
slope, intercept = np.polyfit(cs, macs, 1)
pred = slope * cs + intercept
r2 = 1 - ((macs - pred) ** 2).sum() / ((macs - macs.mean()) ** 2).sum()
print(f"  linear fit of factored MACs vs C: R^2 = {r2:.5f}")
print()
print("the same sweep is available from the command line:")
print("  lessvit bench --n 64 --channels 4,8,16,32 --model base --out records.txt")
