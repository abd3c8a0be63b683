"""Cost accounting for the packed candidate mask.

Attention edges under the block mask are T^2/2 + CT analytically (the exact
count differs by a factor of exactly 1 + 1/T).  Scoring all candidates
sequentially costs 2T^2 + 2CT edges, so packing buys between 2x and 4x on
attention and up to 2x on the linear layers; the blend depends on how much of
the FLOP budget attention holds at a given width.

Run:  python3 demos/05_cost_curves.py
"""

from grlayout.costs import (
    attention_share, attn_edges, cost_report, exact_attn_edges, ratio_attn,
    ratio_linear, training_flops_ratio,
)

print(f"{'T':>5} {'C':>5} {'analytic':>12} {'exact':>12} "
      f"{'rel.err':>8} {'attn x':>7} {'linear x':>9}")
for T in (8, 32, 128, 512):
    for C in (0, 16, 128):
        print(f"{T:>5} {C:>5} {attn_edges(T, C):>12.0f} "
              f"{exact_attn_edges(T, C):>12} "
              f"{1 / T:>8.4f} {ratio_attn(T, C):>7.3f} "
              f"{ratio_linear(T, C):>9.3f}")

print("\nattention share of training FLOPs and the packed-vs-sequential blend")
print(f"{'T':>5} {'d':>5} {'share':>7} {'training x':>11}")
for T in (64, 256, 1024):
    for d in (64, 256, 1024):
        s = attention_share(T, d)
        print(f"{T:>5} {d:>5} {s:>7.3f} {training_flops_ratio(T, d):>11.3f}")

print("\nfull report for one operating point (T=128 interactions, C=64, d=64):")
print(cost_report(128, 64, d=64).to_text())

print("\nsame point with the interleaved arrangement (tokens double):")
print(cost_report(128, 64, d=64, interleaved=True).to_text())
