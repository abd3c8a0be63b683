"""What a layout actually does to a sequence: tokens, targets, and masks.

The same five interactions are rendered under three layouts so the token
tables can be compared side by side.  The second half builds the candidate
visibility mask used for parallel scoring and counts its edges against the
closed-form cost model.

Run:  python3 demos/02_tokens_and_masks.py
"""

import numpy as np

from grlayout.costs import attn_edges, exact_attn_edges
from grlayout.layouts import N_RESERVED, preset, tokenize
from grlayout.masks import build_mask, count_mask_edges

items = np.array([7, 4, 9, 4, 11]) + N_RESERVED
actions = np.array([[0.5], [-1.0], [2.0], [0.0], [1.5]])

for name in ("LAC", "IO_IA_BOTH_PC", "INTERLEAVED"):
    spec = preset(name)
    t = tokenize(spec, items, actions)
    print("=" * 78)
    print(f"{name}: {len(items)} interactions -> {t.length} tokens")
    print("=" * 78)
    header = (f"{'tok':>3} {'step':>4} {'item_in':>8} {'act_in':>7} "
              f"{'item_tgt':>9} {'act_tgt':>8} {'role':>4}")
    print(header)
    for i in range(t.length):
        item_tgt = (str(int(t.item_target[i]))
                    if t.item_target_inc[i] else ".")
        act_tgt = (f"{float(t.action_target[i, 0]):+.1f}"
                   if t.action_target_inc[i] else ".")
        act_in = (f"{float(t.action_input[i, 0]):+.1f}"
                  if t.action_kind[i] == 1 else
                  ("SENT" if t.action_kind[i] == 2 else "."))
        print(f"{i:>3} {int(t.token_step[i]):>4} {int(t.item_ids[i]):>8} "
              f"{act_in:>7} {item_tgt:>9} {act_tgt:>8} "
              f"{int(t.token_role[i]):>4}")
    print()

# -- the candidate mask ---------------------------------------------------------
# Scoring appends C candidate tokens after T history tokens.  Candidates see
# all history plus themselves; history rows never see any candidate, so one
# forward pass scores every candidate without contaminating the history.

T, C = 6, 3
mask = build_mask(T, C)
print("=" * 78)
print(f"candidate mask for T={T} history tokens and C={C} candidates")
print("=" * 78)
for r in range(mask.length):
    row = "".join("#" if mask.allowed[r, c] else "." for c in range(mask.length))
    tag = "hist" if r < T else "cand"
    print(f"{tag} {r:>2} {row}")

edges = count_mask_edges(mask)
print(f"\nallowed edges counted: {edges}")
print(f"exact closed form:     {exact_attn_edges(T, C)}")
print(f"analytic T^2/2 + CT:   {attn_edges(T, C):.0f} "
      f"(relative error is exactly 1/T = {1 / T:.4f})")
