"""Where does a trained lagged layout look?  Inspecting attention directly.

A LAC model inputs last step's action next to this step's item, so heads that
carry the engagement signal should place mass on the previous token.  The
probe runs a diagnostic sequence (one repeated real item amid unknowns),
captures every attention map, and reports row sums (must be exactly 1), mass
on masked positions (must be exactly 0), and the lag-1 mass per head.

Run:  python3 demos/06_attention_probe.py      (about a minute)
"""

import numpy as np

from grlayout.inference import attention_probe, probe_items
from grlayout.layouts import N_RESERVED, preset
from grlayout.model import ModelConfig
from grlayout.synthetic import SyntheticConfig, generate_synthetic
from grlayout.training import TrainConfig, build_model, train

sc = SyntheticConfig(users=500, items=100, min_len=10, max_len=30,
                     cue_strength=1.2)
users, _ = generate_synthetic(sc, seed=0)
mc = ModelConfig(vocab_size=sc.items + N_RESERVED, d=32, n_layers=2,
                 n_heads=4, max_seq_len=31)
model = build_model(preset("LAC"), mc, seed=0)
print("training a small LAC model ...")
res = train(model, users, TrainConfig(steps=120, batch_size=64, seed=0,
                                      warmup_steps=20))
print(f"final loss {res.curve[-1]['loss']:.4f}")

probe = attention_probe(model)
print(f"\nprobe sequence item ids: {probe_items(model).tolist()}")
print(f"captured maps: {probe.maps.shape[0]} layers x "
      f"{probe.maps.shape[1]} heads x {probe.maps.shape[2]} tokens")
print(f"row-sum max deviation from 1: {np.abs(probe.row_sums() - 1).max():.2e}")
print(f"mass on masked (future) positions: {probe.masked_mass():.2e}")
print(f"lag-1 mass per head (last layer): "
      f"{', '.join(f'{v:.3f}' for v in probe.lag_mass())}")

print("\nlast layer, head with the strongest lag-1 focus:")
h = int(np.argmax(probe.lag_mass()))
for r, row in enumerate(probe.last_layer[h]):
    cells = " ".join(f"{v:.2f}" for v in row)
    print(f"  tok {r}: {cells}")
