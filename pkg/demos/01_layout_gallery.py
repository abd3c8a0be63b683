"""Tour of the layout catalog and the three design principles.

Every layout is a small declarative spec: which channels each token reads,
which steps it predicts, whether items and actions share a token or get one
each, and how action predictions are conditioned on the item.  The validator
checks each spec symbolically, so a bad design is caught before any training.

Run:  python3 demos/01_layout_gallery.py
"""

from grlayout.layouts import ANTI_PATTERNS, PRESETS
from grlayout.validation import dominates, validate

# -- the catalog ---------------------------------------------------------------

print("=" * 72)
print("PRESETS")
print("=" * 72)
for name in sorted(PRESETS):
    spec = PRESETS[name]
    ins = ",".join(str(c) for c in spec.inputs)
    outs = ",".join(str(c) for c in spec.targets)
    print(f"{name:<22} inputs: {ins:<24} targets: {outs:<22} "
          f"{spec.arrangement.name}/{spec.conditioning.name}")

print()
print("=" * 72)
print("ANTI-PATTERNS (kept around as negative controls)")
print("=" * 72)
for name in sorted(ANTI_PATTERNS):
    spec = ANTI_PATTERNS[name]
    ins = ",".join(str(c) for c in spec.inputs)
    outs = ",".join(str(c) for c in spec.targets)
    print(f"{name:<28} inputs: {ins:<24} targets: {outs}")

# -- validation ----------------------------------------------------------------
# P1: does another layout see strictly more history for the same targets?
# P2: is each action prediction conditioned on the item it describes?
# P3: does any input reveal a value the same token is trained to predict?
# P3 is the only fatal check; P1/P2 grade design quality.

print()
print("=" * 72)
print("VALIDATION SUMMARY")
print("=" * 72)
everything = {**PRESETS, **ANTI_PATTERNS}
for name in sorted(everything):
    r = validate(everything[name])
    flag = "ok  " if r.overall_pass else "LEAK"
    print(f"{flag} {name:<28} P1={r.p1.verdict:<4} P2={r.p2.verdict:<4} "
          f"P3={r.p3.verdict}")

print()
print("One report in full:")
print(validate(PRESETS["LAC"]).to_text())

# -- dominance -----------------------------------------------------------------
# A layout dominates another when it predicts the same channels but every
# prediction is made with at least as much history, strictly more somewhere.

print()
print("=" * 72)
print("DOMINANCE (strictly more context for identical targets)")
print("=" * 72)
names = sorted(everything)
for a in names:
    beats = [b for b in names if dominates(everything[a], everything[b])]
    if beats:
        print(f"{a:<22} dominates  {', '.join(beats)}")
