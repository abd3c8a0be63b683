"""Layout validation: the three principles a token layout must respect.

P1 (context): among layouts with identical targets, prefer the one whose
    per-target conditioning sets strictly contain the other's.  Dominance is
    strict set containment, so it forms a strict partial order; a layout that
    is dominated by some named baseline gets a P1 FAIL (context left on the
    table).
P2 (action-given-item): every ACTION target at offset k must have ITEM@k in
    its conditioning set, either as a direct input, through a PATCHED coupler,
    or through INTERLEAVED same-step visibility.  Failing P2 is a quality
    warning, not an error: such layouts train, they just predict actions for
    an unknown item.
P3 (no self-label leakage): no target may appear in the visible input closure
    of the token that predicts it.  Failing P3 is fatal; the trainer refuses
    these layouts unless explicitly overridden.

Conditioning sets are closures over step offsets: an input channel KIND@j at
every history token makes KIND@j' visible for all j' <= j, because the
predicting token sees every earlier token.  A closure is therefore a per-kind
maximum offset, plus isolated ITEM offsets contributed by PATCHED couplers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layouts import (
    Arrangement, ChannelRef, Conditioning, Kind, LayoutSpec, PRESETS,
    token_count, tokenize,
)
from .masks import build_mask

PASS = "PASS"
FAIL = "FAIL"


@dataclass(frozen=True)
class CondSet:
    """Conditioning closure: per-kind max visible offset (None = nothing)."""

    item_max: int | None
    action_max: int | None
    item_extra: frozenset[int] = frozenset()

    def __post_init__(self):
        # Normal form: fold extras that touch the contiguous range into the
        # max, drop extras the range already covers.  Equal sets then compare
        # equal regardless of how they were assembled.
        im, extra = self.item_max, set(self.item_extra)
        if im is not None:
            while im + 1 in extra:
                extra.discard(im + 1)
                im += 1
            extra = {k for k in extra if k > im}
        object.__setattr__(self, "item_max", im)
        object.__setattr__(self, "item_extra", frozenset(extra))

    def has(self, ref: ChannelRef) -> bool:
        if ref.kind is Kind.ITEM:
            if self.item_max is not None and ref.offset <= self.item_max:
                return True
            return ref.offset in self.item_extra
        return self.action_max is not None and ref.offset <= self.action_max

    def covers(self, other: "CondSet") -> bool:
        if other.item_max is not None:
            if self.item_max is None or self.item_max < other.item_max:
                return False
        if other.action_max is not None:
            if self.action_max is None or self.action_max < other.action_max:
                return False
        return all(self.has(ChannelRef(Kind.ITEM, k)) for k in other.item_extra)

    def strictly_covers(self, other: "CondSet") -> bool:
        return self.covers(other) and not other.covers(self)


def _base_closure(spec: LayoutSpec) -> CondSet:
    item_offs = [r.offset for r in spec.item_inputs()]
    act_offs = [r.offset for r in spec.action_inputs()]
    return CondSet(max(item_offs) if item_offs else None,
                   max(act_offs) if act_offs else None)


def conditioning_set(spec: LayoutSpec, target: ChannelRef) -> CondSet:
    """Everything visible to the prediction of `target` under this layout."""
    if spec.arrangement is Arrangement.INTERLEAVED:
        if target.kind is Kind.ITEM:
            # Predicted from the action token one step before the target.
            return CondSet(target.offset - 1, target.offset - 1)
        # Predicted from the target step's own item token.
        return CondSet(target.offset, target.offset - 1)
    base = _base_closure(spec)
    if target.kind is Kind.ACTION and spec.conditioning is Conditioning.PATCHED:
        return CondSet(base.item_max, base.action_max,
                       base.item_extra | {target.offset})
    return base


@dataclass
class PrincipleVerdict:
    verdict: str
    details: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.verdict == PASS


@dataclass
class P1Verdict(PrincipleVerdict):
    dominates: list[str] = field(default_factory=list)
    dominated_by: list[str] = field(default_factory=list)


@dataclass
class ValidationReport:
    name: str
    p1: P1Verdict
    p2: PrincipleVerdict
    p3: PrincipleVerdict

    @property
    def overall_pass(self) -> bool:
        # P3 is the only fatal principle: leaky layouts are wrong, not weak.
        return self.p3.passed

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "P1": {"verdict": self.p1.verdict, "dominates": self.p1.dominates,
                   "dominated_by": self.p1.dominated_by},
            "P2": {"verdict": self.p2.verdict, "details": self.p2.details},
            "P3": {"verdict": self.p3.verdict, "details": self.p3.details},
            "overall_pass": self.overall_pass,
        }

    def to_text(self) -> str:
        lines = [f"layout {self.name}"]
        lines.append(f"  P1 context      {self.p1.verdict}"
                     + (f"  dominated by: {', '.join(self.p1.dominated_by)}"
                        if self.p1.dominated_by else "")
                     + (f"  dominates: {', '.join(self.p1.dominates)}"
                        if self.p1.dominates else ""))
        lines.append(f"  P2 conditioning {self.p2.verdict}"
                     + "".join(f"  [{d['target']} missing {d['missing']}]"
                               for d in self.p2.details if d.get("missing")))
        lines.append(f"  P3 leakage      {self.p3.verdict}"
                     + "".join(f"  [{d['target']} leaks via {d['via']}]"
                               for d in self.p3.details))
        lines.append(f"  overall         {'PASS' if self.overall_pass else 'FAIL'}")
        return "\n".join(lines)


def dominates(a: LayoutSpec, b: LayoutSpec) -> bool:
    """True when a's input context strictly contains b's and targets coincide.

    Context means the history channels a layout feeds the trunk, so PATCHED
    couplers and interleaved same-step visibility do not enter here; they are
    target-side conditioning and belong to P2.
    """
    if a.targets != b.targets:
        return False
    ca, cb = _base_closure(a), _base_closure(b)
    return ca.strictly_covers(cb)


def validate(spec: LayoutSpec,
             baselines: dict[str, LayoutSpec] | None = None) -> ValidationReport:
    """Check the three principles; baselines default to the preset grid."""
    if baselines is None:
        baselines = PRESETS

    # P3: self-label leakage, per target.
    p3_details = []
    for tgt in sorted(spec.targets):
        cond = conditioning_set(spec, tgt)
        if cond.has(tgt):
            via = _leak_witness(spec, tgt)
            p3_details.append({"target": str(tgt), "via": via})
    p3 = PrincipleVerdict(FAIL if p3_details else PASS, p3_details)

    # P2: action targets must be conditioned on their step's item.
    p2_details = []
    p2_ok = True
    for tgt in spec.action_targets():
        cond = conditioning_set(spec, tgt)
        need = ChannelRef(Kind.ITEM, tgt.offset)
        if cond.has(need):
            p2_details.append({"target": str(tgt), "via": _p2_mechanism(spec, tgt)})
        else:
            p2_ok = False
            p2_details.append({"target": str(tgt), "missing": str(need)})
    p2 = PrincipleVerdict(PASS if p2_ok else FAIL, p2_details)

    # P1: dominance relations against the named baselines.
    dom, dom_by = [], []
    for name, base in sorted(baselines.items()):
        if name == spec.name:
            continue
        if dominates(spec, base):
            dom.append(name)
        if dominates(base, spec):
            dom_by.append(name)
    p1 = P1Verdict(FAIL if dom_by else PASS, dominates=dom, dominated_by=dom_by)

    return ValidationReport(spec.name, p1, p2, p3)


def _p2_mechanism(spec: LayoutSpec, tgt: ChannelRef) -> str:
    if spec.arrangement is Arrangement.INTERLEAVED:
        return "same-step visibility"
    if _base_closure(spec).has(ChannelRef(Kind.ITEM, tgt.offset)):
        return "direct input"
    return "patched coupling"


def _leak_witness(spec: LayoutSpec, tgt: ChannelRef) -> str:
    if spec.arrangement is Arrangement.INTERLEAVED:
        return "interleaved stream"
    offenders = [r for r in spec.inputs if r.kind is tgt.kind and r.offset >= tgt.offset]
    return ", ".join(str(r) for r in sorted(offenders)) or "closure"


# ---------------------------------------------------------------------------
# concrete cross-check against tokenizer + mask
# ---------------------------------------------------------------------------


def concrete_leaks(spec: LayoutSpec, n_interactions: int) -> list[dict]:
    """Enumerate actual leak pairs on a materialized sequence.

    Tokenizes a synthetic index sequence, builds the training mask, and checks
    every loss-included target against the inputs of every visible token.
    Returns one record per violation; empty means the layout is leak-free at
    this length.  This is the brute-force oracle for the symbolic P3 check.
    """
    T = n_interactions
    items = np.arange(100, 100 + T, dtype=np.int64)  # distinct, out of reserved range
    actions = np.arange(1, T + 1, dtype=np.float32)[:, None]
    seq = tokenize(spec, items, actions)
    mask = build_mask(token_count(spec, T)).allowed
    L = seq.length
    leaks = []
    for q in range(L):
        visible = np.flatnonzero(mask[q])
        vis_items = {int(seq.item_input_step[j]) for j in visible
                     if seq.item_input_step[j] > 0}
        vis_actions = {int(seq.action_input_step[j]) for j in visible
                       if seq.action_input_step[j] > 0}
        if seq.item_target_inc[q] and int(seq.item_target_step[q]) in vis_items:
            leaks.append({"token": q, "target": f"ITEM step {int(seq.item_target_step[q])}"})
        if seq.action_target_inc[q] and int(seq.action_target_step[q]) in vis_actions:
            leaks.append({"token": q, "target": f"ACTION step {int(seq.action_target_step[q])}"})
    return leaks
