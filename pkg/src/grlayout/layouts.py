"""Token layouts: how interaction sequences become token streams.

A layout says, for every interaction step t, which channels feed the token's
input (item ids, action values, at arbitrary step offsets) and which channels
the token is trained to predict.  Offsets are relative to t: ``ITEM@0`` is the
current item, ``ACTION@-1`` the previous action, ``ITEM@+1`` the next item.

Two arrangements exist.  NON_INTERLEAVED fuses each interaction into one token
(sequence length T); INTERLEAVED emits an item token then an action token per
interaction (length 2T), and the per-role targets are fixed: item tokens
predict their own step's action, action tokens predict the next item.

Conditioning modes for action targets:
  NONE     action heads read the trunk state directly.
  LAGGED   the token input already contains the target step's item (and the
           lagged action), so the trunk state is target-aware by construction.
  PATCHED  a late-fusion coupler combines the trunk state with the embedding
           of the (teacher-forced) target item.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass

import numpy as np

# Reserved vocabulary ids, shared by tokenizer, model, and metrics.
PAD_ID = 0
UNK_ID = 1
SENTINEL_ID = 2
N_RESERVED = 3

# Per-token action-input kinds in TokenizedSequence.action_kind.
ACT_NONE = 0      # layout has no action channel at this token
ACT_VALUE = 1     # real action value present
ACT_SENTINEL = 2  # channel exists but is out of range; model substitutes a learned vector


class Kind(enum.Enum):
    ITEM = "ITEM"
    ACTION = "ACTION"


class Arrangement(enum.Enum):
    NON_INTERLEAVED = "NON_INTERLEAVED"
    INTERLEAVED = "INTERLEAVED"


class Conditioning(enum.Enum):
    NONE = "NONE"
    LAGGED = "LAGGED"
    PATCHED = "PATCHED"


@dataclass(frozen=True)
class ChannelRef:
    """One channel at a step offset, e.g. ACTION@-1."""
    kind: Kind
    offset: int

    def __lt__(self, other: "ChannelRef") -> bool:
        return (self.kind.value, self.offset) < (other.kind.value, other.offset)

    def __str__(self) -> str:
        return f"{self.kind.value}@{self.offset:+d}" if self.offset else f"{self.kind.value}@0"

    @staticmethod
    def parse(text: str) -> "ChannelRef":
        m = re.fullmatch(r"(ITEM|ACTION)@([+-]?\d+)", text.strip())
        if not m:
            raise ValueError(f"bad channel ref {text!r}, expected e.g. ITEM@0 or ACTION@-1")
        return ChannelRef(Kind(m.group(1)), int(m.group(2)))


def item(offset: int) -> ChannelRef:
    return ChannelRef(Kind.ITEM, offset)


def action(offset: int) -> ChannelRef:
    return ChannelRef(Kind.ACTION, offset)


@dataclass(frozen=True)
class LayoutSpec:
    """A named layout: input channels, target channels, arrangement, conditioning."""

    name: str
    inputs: frozenset[ChannelRef]
    targets: frozenset[ChannelRef]
    arrangement: Arrangement = Arrangement.NON_INTERLEAVED
    conditioning: Conditioning = Conditioning.NONE

    def __post_init__(self):
        if not self.targets:
            raise ValueError(f"layout {self.name!r}: target set must be non-empty")
        if self.arrangement is Arrangement.INTERLEAVED:
            forced = frozenset({item(0), action(0)})
            if self.inputs != forced:
                raise ValueError(
                    f"layout {self.name!r}: INTERLEAVED forces inputs {{ITEM@0, ACTION@0}} "
                    f"as alternating tokens, got {sorted(map(str, self.inputs))}")
        if self.conditioning is Conditioning.LAGGED:
            if action(-1) not in self.inputs or action(0) not in self.targets:
                raise ValueError(
                    f"layout {self.name!r}: LAGGED conditioning requires ACTION@-1 in inputs "
                    f"and ACTION@0 in targets")
        if self.conditioning is Conditioning.PATCHED and not self.action_targets():
            raise ValueError(
                f"layout {self.name!r}: PATCHED conditioning requires an ACTION target")

    def item_inputs(self) -> list[ChannelRef]:
        return sorted(r for r in self.inputs if r.kind is Kind.ITEM)

    def action_inputs(self) -> list[ChannelRef]:
        return sorted(r for r in self.inputs if r.kind is Kind.ACTION)

    def item_targets(self) -> list[ChannelRef]:
        return sorted(r for r in self.targets if r.kind is Kind.ITEM)

    def action_targets(self) -> list[ChannelRef]:
        return sorted(r for r in self.targets if r.kind is Kind.ACTION)

    def predicts_items(self) -> bool:
        return bool(self.item_targets())

    def predicts_actions(self) -> bool:
        return bool(self.action_targets())

    # -- text format --------------------------------------------------------

    def to_text(self) -> str:
        """Serialize to the line-oriented layout format (round-trips with parse)."""
        lines = [
            f"name={self.name}",
            "inputs=" + ",".join(str(r) for r in sorted(self.inputs)),
            "targets=" + ",".join(str(r) for r in sorted(self.targets)),
            f"arrangement={self.arrangement.value}",
            f"conditioning={self.conditioning.value}",
        ]
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "LayoutSpec":
        fields: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"layout text line {lineno}: expected key=value, got {raw!r}")
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
        missing = {"name", "inputs", "targets"} - fields.keys()
        if missing:
            raise ValueError(f"layout text: missing keys {sorted(missing)}")
        refs = lambda s: frozenset(ChannelRef.parse(p) for p in s.split(",") if p.strip())
        return LayoutSpec(
            name=fields["name"],
            inputs=refs(fields["inputs"]),
            targets=refs(fields["targets"]),
            arrangement=Arrangement(fields.get("arrangement", "NON_INTERLEAVED")),
            conditioning=Conditioning(fields.get("conditioning", "NONE")),
        )


def _spec(name, inputs, targets, arrangement=Arrangement.NON_INTERLEAVED,
          conditioning=Conditioning.NONE) -> LayoutSpec:
    return LayoutSpec(name, frozenset(inputs), frozenset(targets), arrangement, conditioning)


# The eleven named presets of the design grid.  Naming scheme: what goes in,
# what comes out, how the action head is conditioned.
PRESETS: dict[str, LayoutSpec] = {s.name: s for s in [
    _spec("ITEM_ONLY", [item(0)], [item(+1)]),
    _spec("INPUT_IA", [item(0), action(0)], [item(+1)]),
    _spec("INPUT_I_LAGA", [item(0), action(-1)], [item(+1)]),
    _spec("OUT_SAMESTEP_A", [item(0)], [action(0)]),
    _spec("OUT_NEXT_A", [item(0)], [action(+1)]),
    _spec("OUT_IA", [item(0)], [item(+1), action(+1)]),
    _spec("IO_IA_NEXTA", [item(0), action(0)], [action(+1)]),
    _spec("LAC", [item(0), action(-1)], [item(+1), action(0)],
          conditioning=Conditioning.LAGGED),
    _spec("IO_IA_BOTH", [item(0), action(0)], [item(+1), action(+1)]),
    _spec("IO_IA_BOTH_PC", [item(0), action(0)], [item(+1), action(+1)],
          conditioning=Conditioning.PATCHED),
    _spec("INTERLEAVED", [item(0), action(0)], [item(+1), action(+1)],
          arrangement=Arrangement.INTERLEAVED),
]}

# Named negative layouts: the classic ways to get a layout wrong.  The first
# two leak the target action into its own conditioning (P3), the last two ask
# for next-step actions without any item conditioning (P2).
ANTI_PATTERNS: dict[str, LayoutSpec] = {s.name: s for s in [
    _spec("ANTI_SELF_ACTION", [item(0), action(0)], [action(0)]),
    _spec("ANTI_SELF_ACTION_NEXT_ITEM", [item(0), action(0)], [action(0), item(+1)]),
    _spec("ANTI_UNCOND_NEXT_ACTION", [item(0)], [action(+1)]),
    _spec("ANTI_UNCOND_JOINT", [item(0)], [item(+1), action(+1)]),
]}


def preset(name: str) -> LayoutSpec:
    if name in PRESETS:
        return PRESETS[name]
    if name in ANTI_PATTERNS:
        return ANTI_PATTERNS[name]
    known = sorted(PRESETS) + sorted(ANTI_PATTERNS)
    raise KeyError(f"unknown layout preset {name!r}; known: {', '.join(known)}")


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------


@dataclass
class TokenizedSequence:
    """One user's interactions rendered as model-ready token arrays.

    All arrays have leading length L (= T for NON_INTERLEAVED, 2T for
    INTERLEAVED).  Step indices are 1-based interaction positions; a step of 0
    in the *_step arrays means "nothing resolves here".
    """

    spec_name: str
    n_interactions: int
    item_ids: np.ndarray             # (L,) int64, SENTINEL_ID where no item content
    item_input_step: np.ndarray      # (L,) int32, which interaction the item input came from
    action_kind: np.ndarray          # (L,) int8, ACT_NONE / ACT_VALUE / ACT_SENTINEL
    action_input: np.ndarray         # (L, D) float32, zeros unless ACT_VALUE
    action_input_step: np.ndarray    # (L,) int32
    item_target: np.ndarray          # (L,) int64, PAD_ID where excluded
    item_target_inc: np.ndarray      # (L,) bool
    item_target_step: np.ndarray     # (L,) int32
    action_target: np.ndarray        # (L, D) float32
    action_target_inc: np.ndarray    # (L,) bool
    action_target_step: np.ndarray   # (L,) int32
    action_target_item: np.ndarray   # (L,) int64, item at the action target's step (teacher signal)
    token_step: np.ndarray           # (L,) int32, owning interaction step
    token_role: np.ndarray           # (L,) int8, 0 fused / 1 item token / 2 action token

    @property
    def length(self) -> int:
        return int(self.item_ids.shape[0])

    @property
    def action_dims(self) -> int:
        return int(self.action_input.shape[1])


def token_count(spec: LayoutSpec, n_interactions: int) -> int:
    """Tokens a sequence of n interactions produces under this layout."""
    if spec.arrangement is Arrangement.INTERLEAVED:
        return 2 * n_interactions
    return n_interactions


def tokenize(spec: LayoutSpec, items: np.ndarray, actions: np.ndarray) -> TokenizedSequence:
    """Render `items` (T,) int and `actions` (T, D) float as a token sequence.

    Channels that resolve outside [1, T] become sentinels on the input side and
    loss-exclusions on the target side.  The engine handles one item input,
    at most one action input, at most one item target, and at most one action
    target per layout; the symbolic validator has no such limit.
    """
    items = np.asarray(items, dtype=np.int64)
    actions = np.asarray(actions)
    if actions.ndim == 1:
        actions = actions[:, None]
    T = int(items.shape[0])
    if actions.shape[0] != T:
        raise ValueError(f"tokenize: {T} items but {actions.shape[0]} action rows")
    if T < 1:
        raise ValueError("tokenize: empty sequence")
    D = int(actions.shape[1])

    if spec.arrangement is Arrangement.INTERLEAVED:
        return _tokenize_interleaved(spec, items, actions, T, D)

    ii = spec.item_inputs()
    ai = spec.action_inputs()
    it = spec.item_targets()
    at = spec.action_targets()
    if len(ii) != 1:
        raise ValueError(f"tokenize: layout {spec.name!r} needs exactly one ITEM input channel")
    if len(ai) > 1 or len(it) > 1 or len(at) > 1:
        raise ValueError(
            f"tokenize: layout {spec.name!r} has more channels than the engine renders "
            f"(max one action input, one item target, one action target)")

    steps = np.arange(1, T + 1, dtype=np.int64)

    def resolve(offset: int) -> tuple[np.ndarray, np.ndarray]:
        idx = steps + offset
        ok = (idx >= 1) & (idx <= T)
        return idx, ok

    seq = _empty_tokens(spec.name, T, T, D)
    seq.token_step[:] = steps

    idx, ok = resolve(ii[0].offset)
    seq.item_ids[:] = np.where(ok, items[np.clip(idx - 1, 0, T - 1)], SENTINEL_ID)
    seq.item_input_step[:] = np.where(ok, idx, 0)

    if ai:
        idx, ok = resolve(ai[0].offset)
        seq.action_kind[:] = np.where(ok, ACT_VALUE, ACT_SENTINEL).astype(np.int8)
        seq.action_input[:] = np.where(ok[:, None], actions[np.clip(idx - 1, 0, T - 1)], 0.0)
        seq.action_input_step[:] = np.where(ok, idx, 0)

    if it:
        idx, ok = resolve(it[0].offset)
        seq.item_target[:] = np.where(ok, items[np.clip(idx - 1, 0, T - 1)], PAD_ID)
        seq.item_target_inc[:] = ok
        seq.item_target_step[:] = np.where(ok, idx, 0)

    if at:
        idx, ok = resolve(at[0].offset)
        seq.action_target[:] = np.where(ok[:, None], actions[np.clip(idx - 1, 0, T - 1)], 0.0)
        seq.action_target_inc[:] = ok
        seq.action_target_step[:] = np.where(ok, idx, 0)
        seq.action_target_item[:] = np.where(ok, items[np.clip(idx - 1, 0, T - 1)], PAD_ID)

    return seq


def _tokenize_interleaved(spec, items, actions, T, D) -> TokenizedSequence:
    # Fixed roles: item token of step t predicts a_t (the action that follows
    # it in the stream); action token of step t predicts i_{t+1}.
    expected = frozenset({item(+1), action(+1)})
    if spec.targets != expected:
        raise ValueError(
            f"tokenize: INTERLEAVED layout {spec.name!r} must target "
            f"{{ITEM@+1, ACTION@+1}}, got {sorted(map(str, spec.targets))}")
    L = 2 * T
    seq = _empty_tokens(spec.name, T, L, D)
    even = np.arange(0, L, 2)
    odd = np.arange(1, L, 2)
    steps = np.arange(1, T + 1, dtype=np.int64)
    seq.token_step[even] = steps
    seq.token_step[odd] = steps
    seq.token_role[even] = 1
    seq.token_role[odd] = 2

    # Item tokens: carry the item, predict the same step's action.
    seq.item_ids[even] = items
    seq.item_input_step[even] = steps
    seq.action_target[even] = actions
    seq.action_target_inc[even] = True
    seq.action_target_step[even] = steps
    seq.action_target_item[even] = items

    # Action tokens: carry the action, predict the next item.
    seq.action_kind[odd] = ACT_VALUE
    seq.action_input[odd] = actions
    seq.action_input_step[odd] = steps
    nxt_ok = steps + 1 <= T
    seq.item_target[odd] = np.where(nxt_ok, np.roll(items, -1), PAD_ID)
    seq.item_target_inc[odd] = nxt_ok
    seq.item_target_step[odd] = np.where(nxt_ok, steps + 1, 0)
    return seq


def _empty_tokens(name: str, T: int, L: int, D: int) -> TokenizedSequence:
    return TokenizedSequence(
        spec_name=name,
        n_interactions=T,
        item_ids=np.full(L, SENTINEL_ID, dtype=np.int64),
        item_input_step=np.zeros(L, dtype=np.int32),
        action_kind=np.full(L, ACT_NONE, dtype=np.int8),
        action_input=np.zeros((L, D), dtype=np.float32),
        action_input_step=np.zeros(L, dtype=np.int32),
        item_target=np.full(L, PAD_ID, dtype=np.int64),
        item_target_inc=np.zeros(L, dtype=bool),
        item_target_step=np.zeros(L, dtype=np.int32),
        action_target=np.zeros((L, D), dtype=np.float32),
        action_target_inc=np.zeros(L, dtype=bool),
        action_target_step=np.zeros(L, dtype=np.int32),
        action_target_item=np.full(L, PAD_ID, dtype=np.int64),
        token_step=np.zeros(L, dtype=np.int32),
        token_role=np.zeros(L, dtype=np.int8),
    )
