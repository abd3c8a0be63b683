"""Interaction streams: TSV I/O, k-core filtering, splits, token batching.

The on-disk format is one interaction per line:

    user_id <TAB> item_id <TAB> action_0 [<TAB> action_k ...] <TAB> timestamp

with at least one action column.  User and item ids are opaque strings; the
indexing step maps items to contiguous integer ids starting after the reserved
vocabulary (PAD/UNK/SENTINEL), in order of first appearance in the
(user, timestamp)-sorted stream, which makes the mapping deterministic for a
given file.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .layouts import N_RESERVED, UNK_ID, LayoutSpec, token_count


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    actions: tuple[float, ...]
    ts: float


@dataclass
class UserSequence:
    """One user's interactions, time-ordered, items already integer-indexed."""
    user: str
    items: np.ndarray     # (T,) int64, ids in [N_RESERVED, vocab_size)
    actions: np.ndarray   # (T, D) float32
    ts: np.ndarray        # (T,) float64

    def __len__(self) -> int:
        return int(self.items.shape[0])

    def slice(self, start: int, stop: int) -> "UserSequence":
        return UserSequence(self.user, self.items[start:stop],
                            self.actions[start:stop], self.ts[start:stop])


def subsystem_seed(root: int, tag: str) -> int:
    """Stable per-subsystem seed derived from one root seed."""
    h = hashlib.sha256(f"{root}:{tag}".encode()).digest()
    return int.from_bytes(h[:8], "little")


# ---------------------------------------------------------------------------
# TSV I/O
# ---------------------------------------------------------------------------


def load_interactions(path: str, has_header: bool = False) -> list[Interaction]:
    """Parse the TSV format; malformed rows raise with their line number."""
    records: list[Interaction] = []
    n_actions: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if lineno == 1 and has_header:
                continue
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) < 4:
                raise ValueError(
                    f"{path}:{lineno}: expected user, item, >=1 action, timestamp "
                    f"(>=4 tab-separated columns), got {len(cols)}")
            user, item = cols[0], cols[1]
            try:
                actions = tuple(float(c) for c in cols[2:-1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric action column in {cols[2:-1]!r}")
            try:
                ts = float(cols[-1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: unparseable timestamp {cols[-1]!r}")
            if n_actions is None:
                n_actions = len(actions)
            elif len(actions) != n_actions:
                raise ValueError(
                    f"{path}:{lineno}: inconsistent action column count "
                    f"({len(actions)} vs {n_actions} on earlier lines)")
            records.append(Interaction(user, item, actions, ts))
    return records


def save_interactions(path: str, records: list[Interaction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            acts = "\t".join(repr(a) for a in r.actions)
            fh.write(f"{r.user}\t{r.item}\t{acts}\t{r.ts!r}\n")


# ---------------------------------------------------------------------------
# filtering and indexing
# ---------------------------------------------------------------------------


def k_core_filter(records: list[Interaction], k: int) -> list[Interaction]:
    """Drop users and items with fewer than k interactions, to a fixpoint."""
    if k <= 1:
        return list(records)
    current = list(records)
    while True:
        user_counts: dict[str, int] = {}
        item_counts: dict[str, int] = {}
        for r in current:
            user_counts[r.user] = user_counts.get(r.user, 0) + 1
            item_counts[r.item] = item_counts.get(r.item, 0) + 1
        kept = [r for r in current
                if user_counts[r.user] >= k and item_counts[r.item] >= k]
        if len(kept) == len(current):
            return kept
        current = kept


@dataclass
class ItemVocab:
    """Raw item key <-> contiguous model id (reserved ids come first)."""
    keys: list[str]                      # index 0 maps to id N_RESERVED
    id_of: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id_of:
            self.id_of = {k: i + N_RESERVED for i, k in enumerate(self.keys)}

    @property
    def size(self) -> int:
        """Total vocabulary size including the reserved ids."""
        return len(self.keys) + N_RESERVED


def index_items(records: list[Interaction]) -> tuple[ItemVocab, list[UserSequence]]:
    """Sort by (user, ts), assign item ids by first appearance, group by user."""
    order = sorted(range(len(records)), key=lambda i: (records[i].user, records[i].ts, i))
    keys: list[str] = []
    id_of: dict[str, int] = {}
    by_user: dict[str, list[Interaction]] = {}
    for i in order:
        r = records[i]
        if r.item not in id_of:
            id_of[r.item] = len(keys) + N_RESERVED
            keys.append(r.item)
        by_user.setdefault(r.user, []).append(r)
    vocab = ItemVocab(keys, id_of)
    users = []
    for user, rows in by_user.items():
        users.append(UserSequence(
            user=user,
            items=np.array([id_of[r.item] for r in rows], dtype=np.int64),
            actions=np.array([r.actions for r in rows], dtype=np.float32),
            ts=np.array([r.ts for r in rows], dtype=np.float64),
        ))
    return vocab, users


def apply_vocab(records: list[Interaction], vocab: ItemVocab) -> list[UserSequence]:
    """Group and index records against an existing vocabulary.

    Items the vocabulary has never seen map to the unknown id; use this when
    evaluating or scoring against a trained model, whose embedding rows are
    tied to its own vocabulary.
    """
    order = sorted(range(len(records)), key=lambda i: (records[i].user, records[i].ts, i))
    by_user: dict[str, list[Interaction]] = {}
    for i in order:
        r = records[i]
        by_user.setdefault(r.user, []).append(r)
    users = []
    for user, rows in by_user.items():
        users.append(UserSequence(
            user=user,
            items=np.array([vocab.id_of.get(r.item, UNK_ID) for r in rows], dtype=np.int64),
            actions=np.array([r.actions for r in rows], dtype=np.float32),
            ts=np.array([r.ts for r in rows], dtype=np.float64),
        ))
    return users


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass
class Split:
    """Per-user train sequences plus evaluation sequences.

    Each eval sequence is a full prefix ending at its held-out interaction;
    ``evaluate`` scores the final interaction of every sequence it is given.
    """
    train: list[UserSequence]
    val: list[UserSequence]
    test: list[UserSequence]
    excluded_users: int


def split_leave_one_out(users: list[UserSequence], min_len: int = 3) -> Split:
    """Last interaction is test, second-to-last is validation, rest is train.

    Users with fewer than `min_len` (>= 3) interactions are excluded entirely
    and counted in ``excluded_users``.
    """
    if min_len < 3:
        raise ValueError("split_leave_one_out: min_len below 3 cannot produce 3 parts")
    train, val, test = [], [], []
    excluded = 0
    for u in users:
        n = len(u)
        if n < min_len:
            excluded += 1
            continue
        train.append(u.slice(0, n - 2))
        val.append(u.slice(0, n - 1))      # prefix ending at the val interaction
        test.append(u)                      # full prefix ending at the test interaction
    return Split(train, val, test, excluded)


def split_last_day(users: list[UserSequence], day_seconds: float = 86400.0) -> Split:
    """Global temporal split: last observed day is test, the day before val.

    Eval sequences get one entry per held-out interaction, with everything
    before it (within the user) as prefix.  Users left with no earlier
    interactions contribute nothing to train and are not counted as excluded;
    the day boundary, not the user, decides membership here.
    """
    all_days = np.concatenate([np.floor(u.ts / day_seconds) for u in users if len(u)])
    if all_days.size == 0:
        raise ValueError("split_last_day: empty dataset")
    test_day = all_days.max()
    val_day = test_day - 1
    train, val, test = [], [], []
    for u in users:
        days = np.floor(u.ts / day_seconds)
        n_train = int((days < val_day).sum())
        if n_train:
            train.append(u.slice(0, n_train))
        for i in np.flatnonzero(days == val_day):
            if i >= 1:
                val.append(u.slice(0, int(i) + 1))
        for i in np.flatnonzero(days == test_day):
            if i >= 1:
                test.append(u.slice(0, int(i) + 1))
    return Split(train, val, test, 0)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def batch_by_tokens(users: list[UserSequence], max_tokens: int,
                    spec: LayoutSpec) -> list[list[UserSequence]]:
    """Greedy fill in the given order; a batch closes when the next user's
    token count (layout-inflated) would push it past the budget."""
    batches: list[list[UserSequence]] = []
    current: list[UserSequence] = []
    used = 0
    for u in users:
        need = token_count(spec, len(u))
        if need > max_tokens:
            raise ValueError(
                f"batch_by_tokens: user {u.user!r} needs {need} tokens under layout "
                f"{spec.name!r}, over the {max_tokens} budget")
        if current and used + need > max_tokens:
            batches.append(current)
            current, used = [], 0
        current.append(u)
        used += need
    if current:
        batches.append(current)
    return batches
