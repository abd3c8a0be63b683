"""Ranking and regression metrics over held-out interactions.

Protocol: each evaluation sequence ends at its held-out interaction (step n).
The full sequence is tokenized and predictions are read at the token whose
target step is n, so every layout is scored exactly where its training loss
would have placed the prediction:

  retrieval  the token predicting item step n ranks the true item against
             either 99 seeded negatives or the full vocabulary.
  action     the token predicting action step n regresses a_n.  Same-step
             layouts naturally receive the ground-truth test item as input
             here; that is the protocol (the consumed item is known when the
             engagement with it is being predicted), not leakage.

Input channels at a read token that would resolve to the predicted value
itself are replaced by sentinels before the forward pass, so layouts that
train leakily are still evaluated legally.  Ranks break ties toward the
smaller item id, matching the top-k scorer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import UserSequence, subsystem_seed
from .inference import real_item_log_softmax
from .layouts import (
    ACT_SENTINEL, ACT_VALUE, N_RESERVED, SENTINEL_ID, TokenizedSequence,
    tokenize,
)
from .model import ActionStats, Model, collate

# -- pure metric functions ----------------------------------------------------


def hit_rate(ranks, k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("hit_rate: empty rank list")
    return float((ranks <= k).mean())


def ndcg_at(ranks, k: int) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("ndcg_at: empty rank list")
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(gains.mean())


def rmse(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-dimension root mean squared error over rows."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if pred.shape != truth.shape:
        raise ValueError(f"rmse: shape mismatch {pred.shape} vs {truth.shape}")
    return np.sqrt(((pred - truth) ** 2).mean(axis=0))


def rank_of(truth_id: int, truth_score: float, cand_ids: np.ndarray,
            cand_scores: np.ndarray) -> int:
    """1-based rank of the truth among candidates (ties favor smaller ids)."""
    better = int((cand_scores > truth_score).sum())
    tied = int(((cand_scores == truth_score) & (cand_ids < truth_id)).sum())
    return 1 + better + tied


# -- evaluation protocol ------------------------------------------------------


@dataclass
class EvalReport:
    layout: str
    protocol: str                    # "sampled-<n>" or "full-vocab"
    n_users: int
    ranked_users: int
    rmse_users: int
    ks: tuple[int, ...]
    hr: dict[int, float] | None
    ndcg: dict[int, float] | None
    rmse: np.ndarray | None          # (D,) original action units

    def to_json_dict(self) -> dict:
        return {
            "layout": self.layout,
            "protocol": self.protocol,
            "n_users": self.n_users,
            "ranked_users": self.ranked_users,
            "rmse_users": self.rmse_users,
            "ks": list(self.ks),
            "hr": None if self.hr is None else {str(k): v for k, v in self.hr.items()},
            "ndcg": None if self.ndcg is None else {str(k): v for k, v in self.ndcg.items()},
            "rmse": None if self.rmse is None else [float(x) for x in self.rmse],
        }

    def to_text(self) -> str:
        lines = [f"layout {self.layout}  ({self.protocol}, {self.n_users} users)"]
        if self.hr is not None:
            for k in self.ks:
                lines.append(f"  HR@{k}    {self.hr[k]:.4f}")
                lines.append(f"  NDCG@{k}  {self.ndcg[k]:.4f}")
        if self.rmse is not None:
            vals = ", ".join(f"{v:.4f}" for v in self.rmse)
            lines.append(f"  RMSE     {vals}")
        return "\n".join(lines)


def _sanitize_read_token(t: TokenizedSequence, idx: int, n: int,
                         allow_item_at_n: bool) -> None:
    """Replace inputs at a read token that would reveal step-n ground truth.

    `allow_item_at_n` is True for action reads: the consumed item is given
    when predicting the engagement with it.  Action values at step >= n are
    never legal inputs at a read token.
    """
    item_cut = n + 1 if allow_item_at_n else n
    if t.item_input_step[idx] >= item_cut:
        t.item_ids[idx] = SENTINEL_ID
        t.item_input_step[idx] = 0
    if t.action_kind[idx] == ACT_VALUE and t.action_input_step[idx] >= n:
        t.action_kind[idx] = ACT_SENTINEL
        t.action_input[idx] = 0.0
        t.action_input_step[idx] = 0


def _prepare(model: Model, u: UserSequence,
             stats: ActionStats) -> tuple[TokenizedSequence, int, int]:
    """Tokenize a full eval sequence and locate the step-n read tokens."""
    n = len(u)
    t = tokenize(model.spec, u.items, stats.normalize(u.actions).astype(np.float32))
    ret = np.flatnonzero(t.item_target_step == n)
    act = np.flatnonzero(t.action_target_step == n)
    ret_idx = int(ret[0]) if ret.size else -1
    act_idx = int(act[0]) if act.size else -1
    if ret_idx >= 0:
        _sanitize_read_token(t, ret_idx, n, allow_item_at_n=False)
    if act_idx >= 0:
        _sanitize_read_token(t, act_idx, n, allow_item_at_n=True)
    return t, ret_idx, act_idx


def _negatives(user: str, seen: np.ndarray, vocab_size: int,
               n_negatives: int, seed: int) -> np.ndarray:
    pool = np.setdiff1d(np.arange(N_RESERVED, vocab_size, dtype=np.int64), seen)
    rng = np.random.default_rng(subsystem_seed(seed, f"neg:{user}"))
    take = min(n_negatives, pool.size)
    return rng.choice(pool, size=take, replace=False)


def evaluate(model: Model, users: list[UserSequence], stats: ActionStats,
             ks: tuple[int, ...] = (5, 10), n_negatives: int = 99,
             seed: int = 0, full_vocab: bool = False,
             batch_size: int = 64) -> EvalReport:
    """Held-out evaluation of one trained model over eval sequences.

    Each sequence's final interaction is the target.  Retrieval ranks the true
    item against `n_negatives` seeded negatives drawn outside the user's whole
    history (or against the full vocabulary); regression compares the action
    prediction with the held-out value in original units.
    """
    if not users:
        raise ValueError("evaluate: empty user list")
    spec = model.spec
    V = model.config.vocab_size
    D = model.config.action_dims

    prepared = [(u, *_prepare(model, u, stats)) for u in users]
    ranks: list[int] = []
    sq_sum = np.zeros(D, dtype=np.float64)
    rmse_users = 0

    for lo in range(0, len(prepared), batch_size):
        chunk = prepared[lo:lo + batch_size]
        batch = collate([t for _, t, _, _ in chunk])
        out = model.forward(batch, train=False)

        ret_rows = [(r, c[2]) for r, c in enumerate(chunk) if c[2] >= 0]
        if ret_rows and out.item_logits is not None:
            rr = np.array([r for r, _ in ret_rows])
            cc = np.array([c for _, c in ret_rows])
            logp = real_item_log_softmax(out.item_logits.data[rr, cc])
            for (r, _), row_logp in zip(ret_rows, logp):
                u = chunk[r][0]
                truth = int(u.items[-1])
                if full_vocab:
                    cand = np.arange(N_RESERVED, V, dtype=np.int64)
                else:
                    cand = _negatives(u.user, u.items, V, n_negatives, seed)
                ranks.append(rank_of(truth, float(row_logp[truth]),
                                     cand, row_logp[cand]))

        act_rows = [(r, c[3]) for r, c in enumerate(chunk) if c[3] >= 0]
        if act_rows and out.action_pred is not None:
            rr = np.array([r for r, _ in act_rows])
            cc = np.array([c for _, c in act_rows])
            pred = stats.denormalize(out.action_pred.data[rr, cc].astype(np.float64))
            truth = np.stack([chunk[r][0].actions[-1] for r, _ in act_rows])
            sq_sum += ((pred - truth) ** 2).sum(axis=0)
            rmse_users += len(act_rows)

    hr = ndcg = None
    if ranks:
        arr = np.asarray(ranks)
        hr = {k: hit_rate(arr, k) for k in ks}
        ndcg = {k: ndcg_at(arr, k) for k in ks}
    rmse_vals = np.sqrt(sq_sum / rmse_users) if rmse_users else None

    return EvalReport(
        layout=spec.name,
        protocol="full-vocab" if full_vocab else f"sampled-{n_negatives}",
        n_users=len(users),
        ranked_users=len(ranks),
        rmse_users=rmse_users,
        ks=tuple(ks),
        hr=hr,
        ndcg=ndcg,
        rmse=rmse_vals,
    )
