"""Candidate scoring and attention inspection for trained models.

Retrieval scores come from the history token that predicts the next item:
log p(i_{T+1} = c | history) under the full-vocabulary softmax (reserved ids
excluded).  Action scores estimate E[a_{T+1} | i_{T+1} = c, history]; how the
candidate item enters depends on the layout:

  same-step targets   one hypothetical step-(T+1) token per candidate is
                      appended after the history.  All candidate tokens share
                      position index L_hist and a block mask: history rows are
                      causal and cannot see candidates, candidate rows see the
                      history and themselves only.  One forward pass scores
                      every candidate; the mask guarantees independence.
  patched coupling    the trunk is run on history alone and the coupler is
                      batched over candidate embeddings.
  next-step, no item  the prediction cannot depend on the candidate; the one
                      trunk-state estimate is broadcast to all candidates.

`score_sequential_oracle` scores candidates one at a time with a plain causal
mask, the obviously-correct reference the parallel path must match.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layouts import (
    ACT_NONE, ACT_SENTINEL, ACT_VALUE, Arrangement, Conditioning, LayoutSpec,
    N_RESERVED, PAD_ID, SENTINEL_ID, TokenizedSequence, UNK_ID, tokenize,
)
from .masks import build_mask
from .model import ActionStats, Model, TokenBatch
from .tensor import Tensor


def retrieve_topk(candidate_ids: np.ndarray, scores: np.ndarray,
                  k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k by score, ties broken toward the smaller id."""
    candidate_ids = np.asarray(candidate_ids)
    scores = np.asarray(scores)
    if candidate_ids.shape != scores.shape:
        raise ValueError("retrieve_topk: ids and scores must align")
    order = np.lexsort((candidate_ids, -scores))[:k]
    return candidate_ids[order], scores[order]


def real_item_log_softmax(logits: np.ndarray) -> np.ndarray:
    """Log-probabilities over real items; reserved ids get -inf."""
    x = logits.astype(np.float64).copy()
    x[..., :N_RESERVED] = -np.inf
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    out = x - lse
    out[..., :N_RESERVED] = -np.inf
    return out


@dataclass
class ScoreTable:
    """Per-candidate scores; action predictions are in original units."""
    candidate_ids: np.ndarray            # (C,)
    retrieval_logprob: np.ndarray | None  # (C,)
    action_pred: np.ndarray | None        # (C, D)

    def to_csv(self) -> str:
        cols = ["candidate_id"]
        if self.retrieval_logprob is not None:
            cols.append("retrieval_logprob")
        D = 0 if self.action_pred is None else self.action_pred.shape[1]
        cols += [f"action_{d}" for d in range(D)]
        lines = [",".join(cols)]
        for i, cid in enumerate(self.candidate_ids):
            row = [str(int(cid))]
            if self.retrieval_logprob is not None:
                row.append(repr(float(self.retrieval_logprob[i])))
            for d in range(D):
                row.append(repr(float(self.action_pred[i, d])))
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def topk(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        if self.retrieval_logprob is None:
            raise ValueError("layout has no item targets; nothing to rank by")
        return retrieve_topk(self.candidate_ids, self.retrieval_logprob, k)


def _check_candidates(model: Model, candidates: np.ndarray) -> np.ndarray:
    cand = np.asarray(candidates, dtype=np.int64)
    if cand.ndim != 1 or cand.size == 0:
        raise ValueError("candidates must be a non-empty 1-d id array")
    V = model.config.vocab_size
    if cand.min() < N_RESERVED or cand.max() >= V:
        raise ValueError(f"candidate ids must lie in [{N_RESERVED}, {V})")
    return cand


def _retrieval_read_index(spec: LayoutSpec, T: int) -> int | None:
    """History token whose item prediction targets step T+1."""
    if not spec.predicts_items():
        return None
    if spec.arrangement is Arrangement.INTERLEAVED:
        return 2 * T - 1
    off = spec.item_targets()[0].offset
    if off < 1 or off > T:
        raise ValueError(f"layout {spec.name!r}: item target offset {off:+d} "
                         f"leaves no history token predicting step {T + 1}")
    return T - off


def _needs_candidate_rows(spec: LayoutSpec) -> bool:
    if not spec.predicts_actions():
        return False
    if spec.arrangement is Arrangement.INTERLEAVED:
        return True
    return spec.action_targets()[0].offset == 0


def _next_action_read_index(spec: LayoutSpec, T: int) -> int:
    """History token whose action prediction targets step T+1 (offset >= 1)."""
    off = spec.action_targets()[0].offset
    step = T + 1 - off
    if step < 1 or step > T:
        raise ValueError(f"layout {spec.name!r}: action target offset {off:+d} "
                         f"leaves no history token predicting step {T + 1}")
    return step - 1


def _candidate_rows(spec: LayoutSpec, items: np.ndarray, norm_actions: np.ndarray,
                    cand: np.ndarray) -> dict:
    """Input arrays for C hypothetical step-(T+1) tokens."""
    T = int(items.shape[0])
    C = int(cand.shape[0])
    D = norm_actions.shape[1]
    rows = {
        "item_ids": np.full(C, SENTINEL_ID, dtype=np.int64),
        "action_kind": np.full(C, ACT_NONE, dtype=np.int8),
        "action_input": np.zeros((C, D), dtype=np.float32),
        "teacher": cand.copy(),  # PATCHED couplers read the candidate itself
    }
    if spec.arrangement is Arrangement.INTERLEAVED:
        rows["item_ids"] = cand.copy()  # item-role token of step T+1
        return rows
    oi = spec.item_inputs()[0].offset
    step = T + 1 + oi
    if oi == 0:
        rows["item_ids"] = cand.copy()
    elif 1 <= step <= T:
        rows["item_ids"][:] = items[step - 1]
    ai = spec.action_inputs()
    if ai:
        astep = T + 1 + ai[0].offset
        if 1 <= astep <= T:
            rows["action_kind"][:] = ACT_VALUE
            rows["action_input"][:] = norm_actions[astep - 1]
        else:
            # Unknown future action (the step-(T+1) action is what we are
            # predicting); the model substitutes its learned sentinel.
            rows["action_kind"][:] = ACT_SENTINEL
    return rows


def _batch_from_arrays(item_ids, pos_ids, action_kind, action_input,
                       teacher, allowed) -> TokenBatch:
    L = item_ids.shape[0]
    D = action_input.shape[1]
    z = lambda dt: np.zeros((1, L), dtype=dt)
    return TokenBatch(
        item_ids=item_ids[None, :], pos_ids=pos_ids[None, :],
        action_kind=action_kind[None, :], action_input=action_input[None, :],
        item_target=np.full((1, L), PAD_ID, dtype=np.int64),
        item_target_inc=z(bool),
        action_target=np.zeros((1, L, D), dtype=np.float32),
        action_target_inc=z(bool),
        action_target_item=teacher[None, :],
        allowed=allowed, lengths=np.array([L], dtype=np.int64),
        item_target_step=z(np.int32), action_target_step=z(np.int32),
        action_input_step=z(np.int32),
    )


def _history_batch(hist: TokenizedSequence, allowed: np.ndarray | None = None) -> TokenBatch:
    L = hist.length
    return _batch_from_arrays(
        hist.item_ids, np.arange(L, dtype=np.int64), hist.action_kind,
        hist.action_input, hist.action_target_item,
        allowed if allowed is not None else build_mask(L).allowed)


def _combined_batch(hist: TokenizedSequence, rows: dict,
                    allowed: np.ndarray) -> TokenBatch:
    Lh = hist.length
    C = rows["item_ids"].shape[0]
    pos = np.concatenate([np.arange(Lh, dtype=np.int64),
                          np.full(C, Lh, dtype=np.int64)])
    return _batch_from_arrays(
        np.concatenate([hist.item_ids, rows["item_ids"]]),
        pos,
        np.concatenate([hist.action_kind, rows["action_kind"]]),
        np.concatenate([hist.action_input, rows["action_input"]]),
        np.concatenate([hist.action_target_item, rows["teacher"]]),
        allowed)


def score_parallel(model: Model, items: np.ndarray, actions: np.ndarray,
                   candidates: np.ndarray,
                   stats: ActionStats | None = None) -> ScoreTable:
    """Score all candidates in one forward pass.

    `items`/`actions` are the raw history; `stats` must be the training-split
    normalization the model was fitted with (None means raw actions).
    """
    spec = model.spec
    if stats is None:
        stats = ActionStats.identity(model.config.action_dims)
    cand = _check_candidates(model, candidates)
    items = np.asarray(items, dtype=np.int64)
    T = int(items.shape[0])
    norm = stats.normalize(np.asarray(actions)).astype(np.float32)
    if norm.ndim == 1:
        norm = norm[:, None]
    hist = tokenize(spec, items, norm)
    Lh = hist.length
    C = cand.shape[0]

    if _needs_candidate_rows(spec):
        rows = _candidate_rows(spec, items, norm, cand)
        batch = _combined_batch(hist, rows, build_mask(Lh, C).allowed)
    else:
        batch = _history_batch(hist)
    out = model.forward(batch, train=False)

    retrieval = None
    ridx = _retrieval_read_index(spec, T)
    if ridx is not None:
        logp = real_item_log_softmax(out.item_logits.data[0, ridx])
        retrieval = logp[cand]

    action = None
    if spec.predicts_actions():
        if _needs_candidate_rows(spec):
            action = out.action_pred.data[0, Lh:Lh + C].astype(np.float64)
        elif spec.conditioning is Conditioning.PATCHED:
            h_row = out.h.data[0, _next_action_read_index(spec, T)]
            h_tiled = Tensor(np.tile(h_row, (C, 1)))
            action = model.action_pred_for(h_tiled, cand).data.astype(np.float64)
        else:
            row = out.action_pred.data[0, _next_action_read_index(spec, T)]
            action = np.tile(row.astype(np.float64), (C, 1))
        action = stats.denormalize(action)

    return ScoreTable(cand, retrieval, action)


def score_sequential_oracle(model: Model, items: np.ndarray, actions: np.ndarray,
                            candidates: np.ndarray,
                            stats: ActionStats | None = None) -> ScoreTable:
    """Reference scorer: one forward pass per candidate, plain causal mask."""
    spec = model.spec
    if stats is None:
        stats = ActionStats.identity(model.config.action_dims)
    cand = _check_candidates(model, candidates)
    items = np.asarray(items, dtype=np.int64)
    T = int(items.shape[0])
    norm = stats.normalize(np.asarray(actions)).astype(np.float32)
    if norm.ndim == 1:
        norm = norm[:, None]
    hist = tokenize(spec, items, norm)
    Lh = hist.length
    C = cand.shape[0]

    hist_out = model.forward(_history_batch(hist), train=False)
    retrieval = None
    ridx = _retrieval_read_index(spec, T)
    if ridx is not None:
        logp = real_item_log_softmax(hist_out.item_logits.data[0, ridx])
        retrieval = logp[cand]

    action = None
    if spec.predicts_actions():
        preds = np.zeros((C, model.config.action_dims), dtype=np.float64)
        if _needs_candidate_rows(spec):
            causal = np.tril(np.ones((Lh + 1, Lh + 1), dtype=bool))
            for i in range(C):
                rows = _candidate_rows(spec, items, norm, cand[i:i + 1])
                batch = _combined_batch(hist, rows, causal)
                out = model.forward(batch, train=False)
                preds[i] = out.action_pred.data[0, Lh]
        elif spec.conditioning is Conditioning.PATCHED:
            h_row = hist_out.h.data[0, _next_action_read_index(spec, T)]
            for i in range(C):
                p = model.action_pred_for(Tensor(h_row[None, :]), cand[i:i + 1])
                preds[i] = p.data[0]
        else:
            row = hist_out.action_pred.data[0, _next_action_read_index(spec, T)]
            preds[:] = row
        action = stats.denormalize(preds)

    return ScoreTable(cand, retrieval, action)


# ---------------------------------------------------------------------------
# attention inspection
# ---------------------------------------------------------------------------


@dataclass
class AttentionProbe:
    """Captured attention for one sequence: (n_layers, n_heads, L, L)."""
    maps: np.ndarray
    item_ids: np.ndarray
    allowed: np.ndarray

    @property
    def last_layer(self) -> np.ndarray:
        return self.maps[-1]

    def row_sums(self) -> np.ndarray:
        return self.maps.sum(axis=-1)

    def masked_mass(self) -> float:
        """Total probability on disallowed edges; exactly 0.0 when causal."""
        return float(self.maps[..., ~self.allowed].sum())

    def lag_mass(self) -> np.ndarray:
        """Per-head mean attention from each token to its predecessor (last layer)."""
        L = self.maps.shape[-1]
        if L < 2:
            return np.zeros(self.maps.shape[1])
        rows = np.arange(1, L)
        return self.last_layer[:, rows, rows - 1].mean(axis=-1)


def probe_items(model: Model) -> np.ndarray:
    """The standard 6-step diagnostic sequence: one real item at positions 1
    and 5, unknown-item placeholders everywhere else."""
    first = N_RESERVED
    if model.config.vocab_size <= first:
        raise ValueError("vocabulary has no real items to probe with")
    return np.array([UNK_ID, first, UNK_ID, UNK_ID, UNK_ID, first], dtype=np.int64)


def attention_probe(model: Model, items: np.ndarray | None = None,
                    actions: np.ndarray | None = None) -> AttentionProbe:
    """Forward a small diagnostic sequence and capture every attention map.

    The default pattern repeats one item at steps 1 and 5 amid unknowns, so a
    conditioning-aware model has an earlier occurrence to attend back to.
    `actions` (already normalized) default to zeros.
    """
    if items is None:
        items = probe_items(model)
    items = np.asarray(items, dtype=np.int64)
    if actions is None:
        actions = np.zeros((items.shape[0], model.config.action_dims), dtype=np.float32)
    hist = tokenize(model.spec, items, np.asarray(actions, dtype=np.float32))
    batch = _history_batch(hist)
    out = model.forward(batch, train=False, capture_attention=True)
    maps = np.stack([a[0] for a in out.attention])  # (layers, H, L, L)
    return AttentionProbe(maps=maps, item_ids=items, allowed=batch.allowed)
