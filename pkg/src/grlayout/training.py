"""Teacher-forced training over tokenized user sequences.

The trainer refuses layouts whose validation shows self-label leakage unless
explicitly overridden; such runs exist only to demonstrate the pathology.
Action values are z-scored with training-split statistics before tokenizing,
so regression losses are in normalized space and reported errors are scaled
back by the stored std.

Everything is seeded through one root: parameter init, epoch shuffling, and
dropout each get an independent stream derived from (seed, tag), so a rerun
with the same seed reproduces the run bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import UserSequence, subsystem_seed
from .layouts import LayoutSpec, TokenizedSequence, tokenize
from .model import ActionStats, Model, ModelConfig, assemble_loss, collate
from .optim import Adam, AdamConfig
from .validation import validate


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 128
    max_tokens: int | None = None   # token-budget batching; overrides batch_size
    lr: float = 1e-3
    warmup_steps: int = 100
    item_weight: float = 1.0
    action_weight: float = 1.0
    seed: int = 0
    allow_leakage: bool = False
    shuffle: bool = True

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.max_tokens is None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_tokens is not None and self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class TrainResult:
    model: Model
    stats: ActionStats
    curve: list[dict] = field(default_factory=list)
    tokens_seen: int = 0


def _has_supervision(spec: LayoutSpec, t: TokenizedSequence) -> bool:
    if spec.predicts_items() and t.item_target_inc.any():
        return True
    if spec.predicts_actions() and t.action_target_inc.any():
        return True
    return False


def tokenize_corpus(spec: LayoutSpec, users: list[UserSequence],
                    stats: ActionStats) -> list[TokenizedSequence]:
    """Tokenize every user with normalized action values, dropping sequences
    that carry no included target under this layout."""
    out = []
    for u in users:
        t = tokenize(spec, u.items, stats.normalize(u.actions).astype(np.float32))
        if _has_supervision(spec, t):
            out.append(t)
    return out


def _token_budget_batches(seqs: list[TokenizedSequence],
                          max_tokens: int) -> list[list[TokenizedSequence]]:
    batches: list[list[TokenizedSequence]] = []
    cur: list[TokenizedSequence] = []
    used = 0
    for s in seqs:
        if s.length > max_tokens:
            raise ValueError(f"sequence of {s.length} tokens exceeds the "
                             f"{max_tokens}-token batch budget")
        if cur and used + s.length > max_tokens:
            batches.append(cur)
            cur, used = [], 0
        cur.append(s)
        used += s.length
    if cur:
        batches.append(cur)
    return batches


def fit_stats(users: list[UserSequence]) -> ActionStats:
    if not users:
        raise ValueError("fit_stats: empty corpus")
    return ActionStats.fit(np.concatenate([u.actions for u in users], axis=0))


def train(model: Model, users: list[UserSequence], config: TrainConfig,
          stats: ActionStats | None = None, progress=None) -> TrainResult:
    """Run `config.steps` optimizer updates and return the curve.

    `progress(step, total_steps, loss)` is called after every update when
    given.  Pass `stats` to reuse normalization fitted elsewhere (for example
    when warm-starting from a checkpoint).
    """
    config.validate()
    spec = model.spec
    report = validate(spec)
    if not report.p3.passed and not config.allow_leakage:
        leaks = "; ".join(f"{d['target']} leaks via {d['via']}"
                          for d in report.p3.details)
        raise ValueError(
            f"layout '{spec.name}' fails the leakage check ({leaks}); "
            f"pass allow_leakage=True to train it anyway")

    if stats is None:
        stats = fit_stats(users)
    toks = tokenize_corpus(spec, users, stats)
    if not toks:
        raise ValueError("no sequence carries an included target under this layout")

    shuffle_rng = np.random.default_rng(subsystem_seed(config.seed, "shuffle"))
    drop_rng = np.random.default_rng(subsystem_seed(config.seed, "dropout"))
    adam = Adam(model.params, AdamConfig(lr=config.lr, warmup_steps=config.warmup_steps))
    action_w = np.full(model.config.action_dims, config.action_weight)

    result = TrainResult(model=model, stats=stats)
    step = 0
    while step < config.steps:
        if config.shuffle:
            order = shuffle_rng.permutation(len(toks))
        else:
            order = np.arange(len(toks))
        epoch = [toks[i] for i in order]
        if config.max_tokens is not None:
            batches = _token_budget_batches(epoch, config.max_tokens)
        else:
            batches = [epoch[i:i + config.batch_size]
                       for i in range(0, len(epoch), config.batch_size)]
        for group in batches:
            if step >= config.steps:
                break
            batch = collate(group)
            adam.zero_grad()
            out = model.forward(batch, train=True, rng=drop_rng)
            loss, comps = assemble_loss(out, batch, config.item_weight, action_w)
            loss.backward()
            lr_now = adam.step()
            step += 1
            result.tokens_seen += int(batch.lengths.sum())
            result.curve.append({
                "step": step,
                "loss": comps["total"],
                "item": comps["item"],
                "action": comps["action"],
                "lr": lr_now,
            })
            if progress is not None:
                progress(step, config.steps, comps["total"])
    return result


def build_model(spec: LayoutSpec, config: ModelConfig, seed: int) -> Model:
    """Model with parameters initialized from the (seed, "init") stream."""
    return Model(config, spec, seed=subsystem_seed(seed, "init"))


def training_action_rmse(model: Model, users: list[UserSequence],
                         stats: ActionStats, batch_size: int = 128) -> np.ndarray:
    """Per-dimension RMSE on the training targets, in original action units.

    Teacher-forced forward pass without dropout; errors are computed in
    normalized space and scaled back by the stored std.
    """
    if not model.spec.predicts_actions():
        raise ValueError(f"layout '{model.spec.name}' has no action targets")
    toks = tokenize_corpus(model.spec, users, stats)
    sq_sum = np.zeros(model.config.action_dims, dtype=np.float64)
    count = 0
    for i in range(0, len(toks), batch_size):
        batch = collate(toks[i:i + batch_size])
        out = model.forward(batch, train=False)
        inc = batch.action_target_inc
        if not inc.any():
            continue
        err = out.action_pred.data[inc] - batch.action_target[inc]
        sq_sum += (err.astype(np.float64) ** 2).sum(axis=0)
        count += int(inc.sum())
    if count == 0:
        raise ValueError("no included action targets in the corpus")
    return np.sqrt(sq_sum / count) * stats.std
