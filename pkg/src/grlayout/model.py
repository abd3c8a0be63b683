"""Decoder-only transformer over layout token streams.

Pre-norm blocks, learned absolute positions, a weight-tied item head (the
output projection *is* the input embedding table), and one scalar regression
head per action dimension.  Action values enter through an affine projection
added to the item + position embedding; where an action slot is out of range
the model adds a learned sentinel vector instead.

Action-head conditioning follows the layout:
  NONE / LAGGED  the head reads the trunk state of the predicting token.
  PATCHED        a two-layer gelu coupler fuses the trunk state with the
                 embedding of the teacher-forced target item, and the head
                 reads the coupler output.  The forward pass only ever sees
                 ground-truth items here, never its own predictions.

Dropout (training only) is applied in exactly two places: attention weights
after the softmax, and the MLP output.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tz
from .layouts import (
    ACT_SENTINEL, ACT_VALUE, Conditioning, LayoutSpec, N_RESERVED, PAD_ID,
    TokenizedSequence,
)
from .masks import build_mask
from .tensor import Tensor


@dataclass
class ModelConfig:
    vocab_size: int            # includes the reserved ids
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 50      # token positions (2T for interleaved layouts)
    action_dims: int = 1
    dropout: float = 0.2
    precision: str = "f32"     # "f32" | "f64"

    def validate(self) -> None:
        if self.vocab_size <= N_RESERVED:
            raise ValueError(f"vocab_size {self.vocab_size} leaves no real items "
                             f"after {N_RESERVED} reserved ids")
        if self.d % self.n_heads != 0:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1 or self.n_heads < 1 or self.max_seq_len < 1:
            raise ValueError("n_layers, n_heads, max_seq_len must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.action_dims < 1:
            raise ValueError("action_dims must be >= 1")

    @property
    def np_dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


@dataclass
class ActionStats:
    """Per-dimension z-score statistics from the training split."""
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, a: np.ndarray) -> np.ndarray:
        return (a - self.mean) / self.std

    def denormalize(self, a: np.ndarray) -> np.ndarray:
        return a * self.std + self.mean

    @staticmethod
    def fit(actions: np.ndarray) -> "ActionStats":
        std = actions.std(axis=0)
        return ActionStats(actions.mean(axis=0), np.maximum(std, 1e-8))

    @staticmethod
    def identity(dims: int) -> "ActionStats":
        return ActionStats(np.zeros(dims), np.ones(dims))


@dataclass
class TokenBatch:
    """Padded, stacked token arrays plus the shared visibility mask."""
    item_ids: np.ndarray           # (B, L) int64
    pos_ids: np.ndarray            # (B, L) int64
    action_kind: np.ndarray        # (B, L) int8
    action_input: np.ndarray       # (B, L, D)
    item_target: np.ndarray        # (B, L) int64
    item_target_inc: np.ndarray    # (B, L) bool
    action_target: np.ndarray      # (B, L, D)
    action_target_inc: np.ndarray  # (B, L) bool
    action_target_item: np.ndarray # (B, L) int64
    allowed: np.ndarray            # (L, L) bool
    lengths: np.ndarray            # (B,) int64 real token counts
    item_target_step: np.ndarray   # (B, L) int32
    action_target_step: np.ndarray # (B, L) int32
    action_input_step: np.ndarray  # (B, L) int32

    @property
    def shape(self) -> tuple[int, int]:
        return self.item_ids.shape


def collate(seqs: list[TokenizedSequence], allowed: np.ndarray | None = None) -> TokenBatch:
    """Right-pad a list of tokenized sequences into one batch.

    Padding rows carry PAD ids and excluded targets; with right padding the
    shared causal mask is already correct for every row.
    """
    if not seqs:
        raise ValueError("collate: empty batch")
    B = len(seqs)
    L = max(s.length for s in seqs)
    D = seqs[0].action_dims
    b = TokenBatch(
        item_ids=np.full((B, L), PAD_ID, dtype=np.int64),
        pos_ids=np.tile(np.arange(L, dtype=np.int64), (B, 1)),
        action_kind=np.zeros((B, L), dtype=np.int8),
        action_input=np.zeros((B, L, D), dtype=np.float32),
        item_target=np.full((B, L), PAD_ID, dtype=np.int64),
        item_target_inc=np.zeros((B, L), dtype=bool),
        action_target=np.zeros((B, L, D), dtype=np.float32),
        action_target_inc=np.zeros((B, L), dtype=bool),
        action_target_item=np.full((B, L), PAD_ID, dtype=np.int64),
        allowed=allowed if allowed is not None else build_mask(L).allowed,
        lengths=np.array([s.length for s in seqs], dtype=np.int64),
        item_target_step=np.zeros((B, L), dtype=np.int32),
        action_target_step=np.zeros((B, L), dtype=np.int32),
        action_input_step=np.zeros((B, L), dtype=np.int32),
    )
    for i, s in enumerate(seqs):
        n = s.length
        b.item_ids[i, :n] = s.item_ids
        b.action_kind[i, :n] = s.action_kind
        b.action_input[i, :n] = s.action_input
        b.item_target[i, :n] = s.item_target
        b.item_target_inc[i, :n] = s.item_target_inc
        b.action_target[i, :n] = s.action_target
        b.action_target_inc[i, :n] = s.action_target_inc
        b.action_target_item[i, :n] = s.action_target_item
        b.item_target_step[i, :n] = s.item_target_step
        b.action_target_step[i, :n] = s.action_target_step
        b.action_input_step[i, :n] = s.action_input_step
    return b


@dataclass
class ForwardResult:
    h: Tensor                      # (B, L, d) final trunk states
    item_logits: Tensor | None     # (B, L, V)
    action_pred: Tensor | None     # (B, L, D), normalized space
    attention: list[np.ndarray] = field(default_factory=list)  # per layer (B, H, L, L)


class Model:
    """Trunk + heads for one layout.  Parameters live in an ordered name->Tensor map."""

    def __init__(self, config: ModelConfig, spec: LayoutSpec, seed: int = 0):
        config.validate()
        self.config = config
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        d, V = config.d, config.vocab_size

        def p(name: str, shape, scale=0.02, zeros=False, ones=False):
            if zeros:
                data = np.zeros(shape, dtype=dt)
            elif ones:
                data = np.ones(shape, dtype=dt)
            else:
                data = rng.normal(0.0, scale, size=shape).astype(dt)
            t = tz.parameter(data, name=name)
            self.params[name] = t
            return t

        p("emb.item", (V, d))
        p("emb.pos", (config.max_seq_len, d))
        if spec.action_inputs():
            p("act_in.w", (config.action_dims, d))
            p("act_in.b", (d,), zeros=True)
            p("act_in.sentinel", (d,), scale=0.02)
        for i in range(config.n_layers):
            pre = f"blocks.{i}"
            p(f"{pre}.ln1.g", (d,), ones=True)
            p(f"{pre}.ln1.b", (d,), zeros=True)
            p(f"{pre}.attn.wq", (d, d))
            p(f"{pre}.attn.bq", (d,), zeros=True)
            p(f"{pre}.attn.wk", (d, d))
            p(f"{pre}.attn.bk", (d,), zeros=True)
            p(f"{pre}.attn.wv", (d, d))
            p(f"{pre}.attn.bv", (d,), zeros=True)
            p(f"{pre}.attn.wo", (d, d))
            p(f"{pre}.attn.bo", (d,), zeros=True)
            p(f"{pre}.ln2.g", (d,), ones=True)
            p(f"{pre}.ln2.b", (d,), zeros=True)
            p(f"{pre}.mlp.w1", (d, 4 * d))
            p(f"{pre}.mlp.b1", (4 * d,), zeros=True)
            p(f"{pre}.mlp.w2", (4 * d, d))
            p(f"{pre}.mlp.b2", (d,), zeros=True)
        p("ln_f.g", (d,), ones=True)
        p("ln_f.b", (d,), zeros=True)
        if spec.predicts_actions():
            if spec.conditioning is Conditioning.PATCHED:
                p("coupler.w", (2 * d, d))
                p("coupler.b", (d,), zeros=True)
            p("head.action.w", (d, config.action_dims))
            p("head.action.b", (config.action_dims,), zeros=True)
        # The item head is the tied embedding table; no separate parameter.

    # -- pieces --------------------------------------------------------------

    def _dropout(self, x: Tensor, rng: np.random.Generator | None, train: bool) -> Tensor:
        pct = self.config.dropout
        if not train or pct == 0.0:
            return x
        if rng is None:
            raise ValueError("forward(train=True) with dropout > 0 needs an rng")
        keep = (rng.random(x.shape) >= pct).astype(x.data.dtype) / x.data.dtype.type(1.0 - pct)
        return tz.mul(x, Tensor(keep))

    def _ln(self, x: Tensor, tag: str) -> Tensor:
        return tz.add(tz.mul(tz.layernorm_last(x), self.params[f"{tag}.g"]),
                      self.params[f"{tag}.b"])

    def _attention(self, x: Tensor, allowed: np.ndarray, layer: int,
                   rng, train: bool, capture: list | None) -> Tensor:
        cfg = self.config
        B, L, d = x.shape
        H = cfg.n_heads
        hd = d // H
        pre = f"blocks.{layer}.attn"
        q = tz.add(tz.matmul(x, self.params[f"{pre}.wq"]), self.params[f"{pre}.bq"])
        k = tz.add(tz.matmul(x, self.params[f"{pre}.wk"]), self.params[f"{pre}.bk"])
        v = tz.add(tz.matmul(x, self.params[f"{pre}.wv"]), self.params[f"{pre}.bv"])
        # (B, L, d) -> (B, H, L, hd)
        split = lambda t: tz.transpose(tz.reshape(t, (B, L, H, hd)), (0, 2, 1, 3))
        q, k, v = split(q), split(k), split(v)
        scores = tz.mul(tz.matmul(q, tz.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        scores = tz.masked_fill(scores, allowed)  # broadcasts (L, L) over (B, H, L, L)
        probs = tz.softmax_last(scores)
        if capture is not None:
            capture.append(probs.data.copy())
        probs = self._dropout(probs, rng, train)
        ctx = tz.matmul(probs, v)
        ctx = tz.reshape(tz.transpose(ctx, (0, 2, 1, 3)), (B, L, d))
        return tz.add(tz.matmul(ctx, self.params[f"{pre}.wo"]), self.params[f"{pre}.bo"])

    def _embed(self, batch: TokenBatch) -> Tensor:
        dt = self.config.np_dtype
        x = tz.add(tz.embedding(self.params["emb.item"], batch.item_ids),
                   tz.embedding(self.params["emb.pos"], batch.pos_ids))
        if self.spec.action_inputs():
            proj = tz.add(tz.matmul(Tensor(batch.action_input.astype(dt)),
                                    self.params["act_in.w"]),
                          self.params["act_in.b"])
            val = Tensor((batch.action_kind == ACT_VALUE).astype(dt)[..., None])
            sent = Tensor((batch.action_kind == ACT_SENTINEL).astype(dt)[..., None])
            x = tz.add(x, tz.mul(proj, val))
            x = tz.add(x, tz.mul(sent, self.params["act_in.sentinel"]))
        return x

    # -- forward -------------------------------------------------------------

    def forward(self, batch: TokenBatch, train: bool = False,
                rng: np.random.Generator | None = None,
                capture_attention: bool = False) -> ForwardResult:
        B, L = batch.shape
        # Candidate rows share one position, so the bound is on position ids,
        # not on raw batch length.
        max_pos = int(batch.pos_ids.max())
        if max_pos >= self.config.max_seq_len:
            raise ValueError(f"position {max_pos} exceeds max_seq_len "
                             f"{self.config.max_seq_len}")
        capture: list | None = [] if capture_attention else None
        x = self._embed(batch)
        for i in range(self.config.n_layers):
            x = tz.add(x, self._attention(self._ln(x, f"blocks.{i}.ln1"),
                                          batch.allowed, i, rng, train, capture))
            m = tz.matmul(tz.gelu(tz.matmul(self._ln(x, f"blocks.{i}.ln2"),
                                            self.params[f"blocks.{i}.mlp.w1"])
                                  + self.params[f"blocks.{i}.mlp.b1"]),
                          self.params[f"blocks.{i}.mlp.w2"]) + self.params[f"blocks.{i}.mlp.b2"]
            x = tz.add(x, self._dropout(m, rng, train))
        h = self._ln(x, "ln_f")
        logits = self.item_logits_for(h) if self.spec.predicts_items() else None
        preds = None
        if self.spec.predicts_actions():
            preds = self.action_pred_for(h, batch.action_target_item)
        return ForwardResult(h=h, item_logits=logits, action_pred=preds,
                             attention=capture if capture is not None else [])

    def item_logits_for(self, h: Tensor) -> Tensor:
        """Tied-weight item logits for any (..., d) stack of trunk states."""
        return tz.matmul(h, tz.transpose(self.params["emb.item"], (1, 0)))

    def action_pred_for(self, h: Tensor, teacher_items: np.ndarray) -> Tensor:
        """Action predictions (normalized space) for (..., d) trunk states.

        Under PATCHED conditioning `teacher_items` must hold the ground-truth
        item id at each action target's step (or a candidate id when scoring);
        other modes ignore it.
        """
        if self.spec.conditioning is Conditioning.PATCHED:
            e = tz.embedding(self.params["emb.item"], teacher_items)
            fused = tz.gelu(tz.add(tz.matmul(tz.concat([h, e], axis=-1),
                                             self.params["coupler.w"]),
                                   self.params["coupler.b"]))
            h = fused
        return tz.add(tz.matmul(h, self.params["head.action.w"]),
                      self.params["head.action.b"])


def assemble_loss(result: ForwardResult, batch: TokenBatch,
                  item_weight: float = 1.0,
                  action_weights: np.ndarray | None = None) -> tuple[Tensor, dict]:
    """Mean token losses over included targets, as a weighted sum.

    Item component: cross-entropy over the full vocabulary.  Action component:
    per-dimension mean squared error (normalized space).  Raises if the batch
    contains no included targets at all.
    """
    B, L = batch.shape
    total: Tensor | None = None
    components: dict = {"item": None, "action": None}

    if result.item_logits is not None:
        inc = batch.item_target_inc.reshape(-1)
        rows = np.flatnonzero(inc)
        if rows.size:
            # Gather supervised rows first so the softmax never touches padding.
            sub = tz.index_select(tz.reshape(result.item_logits, (B * L, -1)), rows)
            logp = tz.log_softmax_last(sub)
            picked = tz.index_select(
                logp, (np.arange(rows.size), batch.item_target.reshape(-1)[rows]))
            item_loss = tz.mul(tz.mean_all(picked), -1.0)
            components["item"] = float(item_loss.data)
            total = tz.mul(item_loss, float(item_weight))

    if result.action_pred is not None:
        inc = batch.action_target_inc.reshape(-1)
        rows = np.flatnonzero(inc)
        if rows.size:
            D = batch.action_target.shape[-1]
            dt = result.action_pred.data.dtype
            pred = tz.index_select(tz.reshape(result.action_pred, (B * L, D)), rows)
            target = Tensor(batch.action_target.reshape(B * L, D)[rows].astype(dt))
            diff = tz.add(pred, tz.mul(target, -1.0))
            sq = tz.mul(diff, diff)
            w = np.ones(D) if action_weights is None else np.asarray(action_weights, dtype=np.float64)
            if w.shape != (D,):
                raise ValueError(f"action_weights shape {w.shape}, expected ({D},)")
            act_loss = tz.mul(tz.mean_all(tz.mul(sq, Tensor(w.astype(dt)))), float(D))
            components["action"] = [float(m) for m in sq.data.mean(axis=0)]
            total = act_loss if total is None else tz.add(total, act_loss)

    if total is None:
        raise ValueError("assemble_loss: batch has zero included targets")
    components["total"] = float(total.data)
    return total, components


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_MAGIC = b"GRLCKPT\x00"
_VERSION = 1


def save_checkpoint(path: str, model: Model, seed: int, step: int,
                    stats: ActionStats | None = None,
                    item_vocab: list[str] | None = None,
                    extra: dict | None = None) -> None:
    """Versioned header (JSON) + little-endian parameter payload."""
    dt = "<f8" if model.config.precision == "f64" else "<f4"
    manifest = [{"name": k, "shape": list(p.shape), "dtype": dt}
                for k, p in model.params.items()]
    header = {
        "format_version": _VERSION,
        "model_config": asdict(model.config),
        "layout_text": model.spec.to_text(),
        "seed": seed,
        "step": step,
        "norm_mean": None if stats is None else stats.mean.tolist(),
        "norm_std": None if stats is None else stats.std.tolist(),
        "item_vocab": item_vocab,
        "extra": extra or {},
        "manifest": manifest,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(blob)))
        fh.write(blob)
        for p in model.params.values():
            fh.write(np.ascontiguousarray(p.data.astype(dt)).tobytes())


def load_checkpoint(path: str) -> tuple[Model, dict]:
    """Rebuild the model and validate the manifest against it."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    config = ModelConfig(**header["model_config"])
    spec = LayoutSpec.from_text(header["layout_text"])
    model = Model(config, spec, seed=0)
    manifest = header["manifest"]
    names = [m["name"] for m in manifest]
    if names != list(model.params.keys()):
        raise ValueError(f"{path}: parameter manifest does not match the model "
                         f"built from the checkpoint config")
    offset = 0
    for m in manifest:
        p = model.params[m["name"]]
        if list(p.shape) != m["shape"]:
            raise ValueError(f"{path}: shape mismatch for {m['name']}: "
                             f"manifest {m['shape']}, model {list(p.shape)}")
        n = int(np.prod(m["shape"])) if m["shape"] else 1
        nbytes = n * np.dtype(m["dtype"]).itemsize
        if offset + nbytes > len(payload):
            raise ValueError(f"{path}: payload truncated at parameter {m['name']}")
        arr = np.frombuffer(payload, dtype=m["dtype"], count=n, offset=offset)
        p.data = arr.reshape(m["shape"]).astype(config.np_dtype)
        offset += nbytes
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing payload bytes")
    meta = {k: header[k] for k in ("seed", "step", "item_vocab", "extra")}
    if header["norm_mean"] is not None:
        meta["stats"] = ActionStats(np.array(header["norm_mean"]),
                                    np.array(header["norm_std"]))
    else:
        meta["stats"] = None
    return model, meta
