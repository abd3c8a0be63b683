"""Analytic FLOPs accounting for block-causal scoring and training.

Everything here is closed-form.  The attention edge count for a history of T
tokens plus C packed candidates is

    E(T, C) = T^2 / 2 + C * T,

the continuous approximation of the exact mask count T(T+1)/2 + C(T+1); the
relative gap vanishes as 1/T.  Incremental decoding with a reused KV cache
costs half the attention edges and avoids recomputing history rows, giving

    ratio_attn(T, C)   = (2 T^2 + 2 C T) / (T^2/2 + C T)       in [2, 4]
    ratio_linear(T, C) = (2 T + C) / (T + C)                   in (1, 2]

with both maxima reached at C = 0.  Training costs a backward pass on top of
the forward, weighting attention 4x and linear 2x relative to scoring:

    training_ratio = (4 * attn + 2 * lin) / (attn + lin) = 2 + 2 * share,

where share = attention's fraction of FLOPs; per token, attention is ~T*d and
the linear stack ~d^2, so share = T / (T + d).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masks import build_mask, count_mask_edges


def attn_edges(T, C=0):
    """Analytic attention edge count E(T, C) = T^2/2 + C*T."""
    T = np.asarray(T, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    return T * T / 2.0 + C * T


def exact_attn_edges(T, C=0):
    """Exact allowed-edge count of the block-causal mask: T(T+1)/2 + C(T+1)."""
    T = np.asarray(T, dtype=np.int64)
    C = np.asarray(C, dtype=np.int64)
    return T * (T + 1) // 2 + C * (T + 1)


def ratio_attn(T, C=0):
    """Attention FLOPs, sequential re-encode over packed one-pass scoring."""
    T = np.asarray(T, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    return (2.0 * T * T + 2.0 * C * T) / (T * T / 2.0 + C * T)


def ratio_linear(T, C=0):
    """Linear-layer FLOPs ratio, sequential over packed."""
    T = np.asarray(T, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    return (2.0 * T + C) / (T + C)


def attention_share(T, d):
    """Attention's fraction of per-token FLOPs for width d: T / (T + d)."""
    T = np.asarray(T, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    return T / (T + d)


def training_flops_ratio(T, d):
    """Training-over-scoring FLOPs ratio, 2 + 2*share, in [2, 4]."""
    s = attention_share(T, d)
    return 4.0 * s + 2.0 * (1.0 - s)


def training_flops_ratio_from_share(share):
    share = np.asarray(share, dtype=np.float64)
    return 4.0 * share + 2.0 * (1.0 - share)


@dataclass
class CostReport:
    """One (T, C) operating point, optionally with a model width for the
    training ratio and the interleaved doubling applied to history length."""

    n_interactions: int
    candidates: int
    interleaved: bool
    history_len: int
    analytic_edges: float
    exact_edges: int
    ratio_attn: float
    ratio_linear: float
    d: int | None = None
    attention_share: float | None = None
    training_ratio: float | None = None

    def to_flat(self) -> dict[str, str]:
        out = {
            "cost.T": str(self.n_interactions),
            "cost.C": str(self.candidates),
            "cost.interleaved": str(self.interleaved).lower(),
            "cost.history_len": str(self.history_len),
            "cost.analytic_edges": f"{self.analytic_edges:.1f}",
            "cost.exact_edges": str(self.exact_edges),
            "cost.ratio_attn": f"{self.ratio_attn:.6f}",
            "cost.ratio_linear": f"{self.ratio_linear:.6f}",
        }
        if self.d is not None:
            out["cost.d"] = str(self.d)
            out["cost.attention_share"] = f"{self.attention_share:.6f}"
            out["cost.training_ratio"] = f"{self.training_ratio:.6f}"
        return out

    def to_text(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.to_flat().items())


def cost_report(n_interactions: int, candidates: int = 0, d: int | None = None,
                interleaved: bool = False) -> CostReport:
    if n_interactions < 1:
        raise ValueError(f"cost_report: need at least one interaction, got {n_interactions}")
    if candidates < 0:
        raise ValueError(f"cost_report: negative candidate count {candidates}")
    L = 2 * n_interactions if interleaved else n_interactions
    report = CostReport(
        n_interactions=n_interactions,
        candidates=candidates,
        interleaved=interleaved,
        history_len=L,
        analytic_edges=float(attn_edges(L, candidates)),
        exact_edges=int(exact_attn_edges(L, candidates)),
        ratio_attn=float(ratio_attn(L, candidates)),
        ratio_linear=float(ratio_linear(L, candidates)),
    )
    if d is not None:
        report.d = d
        report.attention_share = float(attention_share(L, d))
        report.training_ratio = float(training_flops_ratio(L, d))
    return report


def verify_edge_formula(max_T: int = 64, max_C: int = 8) -> None:
    """Cross-check the closed-form exact count against materialized masks."""
    for T in range(1, max_T + 1):
        for C in range(0, max_C + 1):
            built = count_mask_edges(build_mask(T, C))
            formula = int(exact_attn_edges(T, C))
            if built != formula:
                raise AssertionError(
                    f"edge formula mismatch at T={T} C={C}: mask {built}, formula {formula}")
