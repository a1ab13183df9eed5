"""Transformer encoder layer used identically at every tier of the hierarchy.

Post-norm residual order (attention then feed-forward, each followed by
add + layer norm), gelu activation, fused per-head projections. Attention
probabilities are returned so analysis code can inspect them per head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    heads: int = 4
    max_len: int = 64

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide dim ({self.dim})")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with resampling beyond two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def encoder_layer_param_count(dim: int) -> int:
    """Closed-form parameter count of one layer: 12*d^2 + 13*d."""
    return 12 * dim * dim + 13 * dim


class EncoderLayerParams:
    """Weights of one encoder layer. Field order fixes iteration order."""

    FIELDS = (
        "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
        "w1", "b1", "w2", "b2",
        "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
    )

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        d = config.dim
        self.config = config
        for name in ("wq", "wk", "wv", "wo"):
            setattr(self, name, Tensor(truncated_normal(rng, (d, d)), requires_grad=True))
        for name in ("bq", "bk", "bv", "bo"):
            setattr(self, name, Tensor(np.zeros(d), requires_grad=True))
        self.w1 = Tensor(truncated_normal(rng, (d, 4 * d)), requires_grad=True)
        self.b1 = Tensor(np.zeros(4 * d), requires_grad=True)
        self.w2 = Tensor(truncated_normal(rng, (4 * d, d)), requires_grad=True)
        self.b2 = Tensor(np.zeros(d), requires_grad=True)
        self.ln1_gain = Tensor(np.ones(d), requires_grad=True)
        self.ln1_bias = Tensor(np.zeros(d), requires_grad=True)
        self.ln2_gain = Tensor(np.ones(d), requires_grad=True)
        self.ln2_bias = Tensor(np.zeros(d), requires_grad=True)

    def named_tensors(self):
        for name in self.FIELDS:
            yield name, getattr(self, name)

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors())


def _as_batched(hidden: Tensor, mask: np.ndarray):
    """Accept (L, d) + (L,) or (B, L, d) + (B, L); return batched forms."""
    mask = np.asarray(mask, dtype=np.float64)
    if hidden.ndim == 2:
        if mask.ndim != 1:
            raise ValueError("per-sequence input needs a 1-D mask")
        return ad.reshape(hidden, (1,) + hidden.shape), mask[None, :], True
    if hidden.ndim == 3:
        if mask.ndim != 2:
            raise ValueError("batched input needs a 2-D mask")
        return hidden, mask, False
    raise ValueError(f"hidden must be 2-D or 3-D, got shape {hidden.shape}")


def multi_head_attention(hidden: Tensor, mask: np.ndarray,
                         params: EncoderLayerParams):
    """Masked multi-head self-attention.

    Returns (output, probs) where probs are the post-softmax attention
    maps, shaped (heads, L, L) for a single sequence or (B, heads, L, L)
    for a batch. Masked keys get exactly zero probability.
    """
    hidden, mask, squeeze = _as_batched(hidden, mask)
    cfg = params.config
    b, l, d = hidden.shape
    if d != cfg.dim:
        raise ValueError(f"hidden dim {d} does not match layer dim {cfg.dim}")
    out, probs = ad.fused_attention(
        hidden, mask, cfg.heads,
        params.wq, params.bq, params.wk, params.bk,
        params.wv, params.bv, params.wo, params.bo)
    if squeeze:
        out = ad.reshape(out, (l, d))
        probs = probs.reshape(cfg.heads, l, l)
    return out, Tensor(probs)


def encoder_layer_forward(hidden: Tensor, mask: np.ndarray,
                          params: EncoderLayerParams):
    """One post-norm encoder layer; returns (hidden', attention probs)."""
    attn_out, probs = multi_head_attention(hidden, mask, params)
    hidden = ad.layer_norm(ad.add(hidden, attn_out), params.ln1_gain, params.ln1_bias)
    ffn = ad.fused_ffn(hidden, params.w1, params.b1, params.w2, params.b2)
    hidden = ad.layer_norm(ad.add(hidden, ffn), params.ln2_gain, params.ln2_bias)
    return hidden, probs
