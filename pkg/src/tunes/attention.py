"""Masked scaled dot-product attention and the normalization-free Transformer block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .ops import ACAUSAL, CAUSAL, ConvBlock

NONE = "none"
ANTICAUSAL = "anticausal"
LOCAL = "local"
MASK_KINDS = (NONE, CAUSAL, ANTICAUSAL, LOCAL)


@dataclass(frozen=True)
class AttentionMask:
    """Which key positions each query position may attend to.

    ``kind`` is one of ``none``, ``causal``, ``anticausal`` or ``local``;
    ``window`` is the half-width for ``local``. The diagonal is always
    allowed, so a token can attend to itself under every kind.
    """

    kind: str = NONE
    window: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if self.kind == LOCAL and (self.window is None or self.window < 0):
            raise ValueError("local mask needs a non-negative window")

    def allowed(self, s: int, t: int | None = None, device=None) -> Tensor:
        """Boolean ``(S, T)`` matrix, True where query ``i`` may attend key ``j``."""
        t = s if t is None else t
        i = torch.arange(s, device=device)[:, None]
        j = torch.arange(t, device=device)[None, :]
        if self.kind == NONE:
            return torch.ones(s, t, dtype=torch.bool, device=device)
        if self.kind == CAUSAL:
            return j <= i
        if self.kind == ANTICAUSAL:
            return j >= i
        return (j - i).abs() <= self.window


def attention_weights(q: Tensor, k: Tensor, mask: AttentionMask | Tensor | None = None) -> Tensor:
    """Row-stochastic ``(..., S, T)`` weights ``softmax(q k^T / sqrt(dim))``; masked entries are exactly 0.

    ``mask`` may be an :class:`AttentionMask` or a boolean tensor of allowed
    positions broadcastable to ``(..., S, T)``. A query row with no allowed key
    raises ``ValueError`` instead of producing NaN.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is None:
        return torch.softmax(scores, dim=-1)
    if isinstance(mask, AttentionMask):
        allowed = mask.allowed(q.shape[-2], k.shape[-2], device=q.device)
    else:
        allowed = mask.to(torch.bool)
    if allowed.shape[-2:] != scores.shape[-2:]:
        raise ValueError(
            f"mask shape {tuple(allowed.shape)} does not match scores {tuple(scores.shape)}"
        )
    if not bool(allowed.any(dim=-1).all()):
        raise ValueError("attention mask leaves a query row without any key")
    return torch.softmax(scores.masked_fill(~allowed, float("-inf")), dim=-1)


def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: AttentionMask | Tensor | None = None
) -> Tensor:
    """Attention-weighted sum of the rows of ``v``; see :func:`attention_weights`."""
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("keys and values must have the same length")
    return attention_weights(q, k, mask) @ v


class MultiHeadAttention(nn.Module):
    """Self-attention with ``heads`` heads of width ``head_dim`` each.

    Operates on token-major input ``(B, S, dim)``.
    """

    def __init__(self, dim: int = 64, heads: int = 1, head_dim: int | None = None) -> None:
        super().__init__()
        if heads < 1:
            raise ValueError("heads must be >= 1")
        self.heads = heads
        self.head_dim = dim if head_dim is None else head_dim
        inner = heads * self.head_dim
        self.q = nn.Linear(dim, inner)
        self.k = nn.Linear(dim, inner)
        self.v = nn.Linear(dim, inner)
        self.out = nn.Linear(inner, dim)

    def _split(self, x: Tensor) -> Tensor:
        b, s, _ = x.shape
        return x.view(b, s, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x: Tensor, mask: AttentionMask | None = None) -> Tensor:
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        y = scaled_dot_attention(q, k, v, mask)
        b, _, s, _ = y.shape
        return self.out(y.transpose(1, 2).reshape(b, s, -1))


class FeedForward(nn.Module):
    def __init__(self, dim: int = 64, hidden: int = 256) -> None:
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Conv block, then residual attention, then residual feedforward.

    There is no normalization and no dropout. The block works on
    channel-first ``(B, dim, S)`` tensors like the rest of the network;
    ``mask`` is fixed at construction so that the block's causality is part
    of its identity. ``use_conv=False`` and ``use_attention=False`` drop the
    leading conv block or the attention + feedforward pair (ablations).
    """

    def __init__(
        self,
        dim: int = 64,
        mask: AttentionMask = AttentionMask(CAUSAL),
        heads: int = 1,
        ffn_dim: int = 256,
        conv_mode: str = CAUSAL,
        kernel_size: int = 3,
        use_conv: bool = True,
        use_attention: bool = True,
    ) -> None:
        super().__init__()
        self.dim = dim
        self.mask = mask
        self.conv = ConvBlock(dim, 1, conv_mode, kernel_size) if use_conv else None
        if use_attention:
            self.attn = MultiHeadAttention(dim, heads)
            self.ffn = FeedForward(dim, ffn_dim)
        else:
            self.attn = None
            self.ffn = None

    @property
    def causal(self) -> bool:
        conv_ok = self.conv is None or self.conv.conv.causal
        attn_ok = self.attn is None or self.mask.kind == CAUSAL
        return conv_ok and attn_ok

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {x.shape[1]}")
        if self.conv is not None:
            x = self.conv(x)
        if self.attn is None:
            return x
        y = x.transpose(1, 2)
        y = y + self.attn(y, self.mask)
        y = y + self.ffn(y)
        return y.transpose(1, 2)


def multi_head_attention(x: Tensor, mask: AttentionMask, heads: int = 1, *, module: MultiHeadAttention | None = None) -> Tensor:
    """Apply self-attention to a ``(S, dim)`` token sequence."""
    if module is None:
        module = MultiHeadAttention(x.shape[-1], heads)
    return module(x.unsqueeze(0), mask).squeeze(0)


def transformer_block(x: Tensor, mask: AttentionMask, *, module: TransformerBlock | None = None) -> Tensor:
    """Apply a Transformer block to a ``(S, dim)`` token sequence."""
    if module is None:
        conv_mode = ACAUSAL if mask.kind != CAUSAL else CAUSAL
        module = TransformerBlock(x.shape[-1], mask, conv_mode=conv_mode)
    return module(x.T.unsqueeze(0)).squeeze(0).T
