"""Causality-aware 1D sequence operators.

All modules take and return tensors in channel-first layout ``(B, C, T)``,
the layout :class:`torch.nn.Conv1d` uses. Each operator carries a ``causal``
flag; in causal mode no output element depends on a later input element.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

CAUSAL = "causal"
ACAUSAL = "acausal"
MODES = (CAUSAL, ACAUSAL)


def _check_mode(mode: str) -> bool:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode == CAUSAL


class TemporalConv(nn.Module):
    """Dilated 1D convolution along time that preserves sequence length.

    Causal mode left-pads with ``(k - 1) * dilation`` zeros so that output
    ``t`` only sees inputs ``t, t - d, ..., t - (k - 1) d``. Acausal mode pads
    symmetrically and requires an odd kernel.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        dilation: int = 1,
        mode: str = CAUSAL,
        bias: bool = True,
    ) -> None:
        super().__init__()
        if kernel_size < 1 or dilation < 1:
            raise ValueError(
                f"kernel_size and dilation must be >= 1, got {kernel_size}, {dilation}"
            )
        self.causal = _check_mode(mode)
        if not self.causal and kernel_size % 2 == 0:
            raise ValueError("acausal convolution requires an odd kernel_size")
        self.kernel_size = kernel_size
        self.dilation = dilation
        self.padding = (kernel_size - 1) * dilation
        self.conv = nn.Conv1d(
            in_channels, out_channels, kernel_size, dilation=dilation, bias=bias
        )

    @property
    def mode(self) -> str:
        return CAUSAL if self.causal else ACAUSAL

    def forward(self, x: Tensor) -> Tensor:
        if self.causal:
            x = F.pad(x, (self.padding, 0))
        else:
            half = self.padding // 2
            x = F.pad(x, (half, half))
        return self.conv(x)


class Downsample(nn.Module):
    """Strided convolution with kernel = stride = ``factor``.

    Output length is ``ceil(T / factor)``. In causal mode the input is shifted
    right by ``factor - 1`` zeros, so output ``s`` (0-based) sees only inputs
    with index ``<= s * factor``. Acausal mode right-pads to a multiple of
    ``factor`` and lets output ``s`` see the whole window
    ``[s * factor, (s + 1) * factor)``.
    """

    def __init__(
        self, channels: int, factor: int, mode: str = CAUSAL, bias: bool = True
    ) -> None:
        super().__init__()
        if factor < 2:
            raise ValueError(f"downsampling factor must be >= 2, got {factor}")
        self.causal = _check_mode(mode)
        self.factor = factor
        self.conv = nn.Conv1d(channels, channels, factor, stride=factor, bias=bias)

    @property
    def mode(self) -> str:
        return CAUSAL if self.causal else ACAUSAL

    def forward(self, x: Tensor) -> Tensor:
        f = self.factor
        length = x.shape[-1]
        if self.causal:
            # T + f - 1 padded elements give exactly ceil(T / f) strided windows
            x = F.pad(x, (f - 1, 0))
        else:
            x = F.pad(x, (0, -(-length // f) * f - length))
        return self.conv(x)


class Upsample(nn.Module):
    """Transposed convolution with kernel = stride = ``factor``.

    Output element ``t`` depends on input element ``t // factor`` only, so the
    operator never mixes time steps and keeps a causal input causal.
    """

    causal = True

    def __init__(self, channels: int, factor: int, bias: bool = True) -> None:
        super().__init__()
        if factor < 2:
            raise ValueError(f"upsampling factor must be >= 2, got {factor}")
        self.factor = factor
        self.conv = nn.ConvTranspose1d(
            channels, channels, factor, stride=factor, bias=bias
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class ConvBlock(nn.Module):
    """Residual block: ``x + pointwise(GELU(dilated_conv(x)))``."""

    def __init__(
        self, channels: int, dilation: int = 1, mode: str = CAUSAL, kernel_size: int = 3
    ) -> None:
        super().__init__()
        self.channels = channels
        self.conv = TemporalConv(channels, channels, kernel_size, dilation, mode)
        self.pointwise = nn.Conv1d(channels, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(
                f"expected {self.channels} channels, got {x.shape[1]}"
            )
        return x + self.pointwise(F.gelu(self.conv(x)))


def _as_batch(seq: Tensor) -> Tensor:
    # (T, C) time-major -> (1, C, T)
    if seq.ndim != 2:
        raise ValueError(f"expected a (T, C) sequence, got shape {tuple(seq.shape)}")
    if seq.shape[0] < 1 or seq.shape[1] < 1:
        raise ValueError("sequence must have T >= 1 and C >= 1")
    return seq.T.unsqueeze(0)


def _from_batch(x: Tensor) -> Tensor:
    return x.squeeze(0).T


def temporal_conv(
    seq: Tensor,
    kernel_size: int,
    dilation: int,
    out_channels: int,
    mode: str = CAUSAL,
    *,
    module: TemporalConv | None = None,
) -> Tensor:
    """Apply a (fresh or given) :class:`TemporalConv` to a time-major ``(T, C)`` sequence."""
    if module is None:
        module = TemporalConv(seq.shape[-1], out_channels, kernel_size, dilation, mode)
    return _from_batch(module(_as_batch(seq)))


def downsample(seq: Tensor, factor: int, mode: str = CAUSAL, *, module: Downsample | None = None) -> Tensor:
    if module is None:
        module = Downsample(seq.shape[-1], factor, mode)
    return _from_batch(module(_as_batch(seq)))


def upsample(seq: Tensor, factor: int, *, module: Upsample | None = None) -> Tensor:
    if module is None:
        module = Upsample(seq.shape[-1], factor)
    return _from_batch(module(_as_batch(seq)))


def conv_block(seq: Tensor, dilation: int, mode: str = CAUSAL, *, module: ConvBlock | None = None) -> Tensor:
    if module is None:
        module = ConvBlock(seq.shape[-1], dilation, mode)
    return _from_batch(module(_as_batch(seq)))
