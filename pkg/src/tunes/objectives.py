"""Losses for multi-scale phase predictions.

Labels are 1-based phase numbers throughout (phase ``p`` is score channel
``p - 1``). Scores are raw, unnormalized log-probabilities.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

SMOOTH_THRESHOLD = 4.0
SMOOTH_WEIGHT = 0.15


def _labels_tensor(y, num_classes: int, device=None) -> Tensor:
    y = torch.as_tensor(np.asarray(y), dtype=torch.long, device=device)
    if y.numel() and (int(y.min()) < 1 or int(y.max()) > num_classes):
        raise ValueError(f"labels must lie in [1, {num_classes}]")
    return y


def median_frequency_weights(labels: Iterable[Sequence[int]], num_classes: int) -> np.ndarray:
    """Class weights ``median(freq) / freq_p`` from frame counts over all sequences."""
    counts = np.zeros(num_classes, dtype=np.float64)
    for y in labels:
        y = np.asarray(y, dtype=np.int64)
        if y.size and (y.min() < 1 or y.max() > num_classes):
            raise ValueError(f"labels must lie in [1, {num_classes}]")
        counts += np.bincount(y - 1, minlength=num_classes)[:num_classes]
    total = counts.sum()
    if total == 0:
        raise ValueError("no labels given")
    missing = np.flatnonzero(counts == 0) + 1
    if missing.size:
        raise ValueError(f"class weight undefined for absent phases {missing.tolist()}")
    freq = counts / total
    return np.median(freq) / freq


def cross_entropy_loss(scores: Tensor, y, weights=None) -> Tensor:
    """Mean over time of ``-gamma[y_t] * log softmax(scores_t)[y_t]``.

    Note the normalizer is ``T``, not the sum of weights.
    """
    num_classes = scores.shape[-1]
    y = _labels_tensor(y, num_classes, scores.device)
    if y.shape != scores.shape[:-1]:
        raise ValueError(f"labels {tuple(y.shape)} do not match scores {tuple(scores.shape)}")
    logp = F.log_softmax(scores, dim=-1)
    picked = logp.gather(-1, (y - 1).unsqueeze(-1)).squeeze(-1)
    if weights is not None:
        w = torch.as_tensor(np.asarray(weights), dtype=scores.dtype, device=scores.device)
        picked = picked * w[y - 1]
    return -picked.mean()


def smoothing_loss(scores: Tensor, threshold: float = SMOOTH_THRESHOLD) -> Tensor:
    """Truncated squared log-probability change between consecutive frames.

    The earlier frame is detached, so gradients reach frame ``t`` only
    through its own term.
    """
    if scores.shape[-2] < 2:
        raise ValueError("smoothing loss needs at least two time steps")
    logp = F.log_softmax(scores, dim=-1)
    delta = (logp[..., 1:, :] - logp[..., :-1, :].detach()).abs()
    return torch.clamp(delta, max=threshold).pow(2).mean()


def bce_loss(scores: Tensor, targets, weights=None) -> Tensor:
    """Multi-label binary cross-entropy; class weights scale the positive term only."""
    targets = torch.as_tensor(np.asarray(targets), dtype=scores.dtype, device=scores.device)
    if targets.shape != scores.shape:
        raise ValueError(f"targets {tuple(targets.shape)} do not match scores {tuple(scores.shape)}")
    pos = F.logsigmoid(scores)
    neg = F.logsigmoid(-scores)
    if weights is not None:
        w = torch.as_tensor(np.asarray(weights), dtype=scores.dtype, device=scores.device)
        pos = pos * w
    return -(targets * pos + (1 - targets) * neg).mean()


def downsample_labels(y, factor: int, num_classes: int | None = None) -> np.ndarray:
    """One-hot encode 1-based labels and max-pool with kernel = stride = ``factor``.

    Returns an ``(T / factor, C)`` 0/1 matrix.
    """
    y = np.asarray(y, dtype=np.int64)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if y.size % factor:
        raise ValueError(f"length {y.size} is not divisible by {factor}")
    c = int(y.max()) if num_classes is None else num_classes
    if y.size and (y.min() < 1 or y.max() > c):
        raise ValueError(f"labels must lie in [1, {c}]")
    onehot = np.eye(c, dtype=np.float32)[y - 1]
    return onehot.reshape(-1, factor, c).max(axis=1)


def total_loss(
    preds: Sequence[Tensor],
    y,
    weights=None,
    smooth_weight: float = SMOOTH_WEIGHT,
    scales: Sequence[int] = (1, 3, 9, 18),
) -> Tensor:
    """CE + smoothing on the full-resolution scores, BCE on every coarser scale.

    ``preds`` are ordered finest first and may carry a leading batch axis of 1.
    """
    if len(preds) != len(scales):
        raise ValueError(f"expected {len(scales)} predictions, got {len(preds)}")
    preds = [p.squeeze(0) if p.ndim == 3 else p for p in preds]
    y = np.asarray(y, dtype=np.int64)
    num_classes = preds[0].shape[-1]
    for p, s in zip(preds, scales):
        if p.shape[0] * s != y.size:
            raise ValueError(
                f"prediction at scale {s} has length {p.shape[0]}, expected {y.size // s}"
            )
    loss = cross_entropy_loss(preds[0], y, weights)
    if smooth_weight:
        loss = loss + smooth_weight * smoothing_loss(preds[0])
    for p, s in zip(preds[1:], scales[1:]):
        loss = loss + bce_loss(p, downsample_labels(y, s, num_classes), weights)
    return loss
