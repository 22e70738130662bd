"""Training loop, inference and evaluation for the temporal U-Net."""

from __future__ import annotations

import contextlib
import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import data
from .metrics import VideoMetrics, relaxed_metrics, video_metrics
from .model import Tunes, predict_phases
from .objectives import median_frequency_weights, total_loss

log = logging.getLogger(__name__)

CONSTANT = "constant"
COSINE = "cosine"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    epochs: int = 75
    grad_clip_norm: float = 1.0
    # constant: keep the epoch with the best validation Macro Jaccard;
    # cosine: anneal the learning rate and keep the last epoch
    schedule: str = CONSTANT
    smooth_weight: float = 0.15
    seed: int = 0
    augment: bool = True
    token_masking: bool = True
    max_shift: int = 18
    p_drop: float = 0.05
    p_dup: float = 0.05
    mask_coverage: float = 0.35

    def __post_init__(self) -> None:
        if self.schedule not in (CONSTANT, COSINE):
            raise ValueError(f"schedule must be {CONSTANT!r} or {COSINE!r}")
        if self.learning_rate <= 0 or self.epochs < 1 or self.grad_clip_norm <= 0:
            raise ValueError("learning_rate, epochs and grad_clip_norm must be positive")
        if self.smooth_weight < 0:
            raise ValueError("smooth_weight must be >= 0")


@dataclass
class TrainResult:
    model: Tunes
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    class_weights: np.ndarray | None = None


@contextlib.contextmanager
def single_threaded():
    """Run torch ops on one intra-op thread (restored afterwards)."""
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def cosine_lr(base: float, epoch: int, epochs: int) -> float:
    return 0.5 * base * (1 + math.cos(math.pi * epoch / epochs))


def _grad_norm(params) -> float:
    norms = [p.grad.detach().norm() for p in params if p.grad is not None]
    return float(torch.linalg.vector_norm(torch.stack(norms))) if norms else 0.0


@torch.no_grad()
def predict(model: Tunes, entry: data.PhaseDatasetEntry) -> np.ndarray:
    """Hard 1-based phase predictions for every frame of ``entry``."""
    was_training = model.training
    model.eval()
    padded = data.pad_to_multiple(entry, model.config.scales[-1])
    scores = model(torch.from_numpy(padded.features).unsqueeze(0))[0][0]
    model.train(was_training)
    return predict_phases(scores[: len(entry)])


def evaluate(
    model: Tunes, videos: Sequence[data.PhaseDatasetEntry], relaxed: bool = False
) -> list[VideoMetrics]:
    c = model.config.num_classes
    out = []
    for v in videos:
        y_hat = predict(model, v)
        out.append(relaxed_metrics(v.labels, y_hat, c) if relaxed else video_metrics(v.labels, y_hat, c))
    return out


def _training_sample(entry, rng, cfg: TrainConfig, token_size: int):
    if cfg.augment:
        entry = data.augment_shift(entry, rng, cfg.max_shift)
        entry = data.augment_speed(entry, rng, cfg.p_drop, cfg.p_dup)
    entry = data.pad_to_multiple(entry, token_size)
    token_mask = None
    if cfg.token_masking:
        plan = data.plan_span_mask(entry.labels, rng, token_size, cfg.mask_coverage)
        token_mask = torch.from_numpy(plan.masked)
    return entry, token_mask


def train(
    model: Tunes,
    train_videos: Sequence[data.PhaseDatasetEntry],
    val_videos: Sequence[data.PhaseDatasetEntry] = (),
    config: TrainConfig | None = None,
) -> TrainResult:
    """Adam on one feature sequence per step with gradient clipping.

    Raises :class:`TrainingDiverged` if a loss becomes non-finite.
    """
    cfg = config or TrainConfig()
    if not train_videos:
        raise ValueError("no training videos")
    train_ids = {v.video_id for v in train_videos}
    overlap = train_ids & {v.video_id for v in val_videos}
    if overlap:
        raise ValueError(f"videos in both train and validation split: {sorted(overlap)}")
    if cfg.schedule == CONSTANT and not val_videos:
        raise ValueError("the constant schedule selects by validation score; pass val_videos")

    c = model.config.num_classes
    token_size = model.config.scales[-1]
    weights = median_frequency_weights([v.labels for v in train_videos], c)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    result = TrainResult(model, class_weights=weights)
    best_score, best_state = -1.0, None

    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs) if cfg.schedule == COSINE else cfg.learning_rate
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        losses, clipped_norms = [], []
        for i in rng.permutation(len(train_videos)):
            entry, token_mask = _training_sample(train_videos[i], rng, cfg, token_size)
            preds = model(torch.from_numpy(entry.features).unsqueeze(0), token_mask)
            loss = total_loss(preds, entry.labels, weights, cfg.smooth_weight, model.config.scales)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()} at epoch {epoch} on {entry.video_id}"
                )
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm)
            clipped_norms.append(_grad_norm(params))
            opt.step()
            losses.append(loss.item())

        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "max_grad_norm": float(max(clipped_norms)),
        }
        if val_videos:
            record["val_macro_jaccard"] = float(
                np.mean([m.macro_jaccard for m in evaluate(model, val_videos)])
            )
        result.history.append(record)
        log.debug("epoch %d %s", epoch, record)
        if cfg.schedule == CONSTANT and record["val_macro_jaccard"] > best_score:
            best_score = record["val_macro_jaccard"]
            best_state = copy.deepcopy(model.state_dict())
            result.best_epoch = epoch

    if cfg.schedule == CONSTANT:
        model.load_state_dict(best_state)
    else:
        result.best_epoch = cfg.epochs - 1
    model.eval()
    return result
