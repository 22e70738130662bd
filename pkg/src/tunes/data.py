"""Phase-labeled feature sequences: storage, synthesis, sampling, augmentation and masking.

Labels are 1-based phase numbers. Features are float32 ``(T, D)`` arrays
sampled at 1 frame per second.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"FSEQ1"
LABEL_MAGIC = b"PHSE1"
SPLITS = ("train", "val", "test")


@dataclass
class PhaseDatasetEntry:
    video_id: str
    features: np.ndarray
    labels: np.ndarray
    fps: float = 1.0

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a (T, D) array")
        if len(self.features) != len(self.labels):
            raise ValueError(
                f"{len(self.features)} feature rows but {len(self.labels)} labels"
            )
        if len(self.labels) == 0:
            raise ValueError("sequence must contain at least one frame")
        if self.labels.min() < 1:
            raise ValueError("labels must be >= 1")

    def __len__(self) -> int:
        return len(self.labels)


class SequenceFormatError(ValueError):
    """Malformed FSEQ1/PHSE1 file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_sequence(entry: PhaseDatasetEntry) -> bytes:
    t, d = entry.features.shape
    if entry.labels.max() > 255:
        raise ValueError("labels must fit in one unsigned byte")
    return b"".join(
        [
            FEATURE_MAGIC,
            struct.pack("<II", t, d),
            entry.features.astype("<f4", copy=False).tobytes(order="C"),
            LABEL_MAGIC,
            entry.labels.astype(np.uint8).tobytes(),
        ]
    )


def decode_sequence(buf: bytes, video_id: str = "", num_classes: int = 255) -> PhaseDatasetEntry:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            missing = pos + n - len(buf)
            raise SequenceFormatError(f"truncated {what}: missing {missing} bytes", len(buf))
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(len(FEATURE_MAGIC), "feature magic") != FEATURE_MAGIC:
        raise SequenceFormatError("bad feature magic, expected b'FSEQ1'", 0)
    t, d = struct.unpack("<II", take(8, "header"))
    if t < 1:
        raise SequenceFormatError("sequence length T must be >= 1", len(FEATURE_MAGIC))
    if d < 1:
        raise SequenceFormatError("feature dimension D must be >= 1", len(FEATURE_MAGIC) + 4)
    expected = pos + 4 * t * d + len(LABEL_MAGIC) + t
    if len(buf) < expected:
        raise SequenceFormatError(
            f"truncated file: missing {expected - len(buf)} bytes for T={t}, D={d}", len(buf)
        )
    features = np.frombuffer(take(4 * t * d, "feature payload"), dtype="<f4").reshape(t, d)
    label_pos = pos
    if take(len(LABEL_MAGIC), "label magic") != LABEL_MAGIC:
        raise SequenceFormatError("bad label magic, expected b'PHSE1'", label_pos)
    label_start = pos
    labels = np.frombuffer(take(t, "label payload"), dtype=np.uint8)
    bad = np.flatnonzero((labels < 1) | (labels > num_classes))
    if bad.size:
        raise SequenceFormatError(
            f"label {labels[bad[0]]} out of range [1, {num_classes}]", label_start + int(bad[0])
        )
    if pos != len(buf):
        raise SequenceFormatError(f"{len(buf) - pos} trailing bytes", pos)
    return PhaseDatasetEntry(video_id, features.astype(np.float32), labels.astype(np.int64))


def write_sequence(entry: PhaseDatasetEntry, path: str | Path) -> None:
    Path(path).write_bytes(encode_sequence(entry))


def read_sequence(path: str | Path, num_classes: int = 255) -> PhaseDatasetEntry:
    path = Path(path)
    return decode_sequence(path.read_bytes(), path.stem, num_classes)


def write_manifest(splits: dict[str, Sequence[str | Path]], path: str | Path) -> None:
    """One ``<split> <path>`` line per entry; paths are stored as given."""
    lines = ["# split path"]
    for split, paths in splits.items():
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        lines += [f"{split} {p}" for p in paths]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> dict[str, list[Path]]:
    """Parse a manifest; relative entry paths resolve against the manifest's directory."""
    path = Path(path)
    out: dict[str, list[Path]] = {s: [] for s in SPLITS}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(maxsplit=1)
        if len(parts) != 2 or parts[0] not in SPLITS:
            raise ValueError(f"{path}:{n}: expected '<train|val|test> <path>'")
        p = Path(parts[1])
        out[parts[0]].append(p if p.is_absolute() else path.parent / p)
    return out


# ---------------------------------------------------------------- synthesis

# Relative phase durations of a typical cholecystectomy, flattened towards
# uniform so that short phases still span a few bottleneck tokens.
_BASE_FRACTIONS = np.array([0.05, 0.39, 0.07, 0.35, 0.04, 0.07, 0.03])


@dataclass
class SynthConfig:
    num_classes: int = 7
    duration_range: tuple[int, int] = (300, 420)
    feature_dim: int = 64
    mean_scale: float = 0.45
    smooth_noise: float = 0.9
    smooth_width: float = 6.0
    white_noise: float = 1.2
    video_offset: float = 0.3
    duration_concentration: float = 30.0
    insertion_prob: float = 0.3
    skip_prob: dict[int, float] = field(default_factory=dict)
    # phase pairs whose mean features mostly coincide, like the two
    # dissection phases of a cholecystectomy; only their order tells them apart
    similar_phases: tuple[tuple[int, int], ...] = ((2, 4),)
    similarity: float = 0.9

    def __post_init__(self) -> None:
        lo, hi = self.duration_range
        if lo < 36 or hi < lo:
            raise ValueError("duration_range must satisfy 36 <= low <= high")
        if self.num_classes < 2 or self.feature_dim < 1:
            raise ValueError("need at least two phases and one feature dimension")
        if lo < 2 * self.num_classes:
            raise ValueError("videos too short for the number of phases")


def cholec80_like(**kw) -> SynthConfig:
    """Generator settings whose phase and transition counts resemble Cholec80.

    Some videos lack the preparation or cleaning phase, and cleaning is
    sometimes interleaved out of order.
    """
    return SynthConfig(**{"skip_prob": {1: 0.15, 6: 0.2}, "insertion_prob": 0.3, **kw})


def _phase_fractions(c: int) -> np.ndarray:
    if c == len(_BASE_FRACTIONS):
        base = _BASE_FRACTIONS
    else:
        base = np.full(c, 1.0 / c)
    return 0.5 * base + 0.5 / c


def _synth_labels(rng: np.random.Generator, cfg: SynthConfig, length: int) -> np.ndarray:
    c = cfg.num_classes
    phases = [p for p in range(1, c + 1) if rng.random() >= cfg.skip_prob.get(p, 0.0)]
    frac = _phase_fractions(c)[np.asarray(phases) - 1]
    share = rng.dirichlet(frac / frac.sum() * cfg.duration_concentration)
    min_len = 9
    durations = np.maximum(np.round(share * length).astype(int), min_len)
    # absorb rounding into the longest phase
    durations[np.argmax(durations)] += length - durations.sum()
    segments = [(p, int(d)) for p, d in zip(phases, durations)]

    # out-of-order insertion of the second-to-last phase (cleaning) into an
    # earlier long phase
    insert_phase = c - 1
    if c >= 4 and insert_phase in phases and rng.random() < cfg.insertion_prob:
        hosts = [i for i, (p, d) in enumerate(segments) if p < insert_phase - 1 and d >= 24]
        if hosts:
            i = int(rng.choice(hosts))
            p, d = segments[i]
            ins = int(rng.integers(4, max(5, d // 4)))
            cut = int(rng.integers(6, d - 5))
            own = [j for j, (q, _) in enumerate(segments) if q == insert_phase][0]
            q, dq = segments[own]
            if dq - ins >= min_len:
                segments[own] = (q, dq - ins)
                segments[i : i + 1] = [(p, cut), (insert_phase, ins), (p, d - cut)]
    labels = np.concatenate([np.full(d, p) for p, d in segments])
    assert len(labels) == length
    return labels


def phase_means(
    seed: int,
    num_classes: int,
    feature_dim: int,
    scale: float = 1.0,
    similar_phases: Sequence[tuple[int, int]] = (),
    similarity: float = 0.0,
) -> np.ndarray:
    """Per-phase mean feature vectors shared by every video of a dataset.

    For each ``(a, b)`` in ``similar_phases`` the mean of ``b`` is pulled
    towards the mean of ``a`` so that their cosine similarity is about
    ``similarity``.
    """
    rng = np.random.default_rng([seed, 0xFEA7])
    means = rng.standard_normal((num_classes, feature_dim))
    for a, b in similar_phases:
        if a <= num_classes and b <= num_classes:
            means[b - 1] = similarity * means[a - 1] + np.sqrt(1 - similarity**2) * means[b - 1]
    return means * scale


def synth_generate(
    seed: int,
    num_videos: int,
    config: SynthConfig | None = None,
    **kw,
) -> list[PhaseDatasetEntry]:
    """Deterministic synthetic dataset of phase-labeled feature sequences.

    Features are per-phase means plus a per-video offset, temporally smoothed
    Gaussian noise and white noise. Keyword arguments override ``config``.
    """
    cfg = config if config is not None else SynthConfig(**kw)
    if config is not None and kw:
        raise TypeError("pass either config or keyword overrides, not both")
    if num_videos < 1:
        raise ValueError("num_videos must be >= 1")
    means = phase_means(
        seed, cfg.num_classes, cfg.feature_dim, cfg.mean_scale, cfg.similar_phases, cfg.similarity
    )
    videos = []
    for v in range(num_videos):
        rng = np.random.default_rng([seed, v])
        lo, hi = cfg.duration_range
        length = int(rng.integers(lo, hi + 1))
        labels = _synth_labels(rng, cfg, length)
        d = cfg.feature_dim
        offset = rng.standard_normal(d) * cfg.video_offset
        slow = gaussian_filter1d(rng.standard_normal((length, d)), cfg.smooth_width, axis=0)
        slow /= slow.std() + 1e-12
        white = rng.standard_normal((length, d))
        feats = means[labels - 1] + offset + cfg.smooth_noise * slow + cfg.white_noise * white
        videos.append(PhaseDatasetEntry(f"video{v + 1:02d}", feats.astype(np.float32), labels))
    return videos


# ---------------------------------------------------------------- helpers


def segments(labels) -> list[tuple[int, int, int]]:
    """Runs of equal labels as ``(phase, start, stop)`` with ``stop`` exclusive."""
    y = np.asarray(labels)
    if y.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(y)) + 1
    starts = np.concatenate([[0], cuts])
    stops = np.concatenate([cuts, [y.size]])
    return [(int(y[a]), int(a), int(b)) for a, b in zip(starts, stops)]


def transitions(labels) -> np.ndarray:
    """Indices ``t`` where ``labels[t] != labels[t - 1]``."""
    return np.flatnonzero(np.diff(np.asarray(labels))) + 1


def pad_to_multiple(entry: PhaseDatasetEntry, multiple: int = 18) -> PhaseDatasetEntry:
    """Repeat the last frame and label until the length divides ``multiple``."""
    extra = -len(entry) % multiple
    if not extra:
        return entry
    feats = np.concatenate([entry.features, np.repeat(entry.features[-1:], extra, axis=0)])
    labels = np.concatenate([entry.labels, np.repeat(entry.labels[-1:], extra)])
    return PhaseDatasetEntry(entry.video_id, feats, labels, entry.fps)


# ---------------------------------------------------------------- sampling


@dataclass(frozen=True)
class Window:
    start: int
    stop: int
    kind: str  # "phase" or "transition"
    phase: int  # sampled phase, or the phase entered at the transition


def balanced_sample_windows(
    labels, length: int, rng: np.random.Generator, per_phase: int = 5
) -> list[Window]:
    """Class-balanced windows for one video.

    ``per_phase`` windows end at a uniformly drawn frame of each present
    phase, and one window is centered on each phase transition. Windows are
    clamped to the video so that every window has exactly ``length`` frames.
    """
    y = np.asarray(labels)
    if length < 1:
        raise ValueError("window length must be >= 1")
    if y.size < length:
        raise ValueError(f"video has {y.size} frames, fewer than window length {length}")
    last_start = y.size - length

    def clamp(start: int) -> int:
        return min(max(start, 0), last_start)

    windows = []
    for p in np.unique(y):
        frames = np.flatnonzero(y == p)
        for t in rng.choice(frames, size=per_phase):
            s = clamp(int(t) - length + 1)
            windows.append(Window(s, s + length, "phase", int(p)))
    for t in transitions(y):
        s = clamp(int(t) - length // 2)
        windows.append(Window(s, s + length, "transition", int(y[t])))
    return windows


def epoch_windows(
    videos: Sequence[PhaseDatasetEntry], length: int, rng: np.random.Generator
) -> list[tuple[str, Window]]:
    return [(v.video_id, w) for v in videos for w in balanced_sample_windows(v.labels, length, rng)]


# ---------------------------------------------------------------- augmentation


def augment_shift(
    entry: PhaseDatasetEntry, rng: np.random.Generator, max_shift: int = 18
) -> PhaseDatasetEntry:
    """Delay the sequence by 0..max_shift frames, repeating the first frame; length is kept."""
    delta = int(rng.integers(0, max_shift + 1))
    return shift_sequence(entry, delta)


def shift_sequence(entry: PhaseDatasetEntry, delta: int) -> PhaseDatasetEntry:
    if delta <= 0:
        return entry
    t = len(entry)
    idx = np.clip(np.arange(t) - delta, 0, None)
    return PhaseDatasetEntry(entry.video_id, entry.features[idx], entry.labels[idx], entry.fps)


def speed_indices(length: int, rng: np.random.Generator, p_drop: float = 0.05, p_dup: float = 0.05) -> np.ndarray:
    """Source-frame indices after independently dropping or duplicating each frame."""
    if p_drop < 0 or p_dup < 0 or p_drop + p_dup > 1:
        raise ValueError("invalid drop/duplicate probabilities")
    u = rng.random(length)
    repeats = np.where(u < p_drop, 0, np.where(u < p_drop + p_dup, 2, 1))
    idx = np.repeat(np.arange(length), repeats)
    if idx.size == 0:
        idx = np.array([0])
    return idx


def augment_speed(
    entry: PhaseDatasetEntry,
    rng: np.random.Generator,
    p_drop: float = 0.05,
    p_dup: float = 0.05,
) -> PhaseDatasetEntry:
    """Randomly drop and duplicate frames; labels follow their frames."""
    idx = speed_indices(len(entry), rng, p_drop, p_dup)
    return PhaseDatasetEntry(entry.video_id, entry.features[idx], entry.labels[idx], entry.fps)


# ---------------------------------------------------------------- token masking


@dataclass
class MaskPlan:
    num_tokens: int
    spans: list[tuple[int, int]] = field(default_factory=list)  # (start, length)

    @property
    def masked(self) -> np.ndarray:
        m = np.zeros(self.num_tokens, dtype=bool)
        for s, n in self.spans:
            m[s : s + n] = True
        return m

    @property
    def coverage(self) -> float:
        return float(self.masked.mean()) if self.num_tokens else 0.0


def transition_tokens(labels, token_size: int = 18) -> np.ndarray:
    """True for every token whose frame window holds more than one phase."""
    y = np.asarray(labels)
    if y.size % token_size:
        raise ValueError(f"length {y.size} is not divisible by {token_size}")
    w = y.reshape(-1, token_size)
    return (w != w[:, :1]).any(axis=1)


def plan_span_mask(
    labels,
    rng: np.random.Generator,
    token_size: int = 18,
    coverage: float = 0.35,
    max_span: int = 17,
) -> MaskPlan:
    """Sample disjoint token spans of 1..max_span tokens up to the target coverage.

    Tokens whose window contains a phase transition are never masked. The
    last span is shortened so coverage does not overshoot the target.
    """
    blocked = transition_tokens(labels, token_size)
    s = blocked.size
    plan = MaskPlan(s)
    target = int(round(coverage * s))
    free = ~blocked
    covered = 0
    while covered < target:
        want = min(int(rng.integers(1, max_span + 1)), target - covered)
        n = want
        starts = np.array([], dtype=int)
        while n >= 1:
            # a span of n tokens fits at start i if free[i:i+n] is all True
            run = np.convolve(free.astype(int), np.ones(n, dtype=int), mode="valid")
            starts = np.flatnonzero(run == n)
            if starts.size:
                break
            n -= 1
        if not starts.size:
            log.info("mask coverage %d/%d tokens, no legal span left", covered, target)
            break
        start = int(rng.choice(starts))
        plan.spans.append((start, n))
        free[start : start + n] = False
        covered += n
    plan.spans.sort()
    return plan


def apply_mask(tokens, plan: MaskPlan, mask_embedding):
    """Replace masked token rows of a ``(S, dim)`` array or tensor with ``mask_embedding``."""
    import torch

    if len(tokens) != plan.num_tokens:
        raise ValueError(f"plan covers {plan.num_tokens} tokens, got {len(tokens)}")
    if isinstance(tokens, torch.Tensor):
        m = torch.from_numpy(plan.masked).to(tokens.device).unsqueeze(-1)
        return torch.where(m, mask_embedding.to(tokens.dtype), tokens)
    out = np.array(tokens, copy=True)
    out[plan.masked] = mask_embedding
    return out
