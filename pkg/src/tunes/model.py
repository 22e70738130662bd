"""Multi-scale encoder-decoder over feature sequences with Transformer blocks at the coarsest scale."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .attention import ANTICAUSAL, NONE, AttentionMask, TransformerBlock
from .ops import ACAUSAL, CAUSAL, ConvBlock, Downsample, Upsample

ONLINE = "online"
OFFLINE = "offline"


@dataclass
class TunesConfig:
    input_dim: int = 2048
    dim: int = 64
    num_classes: int = 7
    scales: tuple[int, ...] = (1, 3, 9, 18)
    encoder_dilation: int = 1
    decoder_dilation: int = 18
    num_transformer_blocks: int = 2
    mode: str = ONLINE
    # "causal" or "acausal"; defaults to causal online and acausal offline
    operator_mode: str | None = None
    heads: int = 1
    ffn_dim: int = 256
    kernel_size: int = 3
    blocks_per_stage: int = 2
    # ablation switches
    transformer_conv: bool = True
    attention: bool = True
    alternate_masks: bool = True

    def __post_init__(self) -> None:
        self.scales = tuple(int(s) for s in self.scales)
        if self.mode not in (ONLINE, OFFLINE):
            raise ValueError(f"mode must be 'online' or 'offline', got {self.mode!r}")
        if self.operator_mode is None:
            self.operator_mode = CAUSAL if self.mode == ONLINE else ACAUSAL
        if self.operator_mode not in (CAUSAL, ACAUSAL):
            raise ValueError(f"operator_mode must be 'causal' or 'acausal', got {self.operator_mode!r}")
        if self.mode == ONLINE and self.operator_mode == ACAUSAL:
            raise ValueError("online models cannot use acausal operators")
        if not self.scales or self.scales[0] != 1:
            raise ValueError("scales must start at 1")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("scales must be strictly increasing")
        if any(b % a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("each scale must be a multiple of the previous one")
        if self.num_transformer_blocks < 1:
            raise ValueError("num_transformer_blocks must be >= 1")
        for name in ("input_dim", "dim", "num_classes", "heads", "ffn_dim", "blocks_per_stage"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def online(cls, **kw) -> "TunesConfig":
        return cls(**{"mode": ONLINE, "num_transformer_blocks": 2, **kw})

    @classmethod
    def offline(cls, **kw) -> "TunesConfig":
        return cls(**{"mode": OFFLINE, "num_transformer_blocks": 8, **kw})

    @property
    def factors(self) -> tuple[int, ...]:
        """Successive downsampling factors, e.g. (3, 3, 2) for (1, 3, 9, 18)."""
        return tuple(b // a for a, b in zip(self.scales, self.scales[1:]))

    def mask_for_block(self, i: int) -> AttentionMask:
        if self.mode == ONLINE:
            return AttentionMask(CAUSAL)
        if not self.alternate_masks:
            return AttentionMask(NONE)
        return AttentionMask(CAUSAL if i % 2 == 0 else ANTICAUSAL)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TunesConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class Tunes(nn.Module):
    """Encoder, Transformer bottleneck and decoder with one classifier per scale.

    ``forward`` takes features ``(B, T, input_dim)`` with ``T`` divisible by
    the coarsest scale and returns a list of score tensors ordered from the
    finest scale to the coarsest, each ``(B, T / scale, num_classes)``.
    """

    def __init__(self, config: TunesConfig) -> None:
        super().__init__()
        self.config = config
        c = config
        mode = c.operator_mode
        self.input_proj = nn.Conv1d(c.input_dim, c.dim, 1)

        def stage(dilation: int) -> nn.Sequential:
            return nn.Sequential(
                *[ConvBlock(c.dim, dilation, mode, c.kernel_size) for _ in range(c.blocks_per_stage)]
            )

        self.encoder = nn.ModuleList(stage(c.encoder_dilation) for _ in c.factors)
        self.downs = nn.ModuleList(Downsample(c.dim, f, mode) for f in c.factors)

        self.start_token = nn.Parameter(torch.randn(c.dim) * 0.02)
        self.end_token = nn.Parameter(torch.randn(c.dim) * 0.02)
        self.mask_token = nn.Parameter(torch.randn(c.dim) * 0.02)
        self.bottleneck = nn.ModuleList(
            TransformerBlock(
                c.dim,
                c.mask_for_block(i),
                heads=c.heads,
                ffn_dim=c.ffn_dim,
                conv_mode=mode,
                kernel_size=c.kernel_size,
                use_conv=c.transformer_conv,
                use_attention=c.attention,
            )
            for i in range(c.num_transformer_blocks)
        )

        rev = c.factors[::-1]
        self.ups = nn.ModuleList(Upsample(c.dim, f) for f in rev)
        self.skip_weights = nn.Parameter(torch.ones(len(rev)))
        self.decoder = nn.ModuleList(stage(c.decoder_dilation) for _ in rev)
        # heads[0] sits on the bottleneck, heads[i] after decoder stage i
        self.heads = nn.ModuleList(nn.Linear(c.dim, c.num_classes) for _ in c.scales)

    def encode(self, features: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Input projection and encoder; returns bottleneck input and skip tensors."""
        x = self.input_proj(features.transpose(1, 2))
        skips = []
        for blocks, down in zip(self.encoder, self.downs):
            x = blocks(x)
            skips.append(x)
            x = down(x)
        return x, skips

    def transform(self, x: Tensor, token_mask: Tensor | None = None) -> Tensor:
        """Bottleneck: optional token masking, boundary tokens, Transformer blocks."""
        if token_mask is not None:
            m = token_mask.to(torch.bool).view(1, 1, -1)
            x = torch.where(m, self.mask_token.view(1, -1, 1), x)
        b = x.shape[0]
        start = self.start_token.view(1, -1, 1).expand(b, -1, 1)
        end = self.end_token.view(1, -1, 1).expand(b, -1, 1)
        x = torch.cat([start, x, end], dim=2)
        for block in self.bottleneck:
            x = block(x)
        return x[..., 1:-1]

    def forward(self, features: Tensor, token_mask: Tensor | None = None) -> list[Tensor]:
        c = self.config
        if features.ndim == 2:
            features = features.unsqueeze(0)
        if features.shape[-1] != c.input_dim:
            raise ValueError(
                f"expected feature dim {c.input_dim}, got {features.shape[-1]}"
            )
        if features.shape[1] % c.scales[-1]:
            raise ValueError(
                f"sequence length {features.shape[1]} is not divisible by {c.scales[-1]}"
            )
        x, skips = self.encode(features)
        return self.decode(self.transform(x, token_mask), skips)

    def decode(self, x: Tensor, skips: list[Tensor]) -> list[Tensor]:
        """Decoder stages with weighted skip sums; returns predictions finest first."""
        preds = [self.heads[0](x.transpose(1, 2))]
        for i, (up, blocks) in enumerate(zip(self.ups, self.decoder)):
            x = up(x) + self.skip_weights[i] * skips[-1 - i]
            x = blocks(x)
            preds.append(self.heads[i + 1](x.transpose(1, 2)))
        return preds[::-1]


def build_model(config: TunesConfig, seed: int | None = None) -> Tunes:
    if seed is not None:
        torch.manual_seed(seed)
    return Tunes(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def bottleneck_token_count(config: TunesConfig, length: int) -> int:
    """Tokens seen by the Transformer blocks, including start and end tokens."""
    return -(-length // config.scales[-1]) + 2


def predict_phases(scores: Tensor) -> np.ndarray:
    """Argmax over classes mapped to 1-based phase numbers (ties go to the lower phase)."""
    return scores.argmax(dim=-1).cpu().numpy().astype(np.int64) + 1


CHECKPOINT_CONFIG_KEY = "__config__"


def save_checkpoint(model: Tunes, path: str | Path) -> None:
    """Write parameters as little-endian float32 arrays plus the JSON config in one ``.npz``."""
    arrays = {
        name: t.detach().cpu().numpy().astype("<f4") for name, t in model.state_dict().items()
    }
    blob = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    arrays[CHECKPOINT_CONFIG_KEY] = np.frombuffer(blob, dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> Tunes:
    with np.load(path, allow_pickle=False) as data:
        blob = data[CHECKPOINT_CONFIG_KEY].tobytes()
        config = TunesConfig.from_dict(json.loads(blob))
        state = {
            k: torch.from_numpy(np.ascontiguousarray(data[k], dtype="<f4").astype(np.float32))
            for k in data.files
            if k != CHECKPOINT_CONFIG_KEY
        }
    model = Tunes(config)
    model.load_state_dict(state)
    return model
