"""Gradient-based causality audit.

Output element ``s`` of the prediction at scale ``k`` summarizes frames
``[s*k, (s+1)*k)`` and is emitted at frame ``s*k``; an online model must give
it exactly zero gradient with respect to every later input frame. When the
end-to-end check finds a leak, every causality-aware operator is re-checked
in isolation to name the culprit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .attention import TransformerBlock
from .model import OFFLINE, Tunes
from .ops import Downsample, TemporalConv, Upsample


@dataclass
class AuditReport:
    passed: bool
    skipped: bool = False
    notice: str = ""
    length: int = 0
    pairs_checked: int = 0
    rows_checked: int = 0
    violations: list[tuple[int, int, int]] = field(default_factory=list)  # (scale, output, input)
    max_leak: float = 0.0
    offending_operators: list[str] = field(default_factory=list)

    def summary(self) -> str:
        if self.skipped:
            return f"SKIPPED: {self.notice}"
        status = "PASS" if self.passed else "FAIL"
        lines = [
            f"{status}: {self.rows_checked} output rows, {self.pairs_checked} (t, t' > t) pairs "
            f"checked at T={self.length}; {len(self.violations)} violations"
        ]
        if self.violations:
            lines.append(f"max |gradient| from the future: {self.max_leak:.3e}")
        for name in self.offending_operators:
            lines.append(f"non-causal operator: {name}")
        return "\n".join(lines)


def _gradient_rows(fn, x: torch.Tensor, positions, out_axis: int, generator: torch.Generator):
    """Yield ``(position, |d out[position] / d x|)`` summed over every non-time axis of ``x``."""
    x = x.detach().clone().requires_grad_(True)
    y = fn(x)
    for s in positions:
        out = y.select(out_axis, int(s))
        probe = torch.randn(out.shape, generator=generator, dtype=out.dtype)
        (g,) = torch.autograd.grad(out, x, grad_outputs=probe, retain_graph=True)
        yield int(s), g


def _allowed_input(module: nn.Module, s: int) -> int:
    if isinstance(module, Downsample):
        return s * module.factor
    if isinstance(module, Upsample):
        return s // module.factor
    return s


def operator_is_causal(module: nn.Module, channels: int, length: int = 24, seed: int = 0) -> bool:
    """Check one ``(B, C, T)`` operator in isolation by gradient support."""
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(1, channels, length, generator=gen)
    with torch.no_grad():
        n_out = module(x).shape[-1]
    for s, g in _gradient_rows(module, x, range(n_out), 2, gen):
        leak = g[0].abs().sum(dim=0)[_allowed_input(module, s) + 1 :]
        if bool((leak != 0).any()):
            return False
    return True


def find_acausal_operators(model: Tunes, seed: int = 0) -> list[str]:
    """Names of causality-aware submodules that fail the isolated gradient check."""
    dim = model.config.dim
    bad = []
    for name, module in model.named_modules():
        if isinstance(module, (TemporalConv, Downsample, Upsample, TransformerBlock)):
            if isinstance(module, TemporalConv):
                channels = module.conv.in_channels
            else:
                channels = dim
            was = module.training
            module.eval()
            try:
                if not operator_is_causal(module, channels, seed=seed):
                    bad.append(name)
            finally:
                module.train(was)
    return bad


def audit_causality(
    model: Tunes,
    length: int = 72,
    rows_per_scale: int | None = None,
    seed: int = 0,
    check_operators: bool = True,
) -> AuditReport:
    """End-to-end gradient-support audit over every scale head.

    ``rows_per_scale`` samples output positions per scale (all when None).
    Gradients must be exactly zero, not merely small.
    """
    cfg = model.config
    if cfg.mode == OFFLINE:
        return AuditReport(
            passed=True,
            skipped=True,
            notice="offline mode: the model may use future frames by design; audit skipped",
            length=length,
        )
    if length % cfg.scales[-1]:
        raise ValueError(f"audit length must be divisible by {cfg.scales[-1]}")
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    x = torch.randn(1, length, cfg.input_dim, generator=gen)
    report = AuditReport(passed=True, length=length)
    try:
        for k, scale in enumerate(cfg.scales):
            n_out = length // scale
            positions = np.arange(n_out)
            if rows_per_scale is not None and rows_per_scale < n_out:
                positions = np.sort(rng.choice(n_out, rows_per_scale, replace=False))
            rows = _gradient_rows(lambda f, k=k: model(f)[k], x, positions, 1, gen)
            for s, g in rows:
                emitted = s * scale
                per_frame = g[0].abs().sum(dim=1)
                future = per_frame[emitted + 1 :]
                report.rows_checked += 1
                report.pairs_checked += future.numel()
                for t in torch.nonzero(future).flatten().tolist():
                    report.violations.append((scale, s, emitted + 1 + t))
                if future.numel():
                    report.max_leak = max(report.max_leak, float(future.max()))
    finally:
        model.train(was_training)
    report.passed = not report.violations
    if not report.passed and check_operators:
        report.offending_operators = find_acausal_operators(model, seed)
    return report


def inject_acausal_downsample(model: Tunes, index: int = 1) -> str:
    """Switch one encoder downsampling operator to acausal mode (negative control)."""
    model.downs[index].causal = False
    return f"downs.{index}"
