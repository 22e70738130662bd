import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def gradient_support(fn, x: torch.Tensor, out_index, out_axis: int, in_axis: int) -> np.ndarray:
    """Per-input-position |gradient| of ``fn(x)`` at ``out_index`` along ``out_axis``."""
    x = x.detach().clone().requires_grad_(True)
    y = fn(x).select(out_axis, out_index)
    (g,) = torch.autograd.grad(y, x, grad_outputs=torch.randn_like(y))
    g = g.abs()
    dims = [d for d in range(g.ndim) if d != in_axis]
    return g.sum(dim=dims).numpy()


def perturbation_support(fn, x: torch.Tensor, out_index, out_axis: int, in_axis: int, eps=1e-3) -> np.ndarray:
    """Finite-difference oracle: which input positions change ``fn(x)`` at ``out_index``."""
    with torch.no_grad():
        base = fn(x).select(out_axis, out_index)
        out = np.zeros(x.shape[in_axis])
        for t in range(x.shape[in_axis]):
            xp = x.clone()
            xp.select(in_axis, t).add_(eps)
            out[t] = float((fn(xp).select(out_axis, out_index) - base).abs().max())
    return out


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}"
    if detail:
        line += f"  [{detail}]"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
