"""
Causal temporal operators
=========================

Which input frames can each output frame see? We answer with gradients:
an output depends on an input exactly when the gradient between them is
nonzero.
"""

import numpy as np
import torch

from tunes.audit import audit_causality, inject_acausal_downsample
from tunes.model import TunesConfig, build_model
from tunes.ops import ConvBlock, Downsample, TemporalConv, conv_block

torch.manual_seed(0)


def support(module, length, out_index):
    x = torch.randn(1, module_channels(module), length, requires_grad=True)
    y = module(x)[0, :, out_index].sum()
    (g,) = torch.autograd.grad(y, x)
    return np.flatnonzero(g.abs().sum(1)[0].numpy())


def module_channels(module):
    return module.conv.in_channels

# %%
# A dilated causal convolution with kernel 3 and dilation 2 reaches back
# four frames and never forward.
conv = TemporalConv(4, 4, kernel_size=3, dilation=2, mode="causal")
print("causal conv, output 6 reads", support(conv, 10, 6))

# %%
# The acausal variant pads both sides, so it also reads the future.
conv = TemporalConv(4, 4, kernel_size=3, dilation=2, mode="acausal")
print("acausal conv, output 6 reads", support(conv, 10, 6))

# %%
# Downsampling by 3 in causal mode: output s is built from frames up to 3s.
down = Downsample(4, 3, "causal")
for s in range(4):
    print(f"downsample output {s} reads", support(down, 12, s))

# %%
# One residual block with dilation 18 spans 37 frames. Subtracting the
# response to silence removes the bias terms.
block = ConvBlock(8, 18, "acausal")
x = torch.zeros(80, 8)
x[40] = 1.0
with torch.no_grad():
    y = conv_block(x, 18, module=block) - conv_block(torch.zeros_like(x), 18, module=block)
hit = np.flatnonzero(y.abs().sum(1).numpy())
print(f"impulse at 40 reaches frames {hit.tolist()}, a span of {hit.max() - hit.min() + 1}")

# %%
# The full online model, audited end to end, and a broken copy where one
# downsampler was switched to acausal mode.
model = build_model(TunesConfig.online(), seed=0)
print(audit_causality(model, length=72).summary())
inject_acausal_downsample(model, 1)
print(audit_causality(model, length=72).summary())
