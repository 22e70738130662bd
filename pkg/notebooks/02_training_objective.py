"""
The multi-scale training objective
==================================

Cross-entropy and smoothing on the full-resolution scores, binary
cross-entropy against max-pooled labels on the coarser scales.
"""

import numpy as np
import torch

from tunes.objectives import (
    bce_loss,
    cross_entropy_loss,
    downsample_labels,
    median_frequency_weights,
    smoothing_loss,
    total_loss,
)

# %%
# Class weights from frame counts: rare phases weigh more.
labels = [np.repeat([1, 2, 3], [60, 30, 10])]
print("weights", median_frequency_weights(labels, 3))

# %%
# Coarse labels are multi-hot where a window straddles a transition.
y = np.array([1, 1, 2, 2, 2, 3, 3, 3, 3])
print(downsample_labels(y, 3, 3))

# %%
# The smoothing term compares each frame with a frozen copy of the
# previous one, so the previous frame receives no gradient from it.
scores = torch.tensor([[0.0, 0.0], [np.log(3), 0.0]], requires_grad=True)
loss = smoothing_loss(scores)
loss.backward()
print("smoothing", loss.item(), "grad of frame 0", scores.grad[0].tolist())

# %%
# Putting the pieces together on random scores for an 18-frame clip.
rng = np.random.default_rng(0)
y = np.repeat([1, 2, 3], 6)
preds = [torch.tensor(rng.normal(size=(18 // s, 3))) for s in (1, 3, 9, 18)]
w = median_frequency_weights([y], 3)
print("CE   ", cross_entropy_loss(preds[0], y, w).item())
print("BCE/3", bce_loss(preds[1], downsample_labels(y, 3, 3), w).item())
print("total", total_loss(preds, y, w).item())
