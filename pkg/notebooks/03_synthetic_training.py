"""
Training on synthetic phase sequences
=====================================

Synthetic videos stand in for real surgical recordings: every phase has a
mean feature vector, buried under per-video offsets and correlated noise.
Two phases look almost alike and can only be told apart from context.
"""

import numpy as np

from tunes.experiment import linear_baseline_accuracy, synthetic_benchmark
from tunes.model import TunesConfig, build_model
from tunes.training import TrainConfig, evaluate, train

splits = synthetic_benchmark(0)
print({k: len(v) for k, v in splits.items()}, "videos, feature dim", splits["train"][0].features.shape[1])

# %%
# A single-frame classifier sees no context and tops out early.
print("linear baseline accuracy", round(linear_baseline_accuracy(splits["train"], splits["test"]), 3))

# %%
# The online model only sees the past. A short run is enough to beat the
# baseline; the acceptance suite trains for 75 epochs over five seeds.
epochs = 25
model = build_model(TunesConfig.online(input_dim=64), seed=0)
result = train(model, splits["train"], splits["val"], TrainConfig(epochs=epochs))
for rec in result.history[:: max(1, epochs // 5)]:
    print(f"epoch {rec['epoch']:3d} loss {rec['train_loss']:.3f} val jaccard {rec['val_macro_jaccard']:.3f}")

# %%
strict = evaluate(model, splits["test"])
relaxed = evaluate(model, splits["test"], relaxed=True)
print("test accuracy      ", round(np.mean([m.accuracy for m in strict]), 3))
print("test macro jaccard ", round(np.mean([m.macro_jaccard for m in strict]), 3))
print("relaxed accuracy   ", round(np.mean([m.accuracy for m in relaxed]), 3))
